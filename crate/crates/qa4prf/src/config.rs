//! Flat `key=value` configuration files shared by every subcommand.
//! Resolution order for any setting: command-line flag, then config file,
//! then built-in default.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::read_utf8;
use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    map: HashMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `key=value` per line; blank lines and `#` comments ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let data = read_utf8(path)?;
        let mut map = HashMap::new();
        for (lineno, line) in data.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected `key=value`".to_string(),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(ConfigFile { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }
}

/// flag > config file > default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("config key `{key}`: malformed value `{raw}`"))
        }),
        None => Ok(default),
    }
}
