//! Textual checkpoint format shared by the pointer network and the
//! statistical ranker: a magic line, one `key=value` hyper-parameter line,
//! then named tensors in row-major decimal floats. Round-trips are
//! value-exact at double precision.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;

use crate::error::Error;
use crate::Result;

pub(crate) fn write_checkpoint<W: Write>(
    w: &mut W,
    magic: &str,
    hyper: &[(&str, String)],
    tensors: &[(String, &Array2<f64>)],
) -> std::io::Result<()> {
    writeln!(w, "{magic}")?;
    let line: Vec<String> = hyper.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(w, "{}", line.join(" "))?;
    for (name, t) in tensors {
        writeln!(w, "tensor {name} {} {}", t.nrows(), t.ncols())?;
        for row in t.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", cells.join(" "))?;
        }
    }
    Ok(())
}

pub(crate) struct Checkpoint {
    pub hyper: HashMap<String, String>,
    pub tensors: HashMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn hyper_parse<T: std::str::FromStr>(&self, key: &str, path: &str) -> Result<T> {
        self.hyper
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint {
                path: path.to_string(),
                msg: format!("missing or malformed hyper-parameter `{key}`"),
            })
    }

    pub fn tensor(&self, name: &str, path: &str) -> Result<Array2<f64>> {
        self.tensors.get(name).cloned().ok_or_else(|| Error::Checkpoint {
            path: path.to_string(),
            msg: format!("missing tensor `{name}`"),
        })
    }
}

pub(crate) fn read_checkpoint(data: &str, magic: &str, path: &str) -> Result<Checkpoint> {
    let err = |msg: String| Error::Checkpoint {
        path: path.to_string(),
        msg,
    };
    let mut lines = data.lines();
    let first = lines.next().ok_or_else(|| err("empty checkpoint".into()))?;
    if first != magic {
        return Err(err(format!("bad magic `{first}`, expected `{magic}`")));
    }
    let mut hyper = HashMap::new();
    for pair in lines
        .next()
        .ok_or_else(|| err("missing hyper-parameter line".into()))?
        .split_whitespace()
    {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| err(format!("bad hyper-parameter `{pair}`")))?;
        hyper.insert(k.to_string(), v.to_string());
    }
    let mut tensors = HashMap::new();
    let mut lines = lines.peekable();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "tensor" {
            return Err(err(format!("bad tensor header `{header}`")));
        }
        let name = fields[1].to_string();
        let rows: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad row count in `{header}`")))?;
        let cols: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("bad col count in `{header}`")))?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| err(format!("truncated tensor `{name}`")))?;
            for cell in line.split_whitespace() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(format!("bad float `{cell}` in tensor `{name}`")))?;
                values.push(v);
            }
        }
        if values.len() != rows * cols {
            return Err(err(format!("tensor `{name}` has wrong element count")));
        }
        let t = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| err(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name, t);
    }
    Ok(Checkpoint { hyper, tensors })
}
