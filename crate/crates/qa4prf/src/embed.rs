//! Word embeddings (text-format pre-trained vectors or seeded random)
//! plus sinusoidal positional encodings. The initial embedding of a token
//! is the elementwise sum of the two.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{read_utf8, TermId, Vocabulary};
use crate::error::Error;
use crate::Result;

pub const DEFAULT_DIM: usize = 64;

/// Fixed per-term vectors. Terms missing from a loaded file get a vector
/// that is a pure function of (term string, seed), so repeated loads are
/// identical across processes.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn seeded_vector(term: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(term.as_bytes()));
    (0..dim).map(|_| rng.gen_range(-0.1..0.1)).collect()
}

impl EmbeddingTable {
    /// Every vocabulary term gets a seeded random vector in [-0.1, 0.1].
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let vectors = vocab
            .iter()
            .map(|(_, term)| seeded_vector(term, seed, dim))
            .collect();
        EmbeddingTable { dim, vectors, seed }
    }

    /// Seeded random vectors for `count` synthetic term ids, without a
    /// vocabulary. Test-only convenience.
    #[cfg(test)]
    pub(crate) fn random_for_test(count: usize, dim: usize) -> Self {
        let vectors = (0..count)
            .map(|i| seeded_vector(&format!("t{i}"), 0, dim))
            .collect();
        EmbeddingTable { dim, vectors, seed: 0 }
    }

    /// Explicit per-term vectors, indexed by term id.
    pub fn from_vectors(vectors: Vec<Vec<f64>>, seed: u64) -> Self {
        let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
        assert!(vectors.iter().all(|v| v.len() == dim));
        EmbeddingTable { dim, vectors, seed }
    }

    /// Load a text vector file (optional `count dim` header, then
    /// `term v1 ... vd` per line). Vocabulary terms absent from the file
    /// fall back to seeded random vectors.
    pub fn load(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let data = read_utf8(path)?;
        let path_str = path.display().to_string();
        let mut dim: Option<usize> = None;
        let mut file_vectors: std::collections::HashMap<String, Vec<f64>> =
            std::collections::HashMap::new();

        for (lineno, line) in data.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            // Optional first-line header `count dim`.
            if lineno == 0 && fields.len() == 2 {
                if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                    dim = Some(d);
                    continue;
                }
            }
            if fields.len() < 2 {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno + 1,
                    msg: "expected `term v1 ... vd`".to_string(),
                });
            }
            let term = fields[0];
            let values: Vec<f64> = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        path: path_str.clone(),
                        line: lineno + 1,
                        msg: format!("malformed float `{f}`"),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Parse {
                        path: path_str,
                        line: lineno + 1,
                        msg: format!("dimension mismatch: expected {d}, got {}", values.len()),
                    });
                }
                _ => {}
            }
            file_vectors.insert(term.to_string(), values);
        }

        let dim = dim.ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "empty vector file".to_string(),
        })?;

        let vectors = vocab
            .iter()
            .map(|(_, term)| {
                file_vectors
                    .get(term)
                    .cloned()
                    .unwrap_or_else(|| seeded_vector(term, seed, dim))
            })
            .collect();
        Ok(EmbeddingTable { dim, vectors, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vector(&self, id: TermId) -> &[f64] {
        &self.vectors[id.0 as usize]
    }

    /// Serialize in the same text vector format that `load` reads.
    pub fn write<W: Write>(&self, w: &mut W, vocab: &Vocabulary) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.vectors.len(), self.dim)?;
        for (id, term) in vocab.iter() {
            write!(w, "{term}")?;
            for v in self.vector(id) {
                write!(w, " {v:.17e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Transformer-style sinusoidal positional encoding.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    dim: usize,
    max_position: usize,
}

impl PositionalEncoding {
    pub fn new(dim: usize, max_position: usize) -> Self {
        PositionalEncoding { dim, max_position }
    }

    pub fn max_position(&self) -> usize {
        self.max_position
    }

    /// PE(pos, 2i) = sin(pos / 10000^{2i/d}), PE(pos, 2i+1) = cos(same).
    pub fn encode(&self, position: usize) -> Result<Vec<f64>> {
        if position >= self.max_position {
            return Err(Error::PositionOverflow {
                position,
                max: self.max_position,
            });
        }
        let mut out = vec![0.0; self.dim];
        for k in 0..self.dim {
            let i = k / 2;
            let angle = position as f64 / 10000f64.powf(2.0 * i as f64 / self.dim as f64);
            out[k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        Ok(out)
    }
}

/// Word vector plus positional encoding.
pub fn initial_embedding(
    table: &EmbeddingTable,
    pe: &PositionalEncoding,
    term: TermId,
    position: usize,
) -> Result<Vec<f64>> {
    let enc = pe.encode(position)?;
    Ok(table
        .vector(term)
        .iter()
        .zip(enc.iter())
        .map(|(w, p)| w + p)
        .collect())
}
