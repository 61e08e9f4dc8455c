//! Static word-embedding tables (fastText/GloVe text format).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StaticEmbeddings {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl StaticEmbeddings {
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut words = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (w, v) in pairs {
            if let Some(first) = rows.first() {
                if first.len() != v.len() {
                    return Err(Error::Dimension {
                        expected: first.len(),
                        actual: v.len(),
                    });
                }
            }
            words.push(w.into());
            rows.push(v);
        }
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let vectors = Array2::from_shape_vec((words.len(), dim), flat).expect("rows have equal length");
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(StaticEmbeddings { words, index, vectors })
    }

    /// One token per line followed by whitespace-separated floats. The dimension
    /// comes from the first vector line; a leading `count dim` header is skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            if lineno == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let vector = values
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            let expected = *dim.get_or_insert(vector.len());
            if vector.len() != expected || expected == 0 {
                return Err(parse_err(format!("expected {expected} values, found {}", vector.len())));
            }
            pairs.push((word.to_string(), vector));
        }
        Self::from_pairs(pairs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (w, row) in self.words.iter().zip(self.vectors.rows()) {
            out.push_str(w);
            for v in row {
                // shortest representation that parses back to the same f64
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(word).map(|&i| self.vectors.row(i))
    }

    /// Mean vector of the in-vocabulary tokens, `None` when there are none.
    pub fn mean<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Array1<f64>> {
        let mut sum = Array1::zeros(self.dim());
        let mut n = 0usize;
        for t in tokens {
            if let Some(v) = self.get(t.as_ref()) {
                sum += &v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}
