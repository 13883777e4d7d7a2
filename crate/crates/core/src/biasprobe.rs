//! Language bias probe over per-layer hidden states.
//!
//! For every layer the embeddings of all languages and samples are pooled and
//! z-scored per dimension. The bias between two languages is then the mean,
//! over parallel samples, of the squared L2 distance between their
//! standardized embeddings. The layer whose mean off-diagonal bias is lowest
//! is the semantic layer.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::HiddenStateDump;
use crate::Scalar;

/// Columns whose population standard deviation falls below this are only
/// centered, not scaled.
pub const STD_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("need at least {needed} {what}, got {got}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("layer {layer} out of range for a dump with {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("inconsistent language ordering: {0}")]
    Inconsistent(String),
    #[error("invalid bias matrix: {0}")]
    InvalidMatrix(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BiasError> = std::result::Result<T, E>;

/// Dense row-major `[rows][dim]` matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    rows: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Embeddings<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(BiasError::Shape(format!(
                "{} values cannot fill {rows} x {dim}",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(BiasError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

/// Per-dimension z-score over all rows, using the population standard
/// deviation.
pub fn standardize<T: Scalar>(embeddings: &Embeddings<T>) -> Result<Embeddings<T>> {
    let (rows, dim) = (embeddings.rows, embeddings.dim);
    if rows < 2 {
        return Err(BiasError::Insufficient {
            what: "rows to standardize",
            needed: 2,
            got: rows,
        });
    }
    let n = T::of_usize(rows);
    let eps = T::of(STD_EPSILON);
    let mut mean = vec![T::zero(); dim];
    for r in 0..rows {
        for (m, &x) in mean.iter_mut().zip(embeddings.row(r)) {
            *m = *m + x;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut var = vec![T::zero(); dim];
    for r in 0..rows {
        for ((v, &x), &m) in var.iter_mut().zip(embeddings.row(r)).zip(&mean) {
            let c = x - m;
            *v = *v + c * c;
        }
    }
    let scale: Vec<T> = var
        .iter()
        .map(|&v| {
            let std = (v / n).sqrt();
            if std < eps {
                T::one()
            } else {
                std
            }
        })
        .collect();

    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        for ((&x, &m), &s) in embeddings.row(r).iter().zip(&mean).zip(&scale) {
            data.push((x - m) / s);
        }
    }
    Ok(Embeddings { rows, dim, data })
}

/// Symmetric language-pair bias matrix for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BiasMatrix<T> {
    pub layer: usize,
    pub languages: Vec<String>,
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> BiasMatrix<T> {
    /// Checks squareness, zero diagonal, symmetry, finiteness and
    /// non-negativity.
    pub fn new(layer: usize, languages: Vec<String>, values: Vec<Vec<T>>) -> Result<Self> {
        let m = Self {
            layer,
            languages,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a matrix from the strict upper triangle given as
    /// `(a, b, value)` triples; missing pairs are an error.
    pub fn from_pairs(layer: usize, languages: &[&str], pairs: &[(&str, &str, T)]) -> Result<Self> {
        let n = languages.len();
        let idx = |code: &str| {
            languages
                .iter()
                .position(|l| *l == code)
                .ok_or_else(|| BiasError::InvalidMatrix(format!("unknown language {code:?}")))
        };
        let mut values = vec![vec![T::nan(); n]; n];
        for (i, row) in values.iter_mut().enumerate() {
            row[i] = T::zero();
        }
        for &(a, b, v) in pairs {
            let (i, j) = (idx(a)?, idx(b)?);
            values[i][j] = v;
            values[j][i] = v;
        }
        Self::new(
            layer,
            languages.iter().map(|s| s.to_string()).collect(),
            values,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.languages.len();
        if n == 0 {
            return Err(BiasError::InvalidMatrix("no languages".into()));
        }
        for (i, a) in self.languages.iter().enumerate() {
            if self.languages[..i].contains(a) {
                return Err(BiasError::InvalidMatrix(format!("duplicate language {a:?}")));
            }
        }
        if self.values.len() != n || self.values.iter().any(|r| r.len() != n) {
            return Err(BiasError::InvalidMatrix(format!("values are not {n} x {n}")));
        }
        for i in 0..n {
            if self.values[i][i] != T::zero() {
                return Err(BiasError::InvalidMatrix(format!(
                    "non-zero diagonal at {}",
                    self.languages[i]
                )));
            }
            for j in 0..n {
                let v = self.values[i][j];
                if !v.is_finite() || v < T::zero() {
                    return Err(BiasError::InvalidMatrix(format!(
                        "entry ({}, {}) = {v} is not finite and non-negative",
                        self.languages[i], self.languages[j]
                    )));
                }
                if v != self.values[j][i] {
                    return Err(BiasError::InvalidMatrix(format!(
                        "asymmetric entry ({}, {})",
                        self.languages[i], self.languages[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == code)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<T> {
        Some(self.values[self.index_of(a)?][self.index_of(b)?])
    }

    /// Mean over the strict upper triangle.
    pub fn mean_offdiag(&self) -> Result<T> {
        let n = self.languages.len();
        if n < 2 {
            return Err(BiasError::Insufficient {
                what: "languages for an off-diagonal mean",
                needed: 2,
                got: n,
            });
        }
        let mut sum = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                sum = sum + self.values[i][j];
            }
        }
        Ok(sum / T::of_usize(n * (n - 1) / 2))
    }
}

/// Mean off-diagonal bias per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BiasCurve<T> {
    pub values: Vec<T>,
}

/// Pools every language and sample of `layer` into `[languages * samples][dim]`
/// rows, language-major.
pub fn layer_embeddings<T: Scalar>(dump: &HiddenStateDump, layer: usize) -> Result<Embeddings<T>> {
    if layer >= dump.layers {
        return Err(BiasError::LayerOutOfRange {
            layer,
            layers: dump.layers,
        });
    }
    let data = dump.layer_slice(layer).iter().map(|&v| T::of_f32(v)).collect();
    Embeddings::new(dump.languages.len() * dump.samples, dump.dim, data)
}

pub fn standardized_layer<T: Scalar>(dump: &HiddenStateDump, layer: usize) -> Result<Embeddings<T>> {
    standardize(&layer_embeddings(dump, layer)?)
}

/// Bias matrix from already-prepared embeddings laid out language-major
/// (`row = language * samples + sample`). No standardization is applied.
#[allow(clippy::needless_range_loop)]
pub fn bias_from_embeddings<T: Scalar>(
    layer: usize,
    languages: &[String],
    samples: usize,
    embeddings: &Embeddings<T>,
) -> Result<BiasMatrix<T>> {
    let n = languages.len();
    if samples == 0 {
        return Err(BiasError::Insufficient {
            what: "samples",
            needed: 1,
            got: 0,
        });
    }
    if embeddings.rows != n * samples {
        return Err(BiasError::Shape(format!(
            "{} rows for {n} languages x {samples} samples",
            embeddings.rows
        )));
    }
    let m = T::of_usize(samples);
    let mut values = vec![vec![T::zero(); n]; n];
    for j in 0..n {
        for k in j + 1..n {
            let mut total = T::zero();
            for s in 0..samples {
                let a = embeddings.row(j * samples + s);
                let b = embeddings.row(k * samples + s);
                let mut d = T::zero();
                for (&x, &y) in a.iter().zip(b) {
                    let diff = x - y;
                    d = d + diff * diff;
                }
                total = total + d;
            }
            let v = total / m;
            values[j][k] = v;
            values[k][j] = v;
        }
    }
    BiasMatrix::new(layer, languages.to_vec(), values)
}

pub fn pairwise_bias<T: Scalar>(dump: &HiddenStateDump, layer: usize) -> Result<BiasMatrix<T>> {
    let emb = standardized_layer::<T>(dump, layer)?;
    bias_from_embeddings(layer, &dump.languages, dump.samples, &emb)
}

/// One bias matrix per layer, index 0 being the embedding output. Layers are
/// computed independently (in parallel on the current rayon pool).
pub fn probe_all_layers<T: Scalar>(dump: &HiddenStateDump) -> Result<Vec<BiasMatrix<T>>> {
    (0..dump.layers)
        .into_par_iter()
        .map(|layer| pairwise_bias(dump, layer))
        .collect()
}

pub fn mean_bias_curve<T: Scalar>(matrices: &[BiasMatrix<T>]) -> Result<BiasCurve<T>> {
    let first = matrices.first().ok_or(BiasError::Empty("no bias matrices"))?;
    let mut values = Vec::with_capacity(matrices.len());
    for m in matrices {
        if m.languages != first.languages {
            return Err(BiasError::Inconsistent(format!(
                "layer {} has languages {:?}, layer {} has {:?}",
                first.layer, first.languages, m.layer, m.languages
            )));
        }
        values.push(m.mean_offdiag()?);
    }
    Ok(BiasCurve { values })
}

/// Index of the minimum curve entry; the earliest index wins ties.
pub fn semantic_layer<T: Scalar>(curve: &BiasCurve<T>) -> Result<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in curve.values.iter().enumerate() {
        match best {
            Some((_, b)) if v.partial_cmp(&b) != Some(std::cmp::Ordering::Less) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).ok_or(BiasError::Empty("empty bias curve"))
}

/// Writes standardized embeddings of one layer as CSV:
/// `language,sample_index,d0,..,d{dim-1}`.
pub fn export_embeddings<W: Write>(dump: &HiddenStateDump, layer: usize, destination: W) -> Result<()> {
    let emb = standardized_layer::<f64>(dump, layer)?;
    let mut w = csv::Writer::from_writer(destination);
    let mut header = vec!["language".to_string(), "sample_index".to_string()];
    header.extend((0..dump.dim).map(|d| format!("d{d}")));
    w.write_record(&header)?;
    for (li, lang) in dump.languages.iter().enumerate() {
        for s in 0..dump.samples {
            let mut record = Vec::with_capacity(dump.dim + 2);
            record.push(lang.clone());
            record.push(s.to_string());
            record.extend(emb.row(li * dump.samples + s).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}
