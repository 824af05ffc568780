//! Client similarity from LoRA `B` factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Frobenius,
    Cosine,
}

/// Symmetric, nonnegative `n×n` matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry, the zero diagonal and nonnegativity.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::dim("distance matrix storage", n * n, entries.len()));
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "distance diagonal ({i},{i}) is nonzero"
                )));
            }
            for j in 0..n {
                let v = entries[i * n + j];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "distance ({i},{j}) = {v} is negative or non-finite"
                    )));
                }
                if v != entries[j * n + i] {
                    return Err(Error::InvalidArgument(format!("distance ({i},{j}) is not symmetric")));
                }
            }
        }
        Ok(DistanceMatrix { n, entries })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::dim("distance matrix row", n, r.len()));
            }
            entries.extend_from_slice(r);
        }
        DistanceMatrix::new(n, entries)
    }

    pub fn zeros(n: usize) -> Self {
        DistanceMatrix {
            n,
            entries: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// Sets `(i,j)` and `(j,i)`.
    fn set_pair(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.n + j] = v;
        self.entries[j * self.n + i] = v;
    }
}

/// `‖X−Y‖_F` or `1 − cos(vec X, vec Y)`.
///
/// Cosine on zero matrices: both zero gives 0, exactly one zero gives 1.
pub fn pairwise_distance(x: &Matrix, y: &Matrix, metric: Metric) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::InvalidArgument(format!(
            "distance operands differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    match metric {
        Metric::Frobenius => Ok(x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
        Metric::Cosine => {
            let nx = x.frobenius_norm();
            let ny = y.frobenius_norm();
            match (nx == 0.0, ny == 0.0) {
                (true, true) => Ok(0.0),
                (true, false) | (false, true) => Ok(1.0),
                (false, false) => {
                    let cos = x.frobenius_inner(y)? / (nx * ny);
                    Ok((1.0 - cos).clamp(0.0, 2.0))
                }
            }
        }
    }
}

/// `D_ij = dist(B_i, B_j)` over one layer's `B` factors.
pub fn layer_distance_matrix(bs: &[&Matrix], metric: Metric) -> Result<DistanceMatrix> {
    let n = bs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 clients, got {n}")));
    }
    let mut d = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            d.set_pair(i, j, pairwise_distance(bs[i], bs[j], metric)?);
        }
    }
    Ok(d)
}

/// Plain mean of per-layer distance matrices. `per_layer[l][k]` is client
/// `k`'s `B` at layer `l`.
pub fn global_distance_matrix(per_layer: &[Vec<&Matrix>], metric: Metric) -> Result<DistanceMatrix> {
    let layers = per_layer
        .iter()
        .map(|bs| layer_distance_matrix(bs, metric))
        .collect::<Result<Vec<_>>>()?;
    mean_distance_matrix(&layers)
}

pub fn mean_distance_matrix(layers: &[DistanceMatrix]) -> Result<DistanceMatrix> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one layer".into()))?;
    let n = first.n;
    for d in layers {
        if d.n != n {
            return Err(Error::dim("client count across layers", n, d.n));
        }
    }
    let count = layers.len() as f64;
    let mut out = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let sum: f64 = layers.iter().map(|d| d.get(i, j)).sum();
            out.set_pair(i, j, sum / count);
        }
    }
    Ok(out)
}
