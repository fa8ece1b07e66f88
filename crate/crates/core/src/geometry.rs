//! Token-embedding geometry: pairwise MSE, angles, norms and norm scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// `L × d` token embeddings, one token per row.
pub type EmbeddingMatrix = Matrix;

/// Squared L2 distance divided by the dimension.
pub fn pairwise_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(ss / a.len() as f64)
}

/// Angle in `[0, π]` between two nonzero vectors.
pub fn cosine_angle(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_angle(a, b)?.cos())
}

/// Multiplies row `k` by `alphas[k]`.
pub fn scale_embeddings(t: &EmbeddingMatrix, alphas: &[f64]) -> Result<EmbeddingMatrix> {
    if alphas.len() != t.rows() {
        return Err(Error::DimensionMismatch { expected: t.rows(), got: alphas.len() });
    }
    if let Some((index, &value)) = alphas.iter().enumerate().find(|(_, a)| !(**a > 0.0)) {
        return Err(Error::NonPositiveScale { index, value });
    }
    let mut out = t.clone();
    for (k, alpha) in alphas.iter().enumerate() {
        out.row_mut(k).iter_mut().for_each(|v| *v *= alpha);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub pair: (usize, usize),
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySnapshot {
    pub norms: Vec<f64>,
    pub mse: Vec<PairValue>,
    /// Radians.
    pub angles: Vec<PairValue>,
}

pub fn snapshot(t: &EmbeddingMatrix, pairs: &[(usize, usize)]) -> Result<GeometrySnapshot> {
    let len = t.rows();
    for &(i, j) in pairs {
        for index in [i, j] {
            if index >= len {
                return Err(Error::IndexOutOfRange { index, len });
            }
        }
    }
    let norms = (0..len).map(|k| norm(t.row(k))).collect();
    let mut mse = Vec::with_capacity(pairs.len());
    let mut angles = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        mse.push(PairValue { pair: (i, j), value: pairwise_mse(t.row(i), t.row(j))? });
        angles.push(PairValue { pair: (i, j), value: cosine_angle(t.row(i), t.row(j))? });
    }
    Ok(GeometrySnapshot { norms, mse, angles })
}
