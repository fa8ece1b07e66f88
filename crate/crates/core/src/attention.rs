//! Single-head cross-attention between latent tokens and text tokens, and the
//! distribution functionals (entropy, KL, Bhattacharyya) used by the losses.

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::numerics::{softmax_rows, Matrix};

const DIST_TOL: f64 = 1e-10;

/// Query/key/value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    /// `d₂ × d`
    pub w_q: Matrix,
    /// `d₁ × d`
    pub w_k: Matrix,
    /// `d₁ × d`
    pub w_v: Matrix,
}

impl ProjectionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.cols();
        for m in [&w_k, &w_v] {
            if m.cols() != d {
                return Err(Error::DimensionMismatch { expected: d, got: m.cols() });
            }
        }
        if w_k.rows() != w_v.rows() {
            return Err(Error::DimensionMismatch { expected: w_k.rows(), got: w_v.rows() });
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Inner (key) dimension `d`.
    pub fn inner_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// Raw maps `p` (`N × L`, rows are distributions over text tokens) and their
/// per-token normalisation `a` (column `i` is `A_i`, a distribution over the
/// `N` latent positions).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub p: Matrix,
    pub a: Matrix,
}

impl AttentionState {
    pub fn from_p(p: Matrix) -> Result<Self> {
        let a = normalize_columns(&p)?;
        Ok(Self { p, a })
    }

    /// `A_i` as an owned vector.
    pub fn dist(&self, token: usize) -> Vec<f64> {
        self.a.column(token)
    }
}

pub fn normalize_columns(p: &Matrix) -> Result<Matrix> {
    let mut a = p.clone();
    for j in 0..p.cols() {
        let s: f64 = (0..p.rows()).map(|i| p[(i, j)]).sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateColumn { column: j });
        }
        for i in 0..p.rows() {
            a[(i, j)] /= s;
        }
    }
    Ok(a)
}

/// Scaled logits `H W_Q (T W_K)ᵀ / √d`.
pub fn attention_logits(h: &EmbeddingMatrix, t: &EmbeddingMatrix, w: &ProjectionWeights) -> Result<Matrix> {
    check_dims(h, t, w)?;
    let q = h.matmul(&w.w_q)?;
    let k = t.matmul(&w.w_k)?;
    Ok(q.matmul_t(&k)?.scale(1.0 / (w.inner_dim() as f64).sqrt()))
}

pub(crate) fn check_dims(h: &EmbeddingMatrix, t: &EmbeddingMatrix, w: &ProjectionWeights) -> Result<()> {
    if h.cols() != w.latent_dim() {
        return Err(Error::DimensionMismatch { expected: w.latent_dim(), got: h.cols() });
    }
    if t.cols() != w.text_dim() {
        return Err(Error::DimensionMismatch { expected: w.text_dim(), got: t.cols() });
    }
    Ok(())
}

pub fn cross_attention_maps(
    h: &EmbeddingMatrix,
    t: &EmbeddingMatrix,
    w: &ProjectionWeights,
) -> Result<AttentionState> {
    let p = softmax_rows(&attention_logits(h, t, w)?);
    AttentionState::from_p(p)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::NotDistribution { reason: "empty".into() });
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::NotDistribution { reason: format!("entry {v} is negative or non-finite") });
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::NotDistribution { reason: format!("sums to {s}") });
    }
    Ok(())
}

/// `D_KL(p ‖ q)` in nats with `0·log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut kl = 0.0;
    for (position, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::AbsoluteContinuityViolation { position });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// `Σ √(p_i q_i)`.
pub fn bhattacharyya_coeff(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum::<f64>().min(1.0))
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum::<f64>().max(0.0))
}
