//! Machine-readable pipeline reports: geometry before/after, loss trace and
//! attention summaries. Serialised with sorted keys so reports diff cleanly.

use serde::{Deserialize, Serialize};

use crate::attention::{bhattacharyya_coeff, shannon_entropy, AttentionState};
use crate::capo::CapoEvent;
use crate::error::{Error, Result};
use crate::geometry::{snapshot, EmbeddingMatrix, GeometrySnapshot, PairValue};
use crate::optim::{total_loss, BindingConfig, LossBreakdown};
use crate::prompt::{inter_np_pairs, PromptAnnotation};

/// Tolerance for the `total = ent + λ·bhat` consistency check.
pub const LOSS_CONSISTENCY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenValue {
    pub token: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryDeltas {
    pub mse: Vec<PairValue>,
    pub angle: Vec<PairValue>,
    /// Object tokens only.
    pub norm: Vec<TokenValue>,
    pub median_mse: f64,
    pub median_angle: f64,
    pub median_norm: f64,
    pub all_medians_increased: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryReport {
    pub before: GeometrySnapshot,
    pub after: GeometrySnapshot,
    pub deltas: GeometryDeltas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub entropy: Vec<TokenValue>,
    pub bhattacharyya: Vec<PairValue>,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub before: AttentionStats,
    pub after: AttentionStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingReport {
    pub config: BindingConfig,
    pub geometry_before: GeometrySnapshot,
    pub geometry_after: GeometrySnapshot,
    pub deltas: GeometryDeltas,
    pub loss_trace: Vec<LossBreakdown>,
    pub attention_summary: AttentionSummary,
    pub events: Vec<CapoEvent>,
}

/// Median of a non-empty slice; 0 for an empty one.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pair_deltas(before: &[PairValue], after: &[PairValue]) -> Vec<PairValue> {
    before.iter().zip(after).map(|(b, a)| PairValue { pair: b.pair, value: a.value - b.value }).collect()
}

pub fn geometry_report(
    before: &EmbeddingMatrix,
    after: &EmbeddingMatrix,
    annotation: &PromptAnnotation,
) -> Result<GeometryReport> {
    if before.shape() != after.shape() {
        return Err(Error::ShapeMismatch(format!("before is {:?}, after is {:?}", before.shape(), after.shape())));
    }
    let pairs = inter_np_pairs(annotation);
    let snap_before = snapshot(before, &pairs)?;
    let snap_after = snapshot(after, &pairs)?;
    let mse = pair_deltas(&snap_before.mse, &snap_after.mse);
    let angle = pair_deltas(&snap_before.angles, &snap_after.angles);
    let norm: Vec<TokenValue> = annotation
        .object_indices()
        .into_iter()
        .map(|k| TokenValue { token: k, value: snap_after.norms[k] - snap_before.norms[k] })
        .collect();
    let values = |v: &[PairValue]| v.iter().map(|p| p.value).collect::<Vec<_>>();
    let median_mse = median(&values(&mse));
    let median_angle = median(&values(&angle));
    let median_norm = median(&norm.iter().map(|t| t.value).collect::<Vec<_>>());
    let deltas = GeometryDeltas {
        all_medians_increased: median_mse > 0.0 && median_angle > 0.0 && median_norm > 0.0,
        mse,
        angle,
        norm,
        median_mse,
        median_angle,
        median_norm,
    };
    Ok(GeometryReport { before: snap_before, after: snap_after, deltas })
}

/// Entropy of every object map and BC of every inter-NP pair.
pub fn attention_stats(state: &AttentionState, annotation: &PromptAnnotation, lambda: f64) -> Result<AttentionStats> {
    let entropy = annotation
        .object_indices()
        .into_iter()
        .map(|k| Ok(TokenValue { token: k, value: shannon_entropy(&state.dist(k))? }))
        .collect::<Result<Vec<_>>>()?;
    let bhattacharyya = inter_np_pairs(annotation)
        .into_iter()
        .map(|(m, n)| Ok(PairValue { pair: (m, n), value: bhattacharyya_coeff(&state.dist(m), &state.dist(n))? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionStats { entropy, bhattacharyya, loss: total_loss(state, annotation, lambda)? })
}

/// Pretty JSON with keys sorted at every level, newline-terminated.
pub fn sorted_json<T: Serialize + ?Sized>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("serialisable");
    let mut s = serde_json::to_string_pretty(&value).expect("value serialises");
    s.push('\n');
    s
}

impl BindingReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    /// Checks the report's internal invariants.
    pub fn check_consistency(&self) -> Result<()> {
        let lambda = self.config.lambda;
        let loss_records = self
            .loss_trace
            .iter()
            .chain([&self.attention_summary.before.loss, &self.attention_summary.after.loss]);
        for (i, lb) in loss_records.enumerate() {
            let expect = lb.ent + lambda * lb.bhat;
            if (lb.total - expect).abs() > LOSS_CONSISTENCY_TOL * expect.abs().max(1.0) {
                return Err(Error::Verification(format!("loss record {i}: total {} != ent + λ·bhat {expect}", lb.total)));
            }
        }
        let pairs = |s: &GeometrySnapshot| s.mse.iter().map(|p| p.pair).collect::<Vec<_>>();
        if pairs(&self.geometry_before) != pairs(&self.geometry_after) {
            return Err(Error::Verification("before/after snapshots cover different pairs".into()));
        }
        Ok(())
    }
}
