//! Entropy + Bhattacharyya objective over the cross-attention maps, its
//! hand-derived reverse-mode gradient, and the gradient-descent loop.
//!
//! Forward chain:
//!
//! ```text
//! T ──mix──▶ T* ──W_K──▶ K ─┐
//! H ──W_Q──▶ Q ─────────────┴▶ Z = QKᵀ/√d ──row softmax──▶ P ──column normalise──▶ A ──▶ loss
//! ```
//!
//! The backward pass walks the same chain in reverse, one vector-Jacobian
//! product per arrow.

use serde::{Deserialize, Serialize};

use crate::atm::{apply_mixing, check_sizes, clamp_mixing, init_mixing, MixingSet, DEFAULT_CLAMP_BOUND};
use crate::attention::{
    bhattacharyya_coeff, check_dims, cross_attention_maps, shannon_entropy, AttentionState, ProjectionWeights,
};
use crate::capo::CausalityMode;
use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::numerics::Matrix;
use crate::prompt::{inter_np_pairs, PromptAnnotation};

/// Clamp applied inside logarithms and square roots of the gradient.
pub const GRAD_EPS: f64 = 1e-12;
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BindingConfig {
    pub lambda: f64,
    pub eta: f64,
    pub steps: usize,
    pub clamp_bound: f64,
    pub causality: CausalityMode,
    pub optimize_latents: bool,
    /// `None` picks the mode default: on for causal, off for non-causal.
    pub optimize_aux_tokens: Option<bool>,
    pub seed: u64,
    /// Halve the step size and retry whenever a step would raise the loss.
    pub backtracking: bool,
    /// Run the projection-out stage before optimisation.
    pub capo: bool,
    pub strict_complement: bool,
    pub capo_include_attributes: bool,
}

impl Default for BindingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            eta: 0.05,
            steps: 200,
            clamp_bound: DEFAULT_CLAMP_BOUND,
            causality: CausalityMode::Causal,
            optimize_latents: true,
            optimize_aux_tokens: None,
            seed: 0,
            backtracking: false,
            capo: true,
            strict_complement: false,
            capo_include_attributes: false,
        }
    }
}

impl BindingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.clamp_bound > 0.0) {
            return Err(Error::Config(format!("clamp_bound must be > 0, got {}", self.clamp_bound)));
        }
        Ok(())
    }

    pub fn aux_tokens_enabled(&self) -> bool {
        self.optimize_aux_tokens.unwrap_or(self.causality == CausalityMode::Causal)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ent: f64,
    pub bhat: f64,
    pub total: f64,
}

/// `Σ_k H(A_k) + λ Σ_(m,n) BC(A_m, A_n)` over object tokens and inter-NP pairs.
pub fn total_loss(state: &AttentionState, annotation: &PromptAnnotation, lambda: f64) -> Result<LossBreakdown> {
    let objects = annotation.object_indices();
    if objects.is_empty() {
        return Err(Error::EmptyObjectSet);
    }
    let mut ent = 0.0;
    for &k in &objects {
        ent += shannon_entropy(&state.dist(k))?;
    }
    let mut bhat = 0.0;
    for (m, n) in inter_np_pairs(annotation) {
        bhat += bhattacharyya_coeff(&state.dist(m), &state.dist(n))?;
    }
    Ok(LossBreakdown { ent, bhat, total: ent + lambda * bhat })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub d_mixing: Vec<Matrix>,
    pub d_latents: Option<Matrix>,
    /// Gradient rows for EOT/PAD tokens, keyed by token index.
    pub d_aux: Option<Vec<(usize, Vec<f64>)>>,
}

/// Everything the optimiser moves.
#[derive(Clone, Debug, PartialEq)]
pub struct BindingParams {
    /// Token embeddings before mixing; EOT/PAD rows are optimised in place.
    pub base: EmbeddingMatrix,
    pub latents: EmbeddingMatrix,
    pub mixing: MixingSet,
}

/// Static pieces of the problem.
#[derive(Clone, Copy, Debug)]
pub struct BindingProblem<'a> {
    pub weights: &'a ProjectionWeights,
    pub annotation: &'a PromptAnnotation,
    pub lambda: f64,
    pub optimize_latents: bool,
    pub optimize_aux: bool,
}

impl BindingProblem<'_> {
    pub fn forward(&self, params: &BindingParams) -> Result<(LossBreakdown, AttentionState)> {
        let mixed = apply_mixing(&params.base, self.annotation, &params.mixing)?;
        let state = cross_attention_maps(&params.latents, &mixed, self.weights)?;
        let loss = total_loss(&state, self.annotation, self.lambda)?;
        Ok((loss, state))
    }

    pub fn loss(&self, params: &BindingParams) -> Result<LossBreakdown> {
        Ok(self.forward(params)?.0)
    }

    pub fn gradient(&self, params: &BindingParams) -> Result<(LossBreakdown, GradientBundle)> {
        let ann = self.annotation;
        let w = self.weights;
        check_dims(&params.latents, &params.base, w)?;
        check_sizes(ann, &params.mixing)?;

        let mixed = apply_mixing(&params.base, ann, &params.mixing)?;
        let q = params.latents.matmul(&w.w_q)?;
        let k = mixed.matmul(&w.w_k)?;
        let scale = 1.0 / (w.inner_dim() as f64).sqrt();
        let p = crate::numerics::softmax_rows(&q.matmul_t(&k)?.scale(scale));
        let state = AttentionState::from_p(p)?;
        let loss = total_loss(&state, ann, self.lambda)?;
        let (n, l) = state.a.shape();

        // dL/dA
        let mut g_a = Matrix::zeros(n, l);
        for obj in ann.object_indices() {
            for a in 0..n {
                g_a[(a, obj)] -= state.a[(a, obj)].max(GRAD_EPS).ln() + 1.0;
            }
        }
        for (m, o) in inter_np_pairs(ann) {
            for a in 0..n {
                let am = state.a[(a, m)].max(GRAD_EPS);
                let ao = state.a[(a, o)].max(GRAD_EPS);
                let root = (am * ao).sqrt();
                g_a[(a, m)] += self.lambda * 0.5 * root / am;
                g_a[(a, o)] += self.lambda * 0.5 * root / ao;
            }
        }

        // Column normalisation A_ai = P_ai / S_i.
        let mut g_p = Matrix::zeros(n, l);
        for i in 0..l {
            let col_sum: f64 = (0..n).map(|a| state.p[(a, i)]).sum();
            let inner: f64 = (0..n).map(|a| g_a[(a, i)] * state.a[(a, i)]).sum();
            for a in 0..n {
                g_p[(a, i)] = (g_a[(a, i)] - inner) / col_sum;
            }
        }

        // Row softmax.
        let mut g_z = Matrix::zeros(n, l);
        for a in 0..n {
            let inner: f64 = (0..l).map(|i| g_p[(a, i)] * state.p[(a, i)]).sum();
            for i in 0..l {
                g_z[(a, i)] = state.p[(a, i)] * (g_p[(a, i)] - inner);
            }
        }

        // Z = Q Kᵀ · scale.
        let g_z = g_z.scale(scale);
        let d_latents = if self.optimize_latents {
            Some(g_z.matmul(&k)?.matmul_t(&w.w_q)?)
        } else {
            None
        };
        let g_k = g_z.t_matmul(&q)?;
        let g_mixed = g_k.matmul_t(&w.w_k)?;

        // T*_span = M · V  ⇒  dM = dT*_span · Vᵀ.
        let mut d_mixing = Vec::with_capacity(ann.nps.len());
        for np in &ann.nps {
            let nt = np.len();
            let mut dm = Matrix::zeros(nt, nt);
            for i in 0..nt {
                for j in 0..nt {
                    dm[(i, j)] = crate::numerics::dot(g_mixed.row(np.span.start + i), params.base.row(np.span.start + j));
                }
            }
            d_mixing.push(dm);
        }

        let d_aux = self
            .optimize_aux
            .then(|| ann.aux_indices().into_iter().map(|i| (i, g_mixed.row(i).to_vec())).collect());

        Ok((loss, GradientBundle { d_mixing, d_latents, d_aux }))
    }

    /// `θ − step·g` for every enabled parameter, then the mixing clamp.
    pub fn descend(&self, params: &BindingParams, grad: &GradientBundle, step: f64) -> BindingParams {
        let mut next = params.clone();
        for (m, g) in next.mixing.matrices.iter_mut().zip(&grad.d_mixing) {
            *m = m.sub(&g.scale(step)).expect("gradient shape matches");
        }
        next.mixing = clamp_mixing(&next.mixing);
        if let Some(g) = &grad.d_latents {
            next.latents = next.latents.sub(&g.scale(step)).expect("gradient shape matches");
        }
        if let Some(rows) = &grad.d_aux {
            for (i, g) in rows {
                next.base.row_mut(*i).iter_mut().zip(g).for_each(|(v, d)| *v -= step * d);
            }
        }
        next
    }
}

/// Gradient of the total loss with respect to the mixing matrices and, when
/// enabled in `config`, the latent tokens and EOT/PAD rows.
pub fn grad_total_loss(
    t: &EmbeddingMatrix,
    h: &EmbeddingMatrix,
    w: &ProjectionWeights,
    annotation: &PromptAnnotation,
    m: &MixingSet,
    config: &BindingConfig,
) -> Result<GradientBundle> {
    let problem = BindingProblem {
        weights: w,
        annotation,
        lambda: config.lambda,
        optimize_latents: config.optimize_latents,
        optimize_aux: config.aux_tokens_enabled(),
    };
    let params = BindingParams { base: t.clone(), latents: h.clone(), mixing: m.clone() };
    Ok(problem.gradient(&params)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeOutcome {
    /// Final mixed token embeddings (including optimised EOT/PAD rows).
    pub embeddings: EmbeddingMatrix,
    pub mixing: MixingSet,
    pub latents: EmbeddingMatrix,
    /// Initial loss followed by the loss after every step.
    pub trace: Vec<LossBreakdown>,
    /// Step size in effect at the end (differs from `eta` only with backtracking).
    pub final_eta: f64,
}

pub fn optimize_binding(
    t: &EmbeddingMatrix,
    h: &EmbeddingMatrix,
    w: &ProjectionWeights,
    annotation: &PromptAnnotation,
    config: &BindingConfig,
) -> Result<OptimizeOutcome> {
    config.validate()?;
    let problem = BindingProblem {
        weights: w,
        annotation,
        lambda: config.lambda,
        optimize_latents: config.optimize_latents,
        optimize_aux: config.aux_tokens_enabled(),
    };
    let mut params =
        BindingParams { base: t.clone(), latents: h.clone(), mixing: init_mixing(annotation, config.clamp_bound) };
    let mut current = problem.loss(&params)?;
    if !current.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let mut trace = Vec::with_capacity(config.steps + 1);
    trace.push(current);
    let mut eta = config.eta;

    for step in 1..=config.steps {
        let (_, grad) = problem.gradient(&params)?;
        let mut candidate = problem.descend(&params, &grad, eta);
        let mut loss = problem.loss(&candidate)?;
        if config.backtracking {
            let mut halvings = 0;
            while loss.total.is_finite() && loss.total > current.total && halvings < MAX_HALVINGS {
                eta *= 0.5;
                halvings += 1;
                candidate = problem.descend(&params, &grad, eta);
                loss = problem.loss(&candidate)?;
            }
            if loss.total.is_finite() && loss.total > current.total {
                // No acceptable step along this gradient; stay put.
                candidate = params.clone();
                loss = current;
            }
        }
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        params = candidate;
        current = loss;
        trace.push(current);
    }

    let embeddings = apply_mixing(&params.base, annotation, &params.mixing)?;
    Ok(OptimizeOutcome { embeddings, mixing: params.mixing, latents: params.latents, trace, final_eta: eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::prompt::NounPhrase;

    fn tiny_problem(seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix, ProjectionWeights, PromptAnnotation) {
        let mut rng = Rng::new(seed);
        let ann = PromptAnnotation::new(
            6,
            vec![
                NounPhrase { span: 1..3, object_index: 2, attribute_indices: vec![1] },
                NounPhrase { span: 4..5, object_index: 4, attribute_indices: vec![] },
            ],
            Some(5),
            vec![],
        )
        .unwrap();
        let w = ProjectionWeights::new(
            rng.gaussian_matrix(4, 4, 0.5),
            rng.gaussian_matrix(5, 4, 0.5),
            rng.gaussian_matrix(5, 4, 0.5),
        )
        .unwrap();
        (rng.gaussian_matrix(6, 5, 1.0), rng.gaussian_matrix(7, 4, 1.0), w, ann)
    }

    #[test]
    fn loss_examples() {
        let one = PromptAnnotation::new(
            2,
            vec![NounPhrase { span: 0..1, object_index: 0, attribute_indices: vec![] }],
            None,
            vec![],
        )
        .unwrap();
        let p = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.5]]).unwrap();
        let state = AttentionState::from_p(p).unwrap();
        assert_eq!(total_loss(&state, &one, 1.0).unwrap().total, 0.0);

        let two = PromptAnnotation::new(
            2,
            vec![
                NounPhrase { span: 0..1, object_index: 0, attribute_indices: vec![] },
                NounPhrase { span: 1..2, object_index: 1, attribute_indices: vec![] },
            ],
            None,
            vec![],
        )
        .unwrap();
        let uniform = AttentionState::from_p(Matrix::from_raw(4, 2, vec![0.5; 8])).unwrap();
        let lb = total_loss(&uniform, &two, 1.0).unwrap();
        assert!((lb.ent - 2.0 * 4f64.ln()).abs() < 1e-14);
        assert!((lb.bhat - 1.0).abs() < 1e-14);
        assert!((lb.total - (2.0 * 4f64.ln() + 1.0)).abs() < 1e-14);
        let lb0 = total_loss(&uniform, &two, 0.0).unwrap();
        assert_eq!(lb0.total, lb0.ent);

        let none = PromptAnnotation::new(2, vec![], None, vec![]).unwrap();
        assert!(matches!(total_loss(&uniform, &none, 1.0), Err(Error::EmptyObjectSet)));
    }

    #[test]
    fn zero_steps_is_identity() {
        let (t, h, w, ann) = tiny_problem(1);
        let cfg = BindingConfig { steps: 0, ..Default::default() };
        let out = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.embeddings, t);
        assert_eq!(out.latents, h);
        assert_eq!(out.mixing, init_mixing(&ann, cfg.clamp_bound));
    }

    #[test]
    fn single_step_matches_update_rule() {
        let (t, h, w, ann) = tiny_problem(2);
        let cfg = BindingConfig { steps: 1, eta: 0.01, ..Default::default() };
        let m0 = init_mixing(&ann, cfg.clamp_bound);
        let g = grad_total_loss(&t, &h, &w, &ann, &m0, &cfg).unwrap();
        let out = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
        for (m, (m0, dm)) in out.mixing.matrices.iter().zip(m0.matrices.iter().zip(&g.d_mixing)) {
            for idx in 0..m.as_slice().len() {
                let expected = m0.as_slice()[idx] - cfg.eta * dm.as_slice()[idx];
                assert!(expected.abs() < cfg.clamp_bound);
                assert_eq!(m.as_slice()[idx], expected);
            }
        }
        let dh = g.d_latents.unwrap();
        for idx in 0..h.as_slice().len() {
            assert_eq!(out.latents.as_slice()[idx], h.as_slice()[idx] - cfg.eta * dh.as_slice()[idx]);
        }
        let (eot, d_eot) = &g.d_aux.unwrap()[0];
        for k in 0..t.cols() {
            assert_eq!(out.embeddings[(*eot, k)], t[(*eot, k)] - cfg.eta * d_eot[k]);
        }
    }

    #[test]
    fn aux_default_follows_mode() {
        let c = BindingConfig::default();
        assert!(c.aux_tokens_enabled());
        let nc = BindingConfig { causality: CausalityMode::NonCausal, ..Default::default() };
        assert!(!nc.aux_tokens_enabled());
        let forced = BindingConfig { optimize_aux_tokens: Some(true), ..nc };
        assert!(forced.aux_tokens_enabled());
    }

    #[test]
    fn config_parsing() {
        let cfg = BindingConfig::from_json(r#"{"lambda": 0.05, "causality": "noncausal", "steps": 3}"#).unwrap();
        assert_eq!(cfg.lambda, 0.05);
        assert_eq!(cfg.causality, CausalityMode::NonCausal);
        assert_eq!(cfg.eta, 0.05);
        assert!(matches!(BindingConfig::from_json(r#"{"lamda": 0.05}"#), Err(Error::Config(_))));
        assert!(matches!(BindingConfig::from_json(r#"{"eta": 0.0}"#), Err(Error::Config(_))));
        assert!(matches!(BindingConfig::from_json(r#"{"lambda": -1}"#), Err(Error::Config(_))));
    }

    #[test]
    fn latent_permutation_permutes_gradient() {
        let (t, h, w, ann) = tiny_problem(3);
        let cfg = BindingConfig::default();
        let m = init_mixing(&ann, 2.0);
        let n = h.rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut hp = h.clone();
        for (dst, &src) in perm.iter().enumerate() {
            hp.set_row(dst, h.row(src));
        }
        let g = grad_total_loss(&t, &h, &w, &ann, &m, &cfg).unwrap();
        let gp = grad_total_loss(&t, &hp, &w, &ann, &m, &cfg).unwrap();
        let (dl, dlp) = (g.d_latents.unwrap(), gp.d_latents.unwrap());
        for (dst, &src) in perm.iter().enumerate() {
            for k in 0..h.cols() {
                assert!((dlp[(dst, k)] - dl[(src, k)]).abs() < 1e-12);
            }
        }
        for (a, b) in g.d_mixing.iter().zip(&gp.d_mixing) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn backtracking_never_increases() {
        let (t, h, w, ann) = tiny_problem(1);
        // Find a step size at which plain descent overshoots somewhere.
        let eta = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
            .into_iter()
            .find(|&eta| {
                let cfg = BindingConfig { steps: 40, eta, ..Default::default() };
                let out = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
                out.trace.windows(2).any(|p| p[1].total > p[0].total)
            })
            .expect("some step size overshoots");
        let cfg = BindingConfig { steps: 40, eta, backtracking: true, ..Default::default() };
        let out = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
        assert!(out.trace.windows(2).all(|p| p[1].total <= p[0].total));
        assert!(out.final_eta < eta);
    }

    #[test]
    fn runs_are_reproducible() {
        let (t, h, w, ann) = tiny_problem(5);
        let cfg = BindingConfig { steps: 20, ..Default::default() };
        let a = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
        let b = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_is_self_consistent() {
        let (t, h, w, ann) = tiny_problem(6);
        let cfg = BindingConfig { steps: 30, lambda: 0.3, ..Default::default() };
        let out = optimize_binding(&t, &h, &w, &ann, &cfg).unwrap();
        for lb in &out.trace {
            assert!((lb.total - (lb.ent + cfg.lambda * lb.bhat)).abs() < 1e-12);
        }
    }
}
