//! Causality-aware projection out.
//!
//! Causal encoders: tokens of each later noun phrase are projected out
//! against the tokens of all earlier noun phrases, in prompt order.
//! Non-causal encoders: a joint symmetric (Löwdin) orthogonalization of the
//! selected tokens across all noun phrases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::numerics::{dot, inv_sqrt_psd, norm, Matrix};
use crate::prompt::PromptAnnotation;

const ZERO_REFERENCE: f64 = 1e-12;
const DEGENERATE_RATIO: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalityMode {
    #[default]
    Causal,
    #[serde(rename = "noncausal")]
    NonCausal,
}

impl std::str::FromStr for CausalityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(Self::Causal),
            "noncausal" | "non-causal" => Ok(Self::NonCausal),
            other => Err(Error::Config(format!("unknown causality mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CapoOptions {
    /// Causal mode: project onto the orthogonal complement of the span of the
    /// references instead of subtracting each projection independently.
    pub strict_complement: bool,
    /// Non-causal mode: orthogonalize attribute tokens as well as objects.
    pub include_attributes: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub vector: Vec<f64>,
    /// Set when the result has collapsed to (numerically) zero.
    pub degenerate: bool,
}

/// `w − Σ_j ⟨w, u_j⟩/⟨u_j, u_j⟩ · u_j`, each projection taken against the raw `u_j`.
pub fn schmidt_project_out(w: &[f64], references: &[&[f64]]) -> Result<Projection> {
    let mut out = w.to_vec();
    for (index, u) in references.iter().enumerate() {
        if u.len() != w.len() {
            return Err(Error::DimensionMismatch { expected: w.len(), got: u.len() });
        }
        let uu = dot(u, u);
        if uu.sqrt() < ZERO_REFERENCE {
            return Err(Error::ZeroReference { index });
        }
        let coeff = dot(w, u) / uu;
        out.iter_mut().zip(u.iter()).for_each(|(o, x)| *o -= coeff * x);
    }
    Ok(finish(w, out))
}

/// Projection of `w` onto the orthogonal complement of `span(references)`.
///
/// References are orthonormalised with modified Gram-Schmidt first; ones
/// that are linearly dependent on earlier references are skipped.
pub fn project_onto_complement(w: &[f64], references: &[&[f64]]) -> Result<Projection> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(references.len());
    for (index, u) in references.iter().enumerate() {
        if u.len() != w.len() {
            return Err(Error::DimensionMismatch { expected: w.len(), got: u.len() });
        }
        let n0 = norm(u);
        if n0 < ZERO_REFERENCE {
            return Err(Error::ZeroReference { index });
        }
        let mut v = u.to_vec();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = norm(&v);
        if n > 1e-10 * n0 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut out = w.to_vec();
    // Two passes for numerical orthogonality.
    for _ in 0..2 {
        for b in &basis {
            let c = dot(&out, b);
            out.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    Ok(finish(w, out))
}

fn finish(w: &[f64], out: Vec<f64>) -> Projection {
    let degenerate = norm(&out) < DEGENERATE_RATIO * norm(w) || norm(w) == 0.0;
    Projection { vector: out, degenerate }
}

/// `X (XᵀX)^{-1/2}` for a matrix whose columns are the vectors to orthogonalize.
pub fn lowdin_orthogonalize(x: &Matrix) -> Result<Matrix> {
    if x.cols() < 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: x.cols() });
    }
    let gram = x.t_matmul(x)?;
    let gram = gram.add(&gram.transpose())?.scale(0.5);
    x.matmul(&inv_sqrt_psd(&gram)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapoEvent {
    pub token: usize,
    pub np: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapoOutcome {
    pub embeddings: EmbeddingMatrix,
    pub events: Vec<CapoEvent>,
}

pub fn apply_capo(
    t: &EmbeddingMatrix,
    annotation: &PromptAnnotation,
    mode: CausalityMode,
    options: CapoOptions,
) -> Result<CapoOutcome> {
    if annotation.token_count != t.rows() {
        return Err(Error::ShapeMismatch(format!(
            "annotation has {} tokens, embeddings have {} rows",
            annotation.token_count,
            t.rows()
        )));
    }
    match mode {
        CausalityMode::Causal => apply_causal(t, annotation, options.strict_complement),
        CausalityMode::NonCausal => apply_noncausal(t, annotation, options.include_attributes),
    }
}

fn apply_causal(t: &EmbeddingMatrix, annotation: &PromptAnnotation, strict: bool) -> Result<CapoOutcome> {
    let mut out = t.clone();
    let mut events = Vec::new();
    for (k, np) in annotation.nps.iter().enumerate().skip(1) {
        // References: already-transformed tokens of every earlier noun phrase.
        let owners: Vec<usize> = annotation.nps[..k]
            .iter()
            .enumerate()
            .flat_map(|(j, p)| p.tokens().map(move |_| j))
            .collect();
        let refs: Vec<Vec<f64>> = annotation.nps[..k]
            .iter()
            .flat_map(|p| p.tokens())
            .map(|i| out.row(i).to_vec())
            .collect();
        let ref_slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
        for token in np.tokens() {
            let w = out.row(token).to_vec();
            let projected = if strict {
                project_onto_complement(&w, &ref_slices)
            } else {
                schmidt_project_out(&w, &ref_slices)
            }
            .map_err(|e| match e {
                Error::ZeroReference { index } => {
                    Error::NpPair { first: owners[index], second: k, source: Box::new(e) }
                }
                other => other,
            })?;
            if projected.degenerate {
                events.push(CapoEvent {
                    token,
                    np: k,
                    message: "projection collapsed to zero; original token kept".into(),
                });
            } else {
                out.set_row(token, &projected.vector);
            }
        }
    }
    Ok(CapoOutcome { embeddings: out, events })
}

fn apply_noncausal(t: &EmbeddingMatrix, annotation: &PromptAnnotation, include_attributes: bool) -> Result<CapoOutcome> {
    if annotation.nps.len() < 2 {
        return Ok(CapoOutcome { embeddings: t.clone(), events: Vec::new() });
    }
    let mut tokens = Vec::new();
    let mut owners = Vec::new();
    for (k, np) in annotation.nps.iter().enumerate() {
        if include_attributes {
            for i in np.tokens() {
                tokens.push(i);
                owners.push(k);
            }
        } else {
            tokens.push(np.object_index);
            owners.push(k);
        }
    }
    let columns: Vec<Vec<f64>> = tokens.iter().map(|&i| t.row(i).to_vec()).collect();
    let x = Matrix::from_columns(&columns)?;
    let xp = lowdin_orthogonalize(&x).map_err(|e| match e {
        Error::NearSingular { .. } => {
            let (a, b) = most_parallel_pair(&columns, &owners);
            Error::NpPair { first: a, second: b, source: Box::new(e) }
        }
        other => other,
    })?;
    let mut out = t.clone();
    for (c, &token) in tokens.iter().enumerate() {
        out.set_row(token, &xp.column(c));
    }
    Ok(CapoOutcome { embeddings: out, events: Vec::new() })
}

/// Noun-phrase pair holding the two columns with the largest |cos|.
fn most_parallel_pair(columns: &[Vec<f64>], owners: &[usize]) -> (usize, usize) {
    let mut best = (0.0, owners[0], owners[owners.len() - 1]);
    for i in 0..columns.len() {
        for j in (i + 1)..columns.len() {
            let (ni, nj) = (norm(&columns[i]), norm(&columns[j]));
            let c = if ni == 0.0 || nj == 0.0 { 1.0 } else { (dot(&columns[i], &columns[j]) / (ni * nj)).abs() };
            if c > best.0 {
                best = (c, owners[i], owners[j]);
            }
        }
    }
    (best.1.min(best.2), best.1.max(best.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cosine_angle;
    use crate::numerics::Rng;
    use crate::prompt::NounPhrase;
    use std::f64::consts::FRAC_PI_2;

    fn single_token_nps(l: usize, objects: &[usize]) -> PromptAnnotation {
        let nps = objects.iter().map(|&o| NounPhrase { span: o..o + 1, object_index: o, attribute_indices: vec![] }).collect();
        PromptAnnotation::new(l, nps, None, vec![]).unwrap()
    }

    fn gram_error(x: &Matrix) -> f64 {
        let g = x.t_matmul(x).unwrap();
        g.sub(&Matrix::identity(x.cols())).unwrap().max_abs()
    }

    #[test]
    fn schmidt_examples() {
        let p = schmidt_project_out(&[1.0, 1.0], &[&[1.0, 0.0]]).unwrap();
        assert_eq!(p.vector, vec![0.0, 1.0]);
        assert!(!p.degenerate);

        let p = schmidt_project_out(&[2.0, -4.0], &[&[1.0, -2.0]]).unwrap();
        assert!(p.vector.iter().all(|v| *v == 0.0));
        assert!(p.degenerate);

        assert!(matches!(
            schmidt_project_out(&[1.0, 1.0], &[&[1.0, 0.0], &[0.0, 0.0]]),
            Err(Error::ZeroReference { index: 1 })
        ));
    }

    #[test]
    fn schmidt_orthogonal_references() {
        let mut rng = Rng::new(5);
        let w = rng.gaussian_vec(5);
        let u1 = rng.gaussian_vec(5);
        let mut u2 = rng.gaussian_vec(5);
        let c = dot(&u2, &u1) / dot(&u1, &u1);
        u2.iter_mut().zip(&u1).for_each(|(x, y)| *x -= c * y);
        let p = schmidt_project_out(&w, &[&u1, &u2]).unwrap();
        assert!(dot(&p.vector, &u1).abs() < 1e-12);
        assert!(dot(&p.vector, &u2).abs() < 1e-12);
    }

    #[test]
    fn schmidt_verbatim_differs_from_complement_for_oblique_references() {
        let w = [1.0, 1.0, 1.0];
        let refs: [&[f64]; 2] = [&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]];
        let verbatim = schmidt_project_out(&w, &refs).unwrap();
        let strict = project_onto_complement(&w, &refs).unwrap();
        assert_eq!(strict.vector.iter().map(|v| (v * 1e12).round() / 1e12).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert!(dot(&verbatim.vector, refs[0]).abs() > 0.1);
    }

    #[test]
    fn lowdin_examples() {
        let x = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let xp = lowdin_orthogonalize(&x).unwrap();
        assert!(xp.sub(&x).unwrap().max_abs() < 1e-15);

        let s = 60f64.to_radians();
        let x = Matrix::from_columns(&[vec![1.0, 0.0], vec![s.cos(), s.sin()]]).unwrap();
        let xp = lowdin_orthogonalize(&x).unwrap();
        assert!(gram_error(&xp) < 1e-8);

        let swapped = Matrix::from_columns(&[x.column(1), x.column(0)]).unwrap();
        let sp = lowdin_orthogonalize(&swapped).unwrap();
        assert_eq!(sp.column(0), xp.column(1));
        assert_eq!(sp.column(1), xp.column(0));

        let parallel = Matrix::from_columns(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(lowdin_orthogonalize(&parallel), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn single_np_is_untouched() {
        let mut rng = Rng::new(1);
        let t = rng.gaussian_matrix(4, 6, 1.0);
        let ann = PromptAnnotation::new(
            4,
            vec![NounPhrase { span: 1..3, object_index: 2, attribute_indices: vec![1] }],
            Some(3),
            vec![],
        )
        .unwrap();
        for mode in [CausalityMode::Causal, CausalityMode::NonCausal] {
            let out = apply_capo(&t, &ann, mode, CapoOptions { include_attributes: true, ..Default::default() }).unwrap();
            assert_eq!(out.embeddings, t);
        }
    }

    #[test]
    fn causal_two_tokens() {
        let mut rng = Rng::new(2);
        let t = rng.gaussian_matrix(3, 8, 1.0);
        let ann = single_token_nps(3, &[0, 2]);
        let out = apply_capo(&t, &ann, CausalityMode::Causal, CapoOptions::default()).unwrap().embeddings;
        assert_eq!(out.row(0), t.row(0));
        assert_eq!(out.row(1), t.row(1));
        assert!(dot(out.row(0), out.row(2)).abs() < 1e-12);
    }

    #[test]
    fn noncausal_two_tokens() {
        let mut rng = Rng::new(3);
        let t = rng.gaussian_matrix(3, 8, 1.0);
        let ann = single_token_nps(3, &[0, 2]);
        let out = apply_capo(&t, &ann, CausalityMode::NonCausal, CapoOptions::default()).unwrap().embeddings;
        let x = Matrix::from_columns(&[out.row(0).to_vec(), out.row(2).to_vec()]).unwrap();
        assert!(gram_error(&x) < 1e-8);
        assert_ne!(out.row(0), t.row(0));
        assert_ne!(out.row(2), t.row(2));
        assert_eq!(out.row(1), t.row(1));
    }

    #[test]
    fn noncausal_parallel_tokens_name_the_pair() {
        let t = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 1.0], vec![2.0, 4.0, 0.0]]).unwrap();
        let ann = single_token_nps(3, &[0, 1, 2]);
        match apply_capo(&t, &ann, CausalityMode::NonCausal, CapoOptions::default()) {
            Err(Error::NpPair { first: 0, second: 2, source }) => {
                assert!(matches!(*source, Error::NearSingular { .. }))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn causal_degenerate_keeps_token() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let ann = single_token_nps(2, &[0, 1]);
        let out = apply_capo(&t, &ann, CausalityMode::Causal, CapoOptions::default()).unwrap();
        assert_eq!(out.embeddings, t);
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].token, 1);
    }

    #[test]
    fn causal_zero_reference_names_the_pair() {
        let t = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let ann = single_token_nps(2, &[0, 1]);
        assert!(matches!(
            apply_capo(&t, &ann, CausalityMode::Causal, CapoOptions::default()),
            Err(Error::NpPair { first: 0, second: 1, .. })
        ));
    }

    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        fn three_nps() -> PromptAnnotation {
            // a [big red cat] and a [blue dog] and a [cup] <eot>
            PromptAnnotation::new(
                11,
                vec![
                    NounPhrase { span: 1..4, object_index: 3, attribute_indices: vec![1, 2] },
                    NounPhrase { span: 6..8, object_index: 7, attribute_indices: vec![6] },
                    NounPhrase { span: 9..10, object_index: 9, attribute_indices: vec![] },
                ],
                Some(10),
                vec![],
            )
            .unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn complement_matches_least_squares(seed in any::<u64>(), d in 4usize..12, m in 1usize..4) {
                let mut rng = Rng::new(seed);
                let w = rng.gaussian_vec(d);
                let refs: Vec<Vec<f64>> = (0..m).map(|_| rng.gaussian_vec(d)).collect();
                let slices: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
                // Least squares: residual of w after solving (UᵀU) c = Uᵀw.
                let u = Matrix::from_columns(&refs).unwrap();
                let g = u.t_matmul(&u).unwrap();
                let rhs: Vec<f64> = refs.iter().map(|r| dot(r, &w)).collect();
                let c = solve(&g, &rhs);
                let mut resid = w.clone();
                for (k, r) in refs.iter().enumerate() {
                    resid.iter_mut().zip(r).for_each(|(x, y)| *x -= c[k] * y);
                }
                let strict = project_onto_complement(&w, &slices).unwrap();
                for (a, b) in strict.vector.iter().zip(&resid) {
                    prop_assert!((a - b).abs() < 1e-8);
                }
                // With orthogonal references the verbatim formula agrees.
                let q = lowdin_orthogonalize(&u).map(|x| (0..m).map(|j| x.column(j)).collect::<Vec<_>>());
                if let Ok(qs) = q {
                    let qslices: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
                    let verbatim = schmidt_project_out(&w, &qslices).unwrap();
                    for (a, b) in verbatim.vector.iter().zip(&resid) {
                        prop_assert!((a - b).abs() < 1e-8);
                    }
                }
            }

            #[test]
            fn lowdin_gram_identity(seed in any::<u64>(), k in 2usize..=3, log_cond in 0.0f64..3.0) {
                // Singular values spanning 10^log_cond, so cond(XᵀX) ≤ 10^(2·log_cond) ≤ 1e6.
                let mut rng = Rng::new(seed);
                let d = 6;
                let basis = lowdin_orthogonalize(&rng.gaussian_matrix(d, k, 1.0)).unwrap();
                let mix = lowdin_orthogonalize(&rng.gaussian_matrix(k, k, 1.0)).unwrap();
                let sv: Vec<f64> = (0..k).map(|i| 10f64.powf(log_cond * i as f64 / (k - 1) as f64)).collect();
                let x = basis.matmul(&Matrix::diag(&sv)).unwrap().matmul(&mix).unwrap();
                let xp = lowdin_orthogonalize(&x).unwrap();
                prop_assert!(gram_error(&xp) < 1e-8);
            }

            #[test]
            fn lowdin_permutation_equivariant(seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let x = rng.gaussian_matrix(7, 3, 1.0);
                let p = Matrix::from_columns(&[x.column(2), x.column(0), x.column(1)]).unwrap();
                let a = lowdin_orthogonalize(&x).unwrap();
                let b = lowdin_orthogonalize(&p).unwrap();
                for (src, dst) in [(2, 0), (0, 1), (1, 2)] {
                    for (u, v) in a.column(src).iter().zip(b.column(dst)) {
                        prop_assert!((u - v).abs() < 1e-10);
                    }
                }
            }

            #[test]
            fn post_capo_angles_are_right(seed in any::<u64>(), mean in 0.0f64..2.0) {
                let mut rng = Rng::new(seed);
                let ann = three_nps();
                let mut t = rng.gaussian_matrix(11, 16, 1.0);
                for i in 0..11 {
                    t.row_mut(i).iter_mut().for_each(|v| *v += mean);
                }
                // Non-causal, every NP token: all cross-NP pairs at π/2.
                let opts = CapoOptions { include_attributes: true, ..Default::default() };
                let out = apply_capo(&t, &ann, CausalityMode::NonCausal, opts).unwrap().embeddings;
                // Causal with the strict complement: later tokens ⟂ earlier ones.
                let strict = CapoOptions { strict_complement: true, ..Default::default() };
                let causal = apply_capo(&t, &ann, CausalityMode::Causal, strict).unwrap().embeddings;
                prop_assert_eq!(causal.row(1), t.row(1));
                for a in 0..3 {
                    for b in (a + 1)..3 {
                        for i in ann.nps[a].tokens() {
                            for j in ann.nps[b].tokens() {
                                prop_assert!((cosine_angle(out.row(i), out.row(j)).unwrap() - FRAC_PI_2).abs() < 1e-6);
                                prop_assert!((cosine_angle(causal.row(i), causal.row(j)).unwrap() - FRAC_PI_2).abs() < 1e-6);
                            }
                        }
                    }
                }
            }
        }

        fn solve(a: &Matrix, b: &[f64]) -> Vec<f64> {
            // Gaussian elimination with partial pivoting.
            let n = b.len();
            let mut m: Vec<Vec<f64>> = (0..n).map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            }).collect();
            for c in 0..n {
                let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
                m.swap(c, p);
                for r in (c + 1)..n {
                    let f = m[r][c] / m[c][c];
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
            let mut x = vec![0.0; n];
            for c in (0..n).rev() {
                let s: f64 = ((c + 1)..n).map(|k| m[c][k] * x[k]).sum();
                x[c] = (m[c][n] - s) / m[c][c];
            }
            x
        }
    }
}
