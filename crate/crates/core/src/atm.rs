//! Adaptive token mixing: one `n × n` matrix per noun phrase, applied to the
//! stacked token rows of that phrase.

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::numerics::Matrix;
use crate::prompt::PromptAnnotation;

pub const DEFAULT_CLAMP_BOUND: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MixingSet {
    /// One matrix per noun phrase, in annotation order.
    pub matrices: Vec<Matrix>,
    pub clamp_bound: f64,
}

impl MixingSet {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Identity mixing for every noun phrase.
pub fn init_mixing(annotation: &PromptAnnotation, clamp_bound: f64) -> MixingSet {
    MixingSet {
        matrices: annotation.nps.iter().map(|np| Matrix::identity(np.len())).collect(),
        clamp_bound,
    }
}

pub(crate) fn check_sizes(annotation: &PromptAnnotation, m: &MixingSet) -> Result<()> {
    if m.matrices.len() != annotation.nps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} mixing matrices for {} noun phrases",
            m.matrices.len(),
            annotation.nps.len()
        )));
    }
    for (np, (phrase, mat)) in annotation.nps.iter().zip(&m.matrices).enumerate() {
        let n = phrase.len();
        if mat.rows() != n || mat.cols() != n {
            return Err(Error::SizeMismatch { np, expected: n, rows: mat.rows(), cols: mat.cols() });
        }
    }
    Ok(())
}

/// Replaces each noun phrase's rows `V` with `M_V · V`.
pub fn apply_mixing(t: &EmbeddingMatrix, annotation: &PromptAnnotation, m: &MixingSet) -> Result<EmbeddingMatrix> {
    check_sizes(annotation, m)?;
    if annotation.token_count != t.rows() {
        return Err(Error::ShapeMismatch(format!(
            "annotation has {} tokens, embeddings have {} rows",
            annotation.token_count,
            t.rows()
        )));
    }
    let mut out = t.clone();
    for (np, mat) in annotation.nps.iter().zip(&m.matrices) {
        if is_identity(mat) {
            continue;
        }
        let start = np.span.start;
        for i in 0..np.len() {
            let row = out.row_mut(start + i);
            row.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..np.len() {
                let c = mat[(i, j)];
                for (o, v) in row.iter_mut().zip(t.row(start + j)) {
                    *o += c * v;
                }
            }
        }
    }
    Ok(out)
}

fn is_identity(m: &Matrix) -> bool {
    (0..m.rows()).all(|i| (0..m.cols()).all(|j| m[(i, j)] == if i == j { 1.0 } else { 0.0 }))
}

/// Elementwise clamp of every entry into `[−c, c]`.
pub fn clamp_mixing(m: &MixingSet) -> MixingSet {
    let c = m.clamp_bound;
    MixingSet {
        matrices: m
            .matrices
            .iter()
            .map(|mat| {
                let data = mat.as_slice().iter().map(|v| v.clamp(-c, c)).collect();
                Matrix::from_raw(mat.rows(), mat.cols(), data)
            })
            .collect(),
        clamp_bound: c,
    }
}

/// Merge coefficients `[α, β, …, β]` with the object token first.
pub fn tome_merge_matrix(n: usize, alpha: f64, beta: f64) -> Matrix {
    let mut data = vec![beta; n.max(1)];
    data[0] = alpha;
    Matrix::from_raw(1, n.max(1), data)
}

/// Fixed mixing set whose object row is the merge `α·u_obj + β·Σ others`;
/// all other rows are identity.
pub fn tome_mixing(annotation: &PromptAnnotation, alpha: f64, beta: f64, clamp_bound: f64) -> MixingSet {
    let matrices = annotation
        .nps
        .iter()
        .map(|np| {
            let n = np.len();
            let merge = tome_merge_matrix(n, alpha, beta);
            let obj = np.object_offset();
            let mut m = Matrix::identity(n);
            // merge[0] belongs to the object; the rest go to the other tokens in order.
            let mut others = 1;
            for j in 0..n {
                if j == obj {
                    m[(obj, j)] = merge[(0, 0)];
                } else {
                    m[(obj, j)] = merge[(0, others)];
                    others += 1;
                }
            }
            m
        })
        .collect();
    MixingSet { matrices, clamp_bound }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{norm, Rng};
    use crate::prompt::NounPhrase;

    fn two_nps() -> PromptAnnotation {
        // a [red cat] and a [big blue dog]
        PromptAnnotation::new(
            8,
            vec![
                NounPhrase { span: 1..3, object_index: 2, attribute_indices: vec![1] },
                NounPhrase { span: 5..8, object_index: 7, attribute_indices: vec![5, 6] },
            ],
            None,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn init_shapes() {
        let one = PromptAnnotation::new(
            3,
            vec![NounPhrase { span: 0..3, object_index: 2, attribute_indices: vec![0, 1] }],
            None,
            vec![],
        )
        .unwrap();
        let m = init_mixing(&one, 2.0);
        assert_eq!(m.matrices, vec![Matrix::identity(3)]);
        let m = init_mixing(&two_nps(), 2.0);
        assert_eq!(m.matrices, vec![Matrix::identity(2), Matrix::identity(3)]);
    }

    #[test]
    fn identity_is_bit_exact() {
        let mut rng = Rng::new(1);
        let t = rng.gaussian_matrix(8, 5, 1.0);
        let ann = two_nps();
        assert_eq!(apply_mixing(&t, &ann, &init_mixing(&ann, 2.0)).unwrap(), t);
    }

    #[test]
    fn doubling_doubles_norms() {
        let mut rng = Rng::new(2);
        let t = rng.gaussian_matrix(8, 5, 1.0);
        let ann = two_nps();
        let mut m = init_mixing(&ann, 2.0);
        m.matrices[1] = Matrix::identity(3).scale(2.0);
        let out = apply_mixing(&t, &ann, &m).unwrap();
        for i in 5..8 {
            assert!((norm(out.row(i)) - 2.0 * norm(t.row(i))).abs() < 1e-14);
        }
        for i in 0..5 {
            assert_eq!(out.row(i), t.row(i));
        }
    }

    #[test]
    fn random_mixing_matches_linear_combination() {
        // "red furry cat": three tokens mixed by a random 3x3 matrix.
        let mut rng = Rng::new(3);
        let ann = PromptAnnotation::new(
            4,
            vec![NounPhrase { span: 1..4, object_index: 3, attribute_indices: vec![1, 2] }],
            None,
            vec![],
        )
        .unwrap();
        let t = rng.gaussian_matrix(4, 6, 1.0);
        let mat = rng.gaussian_matrix(3, 3, 1.0);
        let m = MixingSet { matrices: vec![mat.clone()], clamp_bound: 2.0 };
        let out = apply_mixing(&t, &ann, &m).unwrap();
        for i in 0..3 {
            for k in 0..6 {
                let brute: f64 = (0..3).map(|j| mat[(i, j)] * t[(1 + j, k)]).sum();
                assert!((out[(1 + i, k)] - brute).abs() < 1e-14);
            }
        }
        assert_eq!(out.row(0), t.row(0));
    }

    #[test]
    fn size_mismatch() {
        let ann = two_nps();
        let t = Matrix::zeros(8, 3);
        let m = MixingSet { matrices: vec![Matrix::identity(2), Matrix::identity(2)], clamp_bound: 2.0 };
        assert!(matches!(apply_mixing(&t, &ann, &m), Err(Error::SizeMismatch { np: 1, expected: 3, .. })));
    }

    #[test]
    fn clamp_examples() {
        let inside = MixingSet { matrices: vec![Matrix::identity(2)], clamp_bound: 2.0 };
        assert_eq!(clamp_mixing(&inside), inside);
        let big = MixingSet { matrices: vec![Matrix::from_rows(&[vec![5.0, -7.0]]).unwrap()], clamp_bound: 2.0 };
        let c = clamp_mixing(&big);
        assert_eq!(c.matrices[0].as_slice(), &[2.0, -2.0]);
        assert_eq!(clamp_mixing(&c), c);
    }

    #[test]
    fn tome_coefficients() {
        assert_eq!(tome_merge_matrix(1, 1.1, 1.2).as_slice(), &[1.1]);
        assert_eq!(tome_merge_matrix(3, 1.1, 1.2).as_slice(), &[1.1, 1.2, 1.2]);
    }

    #[test]
    fn tome_as_fixed_mixing() {
        let mut rng = Rng::new(4);
        let ann = two_nps();
        let t = rng.gaussian_matrix(8, 5, 1.0);
        let m = tome_mixing(&ann, 1.1, 1.2, 2.0);
        let out = apply_mixing(&t, &ann, &m).unwrap();
        for np in &ann.nps {
            for k in 0..5 {
                let mut direct = 1.1 * t[(np.object_index, k)];
                for i in np.tokens().filter(|&i| i != np.object_index) {
                    direct += 1.2 * t[(i, k)];
                }
                assert!((out[(np.object_index, k)] - direct).abs() < 1e-14);
            }
            for i in np.tokens().filter(|&i| i != np.object_index) {
                assert_eq!(out.row(i), t.row(i));
            }
        }
    }

    mod props {
        use super::*;
        use crate::numerics::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mixing_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = Rng::new(seed);
                let ann = two_nps();
                let t1 = rng.gaussian_matrix(8, 4, 1.0);
                let t2 = rng.gaussian_matrix(8, 4, 1.0);
                let m = MixingSet {
                    matrices: vec![rng.gaussian_matrix(2, 2, 1.0), rng.gaussian_matrix(3, 3, 1.0)],
                    clamp_bound: 2.0,
                };
                let combo = t1.scale(a).add(&t2.scale(b)).unwrap();
                let lhs = apply_mixing(&combo, &ann, &m).unwrap();
                let rhs = apply_mixing(&t1, &ann, &m).unwrap().scale(a)
                    .add(&apply_mixing(&t2, &ann, &m).unwrap().scale(b)).unwrap();
                prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
            }

            #[test]
            fn clamp_bounds_and_idempotence(seed in any::<u64>(), c in 0.1f64..5.0) {
                let mut rng = Rng::new(seed);
                let m = MixingSet { matrices: vec![rng.gaussian_matrix(3, 3, 4.0)], clamp_bound: c };
                let once = clamp_mixing(&m);
                prop_assert!(once.matrices[0].as_slice().iter().all(|v| v.abs() <= c));
                prop_assert_eq!(clamp_mixing(&once), once);
            }
        }
    }
}
