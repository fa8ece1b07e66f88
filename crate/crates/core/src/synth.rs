//! Seeded synthetic instances: Gaussian token embeddings with a shared mean
//! direction, Gaussian latent tokens and random projections.

use crate::attention::ProjectionWeights;
use crate::error::Result;
use crate::geometry::EmbeddingMatrix;
use crate::numerics::{Matrix, Rng};
use crate::prompt::{parse_template_prompt, tokenize, Lexicon, PromptAnnotation};

pub const TWO_NP_PROMPT: &str = "a red cat and a blue dog";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub prompt: String,
    /// Latent positions `N`.
    pub latent_tokens: usize,
    pub text_dim: usize,
    pub latent_dim: usize,
    pub inner_dim: usize,
    /// Norm of the mean vector shared by all text tokens.
    pub mean_norm: f64,
    /// Padding rows appended after the EOT row.
    pub pad_tokens: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            prompt: TWO_NP_PROMPT.into(),
            latent_tokens: 16,
            text_dim: 16,
            latent_dim: 8,
            inner_dim: 8,
            mean_norm: 2.5,
            pad_tokens: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub embeddings: EmbeddingMatrix,
    pub latents: EmbeddingMatrix,
    pub weights: ProjectionWeights,
    pub annotation: PromptAnnotation,
}

/// Template prompt followed by one EOT row and `pad_tokens` PAD rows.
pub fn annotate_with_aux(words: &[String], lexicon: &Lexicon, pad_tokens: usize) -> Result<PromptAnnotation> {
    let base = parse_template_prompt(words, lexicon)?;
    let eot = base.token_count;
    PromptAnnotation::new(eot + 1 + pad_tokens, base.nps, Some(eot), ((eot + 1)..(eot + 1 + pad_tokens)).collect())
}

pub fn generate(spec: &SynthSpec) -> Result<Instance> {
    let annotation = annotate_with_aux(&tokenize(&spec.prompt), &Lexicon::builtin(), spec.pad_tokens)?;
    let mut rng = Rng::new(spec.seed);
    let l = annotation.token_count;

    let mean: Vec<f64> = rng.unit_vector(spec.text_dim).into_iter().map(|v| v * spec.mean_norm).collect();
    let mut embeddings = rng.gaussian_matrix(l, spec.text_dim, 1.0);
    for i in 0..l {
        embeddings.row_mut(i).iter_mut().zip(&mean).for_each(|(v, m)| *v += m);
    }
    let latents = rng.gaussian_matrix(spec.latent_tokens, spec.latent_dim, 1.0);
    let weights = ProjectionWeights::new(
        rng.gaussian_matrix(spec.latent_dim, spec.inner_dim, 1.0 / (spec.latent_dim as f64).sqrt()),
        rng.gaussian_matrix(spec.text_dim, spec.inner_dim, 1.0 / (spec.text_dim as f64).sqrt()),
        rng.gaussian_matrix(spec.text_dim, spec.inner_dim, 1.0 / (spec.text_dim as f64).sqrt()),
    )?;
    Ok(Instance { embeddings, latents, weights, annotation })
}

/// The standard two-noun-phrase instance (`N = 16`).
pub fn two_np_instance(seed: u64) -> Instance {
    generate(&SynthSpec { seed, ..Default::default() }).expect("built-in prompt parses")
}

/// `rows × dim` Gaussian tokens around a mean of norm `mean_norm`.
pub fn gaussian_tokens(rng: &mut Rng, rows: usize, dim: usize, mean_norm: f64) -> Matrix {
    let mean: Vec<f64> = rng.unit_vector(dim).into_iter().map(|v| v * mean_norm).collect();
    let mut m = rng.gaussian_matrix(rows, dim, 1.0);
    for i in 0..rows {
        m.row_mut(i).iter_mut().zip(&mean).for_each(|(v, c)| *v += c);
    }
    m
}
