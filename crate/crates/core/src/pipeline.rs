//! End-to-end binding pipeline: projection-out, then mixing optimisation, then
//! the geometry/attention report.

use std::path::{Path, PathBuf};

use crate::attention::{cross_attention_maps, ProjectionWeights};
use crate::capo::{apply_capo, CapoOptions};
use crate::embx::{self, Dtype, EmbxFile};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::optim::{optimize_binding, BindingConfig};
use crate::prompt::{load_annotation, tokenize, Lexicon, PromptAnnotation};
use crate::report::{attention_stats, geometry_report, AttentionSummary, BindingReport};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineInputs {
    pub embeddings: EmbxFile,
    pub latents: Matrix,
    pub weights: ProjectionWeights,
    pub annotation: PromptAnnotation,
    pub config: BindingConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// Transformed tokens, stored with the input dtype.
    pub embeddings: EmbxFile,
    pub latents: Matrix,
    pub report: BindingReport,
}

/// Where the prompt structure comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptSource {
    AnnotationFile(PathBuf),
    Template(String),
}

/// Annotation for a template prompt over `rows` embedding rows: the words
/// come first, then one EOT row, and any rows left over are PAD.
pub fn annotate_template(prompt: &str, rows: usize) -> Result<PromptAnnotation> {
    let words = tokenize(prompt);
    let base = crate::prompt::parse_template_prompt(&words, &Lexicon::builtin())?;
    let n = base.token_count;
    if rows < n {
        return Err(Error::ShapeMismatch(format!("prompt has {n} words but embeddings have {rows} rows")));
    }
    let eot = (rows > n).then_some(n);
    let pads = if rows > n { ((n + 1)..rows).collect() } else { Vec::new() };
    PromptAnnotation::new(rows, base.nps, eot, pads)
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    Ok(embx::load(path)?.matrix)
}

pub fn load_weights(w_q: &Path, w_k: &Path, w_v: &Path) -> Result<ProjectionWeights> {
    ProjectionWeights::new(load_matrix(w_q)?, load_matrix(w_k)?, load_matrix(w_v)?)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn resolve_prompt(source: &PromptSource, rows: usize) -> Result<PromptAnnotation> {
    match source {
        PromptSource::AnnotationFile(p) => load_annotation(&read_text(p)?),
        PromptSource::Template(text) => annotate_template(text, rows),
    }
}

pub fn run_pipeline(inputs: &PipelineInputs) -> Result<PipelineOutput> {
    let PipelineInputs { embeddings, latents, weights, annotation, config } = inputs;
    config.validate().map_err(|e| e.at_stage("config"))?;
    let t0 = &embeddings.matrix;
    if annotation.token_count != t0.rows() {
        return Err(Error::ShapeMismatch(format!(
            "annotation has {} tokens, embeddings have {} rows",
            annotation.token_count,
            t0.rows()
        ))
        .at_stage("input"));
    }

    let (t1, events) = if config.capo {
        let options = CapoOptions {
            strict_complement: config.strict_complement,
            include_attributes: config.capo_include_attributes,
        };
        let out = apply_capo(t0, annotation, config.causality, options).map_err(|e| e.at_stage("capo"))?;
        (out.embeddings, out.events)
    } else {
        (t0.clone(), Vec::new())
    };

    let (t2, h2, trace) = if config.steps > 0 {
        let out = optimize_binding(&t1, latents, weights, annotation, config).map_err(|e| e.at_stage("optimize"))?;
        (out.embeddings, out.latents, out.trace)
    } else {
        let state = cross_attention_maps(latents, &t1, weights).map_err(|e| e.at_stage("attention"))?;
        let loss = crate::optim::total_loss(&state, annotation, config.lambda).map_err(|e| e.at_stage("loss"))?;
        (t1, latents.clone(), vec![loss])
    };

    let geometry = geometry_report(t0, &t2, annotation).map_err(|e| e.at_stage("report"))?;
    let summarize = |h: &Matrix, t: &Matrix| {
        let state = cross_attention_maps(h, t, weights)?;
        attention_stats(&state, annotation, config.lambda)
    };
    let before = summarize(latents, t0).map_err(|e| e.at_stage("report"))?;
    let after = summarize(&h2, &t2).map_err(|e| e.at_stage("report"))?;

    let report = BindingReport {
        config: config.clone(),
        geometry_before: geometry.before,
        geometry_after: geometry.after,
        deltas: geometry.deltas,
        loss_trace: trace,
        attention_summary: AttentionSummary { before, after },
        events,
    };
    Ok(PipelineOutput { embeddings: EmbxFile { matrix: t2, dtype: embeddings.dtype }, latents: h2, report })
}

/// Writes the pipeline outputs into `dir`: `embeddings.embx`, `latents.embx`
/// and `report.json`.
pub fn write_outputs(dir: &Path, out: &PipelineOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    embx::save(dir.join("embeddings.embx"), &out.embeddings.matrix, out.embeddings.dtype)?;
    embx::save(dir.join("latents.embx"), &out.latents, Dtype::F64)?;
    let path = dir.join("report.json");
    std::fs::write(&path, out.report.to_json()).map_err(|e| Error::io(path, e))
}
