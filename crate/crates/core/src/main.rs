use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bindgeom::attention::cross_attention_maps;
use bindgeom::capo::{apply_capo, CapoOptions, CausalityMode};
use bindgeom::embx::{self, Dtype};
use bindgeom::optim::BindingConfig;
use bindgeom::pipeline::{
    annotate_template, load_matrix, load_weights, read_text, resolve_prompt, run_pipeline, write_outputs,
    PipelineInputs, PromptSource,
};
use bindgeom::prompt::{parse_template_prompt, save_annotation, tokenize, Lexicon, PromptAnnotation};
use bindgeom::report::{attention_stats, geometry_report, sorted_json};
use bindgeom::synth::{generate, SynthSpec, TWO_NP_PROMPT};
use bindgeom::verify::{self, Prop1Dims, Verdict};
use bindgeom::{Error, Result};

#[derive(Parser)]
#[command(name = "bindgeom", version, about = "Token-embedding geometry and cross-attention binding toolkit")]
struct Cli {
    /// BindingConfig JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; commands that only emit JSON print to stdout without it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config causality mode.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Causal,
    Noncausal,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PromptArgs {
    /// Annotation JSON file.
    #[arg(long)]
    annotation: Option<PathBuf>,
    /// Template prompt; extra embedding rows become EOT then PAD.
    #[arg(long)]
    prompt: Option<String>,
}

impl PromptArgs {
    fn source(&self) -> PromptSource {
        match (&self.annotation, &self.prompt) {
            (Some(p), _) => PromptSource::AnnotationFile(p.clone()),
            (None, Some(text)) => PromptSource::Template(text.clone()),
            (None, None) => unreachable!("clap enforces one of --annotation/--prompt"),
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Token embeddings (EMBX, L×d₁).
    #[arg(long)]
    embeddings: PathBuf,
    /// Latent tokens (EMBX, N×d₂).
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    wq: PathBuf,
    #[arg(long)]
    wk: PathBuf,
    #[arg(long)]
    wv: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a template prompt into an annotation.
    Parse {
        #[arg(long)]
        prompt: String,
        /// Embedding rows; rows past the words become EOT then PAD.
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Apply projection-out to noun-phrase tokens.
    Orthogonalize {
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Full pipeline: projection-out, mixing optimisation, report.
    Optimize {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Per-object entropy and inter-NP Bhattacharyya coefficients.
    Attention {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Geometry deltas between two embedding files.
    Report {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Numerical verification suites (exit code 3 on failure).
    Verify {
        #[command(subcommand)]
        suite: Suite,
    },
    /// Write a seeded synthetic instance.
    Gen {
        #[arg(long, default_value = TWO_NP_PROMPT)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        latent_tokens: usize,
        #[arg(long, default_value_t = 16)]
        text_dim: usize,
        #[arg(long, default_value_t = 8)]
        latent_dim: usize,
        #[arg(long, default_value_t = 8)]
        inner_dim: usize,
        #[arg(long, default_value_t = 2.5)]
        mean_norm: f64,
        #[arg(long, default_value_t = 2)]
        pad_tokens: usize,
        #[arg(long, value_enum, default_value = "f64")]
        dtype: DtypeArg,
    },
}

#[derive(Subcommand)]
enum Suite {
    /// KL divergence grows as two tokens separate.
    Prop1 {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long, default_value_t = 32)]
        max_latents: usize,
        #[arg(long, default_value_t = 8)]
        max_tokens: usize,
        #[arg(long, default_value_t = 16)]
        max_dim: usize,
    },
    /// Scaling equal-norm tokens by λ > 1 increases their distance.
    Prop2 {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
    },
    /// Norms of Gaussian token sums and differences.
    Remark1 {
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        mean_norm: f64,
    },
    /// Norm-ratio and cosine statistics; a Gaussian corpus check without inputs.
    Assumptions {
        #[arg(long, requires = "annotation")]
        embeddings: Option<PathBuf>,
        #[arg(long, requires = "embeddings")]
        annotation: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
    },
    /// Analytic gradients against central differences.
    Gradients {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Re-weighting vs value scaling, and merge-row mixing.
    Reweight {
        /// Weights applied to `--token`; defaults to 1 and 1.5.
        #[arg(long, value_delimiter = ',', default_value = "1,1.5")]
        alphas: Vec<f64>,
        /// Defaults to the first object token.
        #[arg(long)]
        token: Option<usize>,
        #[arg(long, requires_all = ["latents", "wq", "wk", "wv", "annotation"])]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        latents: Option<PathBuf>,
        #[arg(long)]
        wq: Option<PathBuf>,
        #[arg(long)]
        wk: Option<PathBuf>,
        #[arg(long)]
        wv: Option<PathBuf>,
        #[arg(long)]
        annotation: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<BindingConfig> {
    let mut cfg = match &cli.config {
        Some(path) => BindingConfig::from_json(&read_text(path)?)?,
        None => BindingConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.causality = match mode {
            Mode::Causal => CausalityMode::Causal,
            Mode::Noncausal => CausalityMode::NonCausal,
        };
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn out_dir(out: Option<&Path>) -> Result<&Path> {
    let dir = out.ok_or_else(|| Error::Config("--out <dir> is required for this command".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

/// Writes `text` to `<out>/<name>` when `--out` is set, else prints it.
fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(_) => write_file(&out_dir(out)?.join(name), text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_verdict<V: Verdict>(out: Option<&Path>, name: &str, verdict: &V) -> Result<ExitCode> {
    emit(out, name, &verdict.to_json())?;
    Ok(if verdict.passed() { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn load_model(model: &ModelArgs, prompt: &PromptArgs) -> Result<PipelineInputs> {
    let embeddings = embx::load(&model.embeddings)?;
    let annotation = resolve_prompt(&prompt.source(), embeddings.matrix.rows())?;
    Ok(PipelineInputs {
        latents: load_matrix(&model.latents)?,
        weights: load_weights(&model.wq, &model.wk, &model.wv)?,
        embeddings,
        annotation,
        config: BindingConfig::default(),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out.as_deref();
    let config = load_config(&cli)?;
    let seed = config.seed;
    match &cli.command {
        Command::Parse { prompt, rows } => {
            let annotation: PromptAnnotation = match rows {
                Some(rows) => annotate_template(prompt, *rows)?,
                None => parse_template_prompt(&tokenize(prompt), &Lexicon::builtin())?,
            };
            emit(out, "annotation.json", &(save_annotation(&annotation) + "\n"))?;
        }
        Command::Orthogonalize { embeddings, prompt } => {
            let file = embx::load(embeddings)?;
            let annotation = resolve_prompt(&prompt.source(), file.matrix.rows())?;
            let options = CapoOptions {
                strict_complement: config.strict_complement,
                include_attributes: config.capo_include_attributes,
            };
            let result = apply_capo(&file.matrix, &annotation, config.causality, options)?;
            let dir = out_dir(out)?;
            embx::save(dir.join("embeddings.embx"), &result.embeddings, file.dtype)?;
            write_file(&dir.join("events.json"), sorted_json(&result.events).as_bytes())?;
        }
        Command::Optimize { model, prompt } => {
            let mut inputs = load_model(model, prompt)?;
            inputs.config = config;
            let dir = out_dir(out)?;
            let result = run_pipeline(&inputs)?;
            write_outputs(dir, &result)?;
            let trace = &result.report.loss_trace;
            eprintln!(
                "loss {:.6} -> {:.6} over {} steps",
                trace[0].total,
                trace[trace.len() - 1].total,
                trace.len() - 1
            );
        }
        Command::Attention { model, prompt } => {
            let inputs = load_model(model, prompt)?;
            let state = cross_attention_maps(&inputs.latents, &inputs.embeddings.matrix, &inputs.weights)?;
            let stats = attention_stats(&state, &inputs.annotation, config.lambda)?;
            emit(out, "attention.json", &sorted_json(&stats))?;
        }
        Command::Report { before, after, prompt } => {
            let before = load_matrix(before)?;
            let after = load_matrix(after)?;
            let annotation = resolve_prompt(&prompt.source(), before.rows())?;
            let report = geometry_report(&before, &after, &annotation)?;
            emit(out, "geometry.json", &sorted_json(&report))?;
        }
        Command::Verify { suite } => return run_suite(suite, seed, out),
        Command::Gen { prompt, latent_tokens, text_dim, latent_dim, inner_dim, mean_norm, pad_tokens, dtype } => {
            let spec = SynthSpec {
                prompt: prompt.clone(),
                latent_tokens: *latent_tokens,
                text_dim: *text_dim,
                latent_dim: *latent_dim,
                inner_dim: *inner_dim,
                mean_norm: *mean_norm,
                pad_tokens: *pad_tokens,
                seed,
            };
            let inst = generate(&spec)?;
            let dtype = match dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            };
            let dir = out_dir(out)?;
            embx::save(dir.join("embeddings.embx"), &inst.embeddings, dtype)?;
            embx::save(dir.join("latents.embx"), &inst.latents, dtype)?;
            embx::save(dir.join("w_q.embx"), &inst.weights.w_q, dtype)?;
            embx::save(dir.join("w_k.embx"), &inst.weights.w_k, dtype)?;
            embx::save(dir.join("w_v.embx"), &inst.weights.w_v, dtype)?;
            write_file(&dir.join("annotation.json"), (save_annotation(&inst.annotation) + "\n").as_bytes())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_suite(suite: &Suite, seed: u64, out: Option<&Path>) -> Result<ExitCode> {
    match suite {
        Suite::Prop1 { trials, tolerance, max_latents, max_tokens, max_dim } => {
            let dims = Prop1Dims { max_latents: *max_latents, max_tokens: *max_tokens, max_dim: *max_dim };
            emit_verdict(out, "prop1.json", &verify::verify_prop1(*trials, dims, seed, *tolerance)?)
        }
        Suite::Prop2 { trials } => emit_verdict(out, "prop2.json", &verify::verify_prop2(*trials, seed)),
        Suite::Remark1 { dim, samples, mean_norm } => {
            emit_verdict(out, "remark1.json", &verify::verify_remark1(*dim, *samples, seed, *mean_norm)?)
        }
        Suite::Assumptions { embeddings, annotation, dim, pairs } => match (embeddings, annotation) {
            (Some(e), Some(a)) => {
                let t = load_matrix(e)?;
                let ann = bindgeom::prompt::load_annotation(&read_text(a)?)?;
                emit(out, "assumptions.json", &sorted_json(&verify::assumption_stats(&t, &ann)?))?;
                Ok(ExitCode::SUCCESS)
            }
            _ => emit_verdict(out, "assumptions.json", &verify::synthetic_corpus_check(*dim, *pairs, seed)?),
        },
        Suite::Gradients { instances, step, tolerance } => {
            emit_verdict(out, "gradients.json", &verify::verify_gradients(*instances, seed, *step, *tolerance)?)
        }
        Suite::Reweight { alphas, token, embeddings, latents, wq, wk, wv, annotation } => {
            let (h, t, w, ann) = match embeddings {
                Some(e) => {
                    let req = |p: &Option<PathBuf>| p.clone().expect("clap enforces requires_all");
                    (
                        load_matrix(&req(latents))?,
                        load_matrix(e)?,
                        load_weights(&req(wq), &req(wk), &req(wv))?,
                        bindgeom::prompt::load_annotation(&read_text(&req(annotation))?)?,
                    )
                }
                None => {
                    let inst = bindgeom::synth::two_np_instance(seed);
                    (inst.latents, inst.embeddings, inst.weights, inst.annotation)
                }
            };
            if ann.token_count != t.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "annotation has {} tokens, embeddings have {} rows",
                    ann.token_count,
                    t.rows()
                )));
            }
            let token = token.unwrap_or_else(|| ann.nps[0].object_index);
            emit_verdict(out, "reweight.json", &verify::verify_reinterpretation(&h, &t, &w, &ann, alphas, token)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
