use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use embinvert::artifacts::Artifacts;
use embinvert::checkpoint::{checkpoint_artifacts, load_checkpoint, CheckpointManifest, TrainFile};
use embinvert::experiments::{self, ExperimentName, ExperimentSpec};
use embinvert::specfile::{EmbedderChoice, SpecFile};
use embinvert::{png_io, report};
use embinvert_core::decoder::train;
use embinvert_core::embedder::{Embedding, DEFAULT_SEED};
use embinvert_core::gradsuite;
use embinvert_core::invert::{reconstruct, Init, InvertJob, OptimizerKind, DEFAULT_ITERATIONS, DEFAULT_STEP_SIZE};
use embinvert_core::numcore::eit;
use embinvert_core::objective::LossModel;
use serde_json::json;

/// Seed of the gradient oracle suite when `--seed` is not given.
const GRAD_CHECK_SEED: u64 = 0x6AD5;

#[derive(Parser)]
#[command(name = "embinvert", version, about = "Reconstruct images from embedding vectors")]
struct Cli {
    /// Seed for the command's primary random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for experiments (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct an image from a loss spec by gradient descent.
    Invert {
        #[arg(long)]
        spec: PathBuf,
        /// `noise[:seed[:amplitude]]`, `guide` or `constant:<value>`.
        #[arg(long, default_value = "noise")]
        init: String,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
        /// Write the optimization trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_STEP_SIZE)]
        step_size: f64,
        /// Pyramid levels for gradient normalization, or `none`.
        #[arg(long, default_value = "3")]
        lpgn: String,
        #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
        optimizer: Optimizer,
        /// Let pixels leave [0, 1] during optimization.
        #[arg(long)]
        no_clamp: bool,
        #[arg(long, default_value_t = 1)]
        cadence: usize,
    },
    /// Train a feed-forward decoder and write a checkpoint directory.
    TrainDecoder {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode an embedding with a trained checkpoint.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        guide: Option<PathBuf>,
    },
    /// Run a named experiment, or replay one from its manifest.
    Experiment {
        #[arg(value_enum)]
        name: Option<ExperimentName>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare every analytic gradient against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// Surrogate embedder utilities.
    Embedder {
        #[command(subcommand)]
        action: EmbedderCommand,
    },
}

#[derive(Subcommand)]
enum EmbedderCommand {
    /// Dump the embedder weights as EIT1 plus a JSON manifest.
    Export {
        /// Export the raw variant instead of the centered one.
        #[arg(long)]
        uncentered: bool,
    },
}

/// A run that finished but failed a numerical check.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericalFailure(String);

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return 3;
        }
        if let Some(core) = cause.downcast_ref::<embinvert_core::Error>() {
            return if core.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().context("--out is required")
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    match cli.command {
        Command::Invert { spec, init, iters, trace, step_size, lpgn, optimizer, no_clamp, cadence } => {
            let job = InvertJob {
                init: parse_init(&init, cli.seed.unwrap_or(0))?,
                iterations: iters,
                lpgn: parse_lpgn(&lpgn)?,
                clamp: !no_clamp,
                cadence,
                optimizer: match optimizer {
                    Optimizer::Adam => OptimizerKind::Adam,
                    Optimizer::Sgd => OptimizerKind::Sgd,
                },
                step_size,
            };
            invert(&spec, &job, require_out(&cli.out)?, trace.as_deref())
        }
        Command::TrainDecoder { config } => train_decoder(&config, cli.seed, require_out(&cli.out)?),
        Command::Decode { ckpt, embedding, guide } => {
            decode(&ckpt, &embedding, guide.as_deref(), require_out(&cli.out)?)
        }
        Command::Experiment { name, manifest } => {
            let mut spec = match (name, manifest) {
                (_, Some(path)) => {
                    let spec = ExperimentSpec::read_manifest(&path)?;
                    if let Some(n) = name {
                        ensure!(n == spec.params.name(), "manifest describes {:?}, not {n:?}", spec.params.name());
                    }
                    spec
                }
                (Some(n), None) => ExperimentSpec::defaults(n),
                (None, None) => bail!("give an experiment name or --manifest"),
            };
            if let Some(seed) = cli.seed {
                spec.params.reseed(seed);
            }
            let out = require_out(&cli.out)?;
            let outcome = experiments::run(&spec, out, threads)?;
            println!("{}", serde_json::to_string(&outcome)?);
            Ok(())
        }
        Command::GradCheck { instances } => {
            grad_check(cli.seed.unwrap_or(GRAD_CHECK_SEED), instances, cli.out.as_deref())
        }
        Command::Embedder { action: EmbedderCommand::Export { uncentered } } => {
            let choice = EmbedderChoice { seed: cli.seed.unwrap_or(DEFAULT_SEED), centered: !uncentered };
            export_embedder(choice, require_out(&cli.out)?)
        }
    }
}

fn parse_init(s: &str, default_seed: u64) -> Result<Init> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<Option<f64>> {
        parts.get(i).map(|p| p.parse::<f64>().with_context(|| format!("bad number {p:?} in --init"))).transpose()
    };
    Ok(match parts[0] {
        "noise" => {
            ensure!(parts.len() <= 3, "--init noise takes at most seed and amplitude");
            let seed = match parts.get(1) {
                Some(p) => p.parse().with_context(|| format!("bad seed {p:?} in --init"))?,
                None => default_seed,
            };
            Init::Noise { seed, amplitude: num(2)?.unwrap_or(0.1) }
        }
        "guide" if parts.len() == 1 => Init::Guide,
        "constant" if parts.len() == 2 => Init::Constant { value: num(1)?.expect("two parts") },
        _ => bail!("unrecognized --init {s:?}; use noise[:seed[:amplitude]], guide or constant:<value>"),
    })
}

fn parse_lpgn(s: &str) -> Result<Option<usize>> {
    if s == "none" {
        return Ok(None);
    }
    Ok(Some(s.parse().with_context(|| format!("--lpgn must be a level count or none, got {s:?}"))?))
}

fn invert(spec_path: &Path, job: &InvertJob, out: &Path, trace_path: Option<&Path>) -> Result<()> {
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let loaded = SpecFile::read(spec_path)?.load(base)?;
    let model = LossModel::new(loaded.spec, loaded.embedder)?;
    let write_trace = |trace| -> Result<()> {
        if let Some(p) = trace_path {
            std::fs::write(p, report::pretty(&report::trace_json(trace))?)
                .with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    };
    match reconstruct(job, &model) {
        Ok(r) => {
            png_io::write(out, &r.image)?;
            write_trace(&r.trace)?;
            let m = r.final_embedding.expect("loss model reports embedding metrics");
            println!(
                "{}",
                json!({"final_loss": r.final_loss, "l2_to_target": m.l2_to_target, "cos_to_target": m.cos_to_target})
            );
            Ok(())
        }
        Err(failure) => {
            write_trace(&failure.trace)?;
            Err(anyhow::Error::new(failure.error)
                .context(format!("inversion failed after {} trace records", failure.trace.len())))
        }
    }
}

fn train_decoder(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut file = TrainFile::read(config)?;
    if let Some(s) = seed {
        file.decoder.seed = s;
    }
    let embedder = file.build_embedder()?;
    let cfg = file.train_config(&embedder, config.parent().unwrap_or(Path::new(".")))?;
    let (net, history) = train(&cfg, &embedder)?;
    let manifest = CheckpointManifest {
        decoder: cfg.decoder.clone(),
        embedder: file.embedder,
        sampler: file.sampler,
        loss: file.loss.clone(),
        budget: file.budget.clone(),
        step: cfg.steps,
        parameter_count: net.param_count(),
        history: history.clone(),
    };
    checkpoint_artifacts(Path::new(""), &net, &manifest)?.write_all(out)?;
    println!(
        "{}",
        json!({"initial_validation": history.initial_validation(), "final_validation": history.final_validation()})
    );
    Ok(())
}

fn decode(ckpt: &Path, embedding: &Path, guide: Option<&Path>, out: &Path) -> Result<()> {
    let (net, manifest) = load_checkpoint(ckpt)?;
    let e = Embedding::unnormalized(eit::load(embedding)?)?;
    let e = if manifest.decoder.normalized_input { e.to_normalized()? } else { e };
    let guide = match (guide, net.is_guided()) {
        (Some(p), true) => Some(png_io::read(p)?),
        (None, false) => None,
        (None, true) => bail!("this decoder is guided; pass --guide"),
        (Some(_), false) => bail!("this decoder takes no guide"),
    };
    png_io::write(out, &net.decode(&e, guide.as_ref())?)
}

fn grad_check(seed: u64, instances: usize, out: Option<&Path>) -> Result<()> {
    ensure!(instances > 0, "--instances must be ≥ 1");
    let outcomes = gradsuite::run(seed, instances)?;
    for o in &outcomes {
        println!(
            "{} {:<24} #{} rel_err {:.3e} (tol {:.0e}, {} coords)",
            if o.passed() { "ok  " } else { "FAIL" },
            o.name,
            o.instance,
            o.rel_err,
            o.tolerance,
            o.checked
        );
    }
    if let Some(p) = out {
        std::fs::write(p, report::pretty(&outcomes)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(NumericalFailure(format!("{failed} of {} gradient checks failed", outcomes.len())).into());
    }
    Ok(())
}

fn export_embedder(choice: EmbedderChoice, out: &Path) -> Result<()> {
    let embedder = choice.build()?;
    let net = embedder.network();
    let mut dims = embedder.input_dims().to_vec();
    let mut layers = Vec::with_capacity(net.len());
    for layer in net.layers() {
        let output = layer.output_dims(&dims)?;
        let params: Vec<&[usize]> = layer.params().map(|(k, b)| vec![k.dims(), b.dims()]).unwrap_or_default();
        layers.push(json!({"kind": layer.kind(), "input": dims, "output": output, "params": params}));
        dims = output;
    }
    let manifest = json!({
        "seed": choice.seed,
        "centered": choice.centered,
        "config": embedder.config(),
        "layers": layers,
        "weights": out.file_name().map(|n| n.to_string_lossy().into_owned()),
    });
    let name = out.file_name().context("--out must name a file")?;
    let manifest_name = Path::new(name).with_extension("json");
    let weights: Vec<u8> = net.params().into_iter().flat_map(eit::encode).collect();
    let mut a = Artifacts::new();
    a.add(name, weights)?;
    a.json(manifest_name, &manifest)?;
    a.write_all(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))
}
