//! Experiment runners. Each experiment fans independent jobs out to a
//! bounded worker pool; the jobs return in-memory artifacts which a single
//! collector writes once everything has succeeded.
//!
//! Every output directory contains `manifest.json`, the full
//! [`ExperimentSpec`], and re-running that manifest reproduces every file
//! byte for byte.

mod decoders;
mod iterative;

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use embinvert_core::embedder::{EmbedderNet, Embedding};
use embinvert_core::invert::{verify_asymptotics, AsymptoticsReport};
use embinvert_core::synth::{face_image, smooth_image, FacePose};
use embinvert_core::{Image, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use decoders::{
    FilterTableOutcome, FilterTableParams, GuidedFramesOutcome, GuidedFramesParams, ScatterOutcome, ScatterParams,
};
pub use iterative::{
    IterativeSetup, ScalingOutcome, ScalingParams, Set1Outcome, Set1Params, TvSweepOutcome, TvSweepParams,
};

use crate::artifacts::Artifacts;
use crate::report::{self, Table};
use crate::specfile::EmbedderChoice;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentName {
    Set1,
    Scaling,
    TvSweep,
    FilterTable,
    Scatter,
    GuidedFrames,
    Asymptotics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum ExperimentParams {
    Set1(Set1Params),
    Scaling(ScalingParams),
    TvSweep(TvSweepParams),
    FilterTable(FilterTableParams),
    Scatter(ScatterParams),
    GuidedFrames(GuidedFramesParams),
    Asymptotics(AsymptoticsParams),
}

impl ExperimentParams {
    pub fn defaults(name: ExperimentName) -> Self {
        match name {
            ExperimentName::Set1 => Self::Set1(Set1Params::default()),
            ExperimentName::Scaling => Self::Scaling(ScalingParams::default()),
            ExperimentName::TvSweep => Self::TvSweep(TvSweepParams::default()),
            ExperimentName::FilterTable => Self::FilterTable(FilterTableParams::default()),
            ExperimentName::Scatter => Self::Scatter(ScatterParams::default()),
            ExperimentName::GuidedFrames => Self::GuidedFrames(GuidedFramesParams::default()),
            ExperimentName::Asymptotics => Self::Asymptotics(AsymptoticsParams::default()),
        }
    }

    pub fn name(&self) -> ExperimentName {
        match self {
            Self::Set1(_) => ExperimentName::Set1,
            Self::Scaling(_) => ExperimentName::Scaling,
            Self::TvSweep(_) => ExperimentName::TvSweep,
            Self::FilterTable(_) => ExperimentName::FilterTable,
            Self::Scatter(_) => ExperimentName::Scatter,
            Self::GuidedFrames(_) => ExperimentName::GuidedFrames,
            Self::Asymptotics(_) => ExperimentName::Asymptotics,
        }
    }

    /// Replaces the experiment's data seed (the target sampler, or the
    /// asymptotics noise target).
    pub fn reseed(&mut self, seed: u64) {
        match self {
            Self::Set1(p) => p.seed = seed,
            Self::Scaling(p) => p.seed = seed,
            Self::TvSweep(p) => p.seed = seed,
            Self::FilterTable(p) => p.seed = seed,
            Self::Scatter(p) => p.seed = seed,
            Self::GuidedFrames(p) => p.seed = seed,
            Self::Asymptotics(p) => p.seed = seed,
        }
    }
}

/// A complete, reproducible experiment description. The output directory
/// is not part of it, so a manifest can be replayed anywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub params: ExperimentParams,
    #[serde(default)]
    pub embedder: EmbedderChoice,
}

impl ExperimentSpec {
    pub fn defaults(name: ExperimentName) -> Self {
        Self { params: ExperimentParams::defaults(name), embedder: EmbedderChoice::default() }
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Outcome {
    Set1(Set1Outcome),
    Scaling(ScalingOutcome),
    TvSweep(TvSweepOutcome),
    FilterTable(FilterTableOutcome),
    Scatter(ScatterOutcome),
    GuidedFrames(GuidedFramesOutcome),
    Asymptotics(AsymptoticsOutcome),
}

/// Runs `spec` on `threads` workers and writes its artifacts under `out`.
/// Nothing is written unless every job succeeds.
pub fn run(spec: &ExperimentSpec, out: &Path, threads: usize) -> Result<Outcome> {
    let (artifacts, outcome) = compute(spec, threads)?;
    artifacts.write_all(out)?;
    Ok(outcome)
}

/// Runs `spec` without touching the file system.
pub fn compute(spec: &ExperimentSpec, threads: usize) -> Result<(Artifacts, Outcome)> {
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().context("building the worker pool")?;
    let (mut artifacts, outcome) = pool.install(|| {
        let ctx = Inputs::new(spec.embedder)?;
        match &spec.params {
            ExperimentParams::Set1(p) => iterative::set1(&ctx, p),
            ExperimentParams::Scaling(p) => iterative::scaling(&ctx, p),
            ExperimentParams::TvSweep(p) => iterative::tv_sweep(&ctx, p),
            ExperimentParams::FilterTable(p) => decoders::filter_table(&ctx, p),
            ExperimentParams::Scatter(p) => decoders::scatter(&ctx, p),
            ExperimentParams::GuidedFrames(p) => decoders::guided_frames(&ctx, p),
            ExperimentParams::Asymptotics(p) => asymptotics(p),
        }
    })?;
    artifacts.json(MANIFEST, spec)?;
    artifacts.json(SUMMARY, &outcome)?;
    Ok((artifacts, outcome))
}

/// Shared inputs of the embedding-space experiments.
pub(crate) struct Inputs {
    pub choice: EmbedderChoice,
    pub embedder: Arc<EmbedderNet>,
    /// The neutral synthetic face, the default guiding image.
    pub guide: Image,
}

impl Inputs {
    fn new(choice: EmbedderChoice) -> Result<Self> {
        let embedder = choice.build()?;
        let guide = face_image(embedder.input_dims(), FacePose::NEUTRAL)?;
        Ok(Self { choice, embedder, guide })
    }

    /// The `index`-th pushforward target of `seed` with its source image.
    pub fn pushforward(&self, seed: u64, index: u64) -> Result<(Image, Embedding)> {
        let image = smooth_image(&mut Rng::derived(seed, index), self.embedder.input_dims())?;
        let target = self.embedder.embed_raw(&image)?;
        Ok((image, target))
    }
}

/// Order-preserving parallel map on the current pool.
pub(crate) fn par_map<T, R>(items: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
{
    items.into_par_iter().map(f).collect()
}

pub(crate) fn majority(flags: &[bool]) -> bool {
    2 * flags.iter().filter(|&&f| f).count() > flags.len()
}

pub(crate) fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

pub(crate) fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsParams {
    pub seed: u64,
    pub tv_weights: Vec<f64>,
    pub size: usize,
    pub alpha: f64,
    /// Allowed deviation of `‖δp‖ w` between consecutive weights.
    pub halving_tolerance: f64,
}

impl Default for AsymptoticsParams {
    fn default() -> Self {
        Self { seed: 1, tv_weights: vec![1e2, 1e3, 1e4], size: 8, alpha: 2.0, halving_tolerance: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsOutcome {
    pub report: AsymptoticsReport,
    pub max_dc_error: f64,
    /// `(‖δp‖ w)_k / (‖δp‖ w)_{k+1}`; 1 is exact inverse-weight scaling.
    pub scaling_ratios: Vec<f64>,
    pub halves: bool,
    pub errors_decrease: bool,
}

fn asymptotics(p: &AsymptoticsParams) -> Result<(Artifacts, Outcome)> {
    if p.tv_weights.len() < 2 {
        bail!("asymptotics needs at least two TV weights");
    }
    let report = verify_asymptotics(&p.tv_weights, p.size, p.alpha, p.seed)?;
    let scaling_ratios = report.scaling_ratios();
    let outcome = AsymptoticsOutcome {
        max_dc_error: report.rows.iter().map(|r| r.dc_error).fold(0.0, f64::max),
        halves: scaling_ratios.iter().all(|r| (r - 1.0).abs() <= p.halving_tolerance),
        errors_decrease: report.errors_decrease(),
        scaling_ratios,
        report,
    };
    let mut table = Table::new(&[
        "tv_weight",
        "iterations",
        "dc_error",
        "ac_norm",
        "predicted_ac_norm",
        "relative_error",
        "final_grad_max",
    ]);
    for r in &outcome.report.rows {
        table.push(vec![
            r.tv_weight.into(),
            r.iterations.into(),
            r.dc_error.into(),
            r.ac_norm.into(),
            r.predicted_ac_norm.into(),
            r.relative_error.into(),
            r.final_grad_max.into(),
        ])?;
    }
    let mut a = Artifacts::new();
    a.add("asymptotics.csv", table.to_csv()?)?;
    a.json("asymptotics.json", &table.to_json())?;
    Ok((a, Outcome::Asymptotics(outcome)))
}

/// Per-run metrics in a fixed column order shared by the iterative experiments.
pub(crate) fn metrics_columns() -> Vec<&'static str> {
    vec!["final_loss", "l2_to_target", "cos_to_target"]
}

pub(crate) fn trace_bytes(trace: &[embinvert_core::invert::TraceRecord]) -> Result<Vec<u8>> {
    report::pretty(&report::trace_json(trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_json_shape() {
        let spec = ExperimentSpec::defaults(ExperimentName::Asymptotics);
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["name"], "asymptotics");
        assert_eq!(v["params"]["tv_weights"][2], 1e4);
        assert_eq!(v["embedder"]["centered"], true);
        let back: ExperimentSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn every_name_has_roundtripping_defaults() {
        use clap::ValueEnum;
        for name in ExperimentName::value_variants() {
            let spec = ExperimentSpec::defaults(*name);
            assert_eq!(spec.params.name(), *name);
            let text = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentSpec>(&text).unwrap(), spec);
        }
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"name":"set2","params":{}}"#).is_err());
    }

    #[test]
    fn trend_helpers() {
        assert!(majority(&[true, true, false]));
        assert!(!majority(&[true, false]));
        assert!(non_decreasing(&[1.0, 1.0, 2.0]));
        assert!(!non_increasing(&[1.0, 2.0]));
    }

    #[test]
    fn asymptotics_run_is_reproducible_and_passes() {
        let mut spec = ExperimentSpec::defaults(ExperimentName::Asymptotics);
        if let ExperimentParams::Asymptotics(p) = &mut spec.params {
            p.tv_weights = vec![1e2, 2e2];
            p.size = 4;
        }
        let (a, outcome) = compute(&spec, 1).unwrap();
        let (b, _) = compute(&spec, 2).unwrap();
        assert_eq!(a, b);
        let Outcome::Asymptotics(o) = outcome else { panic!("wrong outcome kind") };
        assert!(o.max_dc_error < 1e-6 && o.halves && o.errors_decrease, "{o:?}");
        let names: Vec<_> = a.paths().map(|p| p.display().to_string()).collect();
        assert_eq!(names, ["asymptotics.csv", "asymptotics.json", MANIFEST, SUMMARY]);
    }
}
