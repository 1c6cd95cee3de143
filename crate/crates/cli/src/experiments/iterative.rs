//! Experiments built on iterative reconstruction: a reconstruction set, the
//! TV-weight sweep and the target-scaling comparison.

use std::sync::Arc;

use anyhow::{ensure, Result};
use embinvert_core::embedder::{EmbedderNet, Embedding};
use embinvert_core::invert::{reconstruct, Init, InvertJob, OptimizerKind, Schedule, ScheduleTarget, TraceRecord};
use embinvert_core::objective::{DistanceKind, DistanceSpec, LossModel, LossSpec, RegularizerSpec};
use embinvert_core::{Error, Image};
use serde::{Deserialize, Serialize};

use super::{majority, metrics_columns, non_decreasing, par_map, trace_bytes, Inputs, Outcome};
use crate::artifacts::Artifacts;
use crate::png_io;
use crate::report::{Cell, Table};

/// Optimizer settings for one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterativeSetup {
    pub init: Init,
    pub iterations: usize,
    pub step_size: f64,
    /// Per-iteration multiplicative step-size decay; absent for a constant step.
    #[serde(default)]
    pub step_decay: Option<f64>,
    /// Pyramid depth for gradient normalization; absent to disable it.
    pub lpgn: Option<usize>,
    /// Trace every `cadence` iterations.
    pub cadence: usize,
}

impl IterativeSetup {
    pub fn job(&self) -> InvertJob {
        InvertJob {
            init: self.init.clone(),
            iterations: self.iterations,
            lpgn: self.lpgn,
            clamp: true,
            cadence: self.cadence,
            optimizer: OptimizerKind::Adam,
            step_size: self.step_size,
        }
    }

    /// Adds the step-size schedule, if any, to `spec`.
    pub(crate) fn attach(&self, spec: LossSpec) -> LossSpec {
        match self.step_decay {
            Some(rate) => spec.with_schedule(Schedule::exponential(ScheduleTarget::StepSize, rate, 0.0)),
            None => spec,
        }
    }
}

/// Loss shape shared by the iterative experiments: a distance plus TV and
/// guiding regularizers on the neutral face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub tv_weight: f64,
    pub tv_alpha: f64,
    pub guiding_weight: f64,
    pub guiding_layers: Vec<usize>,
}

impl Regularization {
    fn spec(&self, distance: DistanceSpec, tv_weight: f64, guide: &Image) -> LossSpec {
        LossSpec::new(distance).with(RegularizerSpec::tv(tv_weight, self.tv_alpha)).with(RegularizerSpec::guiding(
            self.guiding_weight,
            self.guiding_layers.clone(),
            guide.clone(),
        ))
    }
}

struct Run {
    image: Image,
    trace: Vec<TraceRecord>,
    final_loss: f64,
    l2_to_target: f64,
    cos_to_target: f64,
}

fn reconstruct_with(spec: LossSpec, embedder: &Arc<EmbedderNet>, setup: &IterativeSetup) -> Result<Run> {
    let model = LossModel::new(setup.attach(spec), embedder.clone())?;
    let r = reconstruct(&setup.job(), &model).map_err(Error::from)?;
    let m = r.final_embedding.expect("loss model reports embedding metrics");
    Ok(Run {
        image: r.image,
        trace: r.trace,
        final_loss: r.final_loss,
        l2_to_target: m.l2_to_target,
        cos_to_target: m.cos_to_target,
    })
}

fn cosine(embedder: &EmbedderNet, a: &Image, b: &Image) -> Result<f64> {
    let ea = embedder.embed_raw(a)?.to_normalized()?;
    let eb = embedder.embed_raw(b)?.to_normalized()?;
    Ok(ea.values().dot(eb.values())?)
}

fn run_cells(r: &Run) -> Vec<Cell> {
    vec![r.final_loss.into(), r.l2_to_target.into(), r.cos_to_target.into()]
}

fn columns(leading: &[&'static str]) -> Vec<&'static str> {
    leading.iter().copied().chain(metrics_columns()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Set1Params {
    /// Pushforward sampler seed of the targets.
    pub seed: u64,
    pub targets: usize,
    pub regularization: Regularization,
    pub setup: IterativeSetup,
    /// Normalized-dot level counted as a successful reconstruction.
    pub cos_threshold: f64,
}

impl Default for Set1Params {
    fn default() -> Self {
        Self {
            seed: 11,
            targets: 10,
            regularization: Regularization {
                tv_weight: 1e-3,
                tv_alpha: 2.0,
                guiding_weight: 1e-2,
                guiding_layers: vec![2],
            },
            setup: IterativeSetup {
                init: Init::Guide,
                iterations: 500,
                step_size: 0.05,
                step_decay: None,
                lpgn: Some(3),
                cadence: 10,
            },
            cos_threshold: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Set1Outcome {
    /// Final normalized dot with the target, per target.
    pub cos_to_target: Vec<f64>,
    pub cos_threshold: f64,
    pub above_threshold: usize,
}

/// Dot-product reconstructions of pushforward targets from the guide.
pub(super) fn set1(ctx: &Inputs, p: &Set1Params) -> Result<(Artifacts, Outcome)> {
    ensure!(p.targets > 0, "set1 needs at least one target");
    let runs = par_map((0..p.targets as u64).collect(), |i| {
        let (source, target) = ctx.pushforward(p.seed, i)?;
        let distance = DistanceSpec::new(DistanceKind::Dot, target);
        let spec = p.regularization.spec(distance, p.regularization.tv_weight, &ctx.guide);
        Ok((source, reconstruct_with(spec, &ctx.embedder, &p.setup)?))
    })?;
    let mut a = Artifacts::new();
    let mut table = Table::new(&columns(&["target"]));
    for (i, (_, r)) in runs.iter().enumerate() {
        a.png(format!("reconstructions/target_{i:02}.png"), &r.image)?;
        a.add(format!("traces/target_{i:02}.json"), trace_bytes(&r.trace)?)?;
        table.push([vec![i.into()], run_cells(r)].concat())?;
    }
    let sources: Vec<Image> = runs.iter().map(|(s, _)| s.clone()).collect();
    let images: Vec<Image> = runs.iter().map(|(_, r)| r.image.clone()).collect();
    a.png("grid.png", &png_io::grid(&[sources, images])?)?;
    a.png("guide.png", &ctx.guide)?;
    a.add("metrics.csv", table.to_csv()?)?;
    a.json("metrics.json", &table.to_json())?;
    let cos: Vec<f64> = runs.iter().map(|(_, r)| r.cos_to_target).collect();
    let outcome = Set1Outcome {
        above_threshold: cos.iter().filter(|&&c| c >= p.cos_threshold).count(),
        cos_threshold: p.cos_threshold,
        cos_to_target: cos,
    };
    Ok((a, Outcome::Set1(outcome)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvSweepParams {
    pub seed: u64,
    pub targets: usize,
    /// Swept TV weights; `regularization.tv_weight` is not used.
    pub tv_weights: Vec<f64>,
    pub regularization: Regularization,
    pub setup: IterativeSetup,
}

impl Default for TvSweepParams {
    fn default() -> Self {
        let base = Set1Params::default();
        Self {
            seed: 21,
            targets: 5,
            tv_weights: vec![1e-3, 1e-2, 1e-1, 1.0],
            regularization: base.regularization,
            setup: base.setup,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvSweepOutcome {
    pub tv_weights: Vec<f64>,
    /// `‖ẽ − ẽ_target‖² = 2 − 2 ẽ·ẽ_target` per target (rows) and weight (columns).
    pub distances: Vec<Vec<f64>>,
    pub monotone: Vec<bool>,
    pub majority_monotone: bool,
}

/// Final distance to the target as the TV weight grows.
pub(super) fn tv_sweep(ctx: &Inputs, p: &TvSweepParams) -> Result<(Artifacts, Outcome)> {
    ensure!(p.targets > 0 && p.tv_weights.len() >= 2, "tv_sweep needs targets and at least two weights");
    let sources = par_map((0..p.targets as u64).collect(), |i| ctx.pushforward(p.seed, i))?;
    let jobs: Vec<(usize, usize)> = (0..p.targets).flat_map(|i| (0..p.tv_weights.len()).map(move |k| (i, k))).collect();
    let runs = par_map(jobs.clone(), |(i, k)| {
        let distance = DistanceSpec::new(DistanceKind::Dot, sources[i].1.clone());
        let spec = p.regularization.spec(distance, p.tv_weights[k], &ctx.guide);
        reconstruct_with(spec, &ctx.embedder, &p.setup)
    })?;
    let mut a = Artifacts::new();
    let mut table = Table::new(&columns(&["target", "tv_weight", "distance"]));
    let mut distances = vec![Vec::with_capacity(p.tv_weights.len()); p.targets];
    let mut rows: Vec<Vec<Image>> = sources.iter().map(|(s, _)| vec![s.clone()]).collect();
    for ((i, k), r) in jobs.iter().zip(&runs) {
        let d = 2.0 - 2.0 * r.cos_to_target;
        distances[*i].push(d);
        rows[*i].push(r.image.clone());
        a.png(format!("reconstructions/target_{i:02}_tv_{k}.png"), &r.image)?;
        a.add(format!("traces/target_{i:02}_tv_{k}.json"), trace_bytes(&r.trace)?)?;
        table.push([vec![(*i).into(), p.tv_weights[*k].into(), d.into()], run_cells(r)].concat())?;
    }
    a.png("grid.png", &png_io::grid(&rows)?)?;
    a.add("distances.csv", table.to_csv()?)?;
    a.json("distances.json", &table.to_json())?;
    let monotone: Vec<bool> = distances.iter().map(|d| non_decreasing(d)).collect();
    let outcome = TvSweepOutcome {
        tv_weights: p.tv_weights.clone(),
        majority_monotone: majority(&monotone),
        distances,
        monotone,
    };
    Ok((a, Outcome::TvSweep(outcome)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub seed: u64,
    /// Sampler index of the first target.
    pub first_index: u64,
    pub targets: usize,
    /// Factors applied to the target of the ℓ2 reconstructions.
    pub scales: Vec<f64>,
    pub regularization: Regularization,
    pub setup: IterativeSetup,
}

impl Default for ScalingParams {
    fn default() -> Self {
        Self {
            seed: 21,
            first_index: 100,
            targets: 3,
            scales: vec![1.0, 2.0, 4.0, 8.0],
            regularization: Regularization {
                tv_weight: 1e-3,
                tv_alpha: 2.0,
                guiding_weight: 1e-3,
                guiding_layers: vec![2],
            },
            setup: IterativeSetup {
                init: Init::Guide,
                iterations: 1500,
                step_size: 0.05,
                step_decay: Some(0.997),
                lpgn: None,
                cadence: 30,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingOutcome {
    pub scales: Vec<f64>,
    /// Embedding-space cosine between each scaled ℓ2 reconstruction and the
    /// dot-product reconstruction, per target (rows) and scale (columns).
    pub cos_to_dot: Vec<Vec<f64>>,
    pub monotone: Vec<bool>,
    pub majority_monotone: bool,
}

/// ℓ2 reconstructions of scaled targets against the dot-product one.
pub(super) fn scaling(ctx: &Inputs, p: &ScalingParams) -> Result<(Artifacts, Outcome)> {
    ensure!(p.targets > 0 && p.scales.len() >= 2, "scaling needs targets and at least two scales");
    ensure!(p.scales.iter().all(|s| *s > 0.0), "scales must be positive");
    let sources = par_map((0..p.targets as u64).collect(), |i| ctx.pushforward(p.seed, p.first_index + i))?;
    // slot 0 is the dot-product reference, slot k + 1 the ℓ2 run at scales[k]
    let slots = p.scales.len() + 1;
    let jobs: Vec<(usize, usize)> = (0..p.targets).flat_map(|i| (0..slots).map(move |k| (i, k))).collect();
    let runs = par_map(jobs.clone(), |(i, k)| {
        let target: &Embedding = &sources[i].1;
        let distance = match k {
            0 => DistanceSpec::new(DistanceKind::Dot, target.clone()),
            k => DistanceSpec::new(DistanceKind::L2, target.clone()).scaled(p.scales[k - 1]),
        };
        let spec = p.regularization.spec(distance, p.regularization.tv_weight, &ctx.guide);
        reconstruct_with(spec, &ctx.embedder, &p.setup)
    })?;
    let mut a = Artifacts::new();
    let mut table = Table::new(&columns(&["target", "scale", "cos_to_dot"]));
    let mut cos_to_dot = Vec::with_capacity(p.targets);
    let mut rows = Vec::with_capacity(p.targets);
    for (i, chunk) in runs.chunks(slots).enumerate() {
        let reference = &chunk[0];
        a.png(format!("reconstructions/target_{i:02}_dot.png"), &reference.image)?;
        a.add(format!("traces/target_{i:02}_dot.json"), trace_bytes(&reference.trace)?)?;
        let mut row = vec![sources[i].0.clone(), reference.image.clone()];
        let mut cos = Vec::with_capacity(p.scales.len());
        for (k, r) in chunk[1..].iter().enumerate() {
            let c = cosine(&ctx.embedder, &r.image, &reference.image)?;
            cos.push(c);
            row.push(r.image.clone());
            a.png(format!("reconstructions/target_{i:02}_l2_{k}.png"), &r.image)?;
            a.add(format!("traces/target_{i:02}_l2_{k}.json"), trace_bytes(&r.trace)?)?;
            table.push([vec![i.into(), p.scales[k].into(), c.into()], run_cells(r)].concat())?;
        }
        cos_to_dot.push(cos);
        rows.push(row);
    }
    debug_assert_eq!(jobs.len(), runs.len());
    a.png("grid.png", &png_io::grid(&rows)?)?;
    a.add("cosines.csv", table.to_csv()?)?;
    a.json("cosines.json", &table.to_json())?;
    let monotone: Vec<bool> = cos_to_dot.iter().map(|c| non_decreasing(c)).collect();
    let outcome =
        ScalingOutcome { scales: p.scales.clone(), majority_monotone: majority(&monotone), cos_to_dot, monotone };
    Ok((a, Outcome::Scaling(outcome)))
}
