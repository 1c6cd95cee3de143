//! Experiments built on trained feed-forward decoders: the filter-count
//! table, the feed-forward versus iterative scatter, and guided decoding of
//! a synthetic frame sequence.

use std::path::Path;

use anyhow::{ensure, Result};
use embinvert_core::decoder::{
    compare_ff_vs_iterative, evaluate, train, validation_samples, DecoderNet, MetricsRow, Sample, Sampler,
    ScatterPoint, ScatterReport, TrainConfig, TrainHistory,
};
use embinvert_core::invert::Init;
use embinvert_core::synth::face_frames;
use embinvert_core::Image;
use serde::{Deserialize, Serialize};

use super::iterative::IterativeSetup;
use super::{majority, non_increasing, par_map, Inputs, Outcome};
use crate::artifacts::Artifacts;
use crate::checkpoint::{checkpoint_artifacts, CheckpointManifest, DecoderOptions, TrainingBudget};
use crate::png_io;
use crate::report::{scatter_svg, MetricsTable, Table};
use crate::specfile::{DistanceKindFile, LossTemplate};

/// Decoded validation samples shown per configuration in grids.
const GRID_SAMPLES: usize = 6;

fn default_loss() -> LossTemplate {
    LossTemplate {
        distance: DistanceKindFile::L2,
        tv_weight: 1e-3,
        tv_alpha: 2.0,
        guiding_weight: 1e-3,
        guiding_layers: vec![2],
    }
}

fn train_config(
    ctx: &Inputs,
    decoder: &DecoderOptions,
    sampler_seed: u64,
    budget: &TrainingBudget,
    loss: &LossTemplate,
    guides: Vec<Image>,
) -> Result<TrainConfig> {
    let template_guide = guides.first().cloned().unwrap_or_else(|| ctx.guide.clone());
    Ok(TrainConfig {
        decoder: decoder.config(&ctx.embedder, loss.wants_normalized()),
        sampler: Sampler::Pushforward { seed: sampler_seed },
        guides,
        batch: budget.batch,
        steps: budget.steps,
        learning_rate: budget.learning_rate,
        template: loss.build(&ctx.embedder, template_guide)?,
        validation_size: budget.validation_size,
        validation_every: budget.validation_every,
    })
}

fn manifest(
    ctx: &Inputs,
    cfg: &TrainConfig,
    loss: &LossTemplate,
    budget: &TrainingBudget,
    net: &DecoderNet,
    history: &TrainHistory,
) -> CheckpointManifest {
    CheckpointManifest {
        decoder: cfg.decoder.clone(),
        embedder: ctx.choice,
        sampler: cfg.sampler,
        loss: loss.clone(),
        budget: budget.clone(),
        step: cfg.steps,
        parameter_count: net.param_count(),
        history: history.clone(),
    }
}

fn validation_ratio(h: &TrainHistory) -> Result<(f64, f64)> {
    let first = h.initial_validation().ok_or_else(|| anyhow::anyhow!("training recorded no validation"))?;
    let last = h.final_validation().unwrap_or(first);
    Ok((first, last))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterTableParams {
    /// Pushforward sampler seed of the training and validation targets.
    pub seed: u64,
    pub filters: Vec<usize>,
    /// Decoder initialization seeds; each is one replicate of the sweep.
    pub decoder_seeds: Vec<u64>,
    pub budget: TrainingBudget,
    pub loss: LossTemplate,
}

impl Default for FilterTableParams {
    fn default() -> Self {
        Self {
            seed: 7,
            filters: vec![8, 16, 32],
            decoder_seeds: vec![1, 2, 3],
            budget: TrainingBudget {
                steps: 1000,
                batch: 8,
                learning_rate: 1e-3,
                validation_size: 32,
                validation_every: 500,
            },
            loss: default_loss(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterTableOutcome {
    pub filters: Vec<usize>,
    pub decoder_seeds: Vec<u64>,
    /// `⟨𝓛⟩` on the validation set per decoder seed (rows) and filter count (columns).
    pub mean_loss: Vec<Vec<f64>>,
    /// `⟨ẽ₁·ẽ₂⟩`, same layout.
    pub mean_cos: Vec<Vec<f64>>,
    pub monotone: Vec<bool>,
    pub majority_monotone: bool,
}

/// Validation metrics of decoders trained with different filter counts at a
/// fixed budget.
pub(super) fn filter_table(ctx: &Inputs, p: &FilterTableParams) -> Result<(Artifacts, Outcome)> {
    ensure!(!p.filters.is_empty() && !p.decoder_seeds.is_empty(), "filter_table needs filters and seeds");
    let jobs: Vec<(usize, usize)> =
        (0..p.decoder_seeds.len()).flat_map(|s| (0..p.filters.len()).map(move |f| (s, f))).collect();
    let results = par_map(jobs.clone(), |(s, f)| {
        let options = DecoderOptions {
            filters: p.filters[f],
            seed: p.decoder_seeds[s],
            seed_size: DecoderOptions::default_seed_size(),
            guide_channels: None,
        };
        let cfg = train_config(ctx, &options, p.seed, &p.budget, &p.loss, Vec::new())?;
        let (net, history) = train(&cfg, &ctx.embedder)?;
        let samples = validation_samples(&cfg, &ctx.embedder)?;
        let row = evaluate(&net, &ctx.embedder, &cfg.template, &samples)?;
        let decoded = samples
            .iter()
            .take(GRID_SAMPLES)
            .map(|s| net.decode(&s.target, None))
            .collect::<embinvert_core::Result<Vec<_>>>()?;
        Ok((row, history, decoded))
    })?;
    let mut a = Artifacts::new();
    let mut table = MetricsTable::default();
    let (nf, ns) = (p.filters.len(), p.decoder_seeds.len());
    let mut mean_loss = vec![vec![0.0; nf]; ns];
    let mut mean_cos = vec![vec![0.0; nf]; ns];
    let mut grid_rows = Vec::new();
    for ((s, f), (row, history, decoded)) in jobs.iter().zip(&results) {
        let key = format!("filters={},seed={}", p.filters[*f], p.decoder_seeds[*s]);
        table.push(key, *row)?;
        mean_loss[*s][*f] = row.mean_loss;
        mean_cos[*s][*f] = row.mean_cos;
        a.json(format!("training/filters_{}_seed_{}.json", p.filters[*f], p.decoder_seeds[*s]), history)?;
        if *s == 0 {
            grid_rows.push(decoded.clone());
        }
    }
    let mut averaged = MetricsTable::default();
    for (f, filters) in p.filters.iter().enumerate() {
        let pick = |pred: &dyn Fn(&MetricsRow) -> f64| {
            jobs.iter().zip(&results).filter(|((_, jf), _)| *jf == f).map(|(_, r)| pred(&r.0)).sum::<f64>() / ns as f64
        };
        averaged.push(
            format!("filters={filters}"),
            MetricsRow {
                count: results[f].0.count * ns,
                mean_loss: pick(&|r| r.mean_loss),
                mean_l2: pick(&|r| r.mean_l2),
                mean_cos: pick(&|r| r.mean_cos),
            },
        )?;
    }
    a.add("metrics.csv", table.table().to_csv()?)?;
    a.json("metrics.json", &table.table().to_json())?;
    a.add("metrics_by_filters.csv", averaged.table().to_csv()?)?;
    a.json("metrics_by_filters.json", &averaged.table().to_json())?;
    a.png("grid.png", &png_io::grid(&grid_rows)?)?;
    let monotone: Vec<bool> = mean_loss.iter().map(|r| non_increasing(r)).collect();
    let outcome = FilterTableOutcome {
        filters: p.filters.clone(),
        decoder_seeds: p.decoder_seeds.clone(),
        majority_monotone: majority(&monotone),
        mean_loss,
        mean_cos,
        monotone,
    };
    Ok((a, Outcome::FilterTable(outcome)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterParams {
    /// Pushforward sampler seed of the compared embeddings.
    pub seed: u64,
    pub embeddings: usize,
    /// Pushforward sampler seed of the training targets.
    pub training_seed: u64,
    pub decoder: DecoderOptions,
    pub budget: TrainingBudget,
    pub loss: LossTemplate,
    /// Iterative reconstruction of the same loss.
    pub iterative: IterativeSetup,
}

impl Default for ScatterParams {
    fn default() -> Self {
        Self {
            seed: 99,
            embeddings: 30,
            training_seed: 7,
            decoder: DecoderOptions {
                filters: 16,
                seed: 1,
                seed_size: DecoderOptions::default_seed_size(),
                guide_channels: None,
            },
            budget: TrainingBudget {
                steps: 2000,
                batch: 8,
                learning_rate: 1e-3,
                validation_size: 32,
                validation_every: 500,
            },
            loss: default_loss(),
            iterative: IterativeSetup {
                init: Init::Guide,
                iterations: 500,
                step_size: 0.05,
                step_decay: Some(0.99),
                lpgn: Some(3),
                cadence: 50,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterOutcome {
    pub initial_validation: f64,
    pub final_validation: f64,
    pub report: ScatterReport,
    /// Feed-forward over iterative mean loss for the untrained decoder.
    pub untrained_ratio: f64,
}

/// Trains one decoder, then compares its loss with the loss reached by
/// iterative reconstruction on fresh embeddings.
pub(super) fn scatter(ctx: &Inputs, p: &ScatterParams) -> Result<(Artifacts, Outcome)> {
    ensure!(p.embeddings > 0, "scatter needs at least one embedding");
    ensure!(p.decoder.guide_channels.is_none(), "scatter uses an embedding-only decoder");
    let cfg = train_config(ctx, &p.decoder, p.training_seed, &p.budget, &p.loss, Vec::new())?;
    let (net, history) = train(&cfg, &ctx.embedder)?;
    let untrained = DecoderNet::new(cfg.decoder.clone())?;
    let template = p.iterative.attach(cfg.template.clone());
    let job = p.iterative.job();
    let compared = par_map((0..p.embeddings as u64).collect(), |i| {
        let (source, target) = ctx.pushforward(p.seed, i)?;
        let sample =
            Sample { target: if cfg.decoder.normalized_input { target.to_normalized()? } else { target }, guide: None };
        let point =
            compare_ff_vs_iterative(&net, &ctx.embedder, &template, std::slice::from_ref(&sample), &job)?.points[0];
        let raw = evaluate(&untrained, &ctx.embedder, &template, std::slice::from_ref(&sample))?.mean_loss;
        Ok((point, raw, source, net.decode(&sample.target, None)?))
    })?;
    let points: Vec<ScatterPoint> = compared.iter().map(|c| c.0).collect();
    let report = ScatterReport::from_points(points)?;
    let untrained_mean = compared.iter().map(|c| c.1).sum::<f64>() / compared.len() as f64;
    let (initial_validation, final_validation) = validation_ratio(&history)?;
    let mut a = Artifacts::new();
    let mut table = Table::new(&["embedding", "feed_forward", "iterative", "feed_forward_untrained"]);
    for (i, c) in compared.iter().enumerate() {
        table.push(vec![i.into(), c.0.feed_forward.into(), c.0.iterative.into(), c.1.into()])?;
    }
    a.add("scatter.csv", table.to_csv()?)?;
    a.json("scatter.json", &report)?;
    a.text("scatter.svg", scatter_svg(&report)?)?;
    a.json("training.json", &history)?;
    let shown = compared.len().min(10);
    a.png(
        "grid.png",
        &png_io::grid(&[
            compared[..shown].iter().map(|c| c.2.clone()).collect(),
            compared[..shown].iter().map(|c| c.3.clone()).collect(),
        ])?,
    )?;
    a.merge(checkpoint_artifacts(
        Path::new("decoder"),
        &net,
        &manifest(ctx, &cfg, &p.loss, &p.budget, &net, &history),
    )?)?;
    let outcome = ScatterOutcome {
        initial_validation,
        final_validation,
        untrained_ratio: untrained_mean / report.mean_iterative,
        report,
    };
    Ok((a, Outcome::Scatter(outcome)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFramesParams {
    /// Pushforward sampler seed of the training targets.
    pub seed: u64,
    /// Synthetic clip length; every frame is a training guide.
    pub frames: usize,
    /// Pushforward seed and index of the identity decoded onto every frame.
    pub identity_seed: u64,
    pub identity_index: u64,
    pub decoder: DecoderOptions,
    pub budget: TrainingBudget,
    pub loss: LossTemplate,
}

impl Default for GuidedFramesParams {
    fn default() -> Self {
        Self {
            seed: 31,
            frames: 16,
            identity_seed: 41,
            identity_index: 0,
            decoder: DecoderOptions {
                filters: 8,
                seed: 3,
                seed_size: DecoderOptions::default_seed_size(),
                guide_channels: Some(4),
            },
            budget: TrainingBudget {
                steps: 300,
                batch: 4,
                learning_rate: 1e-3,
                validation_size: 8,
                validation_every: 100,
            },
            loss: default_loss(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFramesOutcome {
    pub initial_validation: f64,
    pub final_validation: f64,
    /// Normalized dot of each decoded frame's embedding with the identity.
    pub cos_to_target: Vec<f64>,
}

/// Trains a guided decoder on the synthetic clip and decodes one identity
/// onto every frame, emitting a numbered PNG sequence.
pub(super) fn guided_frames(ctx: &Inputs, p: &GuidedFramesParams) -> Result<(Artifacts, Outcome)> {
    ensure!(p.frames > 0, "guided_frames needs at least one frame");
    ensure!(p.decoder.guide_channels.is_some(), "guided_frames needs a guided decoder");
    let guides = face_frames(ctx.embedder.input_dims(), p.frames)?;
    let cfg = train_config(ctx, &p.decoder, p.seed, &p.budget, &p.loss, guides.clone())?;
    let (net, history) = train(&cfg, &ctx.embedder)?;
    let (_, identity) = ctx.pushforward(p.identity_seed, p.identity_index)?;
    let identity = if cfg.decoder.normalized_input { identity.to_normalized()? } else { identity };
    let decoded = par_map(guides.clone(), |g| {
        let sample = Sample { target: identity.clone(), guide: Some(g.clone()) };
        let row = evaluate(&net, &ctx.embedder, &cfg.template, std::slice::from_ref(&sample))?;
        Ok((net.decode(&identity, Some(&g))?, row))
    })?;
    let mut a = Artifacts::new();
    let mut table = Table::new(&["frame", "loss", "l2_to_target", "cos_to_target"]);
    for (k, (img, row)) in decoded.iter().enumerate() {
        a.png(format!("frames/frame_{k:03}.png"), img)?;
        a.png(format!("guides/frame_{k:03}.png"), &guides[k])?;
        table.push(vec![k.into(), row.mean_loss.into(), row.mean_l2.into(), row.mean_cos.into()])?;
    }
    a.png("grid.png", &png_io::grid(&[guides.clone(), decoded.iter().map(|d| d.0.clone()).collect()])?)?;
    a.add("frames.csv", table.to_csv()?)?;
    a.json("frames.json", &table.to_json())?;
    a.json("training.json", &history)?;
    a.merge(checkpoint_artifacts(
        Path::new("decoder"),
        &net,
        &manifest(ctx, &cfg, &p.loss, &p.budget, &net, &history),
    )?)?;
    let (initial_validation, final_validation) = validation_ratio(&history)?;
    let outcome = GuidedFramesOutcome {
        initial_validation,
        final_validation,
        cos_to_target: decoded.iter().map(|d| d.1.mean_cos).collect(),
    };
    Ok((a, Outcome::GuidedFrames(outcome)))
}
