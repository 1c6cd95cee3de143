use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::net::{DecoderConfig, DecoderNet};
use crate::embedder::{EmbedderNet, Embedding};
use crate::error::{Error, Result};
use crate::invert::{OptimizerKind, OptimizerState};
use crate::numcore::{l2_normalize, Image, Rng, Tensor};
use crate::objective::{LossModel, LossSpec, Objective};
use crate::synth::smooth_image;

/// Stream offset separating validation samples from training samples.
const VALIDATION_STREAM: u64 = 1 << 48;
/// Decorrelates guide choice from the embedding stream of the same index.
const GUIDE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Distribution of training target embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Uniform direction scaled to `radius` (unit norm for normalized input).
    Sphere { seed: u64, radius: f64 },
    /// Embeddings of random smooth images.
    Pushforward { seed: u64 },
}

impl Sampler {
    /// The `index`-th embedding of this sampler's stream.
    pub fn sample(&self, embedder: &EmbedderNet, index: u64, normalized: bool) -> Result<Embedding> {
        let raw = match *self {
            Sampler::Sphere { seed, radius } => {
                let mut rng = Rng::derived(seed, index);
                let u = l2_normalize(&Tensor::from_fn(&[embedder.dim()], |_| rng.normal())?)?;
                Embedding::unnormalized(u.scale(radius)?)?
            }
            Sampler::Pushforward { seed } => {
                let image = smooth_image(&mut Rng::derived(seed, index), embedder.input_dims())?;
                embedder.embed_raw(&image)?
            }
        };
        if normalized {
            raw.to_normalized()
        } else {
            Ok(raw)
        }
    }

    fn seed(&self) -> u64 {
        match *self {
            Sampler::Sphere { seed, .. } | Sampler::Pushforward { seed } => seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub decoder: DecoderConfig,
    pub sampler: Sampler,
    /// Guides drawn per sample. Required for a guided decoder; for an
    /// unguided one they replace the template's guiding image.
    pub guides: Vec<Image>,
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Loss applied to every decoded sample; its target is replaced per
    /// sample and its schedules are ignored.
    pub template: LossSpec,
    pub validation_size: usize,
    pub validation_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, embedder: &EmbedderNet) -> Result<()> {
        self.decoder.validate()?;
        self.template.validate()?;
        if self.batch == 0 {
            return Err(Error::Invalid("batch size must be ≥ 1".into()));
        }
        if self.validation_size == 0 || self.validation_every == 0 {
            return Err(Error::Invalid("validation size and cadence must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid(format!("learning rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if self.decoder.guide_channels.is_some() && self.guides.is_empty() {
            return Err(Error::Invalid("a guided decoder needs at least one guide".into()));
        }
        if self.decoder.embedding_dim != embedder.dim() || self.decoder.output != embedder.input_dims() {
            return Err(Error::Invalid(format!(
                "decoder {}→{:?} does not match embedder {:?}→{}",
                self.decoder.embedding_dim,
                self.decoder.output,
                embedder.input_dims(),
                embedder.dim()
            )));
        }
        if self.template.distance.kind.wants_normalized() != self.decoder.normalized_input {
            // the decoder input and the loss target are the same vector
            return Err(Error::Invalid("decoder input normalization must match the distance kind".into()));
        }
        if let Sampler::Sphere { radius, .. } = self.sampler {
            if !(radius > 0.0) {
                return Err(Error::Invalid(format!("sphere radius must be > 0, got {radius}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training-batch loss of every step.
    pub step_loss: Vec<f64>,
    /// `(updates applied, mean validation loss)`, including step 0 and the end.
    pub validation: Vec<(usize, f64)>,
}

impl TrainHistory {
    pub fn initial_validation(&self) -> Option<f64> {
        self.validation.first().map(|v| v.1)
    }

    pub fn final_validation(&self) -> Option<f64> {
        self.validation.last().map(|v| v.1)
    }
}

/// One (target, guide) training or evaluation sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub target: Embedding,
    pub guide: Option<Image>,
}

/// Loss models for each guide of a training set, built once.
pub(crate) struct GuidedLosses {
    models: Vec<LossModel>,
}

impl GuidedLosses {
    pub(crate) fn new(template: &LossSpec, embedder: &Arc<EmbedderNet>, guides: &[Image]) -> Result<Self> {
        let models = if guides.is_empty() {
            vec![LossModel::new(template.clone(), embedder.clone())?]
        } else {
            guides
                .iter()
                .map(|g| LossModel::new(template.clone().with_guide(g.clone()), embedder.clone()))
                .collect::<Result<_>>()?
        };
        Ok(Self { models })
    }

    pub(crate) fn for_sample(&self, guide_index: usize, target: &Embedding) -> Result<LossModel> {
        self.models[guide_index].with_target(target.clone())
    }
}

/// Draws the `index`-th sample: a target from the sampler and a guide index.
fn draw(cfg: &TrainConfig, embedder: &EmbedderNet, index: u64) -> Result<(Embedding, usize)> {
    let target = cfg.sampler.sample(embedder, index, cfg.decoder.normalized_input)?;
    let guide = if cfg.guides.len() > 1 {
        Rng::derived(cfg.sampler.seed() ^ GUIDE_SALT, index).below(cfg.guides.len())
    } else {
        0
    };
    Ok((target, guide))
}

/// Fixed validation samples for a configuration.
pub fn validation_samples(cfg: &TrainConfig, embedder: &EmbedderNet) -> Result<Vec<Sample>> {
    (0..cfg.validation_size as u64)
        .map(|i| {
            let (target, gi) = draw(cfg, embedder, VALIDATION_STREAM + i)?;
            Ok(Sample { target, guide: cfg.guides.get(gi).cloned() })
        })
        .collect()
}

fn guide_input<'a>(net: &DecoderNet, guides: &'a [Image], gi: usize) -> Option<&'a Image> {
    if net.is_guided() {
        guides.get(gi)
    } else {
        None
    }
}

/// Loss of the decoder on one sample and its parameter gradient.
fn sample_loss_grad(
    net: &DecoderNet,
    losses: &GuidedLosses,
    guides: &[Image],
    target: &Embedding,
    gi: usize,
) -> Result<(f64, Vec<f64>)> {
    let trace = net.forward(target, guide_input(net, guides, gi))?;
    let model = losses.for_sample(gi, target)?;
    let ev = model.evaluate(&trace.output, &model.base_weights())?;
    let grads = net.backward(&trace, &ev.grad)?;
    Ok((ev.total, grads.iter().flat_map(|t| t.data().iter().copied()).collect()))
}

fn mean_loss(net: &DecoderNet, losses: &GuidedLosses, cfg: &TrainConfig, set: &[(Embedding, usize)]) -> Result<f64> {
    let mut sum = 0.0;
    for (target, gi) in set {
        let image = net.decode(target, guide_input(net, &cfg.guides, *gi))?;
        let model = losses.for_sample(*gi, target)?;
        sum += model.evaluate(&image, &model.base_weights())?.total;
    }
    Ok(sum / set.len() as f64)
}

/// Trains a decoder by Adam on the mean loss of freshly sampled batches,
/// back-propagating through the frozen embedder into the decoder weights.
pub fn train(cfg: &TrainConfig, embedder: &Arc<EmbedderNet>) -> Result<(DecoderNet, TrainHistory)> {
    cfg.validate(embedder)?;
    let mut net = DecoderNet::new(cfg.decoder.clone())?;
    let losses = GuidedLosses::new(&cfg.template, embedder, &cfg.guides)?;
    let validation: Vec<(Embedding, usize)> =
        (0..cfg.validation_size as u64).map(|i| draw(cfg, embedder, VALIDATION_STREAM + i)).collect::<Result<_>>()?;
    let mut params = net.flat_params();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, cfg.learning_rate, params.len());
    let mut history = TrainHistory::default();
    history.validation.push((0, mean_loss(&net, &losses, cfg, &validation)?));
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for b in 0..cfg.batch {
            let index = (step * cfg.batch + b) as u64;
            let (target, gi) = draw(cfg, embedder, index)?;
            let (l, g) = sample_loss_grad(&net, &losses, &cfg.guides, &target, gi)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "training loss at step {step}, sample {index} of sampler seed {}",
                        cfg.sampler.seed()
                    ),
                    index: b,
                });
            }
            loss += l;
            for (a, v) in grad.iter_mut().zip(&g) {
                *a += v;
            }
        }
        let n = cfg.batch as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        history.step_loss.push(loss / n);
        opt.update(&mut params, &grad)?;
        net.set_flat_params(&params)?;
        let done = step + 1;
        if done % cfg.validation_every == 0 || done == cfg.steps {
            history.validation.push((done, mean_loss(&net, &losses, cfg, &validation)?));
        }
    }
    Ok((net, history))
}
