//! Decoder training configuration files and checkpoints.
//!
//! A checkpoint directory holds `weights.eit1` (the parameter tensors back to
//! back) and `manifest.json` (architecture, embedder, training setup, step
//! count and history).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use embinvert_core::decoder::{DecoderConfig, DecoderNet, Sampler, TrainConfig, TrainHistory};
use embinvert_core::embedder::EmbedderNet;
use embinvert_core::numcore::eit;
use embinvert_core::synth::{face_frames, face_image, FacePose};
use embinvert_core::Image;
use serde::{Deserialize, Serialize};

use crate::artifacts::Artifacts;
use crate::png_io;
use crate::specfile::{EmbedderChoice, LossTemplate};

pub const WEIGHTS_FILE: &str = "weights.eit1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where training guides come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuideSource {
    /// The neutral synthetic face.
    Neutral,
    /// `count` frames of the synthetic moving-face clip.
    FaceFrames { count: usize },
    /// PNG files, relative to the config file.
    Files { paths: Vec<PathBuf> },
}

impl GuideSource {
    pub fn load(&self, dims: [usize; 3], base: &Path) -> Result<Vec<Image>> {
        Ok(match self {
            GuideSource::Neutral => vec![face_image(dims, FacePose::NEUTRAL)?],
            GuideSource::FaceFrames { count } => face_frames(dims, *count)?,
            GuideSource::Files { paths } => {
                let missing: Vec<String> = paths
                    .iter()
                    .map(|p| base.join(p))
                    .filter(|p| !p.exists())
                    .map(|p| p.display().to_string())
                    .collect();
                ensure!(missing.is_empty(), "missing guide files: {}", missing.join(", "));
                paths.iter().map(|p| png_io::read(base.join(p))).collect::<Result<_>>()?
            }
        })
    }
}

/// Decoder architecture options; the embedding and image sizes come from
/// the embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderOptions {
    pub filters: usize,
    pub seed: u64,
    #[serde(default = "DecoderOptions::default_seed_size")]
    pub seed_size: usize,
    /// Guide-encoder channels; absent for an embedding-only decoder.
    #[serde(default)]
    pub guide_channels: Option<usize>,
}

impl DecoderOptions {
    pub fn default_seed_size() -> usize {
        DecoderConfig::default().seed_size
    }

    pub fn config(&self, embedder: &EmbedderNet, normalized_input: bool) -> DecoderConfig {
        DecoderConfig {
            embedding_dim: embedder.dim(),
            normalized_input,
            filters: self.filters,
            seed_size: self.seed_size,
            output: embedder.input_dims(),
            guide_channels: self.guide_channels,
            seed: self.seed,
        }
    }
}

/// Optimization budget shared by every decoder training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingBudget {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub validation_size: usize,
    pub validation_every: usize,
}

/// Contents of a `train-decoder --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    pub decoder: DecoderOptions,
    pub sampler: Sampler,
    /// Guides drawn per sample. An unguided decoder uses the first one as
    /// the loss's fixed guiding image.
    #[serde(default = "neutral")]
    pub guides: GuideSource,
    pub budget: TrainingBudget,
    pub loss: LossTemplate,
    #[serde(default)]
    pub embedder: EmbedderChoice,
}

fn neutral() -> GuideSource {
    GuideSource::Neutral
}

impl TrainFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing training config {}", path.display()))
    }

    /// Core training configuration; relative guide paths resolve against `base`.
    pub fn train_config(&self, embedder: &EmbedderNet, base: &Path) -> Result<TrainConfig> {
        let guides = self.guides.load(embedder.input_dims(), base)?;
        ensure!(!guides.is_empty(), "guide source produced no images");
        let decoder = self.decoder.config(embedder, self.loss.wants_normalized());
        let template = self.loss.build(embedder, guides[0].clone())?;
        let guides = if decoder.guide_channels.is_some() { guides } else { Vec::new() };
        Ok(TrainConfig {
            decoder,
            sampler: self.sampler,
            guides,
            batch: self.budget.batch,
            steps: self.budget.steps,
            learning_rate: self.budget.learning_rate,
            template,
            validation_size: self.budget.validation_size,
            validation_every: self.budget.validation_every,
        })
    }

    pub fn build_embedder(&self) -> Result<Arc<EmbedderNet>> {
        self.embedder.build()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub decoder: DecoderConfig,
    pub embedder: EmbedderChoice,
    pub sampler: Sampler,
    pub loss: LossTemplate,
    pub budget: TrainingBudget,
    pub step: usize,
    pub parameter_count: usize,
    pub history: TrainHistory,
}

/// Checkpoint files relative to the checkpoint directory.
pub fn checkpoint_artifacts(prefix: &Path, net: &DecoderNet, manifest: &CheckpointManifest) -> Result<Artifacts> {
    let mut a = Artifacts::new();
    let weights: Vec<u8> = net.params().into_iter().flat_map(eit::encode).collect();
    a.add(prefix.join(WEIGHTS_FILE), weights)?;
    a.json(prefix.join(MANIFEST_FILE), manifest)?;
    Ok(a)
}

pub fn load_checkpoint(dir: &Path) -> Result<(DecoderNet, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let wpath = dir.join(WEIGHTS_FILE);
    let missing: Vec<String> =
        [&mpath, &wpath].iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    ensure!(missing.is_empty(), "missing checkpoint files: {}", missing.join(", "));
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(&mpath)?).with_context(|| format!("parsing {}", mpath.display()))?;
    let net = DecoderNet::with_params(manifest.decoder.clone(), eit::load_all(&wpath)?)?;
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use embinvert_core::decoder::train;

    fn tiny() -> TrainFile {
        serde_json::from_str(
            r#"{"decoder":{"filters":2,"seed":5},
                "sampler":{"kind":"pushforward","seed":3},
                "budget":{"steps":2,"batch":1,"learning_rate":1e-3,"validation_size":2,"validation_every":1},
                "loss":{"tv_weight":1e-3,"guiding_weight":1e-3}}"#,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let file = tiny();
        assert_eq!(file.guides, GuideSource::Neutral);
        let e = file.build_embedder().unwrap();
        let cfg = file.train_config(&e, Path::new(".")).unwrap();
        assert!(cfg.guides.is_empty());
        let (net, history) = train(&cfg, &e).unwrap();
        let manifest = CheckpointManifest {
            decoder: cfg.decoder.clone(),
            embedder: file.embedder,
            sampler: file.sampler,
            loss: file.loss.clone(),
            budget: file.budget.clone(),
            step: cfg.steps,
            parameter_count: net.param_count(),
            history,
        };
        let dir = tempfile::tempdir().unwrap();
        checkpoint_artifacts(Path::new("ck"), &net, &manifest).unwrap().write_all(dir.path()).unwrap();
        let (back, m) = load_checkpoint(&dir.path().join("ck")).unwrap();
        assert_eq!(back, net);
        assert_eq!(m, manifest);
    }

    #[test]
    fn missing_checkpoint_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(dir.path()).err().unwrap().to_string();
        assert!(err.contains(WEIGHTS_FILE) && err.contains(MANIFEST_FILE), "{err}");
    }
}
