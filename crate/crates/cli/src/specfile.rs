//! JSON loss specifications. Paths inside a spec file are resolved relative
//! to the file's directory.
//!
//! ```json
//! {"distance": {"kind": "dot", "scale": 1.0, "target": "emb.eit1"},
//!  "regularizers": [{"kind": "tv", "weight": 1e-3, "alpha": 2.0},
//!                   {"kind": "guiding", "weight": 1e-2, "layers": [2], "guide": "guide.png"}],
//!  "schedules": [{"target": "step_size", "kind": "exponential_decay", "rate": 0.99}]}
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use embinvert_core::embedder::{EmbedderConfig, EmbedderNet, Embedding, DEFAULT_SEED};
use embinvert_core::invert::Schedule;
use embinvert_core::numcore::eit;
use embinvert_core::objective::{
    DistanceKind, DistanceSpec, LossSpec, Regularizer, RegularizerSpec, DEFAULT_GUIDING_LAYER,
};
use embinvert_core::synth::smooth_image;
use embinvert_core::{Image, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::png_io;

/// Surrogate embedder selection. Experiments and the CLI use the centered
/// variant unless told otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderChoice {
    #[serde(default = "default_embedder_seed")]
    pub seed: u64,
    #[serde(default = "yes")]
    pub centered: bool,
}

fn default_embedder_seed() -> u64 {
    DEFAULT_SEED
}

fn yes() -> bool {
    true
}

impl Default for EmbedderChoice {
    fn default() -> Self {
        Self { seed: DEFAULT_SEED, centered: true }
    }
}

impl EmbedderChoice {
    pub fn build(&self) -> Result<Arc<EmbedderNet>> {
        Ok(Arc::new(EmbedderNet::new(EmbedderConfig {
            seed: self.seed,
            centered: self.centered,
            ..EmbedderConfig::default()
        })?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKindFile {
    L2,
    Dot,
    NormalizedDot,
}

impl From<DistanceKindFile> for DistanceKind {
    fn from(k: DistanceKindFile) -> Self {
        match k {
            DistanceKindFile::L2 => DistanceKind::L2,
            DistanceKindFile::Dot => DistanceKind::Dot,
            DistanceKindFile::NormalizedDot => DistanceKind::NormalizedDot,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceFile {
    pub kind: DistanceKindFile,
    #[serde(default = "one")]
    pub scale: f64,
    /// EIT1 file holding the target embedding.
    pub target: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn default_layers() -> Vec<usize> {
    vec![DEFAULT_GUIDING_LAYER]
}

fn default_stats_images() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerFile {
    Tv {
        weight: f64,
        #[serde(default = "two")]
        alpha: f64,
    },
    Guiding {
        weight: f64,
        #[serde(default = "default_layers")]
        layers: Vec<usize>,
        /// PNG of the guiding image.
        guide: PathBuf,
    },
    /// Statistics come from EIT1 files when given, otherwise from
    /// `stats_images` seeded random smooth images.
    Gauss {
        weight: f64,
        layer: usize,
        nu: f64,
        #[serde(default)]
        mean: Option<PathBuf>,
        #[serde(default)]
        std: Option<PathBuf>,
        #[serde(default = "default_stats_images")]
        stats_images: usize,
        #[serde(default)]
        stats_seed: u64,
    },
    LpSpectrum {
        weight: f64,
        levels: usize,
        beta: f64,
        norm: f64,
    },
    Mirror {
        weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    pub distance: DistanceFile,
    #[serde(default)]
    pub regularizers: Vec<RegularizerFile>,
    #[serde(default)]
    pub schedules: Vec<Schedule>,
    #[serde(default)]
    pub embedder: EmbedderChoice,
}

/// A parsed spec with its files loaded, ready to bind to the embedder.
pub struct LoadedSpec {
    pub spec: LossSpec,
    pub embedder: Arc<EmbedderNet>,
}

impl SpecFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing loss spec {}", path.display()))
    }

    /// Loads every referenced file, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedSpec> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let missing: Vec<String> = self
            .referenced_paths()
            .into_iter()
            .map(|p| resolve(&p))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        anyhow::ensure!(missing.is_empty(), "missing input files: {}", missing.join(", "));
        let embedder = self.embedder.build()?;
        let target = Embedding::unnormalized(eit::load(resolve(&self.distance.target))?)?;
        let mut spec =
            LossSpec::new(DistanceSpec::new(self.distance.kind.clone().into(), target).scaled(self.distance.scale));
        for r in &self.regularizers {
            let reg = match r {
                RegularizerFile::Tv { weight, alpha } => RegularizerSpec::tv(*weight, *alpha),
                RegularizerFile::Guiding { weight, layers, guide } => {
                    RegularizerSpec::guiding(*weight, layers.clone(), png_io::read(resolve(guide))?)
                }
                RegularizerFile::Gauss { weight, layer, nu, mean, std, stats_images, stats_seed } => {
                    let (mean, std) = match (mean, std) {
                        (Some(m), Some(s)) => (eit::load(resolve(m))?, eit::load(resolve(s))?),
                        (None, None) => {
                            let images = (0..*stats_images as u64)
                                .map(|i| smooth_image(&mut Rng::derived(*stats_seed, i), embedder.input_dims()))
                                .collect::<embinvert_core::Result<Vec<_>>>()?;
                            embedder.activation_stats(&images, *layer)?
                        }
                        _ => anyhow::bail!("gauss regularizer needs both mean and std files, or neither"),
                    };
                    RegularizerSpec::new(*weight, Regularizer::Gauss { layer: *layer, mean, std, nu: *nu })
                }
                RegularizerFile::LpSpectrum { weight, levels, beta, norm } => {
                    RegularizerSpec::new(*weight, Regularizer::LpSpectrum { levels: *levels, beta: *beta, norm: *norm })
                }
                RegularizerFile::Mirror { weight } => RegularizerSpec::new(*weight, Regularizer::Mirror),
            };
            spec = spec.with(reg);
        }
        for s in &self.schedules {
            spec = spec.with_schedule(*s);
        }
        spec.validate()?;
        Ok(LoadedSpec { spec, embedder })
    }

    fn referenced_paths(&self) -> Vec<PathBuf> {
        let mut out = vec![self.distance.target.clone()];
        for r in &self.regularizers {
            match r {
                RegularizerFile::Guiding { guide, .. } => out.push(guide.clone()),
                RegularizerFile::Gauss { mean, std, .. } => out.extend(mean.iter().chain(std).cloned()),
                _ => {}
            }
        }
        out
    }
}

fn two() -> f64 {
    2.0
}

/// Per-sample loss for decoder training and evaluation. The distance target
/// is a placeholder replaced by each sample's embedding, and the guiding
/// image is replaced by the sample's guide where one exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTemplate {
    #[serde(default = "default_distance")]
    pub distance: DistanceKindFile,
    pub tv_weight: f64,
    #[serde(default = "two")]
    pub tv_alpha: f64,
    pub guiding_weight: f64,
    #[serde(default = "default_layers")]
    pub guiding_layers: Vec<usize>,
}

fn default_distance() -> DistanceKindFile {
    DistanceKindFile::L2
}

impl LossTemplate {
    pub fn build(&self, embedder: &EmbedderNet, guide: Image) -> Result<LossSpec> {
        let placeholder = Embedding::unnormalized(Tensor::zeros(&[embedder.dim()]))?;
        let spec = LossSpec::new(DistanceSpec::new(self.distance.clone().into(), placeholder))
            .with(RegularizerSpec::tv(self.tv_weight, self.tv_alpha))
            .with(RegularizerSpec::guiding(self.guiding_weight, self.guiding_layers.clone(), guide));
        spec.validate()?;
        Ok(spec)
    }

    pub fn wants_normalized(&self) -> bool {
        DistanceKind::from(self.distance.clone()).wants_normalized()
    }
}
