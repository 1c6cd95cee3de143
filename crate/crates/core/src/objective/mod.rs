//! The inversion objective: an embedding distance plus weighted image and
//! activation regularizers, each with an exact gradient.

mod distance;
mod loss;
pub mod regularizers;

pub use distance::{distance, DistanceKind, DistanceSpec};
pub use loss::{EmbeddingMetrics, Evaluation, LossModel, Objective, Term};
pub use regularizers::{
    flip_horizontal, gauss_value_grad, guiding_value_grad, laplacian, lp_spectrum_value_grad, mirror_value_grad,
    tv_value_grad,
};

use crate::error::{Error, Result};
use crate::invert::Schedule;
use crate::numcore::{Image, Tensor};

/// Layer used by the guiding regularizer when none is specified.
pub const DEFAULT_GUIDING_LAYER: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    /// Squared ℓ2 distance between activations of the image and of `guide`.
    Guiding { layers: Vec<usize>, guide: Image },
    /// Total variation with exponent `alpha > 1`.
    Tv { alpha: f64 },
    /// Smoothed diagonal-Gaussian prior on the activations of one layer.
    Gauss { layer: usize, mean: Tensor, std: Tensor, nu: f64 },
    /// Target norms `norm · 2^{β n}` for the Laplacian bands of the image.
    LpSpectrum { levels: usize, beta: f64, norm: f64 },
    /// Horizontal mirror symmetry.
    Mirror,
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::Guiding { .. } => "guiding",
            Regularizer::Tv { .. } => "tv",
            Regularizer::Gauss { .. } => "gauss",
            Regularizer::LpSpectrum { .. } => "lp_spectrum",
            Regularizer::Mirror => "mirror",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub weight: f64,
    pub regularizer: Regularizer,
}

impl RegularizerSpec {
    pub fn new(weight: f64, regularizer: Regularizer) -> Self {
        Self { weight, regularizer }
    }

    pub fn tv(weight: f64, alpha: f64) -> Self {
        Self::new(weight, Regularizer::Tv { alpha })
    }

    pub fn guiding(weight: f64, layers: Vec<usize>, guide: Image) -> Self {
        Self::new(weight, Regularizer::Guiding { layers, guide })
    }
}

/// Declarative description of the total loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub distance: DistanceSpec,
    pub regularizers: Vec<RegularizerSpec>,
    pub schedules: Vec<Schedule>,
}

impl LossSpec {
    pub fn new(distance: DistanceSpec) -> Self {
        Self { distance, regularizers: Vec::new(), schedules: Vec::new() }
    }

    pub fn with(mut self, reg: RegularizerSpec) -> Self {
        self.regularizers.push(reg);
        self
    }

    pub fn with_schedule(mut self, s: Schedule) -> Self {
        self.schedules.push(s);
        self
    }

    pub fn weights(&self) -> Vec<f64> {
        self.regularizers.iter().map(|r| r.weight).collect()
    }

    /// Index of the first regularizer of the given name.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.regularizers.iter().position(|r| r.regularizer.name() == name)
    }

    /// The guiding image, if the spec has a guiding regularizer.
    pub fn guide(&self) -> Option<&Image> {
        self.regularizers.iter().find_map(|r| match &r.regularizer {
            Regularizer::Guiding { guide, .. } => Some(guide),
            _ => None,
        })
    }

    /// Replaces the guiding image (no-op without a guiding regularizer).
    pub fn with_guide(mut self, image: Image) -> Self {
        for r in &mut self.regularizers {
            if let Regularizer::Guiding { guide, .. } = &mut r.regularizer {
                *guide = image.clone();
            }
        }
        self
    }

    /// Structural checks that do not need the embedder.
    pub fn validate(&self) -> Result<()> {
        let d = &self.distance;
        if !(d.scale > 0.0) || !d.scale.is_finite() {
            return Err(Error::Invalid(format!("distance scale must be positive, got {}", d.scale)));
        }
        let mut guiding = 0;
        let mut gauss = 0;
        for (i, r) in self.regularizers.iter().enumerate() {
            if !(r.weight >= 0.0) || !r.weight.is_finite() {
                return Err(Error::Invalid(format!("regularizer {i} has invalid weight {}", r.weight)));
            }
            match &r.regularizer {
                Regularizer::Guiding { layers, .. } => {
                    guiding += 1;
                    if layers.is_empty() {
                        return Err(Error::Invalid("guiding regularizer needs at least one layer".into()));
                    }
                }
                Regularizer::Tv { alpha } => {
                    if !(*alpha > 1.0) || !alpha.is_finite() {
                        return Err(Error::Invalid(format!("TV alpha must be > 1, got {alpha}")));
                    }
                }
                Regularizer::Gauss { nu, std, .. } => {
                    gauss += 1;
                    if !(*nu > 0.0) {
                        return Err(Error::Invalid(format!("gauss nu must be > 0, got {nu}")));
                    }
                    if std.max_abs() <= 0.0 {
                        return Err(Error::Invalid("gauss std is zero everywhere".into()));
                    }
                    if std.data().iter().any(|&s| s < 0.0) {
                        return Err(Error::Invalid("gauss std must be non-negative".into()));
                    }
                }
                Regularizer::LpSpectrum { levels, norm, beta } => {
                    if *levels == 0 || !norm.is_finite() || !beta.is_finite() {
                        return Err(Error::Invalid("lp_spectrum needs levels ≥ 1 and finite β, N_L".into()));
                    }
                }
                Regularizer::Mirror => {}
            }
        }
        if guiding > 1 || gauss > 1 {
            return Err(Error::Invalid("at most one guiding and one gauss regularizer are allowed".into()));
        }
        for s in &self.schedules {
            s.validate(self.regularizers.len())?;
        }
        Ok(())
    }
}
