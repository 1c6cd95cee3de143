//! Iterative reconstruction: gradient descent on the pixels of an image.

mod asymptotics;
mod optimizer;
mod schedule;

pub use asymptotics::{
    asymptotic_stationary_state, fourier_gamma, verify_asymptotics, AsymptoticsReport, AsymptoticsRow,
    QuadraticSurrogate, StationaryState,
};
pub use optimizer::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use schedule::{scheduled_step, scheduled_weights, Schedule, ScheduleKind, ScheduleTarget};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Image, Rng, Tensor};
use crate::objective::{EmbeddingMetrics, Evaluation, Objective, Term};
use crate::pyramid::{lpgn, LPGN_EPSILON};
use crate::synth::noise_image;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

pub const DEFAULT_STEP_SIZE: f64 = 0.05;
pub const DEFAULT_ITERATIONS: usize = 500;
pub const DEFAULT_TV_DECAY: f64 = 0.995;
pub const DEFAULT_TV_FLOOR: f64 = 1e-4;
pub const DEFAULT_LPGN_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Uniform noise `0.5 ± amplitude`, clipped to `[0, 1]`.
    Noise {
        seed: u64,
        amplitude: f64,
    },
    /// The objective's guiding image.
    Guide,
    Constant {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertJob {
    pub init: Init,
    pub iterations: usize,
    /// Pyramid depth for gradient normalization; `None` disables it.
    pub lpgn: Option<usize>,
    pub clamp: bool,
    /// Record a trace entry every `cadence` iterations.
    pub cadence: usize,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
}

impl Default for InvertJob {
    fn default() -> Self {
        Self {
            init: Init::Noise { seed: 0, amplitude: 0.1 },
            iterations: DEFAULT_ITERATIONS,
            lpgn: Some(DEFAULT_LPGN_LEVELS),
            clamp: true,
            cadence: 1,
            optimizer: OptimizerKind::Adam,
            step_size: DEFAULT_STEP_SIZE,
        }
    }
}

impl InvertJob {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("iterations must be ≥ 1".into()));
        }
        if self.cadence == 0 {
            return Err(Error::Invalid("trace cadence must be ≥ 1".into()));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::Invalid(format!("step size must be ≥ 0, got {}", self.step_size)));
        }
        if self.lpgn == Some(0) {
            return Err(Error::Invalid("lpgn needs at least one level".into()));
        }
        match self.init {
            Init::Noise { amplitude, .. } if !(amplitude > 0.0) => {
                Err(Error::Invalid(format!("noise amplitude must be > 0, got {amplitude}")))
            }
            Init::Constant { value } if !value.is_finite() => {
                Err(Error::Invalid("constant init must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn initial_image(&self, objective: &dyn Objective) -> Result<Image> {
        let dims = objective.image_dims();
        match &self.init {
            Init::Noise { seed, amplitude } => noise_image(&mut Rng::new(*seed), dims, 0.5, *amplitude),
            Init::Guide => objective
                .guide()
                .cloned()
                .ok_or_else(|| Error::Invalid("guide init needs a guiding regularizer".into())),
            Init::Constant { value } => Ok(Tensor::filled(&dims, *value)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    pub terms: Vec<Term>,
    pub weights: Vec<f64>,
    pub step_size: f64,
    pub l2_to_target: Option<f64>,
    pub cos_to_target: Option<f64>,
}

impl TraceRecord {
    fn new(iter: usize, ev: &Evaluation, weights: Vec<f64>, step_size: f64) -> Self {
        Self {
            iter,
            loss: ev.total,
            terms: ev.terms.clone(),
            weights,
            step_size,
            l2_to_target: ev.embedding.map(|m| m.l2_to_target),
            cos_to_target: ev.embedding.map(|m| m.cos_to_target),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InvertResult {
    pub image: Image,
    pub trace: Vec<TraceRecord>,
    /// Loss of the final image at the nominal (unscheduled) weights.
    pub final_loss: f64,
    pub final_terms: Vec<Term>,
    pub final_embedding: Option<EmbeddingMetrics>,
}

/// A failed run together with everything recorded up to the failure.
#[derive(Clone, Debug, thiserror::Error)]
#[error("{error} (after {} trace records)", trace.len())]
pub struct Failure {
    pub error: Error,
    pub trace: Vec<TraceRecord>,
    pub last_image: Option<Image>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self { error, trace: Vec::new(), last_image: None }
    }
}

impl From<Failure> for Error {
    fn from(f: Failure) -> Self {
        f.error
    }
}

/// Minimizes `objective` over the pixels, starting from the job's init.
///
/// Each iteration evaluates the loss at scheduled weights, optionally
/// normalizes the raw gradient with the Laplacian pyramid, and hands it to
/// the optimizer. The trace entry for iteration `k` describes the image
/// before update `k`.
pub fn reconstruct(job: &InvertJob, objective: &dyn Objective) -> std::result::Result<InvertResult, Failure> {
    job.validate()?;
    let schedules = objective.schedules();
    let base = objective.base_weights();
    for s in schedules {
        s.validate(base.len())?;
    }
    let mut p = job.initial_image(objective)?;
    let mut opt = OptimizerState::new(job.optimizer, job.step_size, p.len());
    let mut trace = Vec::with_capacity(job.iterations.div_ceil(job.cadence));
    for k in 0..job.iterations {
        let weights = scheduled_weights(&base, schedules, k);
        let mu = scheduled_step(job.step_size, schedules, k);
        let fail =
            |error: Error, trace: Vec<TraceRecord>, p: &Image| Failure { error, trace, last_image: Some(p.clone()) };
        let ev = match objective.evaluate(&p, &weights) {
            Ok(ev) => ev,
            Err(e) => return Err(fail(e, trace, &p)),
        };
        if k % job.cadence == 0 {
            trace.push(TraceRecord::new(k, &ev, weights, mu));
        }
        if !(ev.total <= DIVERGENCE_LOSS) {
            return Err(fail(Error::Divergence { iteration: k, loss: ev.total }, trace, &p));
        }
        let grad = match job.lpgn {
            Some(levels) => match lpgn(&ev.grad, levels, LPGN_EPSILON) {
                Ok(g) => g,
                Err(e) => return Err(fail(e, trace, &p)),
            },
            None => ev.grad,
        };
        opt.step_size = mu;
        p = match opt.step(&p, &grad, job.clamp) {
            Ok(q) => q,
            Err(e) => return Err(fail(e, trace, &p)),
        };
    }
    let fin = match objective.evaluate(&p, &base) {
        Ok(ev) => ev,
        Err(e) => return Err(Failure { error: e, trace, last_image: Some(p) }),
    };
    Ok(InvertResult { image: p, trace, final_loss: fin.total, final_terms: fin.terms, final_embedding: fin.embedding })
}
