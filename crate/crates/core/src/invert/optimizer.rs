use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Image, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain full-gradient descent.
    Sgd,
    Adam,
}

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    pub step_size: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, step_size: f64, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        Self { kind, step_size, m: vec![0.0; moments], v: vec![0.0; moments], t: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates applied so far.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Applies one update in place. Fails without touching `params` if the
    /// gradient has a non-finite entry.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Shape(format!("gradient has {} entries, parameters {}", grad.len(), params.len())));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: "optimizer gradient".into(), index });
        }
        self.t += 1;
        let mu = self.step_size;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= mu * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Shape(format!(
                        "Adam state sized for {} parameters, got {}",
                        self.m.len(),
                        params.len()
                    )));
                }
                let c1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
                let c2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= mu * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                }
            }
        }
        Ok(())
    }

    /// One image update, optionally projected onto `[0, 1]`.
    pub fn step(&mut self, p: &Image, grad: &Image, clamp: bool) -> Result<Image> {
        if p.dims() != grad.dims() {
            return Err(Error::Shape(format!("image {:?} vs gradient {:?}", p.dims(), grad.dims())));
        }
        let mut data = p.data().to_vec();
        self.update(&mut data, grad.data())?;
        if clamp {
            for v in &mut data {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Tensor::new(p.dims().to_vec(), data)
    }
}
