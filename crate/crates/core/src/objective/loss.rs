use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::distance::distance;
use super::regularizers::{
    gauss_value_grad, guiding_value_grad, lp_spectrum_value_grad, mirror_value_grad, tv_value_grad,
};
use super::{LossSpec, Regularizer};
use crate::embedder::{EmbedSeeds, EmbedderNet, Embedding, LayerActivations};
use crate::error::{Error, Result};
use crate::invert::Schedule;
use crate::numcore::{l2_normalize, Image, Tensor, MIN_NORM};

/// One named contribution to the total loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
}

/// How far the image's embedding is from the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetrics {
    /// `‖f − e‖²` between unnormalized embeddings (target unscaled).
    pub l2_to_target: f64,
    /// `f̃·ẽ` between normalized embeddings.
    pub cos_to_target: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub total: f64,
    pub grad: Image,
    pub terms: Vec<Term>,
    pub embedding: Option<EmbeddingMetrics>,
}

/// Anything that can be minimized over images.
pub trait Objective {
    fn image_dims(&self) -> [usize; 3];

    /// Nominal regularizer weights; [`Objective::evaluate`] takes explicit
    /// weights so schedules can vary them.
    fn base_weights(&self) -> Vec<f64>;

    fn evaluate(&self, p: &Image, weights: &[f64]) -> Result<Evaluation>;

    /// Per-iteration weight and step-size schedules.
    fn schedules(&self) -> &[Schedule] {
        &[]
    }

    fn guide(&self) -> Option<&Image> {
        None
    }
}

/// Unit vector along `t`; a zero target has cosine 0 with everything.
fn unit_or_zero(t: &Tensor) -> Tensor {
    if t.norm() > MIN_NORM {
        l2_normalize(t).expect("norm checked")
    } else {
        Tensor::zeros(t.dims())
    }
}

/// A validated [`LossSpec`] bound to an embedder, with the guiding image's
/// activations precomputed.
#[derive(Clone, Debug)]
pub struct LossModel {
    spec: LossSpec,
    embedder: Arc<EmbedderNet>,
    capture: Vec<usize>,
    guide_acts: LayerActivations,
    target_normalized: Tensor,
}

impl LossModel {
    pub fn new(spec: LossSpec, embedder: Arc<EmbedderNet>) -> Result<Self> {
        spec.validate()?;
        let input = embedder.input_dims();
        let dim = embedder.dim();
        if spec.distance.target.dim() != dim {
            return Err(Error::Shape(format!(
                "target embedding has {} entries, embedder produces {dim}",
                spec.distance.target.dim()
            )));
        }
        let mut capture = Vec::new();
        let mut guide_acts = LayerActivations::new();
        for r in &spec.regularizers {
            match &r.regularizer {
                Regularizer::Guiding { layers, guide } => {
                    if guide.dims() != input {
                        return Err(Error::Shape(format!(
                            "guide dims {:?}, embedder expects {:?}",
                            guide.dims(),
                            input
                        )));
                    }
                    for &l in layers {
                        embedder.activation_dims(l)?;
                    }
                    capture.extend_from_slice(layers);
                    guide_acts = embedder.embed(guide, layers)?.activations;
                }
                Regularizer::Gauss { layer, mean, std, .. } => {
                    let dims = embedder.activation_dims(*layer)?;
                    if mean.dims() != dims || std.dims() != dims {
                        return Err(Error::Shape(format!(
                            "gauss statistics {:?}/{:?} do not match layer {layer} dims {dims:?}",
                            mean.dims(),
                            std.dims()
                        )));
                    }
                    capture.push(*layer);
                }
                Regularizer::LpSpectrum { levels, .. } => {
                    let f = 1usize << levels;
                    if !input[0].is_multiple_of(f) || !input[1].is_multiple_of(f) {
                        return Err(Error::Invalid(format!(
                            "lp_spectrum with {levels} levels needs dims divisible by {f}"
                        )));
                    }
                }
                _ => {}
            }
        }
        capture.sort_unstable();
        capture.dedup();
        let target_normalized = unit_or_zero(spec.distance.target.values());
        Ok(Self { spec, embedder, capture, guide_acts, target_normalized })
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn embedder(&self) -> &Arc<EmbedderNet> {
        &self.embedder
    }

    /// The same model aimed at a different target embedding.
    pub fn with_target(&self, target: Embedding) -> Result<Self> {
        if target.dim() != self.embedder.dim() {
            return Err(Error::Shape(format!(
                "target embedding has {} entries, embedder produces {}",
                target.dim(),
                self.embedder.dim()
            )));
        }
        let mut m = self.clone();
        m.target_normalized = unit_or_zero(target.values());
        m.spec.distance.target = target;
        Ok(m)
    }

    fn term_names(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        self.spec
            .regularizers
            .iter()
            .map(|r| {
                let n = r.regularizer.name();
                let k = seen.entry(n).or_insert(0);
                *k += 1;
                if *k == 1 {
                    n.to_string()
                } else {
                    format!("{n}_{k}")
                }
            })
            .collect()
    }

    /// Embedding-space metrics of an image against the target.
    pub fn metrics(&self, p: &Image) -> Result<EmbeddingMetrics> {
        let out = self.embedder.embed(p, &[])?;
        self.metrics_from(&out.unnormalized, &out.normalized)
    }

    fn metrics_from(&self, f: &Embedding, fn_: &Embedding) -> Result<EmbeddingMetrics> {
        let r = f.values().sub(self.spec.distance.target.values())?;
        Ok(EmbeddingMetrics { l2_to_target: r.dot(&r)?, cos_to_target: fn_.values().dot(&self.target_normalized)? })
    }

    /// Total loss, its image gradient and the per-term breakdown.
    pub fn total_loss(&self, p: &Image) -> Result<Evaluation> {
        self.evaluate(p, &self.spec.weights())
    }
}

impl Objective for LossModel {
    fn image_dims(&self) -> [usize; 3] {
        self.embedder.input_dims()
    }

    fn base_weights(&self) -> Vec<f64> {
        self.spec.weights()
    }

    fn schedules(&self) -> &[Schedule] {
        &self.spec.schedules
    }

    fn guide(&self) -> Option<&Image> {
        self.spec.guide()
    }

    fn evaluate(&self, p: &Image, weights: &[f64]) -> Result<Evaluation> {
        if weights.len() != self.spec.regularizers.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} regularizers",
                weights.len(),
                self.spec.regularizers.len()
            )));
        }
        let trace = self.embedder.trace(p)?;
        let out = self.embedder.output_from_trace(&trace, &self.capture)?;
        let mut seeds = EmbedSeeds::default();
        let d = &self.spec.distance;
        let dist = if d.kind.wants_normalized() {
            let (v, g) = distance(&out.normalized, d)?;
            seeds.normalized = Some(g);
            v
        } else {
            let (v, g) = distance(&out.unnormalized, d)?;
            seeds.unnormalized = Some(g);
            v
        };
        let mut terms = vec![Term { name: "distance".into(), value: dist }];
        let mut direct = Tensor::zeros(p.dims());
        for ((r, &w), name) in self.spec.regularizers.iter().zip(weights).zip(self.term_names()) {
            let value = match &r.regularizer {
                Regularizer::Guiding { layers, .. } => {
                    let (v, grads) = guiding_value_grad(&out.activations, &self.guide_acts, layers, w)?;
                    for (l, g) in grads {
                        match seeds.activations.get_mut(&l) {
                            Some(acc) => acc.axpy(1.0, &g)?,
                            None => {
                                seeds.activations.insert(l, g);
                            }
                        }
                    }
                    v
                }
                Regularizer::Gauss { layer, mean, std, nu } => {
                    let (v, g) = gauss_value_grad(&out.activations[layer], mean, std, *nu)?;
                    let g = g.scale(w)?;
                    match seeds.activations.get_mut(layer) {
                        Some(acc) => acc.axpy(1.0, &g)?,
                        None => {
                            seeds.activations.insert(*layer, g);
                        }
                    }
                    w * v
                }
                Regularizer::Tv { alpha } => {
                    let (v, g) = tv_value_grad(p, *alpha)?;
                    direct.axpy(w, &g)?;
                    w * v
                }
                Regularizer::LpSpectrum { levels, beta, norm } => {
                    let (v, g) = lp_spectrum_value_grad(p, *levels, *beta, *norm)?;
                    direct.axpy(w, &g)?;
                    w * v
                }
                Regularizer::Mirror => {
                    let (v, g) = mirror_value_grad(p)?;
                    direct.axpy(w, &g)?;
                    w * v
                }
            };
            terms.push(Term { name, value });
        }
        let mut grad = self.embedder.backward(&trace, &seeds)?;
        grad.axpy(1.0, &direct)?;
        grad.ensure_finite("total loss gradient")?;
        let total: f64 = terms.iter().map(|t| t.value).sum();
        if !total.is_finite() {
            return Err(Error::NonFinite { context: "total loss".into(), index: 0 });
        }
        let embedding = Some(self.metrics_from(&out.unnormalized, &out.normalized)?);
        Ok(Evaluation { total, grad, terms, embedding })
    }
}
