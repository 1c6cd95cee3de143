use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::net::DecoderNet;
use super::train::Sample;
use crate::embedder::EmbedderNet;
use crate::error::{Error, Result};
use crate::invert::{reconstruct, InvertJob};
use crate::objective::{LossModel, LossSpec, Objective};

/// Averages over a sample set; `e₁` is the target, `e₂` the embedding of
/// the decoded image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub count: usize,
    /// `⟨𝓛⟩` at nominal weights.
    pub mean_loss: f64,
    /// `⟨‖e₁ − e₂‖²⟩`.
    pub mean_l2: f64,
    /// `⟨ẽ₁·ẽ₂⟩`.
    pub mean_cos: f64,
}

fn model_for(template: &LossSpec, embedder: &Arc<EmbedderNet>, sample: &Sample) -> Result<LossModel> {
    let spec = match &sample.guide {
        Some(g) => template.clone().with_guide(g.clone()),
        None => template.clone(),
    };
    LossModel::new(spec, embedder.clone())?.with_target(sample.target.clone())
}

fn decode_sample(net: &DecoderNet, sample: &Sample) -> Result<crate::numcore::Image> {
    let guide = if net.is_guided() { sample.guide.as_ref() } else { None };
    net.decode(&sample.target, guide)
}

/// Decodes every sample and averages loss and embedding-space agreement.
pub fn evaluate(
    net: &DecoderNet,
    embedder: &Arc<EmbedderNet>,
    template: &LossSpec,
    samples: &[Sample],
) -> Result<MetricsRow> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one sample".into()));
    }
    let (mut loss, mut l2, mut cos) = (0.0, 0.0, 0.0);
    for s in samples {
        let model = model_for(template, embedder, s)?;
        let image = decode_sample(net, s)?;
        let ev = model.evaluate(&image, &model.base_weights())?;
        let m = ev.embedding.expect("loss model reports embedding metrics");
        loss += ev.total;
        l2 += m.l2_to_target;
        cos += m.cos_to_target;
    }
    let n = samples.len() as f64;
    Ok(MetricsRow { count: samples.len(), mean_loss: loss / n, mean_l2: l2 / n, mean_cos: cos / n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub feed_forward: f64,
    pub iterative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub points: Vec<ScatterPoint>,
    pub mean_feed_forward: f64,
    pub mean_iterative: f64,
    /// `mean_feed_forward / mean_iterative`.
    pub ratio: f64,
    /// Share of points whose iterative loss is strictly below the feed-forward one.
    pub iterative_below: f64,
}

impl ScatterReport {
    pub fn from_points(points: Vec<ScatterPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("scatter report needs at least one point".into()));
        }
        let n = points.len() as f64;
        let mean_feed_forward = points.iter().map(|p| p.feed_forward).sum::<f64>() / n;
        let mean_iterative = points.iter().map(|p| p.iterative).sum::<f64>() / n;
        let iterative_below = points.iter().filter(|p| p.iterative < p.feed_forward).count() as f64 / n;
        Ok(Self {
            points,
            mean_feed_forward,
            mean_iterative,
            ratio: mean_feed_forward / mean_iterative,
            iterative_below,
        })
    }
}

/// Loss of the decoder's output against the loss reached by iterative
/// reconstruction, per sample, both at the spec's nominal weights.
pub fn compare_ff_vs_iterative(
    net: &DecoderNet,
    embedder: &Arc<EmbedderNet>,
    template: &LossSpec,
    samples: &[Sample],
    job: &InvertJob,
) -> Result<ScatterReport> {
    let mut points = Vec::with_capacity(samples.len());
    for s in samples {
        let model = model_for(template, embedder, s)?;
        let ff = model.evaluate(&decode_sample(net, s)?, &model.base_weights())?.total;
        let it = reconstruct(job, &model)?.final_loss;
        points.push(ScatterPoint { feed_forward: ff, iterative: it });
    }
    ScatterReport::from_points(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::embedder::Embedding;
    use crate::numcore::{Rng, Tensor};
    use crate::objective::{DistanceKind, DistanceSpec, RegularizerSpec};

    fn setup() -> (DecoderNet, Arc<EmbedderNet>, LossSpec) {
        let e = Arc::new(EmbedderNet::with_seed(2));
        let net = DecoderNet::new(DecoderConfig { filters: 4, ..DecoderConfig::default() }).unwrap();
        let target = Embedding::unnormalized(Tensor::zeros(&[16])).unwrap();
        let spec = LossSpec::new(DistanceSpec::new(DistanceKind::L2, target)).with(RegularizerSpec::tv(1e-3, 2.0));
        (net, e, spec)
    }

    fn random_target(seed: u64) -> Embedding {
        let mut rng = Rng::new(seed);
        Embedding::unnormalized(Tensor::from_fn(&[16], |_| rng.normal()).unwrap()).unwrap()
    }

    #[test]
    fn self_consistent_target() {
        let (net, e, spec) = setup();
        let img = net.decode(&random_target(1), None).unwrap();
        let own = e.embed_raw(&img).unwrap();
        // feed the decoder the embedding it will be compared against
        let s = Sample { target: random_target(1), guide: None };
        let row = evaluate(&net, &e, &spec, &[s]).unwrap();
        let m = LossModel::new(spec.clone(), e.clone()).unwrap().with_target(own).unwrap();
        let direct = m.metrics(&img).unwrap();
        assert!(direct.l2_to_target.abs() < 1e-24);
        assert!((direct.cos_to_target - 1.0).abs() < 1e-12);
        assert!(row.mean_cos <= 1.0 && row.mean_cos >= -1.0);
    }

    #[test]
    fn singleton_equals_sample() {
        let (net, e, spec) = setup();
        let s = Sample { target: random_target(3), guide: None };
        let row = evaluate(&net, &e, &spec, std::slice::from_ref(&s)).unwrap();
        let m = LossModel::new(spec, e).unwrap().with_target(s.target.clone()).unwrap();
        let ev = m.total_loss(&net.decode(&s.target, None).unwrap()).unwrap();
        assert_eq!(row.count, 1);
        assert_eq!(row.mean_loss, ev.total);
        assert_eq!(row.mean_l2, ev.embedding.unwrap().l2_to_target);
        assert!(evaluate(
            &net,
            &m_embedder(),
            &LossSpec::new(DistanceSpec::new(DistanceKind::L2, random_target(1))),
            &[]
        )
        .is_err());
    }

    fn m_embedder() -> Arc<EmbedderNet> {
        Arc::new(EmbedderNet::with_seed(2))
    }

    #[test]
    fn scatter_statistics() {
        let pts = vec![
            ScatterPoint { feed_forward: 2.0, iterative: 1.0 },
            ScatterPoint { feed_forward: 1.0, iterative: 1.0 },
        ];
        let r = ScatterReport::from_points(pts).unwrap();
        assert_eq!(r.mean_feed_forward, 1.5);
        assert_eq!(r.ratio, 1.5);
        assert_eq!(r.iterative_below, 0.5);
        assert!(ScatterReport::from_points(vec![]).is_err());
    }
}
