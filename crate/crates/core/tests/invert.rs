use std::sync::Arc;

use embinvert_core::embedder::{EmbedderConfig, EmbedderNet};
use embinvert_core::invert::{
    reconstruct, Init, InvertJob, OptimizerKind, QuadraticSurrogate, Schedule, ScheduleTarget,
};
use embinvert_core::objective::{
    tv_value_grad, DistanceKind, DistanceSpec, Evaluation, LossModel, LossSpec, Objective, RegularizerSpec, Term,
};
use embinvert_core::synth::{face_image, smooth_image, FacePose};
use embinvert_core::{Error, Image, Result, Rng, Tensor};

fn embedder() -> Arc<EmbedderNet> {
    Arc::new(EmbedderNet::new(EmbedderConfig { centered: true, ..Default::default() }).unwrap())
}

fn dot_model(e: &Arc<EmbedderNet>, wg: f64, layers: Vec<usize>) -> LossModel {
    let target = e.embed_raw(&smooth_image(&mut Rng::new(12), e.input_dims()).unwrap()).unwrap();
    let guide = face_image(e.input_dims(), FacePose::NEUTRAL).unwrap();
    let spec = LossSpec::new(DistanceSpec::new(DistanceKind::Dot, target))
        .with(RegularizerSpec::tv(1e-2, 2.0))
        .with(RegularizerSpec::guiding(wg, layers, guide));
    LossModel::new(spec, e.clone()).unwrap()
}

/// Total variation alone, with no embedding term.
struct PureTv {
    dims: [usize; 3],
}

impl Objective for PureTv {
    fn image_dims(&self) -> [usize; 3] {
        self.dims
    }
    fn base_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn evaluate(&self, p: &Image, weights: &[f64]) -> Result<Evaluation> {
        let (v, g) = tv_value_grad(p, 2.0)?;
        let total = weights[0] * v;
        Ok(Evaluation {
            total,
            grad: g.scale(weights[0])?,
            terms: vec![Term { name: "tv".into(), value: total }],
            embedding: None,
        })
    }
}

/// Reports an exploding loss after a few evaluations.
struct Exploding {
    calls: std::cell::Cell<usize>,
}

impl Objective for Exploding {
    fn image_dims(&self) -> [usize; 3] {
        [4, 4, 1]
    }
    fn base_weights(&self) -> Vec<f64> {
        vec![]
    }
    fn evaluate(&self, p: &Image, _: &[f64]) -> Result<Evaluation> {
        let k = self.calls.get();
        self.calls.set(k + 1);
        let total = if k >= 3 { 1e13 } else { 1.0 };
        Ok(Evaluation { total, grad: Tensor::filled(p.dims(), 1.0), terms: vec![], embedding: None })
    }
}

#[test]
fn runs_are_bit_identical() {
    let e = embedder();
    let m = dot_model(&e, 1e-2, vec![2]);
    let job = InvertJob { iterations: 40, ..InvertJob::default() };
    let a = reconstruct(&job, &m).unwrap();
    let b = reconstruct(&job, &m).unwrap();
    assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 40);
}

#[test]
fn traced_weights_follow_the_closed_form() {
    let e = embedder();
    let (w0, rate, floor) = (1e-2, 0.9, 1e-4);
    let spec = dot_model(&e, 1e-2, vec![2])
        .spec()
        .clone()
        .with_schedule(Schedule::exponential(ScheduleTarget::Regularizer(0), rate, floor))
        .with_schedule(Schedule::exponential(ScheduleTarget::StepSize, 0.99, 0.0));
    let m = LossModel::new(spec, e).unwrap();
    let job = InvertJob { iterations: 60, cadence: 7, ..InvertJob::default() };
    let r = reconstruct(&job, &m).unwrap();
    assert_eq!(r.trace.iter().map(|t| t.iter).collect::<Vec<_>>(), (0..60).step_by(7).collect::<Vec<_>>());
    for t in &r.trace {
        let want = (w0 * rate.powi(t.iter as i32)).max(floor);
        assert!((t.weights[0] - want).abs() <= 1e-12 * want, "iter {}", t.iter);
        assert_eq!(t.weights[1], 1e-2);
        assert!((t.step_size - 0.05 * 0.99f64.powi(t.iter as i32)).abs() < 1e-15);
    }
}

#[test]
fn final_loss_is_the_loss_of_the_result() {
    let e = embedder();
    let m = dot_model(&e, 1e-2, vec![2]);
    let spec = m.spec().clone().with_schedule(Schedule::exponential(ScheduleTarget::Regularizer(0), 0.95, 0.0));
    let m = LossModel::new(spec, e).unwrap();
    let r = reconstruct(&InvertJob { iterations: 30, ..InvertJob::default() }, &m).unwrap();
    let direct = m.total_loss(&r.image).unwrap();
    assert_eq!(r.final_loss, direct.total);
    assert_eq!(r.final_terms, direct.terms);
}

/// The embedding factors through the guided layer, so with no pixel-space
/// term the guiding penalty alone decides how far the image may drift.
#[test]
fn heavy_guiding_reproduces_the_guide() {
    let e = embedder();
    let target = e.embed_raw(&smooth_image(&mut Rng::new(12), e.input_dims()).unwrap()).unwrap();
    let guide = face_image(e.input_dims(), FacePose::NEUTRAL).unwrap();
    let drift =
        |wg: f64| {
            let spec = LossSpec::new(DistanceSpec::new(DistanceKind::Dot, target.clone()))
                .with(RegularizerSpec::guiding(wg, vec![1], guide.clone()));
            let m = LossModel::new(spec, e.clone()).unwrap();
            let job = InvertJob { init: Init::Guide, lpgn: None, step_size: 0.005, ..InvertJob::default() };
            reconstruct(&job, &m).unwrap().image.max_abs_diff(&guide).unwrap()
        };
    let (held, free) = (drift(1e3), drift(0.0));
    assert!(held < 0.05, "ℓ∞ distance to guide {held}");
    assert!(free > 0.5, "unguided run stayed at the guide ({free})");
}

#[test]
fn sgd_on_total_variation_never_increases_it() {
    let obj = PureTv { dims: [12, 12, 3] };
    // step below 2 / λ_max of the TV Hessian (λ_max = 16)
    let job = InvertJob {
        init: Init::Noise { seed: 3, amplitude: 0.4 },
        iterations: 200,
        lpgn: None,
        optimizer: OptimizerKind::Sgd,
        step_size: 0.1,
        ..InvertJob::default()
    };
    let r = reconstruct(&job, &obj).unwrap();
    for w in r.trace.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{} > {}", w[1].loss, w[0].loss);
    }
    assert!(r.final_loss < 1e-3 * r.trace[0].loss);
}

#[test]
fn sgd_contracts_on_the_quadratic_surrogate() {
    let mut rng = Rng::new(4);
    let target = Tensor::from_fn(&[8, 8, 3], |_| rng.uniform()).unwrap();
    let obj = QuadraticSurrogate { target: target.clone(), alpha: 2.0, tv_weight: 0.01 };
    let job = InvertJob {
        init: Init::Constant { value: 0.5 },
        iterations: 300,
        lpgn: None,
        clamp: false,
        optimizer: OptimizerKind::Sgd,
        step_size: 0.5,
        ..InvertJob::default()
    };
    let fixed = reconstruct(&job, &obj).unwrap();
    let gap = |k: usize| {
        let p = reconstruct(&InvertJob { iterations: k, ..job.clone() }, &obj).unwrap().image;
        p.max_abs_diff(&fixed.image).unwrap()
    };
    let gaps: Vec<f64> = [2, 4, 6, 8].into_iter().map(gap).collect();
    // the slowest mode contracts by 1 − μ(1 + 16 w) per step
    let rate: f64 = 1.0 - 0.5 * (1.0 + 16.0 * 0.01);
    for (w, k) in gaps.windows(2).zip([2, 4, 6]) {
        assert!(w[1] < w[0], "{gaps:?}");
        assert!(w[1] <= w[0] * rate.abs().max(0.5).powi(2) * (1.0 + 1e-9), "after {k}: {gaps:?}");
    }
    for w in fixed.trace.windows(2) {
        assert!(w[1].loss <= w[0].loss * (1.0 + 1e-12), "{} > {}", w[1].loss, w[0].loss);
    }
}

#[test]
fn divergence_returns_the_trace() {
    let obj = Exploding { calls: Default::default() };
    let job = InvertJob { init: Init::Constant { value: 0.5 }, lpgn: None, ..InvertJob::default() };
    let f = reconstruct(&job, &obj).unwrap_err();
    assert!(matches!(f.error, Error::Divergence { iteration: 3, .. }), "{:?}", f.error);
    assert_eq!(f.trace.len(), 4);
    assert!(f.last_image.is_some());
}

#[test]
fn guide_init_without_guide_is_invalid() {
    let obj = PureTv { dims: [4, 4, 1] };
    let f = reconstruct(&InvertJob { init: Init::Guide, ..InvertJob::default() }, &obj).unwrap_err();
    assert!(matches!(f.error, Error::Invalid(_)));
    assert!(f.trace.is_empty());
}
