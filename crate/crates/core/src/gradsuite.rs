//! Finite-difference oracle for every differentiable operation: layers,
//! distances, regularizers, the assembled loss, the embedder and the
//! decoder-through-embedder chain.
//!
//! Each check draws a seeded random instance, evaluates the analytic
//! gradient and compares it against central differences on a sample of
//! coordinates.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderNet};
use crate::embedder::{EmbedSeeds, EmbedderConfig, EmbedderNet, Embedding};
use crate::error::Result;
use crate::numcore::gradcheck::{check, sample_coords, GradCheck, DEFAULT_STEP};
use crate::numcore::{
    concat_channels, l2_normalize, l2_normalize_backward, Conv2d, Crop, Deconv2d, FullyConnected, Image, Layer, Pad,
    Rng, Tensor,
};
use crate::objective::{
    distance, gauss_value_grad, guiding_value_grad, lp_spectrum_value_grad, mirror_value_grad, tv_value_grad,
    DistanceKind, DistanceSpec, LossModel, LossSpec, Objective, Regularizer, RegularizerSpec,
};
use crate::synth::smooth_image;

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the decoder-through-embedder chain.
pub const CHAIN_TOLERANCE: f64 = 1e-4;
/// Coordinates probed per check.
const PROBES: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instance: usize,
    pub checked: usize,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

type Checker = fn(&mut Rng) -> Result<GradCheck>;

/// Every check with its name and tolerance.
pub fn checks() -> Vec<(&'static str, f64, Checker)> {
    vec![
        ("conv_input", OP_TOLERANCE, conv_input as Checker),
        ("conv_params", OP_TOLERANCE, conv_params),
        ("deconv_input", OP_TOLERANCE, deconv_input),
        ("deconv_params", OP_TOLERANCE, deconv_params),
        ("fc_input", OP_TOLERANCE, fc_input),
        ("fc_params", OP_TOLERANCE, fc_params),
        ("relu", OP_TOLERANCE, relu_check),
        ("l2_normalize", OP_TOLERANCE, l2norm_check),
        ("crop", OP_TOLERANCE, crop_check),
        ("pad", OP_TOLERANCE, pad_check),
        ("concat", OP_TOLERANCE, concat_check),
        ("distance_l2", OP_TOLERANCE, |r| distance_check(r, DistanceKind::L2)),
        ("distance_dot", OP_TOLERANCE, |r| distance_check(r, DistanceKind::Dot)),
        ("distance_normalized_dot", OP_TOLERANCE, |r| distance_check(r, DistanceKind::NormalizedDot)),
        ("tv", OP_TOLERANCE, tv_check),
        ("guiding", OP_TOLERANCE, guiding_check),
        ("gauss", OP_TOLERANCE, gauss_check),
        ("lp_spectrum", OP_TOLERANCE, lp_check),
        ("mirror", OP_TOLERANCE, mirror_check),
        ("embedder", OP_TOLERANCE, embedder_check),
        ("total_loss", OP_TOLERANCE, total_loss_check),
        ("decoder_chain", CHAIN_TOLERANCE, |r| chain_check(r, false)),
        ("guided_decoder_chain", CHAIN_TOLERANCE, |r| chain_check(r, true)),
    ]
}

/// Runs every check on `instances` seeded instances.
pub fn run(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, (name, tolerance, f)) in checks().into_iter().enumerate() {
        for i in 0..instances {
            let mut rng = Rng::derived(seed, ((k as u64) << 32) | i as u64);
            let r = f(&mut rng)?;
            out.push(CheckOutcome {
                name: name.into(),
                instance: i,
                checked: r.checked,
                rel_err: r.rel_err,
                tolerance,
            });
        }
    }
    Ok(out)
}

fn random(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0)).expect("valid dims")
}

/// Values bounded away from zero, so ReLU kinks lie outside the FD stencil.
fn off_kink(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let v = rng.uniform_range(0.05, 1.0);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
    .expect("valid dims")
}

fn unit_image(dims: [usize; 3], rng: &mut Rng) -> Image {
    Tensor::from_fn(&dims, |_| rng.uniform()).expect("valid dims")
}

fn probe(n: usize, rng: &mut Rng) -> Vec<usize> {
    sample_coords(n, PROBES, rng)
}

fn retensor(like: &Tensor, x: &[f64]) -> Tensor {
    Tensor::new(like.dims().to_vec(), x.to_vec()).expect("same length")
}

/// FD check of `x ↦ ⟨op(x), u⟩` against `grad`.
fn linear_functional(
    x: &Tensor,
    u: &Tensor,
    grad: &Tensor,
    op: impl Fn(&Tensor) -> Result<Tensor>,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let coords = probe(x.len(), rng);
    check(|v| op(&retensor(x, v))?.dot(u), x.data(), grad.data(), Some(&coords), DEFAULT_STEP)
}

fn conv_layer(rng: &mut Rng, stride: usize) -> Result<(Conv2d, Tensor)> {
    let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
    let input = [5 + rng.below(3), 5 + rng.below(3), cin];
    let conv = Conv2d::new(random(&[3, 3, cin, cout], rng), random(&[cout], rng), stride, input)?;
    Ok((conv, random(&input, rng)))
}

fn conv_input(rng: &mut Rng) -> Result<GradCheck> {
    let stride = 1 + rng.below(2);
    let (conv, x) = conv_layer(rng, stride)?;
    let u = random(&conv.output_dims(), rng);
    let (g, _) = conv.backward(&x, &u)?;
    linear_functional(&x, &u, &g, |v| conv.forward(v), rng)
}

fn conv_params(rng: &mut Rng) -> Result<GradCheck> {
    let stride = 1 + rng.below(2);
    let (conv, x) = conv_layer(rng, stride)?;
    let u = random(&conv.output_dims(), rng);
    let (_, pg) = conv.backward(&x, &u)?;
    let (k, b) = (conv.kernel().clone(), conv.bias().clone());
    let flat: Vec<f64> = k.data().iter().chain(b.data()).copied().collect();
    let grad: Vec<f64> = pg.kernel.data().iter().chain(pg.bias.data()).copied().collect();
    let coords = probe(flat.len(), rng);
    check(
        |v| {
            let c = Conv2d::new(retensor(&k, &v[..k.len()]), retensor(&b, &v[k.len()..]), stride, conv.input_dims())?;
            c.forward(&x)?.dot(&u)
        },
        &flat,
        &grad,
        Some(&coords),
        DEFAULT_STEP,
    )
}

fn deconv_layer(rng: &mut Rng) -> Result<(Deconv2d, Tensor)> {
    let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
    let input = [2 + rng.below(3), 2 + rng.below(3), cin];
    let k = if rng.uniform() < 0.5 { 3 } else { 5 };
    let deconv = Deconv2d::new(random(&[k, k, cin, cout], rng), random(&[cout], rng), 2, input)?;
    Ok((deconv, random(&input, rng)))
}

fn deconv_input(rng: &mut Rng) -> Result<GradCheck> {
    let (deconv, x) = deconv_layer(rng)?;
    let u = random(&deconv.output_dims(), rng);
    let (g, _) = deconv.backward(&x, &u)?;
    linear_functional(&x, &u, &g, |v| deconv.forward(v), rng)
}

fn deconv_params(rng: &mut Rng) -> Result<GradCheck> {
    let (deconv, x) = deconv_layer(rng)?;
    let u = random(&deconv.output_dims(), rng);
    let (_, pg) = deconv.backward(&x, &u)?;
    let (k, b) = (deconv.kernel().clone(), deconv.bias().clone());
    let flat: Vec<f64> = k.data().iter().chain(b.data()).copied().collect();
    let grad: Vec<f64> = pg.kernel.data().iter().chain(pg.bias.data()).copied().collect();
    let coords = probe(flat.len(), rng);
    check(
        |v| {
            let d = Deconv2d::new(retensor(&k, &v[..k.len()]), retensor(&b, &v[k.len()..]), 2, deconv.input_dims())?;
            d.forward(&x)?.dot(&u)
        },
        &flat,
        &grad,
        Some(&coords),
        DEFAULT_STEP,
    )
}

fn fc_layer(rng: &mut Rng) -> Result<(FullyConnected, Tensor)> {
    let input = vec![1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)];
    let n_in: usize = input.iter().product();
    let n_out = 1 + rng.below(6);
    let fc = FullyConnected::new(random(&[n_in, n_out], rng), random(&[n_out], rng), input.clone(), vec![n_out])?;
    Ok((fc, random(&input, rng)))
}

fn fc_input(rng: &mut Rng) -> Result<GradCheck> {
    let (fc, x) = fc_layer(rng)?;
    let u = random(fc.output_dims(), rng);
    let (g, _) = fc.backward(&x, &u)?;
    linear_functional(&x, &u, &g, |v| fc.forward(v), rng)
}

fn fc_params(rng: &mut Rng) -> Result<GradCheck> {
    let (fc, x) = fc_layer(rng)?;
    let u = random(fc.output_dims(), rng);
    let (_, pg) = fc.backward(&x, &u)?;
    let (k, b) = (fc.kernel().clone(), fc.bias().clone());
    let flat: Vec<f64> = k.data().iter().chain(b.data()).copied().collect();
    let grad: Vec<f64> = pg.kernel.data().iter().chain(pg.bias.data()).copied().collect();
    let coords = probe(flat.len(), rng);
    let (input, output) = (fc.input_dims().to_vec(), fc.output_dims().to_vec());
    check(
        |v| {
            let f = FullyConnected::new(
                retensor(&k, &v[..k.len()]),
                retensor(&b, &v[k.len()..]),
                input.clone(),
                output.clone(),
            )?;
            f.forward(&x)?.dot(&u)
        },
        &flat,
        &grad,
        Some(&coords),
        DEFAULT_STEP,
    )
}

fn stateless(layer: Layer, x: Tensor, rng: &mut Rng) -> Result<GradCheck> {
    let y = layer.forward(&x)?;
    let u = random(y.dims(), rng);
    let (g, _) = layer.backward(&x, &u)?;
    linear_functional(&x, &u, &g, |v| layer.forward(v), rng)
}

fn relu_check(rng: &mut Rng) -> Result<GradCheck> {
    let x = off_kink(&[4, 5, 3], rng);
    stateless(Layer::Relu, x, rng)
}

fn l2norm_check(rng: &mut Rng) -> Result<GradCheck> {
    let n = 2 + rng.below(15);
    let x = random(&[n], rng);
    stateless(Layer::L2Norm, x, rng)
}

fn crop_check(rng: &mut Rng) -> Result<GradCheck> {
    let input = [6 + rng.below(4), 6 + rng.below(4), 2];
    let x = random(&input, rng);
    stateless(Layer::Crop(Crop::new(input, 5, 4)?), x, rng)
}

fn pad_check(rng: &mut Rng) -> Result<GradCheck> {
    let input = [3 + rng.below(3), 3 + rng.below(3), 2];
    let x = random(&input, rng);
    stateless(Layer::Pad(Pad::new(input, 9, 10)?), x, rng)
}

fn concat_check(rng: &mut Rng) -> Result<GradCheck> {
    let (ca, cb) = (1 + rng.below(3), 1 + rng.below(3));
    let a = random(&[4, 3, ca], rng);
    let b = random(&[4, 3, cb], rng);
    let u = random(&[4, 3, ca + cb], rng);
    let (ga, _) = crate::numcore::split_channels(&u, ca)?;
    linear_functional(&a, &u, &ga, |v| concat_channels(v, &b), rng)
}

fn distance_check(rng: &mut Rng, kind: DistanceKind) -> Result<GradCheck> {
    let n = 3 + rng.below(14);
    let target = Embedding::unnormalized(random(&[n], rng))?;
    let spec = DistanceSpec::new(kind, target).scaled(rng.uniform_range(0.5, 4.0));
    let x = random(&[n], rng);
    // normalized distances are checked through the normalization, as the
    // loss uses them
    let eval = |v: &Tensor| -> Result<(f64, Tensor)> {
        if kind.wants_normalized() {
            let (d, g) = distance(&Embedding::normalized(l2_normalize(v)?)?, &spec)?;
            Ok((d, l2_normalize_backward(v, &g)?))
        } else {
            distance(&Embedding::unnormalized(v.clone())?, &spec)
        }
    };
    let (_, g) = eval(&x)?;
    check(|v| Ok(eval(&retensor(&x, v))?.0), x.data(), g.data(), None, DEFAULT_STEP)
}

fn image_functional(p: &Image, grad: &Image, f: impl Fn(&Image) -> Result<f64>, rng: &mut Rng) -> Result<GradCheck> {
    let coords = probe(p.len(), rng);
    check(|v| f(&retensor(p, v)), p.data(), grad.data(), Some(&coords), DEFAULT_STEP)
}

fn tv_check(rng: &mut Rng) -> Result<GradCheck> {
    let alpha = [2.0, 1.5, 3.0][rng.below(3)];
    let p = unit_image([5 + rng.below(4), 5 + rng.below(4), 3], rng);
    let (_, g) = tv_value_grad(&p, alpha)?;
    image_functional(&p, &g, |q| Ok(tv_value_grad(q, alpha)?.0), rng)
}

fn lp_check(rng: &mut Rng) -> Result<GradCheck> {
    let levels = 1 + rng.below(2);
    let p = unit_image([8, 8, 3], rng);
    let (beta, norm) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(0.1, 2.0));
    let (_, g) = lp_spectrum_value_grad(&p, levels, beta, norm)?;
    image_functional(&p, &g, |q| Ok(lp_spectrum_value_grad(q, levels, beta, norm)?.0), rng)
}

fn mirror_check(rng: &mut Rng) -> Result<GradCheck> {
    let p = unit_image([4 + rng.below(4), 4 + rng.below(4), 3], rng);
    let (_, g) = mirror_value_grad(&p)?;
    image_functional(&p, &g, |q| Ok(mirror_value_grad(q)?.0), rng)
}

fn gauss_check(rng: &mut Rng) -> Result<GradCheck> {
    let dims = [3, 3, 2 + rng.below(3)];
    let a = random(&dims, rng);
    let mean = random(&dims, rng);
    let std = Tensor::from_fn(&dims, |_| rng.uniform_range(0.0, 2.0))?;
    let nu = rng.uniform_range(0.01, 1.0);
    let (_, g) = gauss_value_grad(&a, &mean, &std, nu)?;
    image_functional(&a, &g, |v| Ok(gauss_value_grad(v, &mean, &std, nu)?.0), rng)
}

/// An 8×8 embedder small enough for dense FD probing.
fn small_embedder(rng: &mut Rng) -> Result<EmbedderNet> {
    EmbedderNet::new(EmbedderConfig {
        input: [8, 8, 3],
        channels: [3, 4, 5],
        dim: 6,
        seed: rng.next_u64(),
        centered: false,
    })
}

fn guiding_check(rng: &mut Rng) -> Result<GradCheck> {
    let e = small_embedder(rng)?;
    let layers: Vec<usize> = (1..=4).filter(|_| rng.uniform() < 0.5).collect();
    let layers = if layers.is_empty() { vec![2] } else { layers };
    let guide = unit_image(e.input_dims(), rng);
    let guide_acts = e.embed(&guide, &layers)?.activations;
    let w = rng.uniform_range(0.1, 2.0);
    let p = unit_image(e.input_dims(), rng);
    let trace = e.trace(&p)?;
    let acts = e.output_from_trace(&trace, &layers)?.activations;
    let (_, seeds) = guiding_value_grad(&acts, &guide_acts, &layers, w)?;
    let g = e.backward(&trace, &EmbedSeeds { activations: seeds, ..Default::default() })?;
    image_functional(
        &p,
        &g,
        |q| Ok(guiding_value_grad(&e.embed(q, &layers)?.activations, &guide_acts, &layers, w)?.0),
        rng,
    )
}

fn embedder_check(rng: &mut Rng) -> Result<GradCheck> {
    let e = small_embedder(rng)?;
    let p = unit_image(e.input_dims(), rng);
    let u = random(&[e.dim()], rng);
    let g = e.embed_grad(&p, &u)?;
    image_functional(&p, &g, |q| e.embed_raw(q)?.values().dot(&u), rng)
}

/// A loss with every regularizer active on the small embedder.
fn full_loss(rng: &mut Rng, embedder: Arc<EmbedderNet>) -> Result<LossModel> {
    let kind = [DistanceKind::L2, DistanceKind::Dot, DistanceKind::NormalizedDot][rng.below(3)];
    let dims = embedder.input_dims();
    let target = Embedding::unnormalized(random(&[embedder.dim()], rng))?;
    let pool: Vec<Image> = (0..4).map(|_| smooth_image(rng, dims)).collect::<Result<_>>()?;
    let layer = 1 + rng.below(3);
    let (mean, std) = embedder.activation_stats(&pool, layer)?;
    let spec = LossSpec::new(DistanceSpec::new(kind, target))
        .with(RegularizerSpec::tv(rng.uniform_range(0.01, 0.5), [2.0, 1.5][rng.below(2)]))
        .with(RegularizerSpec::guiding(rng.uniform_range(0.01, 0.5), vec![1 + rng.below(4)], unit_image(dims, rng)))
        .with(RegularizerSpec::new(rng.uniform_range(0.01, 0.5), Regularizer::Gauss { layer, mean, std, nu: 0.1 }))
        .with(RegularizerSpec::new(
            rng.uniform_range(0.01, 0.5),
            Regularizer::LpSpectrum { levels: 2, beta: 0.5, norm: 0.3 },
        ))
        .with(RegularizerSpec::new(rng.uniform_range(0.01, 0.5), Regularizer::Mirror));
    LossModel::new(spec, embedder)
}

fn total_loss_check(rng: &mut Rng) -> Result<GradCheck> {
    let embedder = Arc::new(small_embedder(rng)?);
    let model = full_loss(rng, embedder)?;
    let p = unit_image(model.image_dims(), rng);
    let g = model.total_loss(&p)?.grad;
    image_functional(&p, &g, |q| Ok(model.total_loss(q)?.total), rng)
}

/// Loss of a decoded image as a function of the decoder's parameters.
fn chain_check(rng: &mut Rng, guided: bool) -> Result<GradCheck> {
    let embedder = Arc::new(small_embedder(rng)?);
    let mut config = DecoderConfig {
        embedding_dim: embedder.dim(),
        filters: 3,
        seed_size: 1,
        output: embedder.input_dims(),
        seed: rng.next_u64(),
        ..DecoderConfig::default()
    };
    if guided {
        config = config.guided(2);
    }
    let mut net = DecoderNet::new(config)?;
    // random parameters keep the output off the clip boundary more often
    // than the structured initialization does
    let theta: Vec<f64> = net.flat_params().iter().map(|&v| v + 0.1 * rng.uniform_range(-1.0, 1.0)).collect();
    net.set_flat_params(&theta)?;
    let template = LossSpec::new(DistanceSpec::new(DistanceKind::L2, Embedding::unnormalized(random(&[6], rng))?))
        .with(RegularizerSpec::tv(0.05, 2.0))
        .with(RegularizerSpec::guiding(0.1, vec![2], unit_image(embedder.input_dims(), rng)));
    let model = LossModel::new(template, embedder)?;
    let e = Embedding::unnormalized(random(&[6], rng))?;
    let guide = guided.then(|| unit_image(model.image_dims(), rng));
    let trace = net.forward(&e, guide.as_ref())?;
    let upstream = model.total_loss(&trace.output)?.grad;
    let grads = net.backward(&trace, &upstream)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    let coords = probe(theta.len(), rng);
    let mut probe_net = net.clone();
    check(
        |v| {
            probe_net.set_flat_params(v)?;
            Ok(model.total_loss(&probe_net.decode(&e, guide.as_ref())?)?.total)
        },
        &theta,
        &analytic,
        Some(&coords),
        DEFAULT_STEP,
    )
}
