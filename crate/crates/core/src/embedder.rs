//! A small frozen convolutional embedder standing in for a face recognizer.
//!
//! Architecture (for the default 32×32×3 input):
//!
//! | index | layers               | activation dims |
//! |-------|----------------------|-----------------|
//! | 1     | conv 3×3 s2 3→8, ReLU  | 16×16×8       |
//! | 2     | conv 3×3 s2 8→16, ReLU | 8×8×16        |
//! | 3     | conv 3×3 s2 16→32, ReLU| 4×4×32        |
//! | 4     | fc 512→16            | 16 (unnormalized embedding) |
//!
//! Weights are Xavier-uniform, biases uniform in `±0.1`, all drawn from a
//! fixed seed and never modified afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    l2_normalize, l2_normalize_backward, xavier_uniform, Conv2d, FullyConnected, Image, Layer, Rng, Sequential, Tensor,
};

pub const DEFAULT_SEED: u64 = 0x5EED_F00D;
pub const NUM_CAPTURE_LAYERS: usize = 4;
/// Size of the reference set used by the centered mode.
pub const CENTERING_IMAGES: u64 = 256;
const CENTERING_STREAM: u64 = 0xCE47_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input: [usize; 3],
    pub channels: [usize; 3],
    pub dim: usize,
    pub seed: u64,
    /// Shift the fc bias so the mean embedding of a fixed set of random
    /// smooth images is zero.
    #[serde(default)]
    pub centered: bool,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { input: [32, 32, 3], channels: [8, 16, 32], dim: 16, seed: DEFAULT_SEED, centered: false }
    }
}

/// An embedding vector tagged with whether it has unit ℓ2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Tensor,
    normalized: bool,
}

impl Embedding {
    pub fn unnormalized(values: Tensor) -> Result<Self> {
        if values.rank() != 1 {
            return Err(Error::Shape(format!("embedding must be rank 1, got {:?}", values.dims())));
        }
        Ok(Self { values, normalized: false })
    }

    /// Tags `values` as normalized; errors unless the norm is 1 within 1e-10.
    pub fn normalized(values: Tensor) -> Result<Self> {
        if values.rank() != 1 {
            return Err(Error::Shape(format!("embedding must be rank 1, got {:?}", values.dims())));
        }
        let n = values.norm();
        if (n - 1.0).abs() > 1e-10 {
            return Err(Error::Contract(format!("normalized embedding has norm {n}")));
        }
        Ok(Self { values, normalized: true })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// The unit-norm version of this embedding.
    pub fn to_normalized(&self) -> Result<Embedding> {
        if self.normalized {
            return Ok(self.clone());
        }
        Ok(Self { values: l2_normalize(&self.values)?, normalized: true })
    }

    pub fn scaled(&self, s: f64) -> Result<Embedding> {
        Embedding::unnormalized(self.values.scale(s)?)
    }
}

/// Activations captured during a forward pass, keyed by layer index (1..=4).
pub type LayerActivations = BTreeMap<usize, Tensor>;

/// Output of [`EmbedderNet::embed`].
#[derive(Clone, Debug)]
pub struct EmbedOutput {
    pub unnormalized: Embedding,
    pub normalized: Embedding,
    pub activations: LayerActivations,
}

/// A recorded forward pass, reusable for gradient computations.
#[derive(Clone, Debug)]
pub struct EmbedTrace {
    trace: Vec<Tensor>,
}

/// Upstream gradients to push back through the embedder.
#[derive(Clone, Debug, Default)]
pub struct EmbedSeeds {
    /// Gradient with respect to the unnormalized embedding.
    pub unnormalized: Option<Tensor>,
    /// Gradient with respect to the normalized embedding.
    pub normalized: Option<Tensor>,
    /// Gradients with respect to captured activations.
    pub activations: BTreeMap<usize, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderNet {
    config: EmbedderConfig,
    net: Sequential,
}

impl EmbedderNet {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        let [h, w, c] = config.input;
        if h % 8 != 0 || w % 8 != 0 || c == 0 || config.dim == 0 {
            return Err(Error::Invalid(format!(
                "embedder input {:?} must have spatial dims divisible by 8",
                config.input
            )));
        }
        let mut rng = Rng::new(config.seed);
        let mut layers = Vec::new();
        let mut dims = config.input;
        for &cout in &config.channels {
            let cin = dims[2];
            let kernel = xavier_uniform(&[3, 3, cin, cout], 9 * cin, 9 * cout, &mut rng);
            let bias = Tensor::from_fn(&[cout], |_| rng.uniform_range(-0.1, 0.1))?;
            let conv = Conv2d::new(kernel, bias, 2, dims)?;
            dims = conv.output_dims();
            layers.push(Layer::Conv(conv));
            layers.push(Layer::Relu);
        }
        let n_in: usize = dims.iter().product();
        let kernel = xavier_uniform(&[n_in, config.dim], n_in, config.dim, &mut rng);
        let bias = Tensor::from_fn(&[config.dim], |_| rng.uniform_range(-0.1, 0.1))?;
        layers.push(Layer::Fc(FullyConnected::new(kernel, bias, dims.to_vec(), vec![config.dim])?));
        let net = Sequential::new(layers, &config.input)?;
        let mut embedder = Self { config, net };
        if embedder.config.centered {
            embedder.center()?;
        }
        Ok(embedder)
    }

    /// Subtracts the mean raw embedding of [`CENTERING_IMAGES`] seeded smooth
    /// images from the fc bias.
    fn center(&mut self) -> Result<()> {
        let mut mean = Tensor::zeros(&[self.config.dim]);
        for i in 0..CENTERING_IMAGES {
            let image = crate::synth::smooth_image(
                &mut Rng::derived(self.config.seed, CENTERING_STREAM + i),
                self.config.input,
            )?;
            mean.axpy(1.0 / CENTERING_IMAGES as f64, &self.net.forward(&image)?)?;
        }
        let fc = self.net.len() - 1;
        if let Some((_, bias)) = self.net.layers_mut()[fc].params_mut() {
            bias.axpy(-1.0, &mean)?;
        }
        Ok(())
    }

    /// The default 32×32×3 → 16 embedder with the given weight seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::new(EmbedderConfig { seed, ..EmbedderConfig::default() }).expect("default config is valid")
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.config.input
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Dims of the activation captured at `layer` (1..=4).
    pub fn activation_dims(&self, layer: usize) -> Result<Vec<usize>> {
        let pos = Self::trace_position(layer)?;
        let mut dims = self.config.input.to_vec();
        for l in &self.net.layers()[..pos] {
            dims = l.output_dims(&dims)?;
        }
        Ok(dims)
    }

    /// Position in the forward trace holding activation `layer`.
    fn trace_position(layer: usize) -> Result<usize> {
        match layer {
            1..=3 => Ok(2 * layer),
            4 => Ok(7),
            _ => {
                Err(Error::Invalid(format!("activation layer index must be in 1..={NUM_CAPTURE_LAYERS}, got {layer}")))
            }
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.dims() != self.config.input {
            return Err(Error::Shape(format!(
                "embedder expects an image of dims {:?}, got {:?}",
                self.config.input,
                image.dims()
            )));
        }
        image.ensure_finite("embedder input")
    }

    pub fn trace(&self, image: &Image) -> Result<EmbedTrace> {
        self.check_image(image)?;
        Ok(EmbedTrace { trace: self.net.forward_trace(image)? })
    }

    /// Both embedding variants plus the activations of `capture_layers`.
    pub fn embed(&self, image: &Image, capture_layers: &[usize]) -> Result<EmbedOutput> {
        let trace = self.trace(image)?;
        self.output_from_trace(&trace, capture_layers)
    }

    pub fn output_from_trace(&self, trace: &EmbedTrace, capture_layers: &[usize]) -> Result<EmbedOutput> {
        let raw = trace.trace.last().expect("non-empty trace").clone();
        let normalized = Embedding::normalized(l2_normalize(&raw)?)?;
        let mut activations = BTreeMap::new();
        for &l in capture_layers {
            activations.insert(l, trace.trace[Self::trace_position(l)?].clone());
        }
        Ok(EmbedOutput { unnormalized: Embedding::unnormalized(raw)?, normalized, activations })
    }

    /// Unnormalized embedding only.
    pub fn embed_raw(&self, image: &Image) -> Result<Embedding> {
        self.check_image(image)?;
        Embedding::unnormalized(self.net.forward(image)?)
    }

    /// Image gradient of `⟨embedding(image), upstream⟩` for the unnormalized embedding.
    pub fn embed_grad(&self, image: &Image, upstream: &Tensor) -> Result<Image> {
        if upstream.dims() != [self.config.dim] {
            return Err(Error::Shape(format!(
                "upstream gradient dims {:?}, expected [{}]",
                upstream.dims(),
                self.config.dim
            )));
        }
        let trace = self.trace(image)?;
        self.backward(&trace, &EmbedSeeds { unnormalized: Some(upstream.clone()), ..Default::default() })
    }

    /// Pushes all seeds back to an image gradient.
    pub fn backward(&self, trace: &EmbedTrace, seeds: &EmbedSeeds) -> Result<Image> {
        let raw = trace.trace.last().expect("non-empty trace");
        let mut upstream = match &seeds.unnormalized {
            Some(g) => {
                if g.dims() != raw.dims() {
                    return Err(Error::Shape(format!(
                        "embedding gradient dims {:?}, expected {:?}",
                        g.dims(),
                        raw.dims()
                    )));
                }
                g.clone()
            }
            None => Tensor::zeros(raw.dims()),
        };
        if let Some(gn) = &seeds.normalized {
            upstream.axpy(1.0, &l2_normalize_backward(raw, gn)?)?;
        }
        let mut inject = Vec::with_capacity(seeds.activations.len());
        for (&layer, g) in &seeds.activations {
            inject.push((Self::trace_position(layer)?, g));
        }
        let (grad, _) = self.net.backward(&trace.trace, &upstream, &inject)?;
        Ok(grad)
    }

    /// Per-node mean and population standard deviation of the activations
    /// at `layer` over a collection of images.
    pub fn activation_stats(&self, images: &[Image], layer: usize) -> Result<(Tensor, Tensor)> {
        if images.len() < 2 {
            return Err(Error::Invalid(format!(
                "activation statistics need at least two images, got {}",
                images.len()
            )));
        }
        let acts = images
            .iter()
            .map(|im| self.embed(im, &[layer]).map(|o| o.activations[&layer].clone()))
            .collect::<Result<Vec<_>>>()?;
        let n = acts.len() as f64;
        let dims = acts[0].dims().to_vec();
        let len = acts[0].len();
        let mut mean = vec![0.0; len];
        for a in &acts {
            for (m, v) in mean.iter_mut().zip(a.data()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; len];
        for a in &acts {
            for ((s, v), m) in var.iter_mut().zip(a.data()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Ok((Tensor::new(dims.clone(), mean)?, Tensor::new(dims, var.into_iter().map(f64::sqrt).collect())?))
    }

    /// Fine-tunes the final fc layer so embeddings of images drawn from a few
    /// synthetic blob classes cluster around per-class unit prototypes.
    ///
    /// Only the fc layer moves; the convolutional feature extractor stays
    /// as initialized. The result is frozen again.
    pub fn lightly_trained(config: EmbedderConfig, classes: usize, steps: usize) -> Result<Self> {
        let mut net = Self::new(config)?;
        if classes < 2 {
            return Err(Error::Invalid("light training needs at least two classes".into()));
        }
        let dim = net.config.dim;
        let mut rng = Rng::derived(net.config.seed, 0x11);
        let protos: Vec<Tensor> = (0..classes)
            .map(|_| l2_normalize(&Tensor::from_fn(&[dim], |_| rng.normal()).expect("dims")))
            .collect::<Result<_>>()?;
        let centers: Vec<(f64, f64, [f64; 3])> = (0..classes)
            .map(|_| {
                (
                    rng.uniform_range(0.25, 0.75),
                    rng.uniform_range(0.25, 0.75),
                    [rng.uniform(), rng.uniform(), rng.uniform()],
                )
            })
            .collect();
        let fc_index = net.net.len() - 1;
        let lr = 0.05;
        for step in 0..steps {
            let class = step % classes;
            let (cy, cx, color) = centers[class];
            let mut srng = Rng::derived(net.config.seed, 0x1000 + step as u64);
            let image = crate::synth::blob_image(
                net.config.input,
                cy + srng.uniform_range(-0.05, 0.05),
                cx + srng.uniform_range(-0.05, 0.05),
                0.2,
                color,
            )?;
            let trace = net.net.forward_trace(&image)?;
            let raw = trace.last().expect("non-empty");
            // maximize ẽ·u  ⇔  minimize −ẽ·u
            let g_norm = protos[class].scale(-1.0)?;
            let g_raw = l2_normalize_backward(raw, &g_norm)?;
            let fc_in = &trace[fc_index];
            let (_, pg) = net.net.layers()[fc_index].backward(fc_in, &g_raw)?;
            let pg = pg.expect("fc has params");
            if let Some((k, b)) = net.net.layers_mut()[fc_index].params_mut() {
                k.axpy(-lr, &pg.kernel)?;
                b.axpy(-lr, &pg.bias)?;
            }
        }
        Ok(net)
    }
}
