use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::numcore::{
    concat_channels, relu, relu_backward, split_channels, xavier_uniform, Conv2d, Crop, Deconv2d, FullyConnected,
    Image, Layer, Pad, ParamGrads, Rng, Tensor,
};

/// Spatial profile of the deconvolution kernels at initialization. With
/// stride 2 each output sample receives taps summing to 1 per axis, so a
/// constant input maps to a constant output away from the border.
const INTERP: [f64; 5] = [1.0 / 8.0, 4.0 / 8.0, 6.0 / 8.0, 4.0 / 8.0, 1.0 / 8.0];
const DECONV_K: usize = 5;
const DECONV_STAGES: usize = 3;
const OUTPUT_BIAS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embedding_dim: usize,
    /// Whether the decoder consumes unit-norm embeddings.
    pub normalized_input: bool,
    /// Channels of the seed tensor and of every hidden deconvolution.
    pub filters: usize,
    /// Spatial size of the seed tensor; the canvas is 8× larger.
    pub seed_size: usize,
    pub output: [usize; 3],
    /// Channels of the guide encoder; `None` for an embedding-only decoder.
    pub guide_channels: Option<usize>,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            normalized_input: false,
            filters: 16,
            seed_size: 4,
            output: [32, 32, 3],
            guide_channels: None,
            seed: 0xDEC0DE,
        }
    }
}

impl DecoderConfig {
    pub fn guided(mut self, channels: usize) -> Self {
        self.guide_channels = Some(channels);
        self
    }

    pub fn canvas(&self) -> usize {
        self.seed_size << DECONV_STAGES
    }

    pub fn validate(&self) -> Result<()> {
        let canvas = self.canvas();
        if self.embedding_dim == 0 || self.filters == 0 || self.seed_size == 0 {
            return Err(Error::Invalid("decoder dims must be positive".into()));
        }
        if self.output[0] > canvas || self.output[1] > canvas || self.output[0] == 0 || self.output[1] == 0 {
            return Err(Error::Invalid(format!("output {:?} does not fit the {canvas}×{canvas} canvas", self.output)));
        }
        if self.output[2] == 0 || self.guide_channels == Some(0) {
            return Err(Error::Invalid("decoder channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GuideBranch {
    pad: Pad,
    /// Stride-2 convolutions producing the `canvas/2`, `/4`, `/8` features.
    convs: Vec<Layer>,
    /// 1×1 convolution over `[decoded, guide]` channels.
    merge: Layer,
}

/// Feed-forward decoder: fc seed tensor, three stride-2 deconvolutions,
/// optional center crop, clip to `[0, 1]`. The guided variant encodes the
/// guide with stride-2 convolutions and depth-concatenates each encoding
/// with the decoder tensor of the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    config: DecoderConfig,
    fc: Layer,
    deconvs: Vec<Layer>,
    crop: Option<Crop>,
    guide: Option<GuideBranch>,
}

#[derive(Clone, Debug)]
struct GuideTrace {
    padded: Tensor,
    pre: Vec<Tensor>,
    acts: Vec<Tensor>,
    merge_in: Tensor,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct DecodeTrace {
    input: Tensor,
    fc_out: Tensor,
    stage_in: Vec<Tensor>,
    deconv_out: Vec<Tensor>,
    guide: Option<GuideTrace>,
    pre_clip: Tensor,
    pub output: Image,
}

fn deconv_init(cin: usize, cout: usize, grayscale: bool, rng: &mut Rng) -> Tensor {
    let mix = if grayscale {
        let col = xavier_uniform(&[cin], cin, cout, rng);
        Tensor::from_fn(&[cin, cout], |i| col.data()[i / cout]).expect("dims")
    } else {
        xavier_uniform(&[cin, cout], cin, cout, rng)
    };
    Tensor::from_fn(&[DECONV_K, DECONV_K, cin, cout], |i| {
        let ky = i / (DECONV_K * cin * cout);
        let kx = (i / (cin * cout)) % DECONV_K;
        INTERP[ky] * INTERP[kx] * mix.data()[i % (cin * cout)]
    })
    .expect("dims")
}

impl DecoderNet {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let (s, l, d) = (config.seed_size, config.filters, config.embedding_dim);
        let canvas = config.canvas();
        let out_c = config.output[2];
        let extra = config.guide_channels.unwrap_or(0);

        let fc = Layer::Fc(FullyConnected::new(
            xavier_uniform(&[d, s * s * l], d, s * s * l, &mut rng),
            Tensor::from_fn(&[s * s * l], |_| rng.uniform_range(0.0, 0.2))?,
            vec![d],
            vec![s, s, l],
        )?);
        let mut deconvs = Vec::with_capacity(DECONV_STAGES);
        for i in 0..DECONV_STAGES {
            let hw = s << i;
            let cin = l + extra;
            let last = i + 1 == DECONV_STAGES;
            let cout = if last { out_c } else { l };
            let bias = if last && config.guide_channels.is_none() {
                Tensor::filled(&[cout], OUTPUT_BIAS)
            } else {
                Tensor::zeros(&[cout])
            };
            let kernel = deconv_init(cin, cout, last, &mut rng);
            deconvs.push(Layer::Deconv(Deconv2d::new(kernel, bias, 2, [hw, hw, cin])?));
        }
        let guide = match config.guide_channels {
            None => None,
            Some(g) => {
                let mut convs = Vec::with_capacity(DECONV_STAGES);
                let mut dims = [canvas, canvas, out_c];
                for _ in 0..DECONV_STAGES {
                    let cin = dims[2];
                    let kernel = xavier_uniform(&[3, 3, cin, g], 9 * cin, 9 * g, &mut rng);
                    let conv = Conv2d::new(kernel, Tensor::zeros(&[g]), 2, dims)?;
                    dims = conv.output_dims();
                    convs.push(Layer::Conv(conv));
                }
                // output = decoded + guide at initialization
                let merge_kernel = Tensor::from_fn(&[1, 1, 2 * out_c, out_c], |i| {
                    let (a, b) = (i / out_c, i % out_c);
                    if a % out_c == b {
                        1.0
                    } else {
                        0.0
                    }
                })?;
                let merge =
                    Layer::Conv(Conv2d::new(merge_kernel, Tensor::zeros(&[out_c]), 1, [canvas, canvas, 2 * out_c])?);
                let pad = Pad::new(config.output, canvas, canvas)?;
                Some(GuideBranch { pad, convs, merge })
            }
        };
        let crop = if config.output[0] != canvas || config.output[1] != canvas {
            Some(Crop::new([canvas, canvas, out_c], config.output[0], config.output[1])?)
        } else {
            None
        };
        Ok(Self { config, fc, deconvs, crop, guide })
    }

    /// Rebuilds a decoder from parameters in [`DecoderNet::params`] order.
    pub fn with_params(config: DecoderConfig, params: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::new(config)?;
        let expected = net.params().len();
        if params.len() != expected {
            return Err(Error::Format(format!("decoder expects {expected} parameter tensors, got {}", params.len())));
        }
        for (slot, p) in net.params_mut().into_iter().zip(params) {
            if slot.dims() != p.dims() {
                return Err(Error::Format(format!(
                    "parameter dims {:?} do not match architecture {:?}",
                    p.dims(),
                    slot.dims()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn is_guided(&self) -> bool {
        self.guide.is_some()
    }

    fn layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = std::iter::once(&self.fc).chain(&self.deconvs).collect();
        if let Some(g) = &self.guide {
            v.extend(&g.convs);
            v.push(&g.merge);
        }
        v
    }

    /// Kernel and bias of every layer: fc, deconvolutions, then (guided)
    /// encoder convolutions and the merge convolution.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().into_iter().filter_map(Layer::params).flat_map(|(k, b)| [k, b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut layers: Vec<&mut Layer> = std::iter::once(&mut self.fc).chain(self.deconvs.iter_mut()).collect();
        if let Some(g) = &mut self.guide {
            layers.extend(g.convs.iter_mut());
            layers.push(&mut g.merge);
        }
        layers.into_iter().filter_map(Layer::params_mut).flat_map(|(k, b)| [k, b]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_inputs(&self, e: &Embedding, guide: Option<&Image>) -> Result<()> {
        if e.is_normalized() != self.config.normalized_input {
            return Err(Error::Contract(format!(
                "decoder was built for {} embeddings",
                if self.config.normalized_input { "normalized" } else { "unnormalized" }
            )));
        }
        if e.dim() != self.config.embedding_dim {
            return Err(Error::Shape(format!(
                "decoder expects a {}-dim embedding, got {}",
                self.config.embedding_dim,
                e.dim()
            )));
        }
        match (self.is_guided(), guide) {
            (true, None) => Err(Error::Contract("guided decoder needs a guide image".into())),
            (false, Some(_)) => Err(Error::Contract("decoder takes no guide image".into())),
            (true, Some(g)) if g.dims() != self.config.output => {
                Err(Error::Shape(format!("guide dims {:?}, decoder expects {:?}", g.dims(), self.config.output)))
            }
            _ => Ok(()),
        }
    }

    pub fn decode(&self, e: &Embedding, guide: Option<&Image>) -> Result<Image> {
        Ok(self.forward(e, guide)?.output)
    }

    pub fn forward(&self, e: &Embedding, guide: Option<&Image>) -> Result<DecodeTrace> {
        self.check_inputs(e, guide)?;
        let input = e.values().clone();
        let gtrace = match (&self.guide, guide) {
            (Some(branch), Some(g)) => {
                let padded = branch.pad.forward(g)?;
                let mut pre = Vec::with_capacity(DECONV_STAGES);
                let mut acts = Vec::with_capacity(DECONV_STAGES);
                let mut x = padded.clone();
                for conv in &branch.convs {
                    let z = conv.forward(&x)?;
                    x = relu(&z);
                    pre.push(z);
                    acts.push(x.clone());
                }
                Some(GuideTrace { padded, pre, acts, merge_in: Tensor::zeros(&[1]) })
            }
            _ => None,
        };
        let fc_out = self.fc.forward(&input)?;
        let mut x = relu(&fc_out);
        let mut stage_in = Vec::with_capacity(DECONV_STAGES);
        let mut deconv_out = Vec::with_capacity(DECONV_STAGES);
        for (i, deconv) in self.deconvs.iter().enumerate() {
            if let Some(gt) = &gtrace {
                x = concat_channels(&x, &gt.acts[DECONV_STAGES - 1 - i])?;
            }
            let z = deconv.forward(&x)?;
            stage_in.push(x);
            x = if i + 1 < DECONV_STAGES { relu(&z) } else { z.clone() };
            deconv_out.push(z);
        }
        let mut gtrace = gtrace;
        if let (Some(branch), Some(gt)) = (&self.guide, &mut gtrace) {
            gt.merge_in = concat_channels(&x, &gt.padded)?;
            x = branch.merge.forward(&gt.merge_in)?;
        }
        if let Some(crop) = &self.crop {
            x = crop.forward(&x)?;
        }
        let output = x.clamp(0.0, 1.0);
        Ok(DecodeTrace { input, fc_out, stage_in, deconv_out, guide: gtrace, pre_clip: x, output })
    }

    /// Parameter gradients (in [`DecoderNet::params`] order) of
    /// `⟨output, upstream⟩`. The clip passes gradient only where its input
    /// lies in `[0, 1]`.
    pub fn backward(&self, trace: &DecodeTrace, upstream: &Tensor) -> Result<Vec<Tensor>> {
        if upstream.dims() != trace.output.dims() {
            return Err(Error::Shape(format!(
                "upstream dims {:?}, decoder output {:?}",
                upstream.dims(),
                trace.output.dims()
            )));
        }
        let pass: Vec<f64> = trace
            .pre_clip
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&z, &u)| if (0.0..=1.0).contains(&z) { u } else { 0.0 })
            .collect();
        let mut g = Tensor::new(upstream.dims().to_vec(), pass)?;
        if let Some(crop) = &self.crop {
            g = crop.backward(&g)?;
        }
        let out_c = self.config.output[2];
        let mut merge_grads = None;
        if let (Some(branch), Some(gt)) = (&self.guide, &trace.guide) {
            let (gm, pg) = branch.merge.backward(&gt.merge_in, &g)?;
            merge_grads = pg;
            g = split_channels(&gm, out_c)?.0;
        }
        let mut enc_seed: Vec<Option<Tensor>> = vec![None; DECONV_STAGES];
        let mut deconv_grads = Vec::with_capacity(DECONV_STAGES);
        for i in (0..DECONV_STAGES).rev() {
            let (gin, pg) = self.deconvs[i].backward(&trace.stage_in[i], &g)?;
            deconv_grads.push(pg.expect("deconv has params"));
            let ga = if trace.guide.is_some() {
                let (ga, gh) = split_channels(&gin, self.config.filters)?;
                enc_seed[DECONV_STAGES - 1 - i] = Some(gh);
                ga
            } else {
                gin
            };
            let pre = if i == 0 { &trace.fc_out } else { &trace.deconv_out[i - 1] };
            g = relu_backward(pre, &ga)?;
        }
        deconv_grads.reverse();
        let (_, fc_grads) = self.fc.backward(&trace.input, &g)?;
        let mut all: Vec<ParamGrads> = Vec::new();
        all.push(fc_grads.expect("fc has params"));
        all.extend(deconv_grads);
        if let (Some(branch), Some(gt)) = (&self.guide, &trace.guide) {
            let mut conv_grads = Vec::with_capacity(DECONV_STAGES);
            let mut carry: Option<Tensor> = None;
            for j in (0..DECONV_STAGES).rev() {
                let mut ga = enc_seed[j].take().expect("every stage concatenates");
                if let Some(c) = carry.take() {
                    ga.axpy(1.0, &c)?;
                }
                let gz = relu_backward(&gt.pre[j], &ga)?;
                let input = if j == 0 { &gt.padded } else { &gt.acts[j - 1] };
                let (gx, pg) = branch.convs[j].backward(input, &gz)?;
                conv_grads.push(pg.expect("conv has params"));
                carry = Some(gx);
            }
            conv_grads.reverse();
            all.extend(conv_grads);
            all.push(merge_grads.expect("merge has params"));
        }
        Ok(all.into_iter().flat_map(|p| [p.kernel, p.bias]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(dim: usize, seed: u64) -> Embedding {
        let mut rng = Rng::new(seed);
        Embedding::unnormalized(Tensor::from_fn(&[dim], |_| rng.normal()).unwrap()).unwrap()
    }

    #[test]
    fn output_dims_and_range() {
        let net = DecoderNet::new(DecoderConfig::default()).unwrap();
        let y = net.decode(&emb(16, 1), None).unwrap();
        assert_eq!(y.dims(), &[32, 32, 3]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(net.param_count() > 0);
    }

    #[test]
    fn initial_output_is_gray() {
        let net = DecoderNet::new(DecoderConfig::default()).unwrap();
        let y = net.decode(&emb(16, 2), None).unwrap();
        for px in y.data().chunks_exact(3) {
            assert!((px[0] - px[1]).abs() < 1e-12 && (px[1] - px[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_constant_bias_image() {
        let net = DecoderNet::new(DecoderConfig::default()).unwrap();
        let params: Vec<Tensor> = net
            .params()
            .iter()
            .enumerate()
            .map(
                |(i, p)| {
                    if i == net.params().len() - 1 {
                        Tensor::filled(p.dims(), 0.3)
                    } else {
                        Tensor::zeros(p.dims())
                    }
                },
            )
            .collect();
        let net = DecoderNet::with_params(DecoderConfig::default(), params).unwrap();
        let a = net.decode(&emb(16, 3), None).unwrap();
        let b = net.decode(&emb(16, 4), None).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn crop_to_smaller_output() {
        let cfg = DecoderConfig { output: [28, 30, 3], ..DecoderConfig::default() };
        let net = DecoderNet::new(cfg).unwrap();
        assert_eq!(net.decode(&emb(16, 1), None).unwrap().dims(), &[28, 30, 3]);
        let bad = DecoderConfig { output: [40, 32, 3], ..DecoderConfig::default() };
        assert!(DecoderNet::new(bad).is_err());
    }

    #[test]
    fn guided_starts_near_guide() {
        let net = DecoderNet::new(DecoderConfig::default().guided(8)).unwrap();
        let g = crate::synth::face_image([32, 32, 3], crate::synth::FacePose::NEUTRAL).unwrap();
        assert!(matches!(net.decode(&emb(16, 1), None), Err(Error::Contract(_))));
        let y = net.decode(&emb(16, 1), Some(&g)).unwrap();
        assert_eq!(y.dims(), &[32, 32, 3]);
        let unguided = DecoderNet::new(DecoderConfig::default()).unwrap();
        assert!(matches!(unguided.decode(&emb(16, 1), Some(&g)), Err(Error::Contract(_))));
    }

    #[test]
    fn flag_mismatch_rejected() {
        let net = DecoderNet::new(DecoderConfig::default()).unwrap();
        let e = emb(16, 1).to_normalized().unwrap();
        assert!(matches!(net.decode(&e, None), Err(Error::Contract(_))));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut net = DecoderNet::new(DecoderConfig::default().guided(4)).unwrap();
        let flat = net.flat_params();
        assert_eq!(flat.len(), net.param_count());
        let doubled: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        net.set_flat_params(&doubled).unwrap();
        assert_eq!(net.flat_params(), doubled);
    }
}
