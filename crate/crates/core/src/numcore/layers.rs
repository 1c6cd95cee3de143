//! Differentiable layer primitives with hand-written backward passes.
//!
//! Convolutions are cross-correlations (no kernel flip) over `H×W×C`
//! tensors with kernels laid out `kh×kw×Cin×Cout`. Padding follows the
//! "same" rule: the output has `ceil(H / stride)` rows and the total zero
//! padding `max((out - 1) * stride + k - in, 0)` is split with the smaller
//! half before the first row. For stride 1 and odd `k` that is the usual
//! symmetric `(k - 1) / 2`; for stride 2 it is the "half" geometry. A
//! transposed convolution is the exact adjoint of the convolution mapping
//! its (larger) output back onto its input.

use crate::error::{Error, Result};
use crate::numcore::tensor::{first_non_finite, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Deconv,
    Fc,
    Relu,
    L2Norm,
    Crop,
    Pad,
    Concat,
}

/// Gradients of a parametrized layer's kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub kernel: Tensor,
    pub bias: Tensor,
}

fn same_pad_before(input: usize, output: usize, k: usize, stride: usize) -> usize {
    ((output - 1) * stride + k).saturating_sub(input) / 2
}

fn expect_dims(x: &Tensor, dims: &[usize], what: &str) -> Result<()> {
    if x.dims() != dims {
        return Err(Error::Shape(format!("{what} expects input dims {dims:?}, got {:?}", x.dims())));
    }
    Ok(())
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    match first_non_finite(t.data()) {
        Some(index) => Err(Error::NonFinite { context: what.into(), index }),
        None => Ok(t),
    }
}

/// Strided 2-D cross-correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
    input: [usize; 3],
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, input: [usize; 3]) -> Result<Self> {
        let kd = kernel.dims();
        if kd.len() != 4 {
            return Err(Error::Shape(format!("conv kernel must be kh×kw×Cin×Cout, got {kd:?}")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if kd[2] != input[2] {
            return Err(Error::Shape(format!(
                "conv kernel expects {} input channels, geometry declares {}",
                kd[2], input[2]
            )));
        }
        if bias.dims() != [kd[3]] {
            return Err(Error::Shape(format!(
                "conv bias dims {:?} do not match {} output channels",
                bias.dims(),
                kd[3]
            )));
        }
        Ok(Self { kernel, bias, stride, input })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input
    }

    pub fn output_dims(&self) -> [usize; 3] {
        let s = self.stride;
        [self.input[0].div_ceil(s), self.input[1].div_ceil(s), self.kernel.dims()[3]]
    }

    fn geometry(&self) -> Geometry {
        let kd = self.kernel.dims();
        let out = self.output_dims();
        Geometry {
            big: [self.input[0], self.input[1]],
            small: [out[0], out[1]],
            k: [kd[0], kd[1]],
            stride: self.stride,
            pad: [
                same_pad_before(self.input[0], out[0], kd[0], self.stride),
                same_pad_before(self.input[1], out[1], kd[1], self.stride),
            ],
            cin: kd[2],
            cout: kd[3],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_dims(x, &self.input, "conv2d")?;
        let g = self.geometry();
        let out = self.output_dims();
        let mut y = vec![0.0; out.iter().product()];
        for px in y.chunks_exact_mut(g.cout) {
            px.copy_from_slice(self.bias.data());
        }
        correlate(&g, x.data(), self.kernel.data(), &mut y);
        finite(Tensor::from_parts(out.to_vec(), y), "conv2d")
    }

    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, ParamGrads)> {
        expect_dims(x, &self.input, "conv2d backward")?;
        expect_dims(upstream, &self.output_dims(), "conv2d backward upstream")?;
        let g = self.geometry();
        let mut gx = vec![0.0; x.len()];
        scatter(&g, upstream.data(), self.kernel.data(), &mut gx, true);
        let gk = kernel_grad(&g, x.data(), upstream.data(), true);
        let gb = bias_grad(upstream.data(), g.cout);
        Ok((
            Tensor::from_parts(x.dims().to_vec(), gx),
            ParamGrads {
                kernel: Tensor::from_parts(self.kernel.dims().to_vec(), gk),
                bias: Tensor::from_parts(vec![g.cout], gb),
            },
        ))
    }
}

/// Transposed convolution: the adjoint of the strided convolution that maps
/// an `(s·H)×(s·W)` tensor onto `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv2d {
    kernel: Tensor,
    bias: Tensor,
    stride: usize,
    input: [usize; 3],
}

impl Deconv2d {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, input: [usize; 3]) -> Result<Self> {
        let kd = kernel.dims();
        if kd.len() != 4 {
            return Err(Error::Shape(format!("deconv kernel must be kh×kw×Cin×Cout, got {kd:?}")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if kd[2] != input[2] {
            return Err(Error::Shape(format!(
                "deconv kernel expects {} input channels, geometry declares {}",
                kd[2], input[2]
            )));
        }
        if bias.dims() != [kd[3]] {
            return Err(Error::Shape(format!(
                "deconv bias dims {:?} do not match {} output channels",
                bias.dims(),
                kd[3]
            )));
        }
        Ok(Self { kernel, bias, stride, input })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.input[0] * self.stride, self.input[1] * self.stride, self.kernel.dims()[3]]
    }

    fn geometry(&self) -> Geometry {
        let kd = self.kernel.dims();
        let out = self.output_dims();
        Geometry {
            big: [out[0], out[1]],
            small: [self.input[0], self.input[1]],
            k: [kd[0], kd[1]],
            stride: self.stride,
            pad: [
                same_pad_before(out[0], self.input[0], kd[0], self.stride),
                same_pad_before(out[1], self.input[1], kd[1], self.stride),
            ],
            cin: kd[2],
            cout: kd[3],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_dims(x, &self.input, "deconv2d")?;
        let g = self.geometry();
        let out = self.output_dims();
        let mut y = vec![0.0; out.iter().product()];
        for px in y.chunks_exact_mut(g.cout) {
            px.copy_from_slice(self.bias.data());
        }
        scatter(&g, x.data(), self.kernel.data(), &mut y, false);
        finite(Tensor::from_parts(out.to_vec(), y), "deconv2d")
    }

    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, ParamGrads)> {
        expect_dims(x, &self.input, "deconv2d backward")?;
        expect_dims(upstream, &self.output_dims(), "deconv2d backward upstream")?;
        let g = self.geometry();
        let mut gx = vec![0.0; x.len()];
        correlate_transposed_kernel(&g, upstream.data(), self.kernel.data(), &mut gx);
        let gk = kernel_grad(&g, upstream.data(), x.data(), false);
        let gb = bias_grad(upstream.data(), g.cout);
        Ok((
            Tensor::from_parts(x.dims().to_vec(), gx),
            ParamGrads {
                kernel: Tensor::from_parts(self.kernel.dims().to_vec(), gk),
                bias: Tensor::from_parts(vec![g.cout], gb),
            },
        ))
    }
}

/// Index bookkeeping shared by convolution and its transpose. `big` is the
/// spatial size of the convolution input, `small` of its output; `cin` and
/// `cout` are the kernel's third and fourth dims.
struct Geometry {
    big: [usize; 2],
    small: [usize; 2],
    k: [usize; 2],
    stride: usize,
    pad: [usize; 2],
    cin: usize,
    cout: usize,
}

impl Geometry {
    /// Big-grid coordinate touched by small-grid position `o` through tap `t`.
    #[inline]
    fn tap(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let i = (o * self.stride + t).checked_sub(self.pad[axis])?;
        (i < self.big[axis]).then_some(i)
    }
}

/// `small[o, j] += Σ big[tap(o), i] · K[t, i, j]` with kernel `kh×kw×cin×cout`.
fn correlate(g: &Geometry, big: &[f64], kernel: &[f64], small: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.small[0] {
        for ox in 0..g.small[1] {
            let out = &mut small[(oy * g.small[1] + ox) * cout..][..cout];
            for ky in 0..g.k[0] {
                let Some(iy) = g.tap(oy, ky, 0) else { continue };
                for kx in 0..g.k[1] {
                    let Some(ix) = g.tap(ox, kx, 1) else { continue };
                    let inp = &big[(iy * g.big[1] + ix) * cin..][..cin];
                    let kbase = (ky * g.k[1] + kx) * cin * cout;
                    for (ci, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * cout..][..cout];
                        for (o, &k) in out.iter_mut().zip(krow) {
                            *o += v * k;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter of small-grid values onto the big grid.
///
/// With `small_is_cout` the small grid carries the kernel's `cout` channels
/// and the big grid its `cin` channels (conv input gradient); otherwise the
/// small grid carries `cin` and the big grid `cout` (deconv forward).
fn scatter(g: &Geometry, small: &[f64], kernel: &[f64], big: &mut [f64], small_is_cout: bool) {
    let (cin, cout) = (g.cin, g.cout);
    let (cs, cb) = if small_is_cout { (cout, cin) } else { (cin, cout) };
    for oy in 0..g.small[0] {
        for ox in 0..g.small[1] {
            let sv = &small[(oy * g.small[1] + ox) * cs..][..cs];
            for ky in 0..g.k[0] {
                let Some(iy) = g.tap(oy, ky, 0) else { continue };
                for kx in 0..g.k[1] {
                    let Some(ix) = g.tap(ox, kx, 1) else { continue };
                    let bv = &mut big[(iy * g.big[1] + ix) * cb..][..cb];
                    let kbase = (ky * g.k[1] + kx) * cin * cout;
                    if small_is_cout {
                        // big[ci] += Σ_co small[co] K[ci, co]
                        for (ci, b) in bv.iter_mut().enumerate() {
                            let krow = &kernel[kbase + ci * cout..][..cout];
                            *b += krow.iter().zip(sv).map(|(k, s)| k * s).sum::<f64>();
                        }
                    } else {
                        // big[co] += Σ_ci small[ci] K[ci, co]
                        for (ci, &s) in sv.iter().enumerate() {
                            if s == 0.0 {
                                continue;
                            }
                            let krow = &kernel[kbase + ci * cout..][..cout];
                            for (b, &k) in bv.iter_mut().zip(krow) {
                                *b += s * k;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Deconv input gradient: `small[o, ci] += Σ big[tap(o), co] · K[t, ci, co]`.
fn correlate_transposed_kernel(g: &Geometry, big: &[f64], kernel: &[f64], small: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.small[0] {
        for ox in 0..g.small[1] {
            let out = &mut small[(oy * g.small[1] + ox) * cin..][..cin];
            for ky in 0..g.k[0] {
                let Some(iy) = g.tap(oy, ky, 0) else { continue };
                for kx in 0..g.k[1] {
                    let Some(ix) = g.tap(ox, kx, 1) else { continue };
                    let bv = &big[(iy * g.big[1] + ix) * cout..][..cout];
                    let kbase = (ky * g.k[1] + kx) * cin * cout;
                    for (ci, o) in out.iter_mut().enumerate() {
                        let krow = &kernel[kbase + ci * cout..][..cout];
                        *o += krow.iter().zip(bv).map(|(k, b)| k * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

/// `dK[t, ci, co] = Σ_o cin_side[tap(o), ci] · cout_side[o, co]` (conv), or
/// with the roles of the grids swapped for deconv (`big_is_cin = false`).
fn kernel_grad(g: &Geometry, a: &[f64], b: &[f64], big_is_cin: bool) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut gk = vec![0.0; g.k[0] * g.k[1] * cin * cout];
    for oy in 0..g.small[0] {
        for ox in 0..g.small[1] {
            for ky in 0..g.k[0] {
                let Some(iy) = g.tap(oy, ky, 0) else { continue };
                for kx in 0..g.k[1] {
                    let Some(ix) = g.tap(ox, kx, 1) else { continue };
                    let big_idx = iy * g.big[1] + ix;
                    let small_idx = oy * g.small[1] + ox;
                    // conv: a = input (big, cin), b = upstream (small, cout)
                    // deconv: a = upstream (big, cout), b = input (small, cin)
                    let (vin, vout) = if big_is_cin {
                        (&a[big_idx * cin..][..cin], &b[small_idx * cout..][..cout])
                    } else {
                        (&b[small_idx * cin..][..cin], &a[big_idx * cout..][..cout])
                    };
                    let kbase = (ky * g.k[1] + kx) * cin * cout;
                    for (ci, &vi) in vin.iter().enumerate() {
                        if vi == 0.0 {
                            continue;
                        }
                        let row = &mut gk[kbase + ci * cout..][..cout];
                        for (r, &vo) in row.iter_mut().zip(vout) {
                            *r += vi * vo;
                        }
                    }
                }
            }
        }
    }
    gk
}

fn bias_grad(upstream: &[f64], c: usize) -> Vec<f64> {
    let mut gb = vec![0.0; c];
    for px in upstream.chunks_exact(c) {
        for (b, v) in gb.iter_mut().zip(px) {
            *b += v;
        }
    }
    gb
}

/// Affine map `y = Kᵀ·flatten(x) + b`, reshaped to `output` dims.
#[derive(Clone, Debug, PartialEq)]
pub struct FullyConnected {
    kernel: Tensor,
    bias: Tensor,
    input: Vec<usize>,
    output: Vec<usize>,
}

impl FullyConnected {
    /// `kernel` is `n_in × n_out`; `output` must hold `n_out` elements.
    pub fn new(kernel: Tensor, bias: Tensor, input: Vec<usize>, output: Vec<usize>) -> Result<Self> {
        let kd = kernel.dims();
        if kd.len() != 2 {
            return Err(Error::Shape(format!("fc kernel must be n_in×n_out, got {kd:?}")));
        }
        let n_in: usize = input.iter().product();
        let n_out: usize = output.iter().product();
        if kd[0] != n_in || kd[1] != n_out {
            return Err(Error::Shape(format!("fc kernel {kd:?} does not map {input:?} onto {output:?}")));
        }
        if bias.dims() != [n_out] {
            return Err(Error::Shape(format!("fc bias dims {:?}, expected [{n_out}]", bias.dims())));
        }
        Ok(Self { kernel, bias, input, output })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.kernel.dims()[0] {
            return Err(Error::Shape(format!("fc expects {} inputs, got dims {:?}", self.kernel.dims()[0], x.dims())));
        }
        let n_out = self.kernel.dims()[1];
        let mut y = self.bias.data().to_vec();
        let k = self.kernel.data();
        for (i, &v) in x.data().iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, &w) in y.iter_mut().zip(&k[i * n_out..][..n_out]) {
                *o += v * w;
            }
        }
        finite(Tensor::from_parts(self.output.clone(), y), "fully_connected")
    }

    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, ParamGrads)> {
        let n_out = self.kernel.dims()[1];
        if x.len() != self.kernel.dims()[0] || upstream.len() != n_out {
            return Err(Error::Shape(format!(
                "fc backward: input {:?} / upstream {:?} vs kernel {:?}",
                x.dims(),
                upstream.dims(),
                self.kernel.dims()
            )));
        }
        let k = self.kernel.data();
        let g = upstream.data();
        let gx: Vec<f64> =
            (0..x.len()).map(|i| k[i * n_out..][..n_out].iter().zip(g).map(|(w, u)| w * u).sum()).collect();
        let mut gk = vec![0.0; k.len()];
        for (i, &v) in x.data().iter().enumerate() {
            for (r, &u) in gk[i * n_out..][..n_out].iter_mut().zip(g) {
                *r = v * u;
            }
        }
        Ok((
            Tensor::from_parts(x.dims().to_vec(), gx),
            ParamGrads {
                kernel: Tensor::from_parts(self.kernel.dims().to_vec(), gk),
                bias: Tensor::from_parts(vec![n_out], g.to_vec()),
            },
        ))
    }
}

/// Centered spatial crop of an `H×W×C` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    input: [usize; 3],
    out_hw: [usize; 2],
}

/// Centered zero padding of an `H×W×C` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Pad {
    input: [usize; 3],
    out_hw: [usize; 2],
}

fn window_copy(
    src: &[f64],
    src_hw: [usize; 2],
    dst: &mut [f64],
    dst_hw: [usize; 2],
    c: usize,
    offset: [usize; 2],
    src_is_big: bool,
) {
    // Copies the small grid into/out of the big grid at `offset`.
    let small_hw = if src_is_big { dst_hw } else { src_hw };
    for y in 0..small_hw[0] {
        for x in 0..small_hw[1] {
            let (sy, sx, dy, dx) =
                if src_is_big { (y + offset[0], x + offset[1], y, x) } else { (y, x, y + offset[0], x + offset[1]) };
            let s = &src[(sy * src_hw[1] + sx) * c..][..c];
            dst[(dy * dst_hw[1] + dx) * c..][..c].copy_from_slice(s);
        }
    }
}

impl Crop {
    pub fn new(input: [usize; 3], out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || out_h > input[0] || out_w > input[1] {
            return Err(Error::Shape(format!("cannot crop {input:?} to {out_h}×{out_w}")));
        }
        Ok(Self { input, out_hw: [out_h, out_w] })
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.out_hw[0], self.out_hw[1], self.input[2]]
    }

    fn offset(&self) -> [usize; 2] {
        [(self.input[0] - self.out_hw[0]) / 2, (self.input[1] - self.out_hw[1]) / 2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_dims(x, &self.input, "crop")?;
        let out = self.output_dims();
        let mut y = vec![0.0; out.iter().product()];
        let hw = [self.input[0], self.input[1]];
        window_copy(x.data(), hw, &mut y, self.out_hw, self.input[2], self.offset(), true);
        Ok(Tensor::from_parts(out.to_vec(), y))
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        expect_dims(upstream, &self.output_dims(), "crop backward")?;
        let mut g = vec![0.0; self.input.iter().product()];
        let hw = [self.input[0], self.input[1]];
        window_copy(upstream.data(), self.out_hw, &mut g, hw, self.input[2], self.offset(), false);
        Ok(Tensor::from_parts(self.input.to_vec(), g))
    }
}

impl Pad {
    pub fn new(input: [usize; 3], out_h: usize, out_w: usize) -> Result<Self> {
        if out_h < input[0] || out_w < input[1] {
            return Err(Error::Shape(format!("cannot pad {input:?} to {out_h}×{out_w}")));
        }
        Ok(Self { input, out_hw: [out_h, out_w] })
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.out_hw[0], self.out_hw[1], self.input[2]]
    }

    fn offset(&self) -> [usize; 2] {
        [(self.out_hw[0] - self.input[0]) / 2, (self.out_hw[1] - self.input[1]) / 2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_dims(x, &self.input, "pad")?;
        let out = self.output_dims();
        let mut y = vec![0.0; out.iter().product()];
        let hw = [self.input[0], self.input[1]];
        window_copy(x.data(), hw, &mut y, self.out_hw, self.input[2], self.offset(), false);
        Ok(Tensor::from_parts(out.to_vec(), y))
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        expect_dims(upstream, &self.output_dims(), "pad backward")?;
        let mut g = vec![0.0; self.input.iter().product()];
        let hw = [self.input[0], self.input[1]];
        window_copy(upstream.data(), self.out_hw, &mut g, hw, self.input[2], self.offset(), true);
        Ok(Tensor::from_parts(self.input.to_vec(), g))
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.dims().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// ReLU backward; the subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.dims() != upstream.dims() {
        return Err(Error::Shape(format!("relu backward: input {:?} vs upstream {:?}", x.dims(), upstream.dims())));
    }
    let g = x.data().iter().zip(upstream.data()).map(|(&v, &u)| if v > 0.0 { u } else { 0.0 }).collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), g))
}

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// `‖x‖₂` without overflow for entries near `f64::MAX.sqrt()` and beyond.
fn stable_norm(x: &Tensor) -> f64 {
    let n = x.norm();
    if n.is_finite() {
        return n;
    }
    let m = x.max_abs();
    if !m.is_finite() || m == 0.0 {
        return n;
    }
    m * x.data().iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = stable_norm(x);
    if n <= MIN_NORM {
        return Err(Error::Degenerate(format!("cannot normalize a vector of norm {n:e}")));
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), x.data().iter().map(|v| v / n).collect()))
}

/// Backward of `y = x / ‖x‖`: `(g − y (y·g)) / ‖x‖`.
pub fn l2_normalize_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.len() != upstream.len() {
        return Err(Error::Shape(format!(
            "l2 normalize backward: input {:?} vs upstream {:?}",
            x.dims(),
            upstream.dims()
        )));
    }
    let n = stable_norm(x);
    if n <= MIN_NORM {
        return Err(Error::Degenerate(format!("cannot normalize a vector of norm {n:e}")));
    }
    let yg: f64 = x.data().iter().zip(upstream.data()).map(|(a, g)| a * g).sum::<f64>() / n;
    let g = x.data().iter().zip(upstream.data()).map(|(&a, &u)| (u - a / n * yg) / n).collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), g))
}

/// Depth (channel) concatenation of two tensors with equal spatial dims.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = a.hwc()?;
    let (hb, wb, cb) = b.hwc()?;
    if (h, w) != (hb, wb) {
        return Err(Error::Shape(format!("concat needs equal spatial dims, got {:?} and {:?}", a.dims(), b.dims())));
    }
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Ok(Tensor::from_parts(vec![h, w, ca + cb], out))
}

/// Splits a concatenated gradient back into its `ca`- and remaining-channel parts.
pub fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = g.hwc()?;
    if ca == 0 || ca >= c {
        return Err(Error::Shape(format!("cannot split {c} channels at {ca}")));
    }
    let cb = c - ca;
    let mut a = Vec::with_capacity(h * w * ca);
    let mut b = Vec::with_capacity(h * w * cb);
    for px in g.data().chunks_exact(c) {
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    Ok((Tensor::from_parts(vec![h, w, ca], a), Tensor::from_parts(vec![h, w, cb], b)))
}

/// One element of a sequential network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Deconv(Deconv2d),
    Fc(FullyConnected),
    Relu,
    L2Norm,
    Crop(Crop),
    Pad(Pad),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Deconv(_) => LayerKind::Deconv,
            Layer::Fc(_) => LayerKind::Fc,
            Layer::Relu => LayerKind::Relu,
            Layer::L2Norm => LayerKind::L2Norm,
            Layer::Crop(_) => LayerKind::Crop,
            Layer::Pad(_) => LayerKind::Pad,
        }
    }

    /// Output dims for the given input dims, or a shape error.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let check = |declared: &[usize], what: &str| {
            if input != declared {
                Err(Error::Shape(format!("{what} declared for {declared:?}, got {input:?}")))
            } else {
                Ok(())
            }
        };
        match self {
            Layer::Conv(l) => check(&l.input, "conv").map(|_| l.output_dims().to_vec()),
            Layer::Deconv(l) => check(&l.input, "deconv").map(|_| l.output_dims().to_vec()),
            Layer::Fc(l) => {
                if input.iter().product::<usize>() != l.kernel.dims()[0] {
                    Err(Error::Shape(format!("fc expects {} inputs, got {input:?}", l.kernel.dims()[0])))
                } else {
                    Ok(l.output.clone())
                }
            }
            Layer::Relu | Layer::L2Norm => Ok(input.to_vec()),
            Layer::Crop(l) => check(&l.input, "crop").map(|_| l.output_dims().to_vec()),
            Layer::Pad(l) => check(&l.input, "pad").map(|_| l.output_dims().to_vec()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Deconv(l) => l.forward(x),
            Layer::Fc(l) => l.forward(x),
            Layer::Relu => Ok(relu(x)),
            Layer::L2Norm => l2_normalize(x),
            Layer::Crop(l) => l.forward(x),
            Layer::Pad(l) => l.forward(x),
        }
    }

    /// Gradient with respect to the input (and parameters, if any) given the
    /// forward input `x` and the upstream gradient of the output.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, Option<ParamGrads>)> {
        match self {
            Layer::Conv(l) => l.backward(x, upstream).map(|(g, p)| (g, Some(p))),
            Layer::Deconv(l) => l.backward(x, upstream).map(|(g, p)| (g, Some(p))),
            Layer::Fc(l) => l.backward(x, upstream).map(|(g, p)| (g, Some(p))),
            Layer::Relu => relu_backward(x, upstream).map(|g| (g, None)),
            Layer::L2Norm => l2_normalize_backward(x, upstream).map(|g| (g, None)),
            Layer::Crop(l) => l.backward(upstream).map(|g| (g, None)),
            Layer::Pad(l) => l.backward(upstream).map(|g| (g, None)),
        }
    }

    /// Kernel and bias, for parametrized layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv(l) => Some((&l.kernel, &l.bias)),
            Layer::Deconv(l) => Some((&l.kernel, &l.bias)),
            Layer::Fc(l) => Some((&l.kernel, &l.bias)),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv(l) => Some((&mut l.kernel, &mut l.bias)),
            Layer::Deconv(l) => Some((&mut l.kernel, &mut l.bias)),
            Layer::Fc(l) => Some((&mut l.kernel, &mut l.bias)),
            _ => None,
        }
    }

    /// Declared stride for convolutional layers.
    pub fn stride(&self) -> Option<usize> {
        match self {
            Layer::Conv(l) => Some(l.stride),
            Layer::Deconv(l) => Some(l.stride),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn random(dims: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0)).unwrap()
    }

    #[test]
    fn identity_kernel_conv() {
        let mut rng = Rng::new(1);
        let x = random(&[5, 4, 1], &mut rng);
        let conv =
            Conv2d::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), Tensor::zeros(&[1]), 1, [5, 4, 1]).unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn box_filter_corner_is_four_ninths() {
        let c = 0.7;
        let x = Tensor::filled(&[5, 5, 1], c);
        let conv = Conv2d::new(Tensor::filled(&[3, 3, 1, 1], 1.0 / 9.0), Tensor::zeros(&[1]), 1, [5, 5, 1]).unwrap();
        let y = conv.forward(&x).unwrap();
        assert!((y.at(2, 2, 0) - c).abs() < 1e-15);
        assert!((y.at(0, 0, 0) - 4.0 * c / 9.0).abs() < 1e-15);
        assert!((y.at(4, 4, 0) - 4.0 * c / 9.0).abs() < 1e-15);
        assert!((y.at(0, 2, 0) - 6.0 * c / 9.0).abs() < 1e-15);
    }

    #[test]
    fn stride_two_block_sums() {
        let x = Tensor::from_fn(&[4, 4, 1], |i| i as f64).unwrap();
        let conv = Conv2d::new(Tensor::filled(&[2, 2, 1, 1], 1.0), Tensor::zeros(&[1]), 2, [4, 4, 1]).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 2, 1]);
        // direct summation of each 2×2 block
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x.at(2 * by + dy, 2 * bx + dx, 0);
                    }
                }
                assert_eq!(y.at(by, bx, 0), s);
            }
        }
    }

    #[test]
    fn deconv_scatters_single_tap() {
        let k = 2.5;
        let d =
            Deconv2d::new(Tensor::new(vec![1, 1, 1, 1], vec![k]).unwrap(), Tensor::zeros(&[1]), 2, [1, 1, 1]).unwrap();
        let y = d.forward(&Tensor::filled(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(y.data(), &[k, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn deconv_of_zero_is_bias() {
        let mut rng = Rng::new(2);
        let d = Deconv2d::new(random(&[5, 5, 3, 2], &mut rng), Tensor::vector(&[0.5, -1.0]).unwrap(), 2, [3, 3, 3])
            .unwrap();
        let y = d.forward(&Tensor::zeros(&[3, 3, 3])).unwrap();
        assert_eq!(y.dims(), &[6, 6, 2]);
        for px in y.data().chunks(2) {
            assert_eq!(px, &[0.5, -1.0]);
        }
    }

    #[test]
    fn fc_affine() {
        let fc = FullyConnected::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::vector(&[1.0, 1.0]).unwrap(),
            vec![2],
            vec![2],
        )
        .unwrap();
        let y = fc.forward(&Tensor::vector(&[1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn relu_values_and_mask() {
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::vector(&[1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let neg = Tensor::filled(&[2, 2, 1], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2_normalize_cases() {
        let y = l2_normalize(&Tensor::vector(&[3.0, 4.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&y).unwrap(), y);
        assert!(matches!(l2_normalize(&Tensor::vector(&[0.0, 1e-13]).unwrap()), Err(Error::Degenerate(_))));
        let huge = l2_normalize(&Tensor::vector(&[3e300, 4e300]).unwrap()).unwrap();
        assert!((huge.data()[0] - 0.6).abs() < 1e-15 && (huge.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn crop_pad_roundtrip_and_adjoint() {
        let mut rng = Rng::new(5);
        let x = random(&[5, 6, 2], &mut rng);
        let pad = Pad::new([5, 6, 2], 8, 9).unwrap();
        let crop = Crop::new([8, 9, 2], 5, 6).unwrap();
        let padded = pad.forward(&x).unwrap();
        assert_eq!(padded.dims(), &[8, 9, 2]);
        assert_eq!(crop.forward(&padded).unwrap(), x);
        // ⟨pad(x), y⟩ = ⟨x, pad*(y)⟩
        let y = random(&[8, 9, 2], &mut rng);
        let lhs = padded.dot(&y).unwrap();
        let rhs = x.dot(&pad.backward(&y).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(Crop::new([4, 4, 1], 5, 4).is_err());
        assert!(Pad::new([4, 4, 1], 3, 4).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = Rng::new(9);
        let a = random(&[3, 2, 2], &mut rng);
        let b = random(&[3, 2, 3], &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.dims(), &[3, 2, 5]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
        assert!(concat_channels(&Tensor::zeros(&[2, 2, 1]), &Tensor::zeros(&[3, 2, 1])).is_err());
    }

    #[test]
    fn construction_rejects_inconsistent_geometry() {
        assert!(Conv2d::new(Tensor::zeros(&[3, 3, 2, 4]), Tensor::zeros(&[4]), 1, [8, 8, 3]).is_err());
        assert!(Conv2d::new(Tensor::zeros(&[3, 3, 3, 4]), Tensor::zeros(&[3]), 1, [8, 8, 3]).is_err());
        assert!(Conv2d::new(Tensor::zeros(&[3, 3, 3]), Tensor::zeros(&[3]), 1, [8, 8, 3]).is_err());
        assert!(FullyConnected::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[2]), vec![5], vec![2]).is_err());
        let conv = Conv2d::new(Tensor::zeros(&[3, 3, 3, 4]), Tensor::zeros(&[4]), 2, [8, 8, 3]).unwrap();
        let err = conv.forward(&Tensor::zeros(&[8, 7, 3])).unwrap_err();
        assert!(err.to_string().contains("[8, 7, 3]"));
    }
}
