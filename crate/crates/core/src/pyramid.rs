//! Laplacian pyramids with cyclic boundaries.
//!
//! `reduce` blurs with the separable binomial kernel `[1, 4, 6, 4, 1] / 16`
//! and keeps even rows and columns; `expand` inserts zeros between samples
//! and blurs with the same kernel scaled by 4, so constants are preserved
//! in both directions. With cyclic boundaries the blur is self-adjoint,
//! which gives `reduce* = expand / 4` and `expand* = 4 · reduce`.

use crate::error::{Error, Result};
use crate::numcore::{Image, Tensor};

const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Default guard added to band RMS values in [`lpgn`].
pub const LPGN_EPSILON: f64 = 1e-8;

/// Laplacian bands `L_0..L_{N-1}` (finest first) and the coarse residual `g_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub bands: Vec<Tensor>,
    pub top: Tensor,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.bands.len()
    }
}

/// Cyclic correlation with the binomial kernel along one spatial axis.
fn blur_axis(x: &Tensor, axis: usize, gain: f64) -> Tensor {
    let (h, w, c) = x.hwc().expect("rank-3");
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let n = if axis == 0 { h } else { w };
    for y in 0..h {
        for xx in 0..w {
            let pos = if axis == 0 { y } else { xx };
            let dst = &mut out[(y * w + xx) * c..][..c];
            for (t, &k) in KERNEL.iter().enumerate() {
                let q = (pos + n + t - 2) % n;
                let (sy, sx) = if axis == 0 { (q, xx) } else { (y, q) };
                let s = &src[(sy * w + sx) * c..][..c];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += gain * k * v;
                }
            }
        }
    }
    Tensor::from_parts(x.dims().to_vec(), out)
}

fn blur(x: &Tensor, gain: f64) -> Tensor {
    blur_axis(&blur_axis(x, 0, 1.0), 1, gain)
}

pub fn reduce(g: &Tensor) -> Result<Tensor> {
    let (h, w, c) = g.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("reduce needs even spatial dims, got {:?}", g.dims())));
    }
    let b = blur(g, 1.0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            out.extend_from_slice(&b.data()[(2 * y * w + 2 * x) * c..][..c]);
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}

pub fn expand(g: &Tensor) -> Result<Tensor> {
    let (h, w, c) = g.hwc()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut up = vec![0.0; oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            up[(2 * y * ow + 2 * x) * c..][..c].copy_from_slice(&g.data()[(y * w + x) * c..][..c]);
        }
    }
    Ok(blur(&Tensor::from_parts(vec![oh, ow, c], up), 4.0))
}

fn check_levels(p: &Tensor, levels: usize) -> Result<()> {
    let (h, w, _) = p.hwc()?;
    let f = 1usize << levels;
    if levels == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!(
            "pyramid with {levels} levels needs spatial dims divisible by {f}, got {:?}",
            p.dims()
        )));
    }
    Ok(())
}

/// `L_k = g_k − expand(g_{k+1})`, `g_{k+1} = reduce(g_k)`, `g_0 = p`.
pub fn build(p: &Image, levels: usize) -> Result<Pyramid> {
    check_levels(p, levels)?;
    let mut bands = Vec::with_capacity(levels);
    let mut g = p.clone();
    for _ in 0..levels {
        let next = reduce(&g)?;
        bands.push(g.sub(&expand(&next)?)?);
        g = next;
    }
    Ok(Pyramid { bands, top: g })
}

pub fn collapse(pyr: &Pyramid) -> Result<Image> {
    let mut g = pyr.top.clone();
    for band in pyr.bands.iter().rev() {
        g = band.add(&expand(&g)?)?;
    }
    Ok(g)
}

/// Adjoint of [`build`]: maps gradients with respect to every band and the
/// top residual to the gradient with respect to the image.
pub fn build_adjoint(band_grads: &[Tensor], top_grad: &Tensor) -> Result<Image> {
    let mut g = top_grad.clone();
    for lbar in band_grads.iter().rev() {
        // g_{k+1} also feeds L_k through −expand
        let expand_adj = reduce(lbar)?.scale(4.0)?;
        g = g.sub(&expand_adj)?;
        // g_{k+1} = reduce(g_k)
        let reduce_adj = expand(&g)?.scale(0.25)?;
        g = lbar.add(&reduce_adj)?;
    }
    Ok(g)
}

fn rms(t: &Tensor) -> f64 {
    t.norm() / (t.len() as f64).sqrt()
}

/// Laplacian-pyramid gradient normalization: every band and the residual of
/// the gradient's pyramid are rescaled to unit RMS (guarded by `epsilon`)
/// and the pyramid is collapsed again.
pub fn lpgn(grad: &Image, levels: usize, epsilon: f64) -> Result<Image> {
    let mut pyr = build(grad, levels)?;
    for band in pyr.bands.iter_mut() {
        *band = band.scale(1.0 / (rms(band) + epsilon))?;
    }
    pyr.top = pyr.top.scale(1.0 / (rms(&pyr.top) + epsilon))?;
    collapse(&pyr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0)).unwrap()
    }

    #[test]
    fn constants_preserved() {
        let c = Tensor::filled(&[8, 8, 2], 0.3);
        let r = reduce(&c).unwrap();
        assert_eq!(r.dims(), &[4, 4, 2]);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let e = expand(&c).unwrap();
        assert_eq!(e.dims(), &[16, 16, 2]);
        assert!(e.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let back = reduce(&expand(&c).unwrap()).unwrap();
        assert!(back.max_abs_diff(&c).unwrap() < 1e-15);
    }

    #[test]
    fn impulse_reduces_to_even_taps() {
        let mut d = vec![0.0; 64];
        d[0] = 1.0;
        let imp = Tensor::new(vec![8, 8, 1], d).unwrap();
        let r = reduce(&imp).unwrap();
        // even-phase taps of [1,4,6,4,1]/16 around index 0: 6/16 at 0, 1/16 at ±2
        let taps = |i: usize| match i {
            0 => 6.0 / 16.0,
            1 | 3 => 1.0 / 16.0,
            _ => 0.0,
        };
        for y in 0..4 {
            for x in 0..4 {
                assert!((r.at(y, x, 0) - taps(y) * taps(x)).abs() < 1e-15, "({y},{x})");
            }
        }
    }

    #[test]
    fn reduce_is_linear() {
        let p = random(&[8, 8, 3], 1);
        let a = reduce(&p.scale(2.5).unwrap()).unwrap();
        let b = reduce(&p).unwrap().scale(2.5).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(reduce(&Tensor::zeros(&[5, 4, 1])).is_err());
        assert!(build(&Tensor::zeros(&[12, 12, 1]), 3).is_err());
        assert!(build(&Tensor::zeros(&[8, 8, 1]), 0).is_err());
    }

    #[test]
    fn constant_image_pyramid() {
        let pyr = build(&Tensor::filled(&[16, 16, 3], 0.7), 3).unwrap();
        assert!(pyr.bands.iter().all(|b| b.max_abs() < 1e-15));
        assert!(pyr.top.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert_eq!(pyr.top.dims(), &[2, 2, 3]);
    }

    #[test]
    fn one_level_on_2x2_ramp() {
        // 2×2 single channel [[0,1],[2,3]]; cyclic period 2 folds the kernel
        // taps onto two phases: weight 6/16 + 2·1/16 = 1/2 on even offsets,
        // 2·4/16 = 1/2 on odd offsets.
        let p = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let pyr = build(&p, 1).unwrap();
        // reduce: blur then take (0,0): every pixel weighted 1/4 → mean 1.5
        assert!((pyr.top.data()[0] - 1.5).abs() < 1e-15);
        // expand of a 1×1 constant is constant 1.5; band = p − 1.5
        let expected = [-1.5, -0.5, 0.5, 1.5];
        for (b, e) in pyr.bands[0].data().iter().zip(expected) {
            assert!((b - e).abs() < 1e-15);
        }
        assert!(collapse(&pyr).unwrap().max_abs_diff(&p).unwrap() < 1e-15);
    }

    #[test]
    fn lpgn_of_zero_is_zero() {
        let z = Tensor::zeros(&[16, 16, 3]);
        assert_eq!(lpgn(&z, 3, LPGN_EPSILON).unwrap().max_abs(), 0.0);
    }
}
