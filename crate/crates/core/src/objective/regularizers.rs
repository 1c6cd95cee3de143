//! Image and activation regularizers, each returning its value and exact gradient.

use std::collections::BTreeMap;

use crate::embedder::LayerActivations;
use crate::error::{Error, Result};
use crate::numcore::{Image, Tensor};
use crate::pyramid;

/// Cyclic discrete Laplacian per channel:
/// `Δp(x, y) = p(x+1, y) + p(x−1, y) + p(x, y+1) + p(x, y−1) − 4 p(x, y)`.
pub fn laplacian(p: &Image) -> Result<Image> {
    let (h, w, c) = p.hwc()?;
    let d = p.data();
    let mut out = vec![0.0; d.len()];
    for y in 0..h {
        let (yu, yd) = ((y + h - 1) % h, (y + 1) % h);
        for x in 0..w {
            let (xl, xr) = ((x + w - 1) % w, (x + 1) % w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| d[(yy * w + xx) * c + ch];
                out[(y * w + x) * c + ch] = at(y, xl) + at(y, xr) + at(yu, x) + at(yd, x) - 4.0 * at(y, x);
            }
        }
    }
    Ok(Tensor::from_parts(p.dims().to_vec(), out))
}

/// Per-channel sum of squared differences to the cyclic one-pixel shifts
/// in x and y.
pub fn tv_energy_per_channel(p: &Image) -> Result<Vec<f64>> {
    let (h, w, c) = p.hwc()?;
    let d = p.data();
    let mut s = vec![0.0; c];
    for y in 0..h {
        let yd = (y + 1) % h;
        for x in 0..w {
            let xr = (x + 1) % w;
            for (ch, acc) in s.iter_mut().enumerate() {
                let v = d[(y * w + x) * c + ch];
                let dx = v - d[(y * w + xr) * c + ch];
                let dy = v - d[(yd * w + x) * c + ch];
                *acc += dx * dx + dy * dy;
            }
        }
    }
    Ok(s)
}

/// Total variation `Σ_c [‖p_c − S_x p_c‖² + ‖p_c − S_y p_c‖²]^{α/2}` with
/// cyclic shifts.
///
/// The gradient per channel is `−α S_c^{α/2−1} Δp_c`; for a constant
/// channel (`S_c = 0`) it is defined as zero.
pub fn tv_value_grad(p: &Image, alpha: f64) -> Result<(f64, Image)> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!("TV exponent alpha must be > 1, got {alpha}")));
    }
    let (_, _, c) = p.hwc()?;
    let energy = tv_energy_per_channel(p)?;
    let lap = laplacian(p)?;
    let factor: Vec<f64> =
        energy.iter().map(|&s| if s > 0.0 { -alpha * s.powf(alpha / 2.0 - 1.0) } else { 0.0 }).collect();
    let value = energy.iter().map(|&s| if s > 0.0 { s.powf(alpha / 2.0) } else { 0.0 }).sum();
    let mut g = lap.into_data();
    for px in g.chunks_exact_mut(c) {
        for (v, f) in px.iter_mut().zip(&factor) {
            *v *= f;
        }
    }
    let grad = Tensor::new(p.dims().to_vec(), g)?;
    Ok((value, grad))
}

/// Guiding-image term `w_G Σ_ℓ ‖a⁽ˡ⁾ − a_G⁽ˡ⁾‖²` and its gradient
/// `2 w_G (a⁽ˡ⁾ − a_G⁽ˡ⁾)` per layer.
pub fn guiding_value_grad(
    acts: &LayerActivations,
    guide_acts: &LayerActivations,
    layers: &[usize],
    weight: f64,
) -> Result<(f64, BTreeMap<usize, Tensor>)> {
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for &l in layers {
        let (a, g) = match (acts.get(&l), guide_acts.get(&l)) {
            (Some(a), Some(g)) => (a, g),
            _ => {
                return Err(Error::Contract(format!(
                    "guiding layer {l} missing from activations (have {:?} / {:?})",
                    acts.keys().collect::<Vec<_>>(),
                    guide_acts.keys().collect::<Vec<_>>()
                )))
            }
        };
        let diff = a.sub(g)?;
        value += weight * diff.dot(&diff)?;
        grads.insert(l, diff.scale(2.0 * weight)?);
    }
    Ok((value, grads))
}

/// Smoothed Gaussian activation prior
/// `Σ_n ν (a_n − v_n)² σ_max² / (σ_n² + ν σ_max²)`.
pub fn gauss_value_grad(a: &Tensor, mean: &Tensor, std: &Tensor, nu: f64) -> Result<(f64, Tensor)> {
    if a.dims() != mean.dims() || a.dims() != std.dims() {
        return Err(Error::Shape(format!(
            "gauss: activation {:?}, mean {:?}, std {:?}",
            a.dims(),
            mean.dims(),
            std.dims()
        )));
    }
    if !(nu > 0.0) {
        return Err(Error::Invalid(format!("gauss smoothing nu must be > 0, got {nu}")));
    }
    if std.data().iter().any(|&s| s < 0.0) {
        return Err(Error::Invalid("gauss standard deviations must be non-negative".into()));
    }
    let smax = std.max_abs();
    if smax <= 0.0 {
        return Err(Error::Degenerate("gauss layer has zero variance everywhere".into()));
    }
    let s2max = smax * smax;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(a.len());
    for ((&x, &v), &s) in a.data().iter().zip(mean.data()).zip(std.data()) {
        let coef = nu * s2max / (s * s + nu * s2max);
        value += coef * (x - v) * (x - v);
        grad.push(2.0 * coef * (x - v));
    }
    Ok((value, Tensor::new(a.dims().to_vec(), grad)?))
}

/// Pyramid spectrum term `Σ_n (‖L_n(p)‖ − N_L 2^{β n})²` over the `levels`
/// Laplacian bands `n = 0..levels`. The gradient goes through the pyramid
/// adjoint; a band with zero norm contributes no gradient.
pub fn lp_spectrum_value_grad(p: &Image, levels: usize, beta: f64, norm: f64) -> Result<(f64, Image)> {
    let pyr = pyramid::build(p, levels)?;
    let mut value = 0.0;
    let mut band_grads = Vec::with_capacity(levels);
    for (n, band) in pyr.bands.iter().enumerate() {
        let target = norm * 2f64.powf(beta * n as f64);
        let bn = band.norm();
        let r = bn - target;
        value += r * r;
        band_grads.push(if bn > 0.0 { band.scale(2.0 * r / bn)? } else { Tensor::zeros(band.dims()) });
    }
    let grad = pyramid::build_adjoint(&band_grads, &Tensor::zeros(pyr.top.dims()))?;
    Ok((value, grad))
}

/// Horizontal flip `F_x`.
pub fn flip_horizontal(p: &Image) -> Result<Image> {
    let (h, w, c) = p.hwc()?;
    let d = p.data();
    let mut out = Vec::with_capacity(d.len());
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&d[(y * w + (w - 1 - x)) * c..][..c]);
        }
    }
    Ok(Tensor::from_parts(p.dims().to_vec(), out))
}

/// Mirror-symmetry term `‖p − F_x p‖₂` (not squared). With `r = p − F_x p`
/// the gradient is `2 r / ‖r‖`, defined as zero for symmetric images.
pub fn mirror_value_grad(p: &Image) -> Result<(f64, Image)> {
    let r = p.sub(&flip_horizontal(p)?)?;
    let n = r.norm();
    let grad = if n > 0.0 { r.scale(2.0 / n)? } else { Tensor::zeros(p.dims()) };
    Ok((n, grad))
}
