//! Stationary state of the TV-regularized problem in the limit of a large
//! TV weight, and an empirical check of it on a quadratic surrogate.
//!
//! For large `w` the image is nearly constant per channel: `p = p̄ + δp`.
//! The DC level solves `⟨∂L/∂p⟩(p̄) = 0`; the AC part follows from the
//! stationarity condition `α w S^{α/2−1} Δp = ∂L/∂p` linearized at `p̄`,
//! which is diagonal in Fourier space since the cyclic Laplacian has
//! eigenvalues `−4γ`, `γ = sin²(π n_x / W) + sin²(π n_y / H)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{reconstruct, Init, InvertJob, OptimizerKind};
use crate::error::{Error, Result};
use crate::numcore::{Image, Rng, Tensor};
use crate::objective::regularizers::{tv_energy_per_channel, tv_value_grad};
use crate::objective::{Evaluation, Objective, Term};

/// `L(p) = ½‖p − t‖² + w · R_TV(p)`: a closed-form stand-in for the
/// embedding loss.
#[derive(Clone, Debug)]
pub struct QuadraticSurrogate {
    pub target: Image,
    pub alpha: f64,
    pub tv_weight: f64,
}

impl Objective for QuadraticSurrogate {
    fn image_dims(&self) -> [usize; 3] {
        let d = self.target.dims();
        [d[0], d[1], d[2]]
    }

    fn base_weights(&self) -> Vec<f64> {
        vec![self.tv_weight]
    }

    fn evaluate(&self, p: &Image, weights: &[f64]) -> Result<Evaluation> {
        let &[w] = weights else {
            return Err(Error::Contract(format!("surrogate takes 1 weight, got {}", weights.len())));
        };
        let r = p.sub(&self.target)?;
        let data = 0.5 * r.dot(&r)?;
        let (tv, tv_grad) = tv_value_grad(p, self.alpha)?;
        let mut grad = r;
        grad.axpy(w, &tv_grad)?;
        Ok(Evaluation {
            total: data + w * tv,
            grad,
            terms: vec![Term { name: "distance".into(), value: data }, Term { name: "tv".into(), value: w * tv }],
            embedding: None,
        })
    }
}

/// `γ = sin²(π n_x / W) + sin²(π n_y / H)`.
pub fn fourier_gamma(nx: usize, ny: usize, width: usize, height: usize) -> f64 {
    let sx = (PI * nx as f64 / width as f64).sin();
    let sy = (PI * ny as f64 / height as f64).sin();
    sx * sx + sy * sy
}

#[derive(Clone, Debug)]
pub struct StationaryState {
    /// DC level per channel.
    pub mean: Vec<f64>,
    /// Zero-mean deviation from the DC level.
    pub delta: Image,
}

impl StationaryState {
    pub fn image(&self) -> Result<Image> {
        let (_, _, c) = self.delta.hwc()?;
        let mut d = self.delta.data().to_vec();
        for (i, v) in d.iter_mut().enumerate() {
            *v += self.mean[i % c];
        }
        Tensor::new(self.delta.dims().to_vec(), d)
    }
}

/// In-place 2-D DFT of a row-major `h × w` grid.
fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Asymptotic stationary state of [`QuadraticSurrogate`] for target `t`.
///
/// DC: `p̄ = mean(t)` per channel. AC, first order:
/// `δp̃′_n = −g̃_n / (4 α γ_n w)` with `g = ∂L/∂p (p̄) = p̄ − t` and
/// `p̃_n = (1/HW) Σ p e^{−2πi n·x}`; then `δp = C δp′` per channel with
/// `C = S(δp′)^{(2−α)/(2(α−1))}` (`S` = squared-difference energy), which
/// is 1 for `α = 2`.
pub fn asymptotic_stationary_state(target: &Image, alpha: f64, tv_weight: f64) -> Result<StationaryState> {
    if !(tv_weight > 0.0) || !tv_weight.is_finite() {
        return Err(Error::Invalid(format!("asymptotic expansion needs a positive TV weight, got {tv_weight}")));
    }
    if !(alpha > 1.0) {
        return Err(Error::Invalid(format!("TV exponent alpha must be > 1, got {alpha}")));
    }
    let (h, w, c) = target.hwc()?;
    let mean = target.channel_means()?;
    let n = (h * w) as f64;
    let mut delta = vec![0.0; h * w * c];
    let mut buf = vec![Complex64::default(); h * w];
    for ch in 0..c {
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex64::new(mean[ch] - target.data()[i * c + ch], 0.0);
        }
        fft2(&mut buf, h, w, false);
        for y in 0..h {
            for x in 0..w {
                let z = &mut buf[y * w + x];
                *z = if x == 0 && y == 0 {
                    Complex64::default()
                } else {
                    -(*z / n) / (4.0 * alpha * fourier_gamma(x, y, w, h) * tv_weight)
                };
            }
        }
        fft2(&mut buf, h, w, true);
        for (i, z) in buf.iter().enumerate() {
            delta[i * c + ch] = z.re;
        }
    }
    let mut delta = Tensor::new(vec![h, w, c], delta)?;
    if alpha != 2.0 {
        let energy = tv_energy_per_channel(&delta)?;
        let exponent = (2.0 - alpha) / (2.0 * (alpha - 1.0));
        let scale: Vec<f64> = energy.iter().map(|&s| if s > 0.0 { s.powf(exponent) } else { 0.0 }).collect();
        let d: Vec<f64> = delta.data().iter().enumerate().map(|(i, v)| v * scale[i % c]).collect();
        delta = Tensor::new(vec![h, w, c], d)?;
    }
    Ok(StationaryState { mean, delta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsRow {
    pub tv_weight: f64,
    pub iterations: usize,
    /// `max_c |mean_c(p_iter) − mean_c(t)|`.
    pub dc_error: f64,
    /// `‖δp‖₂` of the iterated state.
    pub ac_norm: f64,
    pub predicted_ac_norm: f64,
    /// `‖δp_iter − δp_pred‖₂ / ‖δp_iter‖₂`.
    pub relative_error: f64,
    /// Largest gradient entry at the final iterate.
    pub final_grad_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsReport {
    pub alpha: f64,
    pub size: usize,
    pub seed: u64,
    pub rows: Vec<AsymptoticsRow>,
}

impl AsymptoticsReport {
    /// `(‖δp‖ w)_k / (‖δp‖ w)_{k+1}` for consecutive rows; 1 means exact
    /// `1/w` scaling.
    pub fn scaling_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|r| (r[0].ac_norm * r[0].tv_weight) / (r[1].ac_norm * r[1].tv_weight)).collect()
    }

    pub fn errors_decrease(&self) -> bool {
        self.rows.windows(2).all(|r| r[1].relative_error < r[0].relative_error)
    }
}

fn remove_dc(p: &Image) -> Result<(Vec<f64>, Image)> {
    let (_, _, c) = p.hwc()?;
    let m = p.channel_means()?;
    let d = p.data().iter().enumerate().map(|(i, v)| v - m[i % c]).collect();
    Ok((m, Tensor::new(p.dims().to_vec(), d)?))
}

/// Runs gradient descent on [`QuadraticSurrogate`] for each TV weight and
/// compares the converged image with [`asymptotic_stationary_state`].
///
/// The target is uniform noise on a `size × size × 3` grid. For `α = 2` the
/// Hessian eigenvalues are `1 + 8γw ∈ [1, 1 + 16w]`, so SGD with
/// `μ = 1.5 / (1 + 16w)` is stable and the slowest (DC) mode contracts by
/// `1 − μ` per step; the iteration count is chosen to shrink it by `1e-10`.
pub fn verify_asymptotics(tv_weights: &[f64], size: usize, alpha: f64, seed: u64) -> Result<AsymptoticsReport> {
    let dims = [size, size, 3];
    let mut rng = Rng::new(seed);
    let target = Tensor::from_fn(&dims, |_| rng.uniform())?;
    let mut rows = Vec::with_capacity(tv_weights.len());
    for &w in tv_weights {
        let predicted = asymptotic_stationary_state(&target, alpha, w)?;
        let step_size = 1.5 / (1.0 + 16.0 * w);
        let iterations = ((1e10f64).ln() / step_size).ceil() as usize;
        let job = InvertJob {
            init: Init::Noise { seed: seed ^ 0xA5A5, amplitude: 0.5 },
            iterations,
            lpgn: None,
            clamp: false,
            cadence: iterations,
            optimizer: OptimizerKind::Sgd,
            step_size,
        };
        let surrogate = QuadraticSurrogate { target: target.clone(), alpha, tv_weight: w };
        let result = reconstruct(&job, &surrogate)?;
        let (dc, delta) = remove_dc(&result.image)?;
        let dc_error = dc.iter().zip(&predicted.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let diff = delta.sub(&predicted.delta)?;
        let final_grad_max = surrogate.evaluate(&result.image, &[w])?.grad.max_abs();
        if !final_grad_max.is_finite() || final_grad_max > 1e-6 {
            return Err(Error::Degenerate(format!(
                "surrogate descent did not converge at w = {w}: max |grad| = {final_grad_max:e}"
            )));
        }
        rows.push(AsymptoticsRow {
            tv_weight: w,
            iterations,
            dc_error,
            ac_norm: delta.norm(),
            predicted_ac_norm: predicted.delta.norm(),
            relative_error: diff.norm() / delta.norm(),
            final_grad_max,
        });
    }
    Ok(AsymptoticsReport { alpha, size, seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert!((fourier_gamma(1, 0, 4, 4) - 0.5).abs() < 1e-15);
        assert!((fourier_gamma(2, 2, 4, 4) - 2.0).abs() < 1e-15);
        assert_eq!(fourier_gamma(0, 0, 8, 8), 0.0);
    }

    #[test]
    fn constant_target_has_no_ac() {
        let t = Tensor::filled(&[8, 8, 3], 0.3);
        let s = asymptotic_stationary_state(&t, 2.0, 10.0).unwrap();
        assert!(s.delta.max_abs() < 1e-15);
        assert!(s.mean.iter().all(|m| (m - 0.3).abs() < 1e-15));
        let s = asymptotic_stationary_state(&t, 1.5, 10.0).unwrap();
        assert!(s.delta.max_abs() < 1e-15);
    }

    #[test]
    fn zero_weight_rejected() {
        let t = Tensor::filled(&[4, 4, 1], 0.3);
        assert!(matches!(asymptotic_stationary_state(&t, 2.0, 0.0), Err(Error::Invalid(_))));
    }

    #[test]
    fn prediction_is_inverse_linear_in_weight() {
        let mut rng = Rng::new(4);
        let t = Tensor::from_fn(&[8, 8, 2], |_| rng.uniform()).unwrap();
        let a = asymptotic_stationary_state(&t, 2.0, 50.0).unwrap();
        let b = asymptotic_stationary_state(&t, 2.0, 100.0).unwrap();
        assert!(a.delta.scale(0.5).unwrap().max_abs_diff(&b.delta).unwrap() < 1e-15);
    }

    #[test]
    fn single_mode_matches_hand_solution() {
        // t = cos(2πx/4) in one channel: g̃ = −½ at n = (±1, 0), so
        // δp′ = cos(2πx/4) / (4·2·γ·w) with γ = sin²(π/4) = ½.
        let t = Tensor::from_fn(&[4, 4, 1], |i| (2.0 * PI * (i % 4) as f64 / 4.0).cos()).unwrap();
        let w = 3.0;
        let s = asymptotic_stationary_state(&t, 2.0, w).unwrap();
        let expected = t.scale(1.0 / (8.0 * 0.5 * w)).unwrap();
        assert!(s.delta.max_abs_diff(&expected).unwrap() < 1e-14);
        assert!(s.mean[0].abs() < 1e-15);
    }

    #[test]
    fn predicted_state_is_stationary_to_leading_order() {
        // α = 2: exact stationary point solves (1 − 2wΔ) p = t; the
        // prediction leaves a residual of δp itself, O(1/w).
        let mut rng = Rng::new(9);
        let t = Tensor::from_fn(&[8, 8, 1], |_| rng.uniform()).unwrap();
        for w in [1e2, 1e3] {
            let s = asymptotic_stationary_state(&t, 2.0, w).unwrap();
            let p = s.image().unwrap();
            let g = QuadraticSurrogate { target: t.clone(), alpha: 2.0, tv_weight: w }.evaluate(&p, &[w]).unwrap().grad;
            assert!(g.sub(&s.delta).unwrap().max_abs() < 1e-12);
        }
    }
}
