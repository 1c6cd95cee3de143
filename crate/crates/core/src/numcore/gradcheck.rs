//! Central finite-difference gradient checking.
//!
//! The reported relative error is `max_i |analytic_i − numeric_i|` divided
//! by `max_i |numeric_i|`, i.e. the worst coordinate error measured against
//! the gradient's own scale. This stays meaningful when individual
//! coordinates are tiny, where a per-coordinate ratio would only measure
//! finite-difference round-off.

use crate::error::Result;
use crate::numcore::rng::Rng;

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_abs_err: f64,
    pub scale: f64,
    pub rel_err: f64,
    pub worst_index: usize,
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> Result<f64>, x: &[f64], i: usize, h: f64) -> Result<f64> {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp)?;
    xp[i] = x[i] - h;
    let fm = f(&xp)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Compares `analytic` against central differences of `f` at `x` over the
/// given coordinates (all coordinates when `coords` is `None`).
pub fn check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    h: f64,
) -> Result<GradCheck> {
    assert_eq!(x.len(), analytic.len());
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut max_abs_err = 0.0f64;
    let mut scale = 0.0f64;
    let mut worst_index = 0;
    for &i in coords {
        let num = central_difference(&mut f, x, i, h)?;
        let err = (num - analytic[i]).abs();
        if err > max_abs_err {
            max_abs_err = err;
            worst_index = i;
        }
        scale = scale.max(num.abs());
    }
    let rel_err = if scale > 0.0 { max_abs_err / scale } else { max_abs_err };
    Ok(GradCheck { checked: coords.len(), max_abs_err, scale, rel_err, worst_index })
}

/// `count` distinct coordinates out of `0..n`, chosen deterministically.
pub fn sample_coords(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}
