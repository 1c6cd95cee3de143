//! Procedural test imagery: random smooth images and a face-like blob scene.

use crate::error::Result;
use crate::numcore::{Image, Rng, Tensor};
use crate::pyramid;

/// A random smooth image: uniform noise at 1/8 resolution, expanded three
/// times with the binomial pyramid kernel. Values stay in `[0, 1]` because
/// each expanded pixel is a convex combination of coarse pixels.
pub fn smooth_image(rng: &mut Rng, dims: [usize; 3]) -> Result<Image> {
    let [h, w, c] = dims;
    let (ch, cw) = ((h / 8).max(1), (w / 8).max(1));
    let mut img = Tensor::from_fn(&[ch, cw, c], |_| rng.uniform())?;
    while img.dims()[0] < h || img.dims()[1] < w {
        img = pyramid::expand(&img)?;
    }
    Ok(img.clamp(0.0, 1.0))
}

/// Uniform noise `center ± amplitude`, clipped to `[0, 1]`.
pub fn noise_image(rng: &mut Rng, dims: [usize; 3], center: f64, amplitude: f64) -> Result<Image> {
    Tensor::from_fn(&dims, |_| (center + rng.uniform_range(-amplitude, amplitude)).clamp(0.0, 1.0))
}

/// A soft disc of `color` on a mid-gray background. Center and radius are
/// fractions of the image size.
pub fn blob_image(dims: [usize; 3], cy: f64, cx: f64, radius: f64, color: [f64; 3]) -> Result<Image> {
    let [h, w, c] = dims;
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5) / h as f64 - cy;
            let dx = (x as f64 + 0.5) / w as f64 - cx;
            let r = (dy * dy + dx * dx).sqrt() / radius;
            let a = 1.0 / (1.0 + (8.0 * (r - 1.0)).exp());
            for ch in 0..c {
                data.push(0.5 * (1.0 - a) + color[ch % 3] * a);
            }
        }
    }
    Tensor::new(dims.to_vec(), data)
}

/// Parameters of one synthetic "face" frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FacePose {
    /// Center offset in fractions of the image size.
    pub dy: f64,
    pub dx: f64,
    /// In-plane rotation, radians.
    pub angle: f64,
    /// Mouth opening in `[0, 1]`.
    pub mouth: f64,
}

impl FacePose {
    pub const NEUTRAL: FacePose = FacePose { dy: 0.0, dx: 0.0, angle: 0.0, mouth: 0.3 };
}

fn soft(d: f64, sharp: f64) -> f64 {
    1.0 / (1.0 + (sharp * d).exp())
}

/// A face-like scene: skin-toned oval with two dark eyes and a mouth on a
/// blue-gray background.
pub fn face_image(dims: [usize; 3], pose: FacePose) -> Result<Image> {
    let [h, w, c] = dims;
    let (sin, cos) = pose.angle.sin_cos();
    let bg = [0.35, 0.4, 0.5];
    let skin = [0.85, 0.65, 0.5];
    let feature = [0.15, 0.1, 0.1];
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let py = (y as f64 + 0.5) / h as f64 - 0.5 - pose.dy;
            let px = (x as f64 + 0.5) / w as f64 - 0.5 - pose.dx;
            // rotate into the face frame
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;
            let face = soft(((u / 0.3).powi(2) + (v / 0.38).powi(2)).sqrt() - 1.0, 12.0);
            let eye = |eu: f64| soft((((u - eu) / 0.06).powi(2) + ((v + 0.1) / 0.045).powi(2)).sqrt() - 1.0, 6.0);
            let eyes = eye(-0.12).max(eye(0.12));
            let mouth_h = 0.02 + 0.05 * pose.mouth;
            let mouth = soft(((u / 0.13).powi(2) + ((v - 0.17) / mouth_h).powi(2)).sqrt() - 1.0, 6.0);
            let feat = eyes.max(mouth) * face;
            for ch in 0..c {
                let k = ch % 3;
                let base = bg[k] * (1.0 - face) + skin[k] * face;
                data.push((base * (1.0 - feat) + feature[k] * feat).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(dims.to_vec(), data)
}

/// `n` frames of the face scene drifting and turning, standing in for a
/// short video clip.
pub fn face_frames(dims: [usize; 3], n: usize) -> Result<Vec<Image>> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n.max(1) as f64;
            let phase = 2.0 * std::f64::consts::PI * t;
            face_image(
                dims,
                FacePose {
                    dy: 0.04 * phase.sin(),
                    dx: 0.08 * (phase).cos() - 0.04,
                    angle: 0.25 * (2.0 * phase).sin(),
                    mouth: 0.5 + 0.5 * (3.0 * phase).sin(),
                },
            )
        })
        .collect()
}
