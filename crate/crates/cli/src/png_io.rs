//! 8-bit RGB PNG codec for `[0, 1]` images.

use std::io::Cursor;
use std::path::Path;

use anyhow::{bail, Context, Result};
use embinvert_core::{Image, Tensor};
use image::{ImageFormat, RgbImage};

fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encodes an `H×W×3` (or `H×W×1`, replicated to gray) image.
pub fn encode(img: &Image) -> Result<Vec<u8>> {
    let (h, w, c) = img.hwc()?;
    if c != 3 && c != 1 {
        bail!("PNG output needs 1 or 3 channels, got {c}");
    }
    if let Some(v) = img.data().iter().find(|v| !v.is_finite()) {
        bail!("cannot write non-finite pixel value {v}");
    }
    let d = img.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = (y as usize * w + x as usize) * c;
        let px = |k: usize| quantize(d[base + if c == 3 { k } else { 0 }]);
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).context("malformed PNG")?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => bail!("expected an 8-bit RGB PNG, got {:?}", other.color()),
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

pub fn write(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(img)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Tiles equally sized images into a grid with a one-pixel white gap.
pub fn grid(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows.first().and_then(|r| r.first()).context("empty image grid")?;
    let (h, w, c) = first.hwc()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = vec![1.0; gh * gw * c];
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            if img.dims() != first.dims() {
                bail!("grid images must share dims: {:?} vs {:?}", img.dims(), first.dims());
            }
            for y in 0..h {
                let dst = ((r * (h + 1) + y) * gw + k * (w + 1)) * c;
                out[dst..dst + w * c].copy_from_slice(&img.data()[y * w * c..(y + 1) * w * c]);
            }
        }
    }
    Ok(Tensor::new(vec![gh, gw, c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use embinvert_core::Rng;

    #[test]
    fn quantized_images_roundtrip_exactly() {
        let mut rng = Rng::new(1);
        let img = Tensor::from_fn(&[5, 7, 3], |_| rng.below(256) as f64 / 255.0).unwrap();
        assert_eq!(decode(&encode(&img).unwrap()).unwrap(), img);
        for v in [0.0, 1.0] {
            let flat = Tensor::filled(&[4, 4, 3], v);
            assert_eq!(decode(&encode(&flat).unwrap()).unwrap(), flat);
        }
    }

    #[test]
    fn roundtrip_error_is_half_a_level() {
        let mut rng = Rng::new(2);
        let img = Tensor::from_fn(&[16, 16, 3], |_| rng.uniform()).unwrap();
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn malformed_and_gray_inputs_are_rejected() {
        assert!(decode(b"not a png").is_err());
        let gray = image::GrayImage::from_pixel(2, 2, image::Luma([7]));
        let mut buf = Cursor::new(Vec::new());
        gray.write_to(&mut buf, ImageFormat::Png).unwrap();
        assert!(decode(buf.get_ref()).is_err());
    }

    #[test]
    fn grid_places_tiles_with_gaps() {
        let a = Tensor::filled(&[2, 2, 3], 0.0);
        let g = grid(&[vec![a.clone(), a.clone()], vec![a]]).unwrap();
        assert_eq!(g.dims(), [5, 5, 3]);
        assert_eq!(g.at(0, 2, 0), 1.0);
        assert_eq!(g.at(3, 0, 1), 0.0);
        assert_eq!(g.at(3, 3, 0), 1.0);
    }
}
