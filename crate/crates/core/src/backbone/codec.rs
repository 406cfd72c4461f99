//! Patch codec between RGB images and 4-channel latents, plus style image
//! preprocessing.
//!
//! Each `downsample x downsample` patch becomes one latent cell holding
//! luma, two colour differences and the patch's luma contrast. Decoding
//! bilinearly interpolates the colour channels between patch centres;
//! texture inside a patch is not reconstructed.
//!
//! Measured reconstruction error (mean absolute error per 8-bit channel) is
//! below [`DECODE_MAE_BOUND`] on smooth content such as gradients and soft
//! blobs; high-frequency texture exceeds it by design.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::error::{Result, SpgError};
use crate::tensor::Latent;

/// Documented codec bound on smooth images, in 8-bit units.
pub const DECODE_MAE_BOUND: f64 = 4.0;

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn encode(image: &RgbImage, downsample: usize) -> Result<Latent> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if downsample == 0 || w % downsample != 0 || h % downsample != 0 || w == 0 || h == 0 {
        return Err(SpgError::invalid(format!(
            "image {w}x{h} not divisible into {downsample}px patches"
        )));
    }
    let (lh, lw) = (h / downsample, w / downsample);
    let n = (downsample * downsample) as f64;
    let mut z = Latent::zeros((4, lh, lw));
    for py in 0..lh {
        for px in 0..lw {
            let (mut r, mut g, mut b, mut yy) = (0.0, 0.0, 0.0, 0.0);
            for dy in 0..downsample {
                for dx in 0..downsample {
                    let p = image.get_pixel((px * downsample + dx) as u32, (py * downsample + dy) as u32);
                    let (pr, pg, pb) = (to_unit(p[0]), to_unit(p[1]), to_unit(p[2]));
                    let y = KR * pr + KG * pg + KB * pb;
                    r += pr;
                    g += pg;
                    b += pb;
                    yy += y * y;
                }
            }
            let (r, g, b) = (r / n, g / n, b / n);
            let y = KR * r + KG * g + KB * b;
            let contrast = (yy / n - y * y).max(0.0).sqrt();
            z[[0, py, px]] = y;
            z[[1, py, px]] = b - y;
            z[[2, py, px]] = r - y;
            z[[3, py, px]] = 2.0 * contrast;
        }
    }
    Ok(z)
}

fn cell_rgb(z: &Latent, y: usize, x: usize) -> [f64; 3] {
    let luma = z[[0, y, x]];
    let b = z[[1, y, x]] + luma;
    let r = z[[2, y, x]] + luma;
    let g = (luma - KR * r - KB * b) / KG;
    [r, g, b]
}

pub fn decode(z: &Latent, downsample: usize) -> Result<RgbImage> {
    let (c, lh, lw) = z.dim();
    if c < 3 || lh == 0 || lw == 0 {
        return Err(SpgError::invalid(format!("cannot decode latent of shape {:?}", z.dim())));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(SpgError::Numeric("decode: non-finite latent".into()));
    }
    let d = downsample as f64;
    let (w, h) = ((lw * downsample) as u32, (lh * downsample) as u32);
    let img = RgbImage::from_fn(w, h, |x, y| {
        // Position in cell-centre coordinates.
        let fx = ((x as f64 + 0.5) / d - 0.5).clamp(0.0, (lw - 1) as f64);
        let fy = ((y as f64 + 0.5) / d - 0.5).clamp(0.0, (lh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(lw - 1), (y0 + 1).min(lh - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (a, b, c2, e) = (cell_rgb(z, y0, x0), cell_rgb(z, y0, x1), cell_rgb(z, y1, x0), cell_rgb(z, y1, x1));
        let mut out = [0u8; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - tx) + b[k] * tx;
            let bot = c2[k] * (1.0 - tx) + e[k] * tx;
            out[k] = to_byte(top * (1.0 - ty) + bot * ty);
        }
        Rgb(out)
    });
    Ok(img)
}

/// Centre-crop to the target aspect ratio, then resize to exactly
/// `width x height`.
pub fn preprocess_style(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let target = width as f64 / height as f64;
    let (cw, ch) = if (w as f64 / h as f64) > target {
        (((h as f64) * target).round() as u32, h)
    } else {
        (w, ((w as f64) / target).round() as u32)
    };
    let (cw, ch) = (cw.clamp(1, w), ch.clamp(1, h));
    let cropped = imageops::crop_imm(image, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image();
    if cropped.dimensions() == (width, height) {
        cropped
    } else {
        imageops::resize(&cropped, width, height, FilterType::Triangle)
    }
}

pub fn mean_abs_error(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(SpgError::invalid("image sizes differ"));
    }
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as u64)
        .sum();
    Ok(total as f64 / a.as_raw().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                (x * 255 / (w - 1)) as u8,
                (y * 255 / (h - 1)) as u8,
                ((x + y) * 127 / (w + h - 2)) as u8,
            ])
        })
    }

    fn blobs(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let d1 = ((fx - 0.3).powi(2) + (fy - 0.4).powi(2)) / 0.05;
            let d2 = ((fx - 0.7).powi(2) + (fy - 0.6).powi(2)) / 0.08;
            Rgb([
                (40.0 + 200.0 * (-d1).exp()) as u8,
                (60.0 + 150.0 * (-d2).exp()) as u8,
                (90.0 + 100.0 * (-(d1 + d2) / 2.0).exp()) as u8,
            ])
        })
    }

    #[test]
    fn latent_shape() {
        let z = encode(&gradient(64, 32), 8).unwrap();
        assert_eq!(z.dim(), (4, 4, 8));
        assert!(encode(&gradient(60, 32), 8).is_err());
    }

    #[test]
    fn constant_image_round_trips_exactly() {
        let img = RgbImage::from_pixel(32, 32, Rgb([200, 30, 90]));
        let back = decode(&encode(&img, 8).unwrap(), 8).unwrap();
        assert!(mean_abs_error(&img, &back).unwrap() <= 1.0);
    }

    #[test]
    fn smooth_images_within_documented_bound() {
        for img in [gradient(128, 128), blobs(128, 96), gradient(256, 64)] {
            let back = decode(&encode(&img, 8).unwrap(), 8).unwrap();
            let mae = mean_abs_error(&img, &back).unwrap();
            assert!(mae < DECODE_MAE_BOUND, "mae {mae}");
        }
    }

    #[test]
    fn preprocess_crops_then_resizes() {
        let img = gradient(300, 100);
        let out = preprocess_style(&img, 64, 64);
        assert_eq!(out.dimensions(), (64, 64));
        // Centre crop keeps the middle third, so the left edge is not black.
        assert!(out.get_pixel(0, 32)[0] > 60);
    }
}
