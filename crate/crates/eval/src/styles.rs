//! Three synthetic style images for smoke tests. Generated procedurally
//! with integer arithmetic, so the shipped PNGs under `assets/styles` are
//! reproducible bit for bit and free of third-party rights (CC0).

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::Result;

pub const STYLE_SIDE: u32 = 256;
pub const BUILTIN_STYLES: [&str; 3] = ["ember_stripes", "tide_mosaic", "moss_rings"];

fn tri(v: u32, period: u32) -> u32 {
    // 0..=255 triangle wave.
    let p = v % period;
    let half = period / 2;
    let d = if p < half { p } else { period - p };
    d * 255 / half
}

fn lerp(a: [u8; 3], b: [u8; 3], t: u32) -> Rgb<u8> {
    Rgb(std::array::from_fn(|k| ((a[k] as u32 * (255 - t) + b[k] as u32 * t) / 255) as u8))
}

/// Warm diagonal stripes.
pub fn ember_stripes() -> RgbImage {
    RgbImage::from_fn(STYLE_SIDE, STYLE_SIDE, |x, y| {
        lerp([120, 20, 10], [250, 180, 40], tri(x + y, 48))
    })
}

/// Cool tiles with a per-tile shade.
pub fn tide_mosaic() -> RgbImage {
    RgbImage::from_fn(STYLE_SIDE, STYLE_SIDE, |x, y| {
        let (tx, ty) = (x / 32, y / 32);
        let shade = (tx * 7 + ty * 13) % 8 * 32;
        let grout = x % 32 < 2 || y % 32 < 2;
        if grout {
            Rgb([235, 240, 245])
        } else {
            lerp([10, 40, 90], [60, 170, 200], shade)
        }
    })
}

/// Green concentric rings around an off-centre point.
pub fn moss_rings() -> RgbImage {
    RgbImage::from_fn(STYLE_SIDE, STYLE_SIDE, |x, y| {
        let (dx, dy) = (x.abs_diff(90), y.abs_diff(150));
        // Floor of the distance; exact for these integer inputs.
        let r = ((dx * dx + dy * dy) as f64).sqrt() as u32;
        lerp([30, 60, 20], [190, 210, 120], tri(r, 20))
    })
}

pub fn builtin(name: &str) -> Option<RgbImage> {
    match name {
        "ember_stripes" => Some(ember_stripes()),
        "tide_mosaic" => Some(tide_mosaic()),
        "moss_rings" => Some(moss_rings()),
        _ => None,
    }
}

/// Where the shipped PNGs live in the source tree.
pub fn assets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/styles")
}

/// Write all built-in styles as `<name>.png` into `dir`.
pub fn write_builtin(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for name in BUILTIN_STYLES {
        let path = dir.join(format!("{name}.png"));
        builtin(name).expect("known style").save(&path)?;
        out.push(path);
    }
    Ok(out)
}
