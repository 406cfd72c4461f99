//! Where backbone weights live and how they get there.

use std::path::{Path, PathBuf};

use spg_core::backbone::{DenoiserProfile, LatentDenoiser};
use spg_core::SpgError;

use crate::error::Result;

pub const WEIGHTS_DIR_ENV: &str = "SPG_WEIGHTS_DIR";

/// Seed of the synthetic weights written by `fetch-weights`.
pub const SYNTHETIC_WEIGHTS_SEED: u64 = 0x5_3047;

/// Flag, then `SPG_WEIGHTS_DIR`, then `~/.cache/spg/weights`.
pub fn weights_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(WEIGHTS_DIR_ENV).filter(|p| !p.is_empty()) {
        return PathBuf::from(p);
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache/spg/weights"),
        None => PathBuf::from("spg-weights"),
    }
}

pub fn weights_path(dir: &Path, profile: &str) -> PathBuf {
    dir.join(format!("{profile}.safetensors"))
}

/// Install weights for `profile` into `dir`: copied (after validation)
/// from `from`, or generated synthetically.
pub fn fetch(dir: &Path, profile: &str, from: Option<&Path>, seed: u64) -> Result<PathBuf> {
    let wanted = DenoiserProfile::by_name(profile)?;
    std::fs::create_dir_all(dir)?;
    let dest = weights_path(dir, profile);
    let model = match from {
        Some(src) => {
            let m = LatentDenoiser::load(src)?;
            if m.profile().name != wanted.name {
                return Err(SpgError::Configuration(format!(
                    "{} holds `{}` weights, not `{profile}`",
                    src.display(),
                    m.profile().name
                ))
                .into());
            }
            m
        }
        None => LatentDenoiser::synthetic(wanted, seed),
    };
    model.save(&dest)?;
    Ok(dest)
}

pub fn load_backbone(dir: &Path, profile: &str) -> Result<LatentDenoiser> {
    DenoiserProfile::by_name(profile)?;
    let path = weights_path(dir, profile);
    if !path.exists() {
        return Err(SpgError::Capability(format!(
            "no `{profile}` weights at {}; run `spg fetch-weights --backbone {profile}`",
            path.display()
        ))
        .into());
    }
    Ok(LatentDenoiser::load(&path)?)
}
