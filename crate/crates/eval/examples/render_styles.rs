//! Regenerate the built-in style PNGs into `assets/styles` (or the given
//! directory).

use std::path::PathBuf;

fn main() -> spg_eval::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(spg_eval::styles::assets_dir);
    for p in spg_eval::styles::write_builtin(&dir)? {
        println!("{}", p.display());
    }
    Ok(())
}
