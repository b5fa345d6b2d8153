//! Regenerates `data/approx_constants.txt` from the least-squares fits.

#[path = "../tests/support/fit.rs"]
#[allow(dead_code)]
mod fit;

use std::path::PathBuf;

fn main() -> std::io::Result<()> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/approx_constants.txt");
    let body = fit::render_constants();
    print!("{body}");
    std::fs::write(&path, body)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
