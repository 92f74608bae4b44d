//! One clean/binary pair and its wet version, written as PGM files, with
//! the per-stamp log summarized.
//!
//! `cargo run --release --example wet_noise -- [out_dir]`

use std::path::PathBuf;

use pgtnet::pgm;
use pgtnet::synth::{generate_clean, synthesize_wet_logged, NoiseParams, RidgeParams};

fn main() -> pgtnet::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/example_wet".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| pgtnet::Error::io(&out, e))?;
    let (clean, binary) = generate_clean(4, 36, 176, &RidgeParams::default())?;
    let wet = synthesize_wet_logged(&clean, &binary, &NoiseParams::default(), 4)?;
    pgm::write(out.join("clean.pgm"), &clean)?;
    pgm::write(out.join("binary.pgm"), &binary)?;
    pgm::write(out.join("wet.pgm"), &wet.image)?;

    let frac = wet.stamps.len() as f64 / wet.ridge_pixels as f64;
    println!(
        "ridge pixels {}, stamps {} ({:.3} of ridge pixels)",
        wet.ridge_pixels,
        wet.stamps.len(),
        frac
    );
    println!(
        "mean intensity: clean {:.4}, wet {:.4}",
        clean.mean(),
        wet.image.mean()
    );
    for s in wet.stamps.iter().take(5) {
        println!(
            "  stamp at ({:>2},{:>3}) size {} darkness {:+.4}",
            s.y, s.x, s.size, s.darkness
        );
    }
    println!("images written to {}", out.display());
    Ok(())
}
