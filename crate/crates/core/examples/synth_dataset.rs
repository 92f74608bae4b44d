//! Synthesizes a small wet-fingerprint dataset and reports its noise level.
//!
//! `cargo run --release --example synth_dataset -- [out_dir]`

use pgtnet::eval::no_enhance;
use pgtnet::imgproc::SsimConfig;
use pgtnet::synth::{write_dataset, Dataset, DatasetSpec};

fn main() -> pgtnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/example_dataset".into());
    let spec = DatasetSpec::new(32, 8, 8, 11);
    let manifest = write_dataset(&out, &spec, true)?;
    println!(
        "{} triplets of {}x{} in {out}",
        manifest.len(),
        spec.width,
        spec.height
    );

    let ds = Dataset::open(&out)?;
    for split in ["train", "val", "test"] {
        let samples = ds.load_split(split)?;
        let m = no_enhance(&samples, &SsimConfig::default())?;
        println!(
            "{split:<5} n={:<3} noisy vs clean: MSE {:.5}  PSNR {:.2} dB  SSIM {:.4}",
            samples.len(),
            m.mse,
            m.psnr,
            m.ssim
        );
    }
    Ok(())
}
