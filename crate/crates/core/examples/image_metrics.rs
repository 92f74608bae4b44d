//! MSE, PSNR and SSIM of a wet image against its clean original, and the
//! Laplacian response used by the edge-preserving loss term.

use pgtnet::imgproc::{laplacian_filter, MetricReport, SsimConfig};
use pgtnet::synth::{generate_triplet, NoiseParams, RidgeParams};

fn main() -> pgtnet::Result<()> {
    let t = generate_triplet(
        21,
        36,
        176,
        &RidgeParams::default(),
        &NoiseParams::default(),
    )?;
    let cfg = SsimConfig::default();
    let noisy = MetricReport::compute(&t.noisy, &t.clean, &cfg)?;
    let same = MetricReport::compute(&t.clean, &t.clean, &cfg)?;
    println!(
        "noisy vs clean: MSE {:.5} PSNR {:.3} dB SSIM {:.4}",
        noisy.mse, noisy.psnr, noisy.ssim
    );
    println!(
        "clean vs clean: MSE {:.5} PSNR {} SSIM {:.4}",
        same.mse, same.psnr, same.ssim
    );

    let lap = laplacian_filter(&t.clean)?;
    let energy: f64 = lap.data.iter().map(|v| v * v).sum::<f64>() / lap.data.len() as f64;
    println!("mean squared Laplacian response of the clean image: {energy:.4}");
    Ok(())
}
