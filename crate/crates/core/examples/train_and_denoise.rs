//! Trains a narrow multitask model on random crops for a short budget, then
//! evaluates it on held-out images and denoises one of them.
//!
//! `cargo run --release --example train_and_denoise -- [steps] [out_dir]`

use std::path::PathBuf;

use pgtnet::eval::{denoise, evaluate_net, no_enhance};
use pgtnet::imgproc::SsimConfig;
use pgtnet::pgm;
use pgtnet::synth::{generate_triplet, NoiseParams, RidgeParams, SampleTriplet};
use pgtnet::train::{train_on, TraceRow, TrainConfig, TrainObserver, TrainingSet};

struct Progress;

impl TrainObserver<f32> for Progress {
    fn on_step(&mut self, row: &TraceRow) {
        if row.step % 25 == 0 {
            println!(
                "step {:>4} phase {} loss {:.4}",
                row.step, row.phase, row.loss_total
            );
        }
    }
}

fn samples(base: u64, n: u64) -> pgtnet::Result<Vec<SampleTriplet>> {
    (0..n)
        .map(|i| {
            generate_triplet(
                base + i,
                36,
                176,
                &RidgeParams::default(),
                &NoiseParams::default(),
            )
        })
        .collect()
}

fn main() -> pgtnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let out = PathBuf::from(
        args.next()
            .unwrap_or_else(|| "target/example_denoise".into()),
    );

    let train = samples(1_000, 128)?;
    let test = samples(9_000, 16)?;
    let mut cfg = TrainConfig {
        channels: 16,
        max_steps: steps,
        epochs: steps,
        phase1_steps: steps / 10,
        crop_height: 36,
        crop_width: 48,
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.optimizer.learning_rate = 1e-3;
    let outcome = train_on(
        &cfg,
        &TrainingSet::<f32>::from_triplets(&train)?,
        &mut Progress,
    )?;

    let ssim = SsimConfig::default();
    let base = no_enhance(&test, &ssim)?;
    let m = evaluate_net(&outcome.net, &test, &ssim)?;
    println!("no enhance: PSNR {:.3} SSIM {:.4}", base.psnr, base.ssim);
    println!("model     : PSNR {:.3} SSIM {:.4}", m.psnr, m.ssim);

    std::fs::create_dir_all(&out).map_err(|e| pgtnet::Error::io(&out, e))?;
    let d = denoise(&outcome.net, &test[0].noisy)?;
    pgm::write(out.join("noisy.pgm"), &test[0].noisy)?;
    pgm::write(out.join("denoised.pgm"), &d.image)?;
    if let Some(b) = &d.binary {
        pgm::write(out.join("binary.pgm"), b)?;
    }
    println!("images written to {}", out.display());
    Ok(())
}
