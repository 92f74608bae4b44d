//! Short residual-scaling ablation: the same data, seed and step budget under
//! the proposed policy and two all-positive ones, compared by final loss.
//!
//! `cargo run --release --example ablation -- [steps]`

use pgtnet::synth::{generate_triplet, NoiseParams, RidgeParams};
use pgtnet::train::{ablate_scaling, Quiet, TrainConfig, TrainingSet};

fn main() -> pgtnet::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let train = (0..32)
        .map(|i| {
            generate_triplet(
                500 + i,
                36,
                176,
                &RidgeParams::default(),
                &NoiseParams::default(),
            )
        })
        .collect::<pgtnet::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        channels: 8,
        max_steps: steps,
        epochs: steps,
        crop_height: 36,
        crop_width: 48,
        seed: 2,
        ..TrainConfig::default()
    };
    let ab = ablate_scaling(&cfg, &TrainingSet::<f32>::from_triplets(&train)?, |_| {
        Box::new(Quiet)
    })?;
    for r in &ab.runs {
        println!(
            "{:<20} epsilon in [{:+.2}, {:+.2}]",
            r.trace.label, r.epsilon_range.0, r.epsilon_range.1
        );
    }
    print!("{}", ab.comparison.to_text());
    Ok(())
}
