//! Dynamic fixed-point quantization of a model: per-tensor fraction lengths,
//! payload sizes and the output error of weight-only and weight+activation modes.

use pgtnet::model::{build, PgtNet, ScalingPolicy, Variant};
use pgtnet::quant::{calibrate, output_mse, quantize_tensor, QuantMode, QuantSpec, QuantizedModel};
use pgtnet::synth::{generate_triplet, NoiseParams, RidgeParams};
use pgtnet::tensor::stack_batch;

fn main() -> pgtnet::Result<()> {
    let q = quantize_tensor(&[0.75, -0.031, 0.5, 0.0012], 8)?;
    println!(
        "codes {:?} with fraction length {} -> {:?}",
        q.codes,
        q.frac,
        q.dequantize()
    );

    let net = PgtNet::<f64>::init(build(Variant::Edge, ScalingPolicy::proposed(), 16)?, 5);
    let inputs = (0..4)
        .map(|i| {
            generate_triplet(i, 36, 176, &RidgeParams::default(), &NoiseParams::default())
                .map(|t| t.noisy.to_tensor())
        })
        .collect::<pgtnet::Result<Vec<_>>>()?;
    let batch = stack_batch(&inputs)?;
    let reference = net.forward(&batch)?.main()?.clone();

    for bits in [16, 8, 6] {
        let wo =
            QuantizedModel::quantize(&net, QuantSpec::new(bits, QuantMode::WeightOnly)?, None)?;
        let cal = calibrate(&net, &[batch.clone()])?;
        let wa = QuantizedModel::quantize(
            &net,
            QuantSpec::new(bits, QuantMode::WeightAndActivations)?,
            Some(cal),
        )?;
        let e_wo = output_mse(&reference, wo.forward(&batch)?.main()?)?;
        let e_wa = output_mse(&reference, wa.forward(&batch)?.main()?)?;
        let r = wo.size_report();
        println!(
            "{bits:>2}-bit: payload {:>7} B ({:.2}x smaller), output MSE weight-only {e_wo:.3e}, weight+activation {e_wa:.3e}",
            r.quantized_bytes,
            r.ratio()
        );
    }
    Ok(())
}
