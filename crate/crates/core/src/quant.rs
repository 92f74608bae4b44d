//! Dynamic fixed-point quantization.
//!
//! A tensor is stored as signed `bits`-wide integer codes sharing one
//! fraction length `f`: code `q` means `q · 2^(−f)`. The fraction length is
//! chosen per tensor as the largest `f` whose range still covers the tensor's
//! largest magnitude. Rounding is half away from zero and out-of-range values
//! saturate.
//!
//! Quantized inference is simulated: weights are dequantized back to `f64`,
//! and in [`QuantMode::WeightAndActivations`] every convolution's input and
//! output pass through quantize → dequantize with per-tensor fraction lengths
//! calibrated on sample inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Activation, DType, EagerExec, Executor, ModelGraph, Outputs, Params, PgtNet, RunMode,
    StoredTensor, Variant, WeightFile,
};
use crate::tensor::{Scalar, Tensor4};

/// Fraction lengths are clamped to this magnitude so `2^f` stays a normal `f64`.
pub const MAX_FRACTION: i32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    WeightOnly,
    WeightAndActivations,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::WeightOnly => "weight_only",
            QuantMode::WeightAndActivations => "weight_and_activations",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight_only" | "weights" | "w" => Ok(QuantMode::WeightOnly),
            "weight_and_activations" | "activations" | "wa" => Ok(QuantMode::WeightAndActivations),
            _ => Err(Error::InvalidArgument(format!(
                "unknown quantization mode {s:?} (expected weight_only or weight_and_activations)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit_width: u8,
    pub mode: QuantMode,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            bit_width: 8,
            mode: QuantMode::WeightOnly,
        }
    }
}

impl QuantSpec {
    pub fn new(bit_width: u8, mode: QuantMode) -> Result<Self> {
        check_bits(bit_width)?;
        Ok(QuantSpec { bit_width, mode })
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width {bits} outside 2..=32"
        )));
    }
    Ok(())
}

/// Largest positive code at `bits`.
pub fn max_code(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Most negative code at `bits`.
pub fn min_code(bits: u8) -> i64 {
    -(1i64 << (bits - 1))
}

/// Largest `f` with `max|v| ≤ max_code · 2^(−f)`; `bits − 1` for an all-zero tensor.
pub fn choose_fraction_length(values: &[f64], bits: u8) -> Result<i32> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot choose a fraction length for no values".into(),
        ));
    }
    let mut m = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("choose_fraction_length".into()));
        }
        m = m.max(v.abs());
    }
    Ok(fraction_for_max(m, bits))
}

/// Fraction length for a known maximum magnitude.
pub fn fraction_for_max(max_abs: f64, bits: u8) -> i32 {
    if max_abs == 0.0 {
        return bits as i32 - 1;
    }
    let top = max_code(bits) as f64;
    let fits = |f: i32| max_abs <= top * (-(f as f64)).exp2();
    let mut f = ((top / max_abs).log2().floor() as i32).clamp(-MAX_FRACTION, MAX_FRACTION);
    while f > -MAX_FRACTION && !fits(f) {
        f -= 1;
    }
    while f < MAX_FRACTION && fits(f + 1) {
        f += 1;
    }
    f
}

/// Code of `v` at fraction length `f`: round half away from zero, then saturate.
pub fn quantize_value(v: f64, frac: i32, bits: u8) -> i64 {
    let scaled = (v * (frac as f64).exp2()).round();
    scaled.clamp(min_code(bits) as f64, max_code(bits) as f64) as i64
}

pub fn dequantize_value(code: i64, frac: i32) -> f64 {
    code as f64 * (-(frac as f64)).exp2()
}

/// Integer codes sharing one fraction length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedTensor {
    pub codes: Vec<i64>,
    pub frac: i32,
    pub bits: u8,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        let step = (-(self.frac as f64)).exp2();
        self.codes.iter().map(|&q| q as f64 * step).collect()
    }

    /// Half a quantization step, the round-trip bound for in-range values.
    pub fn max_error(&self) -> f64 {
        (-(self.frac as f64) - 1.0).exp2()
    }
}

/// Quantizes with a fraction length chosen from the values themselves.
pub fn quantize_tensor(values: &[f64], bits: u8) -> Result<QuantizedTensor> {
    let frac = choose_fraction_length(values, bits)?;
    Ok(quantize_with(values, frac, bits))
}

pub fn quantize_with(values: &[f64], frac: i32, bits: u8) -> QuantizedTensor {
    QuantizedTensor {
        codes: values
            .iter()
            .map(|&v| quantize_value(v, frac, bits))
            .collect(),
        frac,
        bits,
    }
}

/// Quantize → dequantize in place at a fixed fraction length.
pub fn fake_quantize<T: Scalar>(t: &Tensor4<T>, frac: i32, bits: u8) -> Tensor4<T> {
    let (up, down) = ((frac as f64).exp2(), (-(frac as f64)).exp2());
    let (lo, hi) = (min_code(bits) as f64, max_code(bits) as f64);
    t.map(|v| T::from_f64((v.to_f64() * up).round().clamp(lo, hi) * down))
}

/// Per-convolution activation ranges observed on calibration inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub samples: usize,
    pub input_max: Vec<f64>,
    pub output_max: Vec<f64>,
}

impl Calibration {
    pub fn fractions(&self, bits: u8) -> (Vec<i32>, Vec<i32>) {
        (
            self.input_max
                .iter()
                .map(|&m| fraction_for_max(m, bits))
                .collect(),
            self.output_max
                .iter()
                .map(|&m| fraction_for_max(m, bits))
                .collect(),
        )
    }
}

struct CalibrationExec<'a> {
    inner: EagerExec<'a, f64>,
    input_max: Vec<f64>,
    output_max: Vec<f64>,
}

impl Executor for CalibrationExec<'_> {
    type Value = Tensor4<f64>;

    fn conv(&mut self, layer: usize, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        self.input_max[layer] = self.input_max[layer].max(x.max_abs());
        let y = self.inner.conv(layer, x)?;
        self.output_max[layer] = self.output_max[layer].max(y.max_abs());
        Ok(y)
    }

    fn activation(&mut self, x: &Tensor4<f64>, act: Activation) -> Result<Tensor4<f64>> {
        self.inner.activation(x, act)
    }

    fn concat(&mut self, parts: &[&Tensor4<f64>]) -> Result<Tensor4<f64>> {
        self.inner.concat(parts)
    }

    fn residual(
        &mut self,
        trunk: &Tensor4<f64>,
        branch: &Tensor4<f64>,
        eps: f64,
    ) -> Result<Tensor4<f64>> {
        self.inner.residual(trunk, branch, eps)
    }
}

struct ActQuantExec<'a> {
    inner: EagerExec<'a, f64>,
    input_frac: &'a [i32],
    output_frac: &'a [i32],
    bits: u8,
}

impl Executor for ActQuantExec<'_> {
    type Value = Tensor4<f64>;

    fn conv(&mut self, layer: usize, x: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let xq = fake_quantize(x, self.input_frac[layer], self.bits);
        let y = self.inner.conv(layer, &xq)?;
        Ok(fake_quantize(&y, self.output_frac[layer], self.bits))
    }

    fn activation(&mut self, x: &Tensor4<f64>, act: Activation) -> Result<Tensor4<f64>> {
        self.inner.activation(x, act)
    }

    fn concat(&mut self, parts: &[&Tensor4<f64>]) -> Result<Tensor4<f64>> {
        self.inner.concat(parts)
    }

    fn residual(
        &mut self,
        trunk: &Tensor4<f64>,
        branch: &Tensor4<f64>,
        eps: f64,
    ) -> Result<Tensor4<f64>> {
        self.inner.residual(trunk, branch, eps)
    }
}

/// Records per-convolution max |input| and max |output| of a float network over `inputs`.
pub fn calibrate(net: &PgtNet<f64>, inputs: &[Tensor4<f64>]) -> Result<Calibration> {
    let n = net.graph.convs.len();
    let mut exec = CalibrationExec {
        inner: EagerExec {
            params: &net.params,
        },
        input_max: vec![0.0; n],
        output_max: vec![0.0; n],
    };
    let mut samples = 0;
    for x in inputs {
        net.graph.run(&mut exec, x, RunMode::Full)?;
        samples += x.shape().n;
    }
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "calibration needs at least one input".into(),
        ));
    }
    Ok(Calibration {
        samples,
        input_max: exec.input_max,
        output_max: exec.output_max,
    })
}

/// A network with quantized parameters and, in activation mode, calibrated ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: QuantSpec,
    pub graph: ModelGraph,
    /// Interleaved weight / bias tensors, aligned with [`Params::tensors`].
    pub tensors: Vec<QuantizedTensor>,
    pub calibration: Option<Calibration>,
    dequantized: Params<f64>,
}

#[derive(Serialize, Deserialize)]
struct QuantMetadata {
    bit_width: u8,
    mode: QuantMode,
    calibration: Option<Calibration>,
}

impl QuantizedModel {
    /// Quantizes every weight and bias of `net`. Activation mode needs `calibration`.
    pub fn quantize<T: Scalar>(
        net: &PgtNet<T>,
        spec: QuantSpec,
        calibration: Option<Calibration>,
    ) -> Result<Self> {
        check_bits(spec.bit_width)?;
        let tensors = net
            .params
            .tensors()
            .map(|t| {
                let v: Vec<f64> = t.data().iter().map(|x| x.to_f64()).collect();
                quantize_tensor(&v, spec.bit_width)
            })
            .collect::<Result<Vec<_>>>()?;
        let calibration = match spec.mode {
            QuantMode::WeightOnly => None,
            QuantMode::WeightAndActivations => Some(calibration.ok_or_else(|| {
                Error::Uncalibrated("activation mode needs calibration ranges".into())
            })?),
        };
        if let Some(c) = &calibration {
            let n = net.graph.convs.len();
            if c.input_max.len() != n || c.output_max.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "calibration covers {} convolutions, graph has {n}",
                    c.input_max.len()
                )));
            }
        }
        Self::assemble(spec, net.graph.clone(), tensors, calibration)
    }

    fn assemble(
        spec: QuantSpec,
        graph: ModelGraph,
        tensors: Vec<QuantizedTensor>,
        calibration: Option<Calibration>,
    ) -> Result<Self> {
        let mut dequantized = Params::<f64>::zeros(&graph);
        if dequantized.tensors().count() != tensors.len() {
            return Err(Error::Format(
                "quantized tensor count does not match graph".into(),
            ));
        }
        for (dst, q) in dequantized.tensors_mut().zip(&tensors) {
            if dst.len() != q.codes.len() {
                return Err(Error::Format(
                    "quantized tensor size does not match graph".into(),
                ));
            }
            dst.data_mut().copy_from_slice(&q.dequantize());
        }
        Ok(QuantizedModel {
            spec,
            graph,
            tensors,
            calibration,
            dequantized,
        })
    }

    /// Float network carrying the dequantized weights.
    pub fn dequantized_net(&self) -> PgtNet<f64> {
        PgtNet {
            graph: self.graph.clone(),
            params: self.dequantized.clone(),
        }
    }

    /// Raw outputs under the quantization mode.
    pub fn forward(&self, input: &Tensor4<f64>) -> Result<Outputs<Tensor4<f64>>> {
        let s = input.shape();
        if s.c != 1 || s.n == 0 {
            return Err(Error::shape(
                "quantized forward",
                format!("expected (B,1,H,W) input, got {s}"),
            ));
        }
        let inner = EagerExec {
            params: &self.dequantized,
        };
        match self.spec.mode {
            QuantMode::WeightOnly => self.graph.run(&mut { inner }, input, RunMode::Full),
            QuantMode::WeightAndActivations => {
                let cal = self
                    .calibration
                    .as_ref()
                    .ok_or_else(|| Error::Uncalibrated("model has no activation ranges".into()))?;
                let (input_frac, output_frac) = cal.fractions(self.spec.bit_width);
                let mut exec = ActQuantExec {
                    inner,
                    input_frac: &input_frac,
                    output_frac: &output_frac,
                    bits: self.spec.bit_width,
                };
                self.graph.run(&mut exec, input, RunMode::Full)
            }
        }
    }

    /// Like [`QuantizedModel::forward`] with `main` clamped to `[0, 1]`.
    pub fn infer(&self, input: &Tensor4<f64>) -> Result<Outputs<Tensor4<f64>>> {
        let mut out = self.forward(input)?;
        out.main = out.main.map(|m| m.map(|v| v.clamp(0.0, 1.0)));
        Ok(out)
    }

    pub fn size_report(&self) -> SizeReport {
        size_report(&self.graph, self.spec.bit_width)
    }

    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let names = self.graph.parameter_names();
        let shapes = Params::<f64>::zeros(&self.graph);
        let tensors = names
            .into_iter()
            .zip(shapes.tensors())
            .zip(&self.tensors)
            .map(|((name, t), q)| StoredTensor {
                name,
                shape: t.shape().dims(),
                dtype: DType::Fixed {
                    bits: q.bits,
                    frac: q.frac as i16,
                },
                values: Vec::new(),
                codes: q.codes.clone(),
            })
            .collect();
        let metadata = serde_json::to_string(&QuantMetadata {
            bit_width: self.spec.bit_width,
            mode: self.spec.mode,
            calibration: self.calibration.clone(),
        })?;
        Ok(WeightFile {
            variant: self.graph.variant,
            policy: self.graph.policy,
            base_channels: self.graph.base_channels,
            tensors,
            metadata,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_weight_file()?.to_bytes())
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let meta: QuantMetadata = serde_json::from_str(&file.metadata)
            .map_err(|e| Error::Format(format!("quantized model metadata: {e}")))?;
        let spec = QuantSpec::new(meta.bit_width, meta.mode)?;
        let graph = file.graph()?;
        let names = graph.parameter_names();
        if names.len() != file.tensors.len() {
            return Err(Error::Format(
                "quantized model tensor count does not match graph".into(),
            ));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(&file.tensors) {
            if *name != t.name {
                return Err(Error::Format(format!(
                    "expected tensor {name:?}, found {:?}",
                    t.name
                )));
            }
            let DType::Fixed { bits, frac } = t.dtype else {
                return Err(Error::Format(format!("tensor {name:?} is not fixed-point")));
            };
            tensors.push(QuantizedTensor {
                codes: t.codes.clone(),
                frac: frac as i32,
                bits,
            });
        }
        if spec.mode == QuantMode::WeightAndActivations && meta.calibration.is_none() {
            return Err(Error::Uncalibrated("file has no activation ranges".into()));
        }
        Self::assemble(spec, graph, tensors, meta.calibration)
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<Variant>) -> Result<Self> {
        let file = WeightFile::from_bytes(bytes)?;
        if let Some(v) = expected {
            if v != file.variant {
                return Err(Error::VariantMismatch {
                    expected: v.name().into(),
                    found: file.variant.name().into(),
                });
            }
        }
        Self::from_weight_file(&file)
    }
}

/// Storage cost of a graph's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub parameters: usize,
    pub tensors: usize,
    pub bit_width: u8,
    pub float32_bytes: usize,
    /// `parameters · bit_width / 8`, rounded up to whole bytes.
    pub quantized_bytes: usize,
    /// One bit-width byte and one 16-bit fraction length per tensor.
    pub metadata_bytes: usize,
}

impl SizeReport {
    /// Float32 payload over quantized payload, metadata excluded.
    pub fn ratio(&self) -> f64 {
        self.float32_bytes as f64 / self.quantized_bytes as f64
    }

    pub fn to_text(&self) -> String {
        let mb = |b: usize| b as f64 / 1e6;
        format!(
            "parameters        {}\ntensors           {}\nfloat32 payload   {} B ({:.3} MB)\n{}-bit payload     {} B ({:.3} MB)\nfraction metadata {} B ({} tensors x 3 B)\ncompression       {:.2}x\n",
            self.parameters,
            self.tensors,
            self.float32_bytes,
            mb(self.float32_bytes),
            self.bit_width,
            self.quantized_bytes,
            mb(self.quantized_bytes),
            self.metadata_bytes,
            self.tensors,
            self.ratio()
        )
    }
}

pub fn size_report(graph: &ModelGraph, bit_width: u8) -> SizeReport {
    let parameters = graph.parameter_count();
    let tensors = 2 * graph.convs.len();
    SizeReport {
        parameters,
        tensors,
        bit_width,
        float32_bytes: 4 * parameters,
        quantized_bytes: (parameters * bit_width as usize).div_ceil(8),
        metadata_bytes: 3 * tensors,
    }
}

/// Mean squared difference of two main outputs, used to rank quantization modes.
pub fn output_mse(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "output_mse",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ScalingPolicy};
    use crate::seed;
    use rand::Rng as _;

    #[test]
    fn fraction_examples() {
        assert_eq!(choose_fraction_length(&[0.9, -0.1], 8).unwrap(), 7);
        assert_eq!(choose_fraction_length(&[100.0], 8).unwrap(), 0);
        assert_eq!(choose_fraction_length(&[0.0, 0.0], 8).unwrap(), 7);
        assert_eq!(choose_fraction_length(&[1000.0], 8).unwrap(), -3);
        assert_eq!(choose_fraction_length(&[127.0 / 128.0], 8).unwrap(), 7);
        assert_eq!(
            choose_fraction_length(&[127.0 / 128.0 + 1e-12], 8).unwrap(),
            6
        );
        assert!(choose_fraction_length(&[], 8).is_err());
        assert!(choose_fraction_length(&[f64::NAN], 8).is_err());
        assert!(choose_fraction_length(&[1.0], 1).is_err());
    }

    #[test]
    fn value_examples() {
        assert_eq!(quantize_value(0.0, 7, 8), 0);
        assert_eq!(quantize_value(0.5, 7, 8), 64);
        assert_eq!(dequantize_value(64, 7), 0.5);
        assert_eq!(quantize_value(5.0, 7, 8), 127);
        assert_eq!(quantize_value(-5.0, 7, 8), -128);
        assert_eq!(quantize_value(1.5 / 128.0, 7, 8), 2);
        assert_eq!(quantize_value(-1.5 / 128.0, 7, 8), -2);
    }

    #[test]
    fn round_trip_and_monotone() {
        let mut rng = seed::rng(4);
        for bits in [4u8, 8, 12, 16] {
            let v: Vec<f64> = (0..2000).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q = quantize_tensor(&v, bits).unwrap();
            let back = q.dequantize();
            for (a, b) in v.iter().zip(&back) {
                assert!((a - b).abs() <= q.max_error());
            }
            let mut pairs: Vec<(f64, i64)> =
                v.iter().copied().zip(q.codes.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    fn small_net() -> PgtNet<f64> {
        PgtNet::init(
            build(Variant::Edge, ScalingPolicy::proposed(), 8).unwrap(),
            2,
        )
    }

    fn input() -> Tensor4<f64> {
        let mut rng = seed::rng(9);
        Tensor4::from_vec(
            [2, 1, 8, 10],
            (0..160).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn lossless_at_32_bits_on_representable_weights() {
        let mut net = small_net();
        for t in net.params.tensors_mut() {
            for v in t.data_mut() {
                *v = (*v * 256.0).round() / 256.0;
            }
        }
        let q = QuantizedModel::quantize(
            &net,
            QuantSpec::new(32, QuantMode::WeightOnly).unwrap(),
            None,
        )
        .unwrap();
        let x = input();
        assert_eq!(q.forward(&x).unwrap().main, net.forward(&x).unwrap().main);
    }

    #[test]
    fn activation_mode_needs_calibration() {
        let net = small_net();
        let spec = QuantSpec::new(8, QuantMode::WeightAndActivations).unwrap();
        assert!(matches!(
            QuantizedModel::quantize(&net, spec, None),
            Err(Error::Uncalibrated(_))
        ));
        let cal = calibrate(&net, &[input()]).unwrap();
        let q = QuantizedModel::quantize(&net, spec, Some(cal)).unwrap();
        let x = input();
        let a = q.forward(&x).unwrap();
        assert_eq!(a.main, q.forward(&x).unwrap().main);
    }

    #[test]
    fn container_round_trip() {
        let net = small_net();
        let spec = QuantSpec::new(8, QuantMode::WeightAndActivations).unwrap();
        let cal = calibrate(&net, &[input()]).unwrap();
        let q = QuantizedModel::quantize(&net, spec, Some(cal)).unwrap();
        let bytes = q.to_bytes().unwrap();
        let back = QuantizedModel::from_bytes(&bytes, Some(Variant::Edge)).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(QuantizedModel::from_bytes(&bytes, Some(Variant::Block84Multitask)).is_err());
    }

    #[test]
    fn size_examples() {
        let g = build(Variant::Edge, ScalingPolicy::proposed(), 8).unwrap();
        let r = size_report(&g, 8);
        assert_eq!(r.float32_bytes, 4 * r.quantized_bytes);
        assert_eq!(r.ratio(), 4.0);
        assert_eq!(r.metadata_bytes, 3 * r.tensors);
    }
}
