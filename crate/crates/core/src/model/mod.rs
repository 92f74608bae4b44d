//! The progressive guided multi-task denoiser.
//!
//! [`build`] produces a [`ModelGraph`]; [`PgtNet`] pairs a graph with its
//! weights and offers eager inference, taped training forwards and the
//! binary weight container.

mod forward;
mod graph;
mod io;
mod policy;

pub use forward::{EagerExec, Executor, Outputs, ParamVars, RunMode, TapeExec};
pub use graph::{
    build, Activation, BlockSpec, Branch, ConcatEdge, ConvSpec, Init, LayerRow, ModelGraph,
    Variant, BINARY_BLOCKS, EDGE_NARROW_BLOCKS, EDGE_WIDE_BLOCKS, KERNEL, MAIN_BLOCKS,
    SHARED_BLOCKS,
};
pub use io::{
    load_weights, save_weights, DType, StoredTensor, WeightFile, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};
pub use policy::{epsilon, PolicyKind, ScalingPolicy, StageNumbering};

pub(crate) fn io_reader(bytes: &[u8]) -> io::Reader<'_> {
    io::Reader { buf: bytes, pos: 0 }
}

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Scalar, Tensor4};

/// Weights and biases aligned with `ModelGraph::convs`. Biases are `(1, C, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Scalar> {
    pub weights: Vec<Tensor4<T>>,
    pub biases: Vec<Tensor4<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(graph: &ModelGraph) -> Self {
        Params {
            weights: graph
                .convs
                .iter()
                .map(|c| Tensor4::zeros(c.weight_shape()))
                .collect(),
            biases: graph
                .convs
                .iter()
                .map(|c| Tensor4::zeros(c.bias_shape()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            weights: self.weights.iter().map(Tensor4::cast).collect(),
            biases: self.biases.iter().map(Tensor4::cast).collect(),
        }
    }

    /// Tensors in container order: weight then bias of each conv.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor4<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor4<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }
}

/// A graph plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PgtNet<T: Scalar = f64> {
    pub graph: ModelGraph,
    pub params: Params<T>,
}

impl<T: Scalar> PgtNet<T> {
    /// Uniform fan-in / Xavier initialization with zero biases; conv `i` draws
    /// from its own stream derived from `seed_value`.
    pub fn init(graph: ModelGraph, seed_value: u64) -> Self {
        let mut params = Params::zeros(&graph);
        for (i, c) in graph.convs.iter().enumerate() {
            let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
            let fan_out = (c.out_channels * c.kernel * c.kernel) as f64;
            let bound = match c.init {
                Init::FanIn => (1.0 / fan_in).sqrt(),
                Init::Xavier => (6.0 / (fan_in + fan_out)).sqrt(),
            };
            let mut rng = seed::derived_rng(seed_value, "init", i as u64);
            for v in params.weights[i].data_mut() {
                *v = T::from_f64(rng.gen_range(-bound..bound));
            }
        }
        PgtNet { graph, params }
    }

    pub fn zeros(graph: ModelGraph) -> Self {
        let params = Params::zeros(&graph);
        PgtNet { graph, params }
    }

    pub fn cast<U: Scalar>(&self) -> PgtNet<U> {
        PgtNet {
            graph: self.graph.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, s: crate::tensor::Shape4) -> Result<()> {
        if s.c != 1 || s.n == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(
                "forward",
                format!("expected (B,1,H,W) input, got {s}"),
            ));
        }
        Ok(())
    }

    /// Raw outputs: sigmoid binary map and the unclamped main prediction.
    pub fn forward(&self, noisy: &Tensor4<T>) -> Result<Outputs<Tensor4<T>>> {
        self.check_input(noisy.shape())?;
        self.graph.run(
            &mut EagerExec {
                params: &self.params,
            },
            noisy,
            RunMode::Full,
        )
    }

    /// Inference outputs: like [`PgtNet::forward`] with `main` clamped to `[0, 1]`.
    pub fn infer(&self, noisy: &Tensor4<T>) -> Result<Outputs<Tensor4<T>>> {
        let mut out = self.forward(noisy)?;
        out.main = out.main.map(|m| clamp_unit(&m));
        Ok(out)
    }

    /// Puts every parameter on `tape`; those rejected by `trainable` become constants.
    pub fn register(
        &self,
        tape: &Tape<T>,
        trainable: impl Fn(&ConvSpec) -> bool,
    ) -> Result<ParamVars> {
        let mut weights = Vec::with_capacity(self.graph.convs.len());
        let mut biases = Vec::with_capacity(self.graph.convs.len());
        for (i, c) in self.graph.convs.iter().enumerate() {
            let rg = trainable(c);
            weights.push(tape.leaf(self.params.weights[i].clone(), rg)?);
            biases.push(tape.leaf(self.params.biases[i].clone(), rg)?);
        }
        Ok(ParamVars { weights, biases })
    }

    /// Records the forward pass on `tape`.
    pub fn forward_taped(
        &self,
        tape: &Tape<T>,
        params: &ParamVars,
        input: Var,
        mode: RunMode,
    ) -> Result<Outputs<Var>> {
        self.check_input(tape.shape(input))?;
        self.graph.run(&mut TapeExec { tape, params }, &input, mode)
    }
}

pub(crate) fn clamp_unit<T: Scalar>(t: &Tensor4<T>) -> Tensor4<T> {
    t.map(|v| {
        if v < T::ZERO {
            T::ZERO
        } else if v > T::ONE {
            T::ONE
        } else {
            v
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_half_binary() {
        let g = build(Variant::Block84Multitask, ScalingPolicy::proposed(), 8).unwrap();
        let net = PgtNet::<f64>::zeros(g);
        let x = Tensor4::full([2, 1, 12, 20], 0.3);
        let out = net.forward(&x).unwrap();
        let b = out.binary.unwrap();
        assert_eq!(b.shape().dims(), [2, 1, 12, 20]);
        assert!(b.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.main.unwrap().shape().dims(), [2, 1, 12, 20]);
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        for v in Variant::ALL {
            let g = build(v, ScalingPolicy::proposed(), 8).unwrap();
            let net = PgtNet::<f32>::init(g, 3);
            let x = Tensor4::full([1, 1, 10, 14], 0.5f32);
            let a = net.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            assert_eq!(a.main.as_ref().unwrap(), b.main.as_ref().unwrap());
            assert_eq!(a.binary.is_some(), v.is_multitask());
            let m = net.infer(&x).unwrap().main.unwrap();
            assert!(m.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn taped_matches_eager() {
        let g = build(Variant::Edge, ScalingPolicy::proposed(), 8).unwrap();
        let net = PgtNet::<f64>::init(g, 9);
        let x = Tensor4::from_vec(
            [1, 1, 6, 9],
            (0..54).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let pv = net.register(&tape, |_| true).unwrap();
        let xi = tape.constant(x.clone()).unwrap();
        let out = net.forward_taped(&tape, &pv, xi, RunMode::Full).unwrap();
        assert_eq!(
            *tape.value(out.main.unwrap()),
            net.forward(&x).unwrap().main.unwrap()
        );
    }

    #[test]
    fn rejects_multichannel_input() {
        let g = build(Variant::Edge, ScalingPolicy::proposed(), 8).unwrap();
        let net = PgtNet::<f64>::zeros(g);
        assert!(net.forward(&Tensor4::zeros([1, 2, 8, 8])).is_err());
    }
}
