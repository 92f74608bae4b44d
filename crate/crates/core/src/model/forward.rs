//! One forward definition, many back ends.
//!
//! [`ModelGraph::run`] walks the dataflow through an [`Executor`]; the taped
//! executor records gradients, the eager one computes plain tensors, and the
//! quantizer wraps the eager one to fake-quantize activations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::model::graph::{Activation, BlockSpec, ModelGraph};
use crate::model::Params;
use crate::tensor::{Scalar, Tensor4};

/// Primitive operations the forward pass needs.
pub trait Executor {
    type Value;

    /// Applies convolution `layer` of the graph.
    fn conv(&mut self, layer: usize, x: &Self::Value) -> Result<Self::Value>;
    fn activation(&mut self, x: &Self::Value, act: Activation) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn residual(
        &mut self,
        trunk: &Self::Value,
        branch: &Self::Value,
        epsilon: f64,
    ) -> Result<Self::Value>;
}

/// Which heads to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Full,
    /// Stop after the binary head (phase-1 training).
    BinaryOnly,
}

/// Network outputs. `main` is absent only in [`RunMode::BinaryOnly`].
#[derive(Debug, Clone)]
pub struct Outputs<V> {
    pub binary: Option<V>,
    pub main: Option<V>,
}

impl<V> Outputs<V> {
    pub fn main(&self) -> Result<&V> {
        self.main
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("main output was not computed".into()))
    }

    pub fn binary(&self) -> Result<&V> {
        self.binary
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("variant has no binary output".into()))
    }
}

fn block<E: Executor>(e: &mut E, b: &BlockSpec, x: &E::Value) -> Result<E::Value> {
    let h = e.conv(b.conv1, x)?;
    let h = e.activation(&h, b.activation)?;
    let h = e.conv(b.conv2, &h)?;
    e.residual(x, &h, b.epsilon)
}

fn chain<'g, E: Executor>(
    e: &mut E,
    mut blocks: impl Iterator<Item = &'g BlockSpec>,
    x: &E::Value,
) -> Result<E::Value> {
    let Some(first) = blocks.next() else {
        return e.concat(&[x]);
    };
    let mut h = block(e, first, x)?;
    for b in blocks {
        h = block(e, b, &h)?;
    }
    Ok(h)
}

impl ModelGraph {
    /// Evaluates the dataflow on a `(B, 1, H, W)` input.
    pub fn run<E: Executor>(
        &self,
        e: &mut E,
        input: &E::Value,
        mode: RunMode,
    ) -> Result<Outputs<E::Value>> {
        use crate::model::graph::Branch;
        let g = &self.glue;
        let h = e.conv(g.stem[0], input)?;
        let h = e.activation(&h, Activation::Relu)?;
        let bfm = e.conv(g.stem[1], &h)?;

        if let (Some(ba), Some(bh), Some(mi)) = (g.binary_adapter, g.binary_head, g.main_in_adapter)
        {
            let shared = chain(e, self.blocks_in(Branch::Shared), &bfm)?;
            let b = chain(e, self.blocks_in(Branch::Binary), &shared)?;
            let b = e.concat(&[&b, &bfm])?;
            let b = e.conv(ba, &b)?;
            let b = e.conv(bh, &b)?;
            let binary = e.activation(&b, Activation::Sigmoid)?;
            if mode == RunMode::BinaryOnly {
                return Ok(Outputs {
                    binary: Some(binary),
                    main: None,
                });
            }
            let m = e.concat(&[&shared, &binary])?;
            let m = e.conv(mi, &m)?;
            let m = chain(e, self.blocks_in(Branch::Main), &m)?;
            let m = e.concat(&[&m, &bfm])?;
            let m = e.conv(g.out_adapter, &m)?;
            let main = e.conv(g.head, &m)?;
            return Ok(Outputs {
                binary: Some(binary),
                main: Some(main),
            });
        }
        if mode == RunMode::BinaryOnly {
            return Err(Error::InvalidArgument(format!(
                "{} has no binary branch",
                self.variant
            )));
        }
        let split = self
            .blocks
            .iter()
            .position(|b| b.channels != self.base_channels)
            .unwrap_or(self.blocks.len());
        let mut h = chain(e, self.blocks[..split].iter(), &bfm)?;
        if split < self.blocks.len() {
            let t = g.transition.ok_or_else(|| {
                Error::InvalidArgument("width change without a transition conv".into())
            })?;
            h = e.conv(t, &h)?;
            h = chain(e, self.blocks[split..].iter(), &h)?;
        }
        let m = e.concat(&[&h, &bfm])?;
        let m = e.conv(g.out_adapter, &m)?;
        let main = e.conv(g.head, &m)?;
        Ok(Outputs {
            binary: None,
            main: Some(main),
        })
    }
}

/// Records the forward pass on a tape.
pub struct TapeExec<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamVars,
}

/// Tape handles of every weight and bias, aligned with `ModelGraph::convs`.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl<T: Scalar> Executor for TapeExec<'_, T> {
    type Value = Var;

    fn conv(&mut self, layer: usize, x: &Var) -> Result<Var> {
        self.tape.conv2d(
            *x,
            self.params.weights[layer],
            self.params.biases[layer],
            Padding::Same,
        )
    }

    fn activation(&mut self, x: &Var, act: Activation) -> Result<Var> {
        Ok(match act {
            Activation::Relu => self.tape.relu(*x),
            Activation::Sigmoid => self.tape.sigmoid(*x),
        })
    }

    fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        if let [one] = parts {
            return Ok(**one);
        }
        let v: Vec<Var> = parts.iter().map(|p| **p).collect();
        self.tape.concat_channels(&v)
    }

    fn residual(&mut self, trunk: &Var, branch: &Var, epsilon: f64) -> Result<Var> {
        self.tape.scaled_residual_add(*trunk, *branch, epsilon)
    }
}

/// Plain tensor evaluation without gradient bookkeeping.
pub struct EagerExec<'a, T: Scalar> {
    pub params: &'a Params<T>,
}

impl<T: Scalar> Executor for EagerExec<'_, T> {
    type Value = Tensor4<T>;

    fn conv(&mut self, layer: usize, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        kernels::conv2d(
            x,
            &self.params.weights[layer],
            self.params.biases[layer].data(),
            Padding::Same,
        )
    }

    fn activation(&mut self, x: &Tensor4<T>, act: Activation) -> Result<Tensor4<T>> {
        Ok(match act {
            Activation::Relu => kernels::relu(x),
            Activation::Sigmoid => kernels::sigmoid(x),
        })
    }

    fn concat(&mut self, parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
        kernels::concat_channels(parts)
    }

    fn residual(
        &mut self,
        trunk: &Tensor4<T>,
        branch: &Tensor4<T>,
        epsilon: f64,
    ) -> Result<Tensor4<T>> {
        kernels::scaled_residual_add(trunk, branch, T::from_f64(epsilon))
    }
}
