//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order. [`Tape::backward`] walks the nodes once in reverse and
//! leaves gradients on the leaves that asked for them. A tape can be consumed
//! only once; build a fresh tape for every step.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the tape, e.g. a fused loss.
pub trait Function<T: Scalar = f64> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor4<T>]) -> Result<Tensor4<T>>;

    /// Gradients for each input, given the upstream gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        padding: Padding,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    ScaledAdd {
        trunk: Var,
        branch: Var,
        epsilon: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Custom(Box<dyn Function<T>>, Vec<Var>),
}

struct Node<T: Scalar> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor4<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Inner<T> {
    fn default() -> Self {
        Inner {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }
}

/// Gradient tape. Single-threaded; one tape per forward/backward pass.
pub struct Tape<T: Scalar = f64> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            inner: RefCell::new(Inner::default()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(inner.nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].requires_grad)
    }

    /// Records an input. Non-finite data is rejected.
    pub fn leaf(&self, value: Tensor4<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, value: Tensor4<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor4<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor4<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.inner.borrow().nodes[v.0].value.shape()
    }

    /// Scalar value of a `(1,1,1,1)` node.
    pub fn item(&self, v: Var) -> f64 {
        self.inner.borrow().nodes[v.0].value.data()[0].to_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` if it received none.
    pub fn grad(&self, v: Var) -> Option<Tensor4<T>> {
        self.inner.borrow().grads.get(v.0).cloned().flatten()
    }

    /// Moves the gradient out of the tape.
    pub fn take_grad(&self, v: Var) -> Option<Tensor4<T>> {
        self.inner
            .borrow_mut()
            .grads
            .get_mut(v.0)
            .and_then(Option::take)
    }

    /// Bias is a `(1, out_c, 1, 1)` tensor.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let b = &inner.nodes[bias.0].value;
            if b.shape().n != 1 || b.shape().plane() != 1 {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must be (1,C,1,1), got {}", b.shape()),
                ));
            }
            kernels::conv2d(
                &inner.nodes[input.0].value,
                &inner.nodes[weight.0].value,
                b.data(),
                padding,
            )?
        };
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = kernels::relu(&self.value(x));
        let rg = self.requires(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = kernels::sigmoid(&self.value(x));
        let rg = self.requires(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let refs: Vec<&Tensor4<T>> = parts.iter().map(|p| &inner.nodes[p.0].value).collect();
            kernels::concat_channels(&refs)?
        };
        let rg = self.requires(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn scaled_residual_add(&self, trunk: Var, branch: Var, epsilon: f64) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            kernels::scaled_residual_add(
                &inner.nodes[trunk.0].value,
                &inner.nodes[branch.0].value,
                T::from_f64(epsilon),
            )?
        };
        let rg = self.requires(&[trunk, branch]);
        Ok(self.push(
            out,
            Op::ScaledAdd {
                trunk,
                branch,
                epsilon,
            },
            rg,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            kernels::scaled_residual_add(&inner.nodes[a.0].value, &inner.nodes[b.0].value, T::ONE)?
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(Error::shape(
                    "mul",
                    format!("{} vs {}", x.shape(), y.shape()),
                ));
            }
            let d = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| p * q)
                .collect();
            Tensor4::from_vec_unchecked(x.shape(), d)
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, x: Var, k: f64) -> Var {
        let kk = T::from_f64(k);
        let out = self.value(x).map(|v| v * kk);
        let rg = self.requires(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        let rg = self.requires(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument("weighted_sum of no terms".into()))
    }

    pub fn apply(&self, f: Box<dyn Function<T>>, inputs: &[Var]) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let refs: Vec<&Tensor4<T>> = inputs.iter().map(|p| &inner.nodes[p.0].value).collect();
            f.forward(&refs)?
        };
        let rg = self.requires(inputs);
        Ok(self.push(out, Op::Custom(f, inputs.to_vec()), rg))
    }

    /// Back-propagates from a scalar loss. Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_val = &inner.nodes[loss.0].value;
        if loss_val.len() != 1 {
            return Err(Error::NonScalarLoss(loss_val.len()));
        }
        loss_val.ensure_finite("loss")?;
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor4::full(loss_val.shape(), T::ONE));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = node_backward(nodes, node, &g)?;
            for (var, cg) in contributions {
                if !nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[var.0], cg);
            }
        }
        // Only leaves keep gradients.
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].requires_grad {
                *g = None;
            }
        }
        inner.grads = grads;
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn node_backward<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor4<T>,
) -> Result<Vec<(Var, Tensor4<T>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d {
            input,
            weight,
            bias,
            padding,
        } => {
            let grads =
                kernels::conv2d_backward(val(*input), val(*weight), *padding, g, rg(*input))?;
            let mut v = Vec::with_capacity(3);
            if let Some(gi) = grads.input {
                v.push((*input, gi));
            }
            v.push((*weight, grads.weight));
            v.push((
                *bias,
                Tensor4::from_vec_unchecked(val(*bias).shape(), grads.bias),
            ));
            v
        }
        Op::Relu(x) => {
            let d = val(*x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| if xv > T::ZERO { gv } else { T::ZERO })
                .collect();
            vec![(*x, Tensor4::from_vec_unchecked(g.shape(), d))]
        }
        Op::Sigmoid(x) => {
            let d = node
                .value
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gv)| gv * s * (T::ONE - s))
                .collect();
            vec![(*x, Tensor4::from_vec_unchecked(g.shape(), d))]
        }
        Op::Concat(parts) => {
            let mut start = 0;
            let mut v = Vec::with_capacity(parts.len());
            for p in parts {
                let c = val(*p).shape().c;
                if rg(*p) {
                    v.push((*p, g.slice_channels(start, c)?));
                }
                start += c;
            }
            v
        }
        Op::ScaledAdd {
            trunk,
            branch,
            epsilon,
        } => {
            let e = T::from_f64(*epsilon);
            vec![(*trunk, g.clone()), (*branch, g.map(|x| x * e))]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => {
            let ga = g
                .data()
                .iter()
                .zip(val(*b).data())
                .map(|(&p, &q)| p * q)
                .collect();
            let gb = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(&p, &q)| p * q)
                .collect();
            vec![
                (*a, Tensor4::from_vec_unchecked(g.shape(), ga)),
                (*b, Tensor4::from_vec_unchecked(g.shape(), gb)),
            ]
        }
        Op::Scale(x, k) => {
            let kk = T::from_f64(*k);
            vec![(*x, g.map(|v| v * kk))]
        }
        Op::Sum(x) => vec![(*x, Tensor4::full(val(*x).shape(), g.data()[0]))],
        Op::Custom(f, inputs) => {
            let refs: Vec<&Tensor4<T>> = inputs.iter().map(|v| val(*v)).collect();
            let gs = f.backward(&refs, &node.value, g)?;
            if gs.len() != inputs.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} returned {} gradients for {} inputs",
                    f.name(),
                    gs.len(),
                    inputs.len()
                )));
            }
            inputs
                .iter()
                .zip(gs)
                .filter_map(|(v, g)| g.map(|g| (*v, g)))
                .collect()
        }
    };
    Ok(out)
}
