//! First-order optimizers with serializable state.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{Scalar, Tensor4};

const OPTIM_MAGIC: &[u8; 4] = b"PGTO";
const OPTIM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            o => Err(Error::Config(format!(
                "unknown optimizer {o:?} (adam or sgd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Moments are kept in `f64` whatever the parameter type.
/// Tensors that never receive a gradient keep empty moments and are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_tensors: usize) -> Self {
        Optimizer {
            cfg,
            t: 0,
            m: vec![Vec::new(); n_tensors],
            v: vec![Vec::new(); n_tensors],
        }
    }

    /// Applies one update. `grads` is in container order (weight, bias per conv);
    /// `None` leaves the tensor bit-identical.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut Params<T>,
        grads: &[Option<Tensor4<T>>],
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("grad {} for param {}", g.shape(), p.shape()),
                ));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv = T::from_f64(pv.to_f64() - c.learning_rate * gv.to_f64());
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    if m.is_empty() {
                        m.resize(p.len(), 0.0);
                        v.resize(p.len(), 0.0);
                    }
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gf = gv.to_f64();
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gf;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gf * gf;
                        let upd = c.learning_rate * (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                        *pv = T::from_f64(pv.to_f64() - upd);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OPTIM_MAGIC);
        out.extend_from_slice(&OPTIM_VERSION.to_le_bytes());
        out.push(match self.cfg.kind {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
        });
        for x in [
            self.cfg.learning_rate,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.eps,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::model::io_reader(bytes);
        if r.take(4)? != OPTIM_MAGIC {
            return Err(Error::Format("not an optimizer state blob".into()));
        }
        if r.u32()? != OPTIM_VERSION {
            return Err(Error::Format("optimizer state version mismatch".into()));
        }
        let kind = match r.u8()? {
            0 => OptimizerKind::Adam,
            1 => OptimizerKind::Sgd,
            k => return Err(Error::Format(format!("unknown optimizer tag {k}"))),
        };
        let mut f = [0.0; 4];
        for x in &mut f {
            *x = f64::from_le_bytes(r.array()?);
        }
        let t = r.u64()?;
        let n = r.u32()? as usize;
        let (mut ms, mut vs) = (
            Vec::with_capacity(n.min(1 << 16)),
            Vec::with_capacity(n.min(1 << 16)),
        );
        for _ in 0..n {
            let len = r.u64()? as usize;
            let raw = r.take(
                len.checked_mul(16)
                    .ok_or_else(|| Error::Format("bad moment length".into()))?,
            )?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ms.push(vals[..len].to_vec());
            vs.push(vals[len..].to_vec());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after optimizer state".into()));
        }
        Ok(Optimizer {
            cfg: OptimizerConfig {
                kind,
                learning_rate: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
            },
            t,
            m: ms,
            v: vs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, PgtNet, ScalingPolicy, Variant};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let g = build(Variant::Edge, ScalingPolicy::proposed(), 8).unwrap();
        let mut net = PgtNet::<f64>::zeros(g);
        let n = net.params.tensors().count();
        let mut opt = Optimizer::new(OptimizerConfig::default(), n);
        let mut grads: Vec<Option<Tensor4<f64>>> = vec![None; n];
        grads[0] = Some(Tensor4::full(net.params.weights[0].shape(), 3.0));
        opt.step(&mut net.params, &grads).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!(net.params.weights[0]
            .data()
            .iter()
            .all(|&v| (v + 1e-3).abs() < 1e-9));
        assert!(net.params.weights[1].data().iter().all(|&v| v == 0.0));
        let back = Optimizer::from_bytes(&opt.to_bytes()).unwrap();
        assert_eq!(back, opt);
    }
}
