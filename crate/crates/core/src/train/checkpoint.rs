//! Training checkpoints: weights, optimizer state and the config that produced them.
//!
//! Layout: magic `PGTC`, u32 version, u64 step, then three length-prefixed
//! (u64) blobs: a `PGTW` weight file, a `PGTO` optimizer state and the
//! config text.

use crate::error::{Error, Result};
use crate::model::{load_weights, save_weights, PgtNet, Variant, WeightFile};
use crate::tensor::Scalar;

use super::{Optimizer, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGTC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub weights: Vec<u8>,
    pub optimizer: Vec<u8>,
    pub config: String,
}

impl Checkpoint {
    pub fn new<T: Scalar>(step: u64, net: &PgtNet<T>, opt: &Optimizer, cfg: &TrainConfig) -> Self {
        Checkpoint {
            step,
            weights: save_weights(net),
            optimizer: opt.to_bytes(),
            config: cfg.to_text(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(self.weights.len() + self.optimizer.len() + self.config.len() + 40);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for blob in [
            &self.weights[..],
            &self.optimizer[..],
            self.config.as_bytes(),
        ] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::model::io_reader(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        if r.u32()? != CHECKPOINT_VERSION {
            return Err(Error::Format("checkpoint version mismatch".into()));
        }
        let step = r.u64()?;
        let mut blobs = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u64()? as usize;
            blobs.push(r.take(n)?.to_vec());
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let config = String::from_utf8(blobs.pop().unwrap())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let optimizer = blobs.pop().unwrap();
        let weights = blobs.pop().unwrap();
        Ok(Checkpoint {
            step,
            weights,
            optimizer,
            config,
        })
    }

    pub fn net<T: Scalar>(&self, expected: Option<Variant>) -> Result<(PgtNet<T>, WeightFile)> {
        load_weights(&self.weights, expected)
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::from_bytes(&self.optimizer)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ScalingPolicy};

    #[test]
    fn round_trip() {
        let g = build(Variant::Edge, ScalingPolicy::proposed(), 8).unwrap();
        let net = PgtNet::<f32>::init(g, 3);
        let mut cfg = TrainConfig::default();
        cfg.variant = Variant::Edge;
        cfg.channels = 8;
        let opt = Optimizer::new(cfg.optimizer, 2 * net.graph.convs.len());
        let ck = Checkpoint::new(17, &net, &opt, &cfg);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.train_config().unwrap(), cfg);
        let (n2, _) = back.net::<f32>(Some(Variant::Edge)).unwrap();
        assert_eq!(n2.params.weights, net.params.weights);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
