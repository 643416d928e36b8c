// SPDX-License-Identifier: MIT OR Apache-2.0

//! `CCKP` model checkpoints.
//!
//! Layout (little-endian): magic `CCKP`, `u32` version, length-prefixed JSON
//! architecture descriptor, `u64` seed, length-prefixed JSON training-config
//! echo, `u64` value count, then every parameter as `f64` in canonical order.

use std::path::Path;

use serde_json::Value;

use super::{Architecture, MeanGroup, MlpModel, Network, StreamVars, ToyTransformer, Wiring};
use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::io::ByteReader;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CCKP";
pub const VERSION: u32 = 1;

/// Either supported model family.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Mlp(MlpModel),
    Transformer(ToyTransformer),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Mlp($m) => $e,
            AnyModel::Transformer($m) => $e,
        }
    };
}

impl Network for AnyModel {
    fn architecture(&self) -> Architecture {
        delegate!(self, m => m.architecture())
    }

    fn graph(&self) -> Result<ComputeGraph> {
        delegate!(self, m => m.graph())
    }

    fn parameters(&self) -> Vec<&Tensor> {
        delegate!(self, m => m.parameters())
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        delegate!(self, m => m.parameters_mut())
    }

    fn parameter_names(&self) -> Vec<String> {
        delegate!(self, m => m.parameter_names())
    }

    fn mean_groups(&self) -> Vec<MeanGroup> {
        delegate!(self, m => m.mean_groups())
    }

    fn record(&self, tape: &mut Tape, params: &[Var], wiring: &Wiring) -> Result<StreamVars> {
        delegate!(self, m => m.record(tape, params, wiring))
    }
}

/// Flattened parameters in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn of<N: Network>(model: &N) -> Self {
        Self(
            model
                .parameters()
                .iter()
                .flat_map(|p| p.data().iter().copied())
                .collect(),
        )
    }

    /// Writes these values back into `model`, which must have the same size.
    pub fn apply<N: Network>(&self, model: &mut N) -> Result<()> {
        if self.0.len() != model.parameter_count() {
            return Err(Error::usage(format!(
                "weight vector of {} values for a model with {} parameters",
                self.0.len(),
                model.parameter_count()
            )));
        }
        let mut offset = 0;
        for p in model.parameters_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&self.0[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub seed: u64,
    pub config: Value,
    pub weights: WeightVector,
}

impl Checkpoint {
    pub fn from_model<N: Network>(model: &N, seed: u64, config: Value) -> Self {
        Self {
            architecture: model.architecture(),
            seed,
            config,
            weights: WeightVector::of(model),
        }
    }

    pub fn into_model(self) -> Result<AnyModel> {
        let mut model = match &self.architecture {
            Architecture::Mlp { layer_dims } => AnyModel::Mlp(MlpModel::init(layer_dims, 0)?),
            Architecture::Transformer(c) => AnyModel::Transformer(ToyTransformer::init(*c, 0)?),
        };
        self.weights.apply(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.architecture)?;
        out.extend_from_slice(&(arch.len() as u64).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&self.seed.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.weights.0.len() as u64).to_le_bytes());
        for v in &self.weights.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "not a CCKP checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let n = r.u64()? as usize;
        let at = r.pos();
        let architecture: Architecture = serde_json::from_slice(r.take(n)?)
            .map_err(|e| r.error(at, format!("bad architecture descriptor: {e}")))?;
        let seed = r.u64()?;
        let n = r.u64()? as usize;
        let at = r.pos();
        let config: Value = serde_json::from_slice(r.take(n)?)
            .map_err(|e| r.error(at, format!("bad config echo: {e}")))?;
        let count = r.u64()? as usize;
        let at = r.pos();
        let weights = (0..count).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        r.finish()?;
        let ck = Self {
            architecture,
            seed,
            config,
            weights: WeightVector(weights),
        };
        let needed = ck.clone().into_model().map(|m| m.parameter_count());
        match needed {
            Ok(n) if n == count => Ok(ck),
            Ok(n) => Err(r.error(at, format!("{count} parameters stored, architecture needs {n}"))),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters_bitwise() {
        let model = MlpModel::init(&[4, 3, 2], 5).unwrap();
        let ck = Checkpoint::from_model(&model, 5, serde_json::json!({"lr": 0.001}));
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CCKP");
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_model().unwrap(), AnyModel::Mlp(model));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let model = MlpModel::init(&[4, 3, 2], 5).unwrap();
        let bytes = Checkpoint::from_model(&model, 5, Value::Null).to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn weight_vector_round_trips() {
        let a = MlpModel::init(&[4, 3, 2], 1).unwrap();
        let mut b = MlpModel::init(&[4, 3, 2], 2).unwrap();
        WeightVector::of(&a).apply(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(WeightVector(vec![0.0; 3]).apply(&mut b).is_err());
    }
}
