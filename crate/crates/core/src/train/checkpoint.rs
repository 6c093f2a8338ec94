//! Checkpoint file: `RFMCKPT1`, `u32` header length, JSON header, parameter
//! table, then the first and second moments as tensors in trainable order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_params, write_params, ModelConfig, VelocityModel};
use crate::optim::{AdamHyper, OptimizerState};
use crate::tensor::{read_tensor, read_u32, write_tensor};

const MAGIC: &[u8; 8] = b"RFMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_clap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    /// Epochs completed when this file was written.
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    pub adam: AdamHyper,
    pub adam_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: VelocityModel,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        write_params(w, self.model.params())?;
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut header = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let params = read_params(r)?;
        let model = VelocityModel::from_params(header.model.clone(), &params)?;
        let n = model.params().trainable().len();
        let mut moments = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            moments.push(read_tensor(r)?);
        }
        let v = moments.split_off(n);
        let optimizer = OptimizerState {
            hyper: header.adam,
            step: header.adam_step,
            m: moments,
            v,
        };
        optimizer.check_matches(model.params())?;
        Ok(Self {
            header,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// Loads a checkpoint and checks it was built for `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.header.model != expected {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different architecture: {:?}",
                path.display(),
                ck.header.model
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_moments() {
        let cfg = ModelConfig::miniature();
        let mut model = VelocityModel::new(cfg.clone()).unwrap();
        let mut opt = OptimizerState::new(model.params(), AdamHyper::default());
        let grads: Vec<Vec<f64>> = model
            .params()
            .trainable()
            .into_iter()
            .map(|id| vec![0.01; model.params().get(id).numel()])
            .collect();
        opt.apply(model.params_mut(), &grads, 1e-3).unwrap();
        let ck = Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                model: cfg.clone(),
                config_hash: "abc".into(),
                epochs_done: 1,
                history: vec![EpochRecord {
                    epoch: 0,
                    loss: 0.5,
                    val_clap: 0.25,
                }],
                adam: opt.hyper,
                adam_step: opt.step,
            },
            model,
            optimizer: opt,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load_for(&path, &cfg).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.optimizer, ck.optimizer);
        let other = ModelConfig { c0: 8, ..cfg };
        assert!(matches!(
            Checkpoint::load_for(&path, &other),
            Err(Error::Checkpoint(_))
        ));
    }
}
