//! Checkpoints: config echo, step, parameters and Adam moments in one tensor file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::tensorfile::{TensorFile, KIND_CHECKPOINT};
use crate::model::Model;
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn encode(&self) -> TensorFile {
        let mut meta = self.config.to_record();
        meta.push("state_step", self.state.step)
            .push("adam_step", self.state.adam.step)
            .push_f64("adam_beta1", self.state.adam.beta1)
            .push_f64("adam_beta2", self.state.adam.beta2)
            .push_f64("adam_eps", self.state.adam.eps);
        let mut f = TensorFile::new(KIND_CHECKPOINT, meta);
        let names = self.state.model.names();
        for (n, t) in names.iter().zip(self.state.model.slots()) {
            f.push(format!("param.{n}"), t);
        }
        for (kind, moments) in [("m", &self.state.adam.m), ("v", &self.state.adam.v)] {
            for ((n, t), mv) in names.iter().zip(self.state.model.slots()).zip(moments) {
                f.push(format!("adam.{kind}.{n}"), &Tensor::new(t.shape(), mv.clone()).expect("moment size"));
            }
        }
        f
    }

    pub fn decode(file: &TensorFile, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let config = TrainConfig::from_record(&file.meta)?;
        config.validate()?;
        let mut model = Model::init(config.dims, 0)?;
        let names = model.names();
        for (n, slot) in names.iter().zip(model.slots_mut()) {
            let t = file
                .get(&format!("param.{n}"))
                .ok_or_else(|| bad(format!("missing parameter `{n}`")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "parameter `{n}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        let moments = |kind: &str| -> Result<Vec<Vec<f64>>> {
            names
                .iter()
                .zip(model.slots())
                .map(|(n, p)| {
                    let t = file
                        .get(&format!("adam.{kind}.{n}"))
                        .ok_or_else(|| bad(format!("missing optimiser moment `{kind}` for `{n}`")))?;
                    if t.shape() != p.shape() {
                        return Err(bad(format!("optimiser moment `{kind}` for `{n}` has the wrong shape")));
                    }
                    Ok(t.data().to_vec())
                })
                .collect()
        };
        let adam = AdamState {
            beta1: file.meta.parse("adam_beta1")?,
            beta2: file.meta.parse("adam_beta2")?,
            eps: file.meta.parse("adam_eps")?,
            step: file.meta.parse("adam_step")?,
            m: moments("m")?,
            v: moments("v")?,
        };
        let expected = names.len() * 3;
        if file.tensors.len() != expected {
            return Err(bad(format!("expected {expected} tensors, found {}", file.tensors.len())));
        }
        Ok(Checkpoint {
            state: TrainState {
                model,
                adam,
                step: file.meta.parse("state_step")?,
            },
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.encode().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&TensorFile::load(path, KIND_CHECKPOINT)?, path)
    }

    /// Loads and fails unless the stored dimensions equal `config`'s.
    pub fn load_matching(path: &Path, config: &TrainConfig) -> Result<Self> {
        let c = Self::load(path)?;
        if c.config.dims != config.dims {
            return Err(Error::invalid(format!(
                "{}: checkpoint dimensions {:?} do not match the config {:?}",
                path.display(),
                c.config.dims,
                config.dims
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn config() -> TrainConfig {
        TrainConfig {
            dims: ModelDims {
                height: 8,
                width: 8,
                n_max: 4,
                alphabet: 8,
                d_emb: 6,
                d_model: 6,
                hidden: 5,
                d_align: 4,
                d_img: 4,
                layers: 2,
                crop_h: 4,
                crop_w: 8,
                timesteps: 10,
                ..ModelDims::default()
            },
            total_steps: 3,
            warmup_steps: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 7;
        state.adam.step = 7;
        state.adam.m[0][0] = 0.125;
        state.adam.v[3][1] = 1e-300;
        let ck = Checkpoint { config: cfg, state };
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let p = dir.path().join("c.bin");
        Checkpoint {
            state: TrainState::new(&cfg).unwrap(),
            config: cfg.clone(),
        }
        .save(&p)
        .unwrap();
        let mut other = cfg.clone();
        other.dims.hidden = 9;
        assert!(Checkpoint::load_matching(&p, &other).is_err());
        Checkpoint::load_matching(&p, &cfg).unwrap();
    }

    #[test]
    fn tampered_shapes_are_rejected() {
        let cfg = config();
        let ck = Checkpoint {
            state: TrainState::new(&cfg).unwrap(),
            config: cfg,
        };
        let mut f = ck.encode();
        f.tensors[0].1 = Tensor::zeros(&[1, 1]);
        assert!(Checkpoint::decode(&f, Path::new("x")).is_err());
        let mut f = ck.encode();
        f.tensors.pop();
        assert!(Checkpoint::decode(&f, Path::new("x")).is_err());
    }
}
