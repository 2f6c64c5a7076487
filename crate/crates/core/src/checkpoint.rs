//! Binary checkpoint container: magic, format version, JSON metadata, then
//! little-endian f32 parameters and optional Adam moments.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"VXLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub crate_version: String,
    pub model: ModelConfig,
    pub stage: Stage,
    pub seed: u64,
    pub epoch: usize,
    /// Lesion-level decision threshold chosen on the validation split.
    pub threshold: Option<f64>,
    pub adam_steps: u64,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
    pub adam: Option<(Vec<f32>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, stage: Stage, seed: u64, epoch: usize, adam: Option<&Adam>) -> Self {
        let tensors = model
            .params()
            .infos()
            .iter()
            .map(|i| TensorMeta { name: i.name.clone(), shape: i.shape.clone() })
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                model: model.config().clone(),
                stage,
                seed,
                epoch,
                threshold: None,
                adam_steps: adam.map_or(0, Adam::steps),
                tensors,
            },
            params: model.params().values().to_vec(),
            adam: adam.map(|a| {
                let (m, v) = a.moments();
                (m.to_vec(), v.to_vec())
            }),
        }
    }

    /// Rebuild the model; tensor names and shapes must match the config.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.model.clone(), 0)?;
        let infos = model.params().infos();
        let same = infos.len() == self.meta.tensors.len()
            && infos
                .iter()
                .zip(&self.meta.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same {
            return Err(Error::InvalidArgument(
                "checkpoint tensors do not match the model configuration".into(),
            ));
        }
        model.params_mut().load(self.params.clone())?;
        Ok(model)
    }

    pub fn optimizer(&self) -> Option<Adam> {
        self.adam
            .as_ref()
            .map(|(m, v)| Adam::from_state(m.clone(), v.clone(), self.meta.adam_steps))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(32 + meta.len() + self.params.len() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        push_f32s(&mut out, &self.params);
        match &self.adam {
            Some((m, v)) => {
                out.push(1);
                push_f32s(&mut out, m);
                push_f32s(&mut out, v);
            }
            None => out.push(0),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r);
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(&mut r, path)?);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(&mut r, path)?) as usize;
        if r.len() < meta_len {
            return Err(bad("truncated metadata"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..meta_len])?;
        r = &r[meta_len..];
        let params = read_f32s(&mut r, path)?;
        let flag: [u8; 1] = take(&mut r, path)?;
        let adam = match flag[0] {
            0 => None,
            1 => Some((read_f32s(&mut r, path)?, read_f32s(&mut r, path)?)),
            _ => return Err(bad("bad optimiser flag")),
        };
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let expected: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if expected != params.len() || adam.as_ref().is_some_and(|(m, v)| m.len() != expected || v.len() != expected) {
            return Err(bad("parameter payload does not match tensor table"));
        }
        Ok(Checkpoint { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take<const N: usize>(r: &mut &[u8], path: &Path) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::format(path, "truncated checkpoint"))?;
    Ok(b)
}

fn read_f32s(r: &mut &[u8], path: &Path) -> Result<Vec<f32>> {
    let n = u64::from_le_bytes(take(r, path)?) as usize;
    if r.len() < n * 4 {
        return Err(Error::format(path, "truncated tensor payload"));
    }
    let (head, tail) = r.split_at(n * 4);
    *r = tail;
    Ok(head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        Model::new(
            ModelConfig {
                levels: 2,
                base_channels: 2,
                num_scales: 2,
                patch_size: [8; 3],
                pool_kernel: 4,
                fc_hidden: 4,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small();
        let mut adam = Adam::new(m.num_parameters());
        let mut p = m.params().values().to_vec();
        let g = vec![0.1f32; p.len()];
        adam.step(&mut p, &g, 1e-3);
        let mut ck = Checkpoint::from_model(&m, Stage::Pretrain, 9, 3, Some(&adam));
        ck.meta.threshold = Some(0.37);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model().unwrap().params(), m.params());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nonsense", Path::new("x")).is_err());
        let ck = Checkpoint::from_model(&small(), Stage::Finetune, 0, 0, None);
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
