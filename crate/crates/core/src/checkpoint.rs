//! Checkpoint container: a directory holding `manifest.json` and
//! `tensors.bin`, the latter a concatenation of little-endian f32 tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::params::{Adam, ParamStore};
use crate::synthworld::dataset::write_json_atomic;
use crate::textfront::Vocab;

pub const CHECKPOINT_FORMAT: &str = "care-ckpt/1";
const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into `tensors.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub stage: Stage,
    pub step: u64,
    /// The training configuration that produced the weights.
    pub config: serde_json::Value,
    pub vocab: Vocab,
    /// Adam step counter when optimiser moments are stored.
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn new(stage: Stage, step: u64, config: serde_json::Value, vocab: Vocab, params: ParamStore<f32>, optimizer: Option<Adam<f32>>) -> Self {
        Self {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT.into(),
                stage,
                step,
                config,
                vocab,
                optimizer_step: optimizer.as_ref().map(|o| o.t),
                tensors: Vec::new(),
            },
            params,
            optimizer,
        }
    }

    /// Writes into a sibling temp directory and renames it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut named: Vec<(String, &Array2<f32>)> = self
            .params
            .ids()
            .map(|id| (self.params.name(id).to_string(), self.params.get(id)))
            .collect();
        if let Some(opt) = &self.optimizer {
            for id in self.params.ids() {
                let name = self.params.name(id);
                if let (Some(Some(m)), Some(Some(v))) = (opt.m.get(id.0), opt.v.get(id.0)) {
                    named.push((format!("{OPTIM_M}{name}"), m));
                    named.push((format!("{OPTIM_V}{name}"), v));
                }
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.optimizer_step = self.optimizer.as_ref().map(|o| o.t);
        manifest.tensors.clear();
        let mut bytes = Vec::new();
        for (name, t) in named {
            manifest.tensors.push(TensorEntry {
                name,
                rows: t.nrows(),
                cols: t.ncols(),
                offset: bytes.len(),
            });
            for &x in t.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }

        let name = dir
            .file_name()
            .ok_or_else(|| CareError::Input(format!("bad checkpoint path {}", dir.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        {
            let mut f = fs::File::create(tmp.join("tensors.bin"))?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        write_json_atomic(&tmp.join("manifest.json"), &manifest)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| CareError::Input(format!("{}: cannot read checkpoint manifest: {e}", dir.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_FORMAT {
            return Err(CareError::Input(format!(
                "{}: checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                dir.display(),
                manifest.format_version
            )));
        }
        let bytes = fs::read(dir.join("tensors.bin"))?;
        let mut params = ParamStore::new();
        let mut moments = Vec::new();
        for e in &manifest.tensors {
            let n = e.rows * e.cols;
            let end = e.offset + n * 4;
            let raw = bytes
                .get(e.offset..end)
                .ok_or_else(|| CareError::Input(format!("{}: tensor `{}` past end of tensors.bin", dir.display(), e.name)))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let arr = Array2::from_shape_vec((e.rows, e.cols), data).expect("sized above");
            if e.name.starts_with(OPTIM_M) || e.name.starts_with(OPTIM_V) {
                moments.push((e.name.clone(), arr));
            } else {
                params.insert(e.name.clone(), arr)?;
            }
        }
        let optimizer = match manifest.optimizer_step {
            None => None,
            Some(t) => {
                let mut opt = Adam::new(params.len(), 0.0);
                opt.t = t;
                for (name, arr) in moments {
                    let (table, pname) = match name.strip_prefix(OPTIM_M) {
                        Some(p) => (&mut opt.m, p),
                        None => (&mut opt.v, &name[OPTIM_V.len()..]),
                    };
                    let id = params.require(pname)?;
                    table[id.0] = Some(arr);
                }
                Some(opt)
            }
        };
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.manifest.config.clone())?)
    }
}
