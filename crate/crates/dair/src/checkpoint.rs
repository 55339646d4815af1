//! Checkpoints: named `f32` arrays plus string metadata in the safetensors
//! container.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use dair_core::nn::ParamStore;
use dair_core::training::{Adam, TrainConfig};
use dair_core::Tensor;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{CliError, Result};

pub const PARAM: &str = "param/";
pub const ADAM_M: &str = "adam_m/";
pub const ADAM_V: &str = "adam_v/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

fn ckpt_err(e: impl std::fmt::Display) -> CliError {
    CliError::Checkpoint(e.to_string())
}

/// Re-emits the JSON header with sorted keys so that equal checkpoints are
/// byte-identical.
fn canonical(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(ckpt_err)?;
    let mut text = serde_json::to_vec(&header).map_err(ckpt_err)?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(&bytes[8 + n..]);
    Ok(out)
}

impl Checkpoint {
    /// Every parameter of `store`, the optimiser state, the step and the
    /// resolved configuration.
    pub fn capture(kind: &str, store: &ParamStore<f32>, adam: Option<&Adam<f32>>, step: usize, cfg: &TrainConfig) -> Self {
        let mut c = Checkpoint::default();
        c.meta.insert("kind".into(), kind.into());
        c.meta.insert("step".into(), step.to_string());
        c.meta.insert("config_hash".into(), format!("{:016x}", cfg.hash()));
        for (k, v) in cfg.entries() {
            c.meta.insert(format!("config.{k}"), v);
        }
        let mut frozen = Vec::new();
        for (id, name, v) in store.iter() {
            c.arrays.insert(format!("{PARAM}{name}"), v.clone());
            if store.is_frozen(id) {
                frozen.push(name.to_string());
            }
        }
        c.meta.insert("frozen".into(), frozen.join(","));
        if let Some(a) = adam {
            c.meta.insert("adam.t".into(), a.t.to_string());
            for (field, v) in [("adam.lr", a.lr), ("adam.beta1", a.beta1), ("adam.beta2", a.beta2), ("adam.eps", a.eps)] {
                c.meta.insert(field.into(), format!("{v:?}"));
            }
            for (id, name, _) in store.iter() {
                let i = id.index();
                if let Some(m) = a.m.get(i).and_then(|m| m.as_ref()) {
                    c.arrays.insert(format!("{ADAM_M}{name}"), m.clone());
                }
                if let Some(v) = a.v.get(i).and_then(|v| v.as_ref()) {
                    c.arrays.insert(format!("{ADAM_V}{name}"), v.clone());
                }
            }
        }
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.data().iter().flat_map(|x| x.to_le_bytes()).collect(), v.shape().to_vec()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| Ok((k.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ckpt_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.meta.clone().into_iter().collect();
        canonical(&safetensors::serialize(views, &Some(meta)).map_err(ckpt_err)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
        let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
        let mut c = Checkpoint::default();
        if let Some(m) = header.metadata() {
            c.meta = m.clone().into_iter().collect();
        }
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(CliError::Checkpoint(format!("array `{name}` is {:?}, expected F32", view.dtype())));
            }
            let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            c.arrays.insert(name, Tensor::new(view.shape(), data)?);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        std::fs::write(path, bytes).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map_or("", |s| s.as_str())
    }

    pub fn step(&self) -> Result<usize> {
        self.meta.get("step").ok_or_else(|| ckpt_err("missing `step`"))?.parse().map_err(ckpt_err)
    }

    /// The configuration stored with the checkpoint.
    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.meta {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }

    /// Warns when `cfg` hashes differently from the stored configuration.
    pub fn check_config(&self, cfg: &TrainConfig) -> bool {
        let want = format!("{:016x}", cfg.hash());
        let same = self.meta.get("config_hash") == Some(&want);
        if !same {
            log::warn!("checkpoint config hash {:?} differs from the run's {want}", self.meta.get("config_hash"));
        }
        same
    }

    /// Copies every parameter whose name starts with `prefix` into `store`.
    pub fn restore_params(&self, store: &mut ParamStore<f32>, prefix: &str) -> Result<usize> {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
        for &id in &ids {
            let key = format!("{PARAM}{}", store.name(id));
            let v = self.arrays.get(&key).ok_or_else(|| dair_core::Error::MissingArray(key.clone()))?;
            store.set(id, v.clone())?;
        }
        Ok(ids.len())
    }

    pub fn has_params(&self, prefix: &str) -> bool {
        self.arrays.keys().any(|k| k.strip_prefix(PARAM).is_some_and(|n| n.starts_with(prefix)))
    }

    /// Optimiser state for the parameters of `store`.
    pub fn restore_adam(&self, store: &ParamStore<f32>, cfg: &TrainConfig) -> Result<Adam<f32>> {
        let mut a = Adam::new(cfg);
        let get = |k: &str| self.meta.get(k).ok_or_else(|| ckpt_err(format!("missing `{k}`")));
        a.t = get("adam.t")?.parse().map_err(ckpt_err)?;
        a.lr = get("adam.lr")?.parse().map_err(ckpt_err)?;
        a.beta1 = get("adam.beta1")?.parse().map_err(ckpt_err)?;
        a.beta2 = get("adam.beta2")?.parse().map_err(ckpt_err)?;
        a.eps = get("adam.eps")?.parse().map_err(ckpt_err)?;
        a.m = vec![None; store.len()];
        a.v = vec![None; store.len()];
        for (id, name, _) in store.iter() {
            a.m[id.index()] = self.arrays.get(&format!("{ADAM_M}{name}")).cloned();
            a.v[id.index()] = self.arrays.get(&format!("{ADAM_V}{name}")).cloned();
        }
        Ok(a)
    }
}
