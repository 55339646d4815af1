//! Run manifests: the command line, resolved configuration, seed and the
//! SHA-256 of every input and output artefact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use dair_core::training::TrainConfig;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub verb: String,
    pub argv: Vec<String>,
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Value>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(CliError::io(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every regular file under `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(CliError::io(&d))? {
            let p = e.map_err(CliError::io(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Manifest {
    pub fn new(verb: &str, argv: &[String]) -> Self {
        Self { verb: verb.into(), argv: argv.to_vec(), ..Default::default() }
    }

    pub fn file_name(verb: &str) -> String {
        format!("manifest-{verb}.json")
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        for f in files_under(path)? {
            if f.file_name().is_some_and(|n| n.to_string_lossy().starts_with("manifest-")) {
                continue;
            }
            let h = sha256_file(&f)?;
            self.inputs.insert(f.display().to_string(), h);
        }
        Ok(())
    }

    pub fn add_output(&mut self, root: &Path, rel: &Path) -> Result<()> {
        let h = sha256_file(&root.join(rel))?;
        self.outputs.insert(rel.display().to_string(), h);
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let config: Option<Map<String, Value>> =
            self.config.as_ref().map(|c| c.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect());
        json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "verb": self.verb,
            "argv": self.argv,
            "seed": self.seed,
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "metrics": self.metrics,
        })
    }

    /// Writes `manifest-<verb>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let path = dir.join(Self::file_name(&self.verb));
        let text = serde_json::to_string_pretty(&self.to_json()).expect("manifest is valid JSON");
        std::fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
        Ok(path)
    }

    /// The recorded command line of a manifest file.
    pub fn read_argv(path: &Path) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        v["argv"]
            .as_array()
            .and_then(|a| a.iter().map(|s| s.as_str().map(String::from)).collect())
            .ok_or_else(|| CliError::Data(format!("{}: no argv", path.display())))
    }
}
