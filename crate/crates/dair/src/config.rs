//! Flat `key = value` configuration files.

use std::path::Path;

use dair_core::training::TrainConfig;

use crate::error::{CliError, Result};

/// Pairs from `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` override.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).ok_or_else(|| format!("`{s}` is not key=value"))
}

/// Defaults, then the file at `path`, then `overrides` in order.
pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    resolve_from(TrainConfig::default(), path, overrides)
}

/// As [`resolve`], starting from `base` instead of the defaults.
pub fn resolve_from(base: TrainConfig, path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
        for (k, v) in parse_kv(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn render(cfg: &TrainConfig) -> String {
    cfg.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# desk run\nt1 = 10\npatch=32  # small\n\nchannels = 8,8,16,16\n").unwrap();
        let cfg = resolve(Some(&p), &[("t1".into(), "12".into())]).unwrap();
        assert_eq!((cfg.t1, cfg.patch, cfg.net.channels), (12, 32, [8, 8, 16, 16]));
        let again = parse_kv(&render(&cfg)).unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in again {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(matches!(parse_kv("oops"), Err(CliError::Config(_))));
        assert!(matches!(resolve(None, &[("patch".into(), "12".into())]), Err(CliError::Config(_))));
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(t1 in 0usize..1_000_000, lr in 1e-8f64..1.0, seed: u64, batch in 1usize..64, k in 2usize..32) {
            let cfg = TrainConfig { t1, lr, seed, batch, patch: 8 * k, ..Default::default() };
            let mut back = TrainConfig::default();
            for (k, v) in parse_kv(&render(&cfg)).unwrap() {
                back.set(&k, &v).unwrap();
            }
            prop_assert_eq!(back, cfg);
        }
    }
}
