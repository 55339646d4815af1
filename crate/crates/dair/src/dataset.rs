//! On-disk paired datasets: `clean/` and `degraded/` PNGs indexed by
//! `index.tsv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dair_core::degradations::PairedSample;

use crate::error::{CliError, Result};
use crate::image_io::{read_png, write_png};

pub const INDEX: &str = "index.tsv";
const HEADER: &str = "index\tlabel\tclass\tclean\tdegraded";

/// Loaded samples (signed range) and class names by label.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub classes: Vec<String>,
}

/// Writes every sample and returns the paths written, relative to `dir`.
pub fn write_dataset(dir: &Path, samples: &[PairedSample]) -> Result<Vec<PathBuf>> {
    let mut index = String::from(HEADER);
    index.push('\n');
    let mut written = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let clean = PathBuf::from(format!("clean/{i:05}.png"));
        let degraded = PathBuf::from(format!("degraded/{i:05}.png"));
        write_png(&dir.join(&clean), &s.clean)?;
        write_png(&dir.join(&degraded), &s.degraded)?;
        let _ = writeln!(index, "{i}\t{}\t{}\t{}\t{}", s.label, s.spec, clean.display(), degraded.display());
        written.push(clean);
        written.push(degraded);
    }
    std::fs::write(dir.join(INDEX), index).map_err(CliError::io(dir.join(INDEX)))?;
    written.push(PathBuf::from(INDEX));
    Ok(written)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(INDEX);
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(CliError::Data(format!("{}: unexpected header", path.display())));
    }
    let mut samples = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || CliError::Data(format!("{}: malformed line {}", path.display(), n + 2));
        if f.len() != 5 {
            return Err(bad());
        }
        let label: usize = f[1].parse().map_err(|_| bad())?;
        if classes.len() <= label {
            classes.resize(label + 1, String::new());
        }
        classes[label] = f[2].to_string();
        samples.push(PairedSample {
            clean: read_png(&dir.join(f[3]))?.to_signed(),
            degraded: read_png(&dir.join(f[4]))?.to_signed(),
            label,
            spec: f[2].to_string(),
        });
    }
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", path.display())));
    }
    Ok(Dataset { samples, classes })
}
