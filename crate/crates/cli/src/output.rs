use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ModelSpec, RunConfig, Values};

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// SHA-256 over the effective configuration and the bytes of every input file.
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new(command: &'static str, cfg: &RunConfig) -> Result<Self> {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(cfg)?);
        let mut inputs = Vec::new();
        if let Some(ModelSpec::File(p)) = &cfg.model {
            inputs.push(p);
        }
        for v in [&cfg.commitments, &cfg.realizations].into_iter().flatten() {
            if let Values::File(p) = v {
                inputs.push(p);
            }
        }
        inputs.extend(cfg.history.as_ref());
        for p in inputs {
            // Missing files surface later with a proper message.
            if let Ok(bytes) = fs::read(p) {
                h.update(bytes);
            }
        }
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: format!("{:x}", h.finalize()),
            seed: cfg.seed,
        })
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    provenance: &'a Provenance,
    report: &'a T,
}

fn render<T: Serialize>(provenance: &Provenance, report: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(&Envelope { provenance, report })?;
    buf.push(b'\n');
    Ok(buf)
}

/// Writes the report to `out`, or stdout when `out` is `None`.
pub fn emit<T: Serialize>(out: Option<&Path>, provenance: &Provenance, report: &T) -> Result<()> {
    let bytes = render(provenance, report)?;
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().lock().write_all(&bytes)?;
            Ok(())
        }
    }
}

pub fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))
}
