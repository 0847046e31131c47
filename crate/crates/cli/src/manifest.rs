use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// `manifest.txt`: the command, its seed and settings, and a SHA-256 of every
/// input file. Inputs are listed by file name so relocating a tree leaves the
/// manifest unchanged.
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            lines: vec![
                ("tool".into(), format!("rosepo {}", env!("CARGO_PKG_VERSION"))),
                ("command".into(), command.into()),
            ],
        }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.note(&format!("input.{role}"), format!("{name} sha256:{}", hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = rosepo::config::format_kv(&self.lines);
        let path = dir.join("manifest.txt");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
