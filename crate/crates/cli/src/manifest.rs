//! Run manifests: enough to rerun a command bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: toml::Table,
    pub config_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    /// `config` is the fully resolved configuration of the run.
    pub fn new<C: Serialize>(command: &str, seed: Option<u64>, threads: usize, config: &C) -> Result<Self> {
        let config = toml::Table::try_from(config).context("serializing run configuration")?;
        let text = toml::to_string(&config)?;
        Ok(Self {
            command: command.to_string(),
            seed,
            threads,
            config_sha256: hex(&Sha256::digest(text.as_bytes())),
            config,
        })
    }

    fn table(&self) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("command".into(), self.command.clone().into());
        t.insert(
            "argv".into(),
            toml::Value::Array(std::env::args().map(toml::Value::from).collect()),
        );
        if let Some(seed) = self.seed {
            // TOML integers are signed 64-bit
            t.insert("seed".into(), seed.to_string().into());
        }
        t.insert("threads".into(), (self.threads as i64).into());
        t.insert("version".into(), VERSION.into());
        t.insert("config_sha256".into(), self.config_sha256.clone().into());
        t.insert("config".into(), self.config.clone().into());
        t
    }

    /// Keys merged into bundle metadata.
    pub fn meta(&self) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("manifest".into(), self.table().into());
        t
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, toml::to_string(&self.table())?).with_context(|| format!("writing {}", path.display()))
    }
}

/// `out.toml` -> `out.manifest.toml`.
pub fn beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.manifest.toml"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        n: usize,
        name: String,
    }

    #[test]
    fn hash_depends_only_on_config() {
        let a = Manifest::new("x", Some(1), 1, &Cfg { n: 3, name: "a".into() }).unwrap();
        let b = Manifest::new("y", Some(2), 4, &Cfg { n: 3, name: "a".into() }).unwrap();
        let c = Manifest::new("x", Some(1), 1, &Cfg { n: 4, name: "a".into() }).unwrap();
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
    }

    #[test]
    fn manifest_path_sits_next_to_output() {
        assert_eq!(beside(Path::new("d/fit.toml")), PathBuf::from("d/fit.manifest.toml"));
    }
}
