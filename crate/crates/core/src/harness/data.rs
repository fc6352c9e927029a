//! Dataset directories: generation, manifests and audited loading.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::imaging::{generate_dataset, read_dataset, read_manifest, write_dataset, write_manifest, LabeledDataset, Split};

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn split_file_name(split: Split) -> String {
    format!("{}.chods", split.name())
}

/// Generates train/validation/test splits into `dir` with a manifest
/// recording seed, sizes and the simulation parameters.
pub fn generate_data_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let sim = cfg.simulation();
    let sizes = [
        (Split::Train, cfg.data.train_pairs),
        (Split::Validation, cfg.data.validation_pairs),
        (Split::Test, cfg.data.test_pairs),
    ];
    let mut manifest = BTreeMap::new();
    manifest.insert("format".to_string(), "CHODS01".to_string());
    manifest.insert("side".to_string(), cfg.side.to_string());
    manifest.insert("seed".to_string(), cfg.seed.to_string());
    manifest.insert("task".to_string(), format!("{:?}", cfg.task).to_lowercase());
    for (split, pairs) in sizes {
        let ds = generate_dataset(pairs, &sim, cfg.seed, split)?;
        let file = split_file_name(split);
        write_dataset(&dir.join(&file), &ds)?;
        manifest.insert(split.name().to_string(), file);
        manifest.insert(format!("{}_pairs", split.name()), pairs.to_string());
    }
    let sim_toml = toml::to_string(&sim).expect("simulation params serialize");
    for (k, v) in flatten_toml(&sim_toml) {
        manifest.insert(format!("simulation.{k}"), v);
    }
    write_manifest(&dir.join(MANIFEST_NAME), &manifest)
}

fn flatten_toml(text: &str) -> Vec<(String, String)> {
    let value: toml::Table = text.parse().expect("round-trips");
    let mut out = Vec::new();
    fn walk(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
        match value {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    walk("", &toml::Value::Table(value), &mut out);
    out
}

/// Append-only record of dataset reads, in the order they happen.
#[derive(Debug)]
pub struct AuditLog {
    path: Option<PathBuf>,
    entries: Mutex<Vec<String>>,
}

impl AuditLog {
    pub fn new(path: Option<PathBuf>) -> Self {
        Self {
            path,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, event: impl Into<String>) -> Result<()> {
        let event = event.into();
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{event}")?;
        }
        self.entries.lock().expect("audit lock").push(event);
        Ok(())
    }

    pub fn entries(&self) -> Vec<String> {
        self.entries.lock().expect("audit lock").clone()
    }
}

/// A dataset directory described by `manifest.txt`.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    pub manifest: BTreeMap<String, String>,
}

impl DataDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_manifest(&root.join(MANIFEST_NAME))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn exists(root: &Path) -> bool {
        root.join(MANIFEST_NAME).is_file()
    }

    pub fn side(&self) -> Result<usize> {
        self.manifest
            .get("side")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("manifest", "missing or bad side"))
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        let name = self
            .manifest
            .get(split.name())
            .cloned()
            .unwrap_or_else(|| split_file_name(split));
        self.root.join(name)
    }

    pub fn load(&self, split: Split, audit: &AuditLog) -> Result<LabeledDataset> {
        let path = self.split_path(split);
        audit.record(format!("read {} {}", split.name(), path.display()))?;
        let ds = read_dataset(&path, split)?;
        let side = self.side()?;
        if ds.side() != side {
            return Err(Error::mismatch(side, ds.side(), format!("side of {}", path.display())));
        }
        Ok(ds)
    }
}
