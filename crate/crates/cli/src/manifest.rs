use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smokesight::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub key: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputHash>,
    /// Wall-clock seconds per stage, plus `total`.
    pub timings: BTreeMap<String, f64>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    /// Subcommand-specific results (losses, metrics, deviations).
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// SHA-256 of a file, or of a directory tree: every file in path order, each
/// contributing its relative path and contents.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            h.update((rel.len() as u64).to_le_bytes());
            h.update(rel.as_bytes());
            let bytes = std::fs::read(&f).map_err(|e| io_err(&f, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(std::fs::read(path).map_err(|e| io_err(path, e))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// State of one subcommand invocation: effective config, hashed inputs,
/// written outputs and stage timings.
pub struct Run {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    timings: BTreeMap<String, f64>,
    started: Instant,
    pub results: serde_json::Value,
}

impl Run {
    pub fn start(cfg: RunConfig) -> Result<Self> {
        let out_dir = cfg.out_dir();
        if out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir is empty".into()));
        }
        std::fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
        Ok(Self {
            cfg,
            out_dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
            results: serde_json::Value::Null,
        })
    }

    /// Resolves the input named by `key`, failing validation if it is
    /// missing, and records its hash.
    pub fn input(&mut self, key: &str) -> Result<PathBuf> {
        let path = self.cfg.path(key);
        if !path.exists() {
            return Err(Error::Config(format!("{key}: {} does not exist", path.display())));
        }
        self.inputs.push(InputHash {
            key: key.to_string(),
            path: path.display().to_string(),
            sha256: hash_path(&path)?,
        });
        Ok(path)
    }

    pub fn output_path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Records an output already written under the output directory.
    pub fn record(&mut self, rel: &str) {
        self.outputs.push(rel.replace('\\', "/"));
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.output_path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        write_atomic(&path, bytes)?;
        self.record(rel);
        Ok(())
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self);
        self.timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
        out
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let manifest = RunManifest {
            tool: "smokesight".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.cfg.subcommand.clone(),
            config: self.cfg.values.clone(),
            inputs: self.inputs,
            timings: self.timings,
            outputs: self.outputs,
            results: self.results,
        };
        let json = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&self.out_dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }
}
