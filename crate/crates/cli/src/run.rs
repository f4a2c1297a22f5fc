use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use fundus_fusion::training::AccessEvent;
use fundus_fusion::Error;

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub split: u64,
    pub train: u64,
    pub evaluation: u64,
    pub explain: u64,
    pub synthetic: Option<u64>,
}

/// Record of one command invocation. Timings live here and never in metric
/// reports, so reports stay byte-identical across reruns.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub access_log: Vec<AccessEvent>,
    pub notes: Vec<String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
    phase_start: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config: config.clone(),
                seeds: Seeds {
                    split: config.split.seed,
                    train: config.train.seed,
                    evaluation: config.evaluation.bootstrap.seed,
                    explain: config.explain.seed,
                    synthetic: config.data.synthetic.as_ref().map(|s| s.seed),
                },
                inputs: Vec::new(),
                outputs: Vec::new(),
                access_log: Vec::new(),
                notes: Vec::new(),
                timings_seconds: BTreeMap::new(),
            },
            start: Instant::now(),
            phase_start: Instant::now(),
        }
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.manifest.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) -> PathBuf {
        let p = p.into();
        self.manifest.outputs.push(p.clone());
        p
    }

    pub fn note(&mut self, n: impl Into<String>) {
        self.manifest.notes.push(n.into());
    }

    pub fn access(&mut self, log: Vec<AccessEvent>) {
        self.manifest.access_log.extend(log);
    }

    /// Closes the current timing phase under `name`.
    pub fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.manifest
            .timings_seconds
            .insert(name.into(), (now - self.phase_start).as_secs_f64());
        self.phase_start = now;
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<PathBuf> {
        self.manifest
            .timings_seconds
            .insert("total".into(), self.start.elapsed().as_secs_f64());
        self.manifest.outputs.push(path.to_path_buf());
        write_json(path, &self.manifest)?;
        Ok(path.to_path_buf())
    }
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join("split")
    }

    pub fn split_csv(&self) -> PathBuf {
        self.split_dir().join("split.csv")
    }

    pub fn system(&self, name: &str) -> PathBuf {
        self.root.join("systems").join(name)
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn compare(&self, a: &str, b: &str) -> PathBuf {
        self.root.join("compare").join(format!("{a}_vs_{b}"))
    }

    pub fn explain(&self, name: &str) -> PathBuf {
        self.root.join("explain").join(name)
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self, command: &str, name: Option<&str>) -> PathBuf {
        let file = match name {
            Some(n) => format!("{command}-{n}.json"),
            None => format!("{command}.json"),
        };
        self.root.join("manifests").join(file)
    }

    /// Existing directory or a missing-artifact error naming it.
    pub fn require(&self, p: PathBuf) -> Result<PathBuf, Error> {
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
