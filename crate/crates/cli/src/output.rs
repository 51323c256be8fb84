//! Run directories: manifest, JSON-lines metrics, CSV and JSON summaries.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::Failure;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Failed(miru::Error::io(path, e).to_string())
}

pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| io_fail(root, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf, Failure> {
        let p = self.root.join(name);
        fs::create_dir_all(&p).map_err(|e| io_fail(&p, e))?;
        Ok(p)
    }

    /// Config hash, seeds and code version; no timestamps, so equal inputs
    /// give byte-equal manifests.
    pub fn write_manifest(&self, command: &str, cfg: &ExperimentConfig) -> Result<(), Failure> {
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: cfg.sha256(),
            seeds: &cfg.training.seeds,
            config: cfg,
        };
        self.write_json("manifest.json", &m)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<(), Failure> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        fs::write(&path, text).map_err(|e| io_fail(&path, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_fail(&path, e))
    }

    pub fn jsonl(&self, name: &str) -> Result<JsonLines, Failure> {
        let path = self.path(name);
        let f = File::create(&path).map_err(|e| io_fail(&path, e))?;
        Ok(JsonLines {
            path,
            out: BufWriter::new(f),
        })
    }
}

pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn write<S: Serialize>(&mut self, record: &S) -> Result<(), Failure> {
        let line = serde_json::to_string(record).expect("serializable");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| io_fail(&self.path, e))
    }
}

/// Matrix of optional cells as CSV with 1-based task headers.
pub fn matrix_csv(rows: &[Vec<Option<f64>>]) -> String {
    let t = rows.len();
    let mut out = String::from("after_task");
    for i in 1..=t {
        out.push_str(&format!(",task_{i}"));
    }
    out.push('\n');
    for (j, row) in rows.iter().enumerate() {
        out.push_str(&(j + 1).to_string());
        for v in row {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}
