//! Output directory handling: one writer per directory, resolved config, metric log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dfu_core::checkpoint::RunInfo;
use serde::Serialize;

use crate::config::RunConfig;

pub const LOCK_FILE: &str = ".lock";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub struct RunDir {
    pub path: PathBuf,
    pub info: RunInfo,
    lock: PathBuf,
}

impl RunDir {
    /// Takes the directory lock and writes the resolved config next to the outputs.
    pub fn open(path: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} is in use by another run (remove {} if that run is gone)", path.display(), lock.display())
            }
            Err(e) => return Err(e).with_context(|| format!("locking {}", path.display())),
        }
        let text = cfg.to_toml()?;
        let dir = Self {
            path: path.to_path_buf(),
            info: RunInfo::new(text.clone(), cfg.seed),
            lock,
        };
        std::fs::write(dir.file(RESOLVED_CONFIG), text)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn hash(&self) -> &str {
        &self.info.config_hash
    }

    /// Writes a JSON report tagged with the config hash.
    pub fn write_report<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        let v = serde_json::json!({ "config_hash": self.hash(), "report": body });
        std::fs::write(self.file(name), serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

/// Line-per-record JSON log.
pub struct MetricLog {
    out: BufWriter<File>,
    hash: String,
}

impl MetricLog {
    pub fn create(dir: &RunDir, name: &str) -> Result<Self> {
        let f = File::create(dir.file(name))?;
        Ok(Self {
            out: BufWriter::new(f),
            hash: dir.hash().to_string(),
        })
    }

    /// Wall-clock fields are dropped so repeated runs log identical bytes.
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut v = serde_json::to_value(record)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time");
            obj.insert("config_hash".into(), self.hash.clone().into());
        }
        writeln!(self.out, "{}", serde_json::to_string(&v)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
