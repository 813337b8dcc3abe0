use std::fs::{self, File};
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use veco::checkpoint::{save_checkpoint, Checkpoint};

use crate::config::{ExperimentConfig, RESOLVED_CONFIG};
use crate::error::Result;

/// Output directory of one command. Every file written through it is
/// tracked so a failed run can remove what it produced.
pub struct OutDir {
    root: PathBuf,
    created_root: bool,
    written: Vec<PathBuf>,
    keep_on_failure: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            created_root,
            written: vec![],
            keep_on_failure: vec![],
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        if !self.written.contains(&p) {
            self.written.push(p.clone());
        }
        p
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    pub fn write_config(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        self.write(RESOLVED_CONFIG, &cfg.to_toml()?)?;
        Ok(())
    }

    pub fn save_checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
        let p = self.path(name);
        save_checkpoint(ckpt, &p)?;
        Ok(p)
    }

    /// Header written at once, rows appended and flushed line by line.
    pub fn metrics(&mut self, name: &str, header: &str) -> Result<Metrics> {
        let p = self.path(name);
        let mut w = LineWriter::new(File::create(&p)?);
        writeln!(w, "{header}")?;
        Ok(Metrics { w })
    }

    /// Survives a failed run (the last good checkpoint and the log leading
    /// up to the failure).
    pub fn keep(&mut self, name: &str) {
        self.keep_on_failure.push(self.root.join(name));
    }

    pub fn discard(self) {
        for p in &self.written {
            if !self.keep_on_failure.contains(p) {
                let _ = fs::remove_file(p);
                let _ = fs::remove_file(p.with_extension("tmp"));
            }
        }
        if self.created_root {
            // only succeeds when nothing was kept
            let _ = fs::remove_dir(&self.root);
        }
    }
}

pub struct Metrics {
    w: LineWriter<File>,
}

impl Metrics {
    pub fn row(&mut self, line: &str) -> std::io::Result<()> {
        writeln!(self.w, "{line}")
    }
}
