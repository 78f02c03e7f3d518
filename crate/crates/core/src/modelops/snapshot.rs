use std::fs;
use std::path::{Path, PathBuf};

use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::model::{peek_step, AnyCheckpoint, Checkpoint};

const PREFIX: &str = "ckpt-";
const SUFFIX: &str = ".tcf";

/// File name of the snapshot taken at `step`.
pub fn snapshot_file_name(step: u64) -> String {
    format!("{PREFIX}{step:010}{SUFFIX}")
}

/// The most recent `capacity` checkpoints of a run, kept as files in one
/// directory. The directory listing is the ring's state, so reopening it
/// after a restart restores the same order.
#[derive(Debug, Clone)]
pub struct SnapshotRing {
    dir: PathBuf,
    capacity: usize,
    entries: Vec<(u64, PathBuf)>,
}

impl SnapshotRing {
    pub fn open(dir: &Path, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("snapshot capacity must be >= 1".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with(PREFIX) && name.ends_with(SUFFIX) {
                entries.push((peek_step(&path)?, path));
            }
        }
        entries.sort();
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::format("snapshot directory", "two snapshots share a step"));
        }
        let mut ring = Self {
            dir: dir.to_path_buf(),
            capacity,
            entries,
        };
        ring.evict()?;
        Ok(ring)
    }

    fn evict(&mut self) -> Result<()> {
        while self.entries.len() > self.capacity {
            let (_, path) = self.entries.remove(0);
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Persist a checkpoint and drop the oldest beyond capacity.
    pub fn push<S: Real>(&mut self, ckpt: &Checkpoint<S>) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if ckpt.step <= last {
                return Err(Error::InvalidArgument(format!(
                    "snapshot step {} is not after the last recorded step {last}",
                    ckpt.step
                )));
            }
        }
        let path = self.dir.join(snapshot_file_name(ckpt.step));
        ckpt.save(&path)?;
        self.entries.push((ckpt.step, path));
        self.evict()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Recorded steps, oldest first.
    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn paths(&self) -> Vec<&Path> {
        self.entries.iter().map(|e| e.1.as_path()).collect()
    }

    pub fn newest(&self) -> Option<&Path> {
        self.entries.last().map(|e| e.1.as_path())
    }

    /// The newest `k` checkpoints, oldest first.
    pub fn load_last(&self, k: usize) -> Result<Vec<AnyCheckpoint>> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take the last {k} of {} snapshots",
                self.entries.len()
            )));
        }
        self.entries[self.entries.len() - k..]
            .iter()
            .map(|(_, p)| AnyCheckpoint::load(p))
            .collect()
    }
}
