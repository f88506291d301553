//! Run directories: locking, artifact manifests and checksum verification.
//!
//! A run directory is complete once `manifest.txt` exists. Completed runs are
//! never written to again.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cbt_core::kvtext;
use cbt_core::taskgen::sha256_hex;
use cbt_core::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const LOCK: &str = ".lock";

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(Self { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is locked by another command (remove {} if no command is running)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Contents of a run manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Artifact name → (file name relative to the run directory, sha-256).
    pub artifacts: BTreeMap<String, (String, String)>,
    /// Processed samples per training step.
    pub samples: Vec<u64>,
    /// Additional provenance (task names, λ, input digests).
    pub info: BTreeMap<String, String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("command".to_string(), self.command.clone());
        m.insert("config_hash".into(), self.config_hash.clone());
        m.insert("started_unix".into(), self.started_unix.to_string());
        m.insert("finished_unix".into(), self.finished_unix.to_string());
        m.insert("samples".into(), kvtext::join_list(&self.samples));
        for (name, (file, sha)) in &self.artifacts {
            m.insert(format!("file.{name}"), file.clone());
            m.insert(format!("sha256.{name}"), sha.clone());
        }
        for (k, v) in &self.info {
            m.insert(format!("info.{k}"), v.clone());
        }
        kvtext::render(&m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m = kvtext::parse(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let mut out = Self {
            command: kvtext::get(&m, "command")?.to_string(),
            config_hash: kvtext::get(&m, "config_hash")?.to_string(),
            started_unix: kvtext::get_parsed(&m, "started_unix")?,
            finished_unix: kvtext::get_parsed(&m, "finished_unix")?,
            samples: kvtext::parse_list(kvtext::get(&m, "samples")?)?,
            ..Self::default()
        };
        for (k, v) in &m {
            if let Some(name) = k.strip_prefix("file.") {
                let sha = kvtext::get(&m, &format!("sha256.{name}"))?;
                out.artifacts.insert(name.to_string(), (v.clone(), sha.to_string()));
            } else if let Some(key) = k.strip_prefix("info.") {
                out.info.insert(key.to_string(), v.clone());
            }
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST))?)
    }

    pub fn path_of(&self, dir: &Path, artifact: &str) -> Result<PathBuf> {
        self.artifacts
            .get(artifact)
            .map(|(f, _)| dir.join(f))
            .ok_or_else(|| Error::Data(format!("run {} has no `{artifact}` artifact", dir.display())))
    }
}

/// Checks every artifact of a completed run against its recorded checksum.
pub fn verify_run(dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(dir)?;
    for (file, sha) in manifest.artifacts.values() {
        let path = dir.join(file);
        let bytes = fs::read(&path)?;
        if &sha256_hex(&bytes) != sha {
            return Err(Error::Checksum {
                path: path.display().to_string(),
            });
        }
    }
    Ok(manifest)
}

/// If `file` belongs to a completed run, verifies that run's checksum for it.
pub fn verify_if_managed(file: &Path) -> Result<()> {
    let Some(dir) = file.parent() else { return Ok(()) };
    if !dir.join(MANIFEST).exists() {
        return Ok(());
    }
    let manifest = RunManifest::load(dir)?;
    let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if let Some((_, sha)) = manifest.artifacts.values().find(|(f, _)| f == name) {
        if &sha256_hex(&fs::read(file)?) != sha {
            return Err(Error::Checksum {
                path: file.display().to_string(),
            });
        }
    }
    Ok(())
}

/// A run directory being written by the current command.
#[derive(Debug)]
pub struct ActiveRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    _lock: RunLock,
}

/// What a command finds when it opens its run directory.
#[derive(Debug)]
pub enum Opened {
    /// The run already finished; its manifest verified.
    Complete(PathBuf, RunManifest),
    Active(ActiveRun),
}

/// Opens `dir` for `command`. A finished run is verified and returned
/// untouched; an unfinished one is only reopened when `resume` is set.
pub fn open_run(dir: &Path, command: &str, config_hash: &str, resume: bool) -> Result<Opened> {
    if dir.join(MANIFEST).exists() {
        let m = verify_run(dir)?;
        return Ok(Opened::Complete(dir.to_path_buf(), m));
    }
    let existed = dir.exists() && fs::read_dir(dir)?.next().is_some();
    let lock = RunLock::acquire(dir)?;
    if existed && !resume {
        return Err(Error::Data(format!(
            "{} holds an unfinished run; pass --resume to continue it",
            dir.display()
        )));
    }
    Ok(Opened::Active(ActiveRun {
        dir: dir.to_path_buf(),
        manifest: RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            started_unix: unix_now(),
            ..RunManifest::default()
        },
        _lock: lock,
    }))
}

impl ActiveRun {
    /// Writes `bytes` as artifact `name` and records its checksum.
    pub fn write(&mut self, name: &str, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(file);
        fs::write(&path, bytes)?;
        self.manifest
            .artifacts
            .insert(name.to_string(), (file.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    /// Writes a scratch file that is not part of the final artifact set.
    pub fn write_scratch(&self, file: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(file);
        fs::write(&path, bytes)?;
        Ok(path)
    }

    /// Seals the run by writing its manifest.
    pub fn finish(mut self) -> Result<(PathBuf, RunManifest)> {
        self.manifest.finished_unix = unix_now();
        fs::write(self.dir.join(MANIFEST), self.manifest.render())?;
        Ok((self.dir.clone(), self.manifest.clone()))
    }
}
