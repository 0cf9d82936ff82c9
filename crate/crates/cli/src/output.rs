//! Output directories, run records and the error type that maps to exit
//! codes.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use inflens_core::tensorio::Manifest;

/// Failure of a subcommand. Input errors exit with 1, computation errors
/// (including failure to write an artifact) with 2.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Compute(String),
}

impl CliError {
    pub fn input(e: impl fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }

    pub fn compute(e: impl fmt::Display) -> Self {
        CliError::Compute(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Compute(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Compute(m) => write!(f, "computation error: {m}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
struct InputRecord {
    role: String,
    file: String,
    sha256: String,
}

/// Everything needed to reproduce a run. Paths are recorded as given in the
/// manifest (or by file name for top-level inputs) so records from different
/// checkouts compare equal when the inputs hash equal.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    inputs: &'a [InputRecord],
    params: &'a Value,
    outputs: &'a [String],
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub struct RunDir {
    subcommand: &'static str,
    dir: PathBuf,
    seed: u64,
    inputs: Vec<InputRecord>,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, subcommand: &'static str, seed: u64) -> Result<Self> {
        let dir = root.join(subcommand);
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Compute(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            subcommand,
            dir,
            seed,
            inputs: Vec::new(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn record_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(InputRecord {
            role: role.to_owned(),
            file: file_name(path),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Records a manifest and every tensor it references.
    pub fn record_manifest(&mut self, role: &str, path: &Path, manifest: &Manifest) -> Result<()> {
        self.record_input(role, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut tensors: Vec<(String, &Path)> = manifest
            .classes
            .iter()
            .map(|c| (format!("{role}.class{}", c.label), c.features.as_path()))
            .collect();
        tensors.push((format!("{role}.weights"), manifest.weights.as_path()));
        if let Some(b) = &manifest.bias {
            tensors.push((format!("{role}.bias"), b.as_path()));
        }
        for (r, p) in tensors {
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            self.inputs.push(InputRecord {
                role: r,
                file: p.display().to_string(),
                sha256: sha256_file(&full)?,
            });
        }
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| write_error(&path, e))?;
        }
        fs::write(&path, bytes).map_err(|e| write_error(&path, e))?;
        self.note(name);
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::compute)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Notes an artifact written by other means.
    pub fn note(&mut self, name: &str) {
        self.written.push(name.to_owned());
    }

    pub fn finish(mut self, params: Value) -> Result<PathBuf> {
        self.written.sort();
        let record = RunRecord {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            seed: self.seed,
            inputs: &self.inputs,
            params: &params,
            outputs: &self.written,
        };
        let mut text = serde_json::to_string_pretty(&record).map_err(CliError::compute)?;
        text.push('\n');
        let path = self.dir.join("run.json");
        fs::write(&path, text).map_err(|e| write_error(&path, e))?;
        Ok(self.dir)
    }
}

fn write_error(path: &Path, e: io::Error) -> CliError {
    CliError::Compute(format!("writing {}: {e}", path.display()))
}
