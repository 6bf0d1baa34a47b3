//! On-disk formats. Every document is UTF-8 JSON written in one canonical
//! form (two-space pretty printing, struct field order, sorted maps, trailing
//! newline) so that seeded runs are byte-reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rotbench_core::augment::{TrainingRecord, Trajectory};
use rotbench_core::catalog::validate_catalog;
use rotbench_core::{Catalog, ModelAction, NoiseLevel, PerturbedCase, Violation};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}, at `{field}`: {message}")]
    Syntax {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("{} invariant violation(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<FormatError>,
    },
}

impl FormatError {
    fn in_file(self, path: &Path) -> Self {
        FormatError::InFile {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }
}

/// Deserialize JSON, reporting the line, column and field path of the
/// first error.
pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        FormatError::Syntax {
            line: inner.line(),
            column: inner.column(),
            field,
            message: strip_position(&inner.to_string()),
        }
    })
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory documents always serialize");
    s.push('\n');
    s
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    from_json(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

/// Write through a temporary sibling and rename, so readers never observe a
/// half-written document.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), FormatError> {
    let io = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), FormatError> {
    write_atomic(path, to_canonical_json(value).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse and validate a catalog document.
pub fn parse_catalog(bytes: &[u8]) -> Result<Catalog, FormatError> {
    let catalog: Catalog = from_json(bytes)?;
    let violations = validate_catalog(&catalog);
    if violations.is_empty() {
        Ok(catalog)
    } else {
        Err(FormatError::Invalid(violations))
    }
}

pub fn read_catalog(path: &Path) -> Result<Catalog, FormatError> {
    parse_catalog(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

/// One generated noise level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub level: NoiseLevel,
    pub seed: u64,
    pub cases: Vec<PerturbedCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

/// One line of a transcript. A model answer is either free text in ReAct
/// form or a structured function call; `error` records a failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_call: Option<FunctionCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TranscriptEntry {
    pub fn answered(case_id: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            output: Some(output.into()),
            function_call: None,
            error: None,
        }
    }

    pub fn failed(case_id: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            output: None,
            function_call: None,
            error: Some(error.into()),
        }
    }

    pub fn is_answered(&self) -> bool {
        self.error.is_none() && (self.output.is_some() || self.function_call.is_some())
    }

    /// The parsed action, or `None` when the entry holds no usable answer.
    pub fn action(&self) -> Option<ModelAction> {
        if self.error.is_some() {
            return None;
        }
        if let Some(call) = &self.function_call {
            return ModelAction::from_function_call(&call.name, &call.arguments).ok();
        }
        rotbench_core::parse_react(self.output.as_deref()?).ok()
    }
}

/// A transcript read back from disk. Lines that do not parse (for example
/// a line cut short by a crash) are kept aside rather than failing the read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
    pub bad_lines: Vec<(usize, String)>,
}

impl Transcript {
    pub fn parse(text: &str) -> Self {
        let mut out = Transcript::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match from_json::<TranscriptEntry>(line.as_bytes()) {
                Ok(e) => out.entries.push(e),
                Err(e) => out.bad_lines.push((i + 1, e.to_string())),
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        let bytes = read_bytes(path)?;
        Ok(Self::parse(&String::from_utf8_lossy(&bytes)))
    }

    /// Latest entry per case id.
    pub fn by_case(&self) -> BTreeMap<&str, &TranscriptEntry> {
        self.entries.iter().map(|e| (e.case_id.as_str(), e)).collect()
    }
}

pub fn to_jsonl_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("in-memory documents always serialize");
    s.push('\n');
    s
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), FormatError> {
    let body: String = items.iter().map(to_jsonl_line).collect();
    write_atomic(path, body.as_bytes())
}

/// Append one line and flush it, for incremental transcripts.
pub fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<(), FormatError> {
    file.write_all(line.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|source| FormatError::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub trajectories: Vec<Trajectory>,
}

pub fn read_training_records(path: &Path) -> Result<Vec<TrainingRecord>, FormatError> {
    let bytes = read_bytes(path)?;
    String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| from_json(l.as_bytes()).map_err(|e| e.in_file(path)))
        .collect()
}

/// Scripted answers: case id → model output text.
pub type Script = BTreeMap<String, String>;

/// What a command consumed and produced, for auditing a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// SHA-256 over the canonical form of the command's inputs.
    pub config_hash: String,
    pub counts: BTreeMap<String, usize>,
    /// Per-item failures that did not stop the command.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}
