//! Dataset files: a header line followed by one JSON object per epoch.
//!
//! ```text
//! {"format":"lfgnss-dataset","version":1,"manifest":{...}}
//! {"t":0.0,"observations":[...],"truth":{...},"truth_clock":...}
//! ...
//! ```
//!
//! Floats are written with 17 significant digits so that every value parses
//! back to the identical double. Parsing is strict: unknown keys, malformed
//! lines and invariant violations are errors, never silently skipped.

use crate::frames::EcefPos;
use crate::models::{SatObservation, System};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DATASET_FORMAT: &str = "lfgnss-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("unsupported format header: {0}")]
    Version(String),
    #[error("line {line}: timestamp {t} does not follow {prev}")]
    Order { line: usize, prev: f64, t: f64 },
    #[error("split {0} would receive no epochs")]
    EmptySplit(String),
    #[error("invalid split: {0}")]
    BadSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Simulated,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub epoch_count: usize,
    pub constellations: Vec<System>,
    pub has_truth: bool,
    pub source: DataSource,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Optional starting point for the first least-squares solve.
    #[serde(default)]
    pub approx_position: Option<EcefPos>,
}

impl DatasetManifest {
    /// Manifest whose derived fields (count, constellations, truth flag) match `records`.
    pub fn for_records(name: &str, records: &[EpochRecord], source: DataSource, seed: Option<u64>) -> Self {
        let constellations: BTreeSet<System> = records
            .iter()
            .flat_map(|r| r.observations.iter().map(|o| o.system))
            .collect();
        Self {
            name: name.to_string(),
            epoch_count: records.len(),
            constellations: constellations.into_iter().collect(),
            has_truth: !records.is_empty() && records.iter().all(|r| r.truth.is_some()),
            source,
            seed,
            approx_position: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// Seconds; strictly increasing within a file.
    pub t: f64,
    pub observations: Vec<SatObservation>,
    #[serde(default)]
    pub truth: Option<EcefPos>,
    /// Receiver clock offset truth (s).
    #[serde(default)]
    pub truth_clock: Option<f64>,
}

impl EpochRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !self.t.is_finite() {
            return Err("non-finite timestamp".into());
        }
        let mut seen = BTreeSet::new();
        for o in &self.observations {
            o.validate().map_err(|e| format!("{} {}: {e}", o.system, o.sat_id))?;
            if !seen.insert(o.key()) {
                return Err(format!("duplicate satellite {} {}", o.system, o.sat_id));
            }
        }
        if let Some(p) = &self.truth {
            if !p.is_finite() || p.norm() < 6.3e6 {
                return Err("truth position is not a point near the Earth's surface".into());
            }
        }
        if let Some(c) = self.truth_clock {
            if !c.is_finite() || c.abs() > 1.0 {
                return Err(format!("truth clock {c} s out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    format: String,
    version: u32,
    manifest: M,
}

/// JSON formatter printing every float with 17 significant digits.
#[derive(Debug, Default, Clone, Copy)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

/// Serialize one value as a single line (newline included).
pub fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(&mut *w, FullPrecision);
    value.serialize(&mut ser).map_err(io::Error::other)?;
    w.write_all(b"\n")
}

/// Write a header object and body lines in the shared line-delimited layout.
pub fn write_lines<M: Serialize, T: Serialize>(
    path: &Path,
    format: &str,
    version: u32,
    manifest: &M,
    body: &[T],
) -> Result<(), IngestError> {
    let bytes = encode_lines(format, version, manifest, body);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IngestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_lines<M: Serialize, T: Serialize>(format: &str, version: u32, manifest: &M, body: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    let header = Header {
        format: format.to_string(),
        version,
        manifest,
    };
    // Writing into a Vec cannot fail.
    write_json_line(&mut out, &header).expect("in-memory write");
    for item in body {
        write_json_line(&mut out, item).expect("in-memory write");
    }
    out
}

/// Split raw bytes into (header, body) JSON values, checking format and version.
pub fn decode_lines<M, T>(bytes: &[u8], format: &str, version: u32) -> Result<(M, Vec<(usize, T)>), IngestError>
where
    M: for<'de> Deserialize<'de>,
    T: for<'de> Deserialize<'de>,
{
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::Format {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        reason: format!("invalid utf-8: {e}"),
    })?;
    let mut lines: Vec<&str> = text.split('\n').collect();
    match lines.last() {
        Some(&"") => {
            lines.pop();
        }
        _ => {
            return Err(IngestError::Format {
                line: lines.len(),
                reason: "missing trailing newline".into(),
            })
        }
    }
    let Some(first) = lines.first() else {
        return Err(IngestError::Version("empty file".into()));
    };
    let probe: serde_json::Value = serde_json::from_str(first)
        .map_err(|e| IngestError::Version(format!("unreadable header: {e}")))?;
    let found_format = probe.get("format").and_then(|v| v.as_str());
    let found_version = probe.get("version").and_then(|v| v.as_u64());
    if found_format != Some(format) || found_version != Some(version as u64) {
        return Err(IngestError::Version(format!(
            "expected {format} v{version}, found {:?} v{:?}",
            found_format, found_version
        )));
    }
    let header: Header<M> = serde_json::from_str(first).map_err(|e| IngestError::Format {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut body = Vec::with_capacity(lines.len() - 1);
    for (i, line) in lines.iter().enumerate().skip(1) {
        let item = serde_json::from_str(line).map_err(|e| IngestError::Format {
            line: i + 1,
            reason: e.to_string(),
        })?;
        body.push((i + 1, item));
    }
    Ok((header.manifest, body))
}

pub fn emit_dataset(manifest: &DatasetManifest, records: &[EpochRecord], path: &Path) -> Result<(), IngestError> {
    write_lines(path, DATASET_FORMAT, DATASET_VERSION, manifest, records)
}

pub fn encode_dataset(manifest: &DatasetManifest, records: &[EpochRecord]) -> Vec<u8> {
    encode_lines(DATASET_FORMAT, DATASET_VERSION, manifest, records)
}

pub fn parse_dataset(path: &Path) -> Result<(DatasetManifest, Vec<EpochRecord>), IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset_bytes(&bytes)
}

pub fn parse_dataset_bytes(bytes: &[u8]) -> Result<(DatasetManifest, Vec<EpochRecord>), IngestError> {
    let (manifest, body): (DatasetManifest, Vec<(usize, EpochRecord)>) =
        decode_lines(bytes, DATASET_FORMAT, DATASET_VERSION)?;
    let mut records = Vec::with_capacity(body.len());
    let mut prev: Option<f64> = None;
    for (line, rec) in body {
        rec.validate().map_err(|reason| IngestError::Format { line, reason })?;
        if let Some(p) = prev {
            if !(rec.t > p) {
                return Err(IngestError::Order { line, prev: p, t: rec.t });
            }
        }
        prev = Some(rec.t);
        if manifest.has_truth && rec.truth.is_none() {
            return Err(IngestError::Format {
                line,
                reason: "manifest declares truth but epoch has none".into(),
            });
        }
        records.push(rec);
    }
    if manifest.epoch_count != records.len() {
        return Err(IngestError::Format {
            line: 1,
            reason: format!(
                "manifest declares {} epochs, file has {}",
                manifest.epoch_count,
                records.len()
            ),
        });
    }
    let present: BTreeSet<System> = records
        .iter()
        .flat_map(|r| r.observations.iter().map(|o| o.system))
        .collect();
    let declared: BTreeSet<System> = manifest.constellations.iter().copied().collect();
    if declared.len() != manifest.constellations.len() || !present.is_subset(&declared) {
        return Err(IngestError::Format {
            line: 1,
            reason: "constellation list does not cover the observations".into(),
        });
    }
    Ok((manifest, records))
}

/// One named, contiguous time slice of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub records: Vec<EpochRecord>,
}

/// Contiguous, order-preserving slices. Boundaries sit at
/// `round(cumulative_fraction × n)`; epochs beyond the last fraction are dropped.
pub fn split_dataset(records: &[EpochRecord], spec: &[(String, f64)]) -> Result<Vec<Split>, IngestError> {
    if spec.is_empty() {
        return Err(IngestError::BadSplit("no fractions given".into()));
    }
    if spec.iter().any(|(_, f)| !(*f > 0.0)) {
        return Err(IngestError::BadSplit("fractions must be positive".into()));
    }
    let total: f64 = spec.iter().map(|(_, f)| f).sum();
    if total > 1.0 + 1e-9 {
        return Err(IngestError::BadSplit(format!("fractions sum to {total} > 1")));
    }
    let n = records.len();
    let mut out = Vec::with_capacity(spec.len());
    let mut start = 0usize;
    let mut cum = 0.0;
    for (name, f) in spec {
        cum += f;
        let end = ((cum * n as f64).round() as usize).min(n);
        if end <= start {
            return Err(IngestError::EmptySplit(name.clone()));
        }
        out.push(Split {
            name: name.clone(),
            records: records[start..end].to_vec(),
        });
        start = end;
    }
    Ok(out)
}

/// Parse `"0.8,0.2"` or `"train=0.8,val=0.2"`.
pub fn parse_split_spec(text: &str) -> Result<Vec<(String, f64)>, IngestError> {
    text.split(',')
        .enumerate()
        .map(|(i, part)| {
            let (name, frac) = match part.split_once('=') {
                Some((n, f)) => (n.trim().to_string(), f),
                None => (format!("split{i}"), part),
            };
            let f: f64 = frac
                .trim()
                .parse()
                .map_err(|_| IngestError::BadSplit(format!("bad fraction {frac:?}")))?;
            Ok((name, f))
        })
        .collect()
}
