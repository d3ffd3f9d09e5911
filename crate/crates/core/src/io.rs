//! File formats: datasets as delimited text or a small binary layout, and
//! JSON reports tagged with a schema name and the manifest of the run
//! that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::benchmarks::MogSpec;
use crate::diagnostics::{HistogramBundle, ScoreBand};
use crate::error::{NplmError, Result};
use crate::selection::{LambdaSelection, ScanResult};
use crate::types::{Dataset, NplmConfig, NullModel, TestReport, ValidationSummary, FORMAT_VERSION};

pub const BINARY_MAGIC: &[u8; 5] = b"NPLM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataFormat {
    #[default]
    DelimitedText,
    Binary,
}

pub fn read_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        DataFormat::DelimitedText => parse_text(&fs::read_to_string(path)?, label),
        DataFormat::Binary => parse_binary(&fs::read(path)?, label),
    }
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let bytes = match format {
        DataFormat::DelimitedText => {
            let mut out = String::new();
            for row in data.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
        DataFormat::Binary => {
            let n = u32::try_from(data.n_points())
                .map_err(|_| NplmError::invalid("too many points for the binary format"))?;
            let d = u32::try_from(data.dim()).map_err(|_| NplmError::invalid("dimension too large"))?;
            let mut out = Vec::with_capacity(13 + 8 * data.values().len());
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(&d.to_le_bytes());
            for v in data.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
    };
    write_atomic(path.as_ref(), &bytes)
}

fn parse_error(location: String, message: impl Into<String>) -> NplmError {
    NplmError::Parse {
        location,
        message: message.into(),
    }
}

/// Comma- or whitespace-separated rows; blank lines and `#` lines are
/// skipped.
pub fn parse_text(text: &str, label: impl Into<String>) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut dim = None;
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains(',') {
            trimmed.split(',').map(str::trim).collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        match dim {
            None => dim = Some(fields.len()),
            Some(d) if d != fields.len() => {
                return Err(parse_error(
                    format!("line {line_no}"),
                    format!("expected {d} columns, found {}", fields.len()),
                ))
            }
            _ => {}
        }
        for (col, field) in fields.iter().enumerate() {
            let loc = || format!("line {line_no}, column {}", col + 1);
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(loc(), format!("cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(parse_error(loc(), format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
    }
    let dim = dim.ok_or_else(|| parse_error("end of input".into(), "no data rows"))?;
    Dataset::new(values, dim, label)
}

pub fn parse_binary(bytes: &[u8], label: impl Into<String>) -> Result<Dataset> {
    if bytes.len() < 13 || &bytes[..5] != BINARY_MAGIC {
        return Err(parse_error("byte 0".into(), "missing NPLM1 header"));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(13))
        .ok_or_else(|| parse_error("byte 5".into(), "header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(parse_error(
            format!("byte {}", bytes.len().min(expected)),
            format!("header promises {n}×{dim} values ({expected} bytes), file has {} bytes", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(n * dim);
    for (k, chunk) in bytes[13..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(parse_error(
                format!("row {}, column {} (byte {})", k / dim.max(1), k % dim.max(1), 13 + 8 * k),
                format!("non-finite value {v}"),
            ));
        }
        values.push(v);
    }
    Dataset::new(values, dim, label)
}

/// Provenance attached to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<NplmConfig>,
    /// Input name → dataset or file fingerprint.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
            version: FORMAT_VERSION.to_string(),
            wall_time_seconds: 0.0,
        }
    }
}

/// Name and version written into the `schema` field.
pub trait Schema {
    const SCHEMA: &'static str;
}

macro_rules! schema {
    ($($t:ty => $name:literal),* $(,)?) => {
        $(impl Schema for $t { const SCHEMA: &'static str = $name; })*
    };
}

schema! {
    TestReport => "nplm.TestReport/1",
    ValidationSummary => "nplm.ValidationSummary/1",
    NullModel => "nplm.NullModel/1",
    ScanResult => "nplm.ScanResult/1",
    HistogramBundle => "nplm.HistogramBundle/1",
    ScoreBand => "nplm.ScoreBand/1",
    LambdaSelection => "nplm.LambdaSelection/1",
    MogSpec => "nplm.MogSpec/1",
    NplmConfig => "nplm.NplmConfig/1",
    RunManifest => "nplm.RunManifest/1",
}

/// JSON text of `value` with its schema tag and optional manifest.
pub fn report_json<T: Serialize + Schema>(value: &T, manifest: Option<&RunManifest>) -> Result<String> {
    let mut doc = match serde_json::to_value(value)? {
        Value::Object(map) => map,
        other => {
            let mut map = serde_json::Map::new();
            map.insert("value".into(), other);
            map
        }
    };
    doc.insert("schema".into(), Value::String(T::SCHEMA.into()));
    if let Some(m) = manifest {
        doc.insert("manifest".into(), serde_json::to_value(m)?);
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    Ok(text)
}

pub fn write_report<T: Serialize + Schema>(value: &T, manifest: Option<&RunManifest>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), report_json(value, manifest)?.as_bytes())
}

pub fn parse_report<T: DeserializeOwned + Schema>(text: &str) -> Result<(T, Option<RunManifest>)> {
    let Value::Object(mut doc) = serde_json::from_str::<Value>(text)? else {
        return Err(parse_error("document root".into(), "expected a JSON object"));
    };
    match doc.remove("schema") {
        Some(Value::String(s)) if s == T::SCHEMA => {}
        Some(Value::String(s)) => {
            return Err(parse_error(
                "schema".into(),
                format!("expected {}, found {s}", T::SCHEMA),
            ))
        }
        _ => return Err(parse_error("schema".into(), format!("missing schema tag {}", T::SCHEMA))),
    }
    let manifest = doc.remove("manifest").map(serde_json::from_value).transpose()?;
    Ok((serde_json::from_value(Value::Object(doc))?, manifest))
}

pub fn read_report<T: DeserializeOwned + Schema>(path: impl AsRef<Path>) -> Result<(T, Option<RunManifest>)> {
    parse_report(&fs::read_to_string(path)?)
}

/// One row per grid point.
pub fn scan_table(scan: &ScanResult) -> String {
    let mut out = String::from("M,lambda,median_t,seconds_per_toy,failed,non_converged,non_finite\n");
    for (i, (m, lambda)) in scan.grid.iter().enumerate() {
        let f = &scan.flags[i];
        out.push_str(&format!(
            "{m},{lambda:e},{:?},{:.6},{},{},{}\n",
            scan.medians[i], scan.wall_times[i], f.failed, f.non_converged, f.non_finite
        ));
    }
    out
}

pub fn write_scan_table(scan: &ScanResult, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), scan_table(scan).as_bytes())
}

/// Writes through a sibling temporary file so readers never see a
/// partially written output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_examples() {
        let d = parse_text("1,2\n3,4\n", "t").unwrap();
        assert_eq!((d.n_points(), d.dim()), (2, 2));
        assert_eq!(d.values(), &[1.0, 2.0, 3.0, 4.0]);
        let d = parse_text("# x y\n 1 2\n\n3\t4\n", "t").unwrap();
        assert_eq!(d.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn text_errors_name_the_location() {
        match parse_text("1,2\n3,nan\n", "t") {
            Err(NplmError::Parse { location, .. }) => assert_eq!(location, "line 2, column 2"),
            other => panic!("{other:?}"),
        }
        match parse_text("1,2\n3\n", "t") {
            Err(NplmError::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        assert!(parse_text("1,x\n", "t").is_err());
        assert!(parse_text("# only header\n", "t").is_err());
    }

    #[test]
    fn binary_rejects_truncation_and_bad_magic() {
        let d = Dataset::new(vec![1.0, 2.0, 3.0], 3, "b").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dataset(&d, &p, DataFormat::Binary).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(parse_binary(&bytes[..bytes.len() - 1], "b").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_binary(&bad, "b").is_err());
        let mut nan = bytes.clone();
        nan[13..21].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(parse_binary(&nan, "b"), Err(NplmError::Parse { .. })));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let cfg = NplmConfig::default();
        let text = report_json(&cfg, None).unwrap();
        assert!(parse_report::<NplmConfig>(&text).is_ok());
        assert!(parse_report::<TestReport>(&text).is_err());
    }
}
