use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::HarnessError;

pub const MANIFEST: &str = "manifest.json";

/// Scientific notation with 17 significant digits, enough to read back the
/// identical `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

pub fn sha256_file(path: &Path) -> Result<String, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub criterion: u8,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: u8,
    pub scenario: String,
    pub status: Status,
    pub detail: String,
    pub runtime_s: f64,
    pub runtime_limit_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<ArtifactRecord>,
    pub timings: Vec<(u8, f64)>,
    pub verdicts: Vec<Verdict>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn runtime(&self, c: u8) -> f64 {
        self.timings.iter().find(|t| t.0 == c).map_or(f64::NAN, |t| t.1)
    }
}

/// Collects the files written for one bundle. Writes go through this single
/// collector, one file at a time.
pub struct Collector {
    dir: PathBuf,
    records: Vec<ArtifactRecord>,
}

impl Collector {
    pub fn new(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), records: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, criterion: u8, file: &str) -> Result<(), HarnessError> {
        let sha256 = sha256_file(&self.dir.join(file))?;
        self.records.retain(|r| r.file != file);
        self.records.push(ArtifactRecord { file: file.into(), criterion, sha256 });
        Ok(())
    }

    /// CSV with a header row; fields are quoted per RFC 4180 when needed.
    pub fn csv(&mut self, criterion: u8, file: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
        let path = self.dir.join(file);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
        drop(w);
        self.record(criterion, file)
    }

    pub fn json<T: Serialize>(&mut self, criterion: u8, file: &str, value: &T) -> Result<(), HarnessError> {
        let path = self.dir.join(file);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| HarnessError::io(&path, e))?;
        self.record(criterion, file)
    }

    /// Register a file written by other code.
    pub fn with_writer(
        &mut self,
        criterion: u8,
        file: &str,
        write: impl FnOnce(fs::File) -> Result<(), HarnessError>,
    ) -> Result<(), HarnessError> {
        let path = self.dir.join(file);
        let f = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        write(f)?;
        self.record(criterion, file)
    }

    pub fn into_records(self) -> Vec<ArtifactRecord> {
        self.records
    }
}

/// A CSV read back as named string columns.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    fn index(&self, name: &str) -> Result<usize, HarnessError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Artifact(format!("missing column '{name}'")))
    }

    pub fn strings(&self, name: &str) -> Result<Vec<&str>, HarnessError> {
        let i = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn floats(&self, name: &str) -> Result<Vec<f64>, HarnessError> {
        self.strings(name)?
            .into_iter()
            .map(|s| s.parse::<f64>().map_err(|_| HarnessError::Artifact(format!("column '{name}': bad number '{s}'"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, f64::MAX] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        assert!(fmt_f64(f64::NAN).parse::<f64>().unwrap().is_nan());
        assert_eq!(fmt_f64(f64::INFINITY).parse::<f64>().unwrap(), f64::INFINITY);
    }

    #[test]
    fn csv_quotes_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Collector::new(dir.path()).unwrap();
        c.csv(1, "t.csv", &["name", "x"], &[vec!["a,b \"q\"".into(), fmt_f64(0.1)]]).unwrap();
        let t = Table::read(&dir.path().join("t.csv")).unwrap();
        assert_eq!(t.strings("name").unwrap(), vec!["a,b \"q\""]);
        assert_eq!(t.floats("x").unwrap(), vec![0.1]);
        let raw = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert!(raw.contains("\"a,b \"\"q\"\"\""));
        assert!(t.floats("y").is_err());
        assert_eq!(c.into_records().len(), 1);
    }
}
