//! File formats: the line-delimited epoch file, trajectories, ground truth
//! and error statistics.
//!
//! The epoch file is JSON lines. The first line is a header object; every
//! following line is one [`EpochRecord`]. Floating-point numbers are written
//! with 17 significant digits so that they parse back bit-identically.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::factors::{EpochRecord, SystemBiasLayout};
use crate::scenario::{GroundTruth, ScenarioConfig};
use crate::stats::{ErrorMetric, ErrorStats};

pub const EPOCH_FORMAT: &str = "gnss-fgo-epochs";
pub const EPOCH_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Frame {
    #[serde(rename = "ECEF")]
    Ecef,
    #[default]
    #[serde(rename = "ENU")]
    Enu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFileHeader {
    pub format: String,
    pub version: u64,
    pub frame: Frame,
    pub layout: SystemBiasLayout,
    #[serde(default)]
    pub metadata: Value,
}

impl EpochFileHeader {
    pub fn new(frame: Frame, layout: SystemBiasLayout, metadata: Value) -> Self {
        Self {
            format: EPOCH_FORMAT.into(),
            version: EPOCH_FORMAT_VERSION,
            frame,
            layout,
            metadata,
        }
    }
}

/// Writes `value` as compact JSON with every float in `{:.16e}` form.
fn write_json<W: Write>(w: &mut W, value: &Value) -> std::io::Result<()> {
    match value {
        Value::Null => w.write_all(b"null"),
        Value::Bool(b) => write!(w, "{b}"),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                write!(w, "{u}")
            } else if let Some(i) = n.as_i64() {
                write!(w, "{i}")
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                write!(w, "{f:.16e}")
            }
        }
        Value::String(s) => {
            let quoted = serde_json::to_string(s).map_err(std::io::Error::other)?;
            w.write_all(quoted.as_bytes())
        }
        Value::Array(items) => {
            w.write_all(b"[")?;
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    w.write_all(b",")?;
                }
                write_json(w, item)?;
            }
            w.write_all(b"]")
        }
        Value::Object(map) => {
            w.write_all(b"{")?;
            for (k, (key, item)) in map.iter().enumerate() {
                if k > 0 {
                    w.write_all(b",")?;
                }
                let quoted = serde_json::to_string(key).map_err(std::io::Error::other)?;
                w.write_all(quoted.as_bytes())?;
                w.write_all(b":")?;
                write_json(w, item)?;
            }
            w.write_all(b"}")
        }
    }
}

fn check_finite(r: &EpochRecord) -> Result<()> {
    let mut all = r
        .anchor_position
        .iter()
        .chain(&r.anchor_velocity)
        .copied()
        .collect::<Vec<_>>();
    all.push(r.time);
    all.push(r.dt_prev);
    for s in &r.sats {
        all.extend_from_slice(&s.los_unit);
        all.extend_from_slice(&[
            s.elevation,
            s.azimuth,
            s.psr_residual,
            s.dopp_residual,
            s.tdcp_residual,
            s.dd_carrier_residual,
            s.wavelength,
            s.snr,
        ]);
    }
    if all.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "epoch {} has non-finite values",
            r.epoch
        )))
    }
}

pub fn write_epochs_to<W: Write>(
    w: &mut W,
    header: &EpochFileHeader,
    records: &[EpochRecord],
) -> Result<()> {
    write_json(w, &serde_json::to_value(header)?)?;
    w.write_all(b"\n")?;
    let mut last: Option<usize> = None;
    for r in records {
        if last.is_some_and(|e| r.epoch <= e) {
            return Err(Error::InvalidInput(format!(
                "epochs must be strictly increasing, {} follows {}",
                r.epoch,
                last.unwrap_or_default()
            )));
        }
        check_finite(r)?;
        write_json(w, &serde_json::to_value(r)?)?;
        w.write_all(b"\n")?;
        last = Some(r.epoch);
    }
    Ok(())
}

pub fn write_epochs(
    path: impl AsRef<Path>,
    header: &EpochFileHeader,
    records: &[EpochRecord],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_epochs_to(&mut w, header, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_epochs_from<R: BufRead>(reader: R) -> Result<(EpochFileHeader, Vec<EpochRecord>)> {
    let mut header: Option<EpochFileHeader> = None;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut last_good = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            last_good,
            message,
        };
        match &header {
            None => {
                let raw: Value =
                    serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if raw.get("format").and_then(Value::as_str) != Some(EPOCH_FORMAT) {
                    return Err(parse_err("missing epoch-file header".into()));
                }
                let version = raw.get("version").and_then(Value::as_u64).unwrap_or(0);
                if version != EPOCH_FORMAT_VERSION {
                    return Err(Error::UnsupportedVersion(version));
                }
                header = Some(serde_json::from_value(raw).map_err(|e| parse_err(e.to_string()))?);
            }
            Some(_) => {
                let r: EpochRecord =
                    serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
                if let Some(prev) = records.last() {
                    if r.epoch <= prev.epoch {
                        return Err(parse_err(format!(
                            "epoch {} does not follow {}",
                            r.epoch, prev.epoch
                        )));
                    }
                }
                records.push(r);
            }
        }
        last_good = line_no;
    }
    let header = header.ok_or(Error::Parse {
        line: 1,
        last_good: 0,
        message: "empty epoch file".into(),
    })?;
    Ok((header, records))
}

pub fn read_epochs(path: impl AsRef<Path>) -> Result<(EpochFileHeader, Vec<EpochRecord>)> {
    read_epochs_from(BufReader::new(File::open(path)?))
}

pub fn load_epochs(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    read_epochs(path).map(|(_, r)| r)
}

pub fn write_truth(path: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, truth)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn load_scenario_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ScenarioConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TrajectoryRow {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

pub fn truth_rows(truth: &GroundTruth) -> Vec<TrajectoryRow> {
    truth
        .epochs
        .iter()
        .map(|e| TrajectoryRow {
            epoch: e.epoch,
            time: e.time,
            x: e.position[0],
            y: e.position[1],
            z: e.position[2],
        })
        .collect()
}

pub fn write_trajectory(path: impl AsRef<Path>, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectory CSV, or the positions of a ground-truth JSON file.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRow>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    if text.trim_start().starts_with('{') {
        let truth: GroundTruth = serde_json::from_str(&text)?;
        return Ok(truth_rows(&truth));
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<TrajectoryRow>, _>>()?;
    Ok(rows)
}

/// Summary written by the CLI; the full error list goes to the CDF table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub metric: ErrorMetric,
    pub count: usize,
    pub rms: f64,
    pub p50: f64,
    pub p95: f64,
    pub sdc_score: f64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, Value>,
}

impl From<&ErrorStats> for StatsSummary {
    fn from(s: &ErrorStats) -> Self {
        Self {
            metric: s.metric,
            count: s.count,
            rms: s.rms,
            p50: s.p50,
            p95: s.p95,
            sdc_score: s.sdc_score,
            extra: serde_json::Map::new(),
        }
    }
}

pub fn write_stats(path: impl AsRef<Path>, summary: &StatsSummary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<StatsSummary> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_cdf(path: impl AsRef<Path>, stats: &ErrorStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["error", "fraction"])?;
    for (e, f) in stats.cdf_table() {
        w.write_record([format!("{e:.6}"), format!("{f:.6}")])?;
    }
    w.flush()?;
    Ok(())
}
