//! Sensor series panel and synchronized exogenous table.
//!
//! A [`SeriesPanel`] stores `N` sensors over `L` equally spaced steps in
//! sensor-major order. Missing readings are `NaN` in `values` and `false` in
//! `mask`; downstream code reads the mask, never the `NaN`.
//!
//! On-disk formats:
//!
//! * CSV: header `timestamp,<sensor_id>,...`, one row per timestamp (epoch
//!   seconds), an empty field marks a missing reading.
//! * Binary: magic `HSTP`, u32 version, u32 N, u64 L, i64 step, i64 t0,
//!   N length-prefixed ids, N×L f64 values row-major, N×L mask bits
//!   packed row-major (LSB first). All integers little-endian.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

const PANEL_MAGIC: &[u8; 4] = b"HSTP";
const PANEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PanelFormat {
    Csv,
    Bin,
}

impl PanelFormat {
    /// Picks the format from a file extension; anything but `.bin` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => PanelFormat::Bin,
            _ => PanelFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPanel {
    sensor_ids: Vec<String>,
    t0: i64,
    step: i64,
    len: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl SeriesPanel {
    /// Builds a panel from sensor-major `values`/`mask` (`N×L`).
    ///
    /// Cells with `mask=false` are stored as `NaN` whatever value was passed.
    pub fn new(
        sensor_ids: Vec<String>,
        t0: i64,
        step: i64,
        len: usize,
        mut values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = sensor_ids.len();
        if n == 0 || len == 0 {
            return Err(Error::Validation(format!(
                "panel needs at least one sensor and one step (got {n}×{len})"
            )));
        }
        if values.len() != n * len || mask.len() != n * len {
            return Err(Error::Dimension(format!(
                "panel {n}×{len} needs {} cells, got {} values and {} mask bits",
                n * len,
                values.len(),
                mask.len()
            )));
        }
        if len > 1 && step <= 0 {
            return Err(Error::Validation(format!("step must be positive, got {step}")));
        }
        check_unique_ids(&sensor_ids)?;
        for (i, (v, &m)) in values.iter_mut().zip(&mask).enumerate() {
            if m {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite value under a valid mask at sensor {}, step {}",
                        sensor_ids[i / len],
                        i % len
                    )));
                }
            } else {
                *v = f64::NAN;
            }
        }
        Ok(Self {
            sensor_ids,
            t0,
            step,
            len,
            values,
            mask,
        })
    }

    /// Builds a panel whose every cell is valid.
    pub fn from_dense(sensor_ids: Vec<String>, t0: i64, step: i64, len: usize, values: Vec<f64>) -> Result<Self> {
        let mask = vec![true; values.len()];
        Self::new(sensor_ids, t0, step, len, values, mask)
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    /// Sampling step in seconds (0 for a single-step panel).
    pub fn step(&self) -> i64 {
        self.step
    }

    pub fn timestamp(&self, t: usize) -> i64 {
        self.t0 + self.step * t as i64
    }

    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.len).map(|t| self.timestamp(t)).collect()
    }

    pub fn value(&self, sensor: usize, t: usize) -> f64 {
        self.values[sensor * self.len + t]
    }

    pub fn is_valid(&self, sensor: usize, t: usize) -> bool {
        self.mask[sensor * self.len + t]
    }

    pub fn row(&self, sensor: usize) -> &[f64] {
        &self.values[sensor * self.len..(sensor + 1) * self.len]
    }

    pub fn mask_row(&self, sensor: usize) -> &[bool] {
        &self.mask[sensor * self.len..(sensor + 1) * self.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Replaces the mask; newly invalid cells keep their values.
    pub(crate) fn set_mask(&mut self, mask: Vec<bool>) {
        debug_assert_eq!(mask.len(), self.mask.len());
        self.mask = mask;
    }

    /// Direct access for transformations that fill or rescale values while
    /// keeping the mask as is.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same sensors, same clock.
    pub fn same_layout(&self, other: &SeriesPanel) -> bool {
        self.sensor_ids == other.sensor_ids && self.t0 == other.t0 && self.step == other.step && self.len == other.len
    }
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(Error::Schema("empty sensor id".into()));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::Schema(format!("duplicate sensor id {id:?}")));
        }
    }
    Ok(())
}

/// Exogenous variables on the same clock as a panel.
#[derive(Clone, Debug, PartialEq)]
pub struct ExogTable {
    t0: i64,
    step: i64,
    len: usize,
    names: Vec<String>,
    /// Column-major: `columns[c][t]`.
    columns: Vec<Vec<f64>>,
}

impl ExogTable {
    pub fn new(t0: i64, step: i64, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimension(format!(
                "{} exogenous names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        check_unique_ids(&names)?;
        let len = columns.first().map_or(0, Vec::len);
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != len {
                return Err(Error::Dimension(format!(
                    "exogenous column {name:?} has {} rows, expected {len}",
                    col.len()
                )));
            }
            if let Some(t) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "exogenous column {name:?} has a non-finite cell at step {t}"
                )));
            }
        }
        Ok(Self {
            t0,
            step,
            len,
            names,
            columns,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn step(&self) -> i64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[t]).collect()
    }

    /// Errors unless the table shares the panel's clock exactly.
    pub fn check_aligned(&self, panel: &SeriesPanel) -> Result<()> {
        if self.len != panel.len() || self.t0 != panel.t0() || (self.len > 1 && self.step != panel.step()) {
            return Err(Error::Schema(format!(
                "exogenous table (t0={}, step={}, len={}) is not aligned with panel (t0={}, step={}, len={})",
                self.t0,
                self.step,
                self.len,
                panel.t0(),
                panel.step(),
                panel.len()
            )));
        }
        Ok(())
    }
}

pub fn load_panel(path: &Path, format: PanelFormat) -> Result<SeriesPanel> {
    match format {
        PanelFormat::Csv => load_panel_csv(path),
        PanelFormat::Bin => load_panel_bin(path),
    }
}

pub fn store_panel(panel: &SeriesPanel, path: &Path, format: PanelFormat) -> Result<()> {
    match format {
        PanelFormat::Csv => store_panel_csv(panel, path),
        PanelFormat::Bin => store_panel_bin(panel, path),
    }
}

/// Parsed timestamp column plus the raw cell strings of each row.
struct TimedRows {
    header: Vec<String>,
    t0: i64,
    step: i64,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_timed_csv(path: &Path) -> Result<TimedRows> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect(),
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    if header.first().map(String::as_str) != Some("timestamp") {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `timestamp`".into(),
        });
    }
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header names no columns".into(),
        });
    }
    let mut rows = Vec::new();
    let mut stamps = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let ts: i64 = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad timestamp {:?}", &rec[0]),
        })?;
        stamps.push((line, ts));
        rows.push((line, rec.iter().skip(1).map(str::to_string).collect()));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let t0 = stamps[0].1;
    let step = if stamps.len() > 1 { stamps[1].1 - stamps[0].1 } else { 0 };
    if stamps.len() > 1 && step <= 0 {
        return Err(Error::Spacing {
            line: stamps[1].0,
            expected: 1,
            found: step,
        });
    }
    for w in stamps.windows(2) {
        let found = w[1].1 - w[0].1;
        if found != step {
            return Err(Error::Spacing {
                line: w[1].0,
                expected: step,
                found,
            });
        }
    }
    Ok(TimedRows { header, t0, step, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse {
            line,
            msg: e.to_string(),
        }
    }
}

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number {cell:?} in column {column:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite number {cell:?} in column {column:?}"),
        });
    }
    Ok(v)
}

fn load_panel_csv(path: &Path) -> Result<SeriesPanel> {
    let parsed = read_timed_csv(path)?;
    let ids: Vec<String> = parsed.header[1..].to_vec();
    check_unique_ids(&ids)?;
    let n = ids.len();
    let len = parsed.rows.len();
    let mut values = vec![f64::NAN; n * len];
    let mut mask = vec![false; n * len];
    for (t, (line, cells)) in parsed.rows.iter().enumerate() {
        for (i, cell) in cells.iter().enumerate() {
            if cell.trim().is_empty() {
                continue;
            }
            values[i * len + t] = parse_cell(cell, *line, &ids[i])?;
            mask[i * len + t] = true;
        }
    }
    SeriesPanel::new(ids, parsed.t0, parsed.step, len, values, mask)
}

fn store_panel_csv(panel: &SeriesPanel, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(panel.values.len() * 8);
    out.push_str("timestamp");
    for id in &panel.sensor_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for t in 0..panel.len {
        out.push_str(&panel.timestamp(t).to_string());
        for i in 0..panel.n_sensors() {
            out.push(',');
            if panel.is_valid(i, t) {
                out.push_str(&panel.value(i, t).to_string());
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn store_panel_bin(panel: &SeriesPanel, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(PANEL_MAGIC);
    w.u32(PANEL_VERSION);
    w.u32(panel.n_sensors() as u32);
    w.u64(panel.len as u64);
    w.i64(panel.step);
    w.i64(panel.t0);
    for id in &panel.sensor_ids {
        w.str(id);
    }
    for &v in &panel.values {
        // one canonical NaN so masked cells are byte-stable
        w.f64(if v.is_nan() { f64::NAN } else { v });
    }
    w.bits(&panel.mask);
    w.write_to(path)
}

fn load_panel_bin(path: &Path) -> Result<SeriesPanel> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, "panel");
    r.magic(PANEL_MAGIC)?;
    let version = r.u32()?;
    if version != PANEL_VERSION {
        return Err(Error::Incompatible(format!(
            "panel version {version}, this build reads {PANEL_VERSION}"
        )));
    }
    let n = r.u32()? as usize;
    let len = r.u64()?;
    let step = r.i64()?;
    let t0 = r.i64()?;
    let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let cells = r.len(8, (n as u64).saturating_mul(len))?;
    let values = r.f64s(cells)?;
    let mask = r.bits(cells)?;
    r.finish()?;
    SeriesPanel::new(ids, t0, step, len as usize, values, mask)
}

pub fn load_exog_csv(path: &Path) -> Result<ExogTable> {
    let parsed = read_timed_csv(path)?;
    let names: Vec<String> = parsed.header[1..].to_vec();
    let mut columns = vec![Vec::with_capacity(parsed.rows.len()); names.len()];
    for (line, cells) in &parsed.rows {
        for (c, cell) in cells.iter().enumerate() {
            if cell.trim().is_empty() {
                return Err(Error::Parse {
                    line: *line,
                    msg: format!("empty exogenous cell in column {:?}", names[c]),
                });
            }
            columns[c].push(parse_cell(cell, *line, &names[c])?);
        }
    }
    ExogTable::new(parsed.t0, parsed.step, names, columns)
}

pub fn store_exog_csv(table: &ExogTable, path: &Path) -> Result<()> {
    let mut out = String::from("timestamp");
    for name in &table.names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..table.len {
        out.push_str(&(table.t0 + table.step * t as i64).to_string());
        for col in &table.columns {
            out.push(',');
            out.push_str(&col[t].to_string());
        }
        out.push('\n');
    }
    write_text(path, &out)
}
