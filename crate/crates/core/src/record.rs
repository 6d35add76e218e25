//! EKG records and their CSV representation.
//!
//! A record file has the header `time_s,I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V6`
//! and one row per sample. An empty cell is an unavailable value. Two optional
//! sidecars sit next to the data file:
//!
//! * `<path>.mask.csv`: per-entry tokens `O` (observed), `H` (held out) and
//!   `M` (missing) under the lead header;
//! * `<path>.truth.csv`: same layout as the data file, carrying the ground
//!   truth of held-out entries only. Written only when the record holds out
//!   at least one entry.
//!
//! Values are written with six fractional digits, `.` decimal separator and
//! LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LEAD_NAMES, N_LEADS};

/// Availability of one lead sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskState {
    Observed,
    HeldOut,
    Missing,
}

impl MaskState {
    pub fn token(self) -> char {
        match self {
            MaskState::Observed => 'O',
            MaskState::HeldOut => 'H',
            MaskState::Missing => 'M',
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "O" => Some(MaskState::Observed),
            "H" => Some(MaskState::HeldOut),
            "M" => Some(MaskState::Missing),
            _ => None,
        }
    }
}

pub type Frame = [f64; N_LEADS];
pub type MaskRow = [MaskState; N_LEADS];

/// T×12 lead samples in millivolts with a per-entry availability mask.
///
/// Missing entries carry `NaN`; held-out entries keep their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EkgRecord {
    pub record_id: String,
    sample_rate_hz: f64,
    samples: Vec<Frame>,
    mask: Vec<MaskRow>,
}

impl EkgRecord {
    pub fn new(record_id: impl Into<String>, sample_rate_hz: f64, samples: Vec<Frame>, mask: Vec<MaskRow>) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::InvalidParameter(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if samples.len() != mask.len() {
            return Err(Error::DimensionMismatch { expected: samples.len(), found: mask.len() });
        }
        let mut samples = samples;
        for (t, (row, m)) in samples.iter_mut().zip(&mask).enumerate() {
            for (l, (v, &state)) in row.iter_mut().zip(m).enumerate() {
                match state {
                    MaskState::Missing => *v = f64::NAN,
                    _ if !v.is_finite() => {
                        return Err(Error::InvalidParameter(format!(
                            "non-finite value at sample {t}, lead {}",
                            LEAD_NAMES[l]
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { record_id: record_id.into(), sample_rate_hz, samples, mask })
    }

    /// A record with every entry observed.
    pub fn fully_observed(record_id: impl Into<String>, sample_rate_hz: f64, samples: Vec<Frame>) -> Result<Self> {
        let mask = vec![[MaskState::Observed; N_LEADS]; samples.len()];
        Self::new(record_id, sample_rate_hz, samples, mask)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz
    }

    pub fn samples(&self) -> &[Frame] {
        &self.samples
    }

    pub fn mask(&self) -> &[MaskRow] {
        &self.mask
    }

    pub fn state(&self, t: usize, lead: usize) -> MaskState {
        self.mask[t][lead]
    }

    /// Value available to a model fit: `Some` only for observed entries.
    pub fn observed(&self, t: usize, lead: usize) -> Option<f64> {
        (self.mask[t][lead] == MaskState::Observed).then(|| self.samples[t][lead])
    }

    /// Ground truth for observed and held-out entries.
    pub fn truth(&self, t: usize, lead: usize) -> Option<f64> {
        (self.mask[t][lead] != MaskState::Missing).then(|| self.samples[t][lead])
    }

    /// Ground truth of a held-out entry.
    pub fn heldout(&self, t: usize, lead: usize) -> Option<f64> {
        (self.mask[t][lead] == MaskState::HeldOut).then(|| self.samples[t][lead])
    }

    pub fn count(&self, state: MaskState) -> usize {
        self.mask.iter().flatten().filter(|&&s| s == state).count()
    }

    pub fn count_in_lead(&self, lead: usize, state: MaskState) -> usize {
        self.mask.iter().filter(|m| m[lead] == state).count()
    }

    /// Same samples under a new mask. Entries that were missing stay missing.
    pub fn with_mask(&self, mask: Vec<MaskRow>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: mask.len() });
        }
        for (old, new) in self.mask.iter().zip(&mask) {
            for (&o, &n) in old.iter().zip(new) {
                if o == MaskState::Missing && n != MaskState::Missing {
                    return Err(Error::InvalidParameter("cannot recover a missing entry".into()));
                }
            }
        }
        Self::new(self.record_id.clone(), self.sample_rate_hz, self.samples.clone(), mask)
    }

    /// Copy of the record with every held-out entry marked observed.
    pub fn revealed(&self) -> Self {
        let mask = self
            .mask
            .iter()
            .map(|m| m.map(|s| if s == MaskState::HeldOut { MaskState::Observed } else { s }))
            .collect();
        Self { mask, ..self.clone() }
    }
}

pub fn mask_path(path: &Path) -> PathBuf {
    sidecar(path, "mask.csv")
}

pub fn truth_path(path: &Path) -> PathBuf {
    sidecar(path, "truth.csv")
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Record id derived from a data file name (`rec07.csv` → `rec07`).
pub fn record_id_from_path(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "record".into())
}

fn header_line(with_time: bool) -> String {
    let mut s = String::new();
    if with_time {
        s.push_str("time_s,");
    }
    s.push_str(&LEAD_NAMES.join(","));
    s.push('\n');
    s
}

fn format_table(rate: f64, rows: impl Iterator<Item = [Option<f64>; N_LEADS]>) -> String {
    let mut out = header_line(true);
    for (t, row) in rows.enumerate() {
        write!(out, "{:.6}", t as f64 / rate).unwrap();
        for v in row {
            out.push(',');
            if let Some(v) = v {
                write!(out, "{v:.6}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Writes a fully populated T×12 table (e.g. an imputation).
pub fn write_samples(path: &Path, sample_rate_hz: f64, samples: &[Frame]) -> Result<()> {
    let text = format_table(sample_rate_hz, samples.iter().map(|r| r.map(Some)));
    fs::write(path, text)?;
    Ok(())
}

/// Writes the data file plus the mask sidecar, and the truth sidecar when
/// any entry is held out.
pub fn write_record(record: &EkgRecord, path: &Path) -> Result<()> {
    let data = format_table(
        record.sample_rate_hz,
        (0..record.len()).map(|t| std::array::from_fn(|l| record.observed(t, l))),
    );
    fs::write(path, data)?;

    let mut mask = header_line(false);
    for row in &record.mask {
        let tokens: Vec<String> = row.iter().map(|s| s.token().to_string()).collect();
        mask.push_str(&tokens.join(","));
        mask.push('\n');
    }
    fs::write(mask_path(path), mask)?;

    let truth = truth_path(path);
    if record.count(MaskState::HeldOut) > 0 {
        let text = format_table(
            record.sample_rate_hz,
            (0..record.len()).map(|t| {
                std::array::from_fn(|l| (record.state(t, l) == MaskState::HeldOut).then(|| record.samples[t][l]))
            }),
        );
        fs::write(truth, text)?;
    } else if truth.exists() {
        fs::remove_file(truth)?;
    }
    Ok(())
}

struct Table {
    times: Vec<f64>,
    values: Vec<[Option<f64>; N_LEADS]>,
}

fn parse_cell(cell: &str, line: usize) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| Error::Parse { line, message: format!("invalid number {cell:?}") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value {cell:?}") });
    }
    Ok(Some(v))
}

fn check_header(headers: &csv::StringRecord, with_time: bool) -> Result<()> {
    let expected: Vec<&str> = with_time.then_some("time_s").into_iter().chain(LEAD_NAMES).collect();
    if headers.len() != expected.len() {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected {} columns, found {}", expected.len(), headers.len()),
        });
    }
    for (h, e) in headers.iter().zip(&expected) {
        if h.trim() != *e {
            return Err(Error::UnknownLeadHeader(h.to_string()));
        }
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?)
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv_reader(path)?;
    check_header(rdr.headers()?, true)?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != N_LEADS + 1 {
            return Err(Error::Parse { line, message: format!("expected {} cells, found {}", N_LEADS + 1, row.len()) });
        }
        let t = parse_cell(&row[0], line)?.ok_or(Error::Parse { line, message: "empty time cell".into() })?;
        let mut vals = [None; N_LEADS];
        for (v, cell) in vals.iter_mut().zip(row.iter().skip(1)) {
            *v = parse_cell(cell, line)?;
        }
        times.push(t);
        values.push(vals);
    }
    Ok(Table { times, values })
}

fn read_mask(path: &Path) -> Result<Vec<MaskRow>> {
    let mut rdr = csv_reader(path)?;
    check_header(rdr.headers()?, false)?;
    let mut rows = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != N_LEADS {
            return Err(Error::Parse { line, message: format!("expected {N_LEADS} mask tokens, found {}", row.len()) });
        }
        let mut m = [MaskState::Missing; N_LEADS];
        for (s, tok) in m.iter_mut().zip(row.iter()) {
            *s = MaskState::from_token(tok.trim())
                .ok_or_else(|| Error::Parse { line, message: format!("invalid mask token {tok:?}") })?;
        }
        rows.push(m);
    }
    Ok(rows)
}

/// Infers the sampling rate from the first two time stamps and checks every
/// later interval against it. The tolerance admits the 1 µs quantization of
/// six-decimal time stamps.
fn sample_rate(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::InsufficientData("at least two samples are needed to infer the sampling rate".into()));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::NonUniformSampling { row: 1 });
    }
    let tol = 1e-6 * dt + 1e-6;
    for (i, w) in times.windows(2).enumerate().skip(1) {
        if ((w[1] - w[0]) - dt).abs() > tol {
            return Err(Error::NonUniformSampling { row: i + 1 });
        }
    }
    Ok(1.0 / dt)
}

/// Reads a record and, when present, its mask and truth sidecars.
pub fn read_record(path: &Path) -> Result<EkgRecord> {
    let table = read_table(path)?;
    let rate = sample_rate(&table.times)?;
    let n = table.values.len();

    let mpath = mask_path(path);
    let mask = if mpath.exists() {
        let m = read_mask(&mpath)?;
        if m.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: m.len() });
        }
        m
    } else {
        table
            .values
            .iter()
            .map(|row| row.map(|v| if v.is_some() { MaskState::Observed } else { MaskState::Missing }))
            .collect()
    };

    let tpath = truth_path(path);
    let truth = if tpath.exists() { Some(read_table(&tpath)?) } else { None };
    if let Some(t) = &truth {
        if t.values.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: t.values.len() });
        }
    }

    let mut samples = vec![[f64::NAN; N_LEADS]; n];
    for t in 0..n {
        for l in 0..N_LEADS {
            let line = t + 2;
            let cell = table.values[t][l];
            samples[t][l] = match (mask[t][l], cell) {
                (MaskState::Observed, Some(v)) => v,
                (MaskState::Observed, None) => {
                    return Err(Error::Parse { line, message: format!("observed {} cell is empty", LEAD_NAMES[l]) })
                }
                (_, Some(_)) => {
                    return Err(Error::Parse { line, message: format!("masked {} cell carries a value", LEAD_NAMES[l]) })
                }
                (MaskState::HeldOut, None) => truth
                    .as_ref()
                    .and_then(|tr| tr.values[t][l])
                    .ok_or_else(|| Error::Parse { line, message: format!("held-out {} cell has no truth", LEAD_NAMES[l]) })?,
                (MaskState::Missing, None) => f64::NAN,
            };
        }
    }
    EkgRecord::new(record_id_from_path(path), rate, samples, mask)
}

/// Reads a populated T×12 table such as an imputation output.
pub fn read_samples(path: &Path) -> Result<(f64, Vec<Frame>)> {
    let table = read_table(path)?;
    let rate = sample_rate(&table.times)?;
    let mut out = Vec::with_capacity(table.values.len());
    for (i, row) in table.values.iter().enumerate() {
        let mut f = [0.0; N_LEADS];
        for (o, v) in f.iter_mut().zip(row) {
            *o = v.ok_or(Error::Parse { line: i + 2, message: "empty cell in a populated table".into() })?;
        }
        out.push(f);
    }
    Ok((rate, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ramp(n: usize) -> Vec<Frame> {
        (0..n).map(|t| std::array::from_fn(|l| (t * 12 + l) as f64 * 0.001 - 0.05)).collect()
    }

    #[test]
    fn two_row_file_is_fully_observed() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("two.csv");
        let mut text = header_line(true);
        text.push_str("0.000000,1,2,3,4,5,6,7,8,9,10,11,12\n0.004000,1,2,3,4,5,6,7,8,9,10,11,12\n");
        fs::write(&p, text).unwrap();
        let r = read_record(&p).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.count(MaskState::Observed), 24);
        assert!((r.sample_rate_hz() - 250.0).abs() < 1e-9);
        assert_eq!(r.record_id, "two");
    }

    #[test]
    fn empty_cells_become_missing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("v3.csv");
        let n = 2500;
        let samples = ramp(n);
        let mut text = header_line(true);
        for t in 0..n {
            write!(text, "{:.6}", t as f64 / 250.0).unwrap();
            for l in 0..N_LEADS {
                text.push(',');
                if l != 8 || (100..725).contains(&t) {
                    write!(text, "{:.6}", samples[t][l]).unwrap();
                }
            }
            text.push('\n');
        }
        fs::write(&p, text).unwrap();
        let r = read_record(&p).unwrap();
        assert_eq!(r.count_in_lead(8, MaskState::Observed), 625);
        assert_eq!(r.count_in_lead(8, MaskState::Missing), n - 625);
        assert_eq!(r.state(99, 8), MaskState::Missing);
        assert_eq!(r.state(100, 8), MaskState::Observed);
        assert_eq!(r.state(725, 8), MaskState::Missing);
        assert_eq!(r.count_in_lead(7, MaskState::Observed), n);
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.csv");

        fs::write(&p, "time_s,I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V7\n0,1,1,1,1,1,1,1,1,1,1,1,1\n").unwrap();
        assert!(matches!(read_record(&p), Err(Error::UnknownLeadHeader(h)) if h == "V7"));

        let mut text = header_line(true);
        text.push_str("0.0,1,2,3,4,5,6,7,8,9,10,11,12\n0.004,1,2,3,x,5,6,7,8,9,10,11,12\n");
        fs::write(&p, &text).unwrap();
        assert!(matches!(read_record(&p), Err(Error::Parse { line: 3, .. })));

        let mut text = header_line(true);
        text.push_str("0.0,1,2,3,4,5,6,7,8,9,10,11,12\n0.004,1,2,3\n");
        fs::write(&p, &text).unwrap();
        assert!(matches!(read_record(&p), Err(Error::Parse { line: 3, .. })));

        let mut text = header_line(true);
        for t in [0.0, 0.004, 0.008, 0.013] {
            text.push_str(&format!("{t},1,2,3,4,5,6,7,8,9,10,11,12\n"));
        }
        fs::write(&p, &text).unwrap();
        assert!(matches!(read_record(&p), Err(Error::NonUniformSampling { row: 3 })));
    }

    #[test]
    fn round_trip_with_sidecars() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rec.csv");
        let n = 20;
        let mut mask = vec![[MaskState::Observed; N_LEADS]; n];
        mask[3][4] = MaskState::HeldOut;
        mask[5][0] = MaskState::Missing;
        mask[6][11] = MaskState::Missing;
        let r = EkgRecord::new("rec", 500.0, ramp(n), mask).unwrap();
        write_record(&r, &p).unwrap();

        let tokens = fs::read_to_string(mask_path(&p)).unwrap();
        assert_eq!(tokens.matches('H').count(), 1);
        assert!(truth_path(&p).exists());

        let back = read_record(&p).unwrap();
        assert_eq!(back.mask(), r.mask());
        for t in 0..n {
            for l in 0..N_LEADS {
                match r.truth(t, l) {
                    Some(v) => assert!((back.truth(t, l).unwrap() - v).abs() <= 5e-7),
                    None => assert!(back.truth(t, l).is_none()),
                }
            }
        }
    }

    #[test]
    fn all_observed_record_writes_no_truth_file() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        let r = EkgRecord::fully_observed("obs", 250.0, ramp(5)).unwrap();
        write_record(&r, &p).unwrap();
        assert!(!truth_path(&p).exists());
        assert!(mask_path(&p).exists());
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("time_s,I,II,III,aVR,aVL,aVF,V1,V2,V3,V4,V5,V6\n0.000000,-0.050000,"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn masks_cannot_recover_missing_entries() {
        let mut mask = vec![[MaskState::Observed; N_LEADS]; 3];
        mask[1][2] = MaskState::Missing;
        let r = EkgRecord::new("m", 250.0, ramp(3), mask).unwrap();
        assert!(r.samples()[1][2].is_nan());
        let all = vec![[MaskState::Observed; N_LEADS]; 3];
        assert!(r.with_mask(all).is_err());
    }
}
