//! Held-out reconstruction error, bootstrap medians and model comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Lead, N_LEADS};
use crate::record::{EkgRecord, Frame, MaskState};

/// Held-out RMSE of one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRmse {
    /// Over all held-out entries of the record (mV).
    pub pooled: f64,
    /// Per lead; `None` where the lead has no held-out entries.
    pub per_lead: [Option<f64>; N_LEADS],
    pub n_heldout: usize,
}

/// Scores `imputed` against the held-out entries of `truth`.
pub fn holdout_rmse(truth: &EkgRecord, imputed: &[Frame]) -> Result<RecordRmse> {
    if imputed.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), found: imputed.len() });
    }
    let mut sse = [0.0; N_LEADS];
    let mut count = [0usize; N_LEADS];
    for (t, row) in imputed.iter().enumerate() {
        for l in 0..N_LEADS {
            if let Some(x) = truth.heldout(t, l) {
                let d = row[l] - x;
                sse[l] += d * d;
                count[l] += 1;
            }
        }
    }
    let n: usize = count.iter().sum();
    if n == 0 {
        return Err(Error::NoHeldOutData);
    }
    let pooled = (sse.iter().sum::<f64>() / n as f64).sqrt();
    let per_lead = std::array::from_fn(|l| (count[l] > 0).then(|| (sse[l] / count[l] as f64).sqrt()));
    Ok(RecordRmse { pooled, per_lead, n_heldout: n })
}

/// Held-out errors of one model over a set of records, keyed by record id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_label: String,
    pub records: BTreeMap<String, RecordRmse>,
}

impl EvalReport {
    pub fn new(model_label: impl Into<String>) -> Self {
        Self { model_label: model_label.into(), records: BTreeMap::new() }
    }

    pub fn insert(&mut self, record_id: impl Into<String>, rmse: RecordRmse) {
        self.records.insert(record_id.into(), rmse);
    }

    /// Pooled RMSE per record in record-id order.
    pub fn per_record_rmse(&self) -> Vec<f64> {
        self.records.values().map(|r| r.pooled).collect()
    }

    pub fn per_lead_rmse(&self) -> BTreeMap<(String, Lead), f64> {
        let mut out = BTreeMap::new();
        for (id, r) in &self.records {
            for lead in Lead::ALL {
                if let Some(v) = r.per_lead[lead.index()] {
                    out.insert((id.clone(), lead), v);
                }
            }
        }
        out
    }
}

/// Median with the midpoint convention for even lengths. `values` need not be
/// sorted. Returns `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(median_sorted(&v))
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Percentile `q ∈ [0, 100]` of sorted data by linear interpolation between
/// order statistics at rank `q/100 · (n − 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub median_rmse_samples: Vec<f64>,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl BootstrapSummary {
    /// Percentile interval of the bootstrap medians, e.g. `(2.5, 97.5)`.
    pub fn interval(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut s = self.median_rmse_samples.clone();
        s.sort_by(f64::total_cmp);
        (percentile_sorted(&s, lo), percentile_sorted(&s, hi))
    }
}

fn resample_indices(rng: &mut ChaCha8Rng, n: usize, buf: &mut Vec<usize>) {
    buf.clear();
    buf.extend((0..n).map(|_| rng.random_range(0..n)));
}

/// Medians of `n_bootstrap` resamples with replacement of `values`. The
/// input is sorted first, so the result does not depend on its order.
pub fn bootstrap_median(values: &[f64], n_bootstrap: usize, seed: u64) -> Result<BootstrapSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n_bootstrap == 0 {
        return Err(Error::InvalidParameter("n_bootstrap must be at least 1".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(sorted.len());
    let mut sample = Vec::with_capacity(sorted.len());
    let median_rmse_samples = (0..n_bootstrap)
        .map(|_| {
            resample_indices(&mut rng, sorted.len(), &mut idx);
            sample.clear();
            sample.extend(idx.iter().map(|&i| sorted[i]));
            sample.sort_by(f64::total_cmp);
            median_sorted(&sample)
        })
        .collect();
    Ok(BootstrapSummary { median_rmse_samples, n_bootstrap, seed })
}

/// Bootstrap medians of `a − b` pairs resampled jointly over records, so both
/// models see the same records in every resample.
fn paired_median_differences(a: &[f64], b: &[f64], n_bootstrap: usize, seed: u64) -> Vec<f64> {
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(n);
    let (mut sa, mut sb) = (Vec::with_capacity(n), Vec::with_capacity(n));
    (0..n_bootstrap)
        .map(|_| {
            resample_indices(&mut rng, n, &mut idx);
            sa.clear();
            sb.clear();
            sa.extend(idx.iter().map(|&i| a[i]));
            sb.extend(idx.iter().map(|&i| b[i]));
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            median_sorted(&sa) - median_sorted(&sb)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    /// Median of the per-record pooled RMSEs.
    pub median_rmse: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bootstrap: BootstrapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDifference {
    pub model_a: String,
    pub model_b: String,
    /// `median(a) − median(b)`.
    pub median_difference: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub models: Vec<ModelSummary>,
    pub pairwise: Vec<PairwiseDifference>,
    pub n_records: usize,
}

/// Bootstrap summaries per model plus pairwise median differences. All
/// reports must cover the same record ids.
pub fn compare_models(reports: &[EvalReport], n_bootstrap: usize, seed: u64) -> Result<Comparison> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    if first.records.is_empty() {
        return Err(Error::EmptyInput);
    }
    for r in &reports[1..] {
        if !r.records.keys().eq(first.records.keys()) {
            let mismatch: Vec<&String> = r
                .records
                .keys()
                .filter(|k| !first.records.contains_key(*k))
                .chain(first.records.keys().filter(|k| !r.records.contains_key(*k)))
                .collect();
            return Err(Error::RecordSetMismatch(format!(
                "models '{}' and '{}' differ on records {:?}",
                first.model_label, r.model_label, mismatch
            )));
        }
    }
    let mut models = Vec::with_capacity(reports.len());
    for r in reports {
        let values = r.per_record_rmse();
        let bootstrap = bootstrap_median(&values, n_bootstrap, seed)?;
        let (ci_lo, ci_hi) = bootstrap.interval(2.5, 97.5);
        models.push(ModelSummary {
            model: r.model_label.clone(),
            median_rmse: median(&values).expect("non-empty"),
            ci_lo,
            ci_hi,
            bootstrap,
        });
    }
    let mut pairwise = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let a = reports[i].per_record_rmse();
            let b = reports[j].per_record_rmse();
            let mut diffs = paired_median_differences(&a, &b, n_bootstrap, seed);
            diffs.sort_by(f64::total_cmp);
            pairwise.push(PairwiseDifference {
                model_a: reports[i].model_label.clone(),
                model_b: reports[j].model_label.clone(),
                median_difference: models[i].median_rmse - models[j].median_rmse,
                ci_lo: percentile_sorted(&diffs, 2.5),
                ci_hi: percentile_sorted(&diffs, 97.5),
            });
        }
    }
    Ok(Comparison { models, pairwise, n_records: first.records.len() })
}

impl Comparison {
    /// `model,median_rmse_mv,ci_lo_2.5,ci_hi_97.5`
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,median_rmse_mv,ci_lo_2.5,ci_hi_97.5\n");
        for m in &self.models {
            let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", m.model, m.median_rmse, m.ci_lo, m.ci_hi);
        }
        s
    }

    /// `model_a,model_b,median_difference_mv,ci_lo_2.5,ci_hi_97.5`
    pub fn pairwise_csv(&self) -> String {
        let mut s = String::from("model_a,model_b,median_difference_mv,ci_lo_2.5,ci_hi_97.5\n");
        for p in &self.pairwise {
            let _ = writeln!(s, "{},{},{:.9},{:.9},{:.9}", p.model_a, p.model_b, p.median_difference, p.ci_lo, p.ci_hi);
        }
        s
    }

    /// Fixed-width table for terminals and logs.
    pub fn table(&self) -> String {
        let n_boot = self.models.first().map_or(0, |m| m.bootstrap.n_bootstrap);
        let mut s = format!("held-out RMSE over {} records, {} bootstrap samples\n", self.n_records, n_boot);
        let _ = writeln!(s, "{:<12} {:>12} {:>12} {:>12}", "model", "median mV", "2.5%", "97.5%");
        for m in &self.models {
            let _ = writeln!(s, "{:<12} {:>12.6} {:>12.6} {:>12.6}", m.model, m.median_rmse, m.ci_lo, m.ci_hi);
        }
        if !self.pairwise.is_empty() {
            let _ = writeln!(s, "\n{:<25} {:>12} {:>12} {:>12}", "difference", "median mV", "2.5%", "97.5%");
            for p in &self.pairwise {
                let label = format!("{} - {}", p.model_a, p.model_b);
                let _ = writeln!(s, "{:<25} {:>12.6} {:>12.6} {:>12.6}", label, p.median_difference, p.ci_lo, p.ci_hi);
            }
        }
        s
    }
}

/// `record_id,model,lead,rmse_mv` with one `ALL` row per record followed by
/// its per-lead rows.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("record_id,model,lead,rmse_mv\n");
    for r in reports {
        for (id, rec) in &r.records {
            let _ = writeln!(s, "{},{},ALL,{:.9}", id, r.model_label, rec.pooled);
            for lead in Lead::ALL {
                if let Some(v) = rec.per_lead[lead.index()] {
                    let _ = writeln!(s, "{},{},{},{:.9}", id, r.model_label, lead.name(), v);
                }
            }
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Counts the held-out entries of a record per lead.
pub fn heldout_counts(record: &EkgRecord) -> [usize; N_LEADS] {
    std::array::from_fn(|l| record.count_in_lead(l, MaskState::HeldOut))
}
