//! Hold-out and clinical-missingness mask schemes.
//!
//! `PtbHoldout` hides contiguous windows of every lead of an otherwise
//! complete record. `EdLayout` first reduces the record to what a printed
//! 3×4 clinical report keeps (three long leads plus one short segment of each
//! other lead) and then hides windows inside what remains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{Lead, N_LEADS};
use crate::record::{EkgRecord, MaskRow, MaskState};

impl Serialize for Lead {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Lead {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Lead::from_name(&name).ok_or_else(|| serde::de::Error::custom(format!("unknown lead {name:?}")))
    }
}

/// Parameters of the held-out window placement shared by both schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutWindows {
    /// Fraction of each lead's observed samples to hold out, in (0, 0.5].
    #[serde(default = "default_fraction")]
    pub holdout_fraction: f64,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.1
}

fn default_window() -> f64 {
    1.0
}

impl Default for HoldoutWindows {
    fn default() -> Self {
        Self { holdout_fraction: default_fraction(), window_seconds: default_window(), seed: 0 }
    }
}

impl HoldoutWindows {
    fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::InvalidParameter(format!(
                "holdout_fraction must lie in (0, 0.5], got {}",
                self.holdout_fraction
            )));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::InvalidParameter("window_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Clinical report layout: long leads kept whole, every other lead kept for
/// one `segment_seconds` chunk in its report column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdLayout {
    #[serde(default = "default_segment")]
    pub segment_seconds: f64,
    #[serde(default = "default_long_leads")]
    pub long_leads: Vec<Lead>,
    /// Report column (0-based) of each lead, in lead order.
    #[serde(default = "default_columns")]
    pub columns: [usize; N_LEADS],
    #[serde(default = "default_fraction")]
    pub holdout_fraction: f64,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_segment() -> f64 {
    2.5
}

fn default_long_leads() -> Vec<Lead> {
    vec![Lead::II, Lead::V1, Lead::V5]
}

/// I, II, III | aVR, aVL, aVF | V1, V2, V3 | V4, V5, V6
fn default_columns() -> [usize; N_LEADS] {
    [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
}

impl Default for EdLayout {
    fn default() -> Self {
        Self {
            segment_seconds: default_segment(),
            long_leads: default_long_leads(),
            columns: default_columns(),
            holdout_fraction: default_fraction(),
            window_seconds: default_window(),
            seed: 0,
        }
    }
}

impl EdLayout {
    pub fn holdout(&self) -> HoldoutWindows {
        HoldoutWindows {
            holdout_fraction: self.holdout_fraction,
            window_seconds: self.window_seconds,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MaskScheme {
    PtbHoldout(HoldoutWindows),
    EdLayout(EdLayout),
}

impl MaskScheme {
    pub fn ptb(holdout_fraction: f64, window_seconds: f64, seed: u64) -> Self {
        MaskScheme::PtbHoldout(HoldoutWindows { holdout_fraction, window_seconds, seed })
    }

    pub fn ed(seed: u64) -> Self {
        MaskScheme::EdLayout(EdLayout { seed, ..Default::default() })
    }
}

/// Returns a copy of `record` under the scheme's mask. Missing entries never
/// become observed; held-out entries keep their ground truth.
pub fn apply_mask_scheme(record: &EkgRecord, scheme: &MaskScheme) -> Result<EkgRecord> {
    let mut mask: Vec<MaskRow> = record.mask().to_vec();
    let rate = record.sample_rate_hz();
    let holdout = match scheme {
        MaskScheme::PtbHoldout(h) => *h,
        MaskScheme::EdLayout(ed) => ed.holdout(),
    };
    holdout.validate()?;
    if let MaskScheme::EdLayout(ed) = scheme {
        apply_report_layout(&mut mask, rate, ed)?;
    }
    place_holdout_windows(&mut mask, rate, &holdout);
    record.with_mask(mask)
}

/// Length in samples of one report segment.
pub fn segment_len(segment_seconds: f64, rate: f64) -> usize {
    (segment_seconds * rate + 1e-9).floor() as usize
}

fn apply_report_layout(mask: &mut [MaskRow], rate: f64, ed: &EdLayout) -> Result<()> {
    if !(ed.segment_seconds > 0.0) {
        return Err(Error::InvalidParameter("segment_seconds must be positive".into()));
    }
    let seg = segment_len(ed.segment_seconds, rate);
    if seg == 0 {
        return Err(Error::InvalidParameter("segment shorter than one sample".into()));
    }
    let short: Vec<usize> = (0..N_LEADS).filter(|&l| !ed.long_leads.contains(&Lead::ALL[l])).collect();
    let required = short.iter().map(|&l| (ed.columns[l] + 1) * seg).max().unwrap_or(0);
    if mask.len() < required {
        return Err(Error::InsufficientLength { required, available: mask.len() });
    }
    for &l in &short {
        let keep = ed.columns[l] * seg..(ed.columns[l] + 1) * seg;
        for (t, row) in mask.iter_mut().enumerate() {
            if !keep.contains(&t) {
                row[l] = MaskState::Missing;
            }
        }
    }
    Ok(())
}

/// Places held-out windows lead by lead (in a seeded order) until each lead
/// has `round(fraction · observed)` held-out samples. Each window sits inside
/// observed entries of its lead; among admissible positions the ones
/// overlapping the fewest already held-out leads are preferred, so windows of
/// different leads do not overlap whenever the record leaves room for it.
fn place_holdout_windows(mask: &mut [MaskRow], rate: f64, params: &HoldoutWindows) {
    let n = mask.len();
    if n == 0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let window = ((params.window_seconds * rate).round() as usize).max(1);
    let mut occupancy = vec![0u32; n];
    let mut order: Vec<usize> = (0..N_LEADS).collect();
    order.shuffle(&mut rng);

    for lead in order {
        let observed = mask.iter().filter(|m| m[lead] == MaskState::Observed).count();
        let mut remaining = (params.holdout_fraction * observed as f64).round() as usize;
        while remaining > 0 {
            let len = remaining.min(window);
            let Some(start) = choose_window(mask, &occupancy, lead, len, &mut rng) else {
                break;
            };
            for t in start..start + len {
                mask[t][lead] = MaskState::HeldOut;
                occupancy[t] += 1;
            }
            remaining -= len;
        }
    }
}

fn choose_window(mask: &[MaskRow], occupancy: &[u32], lead: usize, len: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let n = mask.len();
    if len > n {
        return None;
    }
    // Runs of observed samples ending at each index.
    let mut run = vec![0usize; n];
    for t in 0..n {
        if mask[t][lead] == MaskState::Observed {
            run[t] = if t > 0 { run[t - 1] + 1 } else { 1 };
        }
    }
    // Sliding-window maximum of occupancy.
    let mut best_cost = u32::MAX;
    let mut candidates = Vec::new();
    let mut deque = std::collections::VecDeque::new();
    for t in 0..n {
        while deque.back().is_some_and(|&b: &usize| occupancy[b] <= occupancy[t]) {
            deque.pop_back();
        }
        deque.push_back(t);
        if deque[0] + len <= t {
            deque.pop_front();
        }
        if t + 1 >= len && run[t] >= len {
            let start = t + 1 - len;
            let cost = occupancy[deque[0]];
            if cost < best_cost {
                best_cost = cost;
                candidates.clear();
            }
            if cost == best_cost {
                candidates.push(start);
            }
        }
    }
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}
