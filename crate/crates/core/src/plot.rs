//! Minimal SVG emitters for bootstrap summaries and lead reconstructions.

use std::fmt::Write as _;

use crate::evaluation::{percentile_sorted, ModelSummary};
use crate::geometry::{LEAD_NAMES, N_LEADS};
use crate::record::{EkgRecord, Frame, MaskState};

const FONT: &str = "font-family=\"sans-serif\" font-size=\"11\"";
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Box plot of the bootstrap median distributions, one row per model:
/// whiskers at 2.5/97.5 %, box at the quartiles, tick at the point median.
pub fn bootstrap_svg(models: &[ModelSummary]) -> String {
    let (w, row_h, left, right, top) = (640.0, 40.0, 90.0, 20.0, 30.0);
    let h = top + row_h * models.len() as f64 + 40.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in models {
        for &v in &m.bootstrap.median_rmse_samples {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        lo -= 0.5 * lo.abs().max(1e-3);
        hi += 0.5 * hi.abs().max(1e-3);
    }
    let x = |v: f64| left + (v - lo) / (hi - lo) * (w - left - right);
    let mut s = header(w, h);
    let _ = writeln!(s, "<text x=\"{left}\" y=\"18\" {FONT}>median held-out RMSE (mV), bootstrap distribution</text>");
    for (i, m) in models.iter().enumerate() {
        let mut v = m.bootstrap.median_rmse_samples.clone();
        v.sort_by(f64::total_cmp);
        let [p2, q1, q3, p97] = [2.5, 25.0, 75.0, 97.5].map(|q| percentile_sorted(&v, q));
        let cy = top + row_h * (i as f64 + 0.5);
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<text x=\"8\" y=\"{:.1}\" {FONT}>{}</text>", cy + 4.0, escape(&m.model));
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" y1=\"{cy:.1}\" x2=\"{:.2}\" y2=\"{cy:.1}\" stroke=\"{colour}\"/>",
            x(p2),
            x(p97)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.1}\" width=\"{:.2}\" height=\"{:.1}\" fill=\"{colour}\" fill-opacity=\"0.3\" stroke=\"{colour}\"/>",
            x(q1),
            cy - 10.0,
            (x(q3) - x(q1)).max(1.0),
            20.0
        );
        let xm = x(m.median_rmse);
        let _ = writeln!(
            s,
            "<line x1=\"{xm:.2}\" y1=\"{:.1}\" x2=\"{xm:.2}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>",
            cy - 12.0,
            cy + 12.0
        );
    }
    let axis_y = top + row_h * models.len() as f64 + 10.0;
    let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{axis_y}\" x2=\"{}\" y2=\"{axis_y}\" stroke=\"black\"/>", w - right);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" {FONT} text-anchor=\"middle\">{v:.4}</text>", x(v), axis_y + 16.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Appends polylines for runs of consecutive frames where `keep` holds.
fn polylines(
    out: &mut String,
    values: impl Fn(usize) -> f64,
    keep: impl Fn(usize) -> bool,
    n: usize,
    px: impl Fn(usize) -> f64,
    py: impl Fn(f64) -> f64,
    style: &str,
) {
    let mut t = 0;
    while t < n {
        if !keep(t) {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && keep(t) {
            t += 1;
        }
        out.push_str("<polyline fill=\"none\" ");
        out.push_str(style);
        out.push_str(" points=\"");
        for u in start..t {
            let _ = write!(out, "{:.1},{:.2} ", px(u), py(values(u)));
        }
        out.push_str("\"/>\n");
    }
}

/// Twelve stacked lead panels: observed samples solid black, held-out truth
/// dashed grey, the imputation in red.
pub fn reconstruction_svg(record: &EkgRecord, imputed: &[Frame], title: &str) -> String {
    let (w, panel_h, left, top) = (900.0, 70.0, 50.0, 24.0);
    let h = top + panel_h * N_LEADS as f64 + 10.0;
    let n = record.len();
    let px = |t: usize| left + (w - left - 10.0) * t as f64 / (n.max(2) - 1) as f64;
    let mut s = header(w, h);
    let _ = writeln!(s, "<text x=\"{left}\" y=\"16\" {FONT}>{}</text>", escape(title));
    for l in 0..N_LEADS {
        let y0 = top + panel_h * l as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..n {
            for v in [record.observed(t, l), record.truth(t, l), imputed.get(t).map(|r| r[l])].into_iter().flatten() {
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if !(hi > lo) {
            lo = -1.0;
            hi = 1.0;
        }
        let py = |v: f64| y0 + 4.0 + (hi - v) / (hi - lo) * (panel_h - 8.0);
        let _ = writeln!(s, "<text x=\"4\" y=\"{:.1}\" {FONT}>{}</text>", y0 + panel_h / 2.0, LEAD_NAMES[l]);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            y0 + panel_h,
            w - 10.0,
            y0 + panel_h
        );
        let samples = record.samples();
        polylines(
            &mut s,
            |t| samples[t][l],
            |t| record.state(t, l) == MaskState::Observed,
            n,
            px,
            py,
            "stroke=\"black\" stroke-width=\"1\"",
        );
        polylines(
            &mut s,
            |t| samples[t][l],
            |t| record.state(t, l) == MaskState::HeldOut,
            n,
            px,
            py,
            "stroke=\"#777\" stroke-width=\"1\" stroke-dasharray=\"4,3\"",
        );
        polylines(
            &mut s,
            |t| imputed[t][l],
            |t| t < imputed.len() && imputed[t][l].is_finite(),
            n,
            px,
            py,
            "stroke=\"#d62728\" stroke-width=\"0.8\" stroke-opacity=\"0.8\"",
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::bootstrap_median;

    #[test]
    fn bootstrap_plot_has_one_row_per_model() {
        let b = bootstrap_median(&[0.1, 0.2, 0.3], 50, 0).unwrap();
        let m = ModelSummary { model: "ppca<3>".into(), median_rmse: 0.2, ci_lo: 0.1, ci_hi: 0.3, bootstrap: b };
        let svg = bootstrap_svg(&[m.clone(), ModelSummary { model: "dipole".into(), ..m }]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("ppca&lt;3&gt;"));
        assert_eq!(svg.matches("<rect").count(), 3);
    }

    #[test]
    fn reconstruction_plot_splits_runs() {
        let samples: Vec<Frame> = (0..6).map(|t| [t as f64; N_LEADS]).collect();
        let mut mask = vec![[MaskState::Observed; N_LEADS]; 6];
        mask[2][0] = MaskState::HeldOut;
        mask[3][0] = MaskState::HeldOut;
        let rec = EkgRecord::new("r", 10.0, samples.clone(), mask).unwrap();
        let svg = reconstruction_svg(&rec, &samples, "r");
        // Lead I: two observed runs, one held-out run, one imputation run;
        // the other leads: one observed run and one imputation run each.
        assert_eq!(svg.matches("<polyline").count(), 4 + 2 * (N_LEADS - 1));
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
    }
}
