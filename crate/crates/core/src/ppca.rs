//! Probabilistic PCA with missing entries, fit by EM.
//!
//! Model: `x_t = μ + F z_t + ε`, `z_t ~ N(0, I_K)`, `ε ~ N(0, σ² I)`. The
//! E-step conditions each frame on its observed leads only; the M-step solves
//! per-lead regressions of the observed values on `(E[z_t], 1)` using second
//! moments, then pools the residual variance.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::N_LEADS;
use crate::record::{EkgRecord, Frame};

/// Frames per parallel work item in the E-step.
const CHUNK: usize = 256;

/// Noise variance floor relative to the mean observed variance.
const VARIANCE_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpcaConfig {
    pub max_iters: usize,
    /// Stop when the relative change of the log-likelihood falls below this.
    pub tol: f64,
    /// Seeds the directions used when the data have fewer than K non-zero
    /// principal components.
    pub seed: u64,
    /// Estimate the mean vector; when false the model has no intercept.
    pub centering: bool,
}

impl Default for PpcaConfig {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-8, seed: 0, centering: true }
    }
}

impl PpcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::InvalidParameter(format!("tol must lie in (0, 1), got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcaModel {
    /// 12×K loadings (mV per unit latent).
    pub factors: DMatrix<f64>,
    pub mean: [f64; N_LEADS],
    /// σ² (mV²).
    pub noise_variance: f64,
}

impl PpcaModel {
    pub fn k(&self) -> usize {
        self.factors.ncols()
    }

    /// Posterior mean of the latent given the observed leads of one frame, and
    /// the frame's marginal log-likelihood. Frames with nothing observed get
    /// the prior mean and contribute zero.
    pub fn posterior(&self, leads: &[Option<f64>; N_LEADS]) -> (DVector<f64>, f64) {
        self.posterior_full(leads).map(|p| (p.mean, p.log_likelihood)).unwrap_or((DVector::zeros(self.k()), 0.0))
    }

    fn posterior_full(&self, leads: &[Option<f64>; N_LEADS]) -> Option<FramePosterior> {
        let k = self.k();
        let obs: Vec<usize> = (0..N_LEADS).filter(|&l| leads[l].is_some()).collect();
        if obs.is_empty() {
            return None;
        }
        let s2 = self.noise_variance;
        let fo = DMatrix::from_fn(obs.len(), k, |i, j| self.factors[(obs[i], j)]);
        let r = DVector::from_iterator(obs.len(), obs.iter().map(|&l| leads[l].unwrap() - self.mean[l]));
        let m = DMatrix::identity(k, k) * s2 + fo.transpose() * &fo;
        let chol = Cholesky::new(m).expect("σ²I + FᵀF is positive definite");
        let ftr = fo.transpose() * &r;
        let mean = chol.solve(&ftr);
        // log det(σ²I + F_o F_oᵀ) = (n_o − K) ln σ² + ln det M
        let logdet_m: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let n_o = obs.len() as f64;
        let logdet = (n_o - k as f64) * s2.ln() + logdet_m;
        let quad = (r.norm_squared() - ftr.dot(&mean)) / s2;
        let log_likelihood = -0.5 * (n_o * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        let cov = chol.inverse() * s2;
        Some(FramePosterior { obs, mean, cov, log_likelihood })
    }

    /// `μ + F E[z | observed]` with observed entries passed through.
    pub fn impute_frame(&self, leads: &[Option<f64>; N_LEADS]) -> Frame {
        let (z, _) = self.posterior(leads);
        let fz = &self.factors * z;
        std::array::from_fn(|l| leads[l].unwrap_or(self.mean[l] + fz[l]))
    }
}

struct FramePosterior {
    obs: Vec<usize>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcaFit {
    pub model: PpcaModel,
    /// Posterior latent means under the final model, one row per frame.
    pub latent_means: Vec<Vec<f64>>,
    /// Observed-data log-likelihood after initialization and after every EM
    /// iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Expected sufficient statistics of one E-step.
struct Stats {
    /// Per lead: Σ E[z̃ z̃ᵀ] over frames observing the lead, z̃ = (z, 1).
    a: Vec<DMatrix<f64>>,
    /// Per lead: Σ x E[z̃].
    b: Vec<DVector<f64>>,
    /// Per lead: Σ x².
    xx: [f64; N_LEADS],
    log_likelihood: f64,
    latent_means: Vec<DVector<f64>>,
}

fn observed_rows(record: &EkgRecord) -> Vec<[Option<f64>; N_LEADS]> {
    (0..record.len()).map(|t| std::array::from_fn(|l| record.observed(t, l))).collect()
}

fn e_step(model: &PpcaModel, rows: &[[Option<f64>; N_LEADS]], centering: bool) -> Stats {
    let k = model.k();
    let dim = if centering { k + 1 } else { k };
    let empty = || Stats {
        a: vec![DMatrix::zeros(dim, dim); N_LEADS],
        b: vec![DVector::zeros(dim); N_LEADS],
        xx: [0.0; N_LEADS],
        log_likelihood: 0.0,
        latent_means: Vec::new(),
    };
    let partials: Vec<Stats> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = empty();
            for leads in chunk {
                let Some(post) = model.posterior_full(leads) else {
                    st.latent_means.push(DVector::zeros(k));
                    continue;
                };
                let mut ez = DVector::zeros(dim);
                ez.rows_mut(0, k).copy_from(&post.mean);
                let mut ezz = DMatrix::zeros(dim, dim);
                ezz.view_mut((0, 0), (k, k)).copy_from(&(&post.cov + &post.mean * post.mean.transpose()));
                if centering {
                    ez[k] = 1.0;
                    ezz.view_mut((0, k), (k, 1)).copy_from(&post.mean);
                    ezz.view_mut((k, 0), (1, k)).copy_from(&post.mean.transpose());
                    ezz[(k, k)] = 1.0;
                }
                for &l in &post.obs {
                    let x = leads[l].unwrap();
                    st.a[l] += &ezz;
                    st.b[l] += &ez * x;
                    st.xx[l] += x * x;
                }
                st.log_likelihood += post.log_likelihood;
                st.latent_means.push(post.mean);
            }
            st
        })
        .collect();

    let mut total = empty();
    for p in partials {
        for l in 0..N_LEADS {
            total.a[l] += &p.a[l];
            total.b[l] += &p.b[l];
            total.xx[l] += p.xx[l];
        }
        total.log_likelihood += p.log_likelihood;
        total.latent_means.extend(p.latent_means);
    }
    total
}

fn m_step(stats: &Stats, k: usize, centering: bool, n_obs: usize, floor: f64) -> PpcaModel {
    let mut factors = DMatrix::zeros(N_LEADS, k);
    let mut mean = [0.0; N_LEADS];
    let mut sse = 0.0;
    for l in 0..N_LEADS {
        let a = &stats.a[l];
        let b = &stats.b[l];
        let w = match Cholesky::new(a.clone()) {
            Some(c) => c.solve(b),
            None => a.clone().pseudo_inverse(1e-12).expect("pseudo-inverse") * b,
        };
        for j in 0..k {
            factors[(l, j)] = w[j];
        }
        if centering {
            mean[l] = w[k];
        }
        // Σ E[(x − w̃ᵀz̃)²] = Σx² − 2 w̃ᵀb + w̃ᵀ A w̃
        sse += stats.xx[l] - 2.0 * w.dot(b) + w.dot(&(a * &w));
    }
    let noise_variance = (sse / n_obs as f64).max(floor);
    PpcaModel { factors, mean, noise_variance }
}

/// Initial model from the SVD of the mean-imputed data.
fn initial_model(rows: &[[Option<f64>; N_LEADS]], k: usize, config: &PpcaConfig, floor: f64) -> PpcaModel {
    let n = rows.len();
    let mut mean = [0.0; N_LEADS];
    if config.centering {
        for (l, m) in mean.iter_mut().enumerate() {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[l]).collect();
            *m = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    let x = DMatrix::from_fn(n, N_LEADS, |t, l| rows[t][l].map_or(0.0, |v| v - mean[l]));
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let eig: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2) / n as f64).collect();

    let tail = &eig[k.min(eig.len())..];
    let residual = if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / (N_LEADS - k) as f64 };
    let noise_variance = residual.max(floor);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = floor.sqrt().max(1e-6);
    let mut factors = DMatrix::zeros(N_LEADS, k);
    for j in 0..k {
        let scale = eig.get(j).map_or(0.0, |&e| (e - noise_variance).max(0.0).sqrt());
        if scale > 0.0 {
            let row = v_t.row(order[j]);
            for l in 0..N_LEADS {
                factors[(l, j)] = row[l] * scale;
            }
        } else {
            for l in 0..N_LEADS {
                let g: f64 = StandardNormal.sample(&mut rng);
                factors[(l, j)] = g * jitter;
            }
        }
    }
    PpcaModel { factors, mean, noise_variance }
}

/// Fits PPCA with `k` latent dimensions to the observed entries of `record`.
pub fn ppca_fit(record: &EkgRecord, k: usize, config: &PpcaConfig) -> Result<PpcaFit> {
    config.validate()?;
    if !(1..N_LEADS).contains(&k) {
        return Err(Error::InvalidParameter(format!("K must lie in 1..=11, got {k}")));
    }
    if record.len() < k {
        return Err(Error::InsufficientData(format!("{} frames for K = {k}", record.len())));
    }
    let rows = observed_rows(record);
    let need = if config.centering { k + 1 } else { k };
    let mut n_obs = 0;
    let mut var_sum = 0.0;
    for l in 0..N_LEADS {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r[l]).collect();
        if vals.len() < need {
            return Err(Error::InsufficientData(format!(
                "lead {} has {} observed samples, need at least {need}",
                crate::geometry::Lead::ALL[l],
                vals.len()
            )));
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        var_sum += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        n_obs += vals.len();
    }
    let floor = VARIANCE_FLOOR * (var_sum / N_LEADS as f64).max(f64::MIN_POSITIVE);

    let mut model = initial_model(&rows, k, config, floor);
    let mut stats = e_step(&model, &rows, config.centering);
    let mut trace = vec![stats.log_likelihood];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let next = m_step(&stats, k, config.centering, n_obs, floor);
        let next_stats = e_step(&next, &rows, config.centering);
        iterations += 1;
        let prev = stats.log_likelihood;
        let ll = next_stats.log_likelihood;
        if !ll.is_finite() {
            break;
        }
        model = next;
        stats = next_stats;
        trace.push(ll);
        if (ll - prev).abs() <= config.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    Ok(PpcaFit {
        model,
        latent_means: stats.latent_means.iter().map(|z| z.iter().copied().collect()).collect(),
        log_likelihood_trace: trace,
        converged,
        iterations,
    })
}

/// Fills held-out and missing entries with `μ + F E[z_t | observed]`.
pub fn ppca_impute(fit: &PpcaFit, record: &EkgRecord) -> Result<Vec<Frame>> {
    if fit.latent_means.len() != record.len() {
        return Err(Error::DimensionMismatch { expected: record.len(), found: fit.latent_means.len() });
    }
    Ok(observed_rows(record).iter().map(|leads| fit.model.impute_frame(leads)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{MaskRow, MaskState};
    use crate::synth::{generate, SynthSpec};
    use rand::Rng;

    fn low_rank(n: usize, k: usize, noise: f64, seed: u64) -> EkgRecord {
        generate(&SynthSpec::low_rank("lr", n, k, noise, seed)).unwrap().0
    }

    fn random_mask(n: usize, frac: f64, seed: u64) -> Vec<MaskRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| std::array::from_fn(|_| if rng.random::<f64>() < frac { MaskState::HeldOut } else { MaskState::Observed }))
            .collect()
    }

    /// sin of the largest principal angle between the column spans of `a` and `b`.
    fn max_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = a.clone().qr().q();
        let qb = b.clone().qr().q();
        let resid = &qb - &qa * (qa.transpose() * &qb);
        resid.singular_values().max()
    }

    #[test]
    fn exact_low_rank_is_recovered() {
        let rec = low_rank(400, 3, 0.0, 2);
        let fit = ppca_fit(&rec, 3, &PpcaConfig::default()).unwrap();
        assert!(fit.model.noise_variance < 1e-8, "σ² = {}", fit.model.noise_variance);
        let z = &fit.latent_means;
        let mut worst: f64 = 0.0;
        for (t, x) in rec.samples().iter().enumerate() {
            let zt = DVector::from_column_slice(&z[t]);
            let rec_t = &fit.model.factors * zt;
            for l in 0..N_LEADS {
                worst = worst.max((fit.model.mean[l] + rec_t[l] - x[l]).abs());
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn subspace_matches_svd() {
        let rec = low_rank(1000, 3, 0.05, 4);
        let fit = ppca_fit(&rec, 3, &PpcaConfig::default()).unwrap();
        let n = rec.len();
        let means: Vec<f64> = (0..N_LEADS).map(|l| rec.samples().iter().map(|x| x[l]).sum::<f64>() / n as f64).collect();
        let x = DMatrix::from_fn(n, N_LEADS, |t, l| rec.samples()[t][l] - means[l]);
        let svd = x.svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..N_LEADS).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let top = DMatrix::from_fn(N_LEADS, 3, |l, j| vt[(order[j], l)]);
        let s = max_angle_sin(&fit.model.factors, &top);
        assert!(s < 1e-6, "sin θ = {s}");
        for l in 0..N_LEADS {
            assert!((fit.model.mean[l] - means[l]).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_is_monotone_with_missing_entries() {
        let rec = low_rank(600, 3, 0.1, 8);
        let rec = rec.with_mask(random_mask(600, 0.4, 1)).unwrap();
        for k in [1, 3, 6] {
            let fit = ppca_fit(&rec, k, &PpcaConfig::default()).unwrap();
            assert!(fit.log_likelihood_trace.len() >= 2);
            for w in fit.log_likelihood_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn unobserved_frame_imputes_mean_and_observed_pass_through() {
        let rec = low_rank(200, 2, 0.1, 3);
        let mut mask = vec![[MaskState::Observed; N_LEADS]; 200];
        mask[17] = [MaskState::HeldOut; N_LEADS];
        let masked = rec.with_mask(mask).unwrap();
        let fit = ppca_fit(&masked, 2, &PpcaConfig::default()).unwrap();
        let out = ppca_impute(&fit, &masked).unwrap();
        assert_eq!(out[17], fit.model.mean);
        for t in (0..200).filter(|&t| t != 17) {
            assert_eq!(out[t], rec.samples()[t]);
        }
        let full = ppca_fit(&rec, 2, &PpcaConfig::default()).unwrap();
        assert_eq!(ppca_impute(&full, &rec).unwrap(), rec.samples());
    }

    #[test]
    fn imputation_is_rotation_invariant() {
        let rec = low_rank(300, 3, 0.1, 5).with_mask(random_mask(300, 0.3, 2)).unwrap();
        let fit = ppca_fit(&rec, 3, &PpcaConfig::default()).unwrap();
        let q = DMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64).sin()).qr().q();
        let mut rotated = fit.clone();
        rotated.model.factors = &fit.model.factors * q;
        let a = ppca_impute(&fit, &rec).unwrap();
        let b = ppca_impute(&rotated, &rec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for l in 0..N_LEADS {
                assert!((x[l] - y[l]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn missing_data_close_to_oracle() {
        use crate::synth::GroundTruth;
        let (rec, truth) = generate(&SynthSpec::low_rank("o", 1500, 3, 0.02, 6)).unwrap();
        let GroundTruth::LowRank { factors, mean, noise_sigma, .. } = truth else { panic!() };
        let masked = rec.with_mask(random_mask(1500, 0.5, 3)).unwrap();
        let oracle = PpcaModel {
            factors: DMatrix::from_fn(N_LEADS, 3, |l, j| factors[l][j]),
            mean: std::array::from_fn(|l| mean[l]),
            noise_variance: noise_sigma * noise_sigma,
        };
        let fit = ppca_fit(&masked, 3, &PpcaConfig::default()).unwrap();
        let imputed = ppca_impute(&fit, &masked).unwrap();
        let (mut se_fit, mut se_oracle, mut n) = (0.0, 0.0, 0);
        for t in 0..masked.len() {
            let leads = std::array::from_fn(|l| masked.observed(t, l));
            let o = oracle.impute_frame(&leads);
            for l in 0..N_LEADS {
                if let Some(truth) = masked.truth(t, l) {
                    se_fit += (imputed[t][l] - truth).powi(2);
                    se_oracle += (o[l] - truth).powi(2);
                    n += 1;
                }
            }
        }
        let (a, b) = ((se_fit / n as f64).sqrt(), (se_oracle / n as f64).sqrt());
        assert!(a <= 1.1 * b, "fit {a} oracle {b}");
    }

    #[test]
    fn insufficient_data() {
        let rec = low_rank(50, 2, 0.1, 1);
        let mut mask = vec![[MaskState::Observed; N_LEADS]; 50];
        for row in mask.iter_mut().skip(2) {
            row[4] = MaskState::Missing;
        }
        let masked = rec.with_mask(mask).unwrap();
        assert!(matches!(ppca_fit(&masked, 3, &PpcaConfig::default()), Err(Error::InsufficientData(_))));
        assert!(ppca_fit(&rec, 12, &PpcaConfig::default()).is_err());
        assert!(ppca_fit(&low_rank(2, 1, 0.1, 1), 3, &PpcaConfig::default()).is_err());
    }

    #[test]
    fn no_centering_fixes_mean_at_zero() {
        let rec = low_rank(300, 2, 0.1, 7);
        let cfg = PpcaConfig { centering: false, ..Default::default() };
        let fit = ppca_fit(&rec, 3, &cfg).unwrap();
        assert_eq!(fit.model.mean, [0.0; N_LEADS]);
    }
}
