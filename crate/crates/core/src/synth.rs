//! Synthetic records with known ground truth.
//!
//! `DipoleLoop` records come from the forward model: the dipole location
//! circles a center once per beat while the moment rotates in a plane with a
//! raised-cosine magnitude envelope. `LowRank` records follow a linear factor
//! model `x_t = μ + F z_t + ε`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    lead_matrix, leads_from_dipole, Conductivity, DipoleState, ElectrodeLayout, Vec3, N_ELECTRODES, N_LEADS,
};
use crate::priors::{default_electrode_priors, ElectrodePriorSet};
use crate::record::{EkgRecord, Frame};

/// Where observation noise is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDomain {
    /// Independent noise on each of the 12 leads.
    #[default]
    Lead,
    /// Noise on the 9 electrode potentials, mapped through the lead matrix so
    /// every linear lead identity holds exactly.
    Electrode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SynthKind {
    DipoleLoop {
        #[serde(default = "Vec3::zero")]
        loop_center: Vec3<f64>,
        /// Radius of the location loop (m).
        #[serde(default = "default_loop_radius")]
        loop_radius: f64,
        #[serde(default = "default_beats")]
        beats: usize,
        /// Peak moment magnitude (A·m).
        #[serde(default = "default_moment_scale")]
        moment_scale: f64,
    },
    LowRank {
        #[serde(alias = "K")]
        k: usize,
        /// Standard deviation of factor loadings and mean (mV).
        #[serde(default = "default_factor_scale")]
        factor_scale: f64,
    },
}

fn default_loop_radius() -> f64 {
    0.02
}

fn default_beats() -> usize {
    10
}

fn default_moment_scale() -> f64 {
    1e-4
}

fn default_factor_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_record_id")]
    pub record_id: String,
    pub model: SynthKind,
    /// Number of samples.
    #[serde(alias = "T")]
    pub n_samples: usize,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    /// Noise standard deviation (mV).
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_domain: NoiseDomain,
    #[serde(default)]
    pub seed: u64,
}

fn default_record_id() -> String {
    "synth".into()
}

fn default_rate() -> f64 {
    250.0
}

impl SynthSpec {
    pub fn dipole_loop(record_id: impl Into<String>, n_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            record_id: record_id.into(),
            model: SynthKind::DipoleLoop {
                loop_center: Vec3::zero(),
                loop_radius: default_loop_radius(),
                beats: default_beats(),
                moment_scale: default_moment_scale(),
            },
            n_samples,
            sample_rate_hz: default_rate(),
            noise_sigma,
            noise_domain: NoiseDomain::Lead,
            seed,
        }
    }

    pub fn low_rank(record_id: impl Into<String>, n_samples: usize, k: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            record_id: record_id.into(),
            model: SynthKind::LowRank { k, factor_scale: default_factor_scale() },
            n_samples,
            sample_rate_hz: default_rate(),
            noise_sigma,
            noise_domain: NoiseDomain::Lead,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        match &self.model {
            SynthKind::DipoleLoop { loop_center, loop_radius, beats, moment_scale } => {
                if !loop_center.is_finite() || !(*loop_radius > 0.0) || !(*moment_scale > 0.0) {
                    return bad("loop_radius and moment_scale must be positive");
                }
                if *beats == 0 {
                    return bad("beats must be at least 1");
                }
            }
            SynthKind::LowRank { k, factor_scale } => {
                if !(1..N_LEADS).contains(k) {
                    return bad("k must lie in 1..=11");
                }
                if !(*factor_scale > 0.0) {
                    return bad("factor_scale must be positive");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum GroundTruth {
    Dipole {
        trajectory: Vec<DipoleState<f64>>,
        layout: ElectrodeLayout<f64>,
        /// Noise-free leads (mV).
        clean: Vec<Frame>,
    },
    LowRank {
        /// 12×K loadings, row per lead.
        factors: Vec<Vec<f64>>,
        mean: Vec<f64>,
        latents: Vec<Vec<f64>>,
        noise_sigma: f64,
    },
}

fn gauss<R: rand::Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit<R: rand::Rng>(rng: &mut R) -> Vec3<f64> {
    loop {
        let v = Vec3::new(gauss(rng), gauss(rng), gauss(rng));
        let n = v.norm();
        if n > 1e-3 {
            return v / n;
        }
    }
}

/// Random orthonormal pair spanning a plane.
fn plane<R: rand::Rng>(rng: &mut R) -> (Vec3<f64>, Vec3<f64>) {
    let a = unit(rng);
    let mut b = unit(rng);
    b = b - a * a.dot(b);
    while b.norm() < 1e-3 {
        b = unit(rng);
        b = b - a * a.dot(b);
    }
    (a, b / b.norm())
}

/// Layout drawn from the electrode priors; redrawn if any electrode ends up
/// within 2 cm of another or of the location loop.
fn sample_layout<R: rand::Rng>(rng: &mut R, priors: &ElectrodePriorSet<f64>, center: Vec3<f64>, radius: f64) -> ElectrodeLayout<f64> {
    loop {
        let positions: [Vec3<f64>; N_ELECTRODES] = std::array::from_fn(|e| {
            let p = priors.priors[e];
            let n = Vec3::new(gauss(rng), gauss(rng), gauss(rng));
            p.mean + n * p.sigma
        });
        let clear_of_loop = positions.iter().all(|r| (*r - center).norm() > radius + 0.02);
        let separated = (0..N_ELECTRODES)
            .all(|i| (i + 1..N_ELECTRODES).all(|j| (positions[i] - positions[j]).norm() > 0.02));
        if clear_of_loop && separated {
            return ElectrodeLayout::new(positions).expect("separated layout");
        }
    }
}

/// Generates a record and its ground truth. Deterministic given the spec.
pub fn generate(spec: &SynthSpec) -> Result<(EkgRecord, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let sigma = spec.noise_sigma;

    match &spec.model {
        SynthKind::DipoleLoop { loop_center, loop_radius, beats, moment_scale } => {
            let priors = default_electrode_priors::<f64>();
            let layout = sample_layout(&mut rng, &priors, *loop_center, *loop_radius);
            let (u1, u2) = plane(&mut rng);
            let (m1, m2) = plane(&mut rng);
            let phase0: f64 = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
            let kappa = Conductivity::default();
            let o = lead_matrix::<f64>();

            let duration = n as f64 / spec.sample_rate_hz;
            let omega = std::f64::consts::TAU * *beats as f64 / duration;
            let mut trajectory = Vec::with_capacity(n);
            let mut clean = Vec::with_capacity(n);
            let mut samples = Vec::with_capacity(n);
            for t in 0..n {
                let time = t as f64 / spec.sample_rate_hz;
                let phi = omega * time;
                let s = *loop_center + (u1 * (phi + phase0).cos() + u2 * (phi + phase0).sin()) * *loop_radius;
                let envelope = 0.5 * (1.0 - phi.cos());
                let p = (m1 * phi.cos() + m2 * phi.sin()) * (*moment_scale * envelope);
                let z = DipoleState::new(s, p);
                let leads = leads_from_dipole(&z, &layout, kappa)?;
                let noisy = match spec.noise_domain {
                    NoiseDomain::Lead => leads.map(|v| v + sigma * gauss(&mut rng)),
                    NoiseDomain::Electrode => {
                        let noise: [f64; N_ELECTRODES] = std::array::from_fn(|_| sigma * gauss(&mut rng));
                        let ln = o.apply(&noise);
                        std::array::from_fn(|l| leads[l] + ln[l])
                    }
                };
                trajectory.push(z);
                clean.push(leads);
                samples.push(noisy);
            }
            let record = EkgRecord::fully_observed(spec.record_id.clone(), spec.sample_rate_hz, samples)?;
            Ok((record, GroundTruth::Dipole { trajectory, layout, clean }))
        }
        SynthKind::LowRank { k, factor_scale } => {
            let k = *k;
            let factors: Vec<Vec<f64>> = (0..N_LEADS)
                .map(|_| (0..k).map(|_| factor_scale * gauss(&mut rng)).collect())
                .collect();
            let mean: Vec<f64> = (0..N_LEADS).map(|_| factor_scale * gauss(&mut rng)).collect();
            let mut latents = Vec::with_capacity(n);
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let z: Vec<f64> = (0..k).map(|_| gauss(&mut rng)).collect();
                let x: Frame = std::array::from_fn(|l| {
                    mean[l] + factors[l].iter().zip(&z).map(|(f, zi)| f * zi).sum::<f64>()
                });
                let noisy = x.map(|v| v + sigma * gauss(&mut rng));
                latents.push(z);
                samples.push(noisy);
            }
            let record = EkgRecord::fully_observed(spec.record_id.clone(), spec.sample_rate_hz, samples)?;
            Ok((record, GroundTruth::LowRank { factors, mean, latents, noise_sigma: sigma }))
        }
    }
}
