#![allow(dead_code)]

use ekg_dipole::geometry::{leads_from_dipole, Conductivity, DipoleState, ElectrodeLayout, Vec3, N_ELECTRODES, N_LEADS};
use ekg_dipole::priors::default_electrode_priors;
use ekg_dipole::record::{EkgRecord, Frame, MaskRow, MaskState};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3<f64> {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

/// Prior-mean layout with a few centimetres of jitter.
pub fn random_layout(rng: &mut ChaCha8Rng) -> ElectrodeLayout<f64> {
    let means = default_electrode_priors::<f64>().means();
    let positions: [Vec3<f64>; N_ELECTRODES] = std::array::from_fn(|e| means[e] + uniform_vec(rng, 0.01));
    ElectrodeLayout::new(positions).unwrap()
}

/// A dipole well inside the chest.
pub fn random_state(rng: &mut ChaCha8Rng) -> DipoleState<f64> {
    DipoleState::new(uniform_vec(rng, 0.03), uniform_vec(rng, 1e-4))
}

/// Rotation of `v` about the unit `axis` by `angle` radians.
pub fn rotate(v: Vec3<f64>, axis: Vec3<f64>, angle: f64) -> Vec3<f64> {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

pub fn random_axis(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    loop {
        let v = uniform_vec(rng, 1.0);
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v / n;
        }
    }
}

pub fn random_mask(n: usize, frac: f64, seed: u64) -> Vec<MaskRow> {
    let mut rng = rng(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| if rng.random::<f64>() < frac { MaskState::HeldOut } else { MaskState::Observed }))
        .collect()
}

/// sin of the largest principal angle between the column spans of `a` and `b`.
pub fn max_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let resid = &qb - &qa * (qa.transpose() * &qb);
    resid.singular_values().max()
}

/// Random trajectory and layout with noisy leads generated from them.
pub fn small_problem(n: usize, seed: u64) -> (EkgRecord, Vec<DipoleState<f64>>, ElectrodeLayout<f64>) {
    let mut rng = rng(seed);
    let layout = random_layout(&mut rng);
    let traj: Vec<DipoleState<f64>> = (0..n).map(|_| random_state(&mut rng)).collect();
    let samples: Vec<Frame> = traj
        .iter()
        .map(|z| {
            let clean = leads_from_dipole(z, &layout, Conductivity::default()).unwrap();
            std::array::from_fn(|l| clean[l] + rng.random_range(-0.05..0.05))
        })
        .collect();
    (EkgRecord::fully_observed(format!("p{seed}"), 250.0, samples).unwrap(), traj, layout)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub const LEADS: usize = N_LEADS;
