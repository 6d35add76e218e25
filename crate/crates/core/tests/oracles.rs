//! Values frozen from an independent scalar re-evaluation in Python.

use approx::assert_relative_eq;
use ekg_dipole::evaluation::{bootstrap_median, holdout_rmse};
use ekg_dipole::geometry::{dipole_potential, leads_from_dipole, Conductivity, DipoleState, Vec3, N_LEADS};
use ekg_dipole::priors::default_electrode_priors;
use ekg_dipole::record::{EkgRecord, Frame, MaskState};

fn case() -> DipoleState<f64> {
    DipoleState::new(Vec3::new(0.01, 0.02, 0.0), Vec3::new(3e-5, -1e-5, 2e-5))
}

#[test]
fn scalar_potential() {
    let v = dipole_potential(&case(), Vec3::new(0.12, -0.04, 0.03), Conductivity::default()).unwrap();
    assert_relative_eq!(v, 0.000_837_163_956_886_915_9, max_relative = 1e-13);
}

#[test]
fn leads_at_prior_mean_layout() {
    let expected = [
        0.26495106294942805,
        0.10334526604415749,
        -0.16160579690527055,
        -0.18414816449679275,
        0.2132784299273493,
        -0.02913026543055654,
        -7.327432735973282,
        2.002635000757563,
        3.134834027842665,
        1.5362714054821454,
        1.0432578031601043,
        0.911181735419206,
    ];
    let layout = default_electrode_priors::<f64>().mean_layout().unwrap();
    let leads = leads_from_dipole(&case(), &layout, Conductivity::default()).unwrap();
    for l in 0..N_LEADS {
        assert_relative_eq!(leads[l], expected[l], max_relative = 1e-11);
    }
}

#[test]
fn v1_prior_mean() {
    let p = default_electrode_priors::<f64>();
    let v1 = p.priors[3].mean;
    assert_relative_eq!(v1.x, -0.02170602220836629, max_relative = 1e-13);
    assert_relative_eq!(v1.y, 0.044763988773282186, max_relative = 1e-13);
    assert_eq!(v1.z, 0.0);
    let v6 = p.priors[8];
    assert_relative_eq!(v6.mean.x, 0.125, max_relative = 1e-15);
    assert!(v6.mean.y.abs() < 1e-15);
    assert_eq!(v6.sigma, 0.02);
}

#[test]
fn rmse_of_three_residuals() {
    let samples: Vec<Frame> = vec![[0.0; N_LEADS]; 3];
    let mut mask = vec![[MaskState::Observed; N_LEADS]; 3];
    for row in mask.iter_mut() {
        row[2] = MaskState::HeldOut;
    }
    let rec = EkgRecord::new("r", 250.0, samples.clone(), mask).unwrap();
    let mut imputed = samples;
    imputed[0][2] = 0.3;
    imputed[1][2] = -0.4;
    let r = holdout_rmse(&rec, &imputed).unwrap();
    assert_relative_eq!(r.pooled, 0.2886751345948129, max_relative = 1e-12);
}

#[test]
fn bootstrap_median_of_three() {
    // Of the 27 ordered resamples of (1, 2, 3), 7 have median 1, 13 median 2
    // and 7 median 3.
    let b = bootstrap_median(&[1.0, 2.0, 3.0], 100_000, 2024).unwrap();
    let freq = |v: f64| b.median_rmse_samples.iter().filter(|&&m| m == v).count() as f64 / 1e5;
    for (v, p) in [(1.0, 7.0 / 27.0), (2.0, 13.0 / 27.0), (3.0, 7.0 / 27.0)] {
        assert!((freq(v) - p).abs() < 0.01, "P(median = {v}) = {}", freq(v));
    }
}
