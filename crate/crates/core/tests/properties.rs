mod common;

use common::*;
use ekg_dipole::evaluation::{bootstrap_median, holdout_rmse};
use ekg_dipole::geometry::{electrode_potentials, lead_matrix, leads_from_dipole, Conductivity, DipoleState, ElectrodeLayout, N_ELECTRODES, N_LEADS};
use ekg_dipole::masking::{apply_mask_scheme, MaskScheme};
use ekg_dipole::record::{read_record, write_record, EkgRecord, Frame, MaskState};
use ekg_dipole::synth::{generate, NoiseDomain, SynthSpec};
use proptest::prelude::*;

fn kappa() -> Conductivity<f64> {
    Conductivity::default()
}

fn leads(z: &DipoleState<f64>, layout: &ElectrodeLayout<f64>) -> [f64; N_LEADS] {
    leads_from_dipole(z, layout, kappa()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale.max(f64::MIN_POSITIVE))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rigid_motion_leaves_leads_unchanged(seed in any::<u64>(), angle in -3.0f64..3.0) {
        let mut rng = rng(seed);
        let layout = random_layout(&mut rng);
        let z = random_state(&mut rng);
        let d = uniform_vec(&mut rng, 0.5);
        let axis = random_axis(&mut rng);
        let moved = ElectrodeLayout::new(layout.positions().map(|r| rotate(r, axis, angle) + d)).unwrap();
        let mz = DipoleState::new(rotate(z.location, axis, angle) + d, rotate(z.moment, axis, angle));
        prop_assert!(close(&leads(&z, &layout), &leads(&mz, &moved), 1e-10));
    }

    #[test]
    fn leads_are_linear_in_moment(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = rng(seed);
        let layout = random_layout(&mut rng);
        let z1 = random_state(&mut rng);
        let p2 = uniform_vec(&mut rng, 1e-4);
        let z2 = DipoleState::new(z1.location, p2);
        let combo = DipoleState::new(z1.location, z1.moment * a + p2 * b);
        let expect: Vec<f64> = leads(&z1, &layout).iter().zip(leads(&z2, &layout)).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(close(&leads(&combo, &layout), &expect, 1e-10));
    }

    #[test]
    fn scaling_space_scales_potentials_by_inverse_square(seed in any::<u64>(), beta in 0.2f64..5.0) {
        let mut rng = rng(seed);
        let layout = random_layout(&mut rng);
        let z = random_state(&mut rng);
        let scaled = ElectrodeLayout::new(layout.positions().map(|r| r * beta)).unwrap();
        let sz = DipoleState::new(z.location * beta, z.moment);
        let expect: Vec<f64> = leads(&z, &layout).iter().map(|v| v / (beta * beta)).collect();
        prop_assert!(close(&leads(&sz, &scaled), &expect, 1e-10));
    }

    #[test]
    fn common_mode_is_rejected(seed in any::<u64>(), c in -1.0f64..1.0) {
        let mut rng = rng(seed);
        let layout = random_layout(&mut rng);
        let z = random_state(&mut rng);
        let v = electrode_potentials(&z, &layout, kappa()).unwrap();
        let o = lead_matrix::<f64>();
        let shifted: [f64; N_ELECTRODES] = v.map(|x| x + c);
        prop_assert!(close(&o.apply(&v), &o.apply(&shifted), 1e-12));
    }

    #[test]
    fn rmse_ignores_non_heldout_entries(seed in any::<u64>(), junk in -50.0f64..50.0) {
        let mut rng = rng(seed);
        let n = 20;
        let samples: Vec<Frame> = (0..n).map(|_| std::array::from_fn(|_| uniform_vec(&mut rng, 1.0).x)).collect();
        let mut mask = random_mask(n, 0.3, seed);
        mask[0][0] = MaskState::HeldOut;
        mask[1][1] = MaskState::Missing;
        let rec = EkgRecord::new("r", 250.0, samples.clone(), mask.clone()).unwrap();
        let imputed: Vec<Frame> = samples.iter().map(|r| r.map(|v| v + 0.1)).collect();
        let base = holdout_rmse(&rec, &imputed).unwrap();
        let mut altered = imputed.clone();
        for t in 0..n {
            for l in 0..N_LEADS {
                if mask[t][l] != MaskState::HeldOut {
                    altered[t][l] = junk;
                }
            }
        }
        prop_assert_eq!(base, holdout_rmse(&rec, &altered).unwrap());
    }

    #[test]
    fn bootstrap_is_permutation_invariant(values in prop::collection::vec(0.0f64..1.0, 1..15), seed in any::<u64>(), rot in 0usize..15) {
        let mut shuffled = values.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(bootstrap_median(&values, 50, seed).unwrap(), bootstrap_median(&shuffled, 50, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synth_and_masking_are_deterministic(seed in any::<u64>()) {
        let spec = SynthSpec::dipole_loop("d", 2500, 0.02, seed);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        for scheme in [MaskScheme::ptb(0.1, 1.0, seed), MaskScheme::ed(seed)] {
            let (x, y) = (apply_mask_scheme(&a, &scheme).unwrap(), apply_mask_scheme(&b, &scheme).unwrap());
            // Missing entries are NaN, so compare bit patterns.
            let bits = |r: &EkgRecord| r.samples().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(x.mask(), y.mask());
            prop_assert_eq!(bits(&x), bits(&y));
        }
    }

    #[test]
    fn electrode_noise_keeps_lead_identities(seed in any::<u64>()) {
        let mut spec = SynthSpec::dipole_loop("d", 200, 0.05, seed);
        spec.noise_domain = NoiseDomain::Electrode;
        let (rec, _) = generate(&spec).unwrap();
        for x in rec.samples() {
            let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!((x[2] - (x[1] - x[0])).abs() < 1e-12 * scale);
            prop_assert!((x[3] + 0.5 * (x[0] + x[1])).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn record_round_trip(seed in any::<u64>(), n in 1usize..200) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng(seed);
        let samples: Vec<Frame> = (0..n).map(|_| std::array::from_fn(|_| uniform_vec(&mut rng, 5.0).y)).collect();
        let mut mask = random_mask(n, 0.2, seed);
        mask[n / 2][3] = MaskState::Missing;
        let rec = EkgRecord::new("r", 500.0, samples, mask).unwrap();
        let path = dir.path().join("r.csv");
        write_record(&rec, &path).unwrap();
        let back = read_record(&path).unwrap();
        prop_assert_eq!(back.mask(), rec.mask());
        for t in 0..n {
            for l in 0..N_LEADS {
                if rec.state(t, l) != MaskState::Missing {
                    prop_assert!((back.samples()[t][l] - rec.samples()[t][l]).abs() <= 5e-7);
                }
            }
        }
    }
}
