//! Gaussian priors over dipole states and electrode positions.
//!
//! Precordial prior means are laid out on an elliptical torso cross-section
//! at heart level; limb electrodes get broad priors to the sides of and below
//! the torso.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DipoleState, ElectrodeLayout, Vec3, N_ELECTRODES};
use crate::scalar::Real;

pub const DEFAULT_SIGMA_LOCATION: f64 = 0.10;
pub const DEFAULT_SIGMA_MOMENT: f64 = 1e-4;
pub const DEFAULT_PRECORDIAL_SIGMA: f64 = 0.02;
pub const DEFAULT_LIMB_SIGMA: f64 = 0.10;

/// Isotropic Gaussian over a 3-vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior3<T> {
    pub mean: Vec3<T>,
    pub sigma: T,
}

impl<T: Real> GaussianPrior3<T> {
    pub fn new(mean: Vec3<T>, sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!("prior sigma must be positive, got {sigma}")));
        }
        Ok(Self { mean, sigma })
    }

    /// Log-density and its gradient.
    pub fn log_density(&self, x: Vec3<T>) -> (T, Vec3<T>) {
        let var = self.sigma * self.sigma;
        let d = x - self.mean;
        let norm_const = T::lit(1.5) * (T::lit(2.0) * T::PI() * var).ln();
        (-d.norm_squared() / (T::lit(2.0) * var) - norm_const, -d / var)
    }
}

/// One prior per electrode, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElectrodePriorSet<T> {
    pub priors: [GaussianPrior3<T>; N_ELECTRODES],
}

impl<T: Real> ElectrodePriorSet<T> {
    pub fn means(&self) -> [Vec3<T>; N_ELECTRODES] {
        self.priors.map(|p| p.mean)
    }

    pub fn sigmas(&self) -> [T; N_ELECTRODES] {
        self.priors.map(|p| p.sigma)
    }

    /// The layout placing every electrode at its prior mean.
    pub fn mean_layout(&self) -> Result<ElectrodeLayout<T>> {
        ElectrodeLayout::new(self.means())
    }
}

/// Elliptical torso cross-section used to place the chest electrodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct TorsoEllipse<T> {
    /// Half of the chest width (m).
    pub half_width: T,
    /// Major over minor axis.
    pub axis_ratio: T,
    pub angle_start_deg: T,
    pub angle_end_deg: T,
}

impl<T: Real> TorsoEllipse<T> {
    pub fn new(half_width: T, axis_ratio: T, angle_start_deg: T, angle_end_deg: T) -> Result<Self> {
        let e = Self { half_width, axis_ratio, angle_start_deg, angle_end_deg };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > T::zero()) {
            return Err(Error::InvalidParameter("ellipse half width must be positive".into()));
        }
        if !(self.axis_ratio > T::one()) {
            return Err(Error::InvalidParameter("ellipse axis ratio must exceed 1".into()));
        }
        if !(self.angle_start_deg < self.angle_end_deg) {
            return Err(Error::InvalidParameter("ellipse start angle must precede end angle".into()));
        }
        Ok(())
    }

    /// Anterior-posterior half depth.
    pub fn half_depth(&self) -> T {
        self.half_width / self.axis_ratio
    }

    /// Point at `theta_deg` on the ellipse in the heart-level plane, swept so
    /// that 270° is the anterior midline.
    pub fn point_at(&self, theta_deg: T) -> Vec3<T> {
        let th = theta_deg.to_radians();
        Vec3::new(self.half_width * th.cos(), -self.half_depth() * th.sin(), T::zero())
    }
}

impl<T: Real> Default for TorsoEllipse<T> {
    /// 25 cm chest width, axis ratio 2.75, V1..V6 spread over 260°..360°.
    fn default() -> Self {
        Self {
            half_width: T::lit(0.125),
            axis_ratio: T::lit(2.75),
            angle_start_deg: T::lit(260.0),
            angle_end_deg: T::lit(360.0),
        }
    }
}

/// V1..V6 prior means at evenly spaced angles along the ellipse.
pub fn precordial_prior_means<T: Real>(ellipse: &TorsoEllipse<T>) -> [Vec3<T>; 6] {
    let step = (ellipse.angle_end_deg - ellipse.angle_start_deg) / T::lit(5.0);
    std::array::from_fn(|k| ellipse.point_at(ellipse.angle_start_deg + step * T::from_usize_lossy(k)))
}

/// Tunable prior hyperparameters for the electrode layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct ElectrodePriorConfig<T> {
    pub ellipse: TorsoEllipse<T>,
    pub precordial_sigma: T,
    pub limb_sigma: T,
    pub la_mean: Vec3<T>,
    pub ra_mean: Vec3<T>,
    pub ll_mean: Vec3<T>,
}

impl<T: Real> Default for ElectrodePriorConfig<T> {
    fn default() -> Self {
        Self {
            ellipse: TorsoEllipse::default(),
            precordial_sigma: T::lit(DEFAULT_PRECORDIAL_SIGMA),
            limb_sigma: T::lit(DEFAULT_LIMB_SIGMA),
            la_mean: Vec3::new(T::lit(0.30), T::zero(), T::zero()),
            ra_mean: Vec3::new(T::lit(-0.30), T::zero(), T::zero()),
            ll_mean: Vec3::new(T::lit(0.15), T::zero(), T::lit(-0.45)),
        }
    }
}

impl<T: Real> ElectrodePriorConfig<T> {
    pub fn build(&self) -> Result<ElectrodePriorSet<T>> {
        self.ellipse.validate()?;
        let chest = precordial_prior_means(&self.ellipse);
        let limb = [self.la_mean, self.ra_mean, self.ll_mean];
        let mut priors = [GaussianPrior3 { mean: Vec3::zero(), sigma: T::one() }; N_ELECTRODES];
        for (i, m) in limb.into_iter().enumerate() {
            priors[i] = GaussianPrior3::new(m, self.limb_sigma)?;
        }
        for (i, m) in chest.into_iter().enumerate() {
            priors[3 + i] = GaussianPrior3::new(m, self.precordial_sigma)?;
        }
        Ok(ElectrodePriorSet { priors })
    }
}

pub fn default_electrode_priors<T: Real>() -> ElectrodePriorSet<T> {
    ElectrodePriorConfig::default().build().expect("default priors are valid")
}

/// Gradient of a dipole-state log-density, split by component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipoleGradient<T> {
    pub location: Vec3<T>,
    pub moment: Vec3<T>,
}

/// Zero-mean isotropic Gaussian log-density over location and moment.
pub fn log_prior_dipole<T: Real>(state: &DipoleState<T>, sigma_s: T, sigma_p: T) -> (T, DipoleGradient<T>) {
    let zero = Vec3::zero();
    let (ls, gs) = GaussianPrior3 { mean: zero, sigma: sigma_s }.log_density(state.location);
    let (lp, gp) = GaussianPrior3 { mean: zero, sigma: sigma_p }.log_density(state.moment);
    (ls + lp, DipoleGradient { location: gs, moment: gp })
}

/// Sum of the nine electrode log-densities and the per-electrode gradient.
pub fn log_prior_electrodes<T: Real>(
    layout: &ElectrodeLayout<T>,
    priors: &ElectrodePriorSet<T>,
) -> (T, [Vec3<T>; N_ELECTRODES]) {
    let mut grad = [Vec3::zero(); N_ELECTRODES];
    let mut total = T::zero();
    for ((g, prior), &r) in grad.iter_mut().zip(&priors.priors).zip(layout.positions()) {
        let (l, d) = prior.log_density(r);
        total += l;
        *g = d;
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn v6_sits_on_left_lateral_chest() {
        let m = precordial_prior_means(&TorsoEllipse::<f64>::default());
        assert_relative_eq!(m[5].x, 0.125, max_relative = 1e-15);
        assert!(m[5].y.abs() < 1e-15);
        assert_eq!(m[5].z, 0.0);
    }

    #[test]
    fn anterior_midline_at_270_degrees() {
        let e = TorsoEllipse::<f64>::default();
        let p = e.point_at(270.0);
        assert!(p.x.abs() < 1e-15);
        assert_relative_eq!(p.y, 0.125 / 2.75, max_relative = 1e-15);
    }

    #[test]
    fn v1_position() {
        // Independent calculator: 0.125·cos 260° and -(0.125/2.75)·sin 260°.
        let m = precordial_prior_means(&TorsoEllipse::<f64>::default());
        assert_relative_eq!(m[0].x, -0.021_706_022_208_366_29, max_relative = 1e-12);
        assert_relative_eq!(m[0].y, 0.044_763_988_773_282_186, max_relative = 1e-12);
    }

    #[test]
    fn precordial_means_lie_on_ellipse() {
        let e = TorsoEllipse::new(0.14f64, 2.1, 250.0, 370.0).unwrap();
        for m in precordial_prior_means(&e) {
            let q = (m.x / e.half_width).powi(2) + (m.y / e.half_depth()).powi(2);
            assert!((q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_electrode_priors_layout() {
        let p = default_electrode_priors::<f64>();
        assert_relative_eq!(p.priors[8].mean.x, 0.125, max_relative = 1e-15);
        assert_eq!(p.priors[8].sigma, 0.02);
        assert!(p.priors[1].mean.x < 0.0);
        assert!(p.sigmas().iter().all(|&s| s > 0.0));
        assert!(p.mean_layout().is_ok());
    }

    #[test]
    fn ellipse_validation() {
        assert!(TorsoEllipse::new(0.0f64, 2.0, 0.0, 1.0).is_err());
        assert!(TorsoEllipse::new(0.1f64, 1.0, 0.0, 1.0).is_err());
        assert!(TorsoEllipse::new(0.1f64, 2.0, 10.0, 10.0).is_err());
    }

    #[test]
    fn dipole_prior_mode_and_gradient() {
        let (l0, g0) = log_prior_dipole(&DipoleState::<f64>::zero(), 0.1, 1e-4);
        let expected = -1.5 * (2.0 * std::f64::consts::PI * 0.01).ln() - 1.5 * (2.0 * std::f64::consts::PI * 1e-8).ln();
        assert_relative_eq!(l0, expected, max_relative = 1e-14);
        assert_eq!(g0.location, Vec3::zero());
        assert_eq!(g0.moment, Vec3::zero());

        let s = DipoleState::new(Vec3::new(0.1, 0.0, 0.0), Vec3::zero());
        let (l1, g1) = log_prior_dipole(&s, 0.1, 1e-4);
        assert_relative_eq!(g1.location.x, -1.0 / 0.1, max_relative = 1e-14);
        assert_eq!(g1.moment, Vec3::zero());
        assert!(l1 < l0);
    }

    #[test]
    fn electrode_prior_shift_costs_quadratic() {
        let priors = default_electrode_priors::<f64>();
        let at_mean = priors.mean_layout().unwrap();
        let (l0, g0) = log_prior_electrodes(&at_mean, &priors);
        assert!(g0.iter().all(|g| *g == Vec3::zero()));

        let delta = 0.013;
        let mut pos = priors.means();
        pos[4].x += delta;
        let (l1, _) = log_prior_electrodes(&ElectrodeLayout::new(pos).unwrap(), &priors);
        assert_relative_eq!(l1 - l0, -delta * delta / (2.0 * 0.02 * 0.02), max_relative = 1e-9);
    }
}
