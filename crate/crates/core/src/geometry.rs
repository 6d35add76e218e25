//! 3-d geometry value types and the forward map from a dipole source to the
//! twelve standard EKG leads.
//!
//! Frame: origin at the torso center at heart level, `+x` patient-left,
//! `+y` anterior, `+z` superior. Positions are in meters, dipole moments in
//! ampere-meters, conductivity in siemens per meter. Electrode potentials are
//! in volts; lead values are reported in millivolts.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Number of physical electrodes in a 12-lead recording.
pub const N_ELECTRODES: usize = 9;
/// Number of standard leads.
pub const N_LEADS: usize = 12;
/// Closest admissible dipole-electrode distance in meters.
pub const DEFAULT_MIN_DISTANCE: f64 = 1e-3;
/// Torso conductivity used by default, S/m.
pub const DEFAULT_CONDUCTIVITY: f64 = 0.2;
/// Volts to millivolts.
pub const MILLIVOLTS_PER_VOLT: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Self) -> Self {
        Self::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, k: T) -> Self {
        Self::new(self.x / k, self.y / k, self.z / k)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T> IndexMut<usize> for Vec3<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Instantaneous dipole source: location `s` (m) and moment `p` (A·m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DipoleState<T> {
    pub location: Vec3<T>,
    pub moment: Vec3<T>,
}

impl<T: Real> DipoleState<T> {
    pub fn new(location: Vec3<T>, moment: Vec3<T>) -> Self {
        Self { location, moment }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zero(), Vec3::zero())
    }
}

/// Physical electrodes, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Electrode {
    La,
    Ra,
    Ll,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Electrode {
    pub const ALL: [Electrode; N_ELECTRODES] = [
        Electrode::La,
        Electrode::Ra,
        Electrode::Ll,
        Electrode::V1,
        Electrode::V2,
        Electrode::V3,
        Electrode::V4,
        Electrode::V5,
        Electrode::V6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["la", "ra", "ll", "v1", "v2", "v3", "v4", "v5", "v6"][self.index()]
    }
}

/// The twelve standard leads, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lead {
    I,
    II,
    III,
    AVR,
    AVL,
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl Lead {
    pub const ALL: [Lead; N_LEADS] = [
        Lead::I,
        Lead::II,
        Lead::III,
        Lead::AVR,
        Lead::AVL,
        Lead::AVF,
        Lead::V1,
        Lead::V2,
        Lead::V3,
        Lead::V4,
        Lead::V5,
        Lead::V6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        LEAD_NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Lead> {
        LEAD_NAMES.iter().position(|n| *n == name).map(|i| Lead::ALL[i])
    }
}

pub const LEAD_NAMES: [&str; N_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Positions of the nine electrodes, ordered (la, ra, ll, v1..v6).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout<T> {
    positions: [Vec3<T>; N_ELECTRODES],
}

impl<T: Real> ElectrodeLayout<T> {
    /// Validates finiteness and pairwise separation (> 1e-6 m).
    pub fn new(positions: [Vec3<T>; N_ELECTRODES]) -> Result<Self> {
        let min_sep = T::lit(1e-6);
        for (i, p) in positions.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidLayout(format!("electrode {i} is not finite")));
            }
            for (j, q) in positions.iter().enumerate().skip(i + 1) {
                if (*p - *q).norm() <= min_sep {
                    return Err(Error::InvalidLayout(format!(
                        "electrodes {} and {} coincide",
                        Electrode::ALL[i].name(),
                        Electrode::ALL[j].name()
                    )));
                }
            }
        }
        Ok(Self { positions })
    }

    /// Builds a layout without validation. Used inside the optimizer where
    /// intermediate iterates are allowed to be arbitrary.
    pub(crate) fn from_positions_unchecked(positions: [Vec3<T>; N_ELECTRODES]) -> Self {
        Self { positions }
    }

    pub fn positions(&self) -> &[Vec3<T>; N_ELECTRODES] {
        &self.positions
    }

    pub fn get(&self, electrode: Electrode) -> Vec3<T> {
        self.positions[electrode.index()]
    }

    pub fn translated(&self, d: Vec3<T>) -> Self {
        Self { positions: self.positions.map(|p| p + d) }
    }
}

/// Torso conductivity in S/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conductivity<T>(T);

impl<T: Real> Conductivity<T> {
    pub fn new(kappa: T) -> Result<Self> {
        if kappa > T::zero() && kappa.is_finite() {
            Ok(Self(kappa))
        } else {
            Err(Error::InvalidParameter(format!("conductivity must be positive, got {kappa}")))
        }
    }

    pub fn value(self) -> T {
        self.0
    }
}

impl<T: Real> Default for Conductivity<T> {
    fn default() -> Self {
        Self(T::lit(DEFAULT_CONDUCTIVITY))
    }
}

/// The fixed 12×9 map from electrode potentials to leads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadMatrix<T> {
    entries: [[T; N_ELECTRODES]; N_LEADS],
}

impl<T: Real> LeadMatrix<T> {
    pub fn entries(&self) -> &[[T; N_ELECTRODES]; N_LEADS] {
        &self.entries
    }

    pub fn get(&self, lead: Lead, electrode: Electrode) -> T {
        self.entries[lead.index()][electrode.index()]
    }

    pub fn row(&self, lead: usize) -> &[T; N_ELECTRODES] {
        &self.entries[lead]
    }

    pub fn apply(&self, electrodes: &[T; N_ELECTRODES]) -> [T; N_LEADS] {
        self.entries.map(|row| row.iter().zip(electrodes).map(|(&o, &v)| o * v).sum())
    }

    /// Transpose product `Oᵀ y`.
    pub fn apply_transpose(&self, leads: &[T; N_LEADS]) -> [T; N_ELECTRODES] {
        let mut out = [T::zero(); N_ELECTRODES];
        for (row, &y) in self.entries.iter().zip(leads) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * y;
            }
        }
        out
    }
}

/// Returns the constant electrode-to-lead matrix:
///
/// ```text
/// I   = la - ra            aVR = ra - (la + ll)/2
/// II  = ll - ra            aVL = la - (ra + ll)/2
/// III = ll - la            aVF = ll - (ra + la)/2
/// Vi  = vi - (ra + la + ll)/3
/// ```
pub fn lead_matrix<T: Real>() -> LeadMatrix<T> {
    let h = T::lit(0.5);
    let t = T::one() / T::lit(3.0);
    let one = T::one();
    let z = T::zero();
    let mut entries = [[z; N_ELECTRODES]; N_LEADS];
    let limb: [[T; 3]; 6] = [
        [one, -one, z],
        [z, -one, one],
        [-one, z, one],
        [-h, one, -h],
        [one, -h, -h],
        [-h, -h, one],
    ];
    for (row, coeffs) in entries.iter_mut().zip(limb) {
        row[..3].copy_from_slice(&coeffs);
    }
    for v in 0..6 {
        let row = &mut entries[6 + v];
        row[..3].copy_from_slice(&[-t, -t, -t]);
        row[3 + v] = one;
    }
    LeadMatrix { entries }
}

/// Coefficient vector `c` with `potential = cᵀ p` for a dipole at `location`
/// seen from `electrode`: `(r - s) / (4πκ ||r - s||³)`. No distance guard.
#[inline]
pub fn potential_coefficients<T: Real>(location: Vec3<T>, electrode: Vec3<T>, kappa: Conductivity<T>) -> Vec3<T> {
    let d = electrode - location;
    let r2 = d.norm_squared();
    let r3 = r2 * r2.sqrt();
    let k = T::one() / (T::lit(4.0) * T::PI() * kappa.value());
    d * (k / r3)
}

fn check_distance<T: Real>(location: Vec3<T>, electrode: Vec3<T>, index: usize) -> Result<()> {
    let distance = (electrode - location).norm();
    if distance < T::lit(DEFAULT_MIN_DISTANCE) || !distance.is_finite() {
        return Err(Error::DegenerateGeometry { electrode: index, distance: distance.to_f64_lossy() });
    }
    Ok(())
}

/// Potential in volts at `electrode` induced by `state`.
pub fn dipole_potential<T: Real>(state: &DipoleState<T>, electrode: Vec3<T>, kappa: Conductivity<T>) -> Result<T> {
    check_distance(state.location, electrode, 0)?;
    Ok(potential_coefficients(state.location, electrode, kappa).dot(state.moment))
}

/// Potentials in volts at all nine electrodes, in layout order.
pub fn electrode_potentials<T: Real>(
    state: &DipoleState<T>,
    layout: &ElectrodeLayout<T>,
    kappa: Conductivity<T>,
) -> Result<[T; N_ELECTRODES]> {
    let mut out = [T::zero(); N_ELECTRODES];
    for (i, (o, &r)) in out.iter_mut().zip(layout.positions()).enumerate() {
        check_distance(state.location, r, i)?;
        *o = potential_coefficients(state.location, r, kappa).dot(state.moment);
    }
    Ok(out)
}

/// The twelve lead values in millivolts.
pub fn leads_from_dipole<T: Real>(
    state: &DipoleState<T>,
    layout: &ElectrodeLayout<T>,
    kappa: Conductivity<T>,
) -> Result<[T; N_LEADS]> {
    let volts = electrode_potentials(state, layout, kappa)?;
    let mv = T::lit(MILLIVOLTS_PER_VOLT);
    Ok(lead_matrix::<T>().apply(&volts).map(|v| v * mv))
}

/// Lead gain matrix `1000 · O · G(s, r)` (mV per A·m): row `l` maps a moment
/// to lead `l` for a dipole at `location`. No distance guard.
pub fn lead_gain<T: Real>(
    location: Vec3<T>,
    layout: &ElectrodeLayout<T>,
    kappa: Conductivity<T>,
) -> [Vec3<T>; N_LEADS] {
    let mv = T::lit(MILLIVOLTS_PER_VOLT);
    let g = layout.positions().map(|r| potential_coefficients(location, r, kappa) * mv);
    let o = lead_matrix::<T>();
    o.entries().map(|row| row.iter().zip(&g).fold(Vec3::zero(), |acc, (&w, &c)| acc + c * w))
}
