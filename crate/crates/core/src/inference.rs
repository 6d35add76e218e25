//! MAP estimation of a dipole trajectory and electrode layout for one record.
//!
//! The objective is the log-joint
//!
//! ```text
//! Σ_t [ Σ_{l observed} ln N(x_tl | (O g(s_t, p_t, r))_l, σ²) + ln N(s_t | 0, σ_s² I) + ln N(p_t | 0, σ_p² I) ]
//!   + Σ_e ln p_e(r_e) − w Σ_t Σ_e barrier(|r_e − s_t|)
//! ```
//!
//! where the barrier is a scaled softplus on `d_min − distance`. Given the
//! layout the frames decouple, and given `s_t` the moment `p_t` enters
//! linearly, so its conditional posterior is Gaussian and available in closed
//! form. Each outer pass runs per-frame block updates (location by L-BFGS on
//! the moment-profiled objective, moment in closed form), then damped
//! Gauss-Newton steps on the layout with the frames projected out, then a
//! joint L-BFGS pass over every parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    lead_gain, lead_matrix, Conductivity, DipoleState, ElectrodeLayout, LeadMatrix, Vec3, DEFAULT_MIN_DISTANCE,
    MILLIVOLTS_PER_VOLT, N_ELECTRODES, N_LEADS,
};
use crate::lbfgs::{self, inf_norm, LbfgsOptions};
use crate::priors::{log_prior_dipole, log_prior_electrodes, DipoleGradient, ElectrodePriorSet};
use crate::record::{EkgRecord, Frame};
use crate::scalar::{sigmoid, softplus, Real};

mod damped;

/// Frames per parallel work item when evaluating the joint objective.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct FitConfig<T> {
    /// Observation noise standard deviation (mV).
    pub sigma_noise: T,
    /// Prior scale of dipole locations (m).
    pub sigma_s: T,
    /// Prior scale of dipole moments (A·m).
    pub sigma_p: T,
    /// Torso conductivity (S/m).
    pub kappa: T,
    pub max_outer_iterations: usize,
    pub lbfgs_memory: usize,
    pub lbfgs_max_iters: usize,
    /// Damped Gauss-Newton iterations per outer pass.
    pub newton_max_iters: usize,
    /// L-BFGS iterations spent on each frame location per block pass.
    pub block_iterations: usize,
    /// Convergence threshold on the gradient infinity-norm, measured in
    /// prior-scaled coordinates.
    pub gradient_tolerance: T,
    pub n_restarts: usize,
    pub rng_seed: u64,
    pub degeneracy_penalty_weight: T,
    /// Closest admissible dipole-electrode distance (m).
    pub min_distance: T,
}

impl<T: Real> Default for FitConfig<T> {
    fn default() -> Self {
        Self {
            sigma_noise: T::lit(0.02),
            sigma_s: T::lit(crate::priors::DEFAULT_SIGMA_LOCATION),
            sigma_p: T::lit(crate::priors::DEFAULT_SIGMA_MOMENT),
            kappa: T::lit(crate::geometry::DEFAULT_CONDUCTIVITY),
            max_outer_iterations: 20,
            lbfgs_memory: 10,
            lbfgs_max_iters: 500,
            newton_max_iters: 100,
            block_iterations: 20,
            gradient_tolerance: T::lit(1e-6),
            n_restarts: 3,
            rng_seed: 0,
            degeneracy_penalty_weight: T::lit(1e4),
            min_distance: T::lit(DEFAULT_MIN_DISTANCE),
        }
    }
}

impl<T: Real> FitConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_noise", self.sigma_noise),
            ("sigma_s", self.sigma_s),
            ("sigma_p", self.sigma_p),
            ("kappa", self.kappa),
            ("gradient_tolerance", self.gradient_tolerance),
            ("degeneracy_penalty_weight", self.degeneracy_penalty_weight),
            ("min_distance", self.min_distance),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gradient_tolerance < T::one()) {
            return Err(Error::InvalidParameter("gradient_tolerance must be below 1".into()));
        }
        let counts = [
            ("max_outer_iterations", self.max_outer_iterations),
            ("lbfgs_memory", self.lbfgs_memory),
            ("lbfgs_max_iters", self.lbfgs_max_iters),
            ("n_restarts", self.n_restarts),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn conductivity(&self) -> Conductivity<T> {
        Conductivity::new(self.kappa).expect("validated conductivity")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub trajectory: Vec<DipoleState<T>>,
    pub layout: ElectrodeLayout<T>,
    pub log_joint: T,
    /// Model leads (mV) for every frame.
    pub reconstruction: Vec<[T; N_LEADS]>,
    pub converged: bool,
    /// Total accepted L-BFGS iterations of the winning restart.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub restart: usize,
    /// Gradient infinity-norm in prior-scaled coordinates at the solution.
    pub gradient_norm: T,
    /// Final log-joint of every restart, in restart order.
    pub restart_log_joints: Vec<T>,
}

/// Gaussian posterior over a frame's moment with the location held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPosterior<T> {
    pub mean: Vec3<T>,
    pub covariance: [[T; 3]; 3],
}

/// Gradient of the log-joint split by parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGradient<T> {
    pub trajectory: Vec<DipoleGradient<T>>,
    pub layout: [Vec3<T>; N_ELECTRODES],
}

impl<T: Real> JointGradient<T> {
    /// Flattened as `[s_0, p_0, s_1, p_1, …, r_la, …, r_v6]`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(6 * self.trajectory.len() + 3 * N_ELECTRODES);
        for g in &self.trajectory {
            v.extend(g.location.to_array());
            v.extend(g.moment.to_array());
        }
        for r in &self.layout {
            v.extend(r.to_array());
        }
        v
    }
}

/// Observed lead values of one frame.
#[derive(Debug, Clone, Copy)]
struct ObsFrame<T> {
    values: [T; N_LEADS],
    observed: [bool; N_LEADS],
    count: usize,
}

impl<T: Real> ObsFrame<T> {
    fn from_leads(leads: &[Option<T>; N_LEADS]) -> Self {
        let mut values = [T::zero(); N_LEADS];
        let mut observed = [false; N_LEADS];
        for ((v, o), x) in values.iter_mut().zip(&mut observed).zip(leads) {
            if let Some(x) = x {
                *v = *x;
                *o = true;
            }
        }
        Self { values, observed, count: observed.iter().filter(|&&o| o).count() }
    }
}

fn observations<T: Real>(record: &EkgRecord) -> Vec<ObsFrame<T>> {
    (0..record.len())
        .map(|t| ObsFrame::from_leads(&std::array::from_fn(|l| record.observed(t, l).map(T::lit))))
        .collect()
}

/// Evaluation context shared by the public objective and the optimizer.
struct Model<'a, T> {
    frames: Vec<ObsFrame<T>>,
    priors: &'a ElectrodePriorSet<T>,
    config: &'a FitConfig<T>,
    kappa: Conductivity<T>,
    o: LeadMatrix<T>,
    log_norm: T,
}

/// Per-frame objective contribution and its partial derivatives.
struct FrameTerm<T> {
    value: T,
    grad_s: Vec3<T>,
    grad_p: Vec3<T>,
    grad_r: [Vec3<T>; N_ELECTRODES],
}

impl<'a, T: Real> Model<'a, T> {
    fn new(record: &EkgRecord, priors: &'a ElectrodePriorSet<T>, config: &'a FitConfig<T>) -> Result<Self> {
        config.validate()?;
        let var = config.sigma_noise * config.sigma_noise;
        Ok(Self {
            frames: observations(record),
            priors,
            config,
            kappa: config.conductivity(),
            o: lead_matrix(),
            log_norm: T::lit(0.5) * (T::lit(2.0) * T::PI() * var).ln(),
        })
    }

    fn len(&self) -> usize {
        self.frames.len()
    }

    /// Model leads (mV) for a dipole at `s` with moment `p`.
    fn leads(&self, s: Vec3<T>, p: Vec3<T>, r: &[Vec3<T>; N_ELECTRODES]) -> [T; N_LEADS] {
        let mv = T::lit(MILLIVOLTS_PER_VOLT);
        let k = T::one() / (T::lit(4.0) * T::PI() * self.kappa.value());
        let v: [T; N_ELECTRODES] = r.map(|re| {
            let d = re - s;
            let r2 = d.norm_squared();
            k * d.dot(p) / (r2 * r2.sqrt()) * mv
        });
        self.o.apply(&v)
    }

    fn frame_term(&self, frame: &ObsFrame<T>, s: Vec3<T>, p: Vec3<T>, r: &[Vec3<T>; N_ELECTRODES]) -> FrameTerm<T> {
        let cfg = self.config;
        let mv = T::lit(MILLIVOLTS_PER_VOLT);
        let k = T::one() / (T::lit(4.0) * T::PI() * self.kappa.value());
        let var = cfg.sigma_noise * cfg.sigma_noise;

        let mut disp = [Vec3::zero(); N_ELECTRODES];
        let mut inv_r3 = [T::zero(); N_ELECTRODES];
        let mut dist = [T::zero(); N_ELECTRODES];
        let mut volts = [T::zero(); N_ELECTRODES];
        for e in 0..N_ELECTRODES {
            let d = r[e] - s;
            let r2 = d.norm_squared();
            let rn = r2.sqrt();
            disp[e] = d;
            dist[e] = rn;
            inv_r3[e] = T::one() / (r2 * rn);
            volts[e] = k * d.dot(p) * inv_r3[e] * mv;
        }
        let mean = self.o.apply(&volts);

        let mut value = T::zero();
        let mut w = [T::zero(); N_LEADS];
        for l in 0..N_LEADS {
            if frame.observed[l] {
                let res = frame.values[l] - mean[l];
                value = value - res * res / (T::lit(2.0) * var) - self.log_norm;
                w[l] = res / var;
            }
        }
        // d(loglik)/d(electrode value in mV)
        let u = self.o.apply_transpose(&w);

        let (lp, gp) = log_prior_dipole(&DipoleState::new(s, p), cfg.sigma_s, cfg.sigma_p);
        value += lp;
        let mut grad_s = gp.location;
        let mut grad_p = gp.moment;
        let mut grad_r = [Vec3::zero(); N_ELECTRODES];

        let eps = cfg.min_distance * T::lit(0.1);
        for e in 0..N_ELECTRODES {
            let d = disp[e];
            let scale = u[e] * mv * k;
            // value_e = k (d·p) / |d|³
            grad_p += d * (scale * inv_r3[e]);
            let dp = d.dot(p);
            let inv_r5 = inv_r3[e] / (dist[e] * dist[e]);
            let mut gd = (p * inv_r3[e] - d * (T::lit(3.0) * dp * inv_r5)) * scale;

            let z = (cfg.min_distance - dist[e]) / eps;
            if z > T::lit(-40.0) {
                value -= cfg.degeneracy_penalty_weight * eps * softplus(z);
                gd += d * (cfg.degeneracy_penalty_weight * sigmoid(z) / dist[e]);
            }
            grad_r[e] = gd;
            grad_s -= gd;
        }
        FrameTerm { value, grad_s, grad_p, grad_r }
    }

    /// Value of the frame objective only (no gradient work).
    fn frame_value(&self, frame: &ObsFrame<T>, s: Vec3<T>, p: Vec3<T>, r: &[Vec3<T>; N_ELECTRODES]) -> T {
        self.frame_term(frame, s, p, r).value
    }

    /// Log-joint and, when requested, its gradient over the flattened natural
    /// parameters `[s_0, p_0, …, r_0, …]`.
    fn evaluate(&self, params: &[T], grad: Option<&mut [T]>) -> T {
        let n = self.len();
        let r = unpack_layout(&params[6 * n..]);
        let (lp_r, g_r) = log_prior_electrodes(&ElectrodeLayout::from_positions_unchecked(r), self.priors);

        let want_grad = grad.is_some();
        let frame_params = &params[..6 * n];
        let partials: Vec<(T, [Vec3<T>; N_ELECTRODES], Vec<T>)> = self
            .frames
            .par_chunks(CHUNK)
            .zip(frame_params.par_chunks(6 * CHUNK))
            .map(|(frames, ps)| {
                let mut total = T::zero();
                let mut gr = [Vec3::zero(); N_ELECTRODES];
                let mut gz = if want_grad { vec![T::zero(); ps.len()] } else { Vec::new() };
                for (i, frame) in frames.iter().enumerate() {
                    let s = Vec3::new(ps[6 * i], ps[6 * i + 1], ps[6 * i + 2]);
                    let p = Vec3::new(ps[6 * i + 3], ps[6 * i + 4], ps[6 * i + 5]);
                    let term = self.frame_term(frame, s, p, &r);
                    total += term.value;
                    if want_grad {
                        gz[6 * i..6 * i + 3].copy_from_slice(&term.grad_s.to_array());
                        gz[6 * i + 3..6 * i + 6].copy_from_slice(&term.grad_p.to_array());
                        for (a, b) in gr.iter_mut().zip(&term.grad_r) {
                            *a += *b;
                        }
                    }
                }
                (total, gr, gz)
            })
            .collect();

        let mut value = lp_r;
        let mut gr_total = g_r;
        let grad_out = grad;
        let mut offset = 0;
        let mut grad_out = grad_out;
        for (v, gr, gz) in &partials {
            value += *v;
            if let Some(g) = grad_out.as_deref_mut() {
                g[offset..offset + gz.len()].copy_from_slice(gz);
                offset += gz.len();
                for (a, b) in gr_total.iter_mut().zip(gr) {
                    *a += *b;
                }
            }
        }
        if let Some(g) = grad_out {
            for (e, v) in gr_total.iter().enumerate() {
                g[6 * n + 3 * e..6 * n + 3 * e + 3].copy_from_slice(&v.to_array());
            }
        }
        value
    }

    /// Closed-form Gaussian posterior of the moment at frame `frame` given the
    /// location and layout. `None` if nothing is observed in the frame.
    fn moment_posterior(&self, frame: &ObsFrame<T>, s: Vec3<T>, r: &[Vec3<T>; N_ELECTRODES]) -> Option<MomentPosterior<T>> {
        if frame.count == 0 {
            return None;
        }
        let layout = ElectrodeLayout::from_positions_unchecked(*r);
        let gain = lead_gain(s, &layout, self.kappa);
        let var = self.config.sigma_noise * self.config.sigma_noise;
        let prior_prec = T::one() / (self.config.sigma_p * self.config.sigma_p);
        let mut prec = [[T::zero(); 3]; 3];
        let mut rhs = [T::zero(); 3];
        for l in 0..N_LEADS {
            if !frame.observed[l] {
                continue;
            }
            let a = gain[l].to_array();
            for i in 0..3 {
                rhs[i] += a[i] * frame.values[l] / var;
                for j in 0..3 {
                    prec[i][j] += a[i] * a[j] / var;
                }
            }
        }
        for (i, row) in prec.iter_mut().enumerate() {
            row[i] += prior_prec;
        }
        let chol = cholesky3(&prec)?;
        let mut mean = chol_solve3(&chol, rhs);
        // One step of iterative refinement; the system is badly scaled in SI units.
        let resid: [T; 3] = std::array::from_fn(|i| rhs[i] - (0..3).map(|j| prec[i][j] * mean[j]).sum::<T>());
        let fix = chol_solve3(&chol, resid);
        for i in 0..3 {
            mean[i] += fix[i];
        }
        let covariance = std::array::from_fn(|j| {
            let mut e = [T::zero(); 3];
            e[j] = T::one();
            chol_solve3(&chol, e)
        });
        Some(MomentPosterior { mean: Vec3::from_array(mean), covariance })
    }

    /// Optimizes one frame's location with the moment profiled out, then sets
    /// the moment to its conditional posterior mean. Never decreases the frame
    /// objective.
    fn block_update(&self, frame: &ObsFrame<T>, state: DipoleState<T>, r: &[Vec3<T>; N_ELECTRODES]) -> DipoleState<T> {
        if frame.count == 0 {
            return DipoleState::zero();
        }
        let cfg = self.config;
        let scale = cfg.sigma_s;
        let profiled = |s: Vec3<T>| -> (T, Vec3<T>, Vec3<T>) {
            let p = self.moment_posterior(frame, s, r).map(|m| m.mean).unwrap_or_else(Vec3::zero);
            let term = self.frame_term(frame, s, p, r);
            (term.value, term.grad_s, p)
        };
        let current = self.frame_value(frame, state.location, state.moment, r);
        let opts = LbfgsOptions {
            memory: cfg.lbfgs_memory.min(5),
            max_iters: cfg.block_iterations,
            gradient_tolerance: cfg.gradient_tolerance,
            ..Default::default()
        };
        let x0 = (state.location / scale).to_array().to_vec();
        let report = lbfgs::minimize(
            |x: &[T], g: &mut [T]| {
                let s = Vec3::new(x[0], x[1], x[2]) * scale;
                let (v, gs, _) = profiled(s);
                for i in 0..3 {
                    g[i] = -gs[i] * scale;
                }
                if v.is_finite() {
                    -v
                } else {
                    T::infinity()
                }
            },
            x0,
            &opts,
        );
        let s = Vec3::new(report.x[0], report.x[1], report.x[2]) * scale;
        let (v, _, p) = profiled(s);
        if v.is_finite() && v >= current {
            DipoleState::new(s, p)
        } else {
            state
        }
    }
}

fn unpack_layout<T: Real>(flat: &[T]) -> [Vec3<T>; N_ELECTRODES] {
    std::array::from_fn(|e| Vec3::new(flat[3 * e], flat[3 * e + 1], flat[3 * e + 2]))
}

fn pack<T: Real>(trajectory: &[DipoleState<T>], layout: &[Vec3<T>; N_ELECTRODES]) -> Vec<T> {
    let mut v = Vec::with_capacity(6 * trajectory.len() + 3 * N_ELECTRODES);
    for z in trajectory {
        v.extend(z.location.to_array());
        v.extend(z.moment.to_array());
    }
    for r in layout {
        v.extend(r.to_array());
    }
    v
}

fn unpack<T: Real>(params: &[T], n: usize) -> (Vec<DipoleState<T>>, [Vec3<T>; N_ELECTRODES]) {
    let traj = (0..n)
        .map(|t| {
            let q = &params[6 * t..6 * t + 6];
            DipoleState::new(Vec3::new(q[0], q[1], q[2]), Vec3::new(q[3], q[4], q[5]))
        })
        .collect();
    (traj, unpack_layout(&params[6 * n..]))
}

fn cholesky3<T: Real>(a: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let mut l = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > T::zero()) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve3<T: Real>(l: &[[T; 3]; 3], b: [T; 3]) -> [T; 3] {
    let mut y = [T::zero(); 3];
    for i in 0..3 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [T::zero(); 3];
    for i in (0..3).rev() {
        let mut s = y[i];
        for k in i + 1..3 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn check_len<T>(trajectory: &[DipoleState<T>], record: &EkgRecord) -> Result<()> {
    if trajectory.len() != record.len() {
        return Err(Error::DimensionMismatch { expected: record.len(), found: trajectory.len() });
    }
    Ok(())
}

/// Log-joint of a trajectory and layout for `record`. Only observed entries
/// enter the likelihood.
pub fn log_joint<T: Real>(
    trajectory: &[DipoleState<T>],
    layout: &ElectrodeLayout<T>,
    record: &EkgRecord,
    priors: &ElectrodePriorSet<T>,
    config: &FitConfig<T>,
) -> Result<T> {
    check_len(trajectory, record)?;
    let model = Model::new(record, priors, config)?;
    Ok(model.evaluate(&pack(trajectory, layout.positions()), None))
}

/// Exact gradient of [`log_joint`] with respect to every location, moment and
/// electrode position.
pub fn log_joint_gradient<T: Real>(
    trajectory: &[DipoleState<T>],
    layout: &ElectrodeLayout<T>,
    record: &EkgRecord,
    priors: &ElectrodePriorSet<T>,
    config: &FitConfig<T>,
) -> Result<JointGradient<T>> {
    check_len(trajectory, record)?;
    let model = Model::new(record, priors, config)?;
    let params = pack(trajectory, layout.positions());
    let mut g = vec![T::zero(); params.len()];
    model.evaluate(&params, Some(&mut g));
    let n = trajectory.len();
    let (traj, layout) = unpack(&g, n);
    Ok(JointGradient {
        trajectory: traj.into_iter().map(|z| DipoleGradient { location: z.location, moment: z.moment }).collect(),
        layout,
    })
}

/// Gaussian posterior of `p_t` under the moment prior, given the location,
/// layout and the observed leads of one frame.
pub fn conditional_moment_posterior<T: Real>(
    location: Vec3<T>,
    layout: &ElectrodeLayout<T>,
    observed_leads: &[Option<T>; N_LEADS],
    config: &FitConfig<T>,
) -> Result<MomentPosterior<T>> {
    config.validate()?;
    for (e, &r) in layout.positions().iter().enumerate() {
        let distance = (r - location).norm();
        if distance < config.min_distance {
            return Err(Error::DegenerateGeometry { electrode: e, distance: distance.to_f64_lossy() });
        }
    }
    let frame = ObsFrame::from_leads(observed_leads);
    let priors = crate::priors::default_electrode_priors::<T>();
    let model = Model {
        frames: Vec::new(),
        priors: &priors,
        config,
        kappa: config.conductivity(),
        o: lead_matrix(),
        log_norm: T::zero(),
    };
    model
        .moment_posterior(&frame, location, layout.positions())
        .ok_or_else(|| Error::InsufficientData("no observed lead in frame".into()))
}

/// Starting point for restart `restart`: prior-mean layout (jittered for
/// restarts after the first), locations jittered around the origin and
/// moments at their conditional posterior means.
pub fn initialize<T: Real>(
    record: &EkgRecord,
    priors: &ElectrodePriorSet<T>,
    config: &FitConfig<T>,
    restart: usize,
) -> Result<(Vec<DipoleState<T>>, ElectrodeLayout<T>)> {
    if record.is_empty() {
        return Err(Error::EmptyInput);
    }
    let model = Model::new(record, priors, config)?;
    let (traj, layout) = initial_point(&model, restart);
    Ok((traj, ElectrodeLayout::from_positions_unchecked(layout)))
}

fn initial_point<T: Real>(model: &Model<'_, T>, restart: usize) -> (Vec<DipoleState<T>>, [Vec3<T>; N_ELECTRODES]) {
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.rng_seed);
    rng.set_stream(restart as u64);
    let mut normal = || T::lit(StandardNormal.sample(&mut rng));

    let jitter = T::lit(0.25) * T::from_usize_lossy(restart);
    let layout: [Vec3<T>; N_ELECTRODES] = std::array::from_fn(|e| {
        let prior = model.priors.priors[e];
        let offset = Vec3::new(normal(), normal(), normal()) * (prior.sigma * jitter);
        if restart == 0 {
            prior.mean
        } else {
            prior.mean + offset
        }
    });
    let loc_scale = model.config.sigma_s * T::lit(0.01);
    let locations: Vec<Vec3<T>> =
        (0..model.len()).map(|_| Vec3::new(normal(), normal(), normal()) * loc_scale).collect();
    let traj = model
        .frames
        .par_iter()
        .zip(locations)
        .map(|(frame, s)| {
            let p = model.moment_posterior(frame, s, &layout).map(|m| m.mean).unwrap_or_else(Vec3::zero);
            if frame.count == 0 {
                DipoleState::zero()
            } else {
                DipoleState::new(s, p)
            }
        })
        .collect();
    (traj, layout)
}

struct RestartOutcome<T> {
    params: Vec<T>,
    log_joint: T,
    gradient_norm: T,
    converged: bool,
    iterations: usize,
    outer_iterations: usize,
}

/// Prior-scaled coordinates: `s/σ_s`, `p/σ_p`, `r_e/σ_e`.
fn coordinate_scales<T: Real>(model: &Model<'_, T>) -> Vec<T> {
    let n = model.len();
    let mut scales = Vec::with_capacity(6 * n + 3 * N_ELECTRODES);
    for _ in 0..n {
        scales.extend([model.config.sigma_s; 3]);
        scales.extend([model.config.sigma_p; 3]);
    }
    for p in &model.priors.priors {
        scales.extend([p.sigma; 3]);
    }
    scales
}

fn scaled_gradient_norm<T: Real>(model: &Model<'_, T>, params: &[T], scales: &[T]) -> (T, T) {
    let mut g = vec![T::zero(); params.len()];
    let v = model.evaluate(params, Some(&mut g));
    for (gi, &si) in g.iter_mut().zip(scales) {
        *gi *= si;
    }
    (v, inf_norm(&g))
}

fn run_restart<T: Real>(model: &Model<'_, T>, restart: usize) -> RestartOutcome<T> {
    let cfg = model.config;
    let n = model.len();
    let (mut traj, mut layout) = initial_point(model, restart);
    let scales = coordinate_scales(model);
    let opts = LbfgsOptions {
        memory: cfg.lbfgs_memory,
        max_iters: cfg.lbfgs_max_iters,
        gradient_tolerance: cfg.gradient_tolerance,
        ..Default::default()
    };

    let mut iterations = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut params = pack(&traj, &layout);
    let (mut value, mut gnorm) = scaled_gradient_norm(model, &params, &scales);

    while outer < cfg.max_outer_iterations {
        outer += 1;
        let before = value;

        traj = model
            .frames
            .par_iter()
            .zip(traj.par_iter())
            .map(|(frame, &z)| model.block_update(frame, z, &layout))
            .collect();

        let mut joint = pack(&traj, &layout);
        iterations += model.damped_newton(&mut joint, cfg.newton_max_iters).iterations;
        (traj, layout) = unpack(&joint, n);

        let x0: Vec<T> = pack(&traj, &layout).iter().zip(&scales).map(|(&x, &s)| x / s).collect();
        let mut work = vec![T::zero(); x0.len()];
        let mut gbuf = vec![T::zero(); x0.len()];
        let report = lbfgs::minimize(
            |x: &[T], g: &mut [T]| {
                for ((w, &xi), &s) in work.iter_mut().zip(x).zip(&scales) {
                    *w = xi * s;
                }
                let v = model.evaluate(&work, Some(&mut gbuf));
                for ((gi, &gn), &s) in g.iter_mut().zip(gbuf.iter()).zip(&scales) {
                    *gi = -gn * s;
                }
                if v.is_finite() {
                    -v
                } else {
                    T::infinity()
                }
            },
            x0,
            &opts,
        );
        iterations += report.iterations;
        params = report.x.iter().zip(&scales).map(|(&x, &s)| x * s).collect();
        value = -report.value;
        gnorm = report.gradient_inf_norm();
        let unpacked = unpack(&params, n);
        traj = unpacked.0;
        layout = unpacked.1;

        if gnorm < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        if value - before <= T::lit(1e-12) * value.abs().max(T::one()) {
            break;
        }
    }

    RestartOutcome { params, log_joint: value, gradient_norm: gnorm, converged, iterations, outer_iterations: outer }
}

/// Fits the dipole model to `record` by MAP estimation with `n_restarts`
/// independent starts and returns the best.
pub fn fit<T: Real>(record: &EkgRecord, priors: &ElectrodePriorSet<T>, config: &FitConfig<T>) -> Result<FitResult<T>> {
    let model = Model::new(record, priors, config)?;
    if model.frames.iter().all(|f| f.count == 0) {
        return Err(Error::NoObservedData);
    }
    let outcomes: Vec<RestartOutcome<T>> =
        (0..config.n_restarts).into_par_iter().map(|r| run_restart(&model, r)).collect();

    let mut best = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.log_joint > outcomes[best].log_joint {
            best = i;
        }
    }
    let restart_log_joints = outcomes.iter().map(|o| o.log_joint).collect();
    let win = &outcomes[best];
    let (trajectory, positions) = unpack(&win.params, model.len());
    let reconstruction = trajectory.iter().map(|z| model.leads(z.location, z.moment, &positions)).collect();
    Ok(FitResult {
        trajectory,
        layout: ElectrodeLayout::from_positions_unchecked(positions),
        log_joint: win.log_joint,
        reconstruction,
        converged: win.converged,
        iterations: win.iterations,
        outer_iterations: win.outer_iterations,
        restart: best,
        gradient_norm: win.gradient_norm,
        restart_log_joints,
    })
}

/// Fills held-out and missing entries of `record` with the fitted
/// reconstruction; observed entries pass through unchanged.
pub fn impute<T: Real>(result: &FitResult<T>, record: &EkgRecord) -> Result<Vec<Frame>> {
    if result.reconstruction.len() != record.len() {
        return Err(Error::DimensionMismatch { expected: record.len(), found: result.reconstruction.len() });
    }
    Ok((0..record.len())
        .map(|t| std::array::from_fn(|l| record.observed(t, l).unwrap_or_else(|| result.reconstruction[t][l].to_f64_lossy())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::leads_from_dipole;
    use crate::priors::default_electrode_priors;
    use crate::record::MaskState;

    fn small_problem(n: usize, seed: u64) -> (EkgRecord, Vec<DipoleState<f64>>, ElectrodeLayout<f64>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let priors = default_electrode_priors::<f64>();
        let layout = ElectrodeLayout::new(std::array::from_fn(|e| {
            let p = priors.priors[e];
            p.mean + Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)) * p.sigma
        }))
        .unwrap();
        let traj: Vec<DipoleState<f64>> = (0..n)
            .map(|_| {
                DipoleState::new(
                    Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
                    Vec3::new(rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4)),
                )
            })
            .collect();
        let samples = traj
            .iter()
            .map(|z| leads_from_dipole(z, &layout, Conductivity::default()).unwrap().map(|v| v + rng.random_range(-0.05..0.05)))
            .collect();
        (EkgRecord::fully_observed("small", 250.0, samples).unwrap(), traj, layout)
    }

    #[test]
    fn zero_moment_zero_data_leaves_only_normalizers() {
        let n = 4;
        let rec = EkgRecord::fully_observed("z", 250.0, vec![[0.0; N_LEADS]; n]).unwrap();
        let priors = default_electrode_priors::<f64>();
        let cfg = FitConfig::default();
        let layout = priors.mean_layout().unwrap();
        let traj = vec![DipoleState::zero(); n];
        let lj = log_joint(&traj, &layout, &rec, &priors, &cfg).unwrap();
        let var: f64 = 0.02 * 0.02;
        let lik = -((n * N_LEADS) as f64) * 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let prior_z: f64 = n as f64
            * log_prior_dipole(&DipoleState::zero(), cfg.sigma_s, cfg.sigma_p).0;
        let prior_r = log_prior_electrodes(&layout, &priors).0;
        assert!((lj - (lik + prior_z + prior_r)).abs() < 1e-9 * lj.abs());
    }

    #[test]
    fn masking_a_residual_never_lowers_log_joint() {
        let (rec, traj, layout) = small_problem(5, 1);
        let priors = default_electrode_priors::<f64>();
        let cfg = FitConfig::default();
        let wrong: Vec<DipoleState<f64>> = traj.iter().map(|z| DipoleState::new(z.location, z.moment * 0.5)).collect();
        let full = log_joint(&wrong, &layout, &rec, &priors, &cfg).unwrap();
        let mut mask = rec.mask().to_vec();
        mask[2][7] = MaskState::HeldOut;
        let masked = log_joint(&wrong, &layout, &rec.with_mask(mask).unwrap(), &priors, &cfg).unwrap();
        assert!(masked >= full);
    }

    #[test]
    fn dimension_mismatch() {
        let (rec, traj, layout) = small_problem(3, 2);
        let priors = default_electrode_priors::<f64>();
        let err = log_joint(&traj[..2], &layout, &rec, &priors, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 3, found: 2 }));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (rec, traj, layout) = small_problem(3, 3);
        let priors = default_electrode_priors::<f64>();
        let cfg = FitConfig::default();
        let model = Model::new(&rec, &priors, &cfg).unwrap();
        let params = pack(&traj, layout.positions());
        let mut g = vec![0.0; params.len()];
        model.evaluate(&params, Some(&mut g));
        let scales = coordinate_scales(&model);
        for i in 0..params.len() {
            let h = 1e-5 * scales[i];
            let mut a = params.clone();
            a[i] += h;
            let mut b = params.clone();
            b[i] -= h;
            let fd = (model.evaluate(&a, None) - model.evaluate(&b, None)) / (2.0 * h);
            let err = (fd - g[i]).abs() / g[i].abs().max(1e-3 / scales[i]);
            assert!(err < 1e-5, "coordinate {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn moment_posterior_flat_prior_is_least_squares() {
        let (rec, traj, layout) = small_problem(1, 4);
        let cfg = FitConfig { sigma_p: 1e6, ..FitConfig::default() };
        let obs: [Option<f64>; N_LEADS] = std::array::from_fn(|l| rec.observed(0, l));
        let post = conditional_moment_posterior(traj[0].location, &layout, &obs, &cfg).unwrap();
        // Least squares via normal equations with nalgebra as an independent solver.
        let gain = lead_gain(traj[0].location, &layout, Conductivity::default());
        let a = nalgebra::DMatrix::from_fn(N_LEADS, 3, |l, j| gain[l][j]);
        let y = nalgebra::DVector::from_fn(N_LEADS, |l, _| obs[l].unwrap());
        let ls = a.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        for j in 0..3 {
            assert!((post.mean[j] - ls[j]).abs() <= 1e-8 * ls.amax());
        }
    }

    #[test]
    fn moment_posterior_needs_an_observation() {
        let (_, traj, layout) = small_problem(1, 5);
        let obs = [None; N_LEADS];
        assert!(conditional_moment_posterior(traj[0].location, &layout, &obs, &FitConfig::default()).is_err());
        let near = layout.positions()[3] + Vec3::new(1e-4, 0.0, 0.0);
        let obs = [Some(0.1); N_LEADS];
        assert!(matches!(
            conditional_moment_posterior(near, &layout, &obs, &FitConfig::default()),
            Err(Error::DegenerateGeometry { electrode: 3, .. })
        ));
    }

    #[test]
    fn initialization_is_deterministic() {
        let (rec, _, _) = small_problem(6, 6);
        let priors = default_electrode_priors::<f64>();
        let cfg = FitConfig { rng_seed: 17, ..FitConfig::default() };
        let (t0, l0) = initialize(&rec, &priors, &cfg, 0).unwrap();
        assert_eq!(l0.positions(), &priors.means());
        let (t1, l1) = initialize(&rec, &priors, &cfg, 2).unwrap();
        let (t2, l2) = initialize(&rec, &priors, &cfg, 2).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(l1, l2);
        assert_ne!(l1.positions(), &priors.means());
        assert_ne!(t0, t1);
    }

    #[test]
    fn block_update_never_lowers_frame_objective() {
        let (rec, traj, layout) = small_problem(5, 7);
        let priors = default_electrode_priors::<f64>();
        let cfg = FitConfig::default();
        let model = Model::new(&rec, &priors, &cfg).unwrap();
        let r = *layout.positions();
        for (frame, z) in model.frames.iter().zip(&traj) {
            let start = DipoleState::new(z.location + Vec3::new(0.01, -0.01, 0.0), z.moment);
            let before = model.frame_value(frame, start.location, start.moment, &r);
            let after = model.block_update(frame, start, &r);
            assert!(model.frame_value(frame, after.location, after.moment, &r) >= before);
        }
    }

    #[test]
    fn fully_observed_record_imputes_to_itself() {
        let (rec, _, _) = small_problem(4, 8);
        let priors = default_electrode_priors::<f64>();
        let cfg = FitConfig { n_restarts: 1, max_outer_iterations: 2, ..FitConfig::default() };
        let res = fit(&rec, &priors, &cfg).unwrap();
        assert_eq!(impute(&res, &rec).unwrap(), rec.samples());
    }

    #[test]
    fn unobserved_record_is_rejected() {
        let (rec, _, _) = small_problem(3, 9);
        let mask = vec![[MaskState::Missing; N_LEADS]; 3];
        let rec = rec.with_mask(mask).unwrap();
        let err = fit(&rec, &default_electrode_priors::<f64>(), &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoObservedData));
    }
}
