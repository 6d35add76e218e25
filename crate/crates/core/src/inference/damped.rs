//! Damped Gauss-Newton (Levenberg-Marquardt) steps on the joint objective.
//!
//! The Gauss-Newton matrix has arrow structure: a 6×6 block per frame, the
//! 27×27 layout block, and frame-layout couplings. Frame blocks are
//! eliminated through the Schur complement so each step costs one pass over
//! the frames plus a 27×27 solve. The barrier contributes to the gradient
//! only; damping and the acceptance test cover its curvature.

use rayon::prelude::*;

use super::{Model, ObsFrame, CHUNK};
use crate::geometry::{Vec3, N_ELECTRODES, N_LEADS};
use crate::scalar::Real;

const NZ: usize = 6;
const NR: usize = 3 * N_ELECTRODES;

/// Gauss-Newton blocks of one frame at the current point.
struct FrameBlock<T> {
    /// Frame-frame block `J_zᵀJ_z + prior precision`, row-major.
    u: [T; NZ * NZ],
    /// Frame-layout coupling `J_zᵀJ_r`, row-major 6×27.
    w: [T; NZ * NR],
    /// Gradient of the negative log-joint over the frame's parameters.
    g: [T; NZ],
}

/// Layout block and gradient accumulated over frames.
struct LayoutBlock<T> {
    v: Vec<T>,
    g: Vec<T>,
}

pub(super) struct DampedOutcome {
    pub iterations: usize,
}

impl<'a, T: Real> Model<'a, T> {
    /// Residual Jacobians of one frame's observed leads, scaled by 1/σ.
    /// Rows of unobserved leads are zero.
    fn frame_jacobians(
        &self,
        s: Vec3<T>,
        p: Vec3<T>,
        r: &[Vec3<T>; N_ELECTRODES],
        frame: &ObsFrame<T>,
    ) -> ([[T; NZ]; N_LEADS], [[T; NR]; N_LEADS]) {
        let mv = T::lit(crate::geometry::MILLIVOLTS_PER_VOLT);
        let k = T::one() / (T::lit(4.0) * T::PI() * self.kappa.value()) * mv;
        let inv_sigma = T::one() / self.config.sigma_noise;
        // d(volts_e)/dp and d(volts_e)/d(r_e); d/ds is the negative of the latter.
        let mut gp = [Vec3::zero(); N_ELECTRODES];
        let mut gd = [Vec3::zero(); N_ELECTRODES];
        for e in 0..N_ELECTRODES {
            let d = r[e] - s;
            let r2 = d.norm_squared();
            let rn = r2.sqrt();
            let inv3 = T::one() / (r2 * rn);
            gp[e] = d * (k * inv3);
            gd[e] = (p * inv3 - d * (T::lit(3.0) * d.dot(p) * inv3 / r2)) * k;
        }
        let mut jz = [[T::zero(); NZ]; N_LEADS];
        let mut jr = [[T::zero(); NR]; N_LEADS];
        for l in 0..N_LEADS {
            if !frame.observed[l] {
                continue;
            }
            let row = self.o.row(l);
            let mut ds = Vec3::zero();
            let mut dp = Vec3::zero();
            for e in 0..N_ELECTRODES {
                let w = row[e];
                if w == T::zero() {
                    continue;
                }
                let c = w * inv_sigma;
                dp += gp[e] * c;
                ds -= gd[e] * c;
                for i in 0..3 {
                    jr[l][3 * e + i] = gd[e][i] * c;
                }
            }
            jz[l] = [ds[0], ds[1], ds[2], dp[0], dp[1], dp[2]];
        }
        (jz, jr)
    }

    /// Frame value, Gauss-Newton blocks and layout gradient; the frame's
    /// contribution to the layout block is added into `v`.
    fn frame_block(
        &self,
        frame: &ObsFrame<T>,
        state: &[T],
        r: &[Vec3<T>; N_ELECTRODES],
        v: &mut [T],
    ) -> (T, FrameBlock<T>, [Vec3<T>; N_ELECTRODES]) {
        let s = Vec3::new(state[0], state[1], state[2]);
        let p = Vec3::new(state[3], state[4], state[5]);
        let term = self.frame_term(frame, s, p, r);
        let mut g = [T::zero(); NZ];
        for i in 0..3 {
            g[i] = -term.grad_s[i];
            g[3 + i] = -term.grad_p[i];
        }
        let mut u = [T::zero(); NZ * NZ];
        let mut w = [T::zero(); NZ * NR];
        let ps = T::one() / (self.config.sigma_s * self.config.sigma_s);
        let pp = T::one() / (self.config.sigma_p * self.config.sigma_p);
        for i in 0..3 {
            u[i * NZ + i] = ps;
            u[(3 + i) * NZ + 3 + i] = pp;
        }
        if frame.count > 0 {
            let (jz, jr) = self.frame_jacobians(s, p, r, frame);
            for l in 0..N_LEADS {
                if !frame.observed[l] {
                    continue;
                }
                let (a, b) = (&jz[l], &jr[l]);
                for i in 0..NZ {
                    for j in 0..NZ {
                        u[i * NZ + j] += a[i] * a[j];
                    }
                    for j in 0..NR {
                        w[i * NR + j] += a[i] * b[j];
                    }
                }
                for i in 0..NR {
                    if b[i] == T::zero() {
                        continue;
                    }
                    for j in 0..NR {
                        v[i * NR + j] += b[i] * b[j];
                    }
                }
            }
        }
        (term.value, FrameBlock { u, w, g }, term.grad_r)
    }

    /// Builds all blocks at `params`. Returns the log-joint as well.
    fn blocks(&self, params: &[T]) -> (T, Vec<FrameBlock<T>>, LayoutBlock<T>) {
        let n = self.len();
        let r = super::unpack_layout(&params[NZ * n..]);
        let partials: Vec<(T, Vec<FrameBlock<T>>, Vec<T>, [Vec3<T>; N_ELECTRODES])> = self
            .frames
            .par_chunks(CHUNK)
            .zip(params[..NZ * n].par_chunks(NZ * CHUNK))
            .map(|(frames, ps)| {
                let mut v = vec![T::zero(); NR * NR];
                let mut total = T::zero();
                let mut gr = [Vec3::zero(); N_ELECTRODES];
                let mut out = Vec::with_capacity(frames.len());
                for (i, frame) in frames.iter().enumerate() {
                    let state = &ps[NZ * i..NZ * i + NZ];
                    let (value, block, grad_r) = self.frame_block(frame, state, &r, &mut v);
                    for (a, b) in gr.iter_mut().zip(&grad_r) {
                        *a += *b;
                    }
                    total += value;
                    out.push(block);
                }
                (total, out, v, gr)
            })
            .collect();

        let (lp_r, g_prior) =
            crate::priors::log_prior_electrodes(&crate::geometry::ElectrodeLayout::from_positions_unchecked(r), self.priors);
        let sig = self.priors.sigmas();
        let mut v = vec![T::zero(); NR * NR];
        for e in 0..N_ELECTRODES {
            for i in 0..3 {
                let j = 3 * e + i;
                v[j * NR + j] = T::one() / (sig[e] * sig[e]);
            }
        }
        let mut gr = g_prior;
        let mut value = lp_r;
        let mut frames = Vec::with_capacity(n);
        for (val, blocks, pv, pg) in partials {
            value += val;
            frames.extend(blocks);
            for (a, b) in v.iter_mut().zip(&pv) {
                *a += *b;
            }
            for (a, b) in gr.iter_mut().zip(&pg) {
                *a += *b;
            }
        }
        let g = gr.iter().flat_map(|x| x.to_array().map(|c| -c)).collect();
        (value, frames, LayoutBlock { v, g })
    }

    /// Solves the Gauss-Newton system with the layout block damped by
    /// `lambda` and returns the full step (frames, then layout).
    fn damped_step(&self, frames: &[FrameBlock<T>], layout: &LayoutBlock<T>, lambda: T) -> Option<Vec<T>> {
        let n = frames.len();
        // Per chunk: factor U, reduce the Schur complement and its right side.
        let partials: Vec<Option<(Vec<T>, Vec<T>, Vec<[T; NZ * NZ]>)>> = frames
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut s = vec![T::zero(); NR * NR];
                let mut rhs = vec![T::zero(); NR];
                let mut factors = Vec::with_capacity(chunk.len());
                for b in chunk {
                    let mut u = b.u;
                    if !cholesky(&mut u, NZ) {
                        return None;
                    }
                    // Y = U⁻¹ W (6×27), y = U⁻¹ g
                    let mut y = b.w;
                    for j in 0..NR {
                        let mut col: [T; NZ] = std::array::from_fn(|i| y[i * NR + j]);
                        cholesky_solve(&u, NZ, &mut col);
                        for i in 0..NZ {
                            y[i * NR + j] = col[i];
                        }
                    }
                    let mut gy = b.g;
                    cholesky_solve(&u, NZ, &mut gy);
                    for i in 0..NR {
                        for k in 0..NZ {
                            let wki = b.w[k * NR + i];
                            if wki == T::zero() {
                                continue;
                            }
                            for j in 0..NR {
                                s[i * NR + j] += wki * y[k * NR + j];
                            }
                            rhs[i] += wki * gy[k];
                        }
                    }
                    factors.push(u);
                }
                Some((s, rhs, factors))
            })
            .collect();

        let mut schur = layout.v.clone();
        let mut rhs: Vec<T> = layout.g.iter().map(|&g| -g).collect();
        let mut factors = Vec::with_capacity(n);
        for part in partials {
            let (s, r, f) = part?;
            for (a, b) in schur.iter_mut().zip(&s) {
                *a -= *b;
            }
            for (a, b) in rhs.iter_mut().zip(&r) {
                *a += *b;
            }
            factors.extend(f);
        }
        for i in 0..NR {
            schur[i * NR + i] *= T::one() + lambda;
        }
        if !cholesky(&mut schur, NR) {
            return None;
        }
        cholesky_solve(&schur, NR, &mut rhs);
        let dr = rhs;

        let mut step = vec![T::zero(); NZ * n + NR];
        step[NZ * n..].copy_from_slice(&dr);
        step[..NZ * n].par_chunks_mut(NZ).zip(frames.par_iter().zip(factors.par_iter())).for_each(|(out, (b, u))| {
            let mut v: [T; NZ] = std::array::from_fn(|i| {
                let wdr = (0..NR).fold(T::zero(), |acc, j| acc + b.w[i * NR + j] * dr[j]);
                -b.g[i] - wdr
            });
            cholesky_solve(u, NZ, &mut v);
            out.copy_from_slice(&v);
        });
        Some(step)
    }

    /// Local damped Gauss-Newton on one frame's six parameters with the
    /// layout fixed. Returns the improved state and its frame value.
    fn frame_newton(&self, frame: &ObsFrame<T>, state: [T; NZ], r: &[Vec3<T>; N_ELECTRODES], max_iters: usize) -> ([T; NZ], T) {
        if frame.count == 0 {
            let zero = [T::zero(); NZ];
            return (zero, self.frame_value(frame, Vec3::zero(), Vec3::zero(), r));
        }
        let mut scratch = vec![T::zero(); NR * NR];
        let mut x = state;
        let (mut value, mut block, _) = self.frame_block(frame, &x, r, &mut scratch);
        let mut lambda = T::lit(1e-4);
        for _ in 0..max_iters {
            let mut accepted = None;
            for _ in 0..10 {
                let mut u = block.u;
                for i in 0..NZ {
                    u[i * NZ + i] *= T::one() + lambda;
                }
                if !cholesky(&mut u, NZ) {
                    lambda *= T::lit(10.0);
                    continue;
                }
                let mut d = block.g.map(|g| -g);
                cholesky_solve(&u, NZ, &mut d);
                let mut trial: [T; NZ] = std::array::from_fn(|i| x[i] + d[i]);
                // The moment is exactly maximized given the location.
                let s = Vec3::new(trial[0], trial[1], trial[2]);
                if let Some(post) = self.moment_posterior(frame, s, r) {
                    trial[3..].copy_from_slice(&post.mean.to_array());
                }
                let v = self.frame_value(
                    frame,
                    Vec3::new(trial[0], trial[1], trial[2]),
                    Vec3::new(trial[3], trial[4], trial[5]),
                    r,
                );
                if v.is_finite() && v > value {
                    accepted = Some((trial, v));
                    lambda = (lambda / T::lit(3.0)).max(T::lit(1e-12));
                    break;
                }
                lambda *= T::lit(10.0);
            }
            let Some((trial, v)) = accepted else { break };
            let gain = v - value;
            x = trial;
            value = v;
            if gain <= T::lit(1e-12) * value.abs().max(T::one()) {
                break;
            }
            (_, block, _) = self.frame_block(frame, &x, r, &mut scratch);
        }
        (x, value)
    }

    /// Solves every frame at layout `r` from the given starting states.
    fn solve_frames(&self, starts: &[T], r: &[Vec3<T>; N_ELECTRODES]) -> (Vec<T>, T) {
        let iters = self.config.block_iterations;
        let solved: Vec<([T; NZ], T)> = self
            .frames
            .par_iter()
            .zip(starts.par_chunks(NZ))
            .map(|(frame, z)| self.frame_newton(frame, std::array::from_fn(|i| z[i]), r, iters))
            .collect();
        let (lp_r, _) =
            crate::priors::log_prior_electrodes(&crate::geometry::ElectrodeLayout::from_positions_unchecked(*r), self.priors);
        let mut value = lp_r;
        let mut out = Vec::with_capacity(NZ * solved.len() + NR);
        for (z, v) in &solved {
            out.extend_from_slice(z);
            value += *v;
        }
        for e in r {
            out.extend(e.to_array());
        }
        (out, value)
    }

    /// Variable-projection Gauss-Newton: every frame is kept at its local
    /// optimum for the current layout, and the layout moves along damped
    /// Gauss-Newton steps of the coupled system, with frames re-solved from
    /// their linear prediction at each trial layout. Only steps that increase
    /// the log-joint are accepted.
    pub(super) fn damped_newton(&self, params: &mut Vec<T>, max_iters: usize) -> DampedOutcome {
        let n = self.len();
        let r0 = super::unpack_layout(&params[NZ * n..]);
        let (start, start_value) = self.solve_frames(&params[..NZ * n], &r0);
        if start_value > self.evaluate(params, None) {
            *params = start;
        }
        let mut lambda = T::lit(1e-3);
        let mut iterations = 0;
        let (mut value, mut frames, mut layout) = self.blocks(params);
        while iterations < max_iters {
            let mut accepted = false;
            for _ in 0..12 {
                let Some(step) = self.damped_step(&frames, &layout, lambda) else {
                    lambda *= T::lit(10.0);
                    continue;
                };
                let predicted: Vec<T> = params.iter().zip(&step).map(|(&x, &d)| x + d).collect();
                let r = super::unpack_layout(&predicted[NZ * n..]);
                // Each frame starts from the better of its prediction and its
                // current state under the trial layout.
                let starts: Vec<T> = self
                    .frames
                    .par_iter()
                    .zip(predicted[..NZ * n].par_chunks(NZ).zip(params[..NZ * n].par_chunks(NZ)))
                    .flat_map_iter(|(frame, (a, b))| {
                        let va = self.frame_value(frame, Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]), &r);
                        let vb = self.frame_value(frame, Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]), &r);
                        let pick = if va.is_finite() && va >= vb { a } else { b };
                        pick.to_vec()
                    })
                    .collect();
                let (trial, v) = self.solve_frames(&starts, &r);
                if v.is_finite() && v > value {
                    *params = trial;
                    lambda = (lambda / T::lit(3.0)).max(T::lit(1e-9));
                    accepted = true;
                    break;
                }
                lambda *= T::lit(10.0);
            }
            if !accepted {
                break;
            }
            iterations += 1;
            let before = value;
            (value, frames, layout) = self.blocks(params);
            if value - before <= T::lit(1e-10) * value.abs().max(T::one()) {
                break;
            }
        }
        DampedOutcome { iterations }
    }
}

/// In-place lower Cholesky factor of a row-major `n×n` matrix.
fn cholesky<T: Real>(a: &mut [T], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_solve<T: Real>(l: &[T], n: usize, b: &mut [T]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let mut l = a;
        assert!(cholesky(&mut l, 3));
        let mut b = [1.0, -2.0, 0.5];
        cholesky_solve(&l, 3, &mut b);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * b[j]).sum();
            assert!((r - [1.0, -2.0, 0.5][i]).abs() < 1e-12);
        }
        let mut bad = [1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky(&mut bad, 2));
    }
}
