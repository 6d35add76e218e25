//! Limited-memory BFGS minimizer with a strong-Wolfe line search.
//!
//! The objective is supplied as a closure writing the gradient into a buffer
//! and returning the value. Every accepted step strictly satisfies the
//! sufficient-decrease condition, so the objective never increases between
//! accepted iterates.

use std::collections::VecDeque;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions<T> {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the gradient infinity-norm falls below this.
    pub gradient_tolerance: T,
    /// Stop when the relative decrease of an accepted step falls below this.
    pub relative_decrease_tolerance: T,
    pub max_line_search_evals: usize,
    /// Sufficient decrease constant.
    pub c1: T,
    /// Curvature constant.
    pub c2: T,
}

impl<T: Real> Default for LbfgsOptions<T> {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            gradient_tolerance: T::lit(1e-6),
            relative_decrease_tolerance: T::epsilon() * T::lit(4.0),
            max_line_search_evals: 30,
            c1: T::lit(1e-4),
            c2: T::lit(0.9),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// Relative decrease dropped below tolerance.
    Stalled,
    /// No acceptable step could be found along the search direction.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport<T> {
    pub x: Vec<T>,
    pub value: T,
    pub gradient: Vec<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl<T: Real> LbfgsReport<T> {
    pub fn gradient_inf_norm(&self) -> T {
        inf_norm(&self.gradient)
    }
}

pub(crate) fn inf_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

struct Pair<T> {
    s: Vec<T>,
    y: Vec<T>,
    rho: T,
}

/// Minimizes `f` starting at `x0`.
pub fn minimize<T, F>(mut f: F, x0: Vec<T>, opts: &LbfgsOptions<T>) -> LbfgsReport<T>
where
    T: Real,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![T::zero(); n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut history: VecDeque<Pair<T>> = VecDeque::with_capacity(opts.memory);
    let mut dir = vec![T::zero(); n];
    let mut x_new = vec![T::zero(); n];
    let mut g_new = vec![T::zero(); n];

    if !fx.is_finite() {
        return LbfgsReport { x, value: fx, gradient: g, iterations: 0, evaluations, termination: Termination::LineSearchFailed };
    }

    let mut iterations = 0;
    let termination = loop {
        if inf_norm(&g) < opts.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIterations;
        }

        two_loop(&g, &history, &mut dir);
        let mut slope = dot(&g, &dir);
        if !(slope < T::zero()) {
            // Lost descent; fall back to steepest descent.
            history.clear();
            two_loop(&g, &history, &mut dir);
            slope = dot(&g, &dir);
        }
        let initial_step = if history.is_empty() {
            (T::one() / inf_norm(&g)).min(T::one())
        } else {
            T::one()
        };

        let ls = line_search(&mut f, &x, fx, &dir, slope, initial_step, opts, &mut x_new, &mut g_new);
        evaluations += ls.evaluations;
        let Some((step, f_new)) = ls.accepted else {
            if history.is_empty() {
                break Termination::LineSearchFailed;
            }
            history.clear();
            continue;
        };

        let s: Vec<T> = dir.iter().map(|&d| d * step).collect();
        let y: Vec<T> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        let decrease = fx - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        let f_old = fx;
        fx = f_new;
        iterations += 1;

        if sy > T::epsilon() * dot(&y, &y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: T::one() / sy });
        }

        if decrease <= opts.relative_decrease_tolerance * f_old.abs().max(T::one()) {
            if inf_norm(&g) < opts.gradient_tolerance {
                break Termination::GradientTolerance;
            }
            break Termination::Stalled;
        }
    };

    LbfgsReport { x, value: fx, gradient: g, iterations, evaluations, termination }
}

/// `dir = -H g` via the two-loop recursion.
fn two_loop<T: Real>(g: &[T], history: &VecDeque<Pair<T>>, dir: &mut [T]) {
    for (d, &gi) in dir.iter_mut().zip(g) {
        *d = -gi;
    }
    let mut alpha = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, dir);
        for (d, &yi) in dir.iter_mut().zip(&p.y) {
            *d -= a * yi;
        }
        alpha.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = T::one() / (last.rho * dot(&last.y, &last.y));
        for d in dir.iter_mut() {
            *d *= gamma;
        }
    }
    for (p, &a) in history.iter().zip(alpha.iter().rev()) {
        let b = p.rho * dot(&p.y, dir);
        for (d, &si) in dir.iter_mut().zip(&p.s) {
            *d += (a - b) * si;
        }
    }
}

struct LineSearchOutcome<T> {
    accepted: Option<(T, T)>,
    evaluations: usize,
}

/// Bracketing + zoom search for a step satisfying the strong Wolfe
/// conditions. On exit `x_new`/`g_new` hold the accepted point. If the curvature
/// condition cannot be met within the budget, the best sufficient-decrease
/// point seen is accepted instead.
#[allow(clippy::too_many_arguments)]
fn line_search<T, F>(
    f: &mut F,
    x: &[T],
    f0: T,
    dir: &[T],
    slope0: T,
    initial_step: T,
    opts: &LbfgsOptions<T>,
    x_new: &mut [T],
    g_new: &mut [T],
) -> LineSearchOutcome<T>
where
    T: Real,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let mut evaluations = 0;
    let mut eval = |step: T, xn: &mut [T], gn: &mut [T], evaluations: &mut usize| -> (T, T) {
        for ((xi, &x0), &d) in xn.iter_mut().zip(x).zip(dir) {
            *xi = x0 + step * d;
        }
        *evaluations += 1;
        let fv = f(xn, gn);
        (fv, dot(gn, dir))
    };

    let armijo = |step: T, fv: T| fv.is_finite() && fv <= f0 + opts.c1 * step * slope0 && fv < f0;
    let curvature = |dv: T| dv.abs() <= -opts.c2 * slope0;

    // Best Armijo point (step, value) kept as a fallback.
    let mut best: Option<(T, T)> = None;
    let mut best_x = vec![T::zero(); x.len()];
    let mut best_g = vec![T::zero(); x.len()];
    let mut remember = |step: T, fv: T, xn: &[T], gn: &[T], best: &mut Option<(T, T)>| {
        if best.is_none_or(|(_, bf)| fv < bf) {
            *best = Some((step, fv));
            best_x.copy_from_slice(xn);
            best_g.copy_from_slice(gn);
        }
    };

    let mut lo = (T::zero(), f0, slope0);
    let mut step = initial_step;
    let mut hi: Option<(T, T, T)> = None;
    let two = T::lit(2.0);

    while evaluations < opts.max_line_search_evals {
        let (fv, dv) = eval(step, x_new, g_new, &mut evaluations);
        if !fv.is_finite() {
            hi = Some((step, T::infinity(), T::zero()));
            break;
        }
        if armijo(step, fv) {
            remember(step, fv, x_new, g_new, &mut best);
        }
        if !armijo(step, fv) || (fv >= lo.1 && lo.0 > T::zero()) {
            hi = Some((step, fv, dv));
            break;
        }
        if curvature(dv) {
            return LineSearchOutcome { accepted: Some((step, fv)), evaluations };
        }
        if dv >= T::zero() {
            hi = Some(lo);
            lo = (step, fv, dv);
            break;
        }
        lo = (step, fv, dv);
        step *= two;
    }

    // Zoom between lo and hi.
    if let Some(mut h) = hi {
        while evaluations < opts.max_line_search_evals {
            let (a, b) = (lo.0, h.0);
            let trial = interpolate(lo, h);
            let span = (b - a).abs();
            let lower = a.min(b) + span * T::lit(0.1);
            let upper = a.max(b) - span * T::lit(0.1);
            let step = if trial.is_finite() { trial.max(lower).min(upper) } else { (a + b) / two };
            if span <= T::epsilon() * a.abs().max(b.abs()) {
                break;
            }
            let (fv, dv) = eval(step, x_new, g_new, &mut evaluations);
            if armijo(step, fv) {
                remember(step, fv, x_new, g_new, &mut best);
            }
            if !armijo(step, fv) || fv >= lo.1 {
                h = (step, if fv.is_finite() { fv } else { T::infinity() }, dv);
            } else {
                if curvature(dv) {
                    return LineSearchOutcome { accepted: Some((step, fv)), evaluations };
                }
                if dv * (h.0 - lo.0) >= T::zero() {
                    h = lo;
                }
                lo = (step, fv, dv);
            }
        }
    }

    if let Some((step, fv)) = best {
        x_new.copy_from_slice(&best_x);
        g_new.copy_from_slice(&best_g);
        return LineSearchOutcome { accepted: Some((step, fv)), evaluations };
    }
    LineSearchOutcome { accepted: None, evaluations }
}

/// Cubic interpolation minimizer between two points with values and slopes;
/// falls back to a quadratic when the upper value is infinite.
fn interpolate<T: Real>(lo: (T, T, T), hi: (T, T, T)) -> T {
    let (a, fa, da) = lo;
    let (b, fb, db) = hi;
    if !fb.is_finite() {
        return (a + b) / T::lit(2.0);
    }
    let d1 = da + db - T::lit(3.0) * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < T::zero() {
        // Quadratic through fa, da, fb.
        let h = b - a;
        let denom = T::lit(2.0) * (fb - fa - da * h);
        return if denom > T::zero() { a - da * h * h / denom } else { (a + b) / T::lit(2.0) };
    }
    let d2 = (b - a).signum() * disc.sqrt();
    b - (b - a) * (db + d2 - d1) / (db - da + T::lit(2.0) * d2)
}
