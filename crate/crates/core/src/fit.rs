//! Parametric fits for fertility and mortality forecasts, and the bounded
//! quasi-Newton minimizer they share.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lifetable::life_expectancy;
use crate::rates::{invert_farr, AlphaProfile};

pub const N_AGES: usize = 101;
pub const A_MAX: usize = 100;
/// Returned when the fitted rate curve has no mass.
pub const PENALTY: f64 = 1e6;
/// Share of male newborns.
pub const ALPHA_MALE: f64 = 0.513234;

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    /// False when the evaluation budget ran out.
    pub converged: bool,
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        (self.f)(x)
    }
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences with `h = 1e-6 max(1, |x|)`, one-sided at bounds.
fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut Counted<F>, x: &[f64], fx: f64, bounds: &[(f64, f64)]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xt = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        let (lo, hi) = bounds[i];
        let xp = (x[i] + h).min(hi);
        let xm = (x[i] - h).max(lo);
        xt[i] = xp;
        let fp = if xp > x[i] { f.call(&xt) } else { fx };
        xt[i] = xm;
        let fm = if xm < x[i] { f.call(&xt) } else { fx };
        xt[i] = x[i];
        let gi = (fp - fm) / (xp - xm);
        g[i] = if gi.is_finite() { gi } else { 0.0 };
    }
    g
}

/// Minimizes `f` over the box `bounds` starting from `x0`.
///
/// BFGS on the inverse Hessian with finite-difference gradients and a weak
/// Wolfe bracketing line search along the projected path. The Hessian is
/// kept across kinks of absolute-value objectives, which is what lets the
/// method converge on them; it is reset only when the direction is not a
/// descent direction. Non-finite trial values shrink the step.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    bounds: &[(f64, f64)],
    tol: f64,
    max_evals: usize,
) -> Result<Minimum> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let n = x0.len();
    if bounds.len() != n {
        return Err(Error::invalid("one bound pair per coordinate is required"));
    }
    if x0.iter().zip(bounds).any(|(x, &(lo, hi))| !(lo <= *x && *x <= hi)) {
        return Err(Error::invalid("starting point outside the bounds"));
    }
    let mut f = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    let mut fx = f.call(&x);
    if !fx.is_finite() {
        return Err(Error::domain("objective is not finite at the starting point"));
    }
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    };
    let mut h = identity(n);
    let mut fresh = true;
    let mut g = fd_gradient(&mut f, &x, fx, bounds);
    let mut iterations = 0;
    let mut small_steps = 0;
    let mut converged = false;

    while f.evals < max_evals {
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= bounds[i].0 && g[i] > 0.0) || (x[i] >= bounds[i].1 && g[i] < 0.0)))
            .collect();
        let pg: f64 = (0..n).filter(|&i| free[i]).map(|i| g[i] * g[i]).sum::<f64>().sqrt();
        if pg < tol {
            converged = true;
            break;
        }
        let mut d: Vec<f64> = (0..n)
            .map(|i| if free[i] { -(0..n).filter(|&j| free[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>() } else { 0.0 })
            .collect();
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            fresh = true;
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }
        let gd = dot(&g, &d);

        // weak Wolfe bracketing; remembers the best sufficient-decrease point
        let (mut lo, mut hi, mut t) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let mut wolfe = false;
        for _ in 0..60 {
            if f.evals >= max_evals {
                break;
            }
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            project(&mut xt, bounds);
            if xt == x {
                break;
            }
            let ft = f.call(&xt);
            if !ft.is_finite() || ft > fx + C1 * t * gd || ft >= fx {
                hi = t;
            } else {
                let gt = fd_gradient(&mut f, &xt, ft, bounds);
                let accept_better = best.as_ref().is_none_or(|b| ft < b.1);
                let curvature = dot(&gt, &d) >= C2 * gd;
                if accept_better {
                    best = Some((xt, ft, gt));
                }
                if curvature {
                    wolfe = true;
                    break;
                }
                lo = t;
            }
            t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo.max(t) };
            if hi.is_finite() && hi - lo < 1e-16 * hi.max(1.0) {
                break;
            }
        }

        let Some((xn, fnew, gn)) = best else {
            if fresh {
                converged = true;
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let decrease = fx - fnew;
        let xnorm = xn.iter().map(|v| v * v).sum::<f64>().sqrt();
        let snorm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = xn;
        fx = fnew;
        g = gn;
        if sy > 0.0 && (wolfe || sy > 1e-12 * snorm * dot(&y, &y).sqrt()) {
            if fresh {
                let yy = dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= sy / yy);
            }
            let rho = 1.0 / sy;
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
        if decrease <= 1e-15 * (1.0 + fx.abs()) || snorm <= 1e-14 * (1.0 + xnorm) {
            small_steps += 1;
            if small_steps >= 5 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    Ok(Minimum { x, f: fx, evals: f.evals, iterations, converged })
}

/// Minimum-norm point of the convex hull of `gs` (Wolfe's algorithm).
fn min_norm_hull(gs: &[Vec<f64>]) -> Vec<f64> {
    let n = gs[0].len();
    let combo = |set: &[usize], w: &[f64]| -> Vec<f64> {
        (0..n).map(|k| set.iter().zip(w).map(|(&i, l)| l * gs[i][k]).sum()).collect()
    };
    let scale = gs.iter().map(|g| dot(g, g)).fold(0.0, f64::max);
    let start = (0..gs.len()).min_by(|&a, &b| dot(&gs[a], &gs[a]).total_cmp(&dot(&gs[b], &gs[b]))).unwrap_or(0);
    let mut set = vec![start];
    let mut w = vec![1.0];
    let mut x = gs[start].clone();
    for _ in 0..100 {
        let j = (0..gs.len()).min_by(|&a, &b| dot(&x, &gs[a]).total_cmp(&dot(&x, &gs[b]))).unwrap_or(0);
        if dot(&x, &x) - dot(&x, &gs[j]) <= 1e-14 * scale || set.contains(&j) {
            break;
        }
        set.push(j);
        w.push(0.0);
        loop {
            let v = affine_min_norm(gs, &set);
            let Some(v) = v else { break };
            if v.iter().all(|c| *c > 1e-15) {
                w = v;
                break;
            }
            // step from w toward v until a weight reaches zero
            let mut theta = 1.0f64;
            for (wi, vi) in w.iter().zip(&v) {
                if *vi <= 1e-15 && wi > vi {
                    theta = theta.min(wi / (wi - vi));
                }
            }
            let mixed: Vec<f64> = w.iter().zip(&v).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
            let keep: Vec<usize> = (0..set.len()).filter(|&i| mixed[i] > 1e-15).collect();
            set = keep.iter().map(|&i| set[i]).collect();
            w = keep.iter().map(|&i| mixed[i]).collect();
            let sum: f64 = w.iter().sum();
            w.iter_mut().for_each(|c| *c /= sum);
            if set.len() <= 1 {
                break;
            }
        }
        x = combo(&set, &w);
    }
    x
}

/// Affine weights (summing to one) of the minimum-norm point in the affine
/// hull of the selected gradients; `None` when they are degenerate.
fn affine_min_norm(gs: &[Vec<f64>], set: &[usize]) -> Option<Vec<f64>> {
    let m = set.len();
    // [Q 1; 1' 0] [w; mu] = [0; 1]
    let dim = m + 1;
    let mut a = vec![0.0; dim * (dim + 1)];
    for i in 0..m {
        for j in 0..m {
            a[i * (dim + 1) + j] = dot(&gs[set[i]], &gs[set[j]]);
        }
        a[i * (dim + 1) + m] = 1.0;
        a[m * (dim + 1) + i] = 1.0;
    }
    a[m * (dim + 1) + dim] = 1.0;
    for c in 0..dim {
        let piv = (c..dim).max_by(|&r, &s| a[r * (dim + 1) + c].abs().total_cmp(&a[s * (dim + 1) + c].abs()))?;
        if a[piv * (dim + 1) + c].abs() < 1e-300 {
            return None;
        }
        for k in 0..=dim {
            a.swap(c * (dim + 1) + k, piv * (dim + 1) + k);
        }
        for r in 0..dim {
            if r != c {
                let factor = a[r * (dim + 1) + c] / a[c * (dim + 1) + c];
                for k in c..=dim {
                    a[r * (dim + 1) + k] -= factor * a[c * (dim + 1) + k];
                }
            }
        }
    }
    let w: Vec<f64> = (0..m).map(|i| a[i * (dim + 1) + dim] / a[i * (dim + 1) + i]).collect();
    w.iter().all(|v| v.is_finite()).then_some(w)
}

/// One gradient-sampling step from a point where BFGS stalled on a kink:
/// descends along the minimum-norm convex combination of gradients sampled
/// in shrinking boxes around `x`. `None` when no radius gives a decrease.
fn sampled_step<F: FnMut(&[f64]) -> f64>(
    f: &mut Counted<F>,
    x: &[f64],
    fx: f64,
    bounds: &[(f64, f64)],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<(Vec<f64>, f64)> {
    use rand::Rng;
    let n = x.len();
    let g0 = fd_gradient(f, x, fx, bounds);
    let mut eps = 1e-3;
    while eps >= 1e-9 {
        let mut gs = vec![g0.clone()];
        for _ in 0..3 * n {
            let mut xs: Vec<f64> = x.iter().map(|v| v + eps * rng.gen_range(-1.0..1.0)).collect();
            project(&mut xs, bounds);
            let fs = f.call(&xs);
            if fs.is_finite() {
                gs.push(fd_gradient(f, &xs, fs, bounds));
            }
        }
        let d: Vec<f64> = min_norm_hull(&gs).iter().map(|v| -v).collect();
        let dd = dot(&d, &d);
        if dd > 1e-24 {
            let mut t = eps / dd.sqrt();
            t = t.max(1.0);
            for _ in 0..50 {
                let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                project(&mut xt, bounds);
                let ft = f.call(&xt);
                if ft.is_finite() && ft < fx - 1e-6 * t * dd {
                    return Some((xt, ft));
                }
                t *= 0.5;
            }
        }
        eps *= 0.1;
    }
    None
}

const STALL_RESTARTS: usize = 25;

/// Restarted [`minimize`]. When a rerun from the best point no longer
/// improves, one gradient-sampling step is taken to leave the kink and BFGS
/// resumes from there. Stops once the objective is below 1e-10, which for
/// sums of absolute errors is an exact fit.
pub fn minimize_restarts<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    bounds: &[(f64, f64)],
    tol: f64,
    max_evals: usize,
    restarts: usize,
) -> Result<Minimum> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut best = minimize(&mut f, x0, bounds, tol, max_evals)?;
    let mut extra = 0;
    // restarts without real progress; a target that cannot be met exactly
    // would otherwise use the whole budget
    let mut stalled = 0;
    let mut anchor = best.f;
    for _ in 0..restarts {
        let prev = best.f;
        if prev <= 1e-10 || best.evals + extra >= max_evals * (restarts + 1) || stalled >= STALL_RESTARTS {
            break;
        }
        let mut start = best.x.clone();
        let rerun = minimize(&mut f, &start, bounds, tol, max_evals)?;
        extra += rerun.evals;
        let rerun_gain = prev - rerun.f;
        if rerun.f < best.f {
            best.x = rerun.x;
            best.f = rerun.f;
        }
        if rerun_gain <= 1e-14 * (1.0 + prev) {
            let mut counted = Counted { f: &mut f, evals: 0 };
            // fresh samples a few times before accepting the kink as a minimum
            let step = (0..4).find_map(|_| sampled_step(&mut counted, &best.x, best.f, bounds, &mut rng));
            extra += counted.evals;
            match step {
                None => break,
                Some((x, _)) => start = x,
            }
            let next = minimize(&mut f, &start, bounds, tol, max_evals)?;
            extra += next.evals;
            if next.f < best.f {
                best.x = next.x;
                best.f = next.f;
            }
        }
        best.iterations += 1;
        if anchor - best.f > 1e-8 * (1.0 + anchor) {
            anchor = best.f;
            stalled = 0;
        } else {
            stalled += 1;
        }
    }
    best.evals += extra;
    Ok(best)
}

// ---------------------------------------------------------------- births

#[derive(Clone, Debug, PartialEq)]
pub struct BirthFitTarget {
    pub total_births: f64,
    pub target_mac: f64,
    /// Mid-year female population by single age 0..=100.
    pub female_pop: Vec<f64>,
}

impl BirthFitTarget {
    pub fn new(total_births: f64, target_mac: f64, female_pop: Vec<f64>) -> Result<Self> {
        if total_births < 0.0 || !total_births.is_finite() {
            return Err(Error::invalid(format!("total births {total_births} must be non-negative")));
        }
        if !(10.0 < target_mac && target_mac < 60.0) {
            return Err(Error::invalid(format!("mean age at childbearing {target_mac} outside (10, 60)")));
        }
        if female_pop.len() != N_AGES {
            return Err(Error::invalid(format!("female population needs {N_AGES} ages")));
        }
        Ok(BirthFitTarget { total_births, target_mac, female_pop })
    }
}

pub const BIRTH_BOUNDS: [(f64, f64); 3] = [(0.0, 1.0), (15.0, 49.0), (1.0, 20.0)];

/// `b_i = t1 exp(-((i-1) - t2)^2 / t3^2)` for i in 0..=100.
pub fn gaussian_rates(theta: &[f64; 3]) -> Result<Vec<f64>> {
    let [t1, t2, t3] = *theta;
    if t3 == 0.0 {
        return Err(Error::domain("Gaussian width must be non-zero"));
    }
    Ok((0..N_AGES)
        .map(|i| {
            let z = (i as f64 - 1.0 - t2) / t3;
            t1 * (-z * z).exp()
        })
        .collect())
}

/// Fitted births and mean age of a rate curve.
pub fn birth_moments(b: &[f64], female_pop: &[f64]) -> (f64, Option<f64>) {
    let f1 = b.iter().zip(female_pop).map(|(r, p)| r * p).sum();
    let mass: f64 = b.iter().sum();
    let f2 = (mass > 0.0).then(|| b.iter().enumerate().map(|(a, r)| a as f64 * r).sum::<f64>() / mass);
    (f1, f2)
}

pub fn birth_objective(theta: &[f64; 3], target: &BirthFitTarget) -> f64 {
    let Ok(b) = gaussian_rates(theta) else { return PENALTY };
    match birth_moments(&b, &target.female_pop) {
        (f1, Some(f2)) => (f1 - target.total_births).abs() / 100.0 + (f2 - target.target_mac).abs(),
        _ => PENALTY,
    }
}

#[derive(Clone, Debug)]
pub struct BirthFit {
    pub theta: [f64; 3],
    pub rates: Vec<f64>,
    pub objective: f64,
    pub births: f64,
    pub mac: f64,
    pub evals: usize,
}

/// Starting point `(peak of the last observed curve, observed MAC, 5)`,
/// clamped into the bounds.
pub fn birth_start(last_rates: &[f64], observed_mac: f64) -> [f64; 3] {
    let peak = last_rates.iter().copied().fold(0.0, f64::max);
    let mut x = [peak, observed_mac, 5.0];
    project(&mut x, &BIRTH_BOUNDS);
    x
}

pub fn fit_births(target: &BirthFitTarget, theta0: [f64; 3]) -> Result<BirthFit> {
    let mut x0 = theta0;
    project(&mut x0, &BIRTH_BOUNDS);
    let m = minimize_restarts(
        |x: &[f64]| birth_objective(&[x[0], x[1], x[2]], target),
        &x0,
        &BIRTH_BOUNDS,
        1e-12,
        20_000,
        20,
    )?;
    let theta = [m.x[0], m.x[1], m.x[2]];
    let rates = gaussian_rates(&theta)?;
    let (births, mac) = birth_moments(&rates, &target.female_pop);
    Ok(BirthFit { theta, rates, objective: m.f, births, mac: mac.unwrap_or(f64::NAN), evals: m.evals })
}

// ------------------------------------------------------------- mortality

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MortalityFitTarget {
    pub deaths: f64,
    pub le_m_0: f64,
    pub le_f_0: f64,
    pub le_m_65: f64,
    pub le_f_65: f64,
}

impl MortalityFitTarget {
    pub fn validate(&self) -> Result<()> {
        let les = [self.le_m_0, self.le_f_0, self.le_m_65, self.le_f_65];
        if les.iter().any(|v| !(*v > 0.0)) || self.le_m_65 >= self.le_m_0 || self.le_f_65 >= self.le_f_0 {
            return Err(Error::invalid("life expectancies must be positive and decrease with age"));
        }
        if !(self.deaths >= 0.0) {
            return Err(Error::invalid("deaths must be non-negative"));
        }
        Ok(())
    }
}

/// Reference curves and exposure for one mortality fit.
#[derive(Clone, Debug)]
pub struct MortalityInputs {
    pub qref_m: Vec<f64>,
    pub qref_f: Vec<f64>,
    /// Mid-year population by single age.
    pub pop_m: Vec<f64>,
    pub pop_f: Vec<f64>,
    pub alpha: AlphaProfile,
}

pub const MORTALITY_BOUNDS: [(f64, f64); 6] = [(0.2, 5.0); 6];

fn logistic(a: f64, c: f64) -> f64 {
    1.0 / (1.0 + (-0.5 * (a - c)).exp())
}

/// Child, adult and elderly weights; they sum to one.
pub fn activation(a: f64) -> [f64; 3] {
    let s16 = logistic(a, 16.0);
    let s65 = logistic(a, 65.0);
    [1.0 - s16, s16 - s65, s65]
}

/// Scaled reference curves and the number of values clipped to [0, 1].
pub fn mortality_curves(theta: &[f64; 6], qref_m: &[f64], qref_f: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
    let mut clipped = 0;
    let mut curve = |t: &[f64], qref: &[f64]| -> Vec<f64> {
        qref.iter()
            .enumerate()
            .map(|(a, q)| {
                let phi = activation(a as f64);
                let v = (t[0] * phi[0] + t[1] * phi[1] + t[2] * phi[2]) * q;
                if !(0.0..=1.0).contains(&v) {
                    clipped += 1;
                }
                v.clamp(0.0, 1.0)
            })
            .collect()
    };
    let qm = curve(&theta[..3], qref_m);
    let qf = curve(&theta[3..], qref_f);
    (qm, qf, clipped)
}

/// Expected deaths and the four life expectancies of a parameter vector.
pub fn mortality_moments(theta: &[f64; 6], inputs: &MortalityInputs) -> Result<(f64, [f64; 4])> {
    let (qm, qf, _) = mortality_curves(theta, &inputs.qref_m, &inputs.qref_f);
    let mut d = 0.0;
    for (q, pop) in [(&qm, &inputs.pop_m), (&qf, &inputs.pop_f)] {
        for (a, (&qa, &pa)) in q.iter().zip(pop.iter()).enumerate() {
            d += invert_farr(qa, pa, inputs.alpha.at(a))?;
        }
    }
    let le = |q: &[f64], a| life_expectancy(q, a, &inputs.alpha, A_MAX);
    Ok((d, [le(&qm, 0)?, le(&qf, 0)?, le(&qm, 65)?, le(&qf, 65)?]))
}

/// Signed terms of the mortality objective; their absolute sum is the
/// objective.
fn mortality_residuals(theta: &[f64; 6], target: &MortalityFitTarget, inputs: &MortalityInputs) -> Option<[f64; 5]> {
    let (d, le) = mortality_moments(theta, inputs).ok()?;
    Some([
        (d - target.deaths) / 2000.0,
        le[0] - target.le_m_0,
        le[1] - target.le_f_0,
        le[2] - target.le_m_65,
        le[3] - target.le_f_65,
    ])
}

pub fn mortality_objective(theta: &[f64; 6], target: &MortalityFitTarget, inputs: &MortalityInputs) -> f64 {
    match mortality_residuals(theta, target, inputs) {
        Some(r) => r.iter().map(|v| v.abs()).sum(),
        None => PENALTY,
    }
}

/// Solves `m x = b` in place by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    Some(x)
}

/// Levenberg-Marquardt on `sum r(x)^2` inside the box, forward-difference
/// Jacobian. Used as a smooth start for the absolute-error fits: where the
/// targets can be met exactly both problems share the solution.
fn least_squares<R: FnMut(&[f64]) -> Option<Vec<f64>>>(
    mut r: R,
    x0: &[f64],
    bounds: &[(f64, f64)],
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let mut evals = 1;
    let Some(mut rx) = r(&x) else { return (x, evals) };
    let sq = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>();
    let mut cost = sq(&rx);
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        if cost < 1e-26 {
            break;
        }
        let mut jac = vec![vec![0.0; rx.len()]; n];
        let mut xt = x.clone();
        for i in 0..n {
            let (lo, hi) = bounds[i];
            let mut h = 1e-7 * x[i].abs().max(1.0);
            if x[i] + h > hi {
                h = -h;
            }
            xt[i] = (x[i] + h).clamp(lo, hi);
            evals += 1;
            if let Some(rt) = r(&xt) {
                let step = xt[i] - x[i];
                for (j, (a, b)) in rt.iter().zip(&rx).enumerate() {
                    jac[i][j] = (a - b) / step;
                }
            }
            xt[i] = x[i];
        }
        let jtj: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| dot(&jac[a], &jac[b])).collect()).collect();
        let jtr: Vec<f64> = (0..n).map(|a| -dot(&jac[a], &rx)).collect();
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = jtj.clone();
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += lambda * (jtj[i][i] + 1e-9);
            }
            let Some(delta) = solve(m, jtr.clone()) else {
                lambda *= 4.0;
                continue;
            };
            let mut xn: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + d).collect();
            project(&mut xn, bounds);
            evals += 1;
            match r(&xn) {
                Some(rn) if sq(&rn) < cost => {
                    let moved = xn.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    x = xn;
                    cost = sq(&rn);
                    rx = rn;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = moved > 1e-15;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !improved {
            break;
        }
    }
    (x, evals)
}

#[derive(Clone, Debug)]
pub struct MortalityFit {
    pub theta: [f64; 6],
    pub q_m: Vec<f64>,
    pub q_f: Vec<f64>,
    pub objective: f64,
    pub deaths: f64,
    pub le: [f64; 4],
    pub evals: usize,
}

pub fn fit_mortality(target: &MortalityFitTarget, inputs: &MortalityInputs) -> Result<MortalityFit> {
    target.validate()?;
    for v in [&inputs.qref_m, &inputs.qref_f, &inputs.pop_m, &inputs.pop_f] {
        if v.len() != N_AGES {
            return Err(Error::invalid(format!("mortality fit inputs need {N_AGES} ages")));
        }
    }
    let theta = |x: &[f64]| [x[0], x[1], x[2], x[3], x[4], x[5]];
    let (start, ls_evals) = least_squares(
        |x: &[f64]| mortality_residuals(&theta(x), target, inputs).map(|r| r.to_vec()),
        &[1.0; 6],
        &MORTALITY_BOUNDS,
        200,
    );
    let mut m = minimize_restarts(
        |x: &[f64]| mortality_objective(&theta(x), target, inputs),
        &start,
        &MORTALITY_BOUNDS,
        1e-12,
        40_000,
        1000,
    )?;
    m.evals += ls_evals;
    let theta = theta(&m.x);
    let (q_m, q_f, clipped) = mortality_curves(&theta, &inputs.qref_m, &inputs.qref_f);
    if clipped > 0 {
        log::warn!("{clipped} fitted death probabilities clipped");
    }
    let (deaths, le) = mortality_moments(&theta, inputs)?;
    Ok(MortalityFit { theta, q_m, q_f, objective: m.f, deaths, le, evals: m.evals })
}

/// Age-wise mean of the curves for `years`, skipping excluded years.
pub fn reference_curve(history: &BTreeMap<i32, Vec<f64>>, years: &[i32], exclude: &[i32]) -> Result<Vec<f64>> {
    let used: Vec<&Vec<f64>> = years
        .iter()
        .filter(|y| !exclude.contains(y))
        .map(|y| history.get(y).ok_or_else(|| Error::Missing(format!("reference probabilities for {y}"))))
        .collect::<Result<_>>()?;
    if used.is_empty() {
        return Err(Error::invalid("no reference years left after exclusions"));
    }
    let n = used[0].len();
    let mut out = vec![0.0; n];
    for c in &used {
        for (o, v) in out.iter_mut().zip(c.iter()) {
            *o += v / used.len() as f64;
        }
    }
    Ok(out)
}

/// Latest `n` years at or before `last` that are not excluded.
pub fn trailing_years(available: impl IntoIterator<Item = i32>, last: i32, n: usize, exclude: &[i32]) -> Vec<i32> {
    let mut ys: Vec<i32> = available.into_iter().filter(|y| *y <= last && !exclude.contains(y)).collect();
    ys.sort_unstable();
    ys.dedup();
    ys.into_iter().rev().take(n).rev().collect()
}
