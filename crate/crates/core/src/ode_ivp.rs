//! Dormand–Prince 5(4) integrator with dense output and an accepted-step
//! hook that may rewrite the state between steps.

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Right-hand side `f(t, y)`.
pub type Rhs<'a> = dyn Fn(f64, &Vector) -> Vector + Sync + 'a;

/// Hook run on every accepted state. Returning `Some` rewrites the state.
pub type StepHook<'a> = dyn Fn(f64, &Vector) -> Option<Vector> + Sync + 'a;

pub const SAFETY: f64 = 0.9;
pub const MIN_RATIO: f64 = 0.2;
pub const MAX_RATIO: f64 = 5.0;
pub const UNDERFLOW: f64 = 1e-14;

pub struct IvpSpec<'a> {
    pub rhs: &'a Rhs<'a>,
    pub t0: f64,
    pub t1: f64,
    pub y0: Vector,
    pub rtol: f64,
    pub atol: f64,
    pub hook: Option<&'a StepHook<'a>>,
    pub max_steps: usize,
}

impl<'a> IvpSpec<'a> {
    pub fn new(rhs: &'a Rhs<'a>, t0: f64, t1: f64, y0: Vector) -> Self {
        Self { rhs, t0, t1, y0, rtol: 1e-6, atol: 1e-9, hook: None, max_steps: 1_000_000 }
    }

    pub fn tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn with_hook(mut self, hook: &'a StepHook<'a>) -> Self {
        self.hook = Some(hook);
        self
    }
}

/// A state rewrite performed by the hook.
#[derive(Debug, Clone, PartialEq)]
pub struct HookEvent {
    pub t: f64,
    pub step: usize,
    pub before_norm: f64,
    pub after_norm: f64,
}

#[derive(Debug, Clone)]
pub struct IvpSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vector>,
    /// Five interpolation vectors per step (Hairer's continuous extension).
    pub dense: Vec<[Vector; 5]>,
    pub events: Vec<HookEvent>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl IvpSolution {
    pub fn last(&self) -> &Vector {
        self.y.last().expect("solution holds the initial state")
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn checked(rhs: &Rhs, t: f64, y: &Vector, evals: &mut usize) -> Result<Vector> {
    *evals += 1;
    let f = rhs(t, y);
    if f.iter().all(|v| v.is_finite()) {
        Ok(f)
    } else {
        Err(Error::Evaluation { t })
    }
}

fn err_norm(y0: &Vector, y1: &Vector, e: &Vector, rtol: f64, atol: f64) -> f64 {
    let n = y0.len().max(1) as f64;
    let mut s = 0.0;
    for i in 0..y0.len() {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        s += (e[i] / sc).powi(2);
    }
    (s / n).sqrt()
}

fn initial_step(spec: &IvpSpec, f0: &Vector, dir: f64, evals: &mut usize) -> Result<f64> {
    let y0 = &spec.y0;
    let n = y0.len().max(1) as f64;
    let sc = y0.map(|v| spec.atol + spec.rtol * v.abs());
    let d0 = (y0.component_div(&sc).norm_squared() / n).sqrt();
    let d1 = (f0.component_div(&sc).norm_squared() / n).sqrt();
    let span = (spec.t1 - spec.t0).abs();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1 = y0 + f0 * (dir * h0);
    let f1 = checked(spec.rhs, spec.t0 + dir * h0, &y1, evals)?;
    let d2 = ((&f1 - f0).component_div(&sc).norm_squared() / n).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Integrates from `t0` to `t1` (either direction).
pub fn integrate(spec: &IvpSpec) -> Result<IvpSolution> {
    if !(spec.rtol > 0.0 && spec.atol > 0.0) {
        return Err(Error::Input("rtol and atol must be positive".into()));
    }
    if spec.t0 == spec.t1 || !spec.t0.is_finite() || !spec.t1.is_finite() {
        return Err(Error::Input(format!("invalid span [{}, {}]", spec.t0, spec.t1)));
    }
    if spec.y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite initial state".into()));
    }
    let dir = (spec.t1 - spec.t0).signum();
    let span = (spec.t1 - spec.t0).abs();
    let h_min = UNDERFLOW * span;
    let mut evals = 0usize;

    let mut t = spec.t0;
    let mut y = spec.y0.clone();
    let mut k1 = checked(spec.rhs, t, &y, &mut evals)?;
    let mut h = initial_step(spec, &k1, dir, &mut evals)?;

    let mut sol = IvpSolution {
        t: vec![t],
        y: vec![y.clone()],
        dense: Vec::new(),
        events: Vec::new(),
        accepted: 0,
        rejected: 0,
        evaluations: 0,
    };

    let mut last = false;
    while !last {
        if sol.accepted + sol.rejected >= spec.max_steps {
            return Err(Error::StepUnderflow { t, h });
        }
        if h < h_min {
            return Err(Error::StepUnderflow { t, h });
        }
        let remaining = (spec.t1 - t).abs();
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            last = true;
        }
        let hs = dir * h;
        let y2 = &y + &k1 * (hs * A21);
        let k2 = checked(spec.rhs, t + C2 * hs, &y2, &mut evals)?;
        let y3 = &y + (&k1 * A31 + &k2 * A32) * hs;
        let k3 = checked(spec.rhs, t + C3 * hs, &y3, &mut evals)?;
        let y4 = &y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * hs;
        let k4 = checked(spec.rhs, t + C4 * hs, &y4, &mut evals)?;
        let y5 = &y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * hs;
        let k5 = checked(spec.rhs, t + C5 * hs, &y5, &mut evals)?;
        let y6 = &y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * hs;
        let t_new = if last { spec.t1 } else { t + hs };
        let k6 = checked(spec.rhs, t_new, &y6, &mut evals)?;
        let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * hs;
        let k7 = checked(spec.rhs, t_new, &y_new, &mut evals)?;
        let e = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * hs;
        let err = err_norm(&y, &y_new, &e, spec.rtol, spec.atol);

        if err <= 1.0 {
            let ydiff = &y_new - &y;
            let bspl = &k1 * hs - &ydiff;
            let r3 = &ydiff - &k7 * hs - &bspl;
            let r4 = (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * hs;
            sol.dense.push([y.clone(), ydiff, bspl, r3, r4]);

            t = t_new;
            y = y_new;
            k1 = k7;
            sol.accepted += 1;
            if let Some(hook) = spec.hook {
                if let Some(rewritten) = hook(t, &y) {
                    sol.events.push(HookEvent {
                        t,
                        step: sol.accepted,
                        before_norm: y.norm(),
                        after_norm: rewritten.norm(),
                    });
                    y = rewritten;
                    k1 = checked(spec.rhs, t, &y, &mut evals)?;
                }
            }
            sol.t.push(t);
            sol.y.push(y.clone());
            let fac = if err == 0.0 { MAX_RATIO } else { (SAFETY * err.powf(-0.2)).clamp(MIN_RATIO, MAX_RATIO) };
            h *= fac;
        } else {
            last = false;
            sol.rejected += 1;
            let fac = (SAFETY * err.powf(-0.2)).clamp(MIN_RATIO, 1.0);
            h *= fac;
        }
    }
    sol.evaluations = evals;
    Ok(sol)
}

/// Evaluates the continuous extension at `t`.
///
/// Mesh times return the stored state exactly.
pub fn dense_eval(sol: &IvpSolution, t: f64) -> Result<Vector> {
    let n = sol.t.len();
    let (lo, hi) = {
        let a = sol.t[0];
        let b = sol.t[n - 1];
        (a.min(b), a.max(b))
    };
    if !(t >= lo && t <= hi) {
        return Err(Error::Range { t, lo, hi });
    }
    let forward = sol.t[n - 1] >= sol.t[0];
    let key = |s: f64| if forward { s } else { -s };
    let pos = sol.t.partition_point(|&s| key(s) < key(t));
    if pos < n && sol.t[pos] == t {
        return Ok(sol.y[pos].clone());
    }
    let step = pos.saturating_sub(1).min(n - 2);
    let (ta, tb) = (sol.t[step], sol.t[step + 1]);
    let theta = (t - ta) / (tb - ta);
    let th1 = 1.0 - theta;
    let [r0, r1, r2, r3, r4] = &sol.dense[step];
    Ok(r0 + (r1 + (r2 + (r3 + r4 * th1) * theta) * th1) * theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    #[test]
    fn exponential_decay() {
        let rhs = |_t: f64, y: &Vector| -y;
        let spec = IvpSpec::new(&rhs, 0.0, 1.0, v(&[1.0])).tolerances(1e-8, 1e-10);
        let sol = integrate(&spec).unwrap();
        assert!((sol.last()[0] - (-1.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn constant_solution_never_rejects() {
        let rhs = |_t: f64, y: &Vector| Vector::zeros(y.len());
        let sol = integrate(&IvpSpec::new(&rhs, 0.0, 3.0, v(&[2.5, -1.0]))).unwrap();
        assert_eq!(sol.rejected, 0);
        assert!(sol.y.iter().all(|y| *y == v(&[2.5, -1.0])));
    }

    #[test]
    fn cosine_growth() {
        let rhs = |t: f64, y: &Vector| y * t.cos();
        let spec = IvpSpec::new(&rhs, 0.0, 2.0, v(&[1.0])).tolerances(1e-9, 1e-12);
        let sol = integrate(&spec).unwrap();
        assert!((sol.last()[0] - 2.0f64.sin().exp()).abs() < 1e-6);
    }

    #[test]
    fn dense_output_at_mesh_and_midpoint() {
        let rhs = |_t: f64, y: &Vector| -y;
        let spec = IvpSpec::new(&rhs, 0.0, 1.0, v(&[1.0])).tolerances(1e-8, 1e-10);
        let sol = integrate(&spec).unwrap();
        for (t, y) in sol.t.iter().zip(&sol.y) {
            assert_eq!(dense_eval(&sol, *t).unwrap(), *y);
        }
        let mid = dense_eval(&sol, 0.5).unwrap()[0];
        assert!((mid - (-0.5f64).exp()).abs() < 10.0 * 1e-8);
        assert!(matches!(dense_eval(&sol, 1.5), Err(Error::Range { .. })));
    }

    #[test]
    fn quadratic_is_interpolated_exactly() {
        let rhs = |t: f64, _y: &Vector| v(&[t]);
        let sol = integrate(&IvpSpec::new(&rhs, 0.0, 2.0, v(&[0.0]))).unwrap();
        for w in sol.t.windows(2) {
            let tm = 0.5 * (w[0] + w[1]);
            let y = dense_eval(&sol, tm).unwrap()[0];
            assert!((y - 0.5 * tm * tm).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_is_reported() {
        let rhs = |t: f64, y: &Vector| if t > 0.5 { y * f64::NAN } else { y.clone() };
        let res = integrate(&IvpSpec::new(&rhs, 0.0, 1.0, v(&[1.0])));
        assert!(matches!(res, Err(Error::Evaluation { .. })));
    }

    #[test]
    fn identity_hook_is_neutral() {
        let rhs = |t: f64, y: &Vector| v(&[y[1], -y[0] + 0.1 * t.sin()]);
        let hook = |_t: f64, _y: &Vector| None;
        let a = integrate(&IvpSpec::new(&rhs, 0.0, 5.0, v(&[1.0, 0.0]))).unwrap();
        let b = integrate(&IvpSpec::new(&rhs, 0.0, 5.0, v(&[1.0, 0.0])).with_hook(&hook)).unwrap();
        assert_eq!(a.t, b.t);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn hook_rewrites_are_logged() {
        let rhs = |_t: f64, _y: &Vector| v(&[1.0]);
        let hook = |_t: f64, y: &Vector| if y[0] > 1.0 { Some(v(&[y[0] - 1.0])) } else { None };
        let sol = integrate(&IvpSpec::new(&rhs, 0.0, 3.0, v(&[0.0])).with_hook(&hook)).unwrap();
        assert!(!sol.events.is_empty());
        assert!(sol.last()[0] <= 1.0 + 1e-12);
    }

    #[test]
    fn backward_integration() {
        let rhs = |_t: f64, y: &Vector| -y;
        let spec = IvpSpec::new(&rhs, 1.0, 0.0, v(&[(-1.0f64).exp()])).tolerances(1e-9, 1e-12);
        let sol = integrate(&spec).unwrap();
        assert!((sol.last()[0] - 1.0).abs() < 1e-8);
    }
}
