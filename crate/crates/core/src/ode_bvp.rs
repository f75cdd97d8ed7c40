//! Two-point boundary value solver: three-stage Lobatto IIIA collocation
//! (the bvp4c scheme) with damped Newton, residual-driven mesh refinement
//! and a post-convergence state rewrite hook.
//!
//! States may live in different coordinate charts at different nodes. An
//! optional `align` map expresses a node's state in the chart of its left
//! neighbour, so every collocation interval is evaluated in one chart.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{BandedLu, Mat, Vector};

pub type OdeFun<'a> = dyn Fn(f64, &Vector) -> Vector + Sync + 'a;
pub type BcFun<'a> = dyn Fn(&Vector, &Vector) -> Vector + Sync + 'a;
pub type RewriteHook<'a> = dyn Fn(f64, &Vector) -> Option<Vector> + Sync + 'a;
/// `align(reference, state)` returns `state` re-expressed in the chart of
/// `reference`, or `None` when it already is.
pub type AlignFun<'a> = dyn Fn(&Vector, &Vector) -> Option<Vector> + Sync + 'a;

pub const REWRITE_CAP: usize = 10;

pub struct BvpSpec<'a> {
    pub fun: &'a OdeFun<'a>,
    pub bc: &'a BcFun<'a>,
    pub mesh: Vec<f64>,
    pub guess: Vec<Vector>,
    pub tol: f64,
    pub hook: Option<&'a RewriteHook<'a>>,
    pub align: Option<&'a AlignFun<'a>>,
    pub max_nodes: usize,
    pub max_newton: usize,
    pub max_rounds: usize,
}

impl<'a> BvpSpec<'a> {
    pub fn new(fun: &'a OdeFun<'a>, bc: &'a BcFun<'a>, mesh: Vec<f64>, guess: Vec<Vector>) -> Self {
        Self {
            fun,
            bc,
            mesh,
            guess,
            tol: 1e-3,
            hook: None,
            align: None,
            max_nodes: 2000,
            max_newton: 40,
            max_rounds: 40,
        }
    }

    pub fn tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_hook(mut self, hook: &'a RewriteHook<'a>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn with_align(mut self, align: &'a AlignFun<'a>) -> Self {
        self.align = Some(align);
        self
    }

    pub fn max_nodes(mut self, n: usize) -> Self {
        self.max_nodes = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteEvent {
    pub round: usize,
    pub node: usize,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct BvpSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vector>,
    pub f: Vec<Vector>,
    /// Right endpoint of each interval expressed in its left node's chart,
    /// with its derivative.
    pub right: Vec<(Vector, Vector)>,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub bc_residual: f64,
    pub newton_iterations: Vec<usize>,
    pub rewrites: Vec<RewriteEvent>,
}

impl BvpSolution {
    /// C¹ cubic interpolant of the collocation solution.
    pub fn eval(&self, t: f64) -> Result<Vector> {
        let n = self.t.len();
        let (lo, hi) = (self.t[0], self.t[n - 1]);
        if !(t >= lo && t <= hi) {
            return Err(Error::Range { t, lo, hi });
        }
        let pos = self.t.partition_point(|&s| s < t);
        if pos < n && self.t[pos] == t {
            return Ok(self.y[pos].clone());
        }
        let j = pos.saturating_sub(1).min(n - 2);
        let h = self.t[j + 1] - self.t[j];
        let theta = (t - self.t[j]) / h;
        let (yb, fb) = &self.right[j];
        Ok(hermite(&self.y[j], &self.f[j], yb, fb, h, theta).0)
    }

    pub fn first(&self) -> &Vector {
        &self.y[0]
    }

    pub fn last(&self) -> &Vector {
        self.y.last().expect("non-empty mesh")
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Cubic Hermite value and time derivative at `theta ∈ [0, 1]`.
fn hermite(ya: &Vector, fa: &Vector, yb: &Vector, fb: &Vector, h: f64, theta: f64) -> (Vector, Vector) {
    let s = theta;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let d00 = 6.0 * s2 - 6.0 * s;
    let d10 = 3.0 * s2 - 4.0 * s + 1.0;
    let d01 = -6.0 * s2 + 6.0 * s;
    let d11 = 3.0 * s2 - 2.0 * s;
    let y = ya * h00 + fa * (h * h10) + yb * h01 + fb * (h * h11);
    let dy = (ya * d00 + yb * d01) / h + fa * d10 + fb * d11;
    (y, dy)
}

struct Grid {
    t: Vec<f64>,
    y: Vec<Vector>,
}

struct Evaluated {
    f: Vec<Vector>,
    right: Vec<Option<Vector>>,
    f_right: Vec<Vector>,
    y_mid: Vec<Vector>,
    f_mid: Vec<Vector>,
    colloc: Vec<Vector>,
    bc: Vector,
}

fn evaluate(spec: &BvpSpec, g: &Grid) -> Evaluated {
    let m = g.t.len();
    let f: Vec<Vector> = (0..m).into_par_iter().map(|j| (spec.fun)(g.t[j], &g.y[j])).collect();
    let per: Vec<(Option<Vector>, Vector, Vector, Vector, Vector)> = (0..m - 1)
        .into_par_iter()
        .map(|j| {
            let h = g.t[j + 1] - g.t[j];
            let right = spec.align.and_then(|al| al(&g.y[j], &g.y[j + 1]));
            let (yb, fb) = match &right {
                Some(r) => (r.clone(), (spec.fun)(g.t[j + 1], r)),
                None => (g.y[j + 1].clone(), f[j + 1].clone()),
            };
            let ya = &g.y[j];
            let fa = &f[j];
            let ym = (ya + &yb) * 0.5 - (&fb - fa) * (h / 8.0);
            let fm = (spec.fun)(g.t[j] + 0.5 * h, &ym);
            let r = &yb - ya - (fa + &fm * 4.0 + &fb) * (h / 6.0);
            (right, fb, ym, fm, r)
        })
        .collect();
    let mut ev = Evaluated {
        f,
        right: Vec::with_capacity(m - 1),
        f_right: Vec::with_capacity(m - 1),
        y_mid: Vec::with_capacity(m - 1),
        f_mid: Vec::with_capacity(m - 1),
        colloc: Vec::with_capacity(m - 1),
        bc: (spec.bc)(&g.y[0], &g.y[m - 1]),
    };
    for (right, fb, ym, fm, r) in per {
        ev.right.push(right);
        ev.f_right.push(fb);
        ev.y_mid.push(ym);
        ev.f_mid.push(fm);
        ev.colloc.push(r);
    }
    ev
}

fn stacked(ev: &Evaluated, left_rows: &[usize], right_rows: &[usize], mixed: bool) -> Vector {
    let n = ev.bc.len();
    let m1 = ev.colloc.len();
    let mut out = Vector::zeros(n * (m1 + 1));
    if mixed {
        for (j, r) in ev.colloc.iter().enumerate() {
            out.rows_mut(j * n, n).copy_from(r);
        }
        out.rows_mut(m1 * n, n).copy_from(&ev.bc);
        return out;
    }
    let ka = left_rows.len();
    for (k, &row) in left_rows.iter().enumerate() {
        out[k] = ev.bc[row];
    }
    for (j, r) in ev.colloc.iter().enumerate() {
        out.rows_mut(ka + j * n, n).copy_from(r);
    }
    for (k, &row) in right_rows.iter().enumerate() {
        out[ka + m1 * n + k] = ev.bc[row];
    }
    out
}

fn fd_jac<F: Fn(&Vector) -> Vector>(f: F, x: &Vector, fx: &Vector) -> Mat {
    crate::linalg::fd_jacobian(f, x, fx)
}

fn converged(spec: &BvpSpec, g: &Grid, ev: &Evaluated) -> bool {
    let tol = spec.tol;
    for j in 0..ev.colloc.len() {
        let h = g.t[j + 1] - g.t[j];
        let bound = 2.0 / 3.0 * h * 5e-2 * tol;
        for i in 0..ev.colloc[j].len() {
            if ev.colloc[j][i].abs() >= bound * (1.0 + ev.f_mid[j][i].abs()) {
                return false;
            }
        }
    }
    ev.bc.iter().all(|r| r.abs() < 5e-2 * tol)
}

/// Splits boundary rows into those depending only on `y(a)` and only on `y(b)`.
fn classify_bc(spec: &BvpSpec, ya: &Vector, yb: &Vector, bc0: &Vector) -> (Vec<usize>, Vec<usize>, bool) {
    let n = ya.len();
    let ja = fd_jac(|x| (spec.bc)(x, yb), ya, bc0);
    let jb = fd_jac(|x| (spec.bc)(ya, x), yb, bc0);
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut mixed = false;
    for r in 0..bc0.len() {
        let da = (0..n).any(|c| ja[(r, c)] != 0.0);
        let db = (0..n).any(|c| jb[(r, c)] != 0.0);
        match (da, db) {
            (true, true) => mixed = true,
            (false, true) => right.push(r),
            _ => left.push(r),
        }
    }
    (left, right, mixed)
}

enum Factored {
    Banded(BandedLu),
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factored {
    fn solve(&self, b: &Vector) -> Result<Vector> {
        match self {
            Factored::Banded(lu) => Ok(lu.solve(b)),
            Factored::Dense(lu) => lu.solve(b).ok_or(Error::Singular),
        }
    }
}

fn jacobian(
    spec: &BvpSpec,
    g: &Grid,
    ev: &Evaluated,
    left_rows: &[usize],
    right_rows: &[usize],
    mixed: bool,
) -> Result<Factored> {
    let m = g.t.len();
    let n = g.y[0].len();
    let node_jac: Vec<Mat> = (0..m)
        .into_par_iter()
        .map(|j| fd_jac(|x| (spec.fun)(g.t[j], x), &g.y[j], &ev.f[j]))
        .collect();
    let blocks: Vec<(Mat, Mat)> = (0..m - 1)
        .into_par_iter()
        .map(|j| {
            let h = g.t[j + 1] - g.t[j];
            let tm = g.t[j] + 0.5 * h;
            let jm = fd_jac(|x| (spec.fun)(tm, x), &ev.y_mid[j], &ev.f_mid[j]);
            let ja = &node_jac[j];
            let id = Mat::identity(n, n);
            let a = -&id - (ja + &jm * 2.0) * (h / 6.0) - (&jm * ja) * (h * h / 12.0);
            let b = match &ev.right[j] {
                None => {
                    let jb = &node_jac[j + 1];
                    &id - (jb + &jm * 2.0) * (h / 6.0) + (&jm * jb) * (h * h / 12.0)
                }
                Some(yb) => {
                    let al = spec.align.expect("aligned interval without align map");
                    let yref = &g.y[j];
                    let tb = g.t[j + 1];
                    let jb = fd_jac(|x| (spec.fun)(tb, x), yb, &ev.f_right[j]);
                    let jal = fd_jac(
                        |x| al(yref, x).unwrap_or_else(|| x.clone()),
                        &g.y[j + 1],
                        yb,
                    );
                    (&id - (&jb + &jm * 2.0) * (h / 6.0) + (&jm * &jb) * (h * h / 12.0)) * jal
                }
            };
            (a, b)
        })
        .collect();
    let (ya, yb) = (&g.y[0], &g.y[m - 1]);
    let bca = fd_jac(|x| (spec.bc)(x, yb), ya, &ev.bc);
    let bcb = fd_jac(|x| (spec.bc)(ya, x), yb, &ev.bc);
    let size = n * m;

    if mixed {
        let mut dense = DMatrix::zeros(size, size);
        for (j, (a, b)) in blocks.iter().enumerate() {
            dense.view_mut((j * n, j * n), (n, n)).copy_from(a);
            dense.view_mut((j * n, (j + 1) * n), (n, n)).copy_from(b);
        }
        let r0 = (m - 1) * n;
        dense.view_mut((r0, 0), (n, n)).copy_from(&bca);
        dense.view_mut((r0, (m - 1) * n), (n, n)).copy_from(&bcb);
        let lu = dense.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        return Ok(Factored::Dense(lu));
    }

    let ka = left_rows.len();
    let kl = ka + n - 1;
    let ku = (2 * n - 1 - ka).max(n - 1);
    let mut band = BandedLu::zeros(size, kl, ku);
    for (k, &row) in left_rows.iter().enumerate() {
        for c in 0..n {
            band.set(k, c, bca[(row, c)]);
        }
    }
    for (j, (a, b)) in blocks.iter().enumerate() {
        let r0 = ka + j * n;
        for i in 0..n {
            for c in 0..n {
                band.set(r0 + i, j * n + c, a[(i, c)]);
                band.set(r0 + i, (j + 1) * n + c, b[(i, c)]);
            }
        }
    }
    let r0 = ka + (m - 1) * n;
    for (k, &row) in right_rows.iter().enumerate() {
        for c in 0..n {
            band.set(r0 + k, (m - 1) * n + c, bcb[(row, c)]);
        }
    }
    band.factor()?;
    Ok(Factored::Banded(band))
}

fn newton(spec: &BvpSpec, g: &mut Grid) -> Result<usize> {
    let m = g.t.len();
    let n = g.y[0].len();
    let ev0 = evaluate(spec, g);
    let (left_rows, right_rows, mixed) = classify_bc(spec, &g.y[0], &g.y[m - 1], &ev0.bc);
    let mut ev = ev0;
    let mut iters = 0;
    loop {
        if converged(spec, g, &ev) {
            return Ok(iters);
        }
        if iters >= spec.max_newton {
            let r = stacked(&ev, &left_rows, &right_rows, mixed).amax();
            return Err(Error::Convergence { residual: r });
        }
        let res = stacked(&ev, &left_rows, &right_rows, mixed);
        let merit = res.norm_squared();
        let lu = jacobian(spec, g, &ev, &left_rows, &right_rows, mixed)?;
        let step = lu.solve(&res)?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut best: Option<(f64, Grid, Evaluated)> = None;
        for _ in 0..12 {
            let trial = Grid {
                t: g.t.clone(),
                y: (0..m).map(|j| &g.y[j] - step.rows(j * n, n) * alpha).collect(),
            };
            if trial.y.iter().all(|y| y.iter().all(|v| v.is_finite())) {
                let ev_t = evaluate(spec, &trial);
                let finite = ev_t.colloc.iter().all(|r| r.iter().all(|v| v.is_finite()))
                    && ev_t.bc.iter().all(|v| v.is_finite());
                if finite {
                    let merit_t = stacked(&ev_t, &left_rows, &right_rows, mixed).norm_squared();
                    if merit_t <= (1.0 - 2e-4 * alpha) * merit {
                        accepted = Some((trial, ev_t));
                        break;
                    }
                    if best.as_ref().map_or(true, |b| merit_t < b.0) {
                        best = Some((merit_t, trial, ev_t));
                    }
                }
            }
            alpha *= 0.5;
        }
        let (g_new, ev_new) = match accepted {
            Some(x) => x,
            None => match best {
                Some((mt, gt, et)) if mt < merit => (gt, et),
                _ => return Err(Error::Convergence { residual: res.amax() }),
            },
        };
        *g = g_new;
        ev = ev_new;
        iters += 1;
    }
}

const LOBATTO: [f64; 3] = [0.5 - 0.218_217_890_235_992_38, 0.5, 0.5 + 0.218_217_890_235_992_38];

fn interval_residuals(spec: &BvpSpec, g: &Grid, ev: &Evaluated) -> Vec<f64> {
    (0..g.t.len() - 1)
        .into_par_iter()
        .map(|j| {
            let h = g.t[j + 1] - g.t[j];
            let yb = ev.right[j].as_ref().unwrap_or(&g.y[j + 1]);
            let mut worst = 0.0f64;
            for &th in &LOBATTO {
                let (s, ds) = hermite(&g.y[j], &ev.f[j], yb, &ev.f_right[j], h, th);
                let fs = (spec.fun)(g.t[j] + th * h, &s);
                for i in 0..s.len() {
                    let r = (ds[i] - fs[i]).abs() / (1.0 + fs[i].abs());
                    worst = worst.max(r);
                }
            }
            worst
        })
        .collect()
}

/// Per-interval scaled max-norm defect of the cubic interpolant.
pub fn residual_estimate(sol: &BvpSolution, spec: &BvpSpec) -> Vec<f64> {
    let g = Grid { t: sol.t.clone(), y: sol.y.clone() };
    let ev = evaluate(spec, &g);
    interval_residuals(spec, &g, &ev)
}

fn refine(g: &Grid, ev: &Evaluated, res: &[f64], tol: f64) -> Grid {
    let m = g.t.len();
    let mut order: Vec<usize> = (0..m - 1).filter(|&j| res[j] > tol).collect();
    order.sort_by(|&a, &b| res[b].total_cmp(&res[a]));
    let mut inserts = vec![0usize; m - 1];
    let mut budget = m;
    for j in order {
        let want = if res[j] > 100.0 * tol { 2 } else { 1 };
        let k = want.min(budget);
        if k == 0 {
            break;
        }
        inserts[j] = k;
        budget -= k;
    }
    let mut t = Vec::with_capacity(2 * m);
    let mut y = Vec::with_capacity(2 * m);
    for j in 0..m - 1 {
        t.push(g.t[j]);
        y.push(g.y[j].clone());
        let k = inserts[j];
        if k > 0 {
            let h = g.t[j + 1] - g.t[j];
            let yb = ev.right[j].as_ref().unwrap_or(&g.y[j + 1]);
            for q in 1..=k {
                let th = q as f64 / (k + 1) as f64;
                let (s, _) = hermite(&g.y[j], &ev.f[j], yb, &ev.f_right[j], h, th);
                t.push(g.t[j] + th * h);
                y.push(s);
            }
        }
    }
    t.push(g.t[m - 1]);
    y.push(g.y[m - 1].clone());
    Grid { t, y }
}

fn validate(spec: &BvpSpec) -> Result<usize> {
    let m = spec.mesh.len();
    if m < 2 {
        return Err(Error::Input("mesh needs at least two nodes".into()));
    }
    if spec.guess.len() != m {
        return Err(Error::Dimension { expected: m, got: spec.guess.len() });
    }
    if !(spec.tol > 0.0) {
        return Err(Error::Input("tolerance must be positive".into()));
    }
    let increasing = spec.mesh.windows(2).all(|w| w[1] > w[0]);
    if !increasing {
        return Err(Error::Input("mesh must be strictly increasing".into()));
    }
    let n = spec.guess[0].len();
    for y in &spec.guess {
        if y.len() != n {
            return Err(Error::Dimension { expected: n, got: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite initial guess".into()));
        }
    }
    let bc = (spec.bc)(&spec.guess[0], &spec.guess[m - 1]);
    if bc.len() != n {
        return Err(Error::Dimension { expected: n, got: bc.len() });
    }
    Ok(n)
}

/// Solves the boundary value problem described by `spec`.
pub fn solve(spec: &BvpSpec) -> Result<BvpSolution> {
    validate(spec)?;
    let mut g = Grid { t: spec.mesh.clone(), y: spec.guess.clone() };
    let mut newton_iterations = Vec::new();
    let mut rewrites = Vec::new();
    let mut consecutive_rewrites = 0usize;
    let mut round = 0usize;
    loop {
        round += 1;
        let its = newton(spec, &mut g)?;
        newton_iterations.push(its);

        if let Some(hook) = spec.hook {
            let changed: Vec<(usize, Vector)> = (0..g.t.len())
                .into_par_iter()
                .filter_map(|j| hook(g.t[j], &g.y[j]).map(|y| (j, y)))
                .collect();
            if !changed.is_empty() {
                consecutive_rewrites += 1;
                if consecutive_rewrites > REWRITE_CAP {
                    return Err(Error::RewriteCycle { rounds: consecutive_rewrites - 1 });
                }
                for (j, y) in changed {
                    rewrites.push(RewriteEvent { round, node: j, t: g.t[j] });
                    g.y[j] = y;
                }
                continue;
            }
            consecutive_rewrites = 0;
        }

        let ev = evaluate(spec, &g);
        let res = interval_residuals(spec, &g, &ev);
        let max_res = res.iter().cloned().fold(0.0, f64::max);
        if max_res <= spec.tol {
            let bc_res = ev.bc.amax();
            let right = ev
                .right
                .into_iter()
                .zip(ev.f_right)
                .enumerate()
                .map(|(j, (r, fr))| (r.unwrap_or_else(|| g.y[j + 1].clone()), fr))
                .collect();
            return Ok(BvpSolution {
                t: g.t,
                y: g.y,
                f: ev.f,
                right,
                residuals: res,
                max_residual: max_res,
                bc_residual: bc_res,
                newton_iterations,
                rewrites,
            });
        }
        if round >= spec.max_rounds {
            return Err(Error::MeshBudget { max_nodes: g.t.len(), residual: max_res });
        }
        let refined = refine(&g, &ev, &res, spec.tol);
        if refined.t.len() > spec.max_nodes {
            return Err(Error::MeshBudget { max_nodes: spec.max_nodes, residual: max_res });
        }
        g = refined;
    }
}

/// Uniform mesh of `m` nodes on `[a, b]`.
pub fn uniform_mesh(a: f64, b: f64, m: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..m).map(|i| a + (b - a) * i as f64 / (m - 1) as f64).collect();
    t[m - 1] = b;
    t
}
