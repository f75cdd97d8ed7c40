//! Points and trajectories on the inertial manifold via finite-horizon
//! boundary value problems, and the truncation-horizon bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::householder::{decouple, BlockD, ReflectorStack};
use crate::linalg::{eig_real_parts, Mat, Vector};
use crate::ode_bvp::{self, uniform_mesh, BvpSolution, BvpSpec};
use crate::ode_ivp::{dense_eval, integrate, HookEvent, IvpSpec};
use crate::problems::ProblemDef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Exact,
    Estimated,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProvenance {
    pub k: Source,
    pub alpha: Source,
    pub beta: Source,
    pub l: Source,
}

/// Dichotomy constants `K, α, β, L`, the weight `σ` and the derived `κ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapData {
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub l: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub provenance: GapProvenance,
}

fn kappa_of(k: f64, alpha: f64, beta: f64, l: f64, sigma: f64) -> f64 {
    if sigma > alpha && beta > sigma {
        (k * l / (sigma - alpha)).max(k * l / (beta - sigma))
    } else {
        f64::INFINITY
    }
}

impl GapData {
    pub fn new(k: f64, alpha: f64, beta: f64, l: f64, sigma: f64, provenance: GapProvenance) -> Result<Self> {
        if ![k, alpha, beta, l, sigma].iter().all(|v| v.is_finite()) {
            return Err(Error::Input("gap constants must be finite".into()));
        }
        if k < 1.0 || l < 0.0 {
            return Err(Error::Input(format!("need K ≥ 1 and L ≥ 0, got K = {k}, L = {l}")));
        }
        let kappa = kappa_of(k, alpha, beta, l, sigma);
        Ok(Self { k, alpha, beta, l, sigma, kappa, provenance })
    }

    /// Known constants with `σ = (α + β)/2`.
    pub fn exact(k: f64, alpha: f64, beta: f64, l: f64) -> Result<Self> {
        let p = GapProvenance { k: Source::Exact, alpha: Source::Exact, beta: Source::Exact, l: Source::Exact };
        Self::new(k, alpha, beta, l, 0.5 * (alpha + beta), p)
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut g = self.clone();
        g.sigma = sigma;
        g.kappa = kappa_of(g.k, g.alpha, g.beta, g.l, sigma);
        g
    }

    /// Gap condition, `κ < 1` and `σ ∈ (α + KL, β − KL)`.
    pub fn gap_ok(&self) -> bool {
        let kl = self.k * self.l;
        self.alpha < self.beta
            && self.l < (self.beta - self.alpha) / (2.0 * self.k)
            && self.kappa < 1.0
            && self.sigma > self.alpha + kl
            && self.sigma < self.beta - kl
    }

    /// `C = e^κ κ / (1 − κ)`.
    pub fn bound_constant(&self) -> Result<f64> {
        if !(self.kappa < 1.0) {
            return Err(Error::GapViolation { kappa: self.kappa });
        }
        Ok(self.kappa.exp() * self.kappa / (1.0 - self.kappa))
    }
}

/// `C ‖x₀‖ e^{(α−σ)(T−t₀)}`.
pub fn truncation_bound(g: &GapData, x0_norm: f64, t0: f64, horizon_end: f64) -> Result<f64> {
    let c = g.bound_constant()?;
    Ok(c * x0_norm * ((g.alpha - g.sigma) * (horizon_end - t0)).exp())
}

/// Smallest `T ≥ t₀` with `truncation_bound ≤ tol`.
pub fn t_lower_bound(g: &GapData, tol: f64, x0_norm: f64, t0: f64) -> Result<f64> {
    let c = g.bound_constant()?;
    if !(tol > 0.0) || x0_norm < 0.0 {
        return Err(Error::Input("need tol > 0 and ‖x₀‖ ≥ 0".into()));
    }
    if x0_norm == 0.0 {
        return Ok(t0);
    }
    let t = t0 + (tol / (c * x0_norm)).ln() / (g.alpha - g.sigma);
    Ok(t.max(t0))
}

/// The decoupled system in the unknown `s = (y, x, ŵ_1, …, ŵ_p)`.
pub struct Combined<'a> {
    pub problem: &'a dyn ProblemDef,
    pub d: usize,
    pub p: usize,
}

impl<'a> Combined<'a> {
    pub fn new(problem: &'a dyn ProblemDef, p: usize) -> Result<Self> {
        let d = problem.dim();
        if p == 0 || p >= d {
            return Err(Error::Input(format!("need 1 ≤ p < d, got p = {p}, d = {d}")));
        }
        Ok(Self { problem, d, p })
    }

    pub fn len(&self) -> usize {
        self.d + ReflectorStack::flat_len(self.d, self.p)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, z: &Vector, stack: &ReflectorStack) -> Vector {
        let mut s = Vector::zeros(self.len());
        s.rows_mut(0, self.d).copy_from(z);
        s.rows_mut(self.d, self.len() - self.d).copy_from_slice(&stack.flat());
        s
    }

    pub fn stack(&self, s: &Vector) -> Result<ReflectorStack> {
        ReflectorStack::from_flat(self.d, self.p, &s.as_slice()[self.d..], vec![1.0; self.p])
    }

    pub fn z(&self, s: &Vector) -> Vector {
        s.rows(0, self.d).into_owned()
    }

    pub fn y(&self, s: &Vector) -> Vector {
        s.rows(0, self.p).into_owned()
    }

    pub fn x(&self, s: &Vector) -> Vector {
        s.rows(self.p, self.d - self.p).into_owned()
    }

    /// Original coordinates `u = Q z`.
    pub fn u(&self, s: &Vector) -> Result<Vector> {
        Ok(self.stack(s)?.apply_q(&self.z(s)))
    }

    /// `ż = D z + Qᵀ(f(u) − C u)` and `ŵ̇`, with `C = f′(u)` along the state itself.
    pub fn rhs(&self, t: f64, s: &Vector) -> Vector {
        let stack = match self.stack(s) {
            Ok(st) => st,
            Err(_) => return Vector::from_element(self.len(), f64::NAN),
        };
        let z = self.z(s);
        let u = stack.apply_q(&z);
        let c = self.problem.jacobian(t, &u);
        let dec = match decouple(&stack, &c) {
            Ok(d) => d,
            Err(_) => return Vector::from_element(self.len(), f64::NAN),
        };
        let nl = self.problem.nonlinearity(t, &u, &c);
        let zdot = dec.d.assemble() * &z + stack.apply_qt(&nl);
        let mut out = Vector::zeros(self.len());
        out.rows_mut(0, self.d).copy_from(&zdot);
        let mut off = self.d;
        for w in &dec.dwhat {
            out.rows_mut(off, w.len()).copy_from(w);
            off += w.len();
        }
        out
    }

    fn rechart(&self, s: &Vector, old: &ReflectorStack, new: &ReflectorStack) -> Vector {
        let z = old.transfer(new, &self.z(s));
        self.pack(&z, new)
    }

    /// Canonical charts with `z` carried along, or `None` if already canonical.
    pub fn canonicalize(&self, s: &Vector) -> Option<Vector> {
        let old = self.stack(s).ok()?;
        let new = old.canonicalize()?;
        Some(self.rechart(s, &old, &new))
    }

    /// `s` in the charts nearest to `reference`, or `None` if already there.
    pub fn align(&self, reference: &ReflectorStack, s: &Vector) -> Option<Vector> {
        let old = self.stack(s).ok()?;
        let new = old.align_to(reference)?;
        Some(self.rechart(s, &old, &new))
    }
}

/// Continues `σ` along a sequence of frames so that `σ_i q_i` varies continuously.
pub fn track_sigma(start: &[f64], frames: &[ReflectorStack]) -> Vec<f64> {
    let mut sigma = start.to_vec();
    for pair in frames.windows(2) {
        let (qa, qb) = (pair[0].assemble_q(), pair[1].assemble_q());
        for (i, s) in sigma.iter_mut().enumerate() {
            if qa.column(i).dot(&qb.column(i)) < 0.0 {
                *s = -*s;
            }
        }
    }
    sigma
}

#[derive(Debug, Clone)]
pub struct ManifoldQuery {
    pub t: f64,
    pub y0: Vector,
    pub horizon: f64,
    pub what_boundary: Vec<Vector>,
    pub p: usize,
    pub bvp_tol: f64,
    pub ivp_rtol: f64,
    pub ivp_atol: f64,
    pub max_nodes: usize,
    /// Chart in which `y0` is given; defaults to the chart of the initial guess.
    pub end_chart: Option<ReflectorStack>,
    /// Mesh and states used instead of the forward-integrated guess.
    pub warm_start: Option<(Vec<f64>, Vec<Vector>)>,
}

impl ManifoldQuery {
    /// Query with `ŵ_{i,−T} = 0`, BVP tolerance `1e−3`.
    pub fn new(t: f64, y0: Vector, horizon: f64, d: usize) -> Self {
        let p = y0.len();
        Self {
            t,
            y0,
            horizon,
            what_boundary: (1..=p).map(|i| Vector::zeros(d.saturating_sub(i))).collect(),
            p,
            bvp_tol: 1e-3,
            ivp_rtol: 1e-6,
            ivp_atol: 1e-9,
            max_nodes: 2000,
            end_chart: None,
            warm_start: None,
        }
    }

    /// Sets `ŵ_{1,−T}` to `value · e₁` and leaves the rest at zero.
    pub fn with_first_what(mut self, value: f64) -> Self {
        if let Some(w) = self.what_boundary.first_mut() {
            if !w.is_empty() {
                w.fill(0.0);
                w[0] = value;
            }
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct ManifoldPoint {
    pub t: f64,
    pub y: Vector,
    pub x: Vector,
    pub u: Vector,
    pub stack: ReflectorStack,
    /// Slow right-hand side `ẏ` at `t`.
    pub slow_rhs: Vector,
    pub residual: Option<f64>,
    pub bvp_residual: f64,
    pub bc_residual: f64,
    pub nodes: usize,
    pub newton_iterations: Vec<usize>,
    pub rewrites: usize,
    pub chart_switches: usize,
    pub warnings: Vec<String>,
    pub solution: BvpSolution,
}

fn validate_query(sys: &Combined, q: &ManifoldQuery) -> Result<ReflectorStack> {
    if q.p != sys.p {
        return Err(Error::Dimension { expected: sys.p, got: q.p });
    }
    if q.y0.len() != q.p {
        return Err(Error::Dimension { expected: q.p, got: q.y0.len() });
    }
    if !(q.horizon > 0.0) {
        return Err(Error::Input(format!("horizon must be positive, got {}", q.horizon)));
    }
    if !(q.bvp_tol > 0.0 && q.ivp_rtol > 0.0 && q.ivp_atol > 0.0) {
        return Err(Error::Input("tolerances must be positive".into()));
    }
    if q.y0.iter().any(|v| !v.is_finite()) || !q.t.is_finite() {
        return Err(Error::Input("non-finite query".into()));
    }
    ReflectorStack::new(sys.d, q.what_boundary.clone(), vec![1.0; q.p])
}

/// Forward-integrated guess on `[t − T, t]` from `(y0, 0, ŵ_{−T})`.
fn ivp_guess(sys: &Combined, q: &ManifoldQuery, left: &ReflectorStack) -> Result<(Vec<f64>, Vec<Vector>)> {
    let t0 = q.t - q.horizon;
    let mut z0 = Vector::zeros(sys.d);
    z0.rows_mut(0, sys.p).copy_from(&q.y0);
    let s0 = sys.pack(&z0, left);
    let rhs = |t: f64, s: &Vector| sys.rhs(t, s);
    let hook = |_t: f64, s: &Vector| sys.canonicalize(s);
    let spec = IvpSpec::new(&rhs, t0, q.t, s0).tolerances(q.ivp_rtol, q.ivp_atol).with_hook(&hook);
    let sol = integrate(&spec)?;
    const MIN_NODES: usize = 8;
    let cap = (q.max_nodes / 4).max(MIN_NODES);
    if sol.t.len() < MIN_NODES {
        let mesh = uniform_mesh(t0, q.t, MIN_NODES);
        let ys = mesh.iter().map(|&t| dense_eval(&sol, t)).collect::<Result<Vec<_>>>()?;
        return Ok((mesh, ys));
    }
    if sol.t.len() > cap {
        let n = sol.t.len();
        let idx: Vec<usize> = (0..cap).map(|i| i * (n - 1) / (cap - 1)).collect();
        return Ok((idx.iter().map(|&i| sol.t[i]).collect(), idx.iter().map(|&i| sol.y[i].clone()).collect()));
    }
    Ok((sol.t, sol.y))
}

/// The point with slow coordinate `y0` at time `t` on the
/// manifold approximated with horizon `T`.
pub fn manifold_point(problem: &dyn ProblemDef, q: &ManifoldQuery) -> Result<ManifoldPoint> {
    let sys = Combined::new(problem, q.p)?;
    let left = validate_query(&sys, q)?;
    let mut warnings = Vec::new();
    if let Some(g) = problem.gap_data() {
        if !g.gap_ok() {
            warnings.push(format!("gap condition not satisfied (kappa = {:.4})", g.kappa));
        }
    }

    let (mesh, guess) = match &q.warm_start {
        Some((m, y)) if m.len() >= 2 && m.len() == y.len() => {
            let shift = q.t - m[m.len() - 1];
            let left_t = q.t - q.horizon;
            let scale = q.horizon / (m[m.len() - 1] - m[0]);
            let mesh: Vec<f64> = if (m[0] + shift - left_t).abs() < 1e-12 * q.horizon.max(1.0) {
                m.iter().map(|t| t + shift).collect()
            } else {
                m.iter().map(|t| left_t + (t - m[0]) * scale).collect()
            };
            (mesh, y.clone())
        }
        _ => ivp_guess(&sys, q, &left)?,
    };
    let end_chart = match &q.end_chart {
        Some(c) => c.clone(),
        None => sys.stack(guess.last().expect("non-empty guess"))?,
    };

    let fun = |t: f64, s: &Vector| sys.rhs(t, s);
    let hook = |_t: f64, s: &Vector| sys.canonicalize(s);
    let align = |r: &Vector, s: &Vector| sys.stack(r).ok().and_then(|rs| sys.align(&rs, s));
    let d = sys.d;
    let p = sys.p;
    let target = left.flat();
    let bc = |ya: &Vector, yb: &Vector| {
        let yb = sys.align(&end_chart, yb).unwrap_or_else(|| yb.clone());
        let mut r = Vector::zeros(sys.len());
        r.rows_mut(0, d - p).copy_from(&ya.rows(p, d - p));
        r.rows_mut(d - p, p).copy_from(&(yb.rows(0, p) - &q.y0));
        for (k, w) in target.iter().enumerate() {
            r[d + k] = ya[d + k] - w;
        }
        r
    };
    let mut spec = BvpSpec::new(&fun, &bc, mesh, guess).tol(q.bvp_tol).with_hook(&hook).with_align(&align);
    spec.max_nodes = q.max_nodes;
    let sol = ode_bvp::solve(&spec)?;

    let frames: Vec<ReflectorStack> = sol.y.iter().map(|s| sys.stack(s)).collect::<Result<_>>()?;
    let chart_switches = sol.y.windows(2).filter(|w| align(&w[0], &w[1]).is_some()).count();
    let last = sol.last();
    let fin = sys.align(&end_chart, last).unwrap_or_else(|| last.clone());
    let mut fin_stack = sys.stack(&fin)?;
    let mut chain = frames;
    chain.push(fin_stack.clone());
    fin_stack.set_sigma(track_sigma(&vec![1.0; p], &chain));
    let u = fin_stack.apply_q(&sys.z(&fin));
    let slow = sys.rhs(q.t, &fin).rows(0, p).into_owned();
    Ok(ManifoldPoint {
        t: q.t,
        y: sys.y(&fin),
        x: sys.x(&fin),
        residual: problem.residual(q.t, &u),
        u,
        stack: fin_stack,
        slow_rhs: slow,
        bvp_residual: sol.max_residual,
        bc_residual: sol.bc_residual,
        nodes: sol.len(),
        newton_iterations: sol.newton_iterations.clone(),
        rewrites: sol.rewrites.len(),
        chart_switches,
        warnings,
        solution: sol,
    })
}

/// Invariance defect: evolve the point for `horizon`, re-solve at the
/// later time with the evolved slow coordinate, and compare the fast parts.
pub fn pullback_defect(problem: &dyn ProblemDef, point: &ManifoldPoint, q: &ManifoldQuery, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::Input("pullback horizon must be positive".into()));
    }
    let sys = Combined::new(problem, q.p)?;
    let s0 = sys.pack(&Vector::from_iterator(sys.d, point.y.iter().chain(point.x.iter()).copied()), &point.stack);
    let rhs = |t: f64, s: &Vector| sys.rhs(t, s);
    let hook = |_t: f64, s: &Vector| sys.canonicalize(s);
    let spec = IvpSpec::new(&rhs, point.t, point.t + horizon, s0)
        .tolerances(q.ivp_rtol, q.ivp_atol)
        .with_hook(&hook);
    let evolved = integrate(&spec)?.last().clone();
    let mut later = q.clone();
    later.t = point.t + horizon;
    later.y0 = sys.y(&evolved);
    later.end_chart = Some(sys.stack(&evolved)?);
    later.warm_start = None;
    let resolved = manifold_point(problem, &later)?;
    Ok((sys.x(&evolved) - &resolved.x).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    AdamsBashforth(usize),
}

impl Scheme {
    pub fn order(&self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::AdamsBashforth(k) => *k,
        }
    }
}

/// Adams–Bashforth weights, newest evaluation first.
fn ab_weights(k: usize) -> &'static [f64] {
    match k {
        1 => &[1.0],
        2 => &[1.5, -0.5],
        3 => &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
        _ => &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<Vector>,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub residual: Vec<Option<f64>>,
    pub bvp_residual: Vec<f64>,
    /// Manifold solves spent on each step `n → n+1`.
    pub step_solves: Vec<usize>,
    pub total_solves: usize,
    pub warm_start_failures: usize,
}

/// Explicit time stepping of the inertial form, one manifold
/// solve per step.
pub fn manifold_trajectory(
    problem: &dyn ProblemDef,
    q: &ManifoldQuery,
    dt: f64,
    steps: usize,
    scheme: Scheme,
) -> Result<Trajectory> {
    let k = scheme.order();
    if !(1..=4).contains(&k) {
        return Err(Error::Input(format!("Adams–Bashforth order must be 1..=4, got {k}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Input("time step must be positive".into()));
    }
    let mut out = Trajectory {
        t: Vec::new(),
        y: Vec::new(),
        x: Vec::new(),
        u: Vec::new(),
        residual: Vec::new(),
        bvp_residual: Vec::new(),
        step_solves: Vec::new(),
        total_solves: 0,
        warm_start_failures: 0,
    };
    let mut history: Vec<Vector> = Vec::new();
    let mut query = q.clone();
    let mut y = q.y0.clone();
    for n in 0..=steps {
        let tn = q.t + n as f64 * dt;
        query.t = tn;
        query.y0 = y.clone();
        let point = match manifold_point(problem, &query) {
            Ok(pt) => pt,
            Err(e) if query.warm_start.is_some() => {
                out.warm_start_failures += 1;
                let mut cold = query.clone();
                cold.warm_start = None;
                manifold_point(problem, &cold).map_err(|_| e)?
            }
            Err(e) => return Err(e),
        };
        out.total_solves += 1;
        if n > 0 {
            out.step_solves.push(1);
        }
        out.t.push(tn);
        out.y.push(point.y.clone());
        out.x.push(point.x.clone());
        out.u.push(point.u.clone());
        out.residual.push(point.residual);
        out.bvp_residual.push(point.bvp_residual);
        if n == steps {
            break;
        }
        history.insert(0, point.slow_rhs.clone());
        history.truncate(k);
        let weights = ab_weights(history.len());
        let mut incr = Vector::zeros(y.len());
        for (w, g) in weights.iter().zip(&history) {
            incr += g * *w;
        }
        y = &point.y + incr * dt;
        query.end_chart = Some(point.stack.clone());
        query.warm_start = Some((point.solution.t.clone(), point.solution.y.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub horizon: f64,
    pub what_boundary: Vec<Vector>,
    pub result: std::result::Result<SweepValue, Error>,
}

#[derive(Debug, Clone)]
pub struct SweepValue {
    pub residual: Option<f64>,
    pub defect: Option<f64>,
    pub point: ManifoldPoint,
}

impl SweepValue {
    /// Problem residual if available, otherwise the pullback defect.
    pub fn metric(&self) -> Option<f64> {
        self.residual.or(self.defect)
    }
}

/// One manifold solve per query, in parallel; rows keep input order.
pub fn sweep(problem: &dyn ProblemDef, queries: &[ManifoldQuery], defect_horizon: Option<f64>) -> Vec<SweepRow> {
    queries
        .par_iter()
        .map(|q| {
            let result = manifold_point(problem, q).and_then(|point| {
                let defect = match defect_horizon {
                    Some(h) if point.residual.is_none() => Some(pullback_defect(problem, &point, q, h)?),
                    _ => None,
                };
                Ok(SweepValue { residual: point.residual, defect, point })
            });
            SweepRow { horizon: q.horizon, what_boundary: q.what_boundary.clone(), result }
        })
        .collect()
}

/// Horizon sweep of `base`.
pub fn sweep_t(problem: &dyn ProblemDef, base: &ManifoldQuery, horizons: &[f64], defect_horizon: Option<f64>) -> Vec<SweepRow> {
    let queries: Vec<ManifoldQuery> = horizons
        .iter()
        .map(|&h| {
            let mut q = base.clone();
            q.horizon = h;
            q
        })
        .collect();
    sweep(problem, &queries, defect_horizon)
}

/// First horizon after which the metric improves by less than 10% per unit `T`.
pub fn knee(rows: &[SweepRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().ok().and_then(|v| v.metric()).map(|m| (r.horizon, m)))
        .collect();
    knee_of(&pts)
}

/// [`knee`] on `(T, metric)` pairs sorted by `T`.
pub fn knee_of(pts: &[(f64, f64)]) -> Option<f64> {
    pts.windows(2)
        .find(|w| {
            let (t0, r0) = w[0];
            let (t1, r1) = w[1];
            r0 <= 0.0 || (r0 - r1) / r0 / (t1 - t0) < 0.1
        })
        .map(|w| w[0].0)
}

#[derive(Debug, Clone)]
pub struct DecoupleSample {
    pub t: f64,
    pub u: Vector,
    pub stack: ReflectorStack,
    pub d: BlockD,
    pub leakage: f64,
}

#[derive(Debug, Clone)]
pub struct DecoupleRun {
    pub p: usize,
    pub samples: Vec<DecoupleSample>,
    pub events: Vec<HookEvent>,
    /// Time averages of `diag(D)` over the whole span.
    pub averages: Vec<f64>,
}

/// Integrates `u̇ = f(u, t)` together with the reflector ODEs driven by
/// `C = f′(u, t)`, sampling `D` on `grid` (or at every accepted step).
pub fn decouple_trajectory(
    problem: &dyn ProblemDef,
    u0: &Vector,
    stack0: &ReflectorStack,
    t0: f64,
    t1: f64,
    tolerances: (f64, f64),
    grid: Option<&[f64]>,
) -> Result<DecoupleRun> {
    let d = problem.dim();
    if u0.len() != d || stack0.d() != d {
        return Err(Error::Dimension { expected: d, got: u0.len() });
    }
    if !(t1 > t0) {
        return Err(Error::Input("need t1 > t0".into()));
    }
    let p = stack0.p();
    let m = ReflectorStack::flat_len(d, p);
    let unpack = |s: &Vector| ReflectorStack::from_flat(d, p, &s.as_slice()[d..d + m], vec![1.0; p]);
    let rhs = |t: f64, s: &Vector| {
        let u = s.rows(0, d).into_owned();
        let Ok(stack) = unpack(s) else {
            return Vector::from_element(s.len(), f64::NAN);
        };
        let c = problem.jacobian(t, &u);
        let Ok(dec) = decouple(&stack, &c) else {
            return Vector::from_element(s.len(), f64::NAN);
        };
        let mut out = Vector::zeros(s.len());
        out.rows_mut(0, d).copy_from(&problem.rhs(t, &u));
        let mut off = d;
        for w in &dec.dwhat {
            out.rows_mut(off, w.len()).copy_from(w);
            off += w.len();
        }
        let full = dec.d.assemble();
        for i in 0..d {
            out[d + m + i] = full[(i, i)];
        }
        out
    };
    let hook = |_t: f64, s: &Vector| {
        let stack = unpack(s).ok()?;
        let canon = stack.canonicalize()?;
        let mut out = s.clone();
        out.rows_mut(d, m).copy_from_slice(&canon.flat());
        Some(out)
    };
    let mut y0 = Vector::zeros(d + m + d);
    y0.rows_mut(0, d).copy_from(u0);
    y0.rows_mut(d, m).copy_from_slice(&stack0.flat());
    let spec = IvpSpec::new(&rhs, t0, t1, y0).tolerances(tolerances.0, tolerances.1).with_hook(&hook);
    let sol = integrate(&spec)?;
    let times: Vec<f64> = match grid {
        Some(g) => g.to_vec(),
        None => sol.t.clone(),
    };
    let mut sigma = stack0.sigma().to_vec();
    let mut prev: Option<ReflectorStack> = Some(stack0.clone());
    let mut samples = Vec::with_capacity(times.len());
    for &t in &times {
        let s = dense_eval(&sol, t)?;
        let mut stack = unpack(&s)?;
        if let Some(pv) = &prev {
            sigma = track_sigma(&sigma, &[pv.clone(), stack.clone()]);
        }
        stack.set_sigma(sigma.clone());
        let u = s.rows(0, d).into_owned();
        let dec = decouple(&stack, &problem.jacobian(t, &u))?;
        let leakage = dec.leakage.max(dec.d.lower_leakage());
        prev = Some(stack.clone());
        samples.push(DecoupleSample { t, u, stack, d: dec.d, leakage });
    }
    let fin = sol.last();
    let averages = (0..d).map(|i| fin[d + m + i] / (t1 - t0)).collect();
    Ok(DecoupleRun { p, samples, events: sol.events.clone(), averages })
}

/// Heuristic dichotomy constants from a decoupled trajectory: `β` from the
/// averaged `diag(D11)`, `α` from the spectrum of the averaged `D22`, `L`
/// from secant slopes of `N` at distance `radius`, and `K = 1`.
pub fn estimate_gapdata(problem: &dyn ProblemDef, run: &DecoupleRun, p: usize, radius: f64) -> Result<GapData> {
    if run.samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if p != run.p {
        return Err(Error::Dimension { expected: run.p, got: p });
    }
    let d = problem.dim();
    let beta = run.averages[..p].iter().cloned().fold(f64::INFINITY, f64::min);
    let q = d - p;
    let mut avg = Mat::zeros(q, q);
    let n = run.samples.len();
    if n == 1 {
        avg = run.samples[0].d.d22.clone();
    } else {
        let span = run.samples[n - 1].t - run.samples[0].t;
        for w in run.samples.windows(2) {
            avg += (&w[0].d.d22 + &w[1].d.d22) * (0.5 * (w[1].t - w[0].t) / span);
        }
    }
    let alpha = eig_real_parts(&avg)?[0];
    let mut l = 0.0f64;
    for s in &run.samples {
        let c = problem.jacobian(s.t, &s.u);
        let base = problem.nonlinearity(s.t, &s.u, &c);
        for i in 0..d {
            for sign in [-1.0, 1.0] {
                let mut v = s.u.clone();
                v[i] += sign * radius;
                let slope = (problem.nonlinearity(s.t, &v, &c) - &base).norm() / radius;
                l = l.max(slope);
            }
        }
    }
    let prov = GapProvenance { k: Source::Default, alpha: Source::Estimated, beta: Source::Estimated, l: Source::Estimated };
    GapData::new(1.0, alpha, beta, l, 0.5 * (alpha + beta), prov)
}

/// Linear stable-manifold truncation `ẋ = diag(A) x`, `ẏ = diag(B) y + C₁₂ x`,
/// `x(t₀) = x₀`, `y(T) = 0`, with closed-form infinite-horizon solution.
#[derive(Debug, Clone)]
pub struct StableTruncation {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c12: Mat,
    pub x0: Vector,
    pub t0: f64,
}

impl StableTruncation {
    /// `φ(t) = (x(t), y(t))` for `y(∞) = 0`.
    pub fn exact(&self, t: f64) -> (Vector, Vector) {
        let x = Vector::from_fn(self.a.len(), |j, _| self.x0[j] * (self.a[j] * (t - self.t0)).exp());
        let y = Vector::from_fn(self.b.len(), |k, _| {
            -(0..self.a.len())
                .map(|j| self.c12[(k, j)] * x[j] / (self.b[k] - self.a[j]))
                .sum::<f64>()
        });
        (x, y)
    }

    /// `φ_T` in closed form.
    pub fn exact_truncated(&self, t: f64, horizon_end: f64) -> (Vector, Vector) {
        let (x, y) = self.exact(t);
        let (_, yt) = self.exact(horizon_end);
        let y = Vector::from_fn(self.b.len(), |k, _| y[k] - (self.b[k] * (t - horizon_end)).exp() * yt[k]);
        (x, y)
    }

    /// Collocation solution of the truncated problem on a uniform mesh of width ≈ `h`.
    pub fn solve(&self, horizon_end: f64, tol: f64, h: f64) -> Result<BvpSolution> {
        let nx = self.a.len();
        let ny = self.b.len();
        let fun = |_t: f64, s: &Vector| {
            let mut out = Vector::zeros(nx + ny);
            for j in 0..nx {
                out[j] = self.a[j] * s[j];
            }
            for k in 0..ny {
                let mut v = self.b[k] * s[nx + k];
                for j in 0..nx {
                    v += self.c12[(k, j)] * s[j];
                }
                out[nx + k] = v;
            }
            out
        };
        let bc = |sa: &Vector, sb: &Vector| {
            Vector::from_fn(nx + ny, |i, _| if i < nx { sa[i] - self.x0[i] } else { sb[i] })
        };
        let m = (((horizon_end - self.t0) / h).ceil() as usize).max(4) + 1;
        let mesh = uniform_mesh(self.t0, horizon_end, m);
        let guess = mesh
            .iter()
            .map(|&t| {
                let (x, y) = self.exact_truncated(t, horizon_end);
                let mut s = Vector::zeros(nx + ny);
                s.rows_mut(0, nx).copy_from(&x);
                s.rows_mut(nx, ny).copy_from(&(y * 0.0));
                s
            })
            .collect();
        let spec = BvpSpec::new(&fun, &bc, mesh, guess).tol(tol);
        ode_bvp::solve(&spec)
    }

    /// `‖φ − φ_T‖_{σ,T}` with `φ_T` from the collocation solution, sampled on
    /// the mesh nodes and interval midpoints.
    pub fn weighted_error(&self, sol: &BvpSolution, sigma: f64) -> Result<f64> {
        let nx = self.a.len();
        let ny = self.b.len();
        let mut worst = 0.0f64;
        let mut times = sol.t.clone();
        times.extend(sol.t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for t in times {
            let s = sol.eval(t)?;
            let (x, y) = self.exact(t);
            let dx = s.rows(0, nx) - x;
            let dy = s.rows(nx, ny) - y;
            let e = (dx.norm_squared() + dy.norm_squared()).sqrt();
            worst = worst.max((-sigma * (t - self.t0)).exp() * e);
        }
        Ok(worst)
    }
}
