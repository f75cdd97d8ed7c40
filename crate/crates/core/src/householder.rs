//! Time-dependent Householder decoupling.
//!
//! A stack of `p` reflectors `Q_i = diag(I_{i−1}, P_i)` with
//! `P_i = I − 2 w_i w_iᵀ / (w_iᵀ w_i)`, `w_i = (1, ŵ_i)`, defines the
//! orthogonal frame `Q = Q_1 ⋯ Q_p`. Rotated coordinates are `z = Qᵀu`
//! ordered as `(y; x)`: the leading `p` components form the slow block.

use crate::error::{Error, Result};
use crate::linalg::{reflect_cols, reflect_rows, Mat, Vector};

/// Slack allowed on `ŵᵀŵ ≤ 1` when validating a stack.
pub const CHART_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectorStack {
    d: usize,
    what: Vec<Vector>,
    sigma: Vec<f64>,
}

/// How a chart is picked when a reflector is rebuilt from the frame.
#[derive(Debug, Clone, Copy)]
pub enum ChartRule<'r> {
    /// The representative with `ŵᵀŵ ≤ 1`.
    Canonical,
    /// The representative closest to the matching reflector of a reference stack.
    Nearest(&'r ReflectorStack),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledState {
    pub y: Vector,
    pub x: Vector,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockD {
    pub d11: Mat,
    pub d12: Mat,
    pub d22: Mat,
}

impl BlockD {
    pub fn p(&self) -> usize {
        self.d11.nrows()
    }

    /// Full `D` with the (2,1) block set to zero.
    pub fn assemble(&self) -> Mat {
        let p = self.d11.nrows();
        let q = self.d22.nrows();
        let mut m = Mat::zeros(p + q, p + q);
        m.view_mut((0, 0), (p, p)).copy_from(&self.d11);
        m.view_mut((0, p), (p, q)).copy_from(&self.d12);
        m.view_mut((p, p), (q, q)).copy_from(&self.d22);
        m
    }

    /// Largest entry strictly below the diagonal of `D11`.
    pub fn lower_leakage(&self) -> f64 {
        let p = self.d11.nrows();
        let mut worst = 0.0f64;
        for j in 0..p {
            for i in j + 1..p {
                worst = worst.max(self.d11[(i, j)].abs());
            }
        }
        worst
    }
}

/// Output of one pass of the update recursion.
#[derive(Debug, Clone)]
pub struct Decoupling {
    pub dwhat: Vec<Vector>,
    pub d: BlockD,
    /// `max |C_p[p.., ..p]|` before it is discarded.
    pub leakage: f64,
}

fn w_of(what: &Vector) -> (Vec<f64>, f64) {
    let mut w = Vec::with_capacity(what.len() + 1);
    w.push(1.0);
    w.extend(what.iter().copied());
    let n = 1.0 + what.norm_squared();
    (w, n)
}

fn reflect_vec(v: &mut Vector, off: usize, w: &[f64], beta: f64) {
    let s: f64 = w.iter().enumerate().map(|(k, wk)| wk * v[off + k]).sum();
    if s != 0.0 {
        let s = beta * s;
        for (k, wk) in w.iter().enumerate() {
            v[off + k] -= s * wk;
        }
    }
}

/// Unit Householder vector `v = −σ (1, ŵ) / ‖(1, ŵ)‖₂`.
pub fn v_from_what(what: &Vector, sigma: f64) -> Result<Vector> {
    if sigma != 1.0 && sigma != -1.0 {
        return Err(Error::Input(format!("sigma must be ±1, got {sigma}")));
    }
    let nn = what.norm_squared();
    if !(nn <= 1.0 + CHART_SLACK) {
        return Err(Error::Invariant(format!("ŵᵀŵ = {nn} exceeds 1")));
    }
    let (w, n) = w_of(what);
    let scale = -sigma / n.sqrt();
    Ok(Vector::from_iterator(w.len(), w.into_iter().map(|x| x * scale)))
}

impl ReflectorStack {
    /// Validated stack: dimensions must match and every `ŵ_iᵀŵ_i ≤ 1`.
    pub fn new(d: usize, what: Vec<Vector>, sigma: Vec<f64>) -> Result<Self> {
        let s = Self::raw(d, what, sigma)?;
        if let Some(&i) = s.needs_reembed().first() {
            return Err(Error::Invariant(format!(
                "ŵ_{} has squared norm {} > 1",
                i + 1,
                s.what[i].norm_squared()
            )));
        }
        Ok(s)
    }

    /// Stack in arbitrary charts; only dimensions are checked.
    pub fn raw(d: usize, what: Vec<Vector>, sigma: Vec<f64>) -> Result<Self> {
        let p = what.len();
        if p >= d {
            return Err(Error::Input(format!("need p < d, got p = {p}, d = {d}")));
        }
        if sigma.len() != p {
            return Err(Error::Dimension { expected: p, got: sigma.len() });
        }
        for (i, w) in what.iter().enumerate() {
            if w.len() != d - i - 1 {
                return Err(Error::Dimension { expected: d - i - 1, got: w.len() });
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("non-finite ŵ_{}", i + 1)));
            }
        }
        if sigma.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Input("sigma entries must be ±1".into()));
        }
        Ok(Self { d, what, sigma })
    }

    /// All `ŵ_i = 0`, `σ_i = +1`.
    pub fn identity(d: usize, p: usize) -> Result<Self> {
        let what = (0..p).map(|i| Vector::zeros(d - i - 1)).collect();
        Self::new(d, what, vec![1.0; p])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.what.len()
    }

    pub fn what(&self) -> &[Vector] {
        &self.what
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn set_sigma(&mut self, sigma: Vec<f64>) {
        assert_eq!(sigma.len(), self.p());
        self.sigma = sigma;
    }

    /// Number of scalars in the packed `(ŵ_1, …, ŵ_p)`.
    pub fn flat_len(d: usize, p: usize) -> usize {
        (1..=p).map(|i| d - i).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.what.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn from_flat(d: usize, p: usize, data: &[f64], sigma: Vec<f64>) -> Result<Self> {
        if data.len() != Self::flat_len(d, p) {
            return Err(Error::Dimension { expected: Self::flat_len(d, p), got: data.len() });
        }
        let mut off = 0;
        let mut what = Vec::with_capacity(p);
        for i in 1..=p {
            what.push(Vector::from_column_slice(&data[off..off + d - i]));
            off += d - i;
        }
        Self::raw(d, what, sigma)
    }

    /// Indices whose chart violates `ŵᵀŵ ≤ 1`.
    pub fn needs_reembed(&self) -> Vec<usize> {
        (0..self.p())
            .filter(|&i| self.what[i].norm_squared() > 1.0 + CHART_SLACK)
            .collect()
    }

    /// Switches reflector `i` to the opposite-sign chart:
    /// `ŵ ← −ŵ/(ŵᵀŵ)`, `σ ← −σ`. Later reflectors are left untouched.
    pub fn reembed(&self, i: usize) -> Result<Self> {
        if i >= self.p() {
            return Err(Error::Input(format!("reflector index {i} out of range")));
        }
        let nn = self.what[i].norm_squared();
        if nn == 0.0 {
            return Err(Error::Invariant("cannot reembed ŵ = 0".into()));
        }
        let mut out = self.clone();
        out.what[i] = &self.what[i] * (-1.0 / nn);
        out.sigma[i] = -self.sigma[i];
        Ok(out)
    }

    /// `Q = Q_1 ⋯ Q_p`.
    pub fn assemble_q(&self) -> Mat {
        let mut q = Mat::identity(self.d, self.d);
        for (i, what) in self.what.iter().enumerate() {
            let (w, n) = w_of(what);
            reflect_cols(&mut q, i, &w, 2.0 / n);
        }
        q
    }

    /// `Qᵀ u`.
    pub fn apply_qt(&self, u: &Vector) -> Vector {
        let mut z = u.clone();
        for (i, what) in self.what.iter().enumerate() {
            let (w, n) = w_of(what);
            reflect_vec(&mut z, i, &w, 2.0 / n);
        }
        z
    }

    /// `Q z`.
    pub fn apply_q(&self, z: &Vector) -> Vector {
        let mut u = z.clone();
        for (i, what) in self.what.iter().enumerate().rev() {
            let (w, n) = w_of(what);
            reflect_vec(&mut u, i, &w, 2.0 / n);
        }
        u
    }

    /// Rebuilds reflectors `from..p` so that every column of the current
    /// frame is kept up to sign, choosing each chart by `rule`.
    /// `σ` follows the tracked columns continuously.
    pub fn rechart(&self, from: usize, rule: ChartRule) -> Self {
        let q_old = self.assemble_q();
        let mut out = self.clone();
        for j in from..self.p() {
            let mut c: Vector = q_old.column(j).into_owned();
            for (i, what) in out.what.iter().enumerate().take(j) {
                let (w, n) = w_of(what);
                reflect_vec(&mut c, i, &w, 2.0 / n);
            }
            let x = c.rows(j, self.d - j).into_owned();
            let reference = match rule {
                ChartRule::Canonical => None,
                ChartRule::Nearest(r) => Some(&r.what[j]),
            };
            let (what, s) = chart_from_column(&x, reference);
            out.what[j] = what;
            out.sigma[j] = self.sigma[j] * s;
        }
        out
    }

    /// Canonical charts, or `None` when every `ŵ_iᵀŵ_i ≤ 1` already.
    pub fn canonicalize(&self) -> Option<Self> {
        self.needs_reembed()
            .first()
            .map(|&i| self.rechart(i, ChartRule::Canonical))
    }

    /// Charts nearest to `reference`, or `None` when already nearest.
    pub fn align_to(&self, reference: &ReflectorStack) -> Option<Self> {
        let first = (0..self.p()).find(|&i| {
            let w = &self.what[i];
            let nn = w.norm_squared();
            if nn == 0.0 {
                return false;
            }
            let image = w * (-1.0 / nn);
            (&image - &reference.what[i]).norm() < (w - &reference.what[i]).norm()
        })?;
        Some(self.rechart(first, ChartRule::Nearest(reference)))
    }

    /// Rotated coordinates of `u` in the frame of `self` re-expressed in the
    /// frame of `other`: `Q_otherᵀ Q_self z`.
    pub fn transfer(&self, other: &ReflectorStack, z: &Vector) -> Vector {
        other.apply_qt(&self.apply_q(z))
    }
}

/// Chart of a single reflector sending `x` to a multiple of `e₁`.
/// Returns `(ŵ, s)` with `P(ŵ) x = s ‖x‖ e₁`.
fn chart_from_column(x: &Vector, reference: Option<&Vector>) -> (Vector, f64) {
    let r = x.norm();
    let tail = x.rows(1, x.len() - 1);
    let candidate = |s: f64| {
        let den = x[0] - s * r;
        if den.abs() <= f64::MIN_POSITIVE * r.max(1.0) {
            None
        } else {
            Some(tail / den)
        }
    };
    let plus = candidate(1.0);
    let minus = candidate(-1.0);
    let pick_plus = match (&plus, &minus) {
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => true,
        (Some(a), Some(b)) => match reference {
            None => a.norm_squared() <= b.norm_squared(),
            Some(rf) => (a - rf).norm() <= (b - rf).norm(),
        },
    };
    if pick_plus {
        (plus.unwrap_or_else(|| Vector::zeros(x.len() - 1)), 1.0)
    } else {
        (minus.unwrap_or_else(|| Vector::zeros(x.len() - 1)), -1.0)
    }
}

/// Reflector stack whose leading `p` columns span the same flag as the
/// leading columns of `frame`, in canonical charts with `σ` chosen so the
/// tracked columns `σ_i q_i` equal the columns of `frame`.
pub fn stack_from_frame(frame: &Mat, p: usize) -> Result<ReflectorStack> {
    let d = frame.nrows();
    if frame.ncols() < p || p >= d {
        return Err(Error::Input(format!("frame {}x{} cannot seed p = {p}", d, frame.ncols())));
    }
    let mut stack = ReflectorStack::identity(d, p)?;
    for j in 0..p {
        let mut c: Vector = frame.column(j).into_owned();
        for (i, what) in stack.what.iter().enumerate().take(j) {
            let (w, n) = w_of(what);
            reflect_vec(&mut c, i, &w, 2.0 / n);
        }
        let x = c.rows(j, d - j).into_owned();
        let (what, s) = chart_from_column(&x, None);
        stack.what[j] = what;
        stack.sigma[j] = s;
    }
    Ok(stack)
}

/// `ŵ̇_i` from the trailing block `B` of `C_{i−1}`:
/// `(b₁₁ + ŵᵀb̂ − 2wᵀBw/n) ŵ + (1 − n/2) b̂ + B̂ ŵ`.
fn dwhat_from_block(c: &Mat, off: usize, what: &Vector) -> Vector {
    let k = what.len();
    let (w, n) = w_of(what);
    let b11 = c[(off, off)];
    let bhat = Vector::from_fn(k, |r, _| c[(off + 1 + r, off)]);
    let bw = Vector::from_fn(k + 1, |r, _| {
        (0..=k).map(|s| c[(off + r, off + s)] * w[s]).sum::<f64>()
    });
    let wbw: f64 = (0..=k).map(|r| w[r] * bw[r]).sum();
    let bhat_w = Vector::from_fn(k, |r, _| {
        (0..k).map(|s| c[(off + 1 + r, off + 1 + s)] * what[s]).sum::<f64>()
    });
    let lead = b11 + what.dot(&bhat) - 2.0 * wbw / n;
    what * lead + &bhat * (1.0 - 0.5 * n) + bhat_w
}

/// `C_i = Q_i C_{i−1} Q_i − Q_i Q̇_i` on the full matrix, in place.
fn update_in_place(c: &mut Mat, off: usize, what: &Vector, dwhat: &Vector) {
    let (w, n) = w_of(what);
    let beta = 2.0 / n;
    reflect_rows(c, off, &w, beta);
    reflect_cols(c, off, &w, beta);
    let k = w.len();
    for r in 0..k {
        let wd_r = if r == 0 { 0.0 } else { dwhat[r - 1] };
        for s in 0..k {
            let wd_s = if s == 0 { 0.0 } else { dwhat[s - 1] };
            c[(off + r, off + s)] -= beta * (w[r] * wd_s - wd_r * w[s]);
        }
    }
}

/// One update step with `i` counted from 1.
pub fn update_c(c_prev: &Mat, i: usize, what_i: &Vector, dwhat_i: &Vector) -> Result<Mat> {
    let d = c_prev.nrows();
    if i == 0 || i >= d || what_i.len() != d - i || dwhat_i.len() != d - i {
        return Err(Error::Dimension { expected: d.saturating_sub(i), got: what_i.len() });
    }
    let mut c = c_prev.clone();
    update_in_place(&mut c, i - 1, what_i, dwhat_i);
    Ok(c)
}

fn check_c(stack: &ReflectorStack, c: &Mat) -> Result<()> {
    if c.nrows() != stack.d || c.ncols() != stack.d {
        return Err(Error::Dimension { expected: stack.d, got: c.nrows() });
    }
    Ok(())
}

/// Runs the update recursion once, producing `ŵ̇` and the block form of
/// `D = QᵀCQ − QᵀQ̇`.
pub fn decouple(stack: &ReflectorStack, c: &Mat) -> Result<Decoupling> {
    check_c(stack, c)?;
    let mut m = c.clone();
    let mut dwhat = Vec::with_capacity(stack.p());
    for (i, what) in stack.what.iter().enumerate() {
        let dw = dwhat_from_block(&m, i, what);
        update_in_place(&mut m, i, what, &dw);
        dwhat.push(dw);
    }
    let (d, leakage) = split_blocks(&m, stack.p());
    Ok(Decoupling { dwhat, d, leakage })
}

fn split_blocks(m: &Mat, p: usize) -> (BlockD, f64) {
    let d = m.nrows();
    let q = d - p;
    let leakage = m.view((p, 0), (q, p)).amax();
    let blocks = BlockD {
        d11: m.view((0, 0), (p, p)).into_owned(),
        d12: m.view((0, p), (p, q)).into_owned(),
        d22: m.view((p, p), (q, q)).into_owned(),
    };
    (blocks, leakage)
}

/// `ŵ̇_i` for `i = 1..p`.
pub fn what_rhs(stack: &ReflectorStack, c: &Mat, _t: f64) -> Result<Vec<Vector>> {
    Ok(decouple(stack, c)?.dwhat)
}

/// Block `D` for given `ŵ̇`.
pub fn assemble_d(stack: &ReflectorStack, c: &Mat, dwhat: &[Vector]) -> Result<BlockD> {
    check_c(stack, c)?;
    if dwhat.len() != stack.p() {
        return Err(Error::Dimension { expected: stack.p(), got: dwhat.len() });
    }
    let mut m = c.clone();
    for (i, (what, dw)) in stack.what.iter().zip(dwhat).enumerate() {
        if dw.len() != what.len() {
            return Err(Error::Dimension { expected: what.len(), got: dw.len() });
        }
        update_in_place(&mut m, i, what, dw);
    }
    Ok(split_blocks(&m, stack.p()).0)
}

pub fn assemble_q(stack: &ReflectorStack) -> Mat {
    stack.assemble_q()
}

pub fn needs_reembed(stack: &ReflectorStack) -> Vec<usize> {
    stack.needs_reembed()
}

pub fn reembed(stack: &ReflectorStack, i: usize) -> Result<ReflectorStack> {
    stack.reembed(i)
}

pub fn to_rotated(stack: &ReflectorStack, u: &Vector, t: f64) -> Result<DecoupledState> {
    if u.len() != stack.d {
        return Err(Error::Dimension { expected: stack.d, got: u.len() });
    }
    let z = stack.apply_qt(u);
    let p = stack.p();
    Ok(DecoupledState {
        y: z.rows(0, p).into_owned(),
        x: z.rows(p, stack.d - p).into_owned(),
        t,
    })
}

pub fn from_rotated(stack: &ReflectorStack, s: &DecoupledState) -> Result<Vector> {
    let p = stack.p();
    if s.y.len() != p {
        return Err(Error::Dimension { expected: p, got: s.y.len() });
    }
    if s.x.len() != stack.d - p {
        return Err(Error::Dimension { expected: stack.d - p, got: s.x.len() });
    }
    let mut z = Vector::zeros(stack.d);
    z.rows_mut(0, p).copy_from(&s.y);
    z.rows_mut(p, stack.d - p).copy_from(&s.x);
    Ok(stack.apply_q(&z))
}
