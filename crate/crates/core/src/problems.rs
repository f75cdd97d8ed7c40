//! Built-in test problems and the generic problem interface.

use serde_json::{json, Value};

use crate::linalg::{central_jacobian, Mat, Vector};
use crate::manifold::GapData;

/// A right-hand side `u̇ = f(u, t)` with its state Jacobian.
///
/// Implementations must be pure: every method is a function of its
/// arguments only, so evaluations may run concurrently.
pub trait ProblemDef: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, u: &Vector) -> Vector;

    /// `C(u, t) = f′(u, t)`; central differences unless overridden.
    fn jacobian(&self, t: f64, u: &Vector) -> Mat {
        central_jacobian(|v| self.rhs(t, v), u, 1e-6)
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }

    /// `N(u, t) = f(u, t) − C u` for a frozen linearization `C`.
    fn nonlinearity(&self, t: f64, u: &Vector, c: &Mat) -> Vector {
        self.rhs(t, u) - c * u
    }

    /// Problem-specific distance from the manifold, when one is known.
    fn residual(&self, _t: f64, _u: &Vector) -> Option<f64> {
        None
    }

    fn params(&self) -> Value;

    fn gap_data(&self) -> Option<GapData> {
        None
    }
}

/// Planar nonautonomous problem in a frame rotating with unit speed.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotating2d {
    pub sigma: f64,
}

impl Default for Rotating2d {
    fn default() -> Self {
        Self { sigma: 0.1 }
    }
}

pub fn rotating_2d() -> Rotating2d {
    Rotating2d::default()
}

impl Rotating2d {
    /// Unrotated coordinates `(x, y)`.
    pub fn unrotate(t: f64, u: &Vector) -> (f64, f64) {
        let (s, c) = t.sin_cos();
        (u[0] * c - u[1] * s, u[0] * s + u[1] * c)
    }

    /// Signed manifold defect `y − x² − σ(cos t + sin t)/2`.
    pub fn signed_residual(&self, t: f64, u: &Vector) -> f64 {
        let (x, y) = Self::unrotate(t, u);
        let (s, c) = t.sin_cos();
        y - x * x - 0.5 * self.sigma * (c + s)
    }
}

impl ProblemDef for Rotating2d {
    fn name(&self) -> &str {
        "rotating_2d"
    }

    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, t: f64, u: &Vector) -> Vector {
        let (s, c) = t.sin_cos();
        let (x, y) = Self::unrotate(t, u);
        let g = -y + x * x - 2.0 * y * y + self.sigma * c;
        Vector::from_vec(vec![u[1] - x * y * c + g * s, -u[0] + x * y * s + g * c])
    }

    fn jacobian(&self, t: f64, u: &Vector) -> Mat {
        let (s, c) = t.sin_cos();
        let (x, y) = Self::unrotate(t, u);
        let xy_v = c * y + x * s;
        let xy_w = -s * y + x * c;
        let g_v = -s + 2.0 * x * c - 4.0 * y * s;
        let g_w = -c - 2.0 * x * s - 4.0 * y * c;
        Mat::from_row_slice(
            2,
            2,
            &[
                -c * xy_v + s * g_v,
                1.0 - c * xy_w + s * g_w,
                -1.0 + s * xy_v + c * g_v,
                s * xy_w + c * g_w,
            ],
        )
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }

    fn residual(&self, t: f64, u: &Vector) -> Option<f64> {
        Some(self.signed_residual(t, u).abs())
    }

    fn params(&self) -> Value {
        json!({ "sigma": self.sigma })
    }
}

/// Sine-Galerkin truncation of `w_s = (w²)_y − w_yy − ξ w_yyyy` on odd
/// 2π-periodic functions, `w = Σ_{k=1}^{n} a_k sin(ky)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KseGalerkin {
    pub n_modes: usize,
    pub xi: f64,
}

pub const KSE_XI: f64 = 0.02991;
pub const KSE_THETA: f64 = 133.73454;

pub fn kse_galerkin(n_modes: usize, xi: f64) -> KseGalerkin {
    assert!(n_modes >= 1, "need at least one mode");
    KseGalerkin { n_modes, xi }
}

impl KseGalerkin {
    pub fn linear_rate(&self, k: usize) -> f64 {
        let k = k as f64;
        k * k - self.xi * k.powi(4)
    }

    /// Sine coefficients of `(w²)_y`.
    pub fn quadratic(&self, a: &Vector) -> Vector {
        let n = self.n_modes;
        Vector::from_fn(n, |i, _| {
            let k = i + 1;
            let mut sum = 0.0;
            for l in 1..k {
                sum += 0.5 * a[l - 1] * a[k - l - 1];
            }
            for m in 1..=n.saturating_sub(k) {
                sum -= a[m - 1] * a[m + k - 1];
            }
            k as f64 * sum
        })
    }

    /// Coefficients of `ũ = −2w`.
    pub fn to_u(a: &Vector) -> Vector {
        a * -2.0
    }

    pub fn from_u(u: &Vector) -> Vector {
        u * -0.5
    }

    /// `τ = ξ s / 4`.
    pub fn to_tau(&self, s: f64) -> f64 {
        self.xi * s / 4.0
    }

    pub fn from_tau(&self, tau: f64) -> f64 {
        4.0 * tau / self.xi
    }
}

impl ProblemDef for KseGalerkin {
    fn name(&self) -> &str {
        "kse_galerkin"
    }

    fn dim(&self) -> usize {
        self.n_modes
    }

    fn rhs(&self, _t: f64, a: &Vector) -> Vector {
        let q = self.quadratic(a);
        Vector::from_fn(self.n_modes, |i, _| self.linear_rate(i + 1) * a[i] + q[i])
    }

    fn jacobian(&self, _t: f64, a: &Vector) -> Mat {
        let n = self.n_modes;
        let mut j = Mat::zeros(n, n);
        for i in 0..n {
            let k = i + 1;
            j[(i, i)] += self.linear_rate(k);
            for l in 1..k {
                j[(i, l - 1)] += k as f64 * a[k - l - 1];
            }
            for m in 1..=n.saturating_sub(k) {
                j[(i, m - 1)] -= k as f64 * a[m + k - 1];
                j[(i, m + k - 1)] -= k as f64 * a[m - 1];
            }
        }
        j
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }

    fn params(&self) -> Value {
        json!({ "n_modes": self.n_modes, "xi": self.xi })
    }
}

/// Two-scale Lorenz-96 model. State `(x_1..x_K, y_{1,1}..y_{J,1}, …, y_{J,K})`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerLorenz {
    pub k: usize,
    pub j: usize,
    pub eps: f64,
    pub hx: f64,
    pub hy: f64,
    pub forcing: f64,
}

impl Default for TwoLayerLorenz {
    fn default() -> Self {
        Self { k: 5, j: 4, eps: 0.5, hx: -1.0, hy: 1.0, forcing: 8.0 }
    }
}

pub fn two_layer_lorenz(k: usize, j: usize, eps: f64, hx: f64, hy: f64, forcing: f64) -> TwoLayerLorenz {
    assert!(k >= 1 && j >= 1 && eps > 0.0);
    TwoLayerLorenz { k, j, eps, hx, hy, forcing }
}

impl TwoLayerLorenz {
    fn yi(&self, j: isize, k: usize) -> usize {
        let jj = j.rem_euclid(self.j as isize) as usize;
        self.k + k * self.j + jj
    }

    fn xi(&self, k: isize) -> usize {
        k.rem_euclid(self.k as isize) as usize
    }

    /// Advection term `x_{k−1}(x_{k+1} − x_{k−2})` of the slow layer.
    pub fn advection(&self, u: &Vector) -> Vector {
        Vector::from_fn(self.k, |k, _| {
            let k = k as isize;
            u[self.xi(k - 1)] * (u[self.xi(k + 1)] - u[self.xi(k - 2)])
        })
    }
}

impl ProblemDef for TwoLayerLorenz {
    fn name(&self) -> &str {
        "two_layer_lorenz"
    }

    fn dim(&self) -> usize {
        self.k + self.k * self.j
    }

    fn rhs(&self, _t: f64, u: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim());
        let adv = self.advection(u);
        let coupling = self.hx / self.j as f64;
        for k in 0..self.k {
            let z: f64 = (0..self.j).map(|j| u[self.k + k * self.j + j]).sum();
            out[k] = adv[k] - u[k] + self.forcing + coupling * z;
            for j in 0..self.j as isize {
                let here = self.yi(j, k);
                let fast = u[self.yi(j + 1, k)] * (u[self.yi(j - 1, k)] - u[self.yi(j + 2, k)]) - u[here]
                    + self.hy * u[k];
                out[here] = fast / self.eps;
            }
        }
        out
    }

    fn jacobian(&self, _t: f64, u: &Vector) -> Mat {
        let d = self.dim();
        let mut m = Mat::zeros(d, d);
        let coupling = self.hx / self.j as f64;
        for k in 0..self.k {
            let ki = k as isize;
            let (km1, kp1, km2) = (self.xi(ki - 1), self.xi(ki + 1), self.xi(ki - 2));
            m[(k, km1)] += u[kp1] - u[km2];
            m[(k, kp1)] += u[km1];
            m[(k, km2)] -= u[km1];
            m[(k, k)] -= 1.0;
            for j in 0..self.j {
                m[(k, self.k + k * self.j + j)] += coupling;
            }
            let ie = 1.0 / self.eps;
            for j in 0..self.j as isize {
                let here = self.yi(j, k);
                let (jp1, jm1, jp2) = (self.yi(j + 1, k), self.yi(j - 1, k), self.yi(j + 2, k));
                m[(here, jp1)] += ie * (u[jm1] - u[jp2]);
                m[(here, jm1)] += ie * u[jp1];
                m[(here, jp2)] -= ie * u[jp1];
                m[(here, here)] -= ie;
                m[(here, k)] += ie * self.hy;
            }
        }
        m
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }

    fn params(&self) -> Value {
        json!({
            "K": self.k,
            "J": self.j,
            "eps": self.eps,
            "h_x": self.hx,
            "h_y": self.hy,
            "F": self.forcing,
        })
    }
}

/// Normalized alternating vector `(−1, 1, −1, …)/√p`.
pub fn alternating_boundary(p: usize) -> Vector {
    let s = 1.0 / (p as f64).sqrt();
    Vector::from_fn(p, |i, _| if i % 2 == 0 { -s } else { s })
}

/// `u = (y; x)` with `ẏ = diag(B) y + C₁₂ x`, `ẋ = diag(A) x`, plus an
/// optional perturbation `N_i(u) = a sin(u_{(i+1) mod d})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBenchmark {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c12: Mat,
    pub amplitude: f64,
}

pub fn linear_benchmark(a: Vec<f64>, b: Vec<f64>, c12: Mat, amplitude: f64) -> LinearBenchmark {
    assert_eq!(c12.nrows(), b.len(), "coupling rows must match the slow block");
    assert_eq!(c12.ncols(), a.len(), "coupling columns must match the stable block");
    LinearBenchmark { a, b, c12, amplitude }
}

impl LinearBenchmark {
    pub fn p(&self) -> usize {
        self.b.len()
    }

    pub fn linear_part(&self) -> Mat {
        let p = self.b.len();
        let q = self.a.len();
        let mut c = Mat::zeros(p + q, p + q);
        for (i, b) in self.b.iter().enumerate() {
            c[(i, i)] = *b;
        }
        for (i, a) in self.a.iter().enumerate() {
            c[(p + i, p + i)] = *a;
        }
        c.view_mut((0, p), (p, q)).copy_from(&self.c12);
        c
    }

    pub fn alpha(&self) -> f64 {
        self.a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn beta(&self) -> f64 {
        self.b.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn lipschitz(&self) -> f64 {
        let coupling = if self.c12.is_empty() { 0.0 } else { self.c12.clone().svd(false, false).singular_values.max() };
        coupling + self.amplitude.abs()
    }
}

impl ProblemDef for LinearBenchmark {
    fn name(&self) -> &str {
        "linear_benchmark"
    }

    fn dim(&self) -> usize {
        self.a.len() + self.b.len()
    }

    fn rhs(&self, _t: f64, u: &Vector) -> Vector {
        let d = self.dim();
        let mut out = self.linear_part() * u;
        if self.amplitude != 0.0 {
            for i in 0..d {
                out[i] += self.amplitude * u[(i + 1) % d].sin();
            }
        }
        out
    }

    fn jacobian(&self, _t: f64, u: &Vector) -> Mat {
        let d = self.dim();
        let mut c = self.linear_part();
        if self.amplitude != 0.0 {
            for i in 0..d {
                c[(i, (i + 1) % d)] += self.amplitude * u[(i + 1) % d].cos();
            }
        }
        c
    }

    fn has_analytic_jacobian(&self) -> bool {
        true
    }

    fn params(&self) -> Value {
        json!({
            "A": self.a,
            "B": self.b,
            "C12": (0..self.c12.nrows())
                .map(|i| self.c12.row(i).iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "amplitude": self.amplitude,
        })
    }

    fn gap_data(&self) -> Option<GapData> {
        GapData::exact(1.0, self.alpha(), self.beta(), self.lipschitz()).ok()
    }
}
