//! Dense kernels: Householder application, a direct QR oracle, eigenvalue
//! real parts, and a banded LU used by the collocation solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Which side of the operand a reflector acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Tolerance on `‖v‖₂ − 1` accepted by [`householder_apply`].
pub const UNIT_TOL: f64 = 1e-12;

/// Pivot norm below which [`qr_oracle`] reports a degenerate column.
pub const PIVOT_TOL: f64 = 1e-13;

/// Returns `(I − 2vvᵀ)M` or `M(I − 2vvᵀ)` without forming the reflector.
pub fn householder_apply(v: &Vector, m: &Mat, side: Side) -> Result<Mat> {
    let norm = v.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::Input(format!("reflector vector has norm {norm}")));
    }
    let mut out = m.clone();
    match side {
        Side::Left => {
            if v.len() != m.nrows() {
                return Err(Error::Dimension { expected: m.nrows(), got: v.len() });
            }
            reflect_rows(&mut out, 0, v.as_slice(), 2.0);
        }
        Side::Right => {
            if v.len() != m.ncols() {
                return Err(Error::Dimension { expected: m.ncols(), got: v.len() });
            }
            reflect_cols(&mut out, 0, v.as_slice(), 2.0);
        }
    }
    Ok(out)
}

/// In place `M[off.., :] ← (I − β u uᵀ) M[off.., :]`.
pub(crate) fn reflect_rows(m: &mut Mat, off: usize, u: &[f64], beta: f64) {
    let ncols = m.ncols();
    for j in 0..ncols {
        let mut s = 0.0;
        for (k, uk) in u.iter().enumerate() {
            s += uk * m[(off + k, j)];
        }
        if s != 0.0 {
            let s = beta * s;
            for (k, uk) in u.iter().enumerate() {
                m[(off + k, j)] -= s * uk;
            }
        }
    }
}

/// In place `M[:, off..] ← M[:, off..] (I − β u uᵀ)`.
pub(crate) fn reflect_cols(m: &mut Mat, off: usize, u: &[f64], beta: f64) {
    let nrows = m.nrows();
    for i in 0..nrows {
        let mut s = 0.0;
        for (k, uk) in u.iter().enumerate() {
            s += m[(i, off + k)] * uk;
        }
        if s != 0.0 {
            let s = beta * s;
            for (k, uk) in u.iter().enumerate() {
                m[(i, off + k)] -= s * uk;
            }
        }
    }
}

/// Direct QR factorization with prescribed signs on `diag(R)`.
///
/// Used as a test and diagnostic oracle only.
pub fn qr_oracle(m: &Mat, sign_convention: &[f64]) -> Result<(Mat, Mat)> {
    let n = m.nrows();
    if n != m.ncols() || n == 0 {
        return Err(Error::Input(format!("qr_oracle needs a square matrix, got {}x{}", n, m.ncols())));
    }
    if sign_convention.len() != n {
        return Err(Error::Dimension { expected: n, got: sign_convention.len() });
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..n {
        let piv = r[(i, i)];
        if piv.abs() < PIVOT_TOL {
            return Err(Error::Degenerate { column: i, norm: piv.abs() });
        }
        if piv.signum() != sign_convention[i].signum() {
            q.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    Ok((q, r))
}

/// Real parts of all eigenvalues, sorted in descending order.
pub fn eig_real_parts(m: &Mat) -> Result<Vec<f64>> {
    let n = m.nrows();
    if n != m.ncols() || n == 0 {
        return Err(Error::Input(format!("eig_real_parts needs a square matrix, got {}x{}", n, m.ncols())));
    }
    let max_iter = 10_000 * n;
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, max_iter)
        .ok_or(Error::EigenNonConvergence { iterations: max_iter })?;
    let mut re: Vec<f64> = schur.complex_eigenvalues().iter().map(|z| z.re).collect();
    re.sort_by(|a, b| b.total_cmp(a));
    Ok(re)
}

/// Banded matrix with `kl` sub- and `ku` super-diagonals, factored in place
/// by Gaussian elimination with partial pivoting.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
    factored: bool,
}

impl BandedLu {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width], piv: (0..n).collect(), factored: false }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    /// Whether `(i, j)` lies inside the stored band of the unfactored matrix.
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.in_band(i, j), "({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.kl + self.ku {
            return 0.0;
        }
        self.data[self.idx(i, j)]
    }

    pub fn factor(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut scale = 0.0f64;
        for v in &self.data {
            scale = scale.max(v.abs());
        }
        let tiny = scale * f64::EPSILON * 1e-3;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let a = self.data[self.idx(i, k)].abs();
                if a > best {
                    best = a;
                    p = i;
                }
            }
            if !(best > tiny) || !best.is_finite() {
                return Err(Error::Singular);
            }
            self.piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for i in k + 1..=last_row {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = self.data[self.idx(k, j)];
                        let ij = self.idx(i, j);
                        self.data[ij] -= l * kj;
                    }
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        assert!(self.factored, "BandedLu::solve before factor");
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let mut x = b.clone();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap_rows(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    x[i] -= self.data[self.idx(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.data[self.idx(k, j)] * x[j];
            }
            x[k] = s / self.data[self.idx(k, k)];
        }
        x
    }
}

/// Forward-difference Jacobian of `f` at `x`, column by column.
pub fn fd_jacobian<F>(f: F, x: &Vector, fx: &Vector) -> Mat
where
    F: Fn(&Vector) -> Vector,
{
    let n = x.len();
    let mut jac = Mat::zeros(fx.len(), n);
    let eps = f64::EPSILON.sqrt();
    let mut xp = x.clone();
    for j in 0..n {
        let h = eps * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j];
        let inv = 1.0 / ((x[j] + h) - x[j]);
        for i in 0..fx.len() {
            jac[(i, j)] = (fp[i] - fx[i]) * inv;
        }
    }
    jac
}

/// Central-difference Jacobian, second-order accurate.
pub fn central_jacobian<F>(f: F, x: &Vector, rel_step: f64) -> Mat
where
    F: Fn(&Vector) -> Vector,
{
    let n = x.len();
    let f0 = f(x);
    let mut jac = Mat::zeros(f0.len(), n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = rel_step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..f0.len() {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reflector_about_e1() {
        let v = Vector::from_vec(vec![1.0, 0.0]);
        let out = householder_apply(&v, &Mat::identity(2, 2), Side::Left).unwrap();
        assert_eq!(out, Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn reflector_diagonal_direction() {
        let s = 0.5f64.sqrt();
        let v = Vector::from_vec(vec![s, s]);
        let out = householder_apply(&v, &Mat::identity(2, 2), Side::Left).unwrap();
        let expect = Mat::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!((out - expect).amax() < 1e-15);
    }

    #[test]
    fn non_unit_vector_rejected() {
        let v = Vector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(householder_apply(&v, &Mat::identity(2, 2), Side::Right), Err(Error::Input(_))));
    }

    #[test]
    fn qr_identity_and_triangular() {
        let (q, r) = qr_oracle(&Mat::identity(3, 3), &[1.0; 3]).unwrap();
        assert!((q - Mat::identity(3, 3)).amax() < 1e-15);
        assert!((r - Mat::identity(3, 3)).amax() < 1e-15);
        let m = Mat::from_row_slice(3, 3, &[2.0, 1.0, -1.0, 0.0, 3.0, 0.5, 0.0, 0.0, 1.5]);
        let (q, r) = qr_oracle(&m, &[1.0; 3]).unwrap();
        assert!((q - Mat::identity(3, 3)).amax() < 1e-14);
        assert!((r - m).amax() < 1e-14);
    }

    #[test]
    fn qr_rank_deficient() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(qr_oracle(&m, &[1.0, 1.0]), Err(Error::Degenerate { column: 1, .. })));
    }

    #[test]
    fn eig_diagonal_and_rotation() {
        let re = eig_real_parts(&Mat::from_diagonal(&Vector::from_vec(vec![-10.0, -1.0]))).unwrap();
        assert_eq!(re, vec![-1.0, -10.0]);
        let rot = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let re = eig_real_parts(&rot).unwrap();
        assert!(re.iter().all(|r| r.abs() < 1e-14));
    }

    #[test]
    fn banded_matches_dense() {
        let n = 9;
        let (kl, ku) = (2, 3);
        let mut band = BandedLu::zeros(n, kl, ku);
        let mut dense = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if band.in_band(i, j) {
                    let v = ((i * 7 + j * 3) % 11) as f64 - 5.0 + if i == j { 0.1 } else { 0.0 };
                    band.set(i, j, v);
                    dense[(i, j)] = v;
                }
            }
        }
        let b = Vector::from_fn(n, |i, _| (i as f64).sin());
        band.factor().unwrap();
        let x = band.solve(&b);
        let xd = dense.lu().solve(&b).unwrap();
        for i in 0..n {
            assert_relative_eq!(x[i], xd[i], epsilon = 1e-10, max_relative = 1e-10);
        }
    }
}
