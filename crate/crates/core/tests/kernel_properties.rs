//! Properties of the dense kernels and the two ODE solvers.

use std::f64::consts::FRAC_PI_2;

use inertial_core::householder::{decouple, ReflectorStack};
use inertial_core::linalg::{eig_real_parts, householder_apply, qr_oracle, Mat, Side, Vector};
use inertial_core::ode_bvp::{self, uniform_mesh, BvpSpec};
use inertial_core::ode_ivp::{integrate, IvpSpec};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() }
}

fn square(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Mat::from_vec(n, n, v))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn reflector_is_an_involution(raw in prop::collection::vec(-1.0f64..1.0, 4), m in square(4)) {
        let v = Vector::from_vec(raw);
        prop_assume!(v.norm() > 1e-3);
        let v = v.normalize();
        for side in [Side::Left, Side::Right] {
            let twice = householder_apply(&v, &householder_apply(&v, &m, side).unwrap(), side).unwrap();
            prop_assert!((twice - &m).amax() < 1e-12);
        }
    }

    #[test]
    fn qr_oracle_factors(m in square(5)) {
        let m = m + Mat::identity(5, 5) * 3.0;
        let (q, r) = qr_oracle(&m, &[1.0; 5]).unwrap();
        prop_assert!((q.transpose() * &q - Mat::identity(5, 5)).amax() < 1e-10);
        prop_assert!((&q * &r - &m).amax() < 1e-10 * m.amax());
        for i in 0..5 {
            prop_assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                prop_assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn eigen_real_parts_sum_to_trace(m in square(6)) {
        let re = eig_real_parts(&m).unwrap();
        prop_assert!((re.iter().sum::<f64>() - m.trace()).abs() < 1e-8 * (1.0 + m.amax()));
        prop_assert!(re.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn integrated_frame_triangularizes(c in square(5), w in prop::collection::vec(-0.4f64..0.4, 7), p in 1usize..4) {
        let d = 5;
        let m = ReflectorStack::flat_len(d, p);
        let c2 = c.clone();
        let rhs = move |_t: f64, s: &Vector| {
            let st = ReflectorStack::from_flat(d, p, s.as_slice(), vec![1.0; p]).unwrap();
            Vector::from_vec(decouple(&st, &c2).unwrap().dwhat.iter().flat_map(|v| v.iter().copied()).collect())
        };
        let hook = move |_t: f64, s: &Vector| {
            let st = ReflectorStack::from_flat(d, p, s.as_slice(), vec![1.0; p]).unwrap();
            st.canonicalize().map(|c| Vector::from_vec(c.flat()))
        };
        let y0 = Vector::from_fn(m, |i, _| w[i % w.len()]);
        let sol = integrate(&IvpSpec::new(&rhs, 0.0, 3.0, y0).tolerances(1e-8, 1e-10).with_hook(&hook)).unwrap();
        for y in sol.y.iter().step_by(5) {
            let st = ReflectorStack::from_flat(d, p, y.as_slice(), vec![1.0; p]).unwrap();
            let dec = decouple(&st, &c).unwrap();
            prop_assert!(dec.d.lower_leakage() < 1e-8);
            prop_assert!(dec.leakage < 1e-8);
        }
    }
}

#[test]
fn ivp_error_scales_with_tolerance() {
    let rhs = |_t: f64, y: &Vector| -y;
    let mut pts = Vec::new();
    for e in 4..=10 {
        let rtol = 10f64.powi(-e);
        let sol = integrate(&IvpSpec::new(&rhs, 0.0, 1.0, Vector::from_element(1, 1.0)).tolerances(rtol, rtol * 1e-3)).unwrap();
        let err = (sol.last()[0] - (-1.0f64).exp()).abs();
        pts.push((rtol.ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope - 1.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn ivp_backward_run_returns_to_start() {
    let rhs = |_t: f64, y: &Vector| Vector::from_vec(vec![y[1], 0.5 * (1.0 - y[0] * y[0]) * y[1] - y[0]]);
    let y0 = Vector::from_vec(vec![1.0, 0.5]);
    let rtol = 1e-8;
    let fwd = integrate(&IvpSpec::new(&rhs, 0.0, 2.0, y0.clone()).tolerances(rtol, rtol)).unwrap();
    let back = integrate(&IvpSpec::new(&rhs, 2.0, 0.0, fwd.last().clone()).tolerances(rtol, rtol)).unwrap();
    assert!((back.last() - &y0).amax() < 100.0 * rtol);
}

#[test]
fn bvp_two_exponential_closed_form() {
    let fun = |_t: f64, y: &Vector| Vector::from_vec(vec![y[1], y[0]]);
    let bc = |a: &Vector, b: &Vector| Vector::from_vec(vec![a[0] - 1.0, b[0]]);
    let mesh = uniform_mesh(0.0, 1.0, 5);
    let guess = mesh.iter().map(|_| Vector::zeros(2)).collect();
    let sol = ode_bvp::solve(&BvpSpec::new(&fun, &bc, mesh, guess).tol(1e-8)).unwrap();
    let exact = |t: f64| (1.0 - t).sinh() / 1.0f64.sinh();
    for &t in &[0.0, 0.25, 0.5, 0.9, 1.0] {
        assert!((sol.eval(t).unwrap()[0] - exact(t)).abs() < 1e-8);
    }
    assert!(sol.bc_residual <= 1e-8);
}

#[test]
fn bvp_converges_at_fourth_order() {
    let fun = |_t: f64, y: &Vector| Vector::from_vec(vec![y[1], -y[0]]);
    let bc = |a: &Vector, b: &Vector| Vector::from_vec(vec![a[0], b[0] - 1.0]);
    let mut pts = Vec::new();
    for m in [3usize, 5, 9, 17] {
        let mesh = uniform_mesh(0.0, FRAC_PI_2, m);
        let guess = mesh.iter().map(|_| Vector::zeros(2)).collect();
        // A loose tolerance keeps the mesh fixed.
        let sol = ode_bvp::solve(&BvpSpec::new(&fun, &bc, mesh, guess).tol(1.0)).unwrap();
        assert_eq!(sol.len(), m);
        let err = (0..=200)
            .map(|i| {
                let t = FRAC_PI_2 * i as f64 / 200.0;
                (sol.eval(t).unwrap()[0] - t.sin()).abs()
            })
            .fold(0.0, f64::max);
        pts.push(((FRAC_PI_2 / (m - 1) as f64).ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope - 4.0).abs() <= 0.5, "slope {slope}");
}

#[test]
fn bvp_hook_output_is_a_fixpoint() {
    // Angle kept in (−π, π]: the hook wraps it, and the solution crosses π.
    use std::f64::consts::PI;
    let fun = |_t: f64, y: &Vector| Vector::from_vec(vec![1.0 + 0.0 * y[0]]);
    let wrap = |th: f64| {
        let r = (th + PI).rem_euclid(2.0 * PI) - PI;
        if r == -PI { PI } else { r }
    };
    let hook = move |_t: f64, y: &Vector| {
        let w = wrap(y[0]);
        if (w - y[0]).abs() > 1e-12 { Some(Vector::from_vec(vec![w])) } else { None }
    };
    let align = move |r: &Vector, y: &Vector| {
        let k = ((r[0] - y[0]) / (2.0 * PI)).round();
        if k != 0.0 { Some(Vector::from_vec(vec![y[0] + 2.0 * PI * k])) } else { None }
    };
    let bc = |a: &Vector, _b: &Vector| Vector::from_vec(vec![a[0] - 2.5]);
    let mesh = uniform_mesh(0.0, 2.0, 9);
    let guess = mesh.iter().map(|t| Vector::from_vec(vec![2.5 + t])).collect();
    let spec = BvpSpec::new(&fun, &bc, mesh, guess).tol(1e-8).with_hook(&hook).with_align(&align);
    let sol = ode_bvp::solve(&spec).unwrap();
    assert!(!sol.rewrites.is_empty());
    for (t, y) in sol.t.iter().zip(&sol.y) {
        assert!(hook(*t, y).is_none());
        assert!((y[0] - wrap(2.5 + t)).abs() < 1e-8);
    }
}
