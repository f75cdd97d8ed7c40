//! JSON run configuration.

use inertial_core::householder::ReflectorStack;
use inertial_core::linalg::{Mat, Vector};
use inertial_core::manifold::{GapData, ManifoldQuery, Scheme};
use inertial_core::problems::{
    alternating_boundary, kse_galerkin, linear_benchmark, two_layer_lorenz, ProblemDef, Rotating2d, KSE_XI,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    #[serde(rename = "rotating_2d")]
    Rotating2d {
        #[serde(default = "ProblemConfig::default_sigma")]
        sigma: f64,
    },
    KseGalerkin {
        #[serde(default = "ProblemConfig::default_modes")]
        n_modes: usize,
        #[serde(default = "ProblemConfig::default_xi")]
        xi: f64,
    },
    TwoLayerLorenz {
        #[serde(rename = "K", default = "ProblemConfig::default_k")]
        k: usize,
        #[serde(rename = "J", default = "ProblemConfig::default_j")]
        j: usize,
        #[serde(default = "ProblemConfig::default_eps")]
        eps: f64,
        #[serde(default = "ProblemConfig::default_hx")]
        h_x: f64,
        #[serde(default = "one")]
        h_y: f64,
        #[serde(rename = "F", default = "ProblemConfig::default_forcing")]
        forcing: f64,
    },
    LinearBenchmark {
        a: Vec<f64>,
        b: Vec<f64>,
        #[serde(default)]
        c12: Vec<Vec<f64>>,
        #[serde(default)]
        amplitude: f64,
    },
}

impl ProblemConfig {
    fn default_sigma() -> f64 {
        0.1
    }
    fn default_modes() -> usize {
        15
    }
    fn default_xi() -> f64 {
        KSE_XI
    }
    fn default_k() -> usize {
        5
    }
    fn default_j() -> usize {
        4
    }
    fn default_eps() -> f64 {
        0.5
    }
    fn default_hx() -> f64 {
        -1.0
    }
    fn default_forcing() -> f64 {
        8.0
    }

    pub fn build(&self) -> Result<Box<dyn ProblemDef>, CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        Ok(match self {
            ProblemConfig::Rotating2d { sigma } => Box::new(Rotating2d { sigma: *sigma }),
            ProblemConfig::KseGalerkin { n_modes, xi } => {
                if *n_modes == 0 {
                    return bad("kse_galerkin needs n_modes ≥ 1");
                }
                Box::new(kse_galerkin(*n_modes, *xi))
            }
            ProblemConfig::TwoLayerLorenz { k, j, eps, h_x, h_y, forcing } => {
                if *k == 0 || *j == 0 || !(*eps > 0.0) {
                    return bad("two_layer_lorenz needs K, J ≥ 1 and eps > 0");
                }
                Box::new(two_layer_lorenz(*k, *j, *eps, *h_x, *h_y, *forcing))
            }
            ProblemConfig::LinearBenchmark { a, b, c12, amplitude } => {
                if a.is_empty() || b.is_empty() {
                    return bad("linear_benchmark needs non-empty a and b");
                }
                let c = if c12.is_empty() {
                    Mat::zeros(b.len(), a.len())
                } else {
                    if c12.len() != b.len() || c12.iter().any(|r| r.len() != a.len()) {
                        return bad("linear_benchmark c12 must be len(b) × len(a)");
                    }
                    Mat::from_fn(b.len(), a.len(), |i, j| c12[i][j])
                };
                Box::new(linear_benchmark(a.clone(), b.clone(), c, *amplitude))
            }
        })
    }
}

/// Slow boundary data: explicit values or `"alternating"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum YSpec {
    Values(Vec<f64>),
    Named(String),
}

/// Reflector data: explicit vectors, `"zero"` or `"random"` (seeded).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WhatSpec {
    Explicit(Vec<Vec<f64>>),
    Named(String),
}

impl Default for WhatSpec {
    fn default() -> Self {
        WhatSpec::Named("zero".into())
    }
}

impl WhatSpec {
    pub fn resolve(&self, d: usize, p: usize, seed: u64) -> Result<Vec<Vector>, CliError> {
        match self {
            WhatSpec::Explicit(v) => {
                if v.len() != p {
                    return Err(CliError::Config(format!("what_boundary needs {p} vectors, got {}", v.len())));
                }
                v.iter()
                    .enumerate()
                    .map(|(i, w)| {
                        if w.len() != d - i - 1 {
                            Err(CliError::Config(format!("what_boundary[{i}] needs length {}, got {}", d - i - 1, w.len())))
                        } else {
                            Ok(Vector::from_vec(w.clone()))
                        }
                    })
                    .collect()
            }
            WhatSpec::Named(n) if n == "zero" => Ok((1..=p).map(|i| Vector::zeros(d - i)).collect()),
            WhatSpec::Named(n) if n == "random" => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((1..=p)
                    .map(|i| {
                        let w = Vector::from_fn(d - i, |_, _| rng.gen_range(-1.0..1.0));
                        let radius = rng.gen_range(0.0..0.9);
                        if w.norm() > 0.0 {
                            w.normalize() * radius
                        } else {
                            w
                        }
                    })
                    .collect())
            }
            WhatSpec::Named(n) => Err(CliError::Config(format!("unknown what_boundary \"{n}\" (use zero, random or explicit vectors)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    #[serde(default)]
    pub t: f64,
    pub y0: YSpec,
    #[serde(default)]
    pub p: Option<usize>,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default)]
    pub what_boundary: WhatSpec,
    #[serde(default = "ManifoldConfig::default_bvp_tol")]
    pub bvp_tol: f64,
    #[serde(default = "ManifoldConfig::default_ivp_rtol")]
    pub ivp_rtol: f64,
    #[serde(default = "ManifoldConfig::default_ivp_atol")]
    pub ivp_atol: f64,
    #[serde(default = "ManifoldConfig::default_max_nodes")]
    pub max_nodes: usize,
}

impl ManifoldConfig {
    fn default_bvp_tol() -> f64 {
        1e-3
    }
    fn default_ivp_rtol() -> f64 {
        1e-6
    }
    fn default_ivp_atol() -> f64 {
        1e-9
    }
    fn default_max_nodes() -> usize {
        2000
    }

    pub fn query(&self, d: usize, seed: u64) -> Result<ManifoldQuery, CliError> {
        let y0 = match &self.y0 {
            YSpec::Values(v) => {
                if let Some(p) = self.p {
                    if p != v.len() {
                        return Err(CliError::Config(format!("p = {p} but y0 has {} entries", v.len())));
                    }
                }
                Vector::from_vec(v.clone())
            }
            YSpec::Named(n) if n == "alternating" => {
                let p = self.p.ok_or_else(|| CliError::Config("\"alternating\" y0 needs p".into()))?;
                alternating_boundary(p)
            }
            YSpec::Named(n) => return Err(CliError::Config(format!("unknown y0 \"{n}\""))),
        };
        let p = y0.len();
        if p == 0 || p >= d {
            return Err(CliError::Config(format!("need 1 ≤ p < d = {d}, got p = {p}")));
        }
        let mut q = ManifoldQuery::new(self.t, y0, self.horizon, d);
        q.what_boundary = self.what_boundary.resolve(d, p, seed)?;
        q.bvp_tol = self.bvp_tol;
        q.ivp_rtol = self.ivp_rtol;
        q.ivp_atol = self.ivp_atol;
        q.max_nodes = self.max_nodes;
        Ok(q)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub horizons: Vec<f64>,
    /// `[start, stop, count]`, appended to `horizons`.
    #[serde(default)]
    pub horizon_range: Option<(f64, f64, usize)>,
    /// Values of the first component of `ŵ_{1,−T}`, one sweep per value.
    #[serde(default)]
    pub what_first: Vec<f64>,
    #[serde(default)]
    pub defect_horizon: Option<f64>,
}

impl SweepConfig {
    pub fn horizons(&self) -> Vec<f64> {
        let mut h = self.horizons.clone();
        if let Some((a, b, n)) = self.horizon_range {
            match n {
                0 => {}
                1 => h.push(a),
                _ => h.extend((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64)),
            }
        }
        h
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub steps: usize,
    /// `euler` or `ab1` … `ab4`.
    #[serde(default = "TrajectoryConfig::default_scheme")]
    pub scheme: String,
}

impl TrajectoryConfig {
    fn default_scheme() -> String {
        "euler".into()
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        match self.scheme.as_str() {
            "euler" => Ok(Scheme::Euler),
            s => s
                .strip_prefix("ab")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|k| (1..=4).contains(k))
                .map(Scheme::AdamsBashforth)
                .ok_or_else(|| CliError::Config(format!("unknown scheme \"{s}\" (use euler or ab1..ab4)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoupleConfig {
    #[serde(default)]
    pub u0: Option<Vec<f64>>,
    pub p: usize,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    #[serde(default)]
    pub what0: WhatSpec,
    #[serde(default = "DecoupleConfig::default_samples")]
    pub samples: usize,
    #[serde(default = "DecoupleConfig::default_rtol")]
    pub rtol: f64,
    #[serde(default = "DecoupleConfig::default_atol")]
    pub atol: f64,
    /// Secant radius for the Lipschitz estimate; omit to skip estimation.
    #[serde(default)]
    pub estimate_radius: Option<f64>,
}

impl DecoupleConfig {
    fn default_samples() -> usize {
        101
    }
    fn default_rtol() -> f64 {
        1e-8
    }
    fn default_atol() -> f64 {
        1e-10
    }

    pub fn initial(&self, d: usize, seed: u64) -> Result<(Vector, ReflectorStack), CliError> {
        if self.p == 0 || self.p >= d {
            return Err(CliError::Config(format!("need 1 ≤ p < d = {d}, got p = {}", self.p)));
        }
        let u0 = match &self.u0 {
            Some(u) if u.len() == d => Vector::from_vec(u.clone()),
            Some(u) => return Err(CliError::Config(format!("u0 needs {d} entries, got {}", u.len()))),
            None => Vector::zeros(d),
        };
        let what = self.what0.resolve(d, self.p, seed)?;
        let stack = ReflectorStack::new(d, what, vec![1.0; self.p]).map_err(|e| CliError::Config(e.to_string()))?;
        Ok((u0, stack))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TboundConfig {
    #[serde(default = "one")]
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub l: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    pub tol: f64,
    #[serde(default = "one")]
    pub x0_norm: f64,
    #[serde(default)]
    pub t0: f64,
    /// Extra horizons at which to report the bound.
    #[serde(default)]
    pub horizons: Vec<f64>,
}

impl TboundConfig {
    pub fn gap(&self) -> Result<GapData, CliError> {
        let g = GapData::exact(self.k, self.alpha, self.beta, self.l).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(match self.sigma {
            Some(s) => g.with_sigma(s),
            None => g,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub manifold: Option<ManifoldConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub trajectory: Option<TrajectoryConfig>,
    #[serde(default)]
    pub decouple: Option<DecoupleConfig>,
    #[serde(default)]
    pub tbound: Option<TboundConfig>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn problem(&self) -> Result<Box<dyn ProblemDef>, CliError> {
        self.problem.as_ref().ok_or_else(|| CliError::Config("missing \"problem\" section".into()))?.build()
    }

    pub fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Config(format!("missing \"{name}\" section")))
    }
}
