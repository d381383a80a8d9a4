//! Controlled discrete-time maps and the Gumowski-Mira benchmark.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any coordinate beyond this magnitude is treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// A point in the map's native phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct RawState(pub Vec<f64>);

impl RawState {
    pub fn new(coords: Vec<f64>) -> Self {
        RawState(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Max-norm distance to another state of the same dimension.
    pub fn dist_inf(&self, other: &RawState) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for RawState {
    fn from(v: Vec<f64>) -> Self {
        RawState(v)
    }
}

/// Actuation vector fed to the map.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput(pub Vec<f64>);

impl ControlInput {
    pub fn zeros(m: usize) -> Self {
        ControlInput(vec![0.0; m])
    }

    /// Checked constructor: finite and within `[-u_max, u_max]`.
    pub fn bounded(values: Vec<f64>, u_max: f64) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > u_max) {
            return Err(Error::Contract(format!(
                "control value {v} outside [-{u_max}, {u_max}]"
            )));
        }
        Ok(ControlInput(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A discrete-time plant `x_{k+1} = F(x_k, u_k)`.
///
/// The learner only ever calls [`ControlledMap::step`]; it never reads the
/// parameters of a concrete map.
pub trait ControlledMap: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Raw map evaluation without the divergence guard.
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    fn step(&self, x: &RawState, u: &ControlInput) -> Result<RawState> {
        if x.dim() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: x.dim(),
            });
        }
        if u.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: u.dim(),
            });
        }
        let next = self.eval(x.coords(), u.values());
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence {
                step: None,
                state: next,
            });
        }
        Ok(RawState(next))
    }
}

/// Uncontrolled orbit `[x0, x1, ..., x_steps]`.
pub fn trajectory<M: ControlledMap + ?Sized>(
    map: &M,
    x0: &RawState,
    steps: usize,
) -> Result<Vec<RawState>> {
    let zero = ControlInput::zeros(map.input_dim());
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    for k in 0..steps {
        let next = map.step(&out[k], &zero).map_err(|e| with_step(e, k))?;
        out.push(next);
    }
    Ok(out)
}

pub(crate) fn with_step(e: Error, k: usize) -> Error {
    match e {
        Error::Divergence { state, .. } => Error::Divergence {
            step: Some(k),
            state,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumowskiMiraParams {
    pub b: f64,
    pub eta: f64,
    pub input_gain: f64,
}

impl Default for GumowskiMiraParams {
    fn default() -> Self {
        GumowskiMiraParams {
            b: 0.008,
            eta: -0.8,
            input_gain: 0.1,
        }
    }
}

impl GumowskiMiraParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("b", self.b), ("eta", self.eta), ("input_gain", self.input_gain)] {
            if !v.is_finite() {
                errs.push(format!("gumowski_mira.{name} must be finite"));
            }
        }
        errs
    }
}

/// `f1(x) = eta*x + 2(1-eta)x^2 / (1+x^2)`.
pub fn f1(x: f64, params: &GumowskiMiraParams) -> f64 {
    let eta = params.eta;
    eta * x + 2.0 * (1.0 - eta) * x * x / (1.0 + x * x)
}

fn f1_prime(x: f64, eta: f64) -> f64 {
    let d = 1.0 + x * x;
    eta + 4.0 * (1.0 - eta) * x / (d * d)
}

fn f1_second(x: f64, eta: f64) -> f64 {
    let d = 1.0 + x * x;
    4.0 * (1.0 - eta) * (1.0 - 3.0 * x * x) / (d * d * d)
}

/// The Gumowski-Mira map with control entering the x-update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GumowskiMira {
    pub params: GumowskiMiraParams,
}

impl GumowskiMira {
    pub fn new(params: GumowskiMiraParams) -> Self {
        GumowskiMira { params }
    }
}

impl ControlledMap for GumowskiMira {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let (xk, yk) = (x[0], x[1]);
        let xn = yk + p.b * (1.0 - 0.05 * yk * yk) * yk + f1(xk, p) + p.input_gain * u[0];
        // f1 sees the updated x here.
        let yn = -xk + f1(xn, p);
        vec![xn, yn]
    }
}

/// Fixed points on the `y = 0` branch: roots of `f1(x) = x`.
///
/// `g(x) = f1(x) - x` has a double root at `x = 1`, so plain bisection can
/// miss it. Each grid start runs Newton on `g/g'`, which keeps quadratic
/// convergence at multiple roots.
pub fn true_fixed_points(params: &GumowskiMiraParams) -> Result<Vec<RawState>> {
    const LO: f64 = -10.0;
    const HI: f64 = 10.0;
    const STARTS: usize = 401;
    let eta = params.eta;
    let g = |x: f64| f1(x, params) - x;
    let g1 = |x: f64| f1_prime(x, eta) - 1.0;
    let g2 = |x: f64| f1_second(x, eta);

    let mut roots: Vec<f64> = Vec::new();
    for i in 0..STARTS {
        let mut x = LO + (HI - LO) * i as f64 / (STARTS - 1) as f64;
        let mut converged = false;
        for _ in 0..100 {
            let (gv, g1v, g2v) = (g(x), g1(x), g2(x));
            if gv == 0.0 {
                converged = true;
                break;
            }
            let denom = g1v * g1v - gv * g2v;
            if denom == 0.0 || !denom.is_finite() {
                break;
            }
            let dx = gv * g1v / denom;
            x -= dx;
            if !x.is_finite() || x.abs() > 2.0 * HI {
                break;
            }
            if dx.abs() < 1e-15 * (1.0 + x.abs()) {
                converged = true;
                break;
            }
        }
        if converged && g(x).abs() < 1e-12 && !roots.iter().any(|r| (r - x).abs() < 1e-6) {
            roots.push(x);
        }
    }
    if roots.is_empty() {
        return Err(Error::RootFinding(format!(
            "no root of f1(x) = x found in [{LO}, {HI}]"
        )));
    }
    roots.sort_by(|a, b| a.total_cmp(b));
    Ok(roots.into_iter().map(|x| RawState(vec![x, 0.0])).collect())
}
