//! Scalar McKean-Vlasov models in kernel form and terminal payoffs.
//!
//! A model has drift
//!
//! ```text
//! b(t, x, mu) = beta(t, x) + \int kappa(t, x, y) mu(dy)
//! ```
//!
//! and a constant diffusion coefficient `sigma`. Kernels that factor as
//! `kappa(t, x, y) = sum_r a_r(t, x) c_r(t, y)` can advertise the
//! factorisation, which turns the interaction over an `N`-point cloud into
//! `O(N)` work instead of `O(N^2)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Backend};
use crate::measures::{Normalization, WeightedCloud};

/// Largest supported rank of a separable kernel factorisation.
pub const MAX_RANK: usize = 4;

/// Drift ingredients of a kernel-form model, with analytic derivatives.
pub trait Kernel: Send + Sync {
    fn beta(&self, t: f64, x: f64) -> f64;
    fn beta_dx(&self, t: f64, x: f64) -> f64;
    fn kappa(&self, t: f64, x: f64, y: f64) -> f64;
    fn kappa_dx(&self, t: f64, x: f64, y: f64) -> f64;
    fn kappa_dy(&self, t: f64, x: f64, y: f64) -> f64;

    /// Rank of the factorisation `kappa = sum_r a_r(x) c_r(y)`, or 0 if the
    /// kernel only supports direct evaluation. Must not exceed [`MAX_RANK`].
    fn separable_rank(&self) -> usize {
        0
    }

    /// False when `kappa` vanishes identically; the cloud is then never summed.
    fn interacting(&self) -> bool {
        true
    }

    /// Writes `c_r(t, y)` for `r < separable_rank()`.
    fn factor_y(&self, _t: f64, _y: f64, _out: &mut [f64]) {}

    /// Writes `a_r(t, x)`.
    fn factor_x(&self, _t: f64, _x: f64, _out: &mut [f64]) {}

    /// Writes `d a_r / dx (t, x)`.
    fn factor_x_dx(&self, _t: f64, _x: f64, _out: &mut [f64]) {}
}

/// Kuramoto oscillators: `beta = -sin x`, `kappa = K sin(y - x)`.
#[derive(Debug, Clone, Copy)]
pub struct Kuramoto {
    pub coupling: f64,
}

impl Kernel for Kuramoto {
    fn beta(&self, _t: f64, x: f64) -> f64 {
        -x.sin()
    }
    fn beta_dx(&self, _t: f64, x: f64) -> f64 {
        -x.cos()
    }
    fn kappa(&self, _t: f64, x: f64, y: f64) -> f64 {
        self.coupling * (y - x).sin()
    }
    fn kappa_dx(&self, _t: f64, x: f64, y: f64) -> f64 {
        -self.coupling * (y - x).cos()
    }
    fn kappa_dy(&self, _t: f64, x: f64, y: f64) -> f64 {
        self.coupling * (y - x).cos()
    }
    fn separable_rank(&self) -> usize {
        2
    }
    // sin(y - x) = sin y cos x - cos y sin x
    fn factor_y(&self, _t: f64, y: f64, out: &mut [f64]) {
        let (s, c) = y.sin_cos();
        out[0] = s;
        out[1] = c;
    }
    fn factor_x(&self, _t: f64, x: f64, out: &mut [f64]) {
        let (s, c) = x.sin_cos();
        out[0] = self.coupling * c;
        out[1] = -self.coupling * s;
    }
    fn factor_x_dx(&self, _t: f64, x: f64, out: &mut [f64]) {
        let (s, c) = x.sin_cos();
        out[0] = -self.coupling * s;
        out[1] = -self.coupling * c;
    }
}

/// Ornstein-Uhlenbeck drift `-x` with no interaction.
#[derive(Debug, Clone, Copy)]
pub struct LinearOu;

impl Kernel for LinearOu {
    fn beta(&self, _t: f64, x: f64) -> f64 {
        -x
    }
    fn beta_dx(&self, _t: f64, _x: f64) -> f64 {
        -1.0
    }
    fn kappa(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn kappa_dx(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn kappa_dy(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn interacting(&self) -> bool {
        false
    }
}

/// Attraction to the mean: `kappa = y - x`, so `b = mean(mu) - x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearMeanField;

impl Kernel for LinearMeanField {
    fn beta(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn beta_dx(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn kappa(&self, _t: f64, x: f64, y: f64) -> f64 {
        y - x
    }
    fn kappa_dx(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        -1.0
    }
    fn kappa_dy(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        1.0
    }
    fn separable_rank(&self) -> usize {
        2
    }
    fn factor_y(&self, _t: f64, y: f64, out: &mut [f64]) {
        out[0] = y;
        out[1] = 1.0;
    }
    fn factor_x(&self, _t: f64, x: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = -x;
    }
    fn factor_x_dx(&self, _t: f64, _x: f64, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -1.0;
    }
}

/// No drift at all; the state is scaled Brownian motion.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDrift;

impl Kernel for ZeroDrift {
    fn beta(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn beta_dx(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn kappa(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn kappa_dx(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn kappa_dy(&self, _t: f64, _x: f64, _y: f64) -> f64 {
        0.0
    }
    fn interacting(&self) -> bool {
        false
    }
}

/// Keys accepted by [`ModelSpec::from_key`].
pub const MODEL_KEYS: &[&str] = &["kuramoto", "linear-ou", "linear-mean-field", "zero-drift"];

/// A kernel-form model together with its constant diffusion coefficient.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    sigma: f64,
    kernel: Arc<dyn Kernel>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("sigma", &self.sigma)
            .field("separable_rank", &self.kernel.separable_rank())
            .finish()
    }
}

impl ModelSpec {
    /// `sigma` must be finite and non-negative; `sigma = 0` gives
    /// deterministic dynamics.
    pub fn new(name: impl Into<String>, sigma: f64, kernel: Arc<dyn Kernel>) -> Result<Self> {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        if kernel.separable_rank() > MAX_RANK {
            return Err(Error::Config(format!(
                "separable rank {} exceeds the supported maximum {MAX_RANK}",
                kernel.separable_rank()
            )));
        }
        Ok(Self { name: name.into(), sigma, kernel })
    }

    pub fn kuramoto(coupling: f64, sigma: f64) -> Result<Self> {
        Self::new("kuramoto", sigma, Arc::new(Kuramoto { coupling }))
    }

    pub fn linear_ou(sigma: f64) -> Result<Self> {
        Self::new("linear-ou", sigma, Arc::new(LinearOu))
    }

    pub fn linear_mean_field(sigma: f64) -> Result<Self> {
        Self::new("linear-mean-field", sigma, Arc::new(LinearMeanField))
    }

    pub fn zero_drift(sigma: f64) -> Result<Self> {
        Self::new("zero-drift", sigma, Arc::new(ZeroDrift))
    }

    /// Built-in registry. `coupling` is only read by `"kuramoto"`.
    pub fn from_key(key: &str, coupling: f64, sigma: f64) -> Result<Self> {
        match key {
            "kuramoto" => Self::kuramoto(coupling, sigma),
            "linear-ou" => Self::linear_ou(sigma),
            "linear-mean-field" => Self::linear_mean_field(sigma),
            "zero-drift" => Self::zero_drift(sigma),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected one of {})",
                MODEL_KEYS.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kernel(&self) -> &dyn Kernel {
        self.kernel.as_ref()
    }

    /// Whether the kernel admits the `O(N)` separable evaluation.
    pub fn reduction_hint(&self) -> bool {
        self.kernel.separable_rank() > 0
    }

    /// Summarises a cloud for repeated drift evaluation. Uses the separable
    /// route when the kernel supports it.
    pub fn mean_field<'a>(
        &self,
        backend: Backend,
        t: f64,
        points: &'a [f64],
        weights: Option<&'a [f64]>,
        normalization: Normalization,
    ) -> Result<MeanField<'a>> {
        self.build_field(backend, t, points, weights, normalization, self.reduction_hint())
    }

    /// Same as [`ModelSpec::mean_field`] but always keeps the direct double sum.
    pub fn mean_field_direct<'a>(
        &self,
        t: f64,
        points: &'a [f64],
        weights: Option<&'a [f64]>,
        normalization: Normalization,
    ) -> Result<MeanField<'a>> {
        self.build_field(Backend::Sequential, t, points, weights, normalization, false)
    }

    fn build_field<'a>(
        &self,
        backend: Backend,
        t: f64,
        points: &'a [f64],
        weights: Option<&'a [f64]>,
        normalization: Normalization,
        separable: bool,
    ) -> Result<MeanField<'a>> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Domain("empty cloud".into()));
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::Domain(format!(
                    "cloud has {n} points but {} weights",
                    w.len()
                )));
            }
        }
        let denom = match normalization {
            Normalization::RawAverage => n as f64,
            Normalization::Probability => match weights {
                None => n as f64,
                Some(w) => {
                    let total = exec::chunked_sum(backend, n, |i| w[i]);
                    if !(total > 0.0) {
                        return Err(Error::Domain(format!(
                            "cloud weights must have positive total, got {total}"
                        )));
                    }
                    total
                }
            },
        };
        if !self.kernel.interacting() {
            return Ok(MeanField::Separable { moments: Vec::new() });
        }
        if !separable {
            return Ok(MeanField::Direct { points, weights, denom });
        }
        let rank = self.kernel.separable_rank();
        let kernel = self.kernel.as_ref();
        let mut moments = exec::chunked_sums(backend, n, rank, |i, acc| {
            let mut c = [0.0; MAX_RANK];
            kernel.factor_y(t, points[i], &mut c[..rank]);
            match weights {
                Some(w) => {
                    for r in 0..rank {
                        acc[r] += w[i] * c[r];
                    }
                }
                None => {
                    for r in 0..rank {
                        acc[r] += c[r];
                    }
                }
            }
        });
        for m in &mut moments {
            *m /= denom;
        }
        Ok(MeanField::Separable { moments })
    }

    /// `b(t, x, mu)` for a cloud `mu`; see [`MeanField::drift`].
    pub fn drift(&self, t: f64, x: f64, cloud: &WeightedCloud) -> Result<f64> {
        let field = self.mean_field(
            Backend::Sequential,
            t,
            cloud.points(),
            Some(cloud.weights()),
            cloud.normalization(),
        )?;
        Ok(field.drift(self, t, x))
    }
}

/// A cloud reduced to what the drift needs: kernel moments when the kernel
/// is separable, otherwise a borrow of the points for the direct sum.
#[derive(Debug, Clone)]
pub enum MeanField<'a> {
    Separable {
        /// `sum_j w_j c_r(y_j) / denom`
        moments: Vec<f64>,
    },
    Direct {
        points: &'a [f64],
        weights: Option<&'a [f64]>,
        denom: f64,
    },
}

impl MeanField<'_> {
    /// `\int kappa(t, x, y) mu(dy)`.
    pub fn interaction(&self, kernel: &dyn Kernel, t: f64, x: f64) -> f64 {
        match self {
            MeanField::Separable { moments } => {
                let mut a = [0.0; MAX_RANK];
                let rank = moments.len();
                kernel.factor_x(t, x, &mut a[..rank]);
                (0..rank).map(|r| a[r] * moments[r]).sum()
            }
            MeanField::Direct { points, weights, denom } => {
                let s: f64 = match weights {
                    Some(w) => points.iter().zip(*w).map(|(&y, &wj)| wj * kernel.kappa(t, x, y)).sum(),
                    None => points.iter().map(|&y| kernel.kappa(t, x, y)).sum(),
                };
                s / denom
            }
        }
    }

    /// `d/dx \int kappa(t, x, y) mu(dy)` with the measure held fixed.
    pub fn interaction_dx(&self, kernel: &dyn Kernel, t: f64, x: f64) -> f64 {
        match self {
            MeanField::Separable { moments } => {
                let mut a = [0.0; MAX_RANK];
                let rank = moments.len();
                kernel.factor_x_dx(t, x, &mut a[..rank]);
                (0..rank).map(|r| a[r] * moments[r]).sum()
            }
            MeanField::Direct { points, weights, denom } => {
                let s: f64 = match weights {
                    Some(w) => points
                        .iter()
                        .zip(*w)
                        .map(|(&y, &wj)| wj * kernel.kappa_dx(t, x, y))
                        .sum(),
                    None => points.iter().map(|&y| kernel.kappa_dx(t, x, y)).sum(),
                };
                s / denom
            }
        }
    }

    pub fn drift(&self, model: &ModelSpec, t: f64, x: f64) -> f64 {
        let k = model.kernel();
        k.beta(t, x) + self.interaction(k, t, x)
    }

    pub fn drift_dx(&self, model: &ModelSpec, t: f64, x: f64) -> f64 {
        let k = model.kernel();
        k.beta_dx(t, x) + self.interaction_dx(k, t, x)
    }
}

/// Keys accepted by [`Payoff::from_key`].
pub const PAYOFF_KEYS: &[&str] = &["exp", "tanh", "constant"];

/// Terminal payoff `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Payoff {
    /// `a exp(b x)`; `2 G'/G = 2b`.
    Exp { a: f64, b: f64 },
    /// `(tanh(a (x - b)) + 1) / 2`, a smoothed indicator of `x >= b`.
    Tanh { a: f64, b: f64 },
    Constant { c: f64 },
}

impl Payoff {
    pub fn exp(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("exp payoff needs finite a >= 0 and b, got a={a}, b={b}")));
        }
        Ok(Payoff::Exp { a, b })
    }

    pub fn tanh(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("tanh payoff needs finite a and b, got a={a}, b={b}")));
        }
        Ok(Payoff::Tanh { a, b })
    }

    pub fn constant(c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::Config(format!("constant payoff needs finite c >= 0, got {c}")));
        }
        Ok(Payoff::Constant { c })
    }

    /// Built-in registry; the constant payoff takes its value from `a`.
    pub fn from_key(key: &str, a: f64, b: f64) -> Result<Self> {
        match key {
            "exp" => Self::exp(a, b),
            "tanh" => Self::tanh(a, b),
            "constant" => Self::constant(a),
            other => Err(Error::Config(format!(
                "unknown payoff '{other}' (expected one of {})",
                PAYOFF_KEYS.join(", ")
            ))),
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Payoff::Exp { .. } => "exp",
            Payoff::Tanh { .. } => "tanh",
            Payoff::Constant { .. } => "constant",
        }
    }

    /// Named parameters, for reports.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Payoff::Exp { a, b } | Payoff::Tanh { a, b } => vec![("a", a), ("b", b)],
            Payoff::Constant { c } => vec![("c", c)],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Payoff::Exp { a, b } => a * (b * x).exp(),
            // (tanh(z) + 1) / 2 == logistic(2z), which does not cancel for z << 0.
            Payoff::Tanh { a, b } => logistic(2.0 * a * (x - b)),
            Payoff::Constant { c } => c,
        }
    }

    /// `log G(x)`, `-inf` where the payoff vanishes.
    pub fn log_eval(&self, x: f64) -> f64 {
        match *self {
            Payoff::Exp { a, b } => a.ln() + b * x,
            Payoff::Tanh { a, b } => -softplus(-2.0 * a * (x - b)),
            Payoff::Constant { c } => c.ln(),
        }
    }

    /// Terminal adjoint value `2 G'(x) / G(x)`.
    pub fn terminal_adjoint(&self, x: f64) -> Result<f64> {
        if self.eval(x) == 0.0 {
            return Err(Error::PayoffVanishes { x });
        }
        Ok(match *self {
            Payoff::Exp { b, .. } => 2.0 * b,
            Payoff::Tanh { a, b } => 2.0 * a * (1.0 - (a * (x - b)).tanh()),
            Payoff::Constant { .. } => 0.0,
        })
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
