//! Reparameterizable distribution families: Beta (sampled through Kumaraswamy
//! or implicit differentiation), the binary Concrete relaxation, and the
//! Gaussian. Every sampler returns its pathwise derivatives so callers can
//! splice them into a gradient tape.
//!
//! None of these functions hold RNG state; noise is always passed in.

pub mod special;

pub use special::{digamma, ln_gamma, log_beta_fn, trigamma};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use special::{
    beta_inc_reg, beta_inc_reg_inv, beta_pdf, digamma_unchecked, ln_beta_unchecked,
    trigamma_unchecked,
};

/// Lower/upper clamp applied to every probability before a log or logit.
pub const PROB_EPS: f64 = 1e-6;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    p.ln() - (1.0 - p).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        positive("beta a", a)?;
        positive("beta b", b)?;
        Ok(Self { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcreteParams {
    /// Bernoulli probability being relaxed.
    pub pi: f64,
    /// Relaxation temperature.
    pub lambda: f64,
}

impl ConcreteParams {
    pub fn new(pi: f64, lambda: f64) -> Result<Self> {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::OutOfRange {
                what: "concrete pi",
                value: pi,
            });
        }
        positive("concrete lambda", lambda)?;
        Ok(Self { pi, lambda })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        positive("gaussian sigma", sigma)?;
        Ok(Self { mu, sigma })
    }

    pub fn standard() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

/// Value of a KL term together with its gradient w.r.t. the two parameters
/// of `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlWithGrad {
    pub value: f64,
    pub d_first: f64,
    pub d_second: f64,
}

/// Closed-form `KL(Beta(a_q, b_q) || Beta(a_p, b_p))`.
pub fn kl_beta(q: BetaParams, p: BetaParams) -> Result<f64> {
    let q = BetaParams::new(q.a, q.b)?;
    let p = BetaParams::new(p.a, p.b)?;
    Ok(kl_beta_with_grad(q, p).value)
}

/// [`kl_beta`] plus its partial derivatives w.r.t. `(a_q, b_q)`. Parameters
/// are assumed valid.
pub fn kl_beta_with_grad(q: BetaParams, p: BetaParams) -> KlWithGrad {
    let s = q.a + q.b;
    let psi_s = digamma_unchecked(s);
    let e_log_x = digamma_unchecked(q.a) - psi_s;
    let e_log_1mx = digamma_unchecked(q.b) - psi_s;
    let value = ln_beta_unchecked(p.a, p.b) - ln_beta_unchecked(q.a, q.b)
        + (q.a - p.a) * e_log_x
        + (q.b - p.b) * e_log_1mx;
    let tri_s = trigamma_unchecked(s);
    let d_first = (q.a - p.a) * (trigamma_unchecked(q.a) - tri_s) - (q.b - p.b) * tri_s;
    let d_second = (q.b - p.b) * (trigamma_unchecked(q.b) - tri_s) - (q.a - p.a) * tri_s;
    KlWithGrad {
        value,
        d_first,
        d_second,
    }
}

/// How stick fractions `v ~ q(v)` are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSampler {
    /// Kumaraswamy(a, b) inverse CDF.
    #[default]
    Kumaraswamy,
    /// Exact Beta(a, b) inverse CDF with implicit-function gradients.
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSample {
    pub v: f64,
    pub dv_da: f64,
    pub dv_db: f64,
}

/// Reparameterized draw of a stick fraction from uniform noise `u`.
///
/// The result is clamped to `[PROB_EPS, 1 - PROB_EPS]`; a clamped sample has
/// zero pathwise derivative.
pub fn sample_beta_reparam(q: BetaParams, u: f64, sampler: BetaSampler) -> BetaSample {
    let raw = match sampler {
        BetaSampler::Kumaraswamy => kumaraswamy_sample(q, u),
        BetaSampler::Implicit => implicit_beta_sample(q, u),
    };
    if raw.v <= PROB_EPS || raw.v >= 1.0 - PROB_EPS || !raw.v.is_finite() {
        let v = if raw.v.is_finite() { clamp_prob(raw.v) } else { PROB_EPS };
        return BetaSample {
            v,
            dv_da: 0.0,
            dv_db: 0.0,
        };
    }
    raw
}

fn kumaraswamy_sample(q: BetaParams, u: f64) -> BetaSample {
    let (a, b) = (q.a, q.b);
    let log_1mu = (-u).ln_1p();
    let t = (log_1mu / b).exp();
    let log_1mt = (-t).ln_1p();
    let v = (log_1mt / a).exp();
    let dv_da = -v * log_1mt / (a * a);
    let dt_db = -t * log_1mu / (b * b);
    let dv_dt = -v / (a * (1.0 - t));
    BetaSample {
        v,
        dv_da,
        dv_db: dv_dt * dt_db,
    }
}

fn implicit_beta_sample(q: BetaParams, u: f64) -> BetaSample {
    let (a, b) = (q.a, q.b);
    let v = beta_inc_reg_inv(a, b, u);
    let pdf = beta_pdf(a, b, v);
    // F(v(a,b); a, b) = u  ⇒  dv/da = -∂F/∂a / f(v)
    let ha = 1e-6 * a.max(1.0);
    let hb = 1e-6 * b.max(1.0);
    let df_da = (beta_inc_reg(a + ha, b, v) - beta_inc_reg(a - ha, b, v)) / (2.0 * ha);
    let df_db = (beta_inc_reg(a, b + hb, v) - beta_inc_reg(a, b - hb, v)) / (2.0 * hb);
    BetaSample {
        v,
        dv_da: -df_da / pdf,
        dv_db: -df_db / pdf,
    }
}

/// Log-density of the pre-sigmoid binary Concrete variable `y`.
///
/// The location is the log-odds of `pi`, which makes this exactly the density
/// of the `y` produced by [`sample_concrete`].
pub fn concrete_log_density(y: f64, p: ConcreteParams) -> Result<f64> {
    let p = ConcreteParams::new(p.pi, p.lambda)?;
    Ok(concrete_log_density_logit(y, logit(p.pi), p.lambda))
}

/// `log λ − λy + ℓ − 2 log(1 + exp(−λy + ℓ))` with `ℓ` the log-odds.
pub fn concrete_log_density_logit(y: f64, log_odds: f64, lambda: f64) -> f64 {
    let s = -lambda * y + log_odds;
    lambda.ln() + s - 2.0 * softplus(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcreteSample {
    pub y: f64,
    pub z: f64,
    pub dy_dpi: f64,
    pub dz_dpi: f64,
}

/// Logistic-noise relaxation: `y = (logit π + log u − log(1−u)) / λ`, `z = σ(y)`.
pub fn sample_concrete(p: ConcreteParams, u: f64) -> Result<ConcreteSample> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::OutOfRange {
            what: "concrete noise u",
            value: u,
        });
    }
    let p = ConcreteParams::new(p.pi, p.lambda)?;
    let noise = u.ln() - (-u).ln_1p();
    let pi = clamp_prob(p.pi);
    let y = (logit(pi) + noise) / p.lambda;
    let z = sigmoid(y).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    let dy_dpi = 1.0 / (p.lambda * pi * (1.0 - pi));
    Ok(ConcreteSample {
        y,
        z,
        dy_dpi,
        dz_dpi: z * (1.0 - z) * dy_dpi,
    })
}

/// Monte-Carlo `KL(q || p)` between binary Concrete distributions, evaluated in
/// `y` space with one sample from `q` per uniform in `uniforms`.
pub fn kl_concrete_mc(q: ConcreteParams, p: ConcreteParams, uniforms: &[f64]) -> Result<f64> {
    if uniforms.is_empty() {
        return Err(Error::Empty("concrete KL needs at least one sample"));
    }
    let p = ConcreteParams::new(p.pi, p.lambda)?;
    let (lq, lp) = (logit(q.pi), logit(p.pi));
    let mut acc = 0.0;
    for &u in uniforms {
        let s = sample_concrete(q, u)?;
        acc += concrete_log_density_logit(s.y, lq, q.lambda)
            - concrete_log_density_logit(s.y, lp, p.lambda);
    }
    Ok(acc / uniforms.len() as f64)
}

/// Closed-form `KL(N(μ_q, σ_q²) || N(μ_p, σ_p²))`.
pub fn kl_gaussian(q: GaussianParams, p: GaussianParams) -> Result<f64> {
    let q = GaussianParams::new(q.mu, q.sigma)?;
    let p = GaussianParams::new(p.mu, p.sigma)?;
    Ok(kl_gaussian_with_grad(q, p).value)
}

/// [`kl_gaussian`] plus partials w.r.t. `(μ_q, σ_q)`.
pub fn kl_gaussian_with_grad(q: GaussianParams, p: GaussianParams) -> KlWithGrad {
    let var_p = p.sigma * p.sigma;
    let diff = q.mu - p.mu;
    KlWithGrad {
        value: (p.sigma / q.sigma).ln() + (q.sigma * q.sigma + diff * diff) / (2.0 * var_p) - 0.5,
        d_first: diff / var_p,
        d_second: -1.0 / q.sigma + q.sigma / var_p,
    }
}

/// `μ + σ ε`.
pub fn sample_gaussian_reparam(q: GaussianParams, eps: f64) -> f64 {
    q.mu + q.sigma * eps
}

fn positive(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive { what, value })
    }
}
