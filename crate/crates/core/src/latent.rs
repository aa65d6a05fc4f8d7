//! Stick-breaking community memberships, gated features, and the prior
//! generative model.

use ndarray::Array2;
use rand::distr::{Distribution, Open01};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::box_muller;

/// Which side of the query/answer matrix a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    /// Truncation level (number of communities).
    pub k: usize,
    pub alpha_qry: f64,
    pub alpha_ans: f64,
    /// Prior standard deviation of feature strengths.
    pub sigma_prior: f64,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            k: 32,
            alpha_qry: 5.0,
            alpha_ans: 5.0,
            sigma_prior: 1.0,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("truncation level k must be at least 1".into()));
        }
        for (what, v) in [
            ("alpha_qry", self.alpha_qry),
            ("alpha_ans", self.alpha_ans),
            ("sigma_prior", self.sigma_prior),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositive { what, value: v });
            }
        }
        Ok(())
    }

    pub fn alpha(&self, role: Role) -> f64 {
        match role {
            Role::Query => self.alpha_qry,
            Role::Answer => self.alpha_ans,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub v: Vec<f64>,
    pub pi: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

/// `f = w ⊙ z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeature(pub Vec<f64>);

impl SparseFeature {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Cumulative products of stick fractions.
pub fn stick_breaking(v: &[f64]) -> Result<Vec<f64>> {
    let mut acc = 1.0;
    v.iter()
        .map(|&x| {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::OutOfRange {
                    what: "stick fraction",
                    value: x,
                });
            }
            acc *= x;
            Ok(acc)
        })
        .collect()
}

/// Draws one row from the truncated prior: Beta(α, 1) sticks, hard Bernoulli
/// memberships and Gaussian strengths.
pub fn sample_prior_row(cfg: &TruncationConfig, role: Role, rng: &mut impl Rng) -> LatentSample {
    let alpha = cfg.alpha(role);
    let v: Vec<f64> = (0..cfg.k)
        .map(|_| {
            // inverse CDF of Beta(α, 1) is u^(1/α)
            let u: f64 = Open01.sample(rng);
            u.powf(1.0 / alpha)
        })
        .collect();
    let pi = stick_breaking(&v).expect("open-interval sticks");
    let z = pi
        .iter()
        .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    let w = (0..cfg.k).map(|_| cfg.sigma_prior * box_muller(rng)).collect();
    LatentSample { v, pi, z, w }
}

/// Expected number of active communities under the prior, `Σ (α/(α+1))^k`.
pub fn expected_active(alpha: f64, k: usize) -> f64 {
    let r = alpha / (alpha + 1.0);
    (1..=k as i32).map(|i| r.powi(i)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorActiveStats {
    pub rows: usize,
    pub mean: f64,
    pub std_error: f64,
    pub expected: f64,
}

/// Monte-Carlo estimate of the mean active-community count.
pub fn prior_active_stats(
    cfg: &TruncationConfig,
    role: Role,
    rows: usize,
    rng: &mut impl Rng,
) -> Result<PriorActiveStats> {
    cfg.validate()?;
    if rows < 2 {
        return Err(Error::Config("need at least 2 prior rows".into()));
    }
    let counts: Vec<f64> = (0..rows)
        .map(|_| sample_prior_row(cfg, role, rng).z.iter().sum())
        .collect();
    let n = rows as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(PriorActiveStats {
        rows,
        mean,
        std_error: (var / n).sqrt(),
        expected: expected_active(cfg.alpha(role), cfg.k),
    })
}

pub fn gate(z: &[f64], w: &[f64]) -> Result<SparseFeature> {
    if z.len() != w.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: w.len(),
        });
    }
    Ok(SparseFeature(z.iter().zip(w).map(|(a, b)| a * b).collect()))
}

/// `σ(z_iᵀ W z_j)`
pub fn osbm_link_prob(z_i: &[f64], z_j: &[f64], w: &Array2<f64>) -> Result<f64> {
    if w.nrows() != z_i.len() {
        return Err(Error::DimensionMismatch {
            context: "osbm rows",
            expected: w.nrows(),
            got: z_i.len(),
        });
    }
    if w.ncols() != z_j.len() {
        return Err(Error::DimensionMismatch {
            context: "osbm cols",
            expected: w.ncols(),
            got: z_j.len(),
        });
    }
    let mut s = 0.0;
    for (a, &zi) in z_i.iter().enumerate() {
        for (b, &zj) in z_j.iter().enumerate() {
            s += zi * w[[a, b]] * zj;
        }
    }
    Ok(crate::distributions::sigmoid(s))
}

/// Log pmf of independent Bernoullis.
pub fn mb_log_pmf(z: &[f64], pi: &[f64]) -> Result<f64> {
    if z.len() != pi.len() {
        return Err(Error::LengthMismatch {
            left: z.len(),
            right: pi.len(),
        });
    }
    let mut total = 0.0;
    for (&zk, &pk) in z.iter().zip(pi) {
        if !(pk > 0.0 && pk < 1.0) {
            return Err(Error::OutOfRange {
                what: "membership probability",
                value: pk,
            });
        }
        total += zk * pk.ln() + (1.0 - zk) * (1.0 - pk).ln();
    }
    Ok(total)
}
