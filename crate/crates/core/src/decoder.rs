//! Latent features to representations, and representation similarity.

use serde::{Deserialize, Serialize};

use crate::distributions::sigmoid;
use crate::encoder::{mlp_forward, HeadParams, Initializer};
use crate::error::{Error, Result};
use crate::latent::SparseFeature;
use crate::tape::{BufferKind, Matrix, ParamStore, Tape, Var};

/// `K → hidden → D` tanh MLP shared by query and answer rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderNet {
    pub layers: HeadParams,
}

impl DecoderNet {
    pub(crate) fn init(init: &mut Initializer<'_>, k: usize, hidden: usize, dim: usize) -> Self {
        Self {
            layers: init.mlp("dec", k, hidden, dim),
        }
    }

    pub(crate) fn bind(store: &ParamStore) -> Result<Self> {
        let id = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter block {n}")))
        };
        Ok(Self {
            layers: HeadParams {
                w1: id("dec.w1")?,
                b1: id("dec.b1")?,
                w2: id("dec.w2")?,
                b2: id("dec.b2")?,
            },
        })
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers.w1).nrows()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, f: Var) -> Result<Var> {
        let k = self.input_dim(tape.params());
        if tape.shape(f).1 != k {
            return Err(Error::DimensionMismatch {
                context: "decoder input",
                expected: k,
                got: tape.shape(f).1,
            });
        }
        let g = mlp_forward(tape, self.layers, f);
        Ok(tape.tag(g, BufferKind::Representation))
    }
}

/// Decodes a single feature vector.
pub fn decode(store: &ParamStore, net: &DecoderNet, f: &SparseFeature) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = tape.constant(Matrix::from_shape_vec((1, f.0.len()), f.0.clone()).expect("row"));
    let g = net.forward(&mut tape, x)?;
    Ok(tape.value(g).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    /// Additive margin applied to positive pairs.
    pub gamma: f64,
    pub tau: f64,
}

impl SimilarityConfig {
    pub fn new(gamma: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::NonPositive {
                what: "temperature",
                value: tau,
            });
        }
        if gamma.is_nan() || gamma < 0.0 {
            return Err(Error::OutOfRange {
                what: "margin",
                value: gamma,
            });
        }
        Ok(Self { gamma, tau })
    }

    /// `(cos − γ·[positive]) / τ`
    pub fn scale(&self, cos: f64, is_positive: bool) -> f64 {
        let m = if is_positive { self.gamma } else { 0.0 };
        (cos - m) / self.tau
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateRepresentation);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn score(g_q: &[f64], g_a: &[f64], cfg: &SimilarityConfig, is_positive: bool) -> Result<f64> {
    Ok(cfg.scale(cosine(g_q, g_a)?, is_positive))
}

/// `σ(g_qᵀ g_a)`
pub fn link_probability(g_q: &[f64], g_a: &[f64]) -> Result<f64> {
    if g_q.len() != g_a.len() {
        return Err(Error::DimensionMismatch {
            context: "link probability",
            expected: g_q.len(),
            got: g_a.len(),
        });
    }
    Ok(sigmoid(g_q.iter().zip(g_a).map(|(x, y)| x * y).sum()))
}
