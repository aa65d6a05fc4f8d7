//! The weighted negative ELBO of one batch:
//! `β·(KL_beta + KL_concrete + KL_gaussian) + η·recon + comp`.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::HeadKind;
use crate::distributions::{
    kl_beta_with_grad, kl_gaussian_with_grad, sample_beta_reparam, sigmoid, softplus, BetaParams,
    GaussianParams, PROB_EPS,
};
use crate::encoder::posterior_forward;
use crate::error::{Error, Result};
use crate::kgstore::{FilterIndex, KnowledgeGraph, Query, QueryAnswer};
use crate::latent::Role;
use crate::model::Model;
use crate::noise::{NoiseStream, Purpose};
use crate::tape::{BufferKind, Matrix, Tape, Var};

/// Relation of a candidate to a batch query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    Positive,
    Negative,
    /// A known answer that is not a positive of this batch.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Distinct queries in first-appearance order.
    pub queries: Vec<Query>,
    /// Stick row of each query.
    pub query_rows: Vec<usize>,
    /// Distinct candidate entities: batch answers, then self-negative anchors.
    pub candidates: Vec<usize>,
    /// `queries × candidates`.
    pub pairs: Array2<Pair>,
}

impl Batch {
    /// Groups `(query, answer)` pairs; negatives of a query are every
    /// candidate outside its known answers. Stick rows are resolved through
    /// `model`.
    pub fn build(
        items: &[QueryAnswer],
        model: &Model,
        known: &FilterIndex,
        self_negatives: bool,
    ) -> Result<Self> {
        let mut batch = Self::layout(items, known, self_negatives)?;
        batch.query_rows = batch
            .queries
            .iter()
            .map(|q| model.query_row(q).ok_or(Error::UnknownRow(usize::MAX)))
            .collect::<Result<Vec<_>>>()?;
        Ok(batch)
    }

    /// Grouping and labels only, without stick rows.
    pub fn layout(items: &[QueryAnswer], known: &FilterIndex, self_negatives: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut queries = Vec::new();
        let mut q_index: HashMap<Query, usize> = HashMap::new();
        let mut candidates = Vec::new();
        let mut c_index: HashMap<usize, usize> = HashMap::new();
        let mut positives: Vec<Vec<usize>> = Vec::new();
        for qa in items {
            let qi = *q_index.entry(qa.query).or_insert_with(|| {
                queries.push(qa.query);
                positives.push(Vec::new());
                queries.len() - 1
            });
            let ci = *c_index.entry(qa.answer).or_insert_with(|| {
                candidates.push(qa.answer);
                candidates.len() - 1
            });
            positives[qi].push(ci);
        }
        if self_negatives {
            for q in &queries {
                c_index.entry(q.anchor).or_insert_with(|| {
                    candidates.push(q.anchor);
                    candidates.len() - 1
                });
            }
        }
        let mut pairs = Array2::from_elem((queries.len(), candidates.len()), Pair::Negative);
        for (qi, q) in queries.iter().enumerate() {
            let answers = known.get(q);
            for (ci, c) in candidates.iter().enumerate() {
                if answers.contains(c) {
                    pairs[[qi, ci]] = Pair::Ignored;
                }
            }
            for &ci in &positives[qi] {
                pairs[[qi, ci]] = Pair::Positive;
            }
        }
        Ok(Self {
            queries,
            query_rows: Vec::new(),
            candidates,
            pairs,
        })
    }

    /// Margin-shifted, temperature-scaled scores from cosines.
    pub fn scores(&self, cos: &Matrix, gamma: f64, tau: f64) -> Matrix {
        ndarray::Zip::from(cos)
            .and(&self.pairs)
            .map_collect(|&c, &p| (c - if p == Pair::Positive { gamma } else { 0.0 }) / tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub kl_beta_total: f64,
    pub kl_concrete_total: f64,
    pub kl_gaussian_total: f64,
    pub recon_total: f64,
    pub comp_total: f64,
    pub beta_weight: f64,
    pub eta_weight: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(kl: [f64; 3], recon: f64, comp: f64, beta: f64, eta: f64) -> Self {
        Self {
            kl_beta_total: kl[0],
            kl_concrete_total: kl[1],
            kl_gaussian_total: kl[2],
            recon_total: recon,
            comp_total: comp,
            beta_weight: beta,
            eta_weight: eta,
            total: beta * (kl[0] + kl[1] + kl[2]) + eta * recon + comp,
        }
    }

    pub fn kl_total(&self) -> f64 {
        self.kl_beta_total + self.kl_concrete_total + self.kl_gaussian_total
    }
}

/// `−Σ_rows cos(e_row, g_row)`.
pub fn reconstruction_term(e: &Matrix, g: &Matrix) -> Result<f64> {
    if e.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "reconstruction rows",
            expected: e.ncols(),
            got: g.ncols(),
        });
    }
    let mut total = 0.0;
    for (a, b) in e.rows().into_iter().zip(g.rows()) {
        total -= crate::decoder::cosine(a.as_slice().expect("row"), b.as_slice().expect("row"))?;
    }
    Ok(total)
}

/// Supervised contrastive loss summed over queries, with its gradient w.r.t.
/// `scores`. Each positive is contrasted against the query's negatives only.
pub fn completion_with_grad(scores: &Matrix, pairs: &Array2<Pair>) -> Result<(f64, Matrix)> {
    if scores.dim() != pairs.dim() {
        return Err(Error::DimensionMismatch {
            context: "completion scores",
            expected: pairs.ncols(),
            got: scores.ncols(),
        });
    }
    let mut grad = Matrix::zeros(scores.raw_dim());
    let mut total = 0.0;
    for (i, (s, labels)) in scores.rows().into_iter().zip(pairs.rows()).enumerate() {
        let pos: Vec<usize> = (0..s.len()).filter(|&j| labels[j] == Pair::Positive).collect();
        if pos.is_empty() {
            return Err(Error::NoPositives(i));
        }
        let neg: Vec<usize> = (0..s.len()).filter(|&j| labels[j] == Pair::Negative).collect();
        let inv_p = 1.0 / pos.len() as f64;
        let neg_max = neg.iter().map(|&j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        // Σ_N exp(s_n − M)
        let neg_sum: f64 = neg.iter().map(|&j| (s[j] - neg_max).exp()).sum();
        // accumulates Σ_t exp(M − lse_t) / |P|
        let mut neg_weight = 0.0;
        for &t in &pos {
            let st = s[t];
            // loss_t = lse_t − s_t, lse_t = log(e^{s_t} + Σ_N e^{s_n})
            let (loss_t, p_t, w_t) = if neg.is_empty() {
                (0.0, 1.0, 0.0)
            } else if st >= neg_max {
                let r = neg_sum * (neg_max - st).exp();
                let l = r.ln_1p();
                (l, 1.0 / (1.0 + r), (neg_max - st).exp() / (1.0 + r))
            } else {
                let inner = (st - neg_max).exp() + neg_sum;
                let l = (neg_max - st) + inner.ln();
                (l, (st - neg_max).exp() / inner, 1.0 / inner)
            };
            total += inv_p * loss_t;
            grad[[i, t]] -= inv_p * (1.0 - p_t);
            neg_weight += inv_p * w_t;
        }
        for &j in &neg {
            grad[[i, j]] += (s[j] - neg_max).exp() * neg_weight;
        }
    }
    Ok((total, grad))
}

/// [`completion_with_grad`] without the gradient.
pub fn completion_term(scores: &Matrix, pairs: &Array2<Pair>) -> Result<f64> {
    Ok(completion_with_grad(scores, pairs)?.0)
}

/// KL sums of one side of the batch, as tape scalars.
#[derive(Debug, Clone, Copy)]
struct SideKl {
    beta: Option<Var>,
    concrete: Option<Var>,
    gaussian: Option<Var>,
}

fn purposes(role: Role) -> (Purpose, Purpose, Purpose) {
    match role {
        Role::Query => (Purpose::BetaQuery, Purpose::ConcreteQuery, Purpose::GaussianQuery),
        Role::Answer => (Purpose::BetaAnswer, Purpose::ConcreteAnswer, Purpose::GaussianAnswer),
    }
}

/// Samples training-mode features of one side and records its KL terms.
fn latent_side(
    tape: &mut Tape<'_>,
    model: &Model,
    role: Role,
    e: Var,
    rows: &[usize],
    noise: &NoiseStream,
    step: u64,
) -> Result<(Var, SideKl)> {
    let k = model.k();
    let mcfg = &model.config.model;
    let ocfg = &model.config.objective;
    let post = posterior_forward(tape, model.encoder.head(role), e, k)?;
    let (p_beta, p_conc, p_gauss) = purposes(role);
    let sigma_p = mcfg.sigma_prior;
    let mut kl = SideKl {
        beta: None,
        concrete: None,
        gaussian: None,
    };

    if model.head_kind() == HeadKind::PureAe {
        return Ok((post.mu, kl));
    }

    let eps = tape.constant(noise.normals(p_gauss, step, rows, k));
    let spread = tape.mul(post.sigma, eps);
    let w = tape.add(post.mu, spread);
    tape.tag(w, BufferKind::Latent);
    let kl_g = tape.map2(post.mu, post.sigma, |_, mu, sigma| {
        let r = kl_gaussian_with_grad(GaussianParams { mu, sigma }, GaussianParams { mu: 0.0, sigma: sigma_p });
        (r.value, r.d_first, r.d_second)
    });
    kl.gaussian = Some(tape.sum(kl_g));

    if model.head_kind() == HeadKind::GaussianVae {
        return Ok((w, kl));
    }

    // sticks v ~ q(v) = Beta(c, d)
    let (c, d) = model.encoder.stick_vars(tape, role, rows)?;
    let ub = noise.uniforms(p_beta, step, rows, k);
    let ub = ub.as_slice().expect("standard layout").to_vec();
    let sampler = mcfg.beta_sampler;
    let v = tape.map2(c, d, |i, a, b| {
        let s = sample_beta_reparam(BetaParams { a, b }, ub[i], sampler);
        (s.v, s.dv_da, s.dv_db)
    });
    tape.tag(v, BufferKind::Latent);
    let prior = BetaParams {
        a: model.config.model.truncation().alpha(role),
        b: 1.0,
    };
    let kl_b = tape.map2(c, d, |_, a, b| {
        let r = kl_beta_with_grad(BetaParams { a, b }, prior);
        (r.value, r.d_first, r.d_second)
    });
    kl.beta = Some(tape.sum(kl_b));

    // prior memberships π_k = Π_{j≤k} v_j, handled in log space
    let log_v = tape.ln(v);
    let log_pi = tape.cumsum_cols(log_v);
    let log_pi = tape.clamp(log_pi, PROB_EPS.ln(), (1.0 - PROB_EPS).ln());
    let prior_odds = tape.map(log_pi, |lp| {
        let one_minus = -lp.exp_m1();
        (lp - one_minus.ln(), 1.0 / one_minus)
    });
    tape.tag(prior_odds, BufferKind::Latent);

    // relaxed memberships y = (ℓ + logistic noise) / λ_post
    let uc = noise.uniforms(p_conc, step, rows, k);
    let logistic = tape.constant(uc.mapv(|u| u.ln() - (-u).ln_1p()));
    let shifted = tape.add(post.log_odds, logistic);
    let y = tape.scale(shifted, 1.0 / ocfg.lambda_post);
    tape.tag(y, BufferKind::Latent);
    let density = |lambda: f64| {
        move |_: usize, y: f64, l: f64| {
            let s = -lambda * y + l;
            let ds = 1.0 - 2.0 * sigmoid(s);
            (lambda.ln() + s - 2.0 * softplus(s), -lambda * ds, ds)
        }
    };
    let log_q = tape.map2(y, post.log_odds, density(ocfg.lambda_post));
    let log_p = tape.map2(y, prior_odds, density(ocfg.lambda_prior));
    let diff = tape.sub(log_q, log_p);
    kl.concrete = Some(tape.sum(diff));

    let z = tape.sigmoid(y);
    tape.tag(z, BufferKind::Latent);
    let f = tape.mul(z, w);
    Ok((tape.tag(f, BufferKind::Latent), kl))
}

fn dropout(tape: &mut Tape<'_>, e: Var, p: f64, noise: &NoiseStream, step: u64, keys: &[usize]) -> Var {
    if p <= 0.0 {
        return e;
    }
    let width = tape.shape(e).1;
    let u = noise.uniforms(Purpose::Dropout, step, keys, width);
    let mask = tape.constant(u.mapv(|x| if x < p { 0.0 } else { 1.0 / (1.0 - p) }));
    tape.mul(e, mask)
}

fn cosine_rows_sum(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let prod = tape.mul(an, bn);
    Ok(tape.sum(prod))
}

/// A recorded batch loss, ready for [`Tape::backward`].
pub struct Assembled<'p> {
    pub tape: Tape<'p>,
    pub total: Var,
    pub breakdown: ElboBreakdown,
}

/// Records the weighted loss of `batch` under training-mode sampling.
pub fn assemble<'p>(
    model: &'p Model,
    kg: &KnowledgeGraph,
    batch: &Batch,
    noise: &NoiseStream,
    step: u64,
) -> Result<Assembled<'p>> {
    let ocfg = &model.config.objective;
    let p_drop = model.config.model.dropout;
    let mut tape = Tape::new(&model.params);

    let eq = model.encoder.encode_queries(&mut tape, kg, &batch.queries)?;
    let ea = model.encoder.encode_entities(&mut tape, kg, &batch.candidates)?;
    let q_keys: Vec<usize> = batch.query_rows.iter().map(|r| 2 * r).collect();
    let a_keys: Vec<usize> = batch.candidates.iter().map(|e| 2 * e + 1).collect();
    let eq_in = dropout(&mut tape, eq, p_drop, noise, step, &q_keys);
    let ea_in = dropout(&mut tape, ea, p_drop, noise, step, &a_keys);

    let (fq, kl_q) = latent_side(&mut tape, model, Role::Query, eq_in, &batch.query_rows, noise, step)?;
    let (fa, kl_a) = latent_side(&mut tape, model, Role::Answer, ea_in, &batch.candidates, noise, step)?;
    let gq = model.decoder.forward(&mut tape, fq)?;
    let ga = model.decoder.forward(&mut tape, fa)?;

    let cos_q = cosine_rows_sum(&mut tape, eq, gq)?;
    let cos_a = cosine_rows_sum(&mut tape, ea, ga)?;
    let cos_sum = tape.add(cos_q, cos_a);
    let recon = tape.scale(cos_sum, -1.0);

    let gqn = tape.normalize_rows(gq)?;
    let gan = tape.normalize_rows(ga)?;
    let cos = tape.matmul_t(gqn, gan);
    let tau = ocfg.tau;
    let gamma = ocfg.gamma;
    let scores = batch.scores(tape.value(cos), gamma, tau);
    let (comp_value, d_scores) = completion_with_grad(&scores, &batch.pairs)?;
    let comp = tape.reduce(cos, comp_value, d_scores / tau);

    let mut kl_values = [0.0; 3];
    let mut kl_vars: Vec<Var> = Vec::new();
    for side in [kl_q, kl_a] {
        for (slot, v) in [side.beta, side.concrete, side.gaussian].into_iter().enumerate() {
            if let Some(v) = v {
                kl_values[slot] += tape.scalar(v);
                kl_vars.push(v);
            }
        }
    }
    let recon_value = tape.scalar(recon);
    let breakdown = ElboBreakdown::new(kl_values, recon_value, comp_value, ocfg.beta, ocfg.eta);

    let mut total = comp;
    if ocfg.eta != 0.0 {
        let r = tape.scale(recon, ocfg.eta);
        total = tape.add(total, r);
    }
    if ocfg.beta != 0.0 {
        for v in kl_vars {
            let w = tape.scale(v, ocfg.beta);
            total = tape.add(total, w);
        }
    }
    Ok(Assembled {
        tape,
        total,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(rows: &[&[Pair]]) -> Array2<Pair> {
        let n = rows[0].len();
        Array2::from_shape_fn((rows.len(), n), |(i, j)| rows[i][j])
    }

    use Pair::{Negative as N, Positive as P};

    #[test]
    fn completion_examples() {
        let l = labels(&[&[P, N, N, N]]);
        let v = completion_term(&Matrix::zeros((1, 4)), &l).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = completion_term(&array![[50.0, 0.0, 0.0, 0.0]], &l).unwrap();
        assert!((0.0..1e-20).contains(&v));
        let l2 = labels(&[&[P, P, N, N]]);
        let v = completion_term(&Matrix::zeros((1, 4)), &l2).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        let none = labels(&[&[N, N]]);
        assert!(matches!(completion_term(&Matrix::zeros((1, 2)), &none), Err(Error::NoPositives(0))));
    }

    #[test]
    fn completion_ignores_filtered_columns() {
        let l = labels(&[&[P, Pair::Ignored, N]]);
        let a = completion_term(&array![[0.3, 100.0, -0.2]], &l).unwrap();
        let b = completion_term(&array![[0.3, -100.0, -0.2]], &l).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn completion_gradient_matches_finite_difference() {
        let l = labels(&[&[P, N, P, N, Pair::Ignored], &[N, N, N, P, N]]);
        let s = array![[0.3, -1.2, 2.0, 0.7, 4.0], [1.5, -0.3, 0.2, -2.0, 0.9]];
        let (_, g) = completion_with_grad(&s, &l).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let mut sp = s.clone();
                sp[[i, j]] += h;
                let mut sm = s.clone();
                sm[[i, j]] -= h;
                let fd = (completion_term(&sp, &l).unwrap() - completion_term(&sm, &l).unwrap()) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "({i},{j}) {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn reconstruction_examples() {
        let e = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        assert!((reconstruction_term(&e, &e).unwrap() + 3.0).abs() < 1e-12);
        let perp = array![[-2.0, 1.0], [1.0, 0.5], [0.0, 1.0]];
        assert!(reconstruction_term(&e, &perp).unwrap().abs() < 1e-12);
        let single = array![[1.0, 1.0]];
        assert!((reconstruction_term(&single, &(-&single)).unwrap() - 1.0).abs() < 1e-12);
        assert!(reconstruction_term(&array![[0.0, 0.0]], &single).is_err());
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = ElboBreakdown::new([0.3, 0.2, 0.5], -4.0, 1.7, 0.0, 0.0);
        assert_eq!(b.total, 1.7);
        let b = ElboBreakdown::new([40.0, 50.0, 10.0], -5.0, 2.0, 1e-3, 1.0);
        assert!((b.total + 2.9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn completion_nonnegative(
            scores in prop::collection::vec(-30.0f64..30.0, 6),
            n_pos in 1usize..4,
        ) {
            let row: Vec<Pair> = (0..6).map(|j| if j < n_pos { P } else { N }).collect();
            let l = labels(&[&row]);
            let s = Matrix::from_shape_vec((1, 6), scores).unwrap();
            prop_assert!(completion_term(&s, &l).unwrap() >= 0.0);
        }

        #[test]
        fn completion_uniform_is_log_one_plus_negatives(n_neg in 0usize..20, level in -10.0f64..10.0) {
            let row: Vec<Pair> = std::iter::once(P).chain(std::iter::repeat_n(N, n_neg)).collect();
            let l = labels(&[&row]);
            let s = Matrix::from_elem((1, n_neg + 1), level);
            let v = completion_term(&s, &l).unwrap();
            prop_assert!((v - ((1 + n_neg) as f64).ln()).abs() < 1e-10);
        }
    }
}
