//! Feature encoders, posterior heads and per-row stick parameters.
//!
//! Query and answer towers have separate parameters. A tower maps an item to
//! a feature vector `e` (a lookup row or a mean of token embeddings), and its
//! head maps `e` to `3K` raw outputs read as membership log-odds, strength
//! means and log standard deviations.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::EncoderKind;
use crate::distributions::{softplus, BetaParams, PROB_EPS};
use crate::error::{Error, Result};
use crate::kgstore::{compose_input_text, KnowledgeGraph, Query, TextItem};
use crate::latent::Role;
use crate::noise::{NoiseStream, Purpose};
use crate::tape::{BufferKind, Matrix, ParamId, ParamStore, Tape, Var};

pub const UNK_TOKEN: &str = "[UNK]";
pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;
/// Initial bias of the log standard deviation outputs. Starting with unit
/// noise drowns the strength means and the heads never recover.
pub const LOG_SIGMA_INIT: f64 = -4.0;

/// Bound on membership log-odds, so that `π ∈ [ε, 1 − ε]`.
pub fn log_odds_bound() -> f64 {
    ((1.0 - PROB_EPS) / PROB_EPS).ln()
}

/// Inverse of softplus for positive targets.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Vocabulary over every entity text and every relation text of `kg`,
    /// in first-appearance order after `[UNK]`.
    pub fn build(kg: &KnowledgeGraph, max_tokens: usize) -> Self {
        let mut vocab = Self::default();
        vocab.insert(UNK_TOKEN);
        for e in 0..kg.num_entities() {
            for tok in compose_input_text(kg, TextItem::Entity(e), max_tokens) {
                vocab.insert(&tok);
            }
        }
        let anchor = 0;
        for r in 0..kg.num_relations() {
            for tok in compose_input_text(kg, TextItem::Query(Query::new(anchor, r)), usize::MAX) {
                vocab.insert(&tok);
            }
        }
        vocab
    }

    fn insert(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    /// Token ids with unknown tokens dropped; `[UNK]` if nothing remains.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let ids: Vec<usize> = tokens.iter().filter_map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}

/// How items become feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoderSpec {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub max_tokens: usize,
    pub vocab: Option<TokenVocab>,
}

impl FeatureEncoderSpec {
    pub fn new(kind: EncoderKind, embed_dim: usize, kg: &KnowledgeGraph, max_tokens: usize) -> Self {
        let vocab = match kind {
            EncoderKind::Lookup => None,
            EncoderKind::BagOfTokens => Some(TokenVocab::build(kg, max_tokens)),
        };
        Self {
            kind,
            embed_dim,
            num_entities: kg.num_entities(),
            num_relations: kg.num_relations(),
            max_tokens,
            vocab,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerTables {
    Lookup {
        qry_ent: ParamId,
        qry_rel: ParamId,
        ans_ent: ParamId,
    },
    Tokens {
        qry_tok: ParamId,
        ans_tok: ParamId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StickTable {
    pub c_raw: ParamId,
    pub d_raw: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub spec: FeatureEncoderSpec,
    pub tables: TowerTables,
    pub qry_head: HeadParams,
    pub ans_head: HeadParams,
    pub qry_sticks: StickTable,
    pub ans_sticks: StickTable,
    pub k: usize,
}

/// Uniform `±1/√fan_in` initialization.
pub(crate) fn init_uniform(noise: &NoiseStream, block: u64, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let u = noise.uniforms(Purpose::Init, block, &(0..rows).collect::<Vec<_>>(), cols);
    u.mapv(|x| (2.0 * x - 1.0) * bound)
}

pub(crate) struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub noise: NoiseStream,
}

impl Initializer<'_> {
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let block = self.store.len() as u64;
        let value = init_uniform(&self.noise, block, rows, cols, fan_in);
        self.store.add(name, value)
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Matrix::from_elem((rows, cols), value))
    }

    pub fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize) -> HeadParams {
        HeadParams {
            w1: self.uniform(&format!("{prefix}.w1"), input, hidden, input),
            b1: self.filled(&format!("{prefix}.b1"), 1, hidden, 0.0),
            w2: self.uniform(&format!("{prefix}.w2"), hidden, output, hidden),
            b2: self.filled(&format!("{prefix}.b2"), 1, output, 0.0),
        }
    }
}

impl EncoderParams {
    pub(crate) fn init(
        init: &mut Initializer<'_>,
        spec: FeatureEncoderSpec,
        hidden: usize,
        k: usize,
        num_query_rows: usize,
        alpha_qry: f64,
        alpha_ans: f64,
    ) -> Self {
        let d = spec.embed_dim;
        let tables = match &spec.vocab {
            None => TowerTables::Lookup {
                qry_ent: init.uniform("qry.ent_emb", spec.num_entities, d, d),
                qry_rel: init.uniform("qry.rel_emb", spec.num_relations, d, d),
                ans_ent: init.uniform("ans.ent_emb", spec.num_entities, d, d),
            },
            Some(vocab) => TowerTables::Tokens {
                qry_tok: init.uniform("qry.tok_emb", vocab.len(), d, d),
                ans_tok: init.uniform("ans.tok_emb", vocab.len(), d, d),
            },
        };
        let qry_head = init.mlp("qry.head", d, hidden, 3 * k);
        let ans_head = init.mlp("ans.head", d, hidden, 3 * k);
        for head in [qry_head, ans_head] {
            init.store.get_mut(head.b2).slice_mut(ndarray::s![.., 2 * k..]).fill(LOG_SIGMA_INIT);
        }
        let qry_sticks = StickTable {
            c_raw: init.filled("stick.qry.c_raw", num_query_rows, k, softplus_inv(alpha_qry)),
            d_raw: init.filled("stick.qry.d_raw", num_query_rows, k, softplus_inv(1.0)),
        };
        let ans_sticks = StickTable {
            c_raw: init.filled("stick.ans.c_raw", spec.num_entities, k, softplus_inv(alpha_ans)),
            d_raw: init.filled("stick.ans.d_raw", spec.num_entities, k, softplus_inv(1.0)),
        };
        Self {
            spec,
            tables,
            qry_head,
            ans_head,
            qry_sticks,
            ans_sticks,
            k,
        }
    }

    /// Re-binds parameter ids by name after loading a checkpoint.
    pub(crate) fn bind(store: &ParamStore, spec: FeatureEncoderSpec, k: usize) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter block {name}")))
        };
        let head = |p: &str| -> Result<HeadParams> {
            Ok(HeadParams {
                w1: id(&format!("{p}.w1"))?,
                b1: id(&format!("{p}.b1"))?,
                w2: id(&format!("{p}.w2"))?,
                b2: id(&format!("{p}.b2"))?,
            })
        };
        let tables = match spec.vocab {
            None => TowerTables::Lookup {
                qry_ent: id("qry.ent_emb")?,
                qry_rel: id("qry.rel_emb")?,
                ans_ent: id("ans.ent_emb")?,
            },
            Some(_) => TowerTables::Tokens {
                qry_tok: id("qry.tok_emb")?,
                ans_tok: id("ans.tok_emb")?,
            },
        };
        Ok(Self {
            tables,
            qry_head: head("qry.head")?,
            ans_head: head("ans.head")?,
            qry_sticks: StickTable {
                c_raw: id("stick.qry.c_raw")?,
                d_raw: id("stick.qry.d_raw")?,
            },
            ans_sticks: StickTable {
                c_raw: id("stick.ans.c_raw")?,
                d_raw: id("stick.ans.d_raw")?,
            },
            spec,
            k,
        })
    }

    pub fn head(&self, role: Role) -> HeadParams {
        match role {
            Role::Query => self.qry_head,
            Role::Answer => self.ans_head,
        }
    }

    pub fn sticks(&self, role: Role) -> StickTable {
        match role {
            Role::Query => self.qry_sticks,
            Role::Answer => self.ans_sticks,
        }
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e >= self.spec.num_entities {
            Err(Error::UnseenEntity(e))
        } else {
            Ok(())
        }
    }

    /// Query features, one row per query.
    pub fn encode_queries(&self, tape: &mut Tape<'_>, kg: &KnowledgeGraph, queries: &[Query]) -> Result<Var> {
        for q in queries {
            self.check_entity(q.anchor)?;
            if q.relation >= self.spec.num_relations {
                return Err(Error::OutOfRange {
                    what: "relation id",
                    value: q.relation as f64,
                });
            }
        }
        let v = match (&self.tables, &self.spec.vocab) {
            (TowerTables::Lookup { qry_ent, qry_rel, .. }, _) => {
                let ent = tape.embed_mean(*qry_ent, queries.iter().map(|q| vec![q.anchor]).collect());
                let rel = tape.embed_mean(*qry_rel, queries.iter().map(|q| vec![q.relation]).collect());
                let sum = tape.add(ent, rel);
                tape.scale(sum, 0.5)
            }
            (TowerTables::Tokens { qry_tok, .. }, Some(vocab)) => {
                let rows = queries
                    .iter()
                    .map(|&q| vocab.encode(&compose_input_text(kg, TextItem::Query(q), self.spec.max_tokens)))
                    .collect();
                tape.embed_mean(*qry_tok, rows)
            }
            _ => unreachable!("token tables always carry a vocabulary"),
        };
        Ok(tape.tag(v, BufferKind::Representation))
    }

    /// Answer features, one row per entity.
    pub fn encode_entities(&self, tape: &mut Tape<'_>, kg: &KnowledgeGraph, entities: &[usize]) -> Result<Var> {
        for &e in entities {
            self.check_entity(e)?;
        }
        let v = match (&self.tables, &self.spec.vocab) {
            (TowerTables::Lookup { ans_ent, .. }, _) => {
                tape.embed_mean(*ans_ent, entities.iter().map(|&e| vec![e]).collect())
            }
            (TowerTables::Tokens { ans_tok, .. }, Some(vocab)) => {
                let rows = entities
                    .iter()
                    .map(|&e| vocab.encode(&compose_input_text(kg, TextItem::Entity(e), self.spec.max_tokens)))
                    .collect();
                tape.embed_mean(*ans_tok, rows)
            }
            _ => unreachable!("token tables always carry a vocabulary"),
        };
        Ok(tape.tag(v, BufferKind::Representation))
    }

    /// Stick parameters of stored rows, `c = softplus(c_raw)`, `d = softplus(d_raw)`.
    pub fn stick_vars(&self, tape: &mut Tape<'_>, role: Role, rows: &[usize]) -> Result<(Var, Var)> {
        let table = self.sticks(role);
        let n = tape.params().get(table.c_raw).nrows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::UnknownRow(bad));
        }
        let c = tape.embed_mean(table.c_raw, rows.iter().map(|&r| vec![r]).collect());
        let d = tape.embed_mean(table.d_raw, rows.iter().map(|&r| vec![r]).collect());
        let c = tape.softplus(c);
        let d = tape.softplus(d);
        Ok((tape.tag(c, BufferKind::Latent), tape.tag(d, BufferKind::Latent)))
    }
}

/// Outputs of a posterior head on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    /// Membership log-odds, clamped to ±[`log_odds_bound`].
    pub log_odds: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Two-layer tanh MLP `x → tanh(x W1 + b1) W2 + b2`.
pub fn mlp_forward(tape: &mut Tape<'_>, p: HeadParams, x: Var) -> Var {
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.tanh(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

pub fn posterior_forward(tape: &mut Tape<'_>, head: HeadParams, e: Var, k: usize) -> Result<PosteriorVars> {
    let w1 = tape.params().get(head.w1);
    if tape.shape(e).1 != w1.nrows() {
        return Err(Error::DimensionMismatch {
            context: "posterior head input",
            expected: w1.nrows(),
            got: tape.shape(e).1,
        });
    }
    let raw = mlp_forward(tape, head, e);
    let bound = log_odds_bound();
    let lo = tape.slice_cols(raw, 0, k);
    let log_odds = tape.clamp(lo, -bound, bound);
    let mu = tape.slice_cols(raw, k, 2 * k);
    let ls = tape.slice_cols(raw, 2 * k, 3 * k);
    let ls = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let sigma = tape.exp(ls);
    for v in [log_odds, mu, sigma] {
        tape.tag(v, BufferKind::Latent);
    }
    Ok(PosteriorVars { log_odds, mu, sigma })
}

/// Posterior parameters of one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Evaluates a posterior head on a single feature vector.
pub fn posterior_params(store: &ParamStore, head: HeadParams, k: usize, e: &[f64]) -> Result<Posterior> {
    let mut tape = Tape::new(store);
    let x = tape.constant(Matrix::from_shape_vec((1, e.len()), e.to_vec()).expect("row"));
    let p = posterior_forward(&mut tape, head, x, k)?;
    let pi = tape.sigmoid(p.log_odds);
    Ok(Posterior {
        pi: tape.value(pi).iter().copied().collect(),
        mu: tape.value(p.mu).iter().copied().collect(),
        sigma: tape.value(p.sigma).iter().copied().collect(),
    })
}

/// Beta parameters of one stored stick row.
pub fn stick_params(store: &ParamStore, table: StickTable, row: usize) -> Result<Vec<BetaParams>> {
    let c = store.get(table.c_raw);
    let d = store.get(table.d_raw);
    if row >= c.nrows() {
        return Err(Error::UnknownRow(row));
    }
    c.row(row)
        .iter()
        .zip(d.row(row).iter())
        .map(|(&cr, &dr)| BetaParams::new(softplus(cr), softplus(dr)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderKind;
    use proptest::prelude::*;

    fn kg() -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::from_named(
            &[("a", "r", "b"), ("b", "s", "c"), ("c", "r", "a")],
            &[],
            &[],
        )
        .unwrap();
        kg.set_entity_description(0, "alpha");
        kg.set_entity_description(1, "beta gamma");
        kg
    }

    fn build(kind: EncoderKind, dim: usize, k: usize) -> (ParamStore, EncoderParams, KnowledgeGraph) {
        let kg = kg();
        let spec = FeatureEncoderSpec::new(kind, dim, &kg, 16);
        let mut store = ParamStore::new();
        let enc = {
            let mut init = Initializer {
                store: &mut store,
                noise: NoiseStream::new(3),
            };
            EncoderParams::init(&mut init, spec, 6, k, 4, 5.0, 2.0)
        };
        (store, enc, kg)
    }

    #[test]
    fn lookup_returns_table_row() {
        let (store, enc, kg) = build(EncoderKind::Lookup, 4, 2);
        let TowerTables::Lookup { ans_ent, .. } = enc.tables else { panic!() };
        let mut t = Tape::new(&store);
        let e = enc.encode_entities(&mut t, &kg, &[2]).unwrap();
        assert_eq!(t.value(e).row(0), store.get(ans_ent).row(2));
        assert!(matches!(
            enc.encode_entities(&mut t, &kg, &[7]),
            Err(Error::UnseenEntity(7))
        ));
    }

    #[test]
    fn bag_of_tokens_means() {
        let (mut store, enc, kg) = build(EncoderKind::BagOfTokens, 3, 2);
        let TowerTables::Tokens { ans_tok, .. } = enc.tables else { panic!() };
        let vocab = enc.spec.vocab.clone().unwrap();
        let alpha = vocab.id("alpha").unwrap();
        let (beta, gamma) = (vocab.id("beta").unwrap(), vocab.id("gamma").unwrap());
        {
            let table = store.get_mut(ans_tok);
            let neg = -&table.row(beta).to_owned();
            table.row_mut(gamma).assign(&neg);
        }
        let mut t = Tape::new(&store);
        let e = enc.encode_entities(&mut t, &kg, &[0, 1]).unwrap();
        assert_eq!(t.value(e).row(0), store.get(ans_tok).row(alpha));
        assert!(t.value(e).row(1).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn head_at_zero_weights() {
        let (mut store, enc, _) = build(EncoderKind::Lookup, 4, 3);
        for id in [enc.qry_head.w1, enc.qry_head.b1, enc.qry_head.w2, enc.qry_head.b2] {
            store.get_mut(id).fill(0.0);
        }
        let p = posterior_params(&store, enc.qry_head, 3, &[0.3, -1.0, 2.0, 0.1]).unwrap();
        assert_eq!(p.pi, vec![0.5; 3]);
        assert_eq!(p.mu, vec![0.0; 3]);
        assert_eq!(p.sigma, vec![1.0; 3]);
        // a +20 raw log-odds saturates at the clamp
        store.get_mut(enc.qry_head.b2)[[0, 0]] = 20.0;
        let p = posterior_params(&store, enc.qry_head, 3, &[0.0; 4]).unwrap();
        assert!((p.pi[0] - (1.0 - PROB_EPS)).abs() < 1e-15);
        assert!(posterior_params(&store, enc.qry_head, 3, &[0.0; 5]).is_err());
    }

    #[test]
    fn stick_transform() {
        let (mut store, enc, _) = build(EncoderKind::Lookup, 4, 2);
        let table = enc.sticks(Role::Query);
        let init = stick_params(&store, table, 0).unwrap();
        assert!((init[0].a - 5.0).abs() < 1e-12 && (init[0].b - 1.0).abs() < 1e-12);
        let ans = stick_params(&store, enc.sticks(Role::Answer), 0).unwrap();
        assert!((ans[1].a - 2.0).abs() < 1e-12);
        store.get_mut(table.c_raw)[[1, 0]] = 0.0;
        store.get_mut(table.d_raw)[[1, 0]] = 0.0;
        store.get_mut(table.c_raw)[[1, 1]] = -10.0;
        let p = stick_params(&store, table, 1).unwrap();
        assert!((p[0].a - 2f64.ln()).abs() < 1e-15 && (p[0].b - 2f64.ln()).abs() < 1e-15);
        assert!((p[1].a - 4.54e-5).abs() < 1e-7 && p[1].a > 0.0);
        assert!(matches!(stick_params(&store, table, 4), Err(Error::UnknownRow(4))));
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-3, 0.5, 1.0, 5.0, 40.0] {
            // bisection oracle
            let (mut lo, mut hi) = (-50.0, 60.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if softplus(mid) < y {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!((softplus_inv(y) - lo).abs() < 1e-8 * (1.0 + lo.abs()));
        }
    }

    #[test]
    fn inverse_query_tokens_include_marker() {
        let (_, enc, kg) = build(EncoderKind::BagOfTokens, 3, 2);
        let vocab = enc.spec.vocab.as_ref().unwrap();
        assert!(vocab.id(crate::kgstore::INVERSE_TOKEN).is_some());
        assert!(vocab.id(crate::kgstore::SEP_TOKEN).is_some());
        assert_eq!(vocab.encode(&["nope".to_string()]), vec![0]);
        let _ = kg;
    }

    proptest! {
        #[test]
        fn head_outputs_in_range(e in prop::collection::vec(-1e3f64..1e3, 4), seed in 0u64..50) {
            let kg = kg();
            let spec = FeatureEncoderSpec::new(EncoderKind::Lookup, 4, &kg, 16);
            let mut store = ParamStore::new();
            let enc = {
                let mut init = Initializer { store: &mut store, noise: NoiseStream::new(seed) };
                EncoderParams::init(&mut init, spec, 6, 5, 1, 1.0, 1.0)
            };
            for id in [enc.ans_head.w2, enc.ans_head.b2] {
                store.get_mut(id).mapv_inplace(|x| x * 100.0);
            }
            let p = posterior_params(&store, enc.ans_head, 5, &e).unwrap();
            prop_assert!(p.pi.iter().all(|&x| (PROB_EPS * 0.999..=1.0 - PROB_EPS * 0.999).contains(&x)));
            prop_assert!(p.sigma.iter().all(|&s| s > 0.0 && s.is_finite()));
            prop_assert!(p.mu.iter().all(|m| m.is_finite()));
        }

        #[test]
        fn bag_of_tokens_order_invariant(perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (store, enc, _) = build(EncoderKind::BagOfTokens, 3, 2);
            let TowerTables::Tokens { ans_tok, .. } = enc.tables else { unreachable!() };
            let mut ids: Vec<usize> = (0..enc.spec.vocab.as_ref().unwrap().len()).collect();
            let mut t = Tape::new(&store);
            let a = t.embed_mean(ans_tok, vec![ids.clone()]);
            ids.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let b = t.embed_mean(ans_tok, vec![ids]);
            for (x, y) in t.value(a).iter().zip(t.value(b).iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
