//! The full parameter set: encoder towers, posterior heads, stick tables and
//! the shared decoder, plus evaluation-mode feature extraction.

use std::collections::HashMap;

use crate::config::{HeadKind, RunConfig};
use crate::decoder::DecoderNet;
use crate::encoder::{posterior_forward, EncoderParams, FeatureEncoderSpec, Initializer};
use crate::error::{Error, Result};
use crate::kgstore::{augment_inverse, KnowledgeGraph, Query, Split};
use crate::latent::Role;
use crate::noise::NoiseStream;
use crate::tape::{BufferKind, Matrix, ParamStore, Tape, Var};

/// Rows per evaluation chunk when encoding many items.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderNet,
    query_rows: HashMap<Query, usize>,
}

/// Training queries in first-appearance order; each owns a stick row.
pub fn training_query_rows(kg: &KnowledgeGraph) -> HashMap<Query, usize> {
    let mut rows = HashMap::new();
    for qa in augment_inverse(kg, Split::Train) {
        let next = rows.len();
        rows.entry(qa.query).or_insert(next);
    }
    rows
}

impl Model {
    /// Fresh parameters seeded from `config.train.seed`.
    pub fn new(kg: &KnowledgeGraph, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let query_rows = training_query_rows(kg);
        let spec = FeatureEncoderSpec::new(m.encoder, m.dim, kg, m.max_tokens);
        let mut params = ParamStore::new();
        let (encoder, decoder) = {
            let mut init = Initializer {
                store: &mut params,
                noise: NoiseStream::new(config.train.seed),
            };
            let enc = EncoderParams::init(
                &mut init,
                spec,
                m.hidden,
                m.k,
                query_rows.len(),
                m.alpha_qry,
                m.alpha_ans,
            );
            let dec = DecoderNet::init(&mut init, m.k, m.hidden, m.dim);
            (enc, dec)
        };
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            decoder,
            query_rows,
        })
    }

    /// Rebuilds a model around stored parameters, checking every shape.
    pub fn from_parts(kg: &KnowledgeGraph, config: RunConfig, params: ParamStore) -> Result<Self> {
        let fresh = Model::new(kg, &config)?;
        if fresh.params.len() != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameter blocks, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, value) in fresh.params.iter() {
            let id = params
                .id(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter block {name}")))?;
            if params.get(id).dim() != value.dim() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    value.dim(),
                    params.get(id).dim()
                )));
            }
        }
        let encoder = EncoderParams::bind(&params, fresh.encoder.spec.clone(), config.model.k)?;
        let decoder = DecoderNet::bind(&params)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            query_rows: fresh.query_rows,
        })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.model.head
    }

    pub fn k(&self) -> usize {
        self.config.model.k
    }

    pub fn query_row(&self, q: &Query) -> Option<usize> {
        self.query_rows.get(q).copied()
    }

    pub fn num_query_rows(&self) -> usize {
        self.query_rows.len()
    }

    fn encode(&self, tape: &mut Tape<'_>, kg: &KnowledgeGraph, items: Items<'_>) -> Result<Var> {
        match items {
            Items::Queries(q) => self.encoder.encode_queries(tape, kg, q),
            Items::Entities(e) => self.encoder.encode_entities(tape, kg, e),
        }
    }

    /// Deterministic features: `f = π ⊙ μ` for the sparse head, `μ` otherwise.
    pub fn eval_features(&self, tape: &mut Tape<'_>, role: Role, e: Var) -> Result<(Var, Option<Var>)> {
        let post = posterior_forward(tape, self.encoder.head(role), e, self.k())?;
        Ok(match self.head_kind() {
            HeadKind::Sparse => {
                let pi = tape.sigmoid(post.log_odds);
                let f = tape.mul(pi, post.mu);
                (tape.tag(f, BufferKind::Latent), Some(pi))
            }
            HeadKind::GaussianVae | HeadKind::PureAe => (post.mu, None),
        })
    }

    fn chunked(
        &self,
        kg: &KnowledgeGraph,
        items: Items<'_>,
        mut each: impl FnMut(&Tape<'_>, Var, Var, Option<Var>, usize) -> Result<()>,
    ) -> Result<()> {
        let (n, role) = items.len_role();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new(&self.params);
            let e = self.encode(&mut tape, kg, items.slice(start, end))?;
            let (f, pi) = self.eval_features(&mut tape, role, e)?;
            let g = self.decoder.forward(&mut tape, f)?;
            each(&tape, f, g, pi, start)?;
        }
        Ok(())
    }

    /// Unit-norm decoded representations.
    pub fn representations(&self, kg: &KnowledgeGraph, items: Items<'_>) -> Result<Matrix> {
        let n = items.len_role().0;
        let mut out = Matrix::zeros((n, self.config.model.dim));
        let mut fill = |tape: &Tape<'_>, _f: Var, g: Var, _pi: Option<Var>, offset: usize| -> Result<()> {
            let gv = tape.value(g);
            for (i, row) in gv.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::DegenerateRepresentation);
                }
                out.row_mut(offset + i).assign(&(&row / norm));
            }
            Ok(())
        };
        self.chunked(kg, items, &mut fill)?;
        Ok(out)
    }

    /// Evaluation-mode features `F` and memberships `Z` (the latter only for
    /// the sparse head) of the given entities.
    pub fn answer_latents(&self, kg: &KnowledgeGraph, entities: &[usize]) -> Result<(Matrix, Option<Matrix>)> {
        let k = self.k();
        let mut f_out = Matrix::zeros((entities.len(), k));
        let mut z_out = (self.head_kind() == HeadKind::Sparse).then(|| Matrix::zeros((entities.len(), k)));
        let mut fill = |tape: &Tape<'_>, f: Var, _g: Var, pi: Option<Var>, offset: usize| -> Result<()> {
            let fv = tape.value(f);
            let rows = fv.nrows();
            f_out.slice_mut(ndarray::s![offset..offset + rows, ..]).assign(fv);
            if let (Some(z), Some(pi)) = (z_out.as_mut(), pi) {
                z.slice_mut(ndarray::s![offset..offset + rows, ..]).assign(tape.value(pi));
            }
            Ok(())
        };
        self.chunked(kg, Items::Entities(entities), &mut fill)?;
        Ok((f_out, z_out))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Items<'a> {
    Queries(&'a [Query]),
    Entities(&'a [usize]),
}

impl Items<'_> {
    fn slice(&self, start: usize, end: usize) -> Items<'_> {
        match self {
            Items::Queries(q) => Items::Queries(&q[start..end]),
            Items::Entities(e) => Items::Entities(&e[start..end]),
        }
    }

    fn len_role(&self) -> (usize, Role) {
        match self {
            Items::Queries(q) => (q.len(), Role::Query),
            Items::Entities(e) => (e.len(), Role::Answer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (KnowledgeGraph, RunConfig) {
        let kg = KnowledgeGraph::from_named(
            &[("a", "r", "b"), ("b", "r", "c"), ("a", "s", "c")],
            &[],
            &[("c", "s", "a")],
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.model.k = 4;
        cfg.model.dim = 8;
        cfg.model.hidden = 6;
        (kg, cfg)
    }

    #[test]
    fn query_rows_cover_training_queries() {
        let (kg, cfg) = tiny();
        let m = Model::new(&kg, &cfg).unwrap();
        // (a,r) (b,r⁻¹) (b,r) (c,r⁻¹) (a,s) (c,s⁻¹)
        assert_eq!(m.num_query_rows(), 6);
        assert_eq!(m.query_row(&Query::new(0, 0)), Some(0));
        assert_eq!(m.query_row(&Query::new(2, 1)), None);
    }

    #[test]
    fn representations_are_unit_and_deterministic() {
        let (kg, cfg) = tiny();
        let m = Model::new(&kg, &cfg).unwrap();
        let a = m.representations(&kg, Items::Entities(&[0, 1, 2])).unwrap();
        let b = m.representations(&kg, Items::Entities(&[0, 1, 2])).unwrap();
        assert_eq!(a, b);
        for row in a.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        let (f, z) = m.answer_latents(&kg, &[0, 1, 2]).unwrap();
        assert_eq!(f.dim(), (3, 4));
        assert!(z.unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let (kg, cfg) = tiny();
        let m = Model::new(&kg, &cfg).unwrap();
        let again = Model::from_parts(&kg, cfg.clone(), m.params.clone()).unwrap();
        assert_eq!(again.params, m.params);
        let mut other = cfg;
        other.model.k = 5;
        assert!(matches!(
            Model::from_parts(&kg, other, m.params.clone()),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
