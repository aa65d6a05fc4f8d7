//! Filtered ranking and MRR / Hit@k, reported per direction and averaged.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgstore::{Direction, FilterIndex, KnowledgeGraph, Query, Split, Triple};
use crate::model::{Items, Model};

/// Rank of `gold` after removing the other known answers. Ties count
/// against the gold entity.
pub fn rank_query(scores: &[f64], gold: usize, filtered: &HashSet<usize>) -> Result<usize> {
    let Some(&g) = scores.get(gold) else {
        return Err(Error::GoldMissing(gold));
    };
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(e, &s)| e != gold && !filtered.contains(&e) && s.partial_cmp(&g) != Some(Ordering::Less))
        .count();
    Ok(1 + above)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Empty("rank list"));
        }
        let n = ranks.len() as f64;
        let hit = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            count: ranks.len(),
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hit1: hit(1),
            hit3: hit(3),
            hit10: hit(10),
        })
    }

    fn mean(a: &Self, b: &Self) -> Self {
        Self {
            count: a.count + b.count,
            mrr: 0.5 * (a.mrr + b.mrr),
            hit1: 0.5 * (a.hit1 + b.hit1),
            hit3: 0.5 * (a.hit3 + b.hit3),
            hit10: 0.5 * (a.hit10 + b.hit10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub triple: Triple,
    pub direction: Direction,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub forward: Metrics,
    pub backward: Metrics,
    /// Unweighted mean of the two directions.
    pub average: Metrics,
    #[serde(skip)]
    pub ranks: Vec<RankRecord>,
}

pub fn aggregate(forward: &[usize], backward: &[usize]) -> Result<RankingReport> {
    let f = Metrics::from_ranks(forward)?;
    let b = Metrics::from_ranks(backward)?;
    Ok(RankingReport {
        forward: f,
        backward: b,
        average: Metrics::mean(&f, &b),
        ranks: Vec::new(),
    })
}

/// Ranks every triple in both directions with an arbitrary scorer, which
/// returns one score per entity.
pub fn evaluate_with<F>(kg: &KnowledgeGraph, triples: &[Triple], filter: &FilterIndex, scorer: F) -> Result<RankingReport>
where
    F: Fn(&Query) -> Result<Vec<f64>> + Sync,
{
    if triples.is_empty() {
        return Err(Error::EmptySplit("evaluation triples".into()));
    }
    let jobs: Vec<(Triple, Direction)> = triples
        .iter()
        .flat_map(|&t| [(t, Direction::Forward), (t, Direction::Backward)])
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(t, dir)| {
            let (q, gold) = match dir {
                Direction::Forward => (Query::new(t.head, t.relation), t.tail),
                Direction::Backward => (Query::new(t.tail, kg.inverse(t.relation)), t.head),
            };
            let scores = scorer(&q)?;
            let rank = rank_query(&scores, gold, filter.get(&q))?;
            Ok(RankRecord {
                triple: t,
                direction: dir,
                rank,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |d: Direction| -> Vec<usize> { records.iter().filter(|r| r.direction == d).map(|r| r.rank).collect() };
    let mut report = aggregate(&pick(Direction::Forward), &pick(Direction::Backward))?;
    report.ranks = records;
    Ok(report)
}

/// Evaluation-mode ranking of `triples` with cached entity representations.
pub fn evaluate_triples(model: &Model, kg: &KnowledgeGraph, triples: &[Triple], filter: &FilterIndex) -> Result<RankingReport> {
    let entities: Vec<usize> = (0..kg.num_entities()).collect();
    let ent = model.representations(kg, Items::Entities(&entities))?;
    let mut queries: Vec<Query> = triples
        .iter()
        .flat_map(|t| [Query::new(t.head, t.relation), Query::new(t.tail, kg.inverse(t.relation))])
        .collect();
    queries.sort_unstable();
    queries.dedup();
    let qrep = model.representations(kg, Items::Queries(&queries))?;
    evaluate_with(kg, triples, filter, |q| {
        let i = queries.binary_search(q).expect("query was encoded");
        Ok(ent.dot(&qrep.row(i)).to_vec())
    })
}

pub fn evaluate(model: &Model, kg: &KnowledgeGraph, split: Split, filter: &FilterIndex) -> Result<RankingReport> {
    let triples = kg.split(split);
    if triples.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    evaluate_triples(model, kg, triples, filter)
}

impl RankingReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned-column table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<10} {:>7} {:>8} {:>8} {:>8} {:>8}", "direction", "n", "MRR", "Hit@1", "Hit@3", "Hit@10").unwrap();
        for (name, m) in [("forward", &self.forward), ("backward", &self.backward), ("average", &self.average)] {
            writeln!(
                out,
                "{:<10} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, m.count, m.mrr, m.hit1, m.hit3, m.hit10
            )
            .unwrap();
        }
        out
    }

    /// One line per ranked query: `head relation tail direction rank`.
    pub fn ranks_tsv(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::from("head\trelation\ttail\tdirection\trank\n");
        for r in &self.ranks {
            let dir = match r.direction {
                Direction::Forward => "forward",
                Direction::Backward => "backward",
            };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                kg.entity_name(r.triple.head),
                kg.base_relations()[r.triple.relation],
                kg.entity_name(r.triple.tail),
                dir,
                r.rank
            )
            .unwrap();
        }
        out
    }
}

/// Parses [`RankingReport::ranks_tsv`] output back into records.
pub fn parse_ranks_tsv(kg: &KnowledgeGraph, text: &str) -> Result<Vec<RankRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::MalformedLine {
            path: "ranks.tsv".into(),
            line: i + 1,
            expected: 5,
        };
        if f.len() != 5 {
            return Err(bad());
        }
        let head = kg.entity_id(f[0]).ok_or_else(bad)?;
        let relation = kg.base_relation_id(f[1]).ok_or_else(bad)?;
        let tail = kg.entity_id(f[2]).ok_or_else(bad)?;
        let direction = match f[3] {
            "forward" => Direction::Forward,
            "backward" => Direction::Backward,
            _ => return Err(bad()),
        };
        let rank = f[4].parse().map_err(|_| bad())?;
        out.push(RankRecord {
            triple: Triple { head, relation, tail },
            direction,
            rank,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::build_filter_index;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        let none = HashSet::new();
        assert_eq!(rank_query(&[0.9, 0.1, 0.2, 0.3, 0.4], 0, &none).unwrap(), 1);
        let filtered = HashSet::from([2]);
        assert_eq!(rank_query(&[0.9, 0.95, 0.99], 0, &filtered).unwrap(), 2);
        assert_eq!(rank_query(&[0.5, 0.5, 0.1], 0, &none).unwrap(), 2);
        assert!(matches!(rank_query(&[0.5], 3, &none), Err(Error::GoldMissing(3))));
        // the gold itself may sit in the filter set
        assert_eq!(rank_query(&[0.9, 0.1], 0, &HashSet::from([0])).unwrap(), 1);
    }

    #[test]
    fn aggregate_examples() {
        let m = Metrics::from_ranks(&[1, 2, 4]).unwrap();
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert!((m.hit1 - 1.0 / 3.0).abs() < 1e-12);
        let r = aggregate(&[1, 1], &[1]).unwrap();
        assert_eq!((r.average.mrr, r.average.hit1, r.average.hit10), (1.0, 1.0, 1.0));
        let r = aggregate(&[1, 2, 5, 5, 5], &[5, 5, 5, 5, 5, 5, 5, 5, 5, 5]).unwrap();
        assert!((r.forward.mrr - 0.42).abs() < 1e-12 && (r.backward.mrr - 0.2).abs() < 1e-12);
        assert!((r.average.mrr - 0.31).abs() < 1e-12);
        assert!(aggregate(&[], &[1]).is_err());
    }

    #[test]
    fn perfect_scorer_has_unit_mrr() {
        let kg = KnowledgeGraph::from_named(
            &[("a", "r", "b"), ("b", "r", "c"), ("c", "s", "a")],
            &[],
            &[("a", "s", "c"), ("c", "r", "b")],
        )
        .unwrap();
        let filter = build_filter_index(&kg);
        let test = kg.split(Split::Test).to_vec();
        let report = evaluate_with(&kg, &test, &filter, |q| {
            let answers = filter.get(q);
            Ok((0..kg.num_entities()).map(|e| if answers.contains(&e) { 1.0 } else { 0.0 }).collect())
        })
        .unwrap();
        assert_eq!(report.average.mrr, 1.0);
        assert_eq!(report.ranks.len(), 4);
        let tsv = report.ranks_tsv(&kg);
        assert_eq!(parse_ranks_tsv(&kg, &tsv).unwrap(), report.ranks);
        assert!(report.to_text().contains("average"));
        assert!(evaluate_with(&kg, &[], &filter, |_| Ok(vec![])).is_err());
    }

    proptest! {
        #[test]
        fn filtered_entities_never_matter(
            scores in prop::collection::vec(-1.0f64..1.0, 8),
            gold in 0usize..8,
            extra in -10.0f64..10.0,
        ) {
            let filtered = HashSet::from([(gold + 1) % 8]);
            let base = rank_query(&scores, gold, &filtered).unwrap();
            let mut changed = scores.clone();
            changed[(gold + 1) % 8] = extra;
            prop_assert_eq!(rank_query(&changed, gold, &filtered).unwrap(), base);
        }

        #[test]
        fn raising_gold_never_hurts(scores in prop::collection::vec(-1.0f64..1.0, 8), gold in 0usize..8, bump in 0.0f64..2.0) {
            let none = HashSet::new();
            let mut up = scores.clone();
            up[gold] += bump;
            prop_assert!(rank_query(&up, gold, &none).unwrap() <= rank_query(&scores, gold, &none).unwrap());
        }

        #[test]
        fn monotone_transform_keeps_rank(scores in prop::collection::vec(-1.0f64..1.0, 8), gold in 0usize..8) {
            let none = HashSet::new();
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(rank_query(&t, gold, &none).unwrap(), rank_query(&scores, gold, &none).unwrap());
        }

        #[test]
        fn report_invariants(ranks in prop::collection::vec(1usize..50, 1..40)) {
            let m = Metrics::from_ranks(&ranks).unwrap();
            prop_assert!(m.hit1 <= m.hit3 && m.hit3 <= m.hit10);
            prop_assert!(m.mrr >= m.hit1 && m.mrr <= 1.0 && m.mrr > 0.0);
        }
    }
}
