//! Structural analyses of a trained model and its training graph:
//! activated communities, label propagation with modularity, performance by
//! geodesic distance and the sorted latent-strength export.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Metrics, RankRecord};
use crate::kgstore::{KnowledgeGraph, Split, Triple};
use crate::noise::{NoiseStream, Purpose};
use crate::tape::Matrix;

/// Label propagation stops after this many rounds even if labels still move.
pub const MAX_LP_ROUNDS: usize = 100;
/// Distances above this share the "5+" bucket.
pub const MAX_BUCKET_DISTANCE: usize = 5;
/// Characters of an entity description kept in community listings.
pub const DESCRIPTION_PREFIX: usize = 60;

/// Simple undirected graph over entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityGraph {
    adj: Vec<Vec<usize>>,
    edges: usize,
}

impl EntityGraph {
    /// Builds a graph on `n` nodes, dropping self-loops and duplicate or
    /// reversed edges.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = vec![Vec::new(); n];
        for (a, b) in edges {
            if a != b {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut count = 0;
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            count += list.len();
        }
        Self { adj, edges: count / 2 }
    }

    /// Entity graph of the training triples, relation labels ignored.
    pub fn from_train(kg: &KnowledgeGraph) -> Self {
        Self::new(kg.num_entities(), kg.split(Split::Train).iter().map(|t| (t.head, t.tail)))
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adj[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.adj.len()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes are reached");
            for &v in &self.adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Mean number of memberships above `threshold` per entity row.
pub fn activated_communities(z: &Matrix, threshold: f64) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Empty("membership matrix"));
    }
    let active = z.iter().filter(|&&p| p > threshold).count();
    Ok(active as f64 / z.nrows() as f64)
}

/// Community label per node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    pub labels: Vec<usize>,
}

impl CommunityAssignment {
    pub fn singletons(n: usize) -> Self {
        Self { labels: (0..n).collect() }
    }

    pub fn num_communities(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// `node<TAB>label` lines.
    pub fn to_tsv(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::from("entity\tcommunity\n");
        for (node, label) in self.labels.iter().enumerate() {
            writeln!(out, "{}\t{}", kg.entity_name(node), label).unwrap();
        }
        out
    }
}

/// Asynchronous label propagation. Each round visits the nodes in a seeded
/// random order and moves each to the most frequent label among its
/// neighbours, ties going to the lowest label.
pub fn label_propagation(graph: &EntityGraph, seed: u64) -> CommunityAssignment {
    let n = graph.num_nodes();
    let mut labels: Vec<usize> = (0..n).collect();
    let noise = NoiseStream::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for round in 0..MAX_LP_ROUNDS {
        order.sort_unstable();
        order.shuffle(&mut noise.rng(Purpose::Communities, round as u64));
        let mut changed = false;
        for &u in &order {
            if graph.degree(u) == 0 {
                continue;
            }
            counts.clear();
            for &v in graph.neighbors(u) {
                *counts.entry(labels[v]).or_default() += 1;
            }
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&l, _)| l)
                .expect("node has neighbours");
            if best != labels[u] {
                labels[u] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    CommunityAssignment { labels }
}

/// Newman modularity with resolution `gamma`.
pub fn modularity(graph: &EntityGraph, assignment: &CommunityAssignment, gamma: f64) -> Result<f64> {
    if graph.num_edges() == 0 {
        return Err(Error::Empty("graph has no edges"));
    }
    let labels = &assignment.labels;
    if labels.len() != graph.num_nodes() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: graph.num_nodes(),
        });
    }
    let two_m = 2.0 * graph.num_edges() as f64;
    let mut inside = 0usize;
    let mut degree_sums: HashMap<usize, f64> = HashMap::new();
    for u in 0..graph.num_nodes() {
        inside += graph.neighbors(u).iter().filter(|&&v| labels[v] == labels[u]).count();
        *degree_sums.entry(labels[u]).or_default() += graph.degree(u) as f64;
    }
    let expected: f64 = degree_sums.values().map(|k| k * k).sum::<f64>() / (two_m * two_m);
    Ok(inside as f64 / two_m - gamma * expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistanceBucket {
    /// Exact distance up to [`MAX_BUCKET_DISTANCE`].
    Hops(usize),
    Beyond,
    Unreachable,
}

impl DistanceBucket {
    pub fn of(distance: Option<usize>) -> Self {
        match distance {
            Some(d) if d <= MAX_BUCKET_DISTANCE => Self::Hops(d),
            Some(_) => Self::Beyond,
            None => Self::Unreachable,
        }
    }
}

impl fmt::Display for DistanceBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Hops(d) => write!(f, "{d}"),
            Self::Beyond => write!(f, "{MAX_BUCKET_DISTANCE}+"),
            Self::Unreachable => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicBucket {
    pub bucket: DistanceBucket,
    pub triples: Vec<Triple>,
    /// Metrics over both ranking directions of the bucket's triples.
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicBreakdown {
    pub buckets: Vec<GeodesicBucket>,
}

impl GeodesicBreakdown {
    pub fn num_triples(&self) -> usize {
        self.buckets.iter().map(|b| b.triples.len()).sum()
    }

    /// `distance  triples  ranked  mrr  hit1  hit3  hit10`, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("distance\ttriples\tranked\tmrr\thit1\thit3\thit10\n");
        for b in &self.buckets {
            let m = &b.metrics;
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                b.bucket,
                b.triples.len(),
                m.count,
                m.mrr,
                m.hit1,
                m.hit3,
                m.hit10
            )
            .unwrap();
        }
        out
    }
}

/// Train-graph distance between the ends of every triple.
pub fn triple_distances(graph: &EntityGraph, triples: &[Triple]) -> Vec<Option<usize>> {
    let mut heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
    heads.sort_unstable();
    heads.dedup();
    let from: HashMap<usize, Vec<Option<usize>>> = heads.par_iter().map(|&h| (h, graph.distances_from(h))).collect();
    triples.iter().map(|t| from[&t.head][t.tail]).collect()
}

/// Groups ranked triples by head-tail distance in the undirected training
/// graph. Both directions of a triple land in the same bucket.
pub fn geodesic_breakdown(kg: &KnowledgeGraph, records: &[RankRecord]) -> Result<GeodesicBreakdown> {
    if records.is_empty() {
        return Err(Error::Empty("rank records"));
    }
    let graph = EntityGraph::from_train(kg);
    let mut triples: Vec<Triple> = Vec::new();
    let mut ranks: HashMap<Triple, Vec<usize>> = HashMap::new();
    for r in records {
        let entry = ranks.entry(r.triple).or_default();
        if entry.is_empty() {
            triples.push(r.triple);
        }
        entry.push(r.rank);
    }
    let distances = triple_distances(&graph, &triples);
    let mut grouped: BTreeMap<DistanceBucket, (Vec<Triple>, Vec<usize>)> = BTreeMap::new();
    for (t, d) in triples.iter().zip(distances) {
        let slot = grouped.entry(DistanceBucket::of(d)).or_default();
        slot.0.push(*t);
        slot.1.extend(&ranks[t]);
    }
    let buckets = grouped
        .into_iter()
        .map(|(bucket, (triples, ranks))| {
            Ok(GeodesicBucket {
                bucket,
                triples,
                metrics: Metrics::from_ranks(&ranks)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeodesicBreakdown { buckets })
}

/// Column order by summed absolute strength, largest first. Equal sums keep
/// their original order.
pub fn strength_order(f: &Matrix) -> Vec<usize> {
    let sums: Vec<f64> = f.columns().into_iter().map(|c| c.iter().map(|x| x.abs()).sum()).collect();
    let mut order: Vec<usize> = (0..sums.len()).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityMember {
    pub entity: usize,
    pub name: String,
    pub value: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityListing {
    /// Position after sorting by strength.
    pub index: usize,
    /// Column in the unsorted matrix.
    pub column: usize,
    pub strength: f64,
    pub members: Vec<CommunityMember>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStructure {
    pub order: Vec<usize>,
    /// `F` with columns permuted into `order`.
    pub sorted: Matrix,
    pub communities: Vec<CommunityListing>,
}

/// Sorts the answer strengths `f` (one row per entity) and lists the
/// `top_n` strongest entities of the first `communities` columns.
pub fn export_latent_structure(
    f: &Matrix,
    kg: &KnowledgeGraph,
    top_n: usize,
    communities: usize,
) -> Result<LatentStructure> {
    if f.nrows() != kg.num_entities() {
        return Err(Error::LengthMismatch {
            left: f.nrows(),
            right: kg.num_entities(),
        });
    }
    let order = strength_order(f);
    let sorted = f.select(ndarray::Axis(1), &order);
    let listings = order
        .iter()
        .take(communities)
        .enumerate()
        .map(|(index, &column)| {
            let col = f.column(column);
            let mut ents: Vec<usize> = (0..f.nrows()).collect();
            ents.sort_by(|&a, &b| col[b].total_cmp(&col[a]));
            let members = ents
                .into_iter()
                .take(top_n)
                .map(|e| CommunityMember {
                    entity: e,
                    name: kg.entity_name(e).to_string(),
                    value: col[e],
                    description: kg
                        .entity_description(e)
                        .unwrap_or(kg.entity_name(e))
                        .chars()
                        .take(DESCRIPTION_PREFIX)
                        .collect(),
                })
                .collect();
            CommunityListing {
                index,
                column,
                strength: col.iter().map(|x| x.abs()).sum(),
                members,
            }
        })
        .collect();
    Ok(LatentStructure {
        order,
        sorted,
        communities: listings,
    })
}

impl LatentStructure {
    /// Sorted strengths as CSV, one row per entity.
    pub fn to_csv(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::from("entity");
        for c in &self.order {
            write!(out, ",c{c}").unwrap();
        }
        out.push('\n');
        for (e, row) in self.sorted.rows().into_iter().enumerate() {
            out.push_str(&csv_field(kg.entity_name(e)));
            for x in row {
                write!(out, ",{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn listings_tsv(&self) -> String {
        let mut out = String::from("index\tcolumn\tstrength\trank\tentity\tvalue\tdescription\n");
        for c in &self.communities {
            for (rank, m) in c.members.iter().enumerate() {
                writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{}\t{}\t{:.6}\t{}",
                    c.index,
                    c.column,
                    c.strength,
                    rank + 1,
                    m.name,
                    m.value,
                    m.description.replace(['\t', '\n'], " ")
                )
                .unwrap();
            }
        }
        out
    }

    /// One line per community with its members.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.communities {
            let names: Vec<&str> = c.members.iter().map(|m| m.description.as_str()).collect();
            writeln!(out, "#{:<3} (col {:>3}, strength {:>9.3}): {}", c.index, c.column, c.strength, names.join(" | ")).unwrap();
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
