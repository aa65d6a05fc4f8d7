//! Dataset ingestion, vocabularies, inverse-relation augmentation and the
//! filtered-protocol index.
//!
//! Triple files are UTF-8 TSV (`head<TAB>relation<TAB>tail`), description
//! files are `id<TAB>text`. A directory may carry a `manifest.toml` naming
//! the files; otherwise `train.txt`, `valid.txt`, `test.txt`,
//! `entity2text.txt` and `relation2text.txt` are used.
//!
//! Relation ids `0..n` are the base relations in first-appearance order and
//! `n + k` is the inverse of base relation `k`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEP_TOKEN: &str = "[SEP]";
pub const INVERSE_TOKEN: &str = "[INV]";
const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// A `(anchor, relation, ?)` row of the query/answer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub anchor: usize,
    pub relation: usize,
}

impl Query {
    pub fn new(anchor: usize, relation: usize) -> Self {
        Self { anchor, relation }
    }

    pub fn direction(&self, num_base_relations: usize) -> Direction {
        if self.relation < num_base_relations {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query: Query,
    pub answer: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub with_descriptions: bool,
    /// Reject valid/test triples that mention entities absent from train.
    pub strict: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    train: Option<String>,
    valid: Option<String>,
    test: Option<String>,
    entity_descriptions: Option<String>,
    relation_descriptions: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_index: HashMap<String, usize>,
    relations: Vec<String>,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    entity_text: Vec<Option<String>>,
    relation_text: Vec<Option<String>>,
}

#[derive(Default)]
struct VocabBuilder {
    entities: Vec<String>,
    entity_index: HashMap<String, usize>,
    relations: Vec<String>,
    relation_index: HashMap<String, usize>,
}

impl VocabBuilder {
    fn entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        self.entities.push(name.to_string());
        self.entity_index.insert(name.to_string(), self.entities.len() - 1);
        self.entities.len() - 1
    }

    fn relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), self.relations.len() - 1);
        self.relations.len() - 1
    }
}

type RawTriple = (String, String, String);

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_triples(path: &Path) -> Result<Vec<RawTriple>> {
    if !path.exists() {
        return Err(Error::MissingSplit(path.to_path_buf()));
    }
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                expected: 3,
            });
        }
        out.push((
            fields[0].trim().to_string(),
            fields[1].trim().to_string(),
            fields[2].trim().to_string(),
        ));
    }
    Ok(out)
}

fn read_descriptions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, desc)) = line.split_once('\t') else {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                expected: 2,
            });
        };
        out.push((id.trim().to_string(), desc.trim().to_string()));
    }
    Ok(out)
}

fn resolve(dir: &Path, named: Option<&String>, defaults: &[&str]) -> PathBuf {
    if let Some(name) = named {
        return dir.join(name);
    }
    defaults
        .iter()
        .map(|d| dir.join(d))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(defaults[0]))
}

/// Loads a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>, opts: LoadOptions) -> Result<KnowledgeGraph> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = if manifest_path.exists() {
        toml::from_str(&read_to_string(&manifest_path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?
    } else {
        Manifest::default()
    };

    let train_path = resolve(dir, manifest.train.as_ref(), &["train.txt", "train.tsv"]);
    let valid_path = resolve(dir, manifest.valid.as_ref(), &["valid.txt", "valid.tsv", "dev.txt"]);
    let test_path = resolve(dir, manifest.test.as_ref(), &["test.txt", "test.tsv"]);
    let raw_train = read_triples(&train_path)?;
    if raw_train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let raw_valid = read_triples(&valid_path)?;
    let raw_test = read_triples(&test_path)?;

    let mut vocab = VocabBuilder::default();
    let mut splits: Vec<Vec<(usize, usize, usize)>> = Vec::with_capacity(3);
    for (split, raw) in [("train", &raw_train), ("valid", &raw_valid), ("test", &raw_test)] {
        let mut ids = Vec::with_capacity(raw.len());
        for (h, r, t) in raw {
            if opts.strict && split != "train" {
                for e in [h, t] {
                    if !vocab.entity_index.contains_key(e) {
                        return Err(Error::UnknownEntity {
                            entity: e.clone(),
                            split: split.into(),
                        });
                    }
                }
            }
            let h = vocab.entity(h);
            let r = vocab.relation(r);
            let t = vocab.entity(t);
            ids.push((h, r, t));
        }
        splits.push(ids);
    }

    let to_triples = |v: &Vec<(usize, usize, usize)>| -> Vec<Triple> {
        v.iter()
            .map(|&(head, relation, tail)| Triple {
                head,
                relation,
                tail,
            })
            .collect()
    };
    let mut kg = KnowledgeGraph {
        entity_text: vec![None; vocab.entities.len()],
        relation_text: vec![None; vocab.relations.len()],
        entities: vocab.entities,
        entity_index: vocab.entity_index,
        relations: vocab.relations,
        train: to_triples(&splits[0]),
        valid: to_triples(&splits[1]),
        test: to_triples(&splits[2]),
    };

    if opts.with_descriptions {
        let ent_path = resolve(dir, manifest.entity_descriptions.as_ref(), &["entity2text.txt"]);
        if ent_path.exists() {
            for (id, text) in read_descriptions(&ent_path)? {
                if let Some(&e) = kg.entity_index.get(&id) {
                    kg.entity_text[e] = Some(text);
                }
            }
        }
        let rel_path = resolve(dir, manifest.relation_descriptions.as_ref(), &["relation2text.txt"]);
        if rel_path.exists() {
            let index: HashMap<&str, usize> =
                kg.relations.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
            for (id, text) in read_descriptions(&rel_path)? {
                if let Some(&r) = index.get(id.as_str()) {
                    kg.relation_text[r] = Some(text);
                }
            }
        }
    }
    Ok(kg)
}

impl KnowledgeGraph {
    /// Builds a graph from named triples; all splits share one vocabulary.
    pub fn from_named(
        train: &[(&str, &str, &str)],
        valid: &[(&str, &str, &str)],
        test: &[(&str, &str, &str)],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        let mut vocab = VocabBuilder::default();
        let mut conv = |list: &[(&str, &str, &str)]| -> Vec<Triple> {
            list.iter()
                .map(|&(h, r, t)| {
                    let head = vocab.entity(h);
                    let relation = vocab.relation(r);
                    let tail = vocab.entity(t);
                    Triple {
                        head,
                        relation,
                        tail,
                    }
                })
                .collect()
        };
        let (train, valid, test) = (conv(train), conv(valid), conv(test));
        Ok(Self {
            entity_text: vec![None; vocab.entities.len()],
            relation_text: vec![None; vocab.relations.len()],
            entities: vocab.entities,
            entity_index: vocab.entity_index,
            relations: vocab.relations,
            train,
            valid,
            test,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.relations.len()
    }

    /// Base relations plus their inverses.
    pub fn num_relations(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn inverse(&self, relation: usize) -> usize {
        let n = self.relations.len();
        if relation < n {
            relation + n
        } else {
            relation - n
        }
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn base_relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_name(&self, id: usize) -> String {
        let n = self.relations.len();
        if id < n {
            self.relations[id].clone()
        } else {
            format!("{INVERSE_TOKEN}{}", self.relations[id - n])
        }
    }

    pub fn base_relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entity_description(&self, id: usize) -> Option<&str> {
        self.entity_text.get(id).and_then(|d| d.as_deref())
    }

    pub fn relation_description(&self, base: usize) -> Option<&str> {
        self.relation_text.get(base).and_then(|d| d.as_deref())
    }

    pub fn set_entity_description(&mut self, id: usize, text: impl Into<String>) {
        self.entity_text[id] = Some(text.into());
    }

    pub fn set_relation_description(&mut self, base: usize, text: impl Into<String>) {
        self.relation_text[base] = Some(text.into());
    }

    pub fn has_descriptions(&self) -> bool {
        self.entity_text.iter().any(Option::is_some)
    }

    /// True when no triple occurs in two different splits.
    pub fn splits_disjoint(&self) -> bool {
        let train: HashSet<_> = self.train.iter().collect();
        let valid: HashSet<_> = self.valid.iter().collect();
        !self.valid.iter().any(|t| train.contains(t))
            && !self.test.iter().any(|t| train.contains(t) || valid.contains(t))
    }

    /// Writes the graph as TSV files plus a manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        for split in Split::ALL {
            let mut body = String::new();
            for t in self.split(split) {
                body.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.entities[t.head], self.relations[t.relation], self.entities[t.tail]
                ));
            }
            write(&format!("{}.txt", split.name()), body)?;
        }
        let mut manifest = Manifest {
            train: Some("train.txt".into()),
            valid: Some("valid.txt".into()),
            test: Some("test.txt".into()),
            ..Manifest::default()
        };
        if self.entity_text.iter().any(Option::is_some) {
            let body: String = self
                .entity_text
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.as_ref().map(|d| format!("{}\t{}\n", self.entities[i], d)))
                .collect();
            write("entity2text.txt", body)?;
            manifest.entity_descriptions = Some("entity2text.txt".into());
        }
        if self.relation_text.iter().any(Option::is_some) {
            let body: String = self
                .relation_text
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.as_ref().map(|d| format!("{}\t{}\n", self.relations[i], d)))
                .collect();
            write("relation2text.txt", body)?;
            manifest.relation_descriptions = Some("relation2text.txt".into());
        }
        let body = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        write(MANIFEST, body)
    }
}

/// Forward and backward query/answer pairs of one split, in triple order.
pub fn augment_inverse(kg: &KnowledgeGraph, split: Split) -> Vec<QueryAnswer> {
    let mut out = Vec::with_capacity(2 * kg.split(split).len());
    for t in kg.split(split) {
        out.push(QueryAnswer {
            query: Query::new(t.head, t.relation),
            answer: t.tail,
        });
        out.push(QueryAnswer {
            query: Query::new(t.tail, kg.inverse(t.relation)),
            answer: t.head,
        });
    }
    out
}

/// Known answers per query.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    answers: HashMap<Query, HashSet<usize>>,
}

static EMPTY: std::sync::OnceLock<HashSet<usize>> = std::sync::OnceLock::new();

impl FilterIndex {
    pub fn from_splits(kg: &KnowledgeGraph, splits: &[Split]) -> Self {
        let mut answers: HashMap<Query, HashSet<usize>> = HashMap::new();
        for &s in splits {
            for qa in augment_inverse(kg, s) {
                answers.entry(qa.query).or_default().insert(qa.answer);
            }
        }
        Self { answers }
    }

    pub fn get(&self, q: &Query) -> &HashSet<usize> {
        self.answers
            .get(q)
            .unwrap_or_else(|| EMPTY.get_or_init(HashSet::new))
    }

    pub fn contains(&self, q: &Query, answer: usize) -> bool {
        self.answers.get(q).is_some_and(|s| s.contains(&answer))
    }

    pub fn num_queries(&self) -> usize {
        self.answers.len()
    }
}

/// Filter over every split, as used by the filtered ranking protocol.
pub fn build_filter_index(kg: &KnowledgeGraph) -> FilterIndex {
    FilterIndex::from_splits(kg, &Split::ALL)
}

/// Something with a textual rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextItem {
    Query(Query),
    Entity(usize),
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn entity_tokens(kg: &KnowledgeGraph, e: usize) -> Vec<String> {
    match kg.entity_description(e) {
        Some(text) => tokenize(text),
        None => tokenize(kg.entity_name(e)),
    }
}

fn relation_tokens(kg: &KnowledgeGraph, relation: usize) -> Vec<String> {
    let n = kg.num_base_relations();
    let base = if relation < n { relation } else { relation - n };
    let mut toks = match kg.relation_description(base) {
        Some(text) => tokenize(text),
        None => tokenize(&kg.base_relations()[base]),
    };
    if toks.is_empty() {
        toks.push(kg.base_relations()[base].to_lowercase());
    }
    if relation >= n {
        toks.insert(0, INVERSE_TOKEN.to_string());
    }
    toks
}

/// Token sequence fed to a text encoder. Queries render as
/// `M(head) [SEP] M(relation) [SEP]`, entities as `M(entity)`; head tokens
/// are trimmed first when the sequence exceeds `max_tokens`.
pub fn compose_input_text(kg: &KnowledgeGraph, item: TextItem, max_tokens: usize) -> Vec<String> {
    match item {
        TextItem::Entity(e) => {
            let mut toks = entity_tokens(kg, e);
            if toks.is_empty() {
                toks.push(kg.entity_name(e).to_string());
            }
            toks.truncate(max_tokens);
            toks
        }
        TextItem::Query(q) => {
            let mut head = entity_tokens(kg, q.anchor);
            let rel = relation_tokens(kg, q.relation);
            let tail_len = rel.len() + 2;
            if head.len() + tail_len > max_tokens && max_tokens > tail_len {
                head.truncate(max_tokens - tail_len);
            }
            let mut toks = head;
            toks.push(SEP_TOKEN.to_string());
            toks.extend(rel);
            toks.push(SEP_TOKEN.to_string());
            toks.truncate(max_tokens);
            toks
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_named(
            &[("a", "r", "b"), ("a", "r", "c"), ("b", "s", "c")],
            &[("c", "s", "a")],
            &[("b", "r", "a")],
        )
        .unwrap()
    }

    #[test]
    fn augmentation_doubles_and_inverts() {
        let kg = KnowledgeGraph::from_named(&[("a", "r", "b")], &[], &[]).unwrap();
        let pairs = augment_inverse(&kg, Split::Train);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].query, Query::new(0, 0));
        assert_eq!(pairs[0].answer, 1);
        assert_eq!(pairs[1].query, Query::new(1, 1));
        assert_eq!(pairs[1].answer, 0);
        assert_eq!(pairs[1].query.direction(1), Direction::Backward);
    }

    #[test]
    fn self_loop_augmentation() {
        let kg = KnowledgeGraph::from_named(&[("a", "r", "a")], &[], &[]).unwrap();
        let pairs = augment_inverse(&kg, Split::Train);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.query.anchor == 0 && p.answer == 0));
        assert_ne!(pairs[0].query, pairs[1].query);
    }

    #[test]
    fn filter_index_examples() {
        let kg = toy();
        let idx = build_filter_index(&kg);
        let (a, b, c) = (0, 1, 2);
        let r = 0;
        assert_eq!(idx.get(&Query::new(a, r)), &HashSet::from([b, c]));
        assert_eq!(idx.get(&Query::new(b, kg.inverse(r))), &HashSet::from([a]));
        assert!(idx.get(&Query::new(c, r)).is_empty());
        // test split triple (b, r, a) is filtered too
        assert!(idx.contains(&Query::new(b, r), a));
    }

    #[test]
    fn relation_count_doubles() {
        let kg = toy();
        assert_eq!(kg.num_base_relations(), 2);
        assert_eq!(kg.num_relations(), 4);
        assert_eq!(kg.inverse(kg.inverse(1)), 1);
        assert!(kg.splits_disjoint());
    }

    #[test]
    fn text_composition() {
        let mut kg = KnowledgeGraph::from_named(&[("PJ Harvey", "genre", "e42")], &[], &[]).unwrap();
        kg.set_entity_description(0, "PJ Harvey: Polly Jean Harvey MBE is an English musician");
        let toks = compose_input_text(&kg, TextItem::Entity(0), 64);
        assert_eq!(&toks[..4], &["pj", "harvey", "polly", "jean"]);
        assert_eq!(compose_input_text(&kg, TextItem::Entity(1), 64), vec!["e42"]);
        assert_eq!(compose_input_text(&kg, TextItem::Entity(0), 2).len(), 2);

        let q = compose_input_text(&kg, TextItem::Query(Query::new(1, 1)), 64);
        assert_eq!(q, vec!["e42", SEP_TOKEN, INVERSE_TOKEN, "genre", SEP_TOKEN]);
        // head is trimmed before the relation
        let q = compose_input_text(&kg, TextItem::Query(Query::new(0, 0)), 5);
        assert_eq!(q, vec!["pj", "harvey", SEP_TOKEN, "genre", SEP_TOKEN]);
    }

    #[test]
    fn loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), LoadOptions::default()),
            Err(Error::MissingSplit(_))
        ));
        fs::write(dir.path().join("train.txt"), "").unwrap();
        fs::write(dir.path().join("valid.txt"), "").unwrap();
        fs::write(dir.path().join("test.txt"), "").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), LoadOptions::default()),
            Err(Error::EmptySplit(_))
        ));
        fs::write(dir.path().join("train.txt"), "a\tr\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), LoadOptions::default()),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        fs::write(dir.path().join("train.txt"), "a\tr\tb\n").unwrap();
        fs::write(dir.path().join("test.txt"), "a\tr\tz\n").unwrap();
        let kg = load_dataset(dir.path(), LoadOptions::default()).unwrap();
        assert_eq!(kg.num_entities(), 3);
        let strict = LoadOptions {
            strict: true,
            ..LoadOptions::default()
        };
        assert!(matches!(
            load_dataset(dir.path(), strict),
            Err(Error::UnknownEntity { .. })
        ));
    }

    #[test]
    fn save_and_reload_round_trip() {
        let mut kg = toy();
        kg.set_entity_description(1, "the b entity");
        kg.set_relation_description(0, "relates to");
        let dir = tempfile::tempdir().unwrap();
        kg.save(dir.path()).unwrap();
        let back = load_dataset(
            dir.path(),
            LoadOptions {
                with_descriptions: true,
                strict: false,
            },
        )
        .unwrap();
        assert_eq!(back, kg);
    }
}
