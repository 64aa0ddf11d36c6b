//! Knowledge-graph storage: interning, adjacency indices, question records
//! and coarse k-hop retrieval of a question-specific subgraph.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }

    pub fn is_self_loop(&self) -> bool {
        self.subject == self.object
    }
}

/// Dense ids handed out in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Immutable after construction; safe to share across worker threads.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    out_adj: Vec<Vec<(RelationId, EntityId)>>,
    in_adj: Vec<Vec<(RelationId, EntityId)>>,
}

impl KnowledgeGraph {
    /// Builds a graph from string triples; duplicates are dropped, first
    /// occurrence order is kept.
    pub fn from_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut b = GraphBuilder::default();
        for (s, r, o) in triples {
            b.add(s, r, o);
        }
        b.finish()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn entity_names(&self) -> &[String] {
        self.entities.names()
    }

    pub fn relation_names(&self) -> &[String] {
        self.relations.names()
    }

    /// Outgoing `(relation, object)` pairs, sorted.
    pub fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_adj[e.index()]
    }

    /// Incoming `(relation, subject)` pairs, sorted.
    pub fn in_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.in_adj[e.index()]
    }

    pub fn self_loops(&self) -> usize {
        self.triples.iter().filter(|t| t.is_self_loop()).count()
    }

    pub fn triple_names(&self, t: &Triple) -> [&str; 3] {
        [
            self.entity_name(t.subject),
            self.relation_name(t.relation),
            self.entity_name(t.object),
        ]
    }

    pub fn write_triples(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for t in &self.triples {
            let [s, r, o] = self.triple_names(t);
            writeln!(w, "{s}\t{r}\t{o}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
}

impl GraphBuilder {
    fn add(&mut self, s: &str, r: &str, o: &str) {
        let s = EntityId(self.entities.intern(s));
        let r = RelationId(self.relations.intern(r));
        let o = EntityId(self.entities.intern(o));
        let t = Triple::new(s, r, o);
        if self.seen.insert(t) {
            self.triples.push(t);
        }
    }

    fn finish(self) -> KnowledgeGraph {
        let n = self.entities.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for t in &self.triples {
            out_adj[t.subject.index()].push((t.relation, t.object));
            in_adj[t.object.index()].push((t.relation, t.subject));
        }
        for l in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            l.sort_unstable();
        }
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            out_adj,
            in_adj,
        }
    }
}

/// Reads a `subject<TAB>relation<TAB>object` file. Blank lines are skipped.
pub fn load_triples(path: &Path) -> Result<KnowledgeGraph> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut b = GraphBuilder::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!(
                    "expected 3 non-empty tab-separated fields, got {}",
                    fields.len()
                ),
            });
        }
        b.add(fields[0], fields[1], fields[2]);
    }
    Ok(b.finish())
}

/// Question as it appears on disk (entities by name).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RawQuestion {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub topic_entities: Vec<String>,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependency_edges: Option<Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub topic_entities: Vec<EntityId>,
    pub answers: BTreeSet<EntityId>,
    pub dependency_edges: Option<Vec<(usize, usize)>>,
    /// Entity names from the record that are not in the graph.
    pub unresolved: Vec<String>,
    /// False when no topic entity or no answer resolved; such records are
    /// excluded from coverage accounting.
    pub answerable: bool,
}

impl QuestionRecord {
    pub fn to_raw(&self, kg: &KnowledgeGraph) -> RawQuestion {
        let names = |ids: &mut dyn Iterator<Item = EntityId>| {
            ids.map(|e| kg.entity_name(e).to_string()).collect()
        };
        RawQuestion {
            id: self.id.clone(),
            text: self.text.clone(),
            tokens: self.tokens.clone(),
            topic_entities: names(&mut self.topic_entities.iter().copied()),
            answers: names(&mut self.answers.iter().copied()),
            dependency_edges: self
                .dependency_edges
                .as_ref()
                .map(|e| e.iter().map(|&(h, d)| [h, d]).collect()),
        }
    }

    pub fn resolve(raw: RawQuestion, kg: &KnowledgeGraph) -> Result<(QuestionRecord, Vec<String>)> {
        if raw.tokens.is_empty() {
            return Err(Error::invalid(format!(
                "question {}: empty token list",
                raw.id
            )));
        }
        if let Some(edges) = &raw.dependency_edges {
            if let Some(bad) = edges
                .iter()
                .find(|[h, d]| *h >= raw.tokens.len() || *d >= raw.tokens.len())
            {
                return Err(Error::invalid(format!(
                    "question {}: dependency edge {:?} out of range for {} tokens",
                    raw.id,
                    bad,
                    raw.tokens.len()
                )));
            }
        }
        let mut warnings = Vec::new();
        let mut unresolved = Vec::new();
        let mut resolve = |names: &[String], what: &str| -> Vec<EntityId> {
            let mut out = Vec::new();
            for n in names {
                match kg.entity_id(n) {
                    Some(e) => out.push(e),
                    None => {
                        warnings.push(format!("question {}: {what} `{n}` not in graph", raw.id));
                        unresolved.push(n.clone());
                    }
                }
            }
            out
        };
        let topics = resolve(&raw.topic_entities, "topic entity");
        let answers: BTreeSet<EntityId> = resolve(&raw.answers, "answer").into_iter().collect();
        let mut dedup = HashSet::new();
        let topic_entities: Vec<EntityId> =
            topics.into_iter().filter(|t| dedup.insert(*t)).collect();
        let answerable = !topic_entities.is_empty() && !answers.is_empty();
        Ok((
            QuestionRecord {
                id: raw.id,
                text: raw.text,
                tokens: raw.tokens,
                topic_entities,
                answers,
                dependency_edges: raw
                    .dependency_edges
                    .map(|e| e.into_iter().map(|[h, d]| (h, d)).collect()),
                unresolved,
                answerable,
            },
            warnings,
        ))
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RecordError {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct QuestionLoad {
    pub records: Vec<QuestionRecord>,
    pub errors: Vec<RecordError>,
    pub warnings: Vec<String>,
}

/// Reads line-delimited JSON question records. Malformed records are
/// reported per line instead of aborting the load.
pub fn load_questions(path: &Path, kg: &KnowledgeGraph) -> Result<QuestionLoad> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut load = QuestionLoad::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                load.errors.push(RecordError {
                    line: i + 1,
                    id: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
        let parsed = serde_json::from_value::<RawQuestion>(value)
            .map_err(Error::from)
            .and_then(|raw| QuestionRecord::resolve(raw, kg));
        match parsed {
            Ok((rec, warnings)) => {
                for w in &warnings {
                    log::warn!("{w}");
                }
                load.warnings.extend(warnings);
                load.records.push(rec);
            }
            Err(e) => load.errors.push(RecordError {
                line: i + 1,
                id,
                message: e.to_string(),
            }),
        }
    }
    Ok(load)
}

/// A question-specific knowledge subgraph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ksg {
    /// Sorted by id.
    pub nodes: Vec<EntityId>,
    /// Sorted; every endpoint is in `nodes`.
    pub edges: Vec<Triple>,
}

impl Ksg {
    pub fn contains(&self, e: EntityId) -> bool {
        self.nodes.binary_search(&e).is_ok()
    }
}

/// All entities within `k` hops of any topic, following edges in either
/// direction, plus every graph triple between them.
pub fn khop_retrieve(g: &KnowledgeGraph, topics: &[EntityId], k: usize) -> Result<Ksg> {
    if topics.is_empty() {
        return Err(Error::invalid(
            "k-hop retrieval needs at least one topic entity",
        ));
    }
    let n = g.num_entities();
    let mut depth = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &t in topics {
        if t.index() >= n {
            return Err(Error::invalid(format!("topic entity {} not in graph", t.0)));
        }
        if depth[t.index()] == usize::MAX {
            depth[t.index()] = 0;
            queue.push_back(t);
        }
    }
    while let Some(u) = queue.pop_front() {
        let d = depth[u.index()];
        if d == k {
            continue;
        }
        for &(_, v) in g.out_edges(u).iter().chain(g.in_edges(u)) {
            if depth[v.index()] == usize::MAX {
                depth[v.index()] = d + 1;
                queue.push_back(v);
            }
        }
    }
    let nodes: Vec<EntityId> = (0..n as u32)
        .map(EntityId)
        .filter(|e| depth[e.index()] != usize::MAX)
        .collect();
    let mut edges = Vec::new();
    for &s in &nodes {
        for &(r, o) in g.out_edges(s) {
            if depth[o.index()] != usize::MAX {
                edges.push(Triple::new(s, r, o));
            }
        }
    }
    edges.sort_unstable();
    Ok(Ksg { nodes, edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_two_lines() {
        let f = write_tmp("a\tr\tb\nb\tr2\tc\n");
        let g = load_triples(f.path()).unwrap();
        assert_eq!(g.num_entities(), 3);
        assert_eq!(g.num_relations(), 2);
        assert_eq!(g.triples().len(), 2);
    }

    #[test]
    fn empty_file_is_empty_graph() {
        let f = write_tmp("");
        let g = load_triples(f.path()).unwrap();
        assert_eq!(g.num_entities(), 0);
        assert!(g.triples().is_empty());
    }

    #[test]
    fn duplicates_are_dropped() {
        let f = write_tmp("a\tr\tb\na\tr\tb\n");
        let g = load_triples(f.path()).unwrap();
        assert_eq!(g.triples().len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("a\tr\tb\n\nbroken line\n");
        match load_triples(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn self_loops_are_kept() {
        let g = KnowledgeGraph::from_triples([("a", "r", "a"), ("a", "r", "b")]);
        assert_eq!(g.self_loops(), 1);
        assert_eq!(g.triples().len(), 2);
    }

    #[test]
    fn ids_in_first_seen_order() {
        let g = KnowledgeGraph::from_triples([("x", "r", "y"), ("a", "s", "x")]);
        assert_eq!(g.entity_id("x"), Some(EntityId(0)));
        assert_eq!(g.entity_id("y"), Some(EntityId(1)));
        assert_eq!(g.entity_id("a"), Some(EntityId(2)));
        assert_eq!(g.relation_id("s"), Some(RelationId(1)));
    }

    fn chain() -> KnowledgeGraph {
        KnowledgeGraph::from_triples([("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")])
    }

    #[test]
    fn khop_chain() {
        let g = chain();
        let a = g.entity_id("a").unwrap();
        let ksg = khop_retrieve(&g, &[a], 2).unwrap();
        let names: Vec<&str> = ksg.nodes.iter().map(|e| g.entity_name(*e)).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(ksg.edges.len(), 2);
    }

    #[test]
    fn khop_zero() {
        let g = chain();
        let a = g.entity_id("a").unwrap();
        let ksg = khop_retrieve(&g, &[a], 0).unwrap();
        assert_eq!(ksg.nodes, vec![a]);
        assert!(ksg.edges.is_empty());
    }

    #[test]
    fn khop_follows_reverse_edges() {
        let g = chain();
        let d = g.entity_id("d").unwrap();
        let ksg = khop_retrieve(&g, &[d], 1).unwrap();
        assert_eq!(ksg.nodes.len(), 2);
    }

    #[test]
    fn khop_needs_topics() {
        assert!(khop_retrieve(&chain(), &[], 2).is_err());
    }

    #[test]
    fn questions_with_errors_and_unknown_entities() {
        let g = chain();
        let f = write_tmp(concat!(
            r#"{"id":"q1","text":"t","tokens":["a","b"],"topic_entities":["a"],"answers":["c","d"]}"#,
            "\n",
            r#"{"id":"q2","text":"t","tokens":["x"],"answers":["c"]}"#,
            "\n",
            r#"{"id":"q3","text":"t","tokens":["x"],"topic_entities":["a"],"answers":["zzz"]}"#,
            "\n"
        ));
        let load = load_questions(f.path(), &g).unwrap();
        assert_eq!(load.records.len(), 2);
        assert_eq!(load.errors.len(), 1);
        assert_eq!(load.errors[0].id.as_deref(), Some("q2"));
        assert_eq!(load.records[0].answers.len(), 2);
        assert!(load.records[0].answerable);
        assert!(!load.records[1].answerable);
        assert_eq!(load.records[1].unresolved, vec!["zzz".to_string()]);
    }

    #[test]
    fn dependency_edges_must_be_in_range() {
        let g = chain();
        let raw = RawQuestion {
            id: "q".into(),
            text: "t".into(),
            tokens: vec!["a".into(), "b".into()],
            topic_entities: vec!["a".into()],
            answers: vec!["b".into()],
            dependency_edges: Some(vec![[0, 2]]),
        };
        assert!(QuestionRecord::resolve(raw, &g).is_err());
    }
}
