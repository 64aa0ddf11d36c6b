//! Question dependency graphs, graphized and linearized sub-KSGs, the
//! vocabulary and the word-embedding table.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr_free::normal;

use crate::biggnn::EncoderGraph;
use crate::error::{Error, Result};
use crate::kg_store::{EntityId, KnowledgeGraph, QuestionRecord, RelationId, Triple};
use crate::numerics::Tensor;
use crate::partition::SubKsg;

/// Token-node graph of a question; edges point head -> dependent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

/// Uses the record's dependency edges (labels already dropped) when present,
/// otherwise links consecutive tokens left to right.
pub fn build_question_graph(rec: &QuestionRecord) -> QuestionGraph {
    let edges = match &rec.dependency_edges {
        Some(e) => {
            let mut seen = BTreeSet::new();
            e.iter().copied().filter(|x| seen.insert(*x)).collect()
        }
        None => (1..rec.tokens.len()).map(|i| (i - 1, i)).collect(),
    };
    QuestionGraph {
        nodes: rec.tokens.clone(),
        edges,
    }
}

/// Optional `entity_id<TAB>name` surface forms for opaque entity ids.
#[derive(Clone, Debug, Default)]
pub struct EntityNames(HashMap<String, String>);

impl EntityNames {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected entity_id<TAB>name".into(),
            })?;
            map.insert(id.to_string(), name.to_string());
        }
        Ok(EntityNames(map))
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn insert(&mut self, id: impl Into<String>, name: impl Into<String>) {
        self.0.insert(id.into(), name.into());
    }
}

/// Splits relation names such as `people.person.place_of_birth` on `.`/`_`.
pub fn relation_tokens(name: &str) -> Vec<String> {
    name.split(['.', '_'])
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Surface tokens for graph elements.
#[derive(Clone, Copy)]
pub struct TextContext<'a> {
    pub kg: &'a KnowledgeGraph,
    pub names: Option<&'a EntityNames>,
}

impl<'a> TextContext<'a> {
    pub fn new(kg: &'a KnowledgeGraph, names: Option<&'a EntityNames>) -> Self {
        TextContext { kg, names }
    }

    pub fn entity_tokens(&self, e: EntityId) -> Vec<String> {
        let id = self.kg.entity_name(e);
        match self.names.and_then(|n| n.get(id)) {
            Some(name) => name.split_whitespace().map(str::to_string).collect(),
            None => vec![id.to_string()],
        }
    }

    pub fn relation_tokens(&self, r: RelationId) -> Vec<String> {
        relation_tokens(self.kg.relation_name(r))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Entity(EntityId),
    Relation(RelationId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub tokens: Vec<String>,
}

/// Triples turned into a graph where each relation occurrence is its own
/// node: `s -> r -> o`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphizedSubKsg {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

impl GraphizedSubKsg {
    pub fn entity_positions(&self) -> impl Iterator<Item = (usize, EntityId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.kind {
                NodeKind::Entity(e) => Some((i, e)),
                NodeKind::Relation(_) => None,
            })
    }
}

/// Graphizes `edges`; entity nodes come first in the order of `entities`
/// (extended by any endpoint not listed), then one node per triple.
pub fn graphize_triples(
    entities: &[EntityId],
    edges: &[Triple],
    ctx: &TextContext,
) -> GraphizedSubKsg {
    let mut index: HashMap<EntityId, usize> = HashMap::new();
    let mut nodes = Vec::new();
    let mut add_entity = |e: EntityId, nodes: &mut Vec<GraphNode>| -> usize {
        *index.entry(e).or_insert_with(|| {
            nodes.push(GraphNode {
                kind: NodeKind::Entity(e),
                tokens: ctx.entity_tokens(e),
            });
            nodes.len() - 1
        })
    };
    for &e in entities {
        add_entity(e, &mut nodes);
    }
    let endpoints: Vec<(usize, usize)> = edges
        .iter()
        .map(|t| {
            (
                add_entity(t.subject, &mut nodes),
                add_entity(t.object, &mut nodes),
            )
        })
        .collect();
    let mut out_edges = Vec::with_capacity(2 * edges.len());
    for (t, (s, o)) in edges.iter().zip(endpoints) {
        nodes.push(GraphNode {
            kind: NodeKind::Relation(t.relation),
            tokens: ctx.relation_tokens(t.relation),
        });
        let r = nodes.len() - 1;
        out_edges.push((s, r));
        out_edges.push((r, o));
    }
    GraphizedSubKsg {
        nodes,
        edges: out_edges,
    }
}

pub fn graphize_subksg(s: &SubKsg, ctx: &TextContext) -> Result<GraphizedSubKsg> {
    if s.edges.is_empty() {
        return Err(Error::invalid(format!(
            "cannot graphize an empty sub-KSG (question {})",
            s.question_id
        )));
    }
    Ok(graphize_triples(&s.nodes, &s.edges, ctx))
}

/// Token sequence of a sub-KSG: its triples in path-then-children order,
/// each as subject tokens, relation tokens, object tokens.
pub fn linearize_subksg(s: &SubKsg, ctx: &TextContext) -> Vec<String> {
    linearize_triples(&s.edges, ctx)
}

pub fn linearize_triples(edges: &[Triple], ctx: &TextContext) -> Vec<String> {
    let mut out = Vec::new();
    for t in edges {
        out.extend(ctx.entity_tokens(t.subject));
        out.extend(ctx.relation_tokens(t.relation));
        out.extend(ctx.entity_tokens(t.object));
    }
    out
}

pub const UNK: &str = "<unk>";

/// Token index; index 0 is reserved for unknown tokens.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        }
    }
}

impl Vocabulary {
    pub fn add(&mut self, tok: &str) -> usize {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(0)
    }

    pub fn indices(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.get(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Every token a question set and graph can produce, in a fixed order.
    pub fn from_corpus(questions: &[QuestionRecord], ctx: &TextContext) -> Self {
        let mut v = Vocabulary::default();
        for q in questions {
            for t in &q.tokens {
                v.add(t);
            }
        }
        for e in 0..ctx.kg.num_entities() as u32 {
            for t in ctx.entity_tokens(EntityId(e)) {
                v.add(&t);
            }
        }
        for r in 0..ctx.kg.num_relations() as u32 {
            for t in ctx.relation_tokens(RelationId(r)) {
                v.add(&t);
            }
        }
        v
    }
}

/// Word vectors aligned with a [`Vocabulary`]. Rows listed in `oov` are zero
/// and stay frozen.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub matrix: Arc<Tensor>,
    pub oov: Vec<usize>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vector(&self, tok: &str) -> &[f64] {
        self.matrix.row(self.vocab.get(tok))
    }

    /// Loads `token v1 .. vD` lines, keeping only tokens in `vocab`. Every
    /// line must have the same width, whether kept or not.
    pub fn load(path: &Path, vocab: Vocabulary) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim: Option<usize> = None;
        let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let vals: Vec<&str> = parts.collect();
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(parse_err(format!(
                        "embedding width {} != {}",
                        vals.len(),
                        d
                    )));
                }
                _ => {}
            }
            if vals.is_empty() {
                return Err(parse_err("embedding line without values".into()));
            }
            let Some(&idx) = vocab.index.get(tok) else {
                continue;
            };
            if idx == 0 {
                continue;
            }
            let v = vals
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| parse_err(format!("bad value `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.entry(idx).or_insert(v);
        }
        let dim =
            dim.ok_or_else(|| Error::invalid(format!("{}: no embeddings", path.display())))?;
        let mut data = vec![0.0; vocab.len() * dim];
        let mut oov = vec![0];
        for i in 1..vocab.len() {
            match rows.get(&i) {
                Some(v) => data[i * dim..(i + 1) * dim].copy_from_slice(v),
                None => oov.push(i),
            }
        }
        if oov.len() > 1 {
            log::info!(
                "{} of {} vocabulary tokens have no pretrained vector (zero, frozen)",
                oov.len() - 1,
                vocab.len() - 1
            );
        }
        Ok(EmbeddingTable {
            matrix: Arc::new(Tensor::new(vocab.len(), dim, data)?),
            vocab,
            oov,
        })
    }

    /// Seeded standard-normal vectors for every token except `<unk>`; used
    /// when no pretrained file is configured.
    pub fn random(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; vocab.len() * dim];
        for v in data.iter_mut().skip(dim) {
            *v = normal(&mut rng) / (dim as f64).sqrt();
        }
        EmbeddingTable {
            matrix: Arc::new(Tensor::new(vocab.len(), dim, data).expect("shape")),
            vocab,
            oov: vec![0],
        }
    }

    /// Writes every in-vocabulary, non-OOV row in the text format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (i, tok) in self.vocab.tokens().iter().enumerate() {
            if self.oov.contains(&i) {
                continue;
            }
            let vals: Vec<String> = self
                .matrix
                .row(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(w, "{tok} {}", vals.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean of the member token vectors; OOV tokens contribute zero vectors.
pub fn embed_node(tokens: &[String], table: &EmbeddingTable) -> Vec<f64> {
    let mut out = vec![0.0; table.dim()];
    if tokens.is_empty() {
        return out;
    }
    for t in tokens {
        for (o, v) in out.iter_mut().zip(table.vector(t)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= tokens.len() as f64);
    out
}

/// Index-level view of one side of a (question, sub-KSG) pair, ready for
/// the encoders.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub graph: EncoderGraph,
    /// Vocabulary indices per graph node (averaged into the node embedding).
    pub node_tokens: Arc<Vec<Vec<usize>>>,
    /// Vocabulary index per sequence position, as singleton lists.
    pub sequence: Arc<Vec<Vec<usize>>>,
}

impl ModelInput {
    pub fn question(rec: &QuestionRecord, vocab: &Vocabulary) -> Self {
        let g = build_question_graph(rec);
        let idx = vocab.indices(&rec.tokens);
        ModelInput {
            graph: EncoderGraph::new(g.nodes.len(), &g.edges),
            node_tokens: Arc::new(idx.iter().map(|&i| vec![i]).collect()),
            sequence: Arc::new(idx.iter().map(|&i| vec![i]).collect()),
        }
    }

    pub fn subksg(s: &SubKsg, ctx: &TextContext, vocab: &Vocabulary) -> Result<Self> {
        let g = graphize_subksg(s, ctx)?;
        let seq = linearize_subksg(s, ctx);
        Ok(Self::from_parts(&g, &seq, vocab))
    }

    pub fn from_parts(g: &GraphizedSubKsg, seq: &[String], vocab: &Vocabulary) -> Self {
        let mut seq_idx: Vec<Vec<usize>> = seq.iter().map(|t| vec![vocab.get(t)]).collect();
        if seq_idx.is_empty() {
            seq_idx.push(vec![0]);
        }
        ModelInput {
            graph: EncoderGraph::new(g.nodes.len(), &g.edges),
            node_tokens: Arc::new(g.nodes.iter().map(|n| vocab.indices(&n.tokens)).collect()),
            sequence: Arc::new(seq_idx),
        }
    }
}

/// Box-Muller without pulling in a distribution crate for one call site.
mod rand_distr_free {
    use rand::Rng;

    pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn rec(tokens: &[&str], deps: Option<Vec<(usize, usize)>>) -> QuestionRecord {
        QuestionRecord {
            id: "q".into(),
            text: tokens.join(" "),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            topic_entities: vec![],
            answers: BTreeSet::new(),
            dependency_edges: deps,
            unresolved: vec![],
            answerable: true,
        }
    }

    #[test]
    fn chain_fallback() {
        let g = build_question_graph(&rec(&["a", "b", "c"], None));
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn parse_edges_used_and_deduplicated() {
        let g = build_question_graph(&rec(&["a", "b", "c"], Some(vec![(1, 0), (1, 2)])));
        assert_eq!(g.edges, vec![(1, 0), (1, 2)]);
        let g = build_question_graph(&rec(&["a", "b", "c"], Some(vec![(1, 0), (1, 0)])));
        assert_eq!(g.edges, vec![(1, 0)]);
    }

    fn subksg(kg: &KnowledgeGraph, names: &[&str]) -> SubKsg {
        let mut edges: Vec<Triple> = kg.triples().to_vec();
        edges.sort_unstable();
        SubKsg {
            question_id: "q".into(),
            root: EntityId(0),
            anchor: EntityId(0),
            nodes: names.iter().map(|n| kg.entity_id(n).unwrap()).collect(),
            edges,
            label: 0,
        }
    }

    #[test]
    fn graphize_counts() {
        let kg = KnowledgeGraph::from_triples([("a", "r", "b")]);
        let ctx = TextContext::new(&kg, None);
        let g = graphize_subksg(&subksg(&kg, &["a", "b"]), &ctx).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (3, 2));

        let kg = KnowledgeGraph::from_triples([("a", "r1", "b"), ("a", "r2", "c")]);
        let ctx = TextContext::new(&kg, None);
        let g = graphize_subksg(&subksg(&kg, &["a", "b", "c"]), &ctx).unwrap();
        assert_eq!((g.nodes.len(), g.edges.len()), (5, 4));
    }

    #[test]
    fn repeated_relation_gets_distinct_nodes() {
        let kg = KnowledgeGraph::from_triples([("a", "r", "b"), ("b", "r", "c")]);
        let ctx = TextContext::new(&kg, None);
        let g = graphize_subksg(&subksg(&kg, &["a", "b", "c"]), &ctx).unwrap();
        let rel_nodes = g
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Relation(_)))
            .count();
        assert_eq!(rel_nodes, 2);
        assert_eq!(g.nodes.len(), 5);
    }

    #[test]
    fn graphize_empty_is_error() {
        let kg = KnowledgeGraph::from_triples([("a", "r", "b")]);
        let ctx = TextContext::new(&kg, None);
        let mut s = subksg(&kg, &["a"]);
        s.edges.clear();
        assert!(graphize_subksg(&s, &ctx).is_err());
    }

    #[test]
    fn linearize_splits_relations() {
        let kg = KnowledgeGraph::from_triples([("a", "education.institution", "b")]);
        let ctx = TextContext::new(&kg, None);
        let seq = linearize_subksg(&subksg(&kg, &["a", "b"]), &ctx);
        assert_eq!(seq, ["a", "education", "institution", "b"]);
    }

    #[test]
    fn linearize_path_order() {
        let kg = KnowledgeGraph::from_triples([("b", "s", "c"), ("a", "r", "b")]);
        let ctx = TextContext::new(&kg, None);
        let (a, b, c) = (EntityId(2), EntityId(0), EntityId(1));
        let s = SubKsg {
            question_id: "q".into(),
            root: a,
            anchor: b,
            nodes: vec![a, b, c],
            edges: vec![
                Triple::new(a, kg.relation_id("r").unwrap(), b),
                Triple::new(b, kg.relation_id("s").unwrap(), c),
            ],
            label: 0,
        };
        assert_eq!(linearize_subksg(&s, &ctx), ["a", "r", "b", "b", "s", "c"]);
    }

    #[test]
    fn empty_relation_name_has_no_tokens() {
        assert!(relation_tokens("").is_empty());
        assert!(relation_tokens("._").is_empty());
    }

    #[test]
    fn entity_names_replace_ids() {
        let kg = KnowledgeGraph::from_triples([("m.01", "r", "m.02")]);
        let mut names = EntityNames::default();
        names.insert("m.01", "martin luther");
        let ctx = TextContext::new(&kg, Some(&names));
        assert_eq!(ctx.entity_tokens(EntityId(0)), ["martin", "luther"]);
        assert_eq!(ctx.entity_tokens(EntityId(1)), ["m.02"]);
    }

    fn table_file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn vocab(toks: &[&str]) -> Vocabulary {
        let mut v = Vocabulary::default();
        for t in toks {
            v.add(t);
        }
        v
    }

    #[test]
    fn load_and_embed() {
        let f = table_file("t1 1 2 3\nt2 3 4 5\n");
        let table = EmbeddingTable::load(f.path(), vocab(&["t1", "t2", "t3"])).unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(table.vocab.len(), 4);
        assert_eq!(table.oov, vec![0, 3]);
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        assert_eq!(embed_node(&s(&["t1"]), &table), vec![1.0, 2.0, 3.0]);
        assert_eq!(embed_node(&s(&["t1", "t2"]), &table), vec![2.0, 3.0, 4.0]);
        assert_eq!(embed_node(&s(&["t3", "zzz"]), &table), vec![0.0; 3]);
        assert_eq!(
            embed_node(&s(&["t2", "t1"]), &table),
            embed_node(&s(&["t1", "t2"]), &table)
        );
    }

    #[test]
    fn inconsistent_width_is_error() {
        let f = table_file("t1 1 2 3\nt2 3 4\n");
        assert!(EmbeddingTable::load(f.path(), vocab(&["t1"])).is_err());
    }

    #[test]
    fn save_reload_round_trip() {
        let table = EmbeddingTable::random(vocab(&["a", "b", "c"]), 5, 7);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        table.save(&p).unwrap();
        let back = EmbeddingTable::load(&p, table.vocab.clone()).unwrap();
        assert_eq!(back.matrix, table.matrix);
    }
}
