//! Independent oracles for the partition, retrieval, metrics and gradient
//! code, plus the overfit and dimension checks. Shared by `selftest` and
//! the integration tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::answer_select::{AnswerExample, AnswererConfig, AnswererModel, MergedGraph};
use crate::biggnn::{encode_graph_values, init_biggnn, BiGgnnConfig, EncoderGraph};
use crate::ebimpm::{
    context_encode, ebimpm_forward, init_ebimpm, multi_perspective_match, EbimpmConfig,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{mrr, recall_at_k, recall_at_k_unfiltered, MrrMode};
use crate::kg_store::{khop_retrieve, EntityId, KnowledgeGraph, Ksg, QuestionRecord, Triple};
use crate::numerics::nn::{bilstm, gru_cell, init_bilstm, init_gru, init_lstm, lstm_cell};
use crate::numerics::{
    gradcheck, gradcheck_params, GradcheckOptions, GradcheckReport, ParameterSet, Tape, Tensor, Var,
};
use crate::partition::{partition_ksg, partition_question, PartitionOptions, SubKsg};
use crate::ranker::{
    pair_mse, train, Ablation, AdamConfigSerde, PairExample, RankerConfig, RankerModel, TrainConfig,
};
use crate::synthetic::{self, SyntheticDataset};
use crate::text_pipeline::{EmbeddingTable, EntityNames, ModelInput, TextContext, Vocabulary};

pub const GRAD_TOL: f64 = 1e-4;

/// Outcome of one oracle suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// A random directed multigraph with at most `max_nodes` entities and
/// `max_edges` triples over three relations; self-loops allowed.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_edges: usize) -> KnowledgeGraph {
    let n = rng.gen_range(1..=max_nodes);
    let m = rng.gen_range(1..=max_edges);
    let mut triples = Vec::with_capacity(m);
    for _ in 0..m {
        let s = rng.gen_range(0..n);
        let o = rng.gen_range(0..n);
        let r = rng.gen_range(0..3);
        triples.push((format!("e{s}"), format!("r{r}"), format!("e{o}")));
    }
    KnowledgeGraph::from_triples(
        triples
            .iter()
            .map(|(a, r, b)| (a.as_str(), r.as_str(), b.as_str())),
    )
}

/// The whole graph as one subgraph.
pub fn whole_graph(kg: &KnowledgeGraph) -> Ksg {
    let mut edges = kg.triples().to_vec();
    edges.sort_unstable();
    Ksg {
        nodes: (0..kg.num_entities() as u32).map(EntityId).collect(),
        edges,
    }
}

/// One sub-KSG as produced by the literal simulation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiteralSubKsg {
    pub anchor: EntityId,
    pub nodes: BTreeSet<EntityId>,
    pub edges: BTreeSet<Triple>,
    pub label: u8,
}

/// Step-by-step reading of the partition procedure: shortest distances by
/// repeated edge relaxation, each node's parent the smallest-id predecessor
/// one step closer to the root, then one sub-KSG per node whose children are
/// all leaves.
pub fn literal_partition(
    ksg: &Ksg,
    root: EntityId,
    answers: &BTreeSet<EntityId>,
) -> Vec<LiteralSubKsg> {
    let mut dist: HashMap<EntityId, usize> = HashMap::new();
    dist.insert(root, 0);
    for _ in 0..ksg.nodes.len() {
        let mut changed = false;
        for t in &ksg.edges {
            if t.subject == t.object {
                continue;
            }
            if let Some(&du) = dist.get(&t.subject) {
                let better = dist.get(&t.object).is_none_or(|&dv| du + 1 < dv);
                if better {
                    dist.insert(t.object, du + 1);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut parent: HashMap<EntityId, EntityId> = HashMap::new();
    for t in &ksg.edges {
        if t.subject == t.object || t.object == root {
            continue;
        }
        if let (Some(&du), Some(&dv)) = (dist.get(&t.subject), dist.get(&t.object)) {
            if du + 1 == dv {
                let p = parent.entry(t.object).or_insert(t.subject);
                if t.subject < *p {
                    *p = t.subject;
                }
            }
        }
    }
    let children = |n: EntityId| -> Vec<EntityId> {
        let mut c: Vec<EntityId> = parent
            .iter()
            .filter(|(_, &p)| p == n)
            .map(|(&v, _)| v)
            .collect();
        c.sort_unstable();
        c
    };
    let mut reached: Vec<EntityId> = dist.keys().copied().collect();
    reached.sort_unstable();
    let mut out = Vec::new();
    for &n in &reached {
        let ch = children(n);
        if ch.is_empty() || !ch.iter().all(|&c| children(c).is_empty()) {
            continue;
        }
        let mut nodes: BTreeSet<EntityId> = ch.iter().copied().collect();
        let mut cur = n;
        nodes.insert(cur);
        while let Some(&p) = parent.get(&cur) {
            nodes.insert(p);
            cur = p;
        }
        let edges: BTreeSet<Triple> = ksg
            .edges
            .iter()
            .filter(|t| {
                t.object != root
                    && nodes.contains(&t.object)
                    && parent.get(&t.object) == Some(&t.subject)
            })
            .copied()
            .collect();
        let label = u8::from(nodes.iter().any(|x| answers.contains(x)));
        out.push(LiteralSubKsg {
            anchor: n,
            nodes,
            edges,
            label,
        });
    }
    out
}

fn as_literal(s: &SubKsg) -> LiteralSubKsg {
    LiteralSubKsg {
        anchor: s.anchor,
        nodes: s.nodes.iter().copied().collect(),
        edges: s.edges.iter().copied().collect(),
        label: s.label,
    }
}

/// Compares [`partition_ksg`] with [`literal_partition`] on `graphs` random
/// graphs. Returns the number of disagreeing graphs and a description of the
/// first one.
pub fn partition_oracle(graphs: usize, seed: u64) -> Result<(usize, Option<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    let mut first = None;
    for g in 0..graphs {
        let kg = random_graph(&mut rng, 30, 60);
        let ksg = whole_graph(&kg);
        let root = EntityId(rng.gen_range(0..kg.num_entities() as u32));
        let answers: BTreeSet<EntityId> = ksg
            .nodes
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.2))
            .collect();
        let got: Vec<LiteralSubKsg> =
            partition_ksg(&ksg, root, &answers, "q", PartitionOptions::default())?
                .iter()
                .map(as_literal)
                .collect();
        let want = literal_partition(&ksg, root, &answers);
        if got != want {
            bad += 1;
            first.get_or_insert_with(|| format!("graph {g}: got {got:?}, want {want:?}"));
        }
    }
    Ok((bad, first))
}

/// Nodes within `k` undirected hops by repeated frontier expansion, and
/// every triple between them.
pub fn brute_khop(kg: &KnowledgeGraph, topics: &[EntityId], k: usize) -> Ksg {
    let mut nodes: BTreeSet<EntityId> = topics.iter().copied().collect();
    for _ in 0..k {
        let mut next = nodes.clone();
        for t in kg.triples() {
            if nodes.contains(&t.subject) {
                next.insert(t.object);
            }
            if nodes.contains(&t.object) {
                next.insert(t.subject);
            }
        }
        nodes = next;
    }
    let mut edges: Vec<Triple> = kg
        .triples()
        .iter()
        .filter(|t| nodes.contains(&t.subject) && nodes.contains(&t.object))
        .copied()
        .collect();
    edges.sort_unstable();
    Ksg {
        nodes: nodes.into_iter().collect(),
        edges,
    }
}

pub fn khop_oracle(graphs: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..graphs {
        let kg = random_graph(&mut rng, 30, 60);
        let t = rng.gen_range(1..=2);
        let topics: Vec<EntityId> = (0..t)
            .map(|_| EntityId(rng.gen_range(0..kg.num_entities() as u32)))
            .collect();
        let k = rng.gen_range(0..=3);
        if khop_retrieve(&kg, &topics, k)? != brute_khop(&kg, &topics, k) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// The two-branch education graph and its question.
pub fn education() -> (KnowledgeGraph, QuestionRecord) {
    let kg = KnowledgeGraph::from_triples(
        synthetic::EDUCATION_TRIPLES
            .iter()
            .map(|[a, r, b]| (*a, *r, *b)),
    );
    let (q, _) = QuestionRecord::resolve(synthetic::education_question(), &kg)
        .expect("fixture question resolves");
    (kg, q)
}

/// Sub-KSGs of the education example as `(anchor, node names, label)`.
pub fn education_partition() -> Result<Vec<(String, BTreeSet<String>, u8)>> {
    let (kg, q) = education();
    let ksg = khop_retrieve(&kg, &q.topic_entities, 2)?;
    let p = partition_question(&q, &ksg, PartitionOptions::default())?;
    Ok(p.subksgs
        .iter()
        .map(|s| {
            (
                kg.entity_name(s.anchor).to_string(),
                s.nodes
                    .iter()
                    .map(|&n| kg.entity_name(n).to_string())
                    .collect(),
                s.label,
            )
        })
        .collect())
}

/// The expected partition of the education example.
pub fn education_expected() -> Vec<(String, BTreeSet<String>, u8)> {
    let set = |v: &[&str]| {
        v.iter()
            .map(|s| s.to_string())
            .collect::<BTreeSet<String>>()
    };
    vec![
        (
            "m.0n1dd_q".into(),
            set(&["m.051cc", "m.0n1dd_q", "m.0gl5_", "m.02h4rq6"]),
            1,
        ),
        (
            "m.076hxb3".into(),
            set(&["m.051cc", "m.076hxb3", "m.05jxkf", "m.0f2tj"]),
            0,
        ),
    ]
}

/// Recall@K, filtered and not, recomputed from first-positive positions.
pub fn brute_recall(lists: &[Vec<u8>], k: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut with_pos = 0usize;
    for l in lists {
        let first = (0..l.len()).find(|&i| l[i] == 1);
        if first.is_some() {
            with_pos += 1;
        }
        if first.is_some_and(|i| i < k) {
            hits += 1;
        }
    }
    let filtered = if with_pos == 0 {
        0.0
    } else {
        hits as f64 / with_pos as f64
    };
    let unfiltered = if lists.is_empty() {
        0.0
    } else {
        hits as f64 / lists.len() as f64
    };
    (filtered, unfiltered)
}

/// MRR recomputed by scanning each list by hand.
pub fn brute_mrr(lists: &[Vec<u8>], mode: MrrMode) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for l in lists {
        let mut rr = Vec::new();
        for (i, &x) in l.iter().enumerate() {
            if x == 1 {
                rr.push(1.0 / (i + 1) as f64);
                if mode == MrrMode::First {
                    break;
                }
            }
        }
        if rr.is_empty() {
            continue;
        }
        n += 1;
        total += rr.iter().sum::<f64>() / rr.len() as f64;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Random label lists of length 0..=30 with varying positive rates.
pub fn random_label_lists(count: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(0..=30);
            let p = rng.gen_range(0.0..0.4);
            (0..len).map(|_| u8::from(rng.gen_bool(p))).collect()
        })
        .collect()
}

/// Mismatches between the metric code and the brute-force versions, and
/// Recall@K monotonicity violations, over `count` random batches of lists.
pub fn metric_oracle(count: usize, seed: u64) -> Result<(usize, usize)> {
    let all = random_label_lists(count, seed);
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for chunk in all.chunks(50) {
        let refs: Vec<&[u8]> = chunk.iter().map(Vec::as_slice).collect();
        let mut prev: Option<(f64, f64)> = None;
        for k in 1..=32 {
            let got = (recall_at_k(&refs, k)?, recall_at_k_unfiltered(&refs, k)?);
            if got != brute_recall(chunk, k) {
                mismatches += 1;
            }
            if let Some(p) = prev {
                if got.0 < p.0 || got.1 < p.1 {
                    non_monotone += 1;
                }
            }
            prev = Some(got);
        }
        for mode in [MrrMode::First, MrrMode::All] {
            if mrr(&refs, mode) != brute_mrr(chunk, mode) {
                mismatches += 1;
            }
        }
    }
    // single-list batches too, so every list is checked on its own
    for l in &all {
        let refs = [l.as_slice()];
        for k in [1, 3, 5, 10] {
            if (recall_at_k(&refs, k)?, recall_at_k_unfiltered(&refs, k)?)
                != brute_recall(std::slice::from_ref(l), k)
            {
                mismatches += 1;
            }
        }
        if mrr(&refs, MrrMode::First) != brute_mrr(std::slice::from_ref(l), MrrMode::First) {
            mismatches += 1;
        }
    }
    Ok((mismatches, non_monotone))
}

/// One gradient check in the suite.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradcheckReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.checked > 0 && self.report.passes(GRAD_TOL)
    }
}

fn rnd(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Weighted sum with fixed weights, so every output coordinate matters.
fn reduce(t: &mut Tape, v: Var) -> Result<Var> {
    let [r, c] = t.value(v).shape();
    let w = t.constant(rnd(r, c, 4242));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let a = || rnd(3, 4, 1);
    let b = || rnd(3, 4, 2);
    let lists = Arc::new(vec![vec![0, 2], vec![], vec![1, 1, 2]]);
    let nb = Arc::new(vec![vec![1], vec![0, 2], vec![]]);
    vec![
        (
            "matmul",
            vec![rnd(2, 3, 3), rnd(3, 2, 4)],
            Box::new(|t, x| t.matmul(x[0], x[1])),
        ),
        ("add", vec![a(), b()], Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![a(), b()], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![a(), b()], Box::new(|t, x| t.mul(x[0], x[1]))),
        (
            "add_row",
            vec![a(), rnd(1, 4, 5)],
            Box::new(|t, x| t.add_row(x[0], x[1])),
        ),
        (
            "mul_row",
            vec![a(), rnd(1, 4, 5)],
            Box::new(|t, x| t.mul_row(x[0], x[1])),
        ),
        ("scale", vec![a()], Box::new(|t, x| Ok(t.scale(x[0], -1.3)))),
        ("sigmoid", vec![a()], Box::new(|t, x| Ok(t.sigmoid(x[0])))),
        ("tanh", vec![a()], Box::new(|t, x| Ok(t.tanh(x[0])))),
        (
            "transpose",
            vec![a()],
            Box::new(|t, x| Ok(t.transpose(x[0]))),
        ),
        (
            "concat_cols",
            vec![a(), rnd(3, 2, 6)],
            Box::new(|t, x| t.concat_cols(&[x[0], x[1], x[0]])),
        ),
        (
            "concat_rows",
            vec![a(), rnd(2, 4, 7)],
            Box::new(|t, x| t.concat_rows(&[x[0], x[1]])),
        ),
        (
            "slice_cols",
            vec![a()],
            Box::new(|t, x| t.slice_cols(x[0], 1, 3)),
        ),
        (
            "slice_rows",
            vec![a()],
            Box::new(|t, x| t.slice_rows(x[0], 1, 3)),
        ),
        (
            "gather_rows",
            vec![a()],
            Box::new(|t, x| t.gather_rows(x[0], vec![2, 0, 2])),
        ),
        (
            "gather_mean",
            vec![a()],
            Box::new(move |t, x| t.gather_mean(x[0], lists.clone())),
        ),
        (
            "repeat_rows",
            vec![rnd(1, 4, 8)],
            Box::new(|t, x| t.repeat_rows(x[0], 3)),
        ),
        (
            "propagate",
            vec![a()],
            Box::new(move |t, x| t.propagate(x[0], nb.clone())),
        ),
        (
            "softmax_rows",
            vec![rnd(3, 5, 9)],
            Box::new(|t, x| Ok(t.softmax_rows(x[0]))),
        ),
        (
            "normalize_rows",
            vec![rnd(3, 5, 10)],
            Box::new(|t, x| Ok(t.normalize_rows(x[0]))),
        ),
        ("sum", vec![a()], Box::new(|t, x| Ok(t.sum(x[0])))),
        ("mean", vec![a()], Box::new(|t, x| Ok(t.mean(x[0])))),
        (
            "max_rows",
            vec![rnd(4, 3, 11)],
            Box::new(|t, x| t.max_rows(x[0])),
        ),
        (
            "row_cosine",
            vec![rnd(1, 5, 12), rnd(1, 5, 13)],
            Box::new(|t, x| t.row_cosine(x[0], x[1])),
        ),
        (
            "mp_cosine",
            vec![rnd(4, 6, 14), rnd(4, 6, 15), rnd(3, 6, 16)],
            Box::new(|t, x| t.mp_cosine(x[0], x[1], x[2])),
        ),
        (
            "mp_cosine_broadcast",
            vec![rnd(4, 6, 17), rnd(1, 6, 18), rnd(3, 6, 19)],
            Box::new(|t, x| t.mp_cosine(x[0], x[1], x[2])),
        ),
        (
            "mp_cosine_max",
            vec![rnd(4, 6, 20), rnd(5, 6, 21), rnd(3, 6, 22)],
            Box::new(|t, x| t.mp_cosine_max(x[0], x[1], x[2])),
        ),
        (
            "mse",
            vec![rnd(3, 2, 23)],
            Box::new(|t, x| t.mse(x[0], vec![0.1, -0.4, 0.9, 0.0, 1.0, 0.3])),
        ),
        (
            "bce_with_logits",
            vec![rnd(4, 1, 24)],
            Box::new(|t, x| t.bce_with_logits(x[0], vec![1.0, 0.0, 0.0, 1.0])),
        ),
    ]
}

/// Tiny ranker for the full-loss check: 3-token question graph, 2-node sub-KSG.
pub fn tiny_ranker_case() -> Result<(RankerModel, ModelInput, ModelInput)> {
    let mut vocab = Vocabulary::default();
    for i in 0..6 {
        vocab.add(&format!("w{i}"));
    }
    let table = EmbeddingTable::random(vocab, 4, 3);
    let cfg = RankerConfig {
        biggnn: BiGgnnConfig {
            layers: 2,
            hidden: 3,
            share_encoders: false,
        },
        ebimpm: EbimpmConfig {
            hidden: 2,
            perspectives: 2,
            aggregation_hidden: 2,
        },
        ablation: Ablation::GraphAndSequence,
        ..Default::default()
    };
    let model = RankerModel::new(cfg, &table, 3)?;
    let input = |n: usize, edges: &[(usize, usize)], toks: &[usize]| ModelInput {
        graph: EncoderGraph::new(n, edges),
        node_tokens: Arc::new((0..n).map(|i| vec![toks[i % toks.len()]]).collect()),
        sequence: Arc::new(toks.iter().map(|&t| vec![t]).collect()),
    };
    let q = input(3, &[(0, 1), (1, 2)], &[1, 2, 3]);
    let s = input(2, &[(0, 1)], &[4, 5]);
    Ok((model, q, s))
}

/// Gradient check of the squared-error ranking loss over every trainable
/// ranker parameter.
pub fn full_loss_gradcheck(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (m, q, s) = tiny_ranker_case()?;
    let names = m.trainable();
    let only: Vec<&str> = names.iter().map(String::as_str).collect();
    gradcheck_params(
        &m.params,
        |t, p| {
            let mm = RankerModel {
                params: p.clone(),
                ..m.clone()
            };
            let v = mm.score_var(t, &q, &s)?;
            t.mse(v, vec![1.0])
        },
        Some(&only),
        opts,
    )
}

fn answerer_gradcheck() -> Result<GradcheckReport> {
    let mut vocab = Vocabulary::default();
    for w in ["a", "b", "c", "r"] {
        vocab.add(w);
    }
    let table = EmbeddingTable::random(vocab.clone(), 3, 5);
    let cfg = AnswererConfig {
        biggnn: BiGgnnConfig {
            layers: 1,
            hidden: 2,
            share_encoders: false,
        },
        threshold: 0.5,
    };
    let model = AnswererModel::new(cfg, &table, 5)?;
    let kg = KnowledgeGraph::from_triples([("a", "r", "b"), ("a", "r", "c")]);
    let ctx = TextContext::new(&kg, None);
    let merged = MergedGraph::from_ksg(&whole_graph(&kg));
    let question = Arc::new(ModelInput {
        graph: EncoderGraph::new(2, &[(0, 1)]),
        node_tokens: Arc::new(vec![vec![1], vec![2]]),
        sequence: Arc::new(vec![vec![1], vec![2]]),
    });
    let answers: BTreeSet<EntityId> = [EntityId(1)].into_iter().collect();
    let ex = AnswerExample::build("q", question, &merged, &answers, &ctx, &vocab)
        .ok_or_else(|| Error::invalid("empty example"))?;
    let names = model.trainable();
    let only: Vec<&str> = names.iter().map(String::as_str).collect();
    gradcheck_params(
        &model.params,
        |t, p| {
            let mm = AnswererModel {
                params: p.clone(),
                ..model.clone()
            };
            let z = mm.logits(t, &ex)?;
            t.bce_with_logits(z, ex.targets())
        },
        Some(&only),
        GradcheckOptions::default(),
    )
}

/// Every differentiable op, the GRU and LSTM cells, the BiLSTM, both encoders,
/// the full ranking loss and the answerer loss.
pub fn gradcheck_suite() -> Result<Vec<GradCase>> {
    let opts = GradcheckOptions::default();
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        let report = gradcheck(
            |t, x| {
                let y = f(t, x)?;
                reduce(t, y)
            },
            &inputs,
            opts,
        )?;
        out.push(GradCase {
            name: format!("op {name}"),
            report,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // randomized shapes for the matrix ops
    for s in 0..8u64 {
        let (n, k, m) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let report = gradcheck(
            |t, x| {
                let p = t.matmul(x[0], x[1])?;
                let h = t.tanh(p);
                let sm = t.softmax_rows(h);
                let c = t.concat_cols(&[sm, p])?;
                let mx = t.max_rows(c)?;
                reduce(t, mx)
            },
            &[rnd(n, k, 100 + s), rnd(k, m, 200 + s)],
            opts,
        )?;
        out.push(GradCase {
            name: format!("random shapes {n}x{k}x{m}"),
            report,
        });
    }

    let mut p = ParameterSet::new(1);
    init_gru(&mut p, "gru", 5, 5, &mut rng);
    let (m, h) = (rnd(2, 5, 40), rnd(2, 5, 41));
    let report = gradcheck_params(
        &p,
        |t, p| {
            let mv = t.constant(m.clone());
            let hv = t.constant(h.clone());
            let o = gru_cell(t, p, "gru", mv, hv)?;
            reduce(t, o)
        },
        None,
        opts,
    )?;
    out.push(GradCase {
        name: "GRU cell parameters".into(),
        report,
    });
    let report = gradcheck(
        |t, x| {
            let o = gru_cell(t, &p, "gru", x[0], x[1])?;
            reduce(t, o)
        },
        &[m.clone(), h.clone()],
        opts,
    )?;
    out.push(GradCase {
        name: "GRU cell inputs".into(),
        report,
    });

    let mut p = ParameterSet::new(2);
    init_lstm(&mut p, "lstm", 3, 4, &mut rng);
    let (x, h, c) = (rnd(1, 3, 50), rnd(1, 4, 51), rnd(1, 4, 52));
    let report = gradcheck_params(
        &p,
        |t, p| {
            let xv = t.constant(x.clone());
            let w = t.param(p, "lstm.w")?;
            let xw = t.matmul(xv, w)?;
            let b = t.param(p, "lstm.b")?;
            let xp = t.add_row(xw, b)?;
            let hv = t.constant(h.clone());
            let cv = t.constant(c.clone());
            let (h2, c2) = lstm_cell(t, p, "lstm", xp, hv, cv)?;
            let both = t.concat_cols(&[h2, c2])?;
            reduce(t, both)
        },
        None,
        opts,
    )?;
    out.push(GradCase {
        name: "LSTM cell".into(),
        report,
    });

    let mut p = ParameterSet::new(3);
    init_bilstm(&mut p, "ctx", 3, 4, &mut rng);
    let seq = rnd(4, 3, 60);
    let report = gradcheck_params(
        &p,
        |t, p| {
            let s = t.constant(seq.clone());
            let o = bilstm(t, p, "ctx", s)?;
            reduce(t, o)
        },
        None,
        opts,
    )?;
    out.push(GradCase {
        name: "BiLSTM".into(),
        report,
    });

    let cfg = BiGgnnConfig {
        layers: 2,
        hidden: 3,
        share_encoders: false,
    };
    let mut p = ParameterSet::new(4);
    init_biggnn(&mut p, "g", 4, &cfg, &mut rng);
    let graph = EncoderGraph::new(4, &[(0, 1), (1, 2), (2, 0), (3, 1)]);
    let x0 = rnd(4, 4, 70);
    let report = gradcheck_params(
        &p,
        |t, p| {
            let xv = t.constant(x0.clone());
            let (nodes, r) = crate::biggnn::encode_graph(t, p, "g", &graph, xv, &cfg)?;
            let a = reduce(t, nodes)?;
            let b = reduce(t, r)?;
            t.add(a, b)
        },
        None,
        opts,
    )?;
    out.push(GradCase {
        name: "BiGGNN encoder".into(),
        report,
    });

    let ecfg = EbimpmConfig {
        hidden: 2,
        perspectives: 2,
        aggregation_hidden: 2,
    };
    let mut p = ParameterSet::new(5);
    init_ebimpm(&mut p, "m", 3, &ecfg, &mut rng);
    let (qe, se) = (rnd(3, 3, 80), rnd(2, 3, 81));
    let report = gradcheck_params(
        &p,
        |t, p| {
            let q = t.constant(qe.clone());
            let s = t.constant(se.clone());
            let o = ebimpm_forward(t, p, "m", q, s, &ecfg)?;
            let a = reduce(t, o.r_q)?;
            let b = reduce(t, o.r_s)?;
            t.add(a, b)
        },
        None,
        opts,
    )?;
    out.push(GradCase {
        name: "EBiMPM matcher".into(),
        report,
    });

    out.push(GradCase {
        name: "full G-G-E loss (2-node sub-KSG, 3-token question)".into(),
        report: full_loss_gradcheck(opts)?,
    });
    out.push(GradCase {
        name: "answerer BCE loss".into(),
        report: answerer_gradcheck()?,
    });
    Ok(out)
}

/// The full-loss check with the analytic gradient scaled by 1.01; a working
/// checker must report an error above tolerance.
pub fn negative_control() -> Result<GradcheckReport> {
    full_loss_gradcheck(GradcheckOptions {
        corrupt: 1.01,
        ..Default::default()
    })
}

/// Randomized shape checks for both encoders. Returns descriptions of any
/// violations.
pub fn dimension_contracts(trials: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..trials {
        let d = rng.gen_range(1..7);
        let layers = rng.gen_range(1..4);
        let w = rng.gen_range(1..6);
        let n = rng.gen_range(1..8);
        let edges: Vec<(usize, usize)> = (0..rng.gen_range(0..12))
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect();
        let cfg = BiGgnnConfig {
            layers,
            hidden: d,
            share_encoders: false,
        };
        let mut p = ParameterSet::new(0);
        init_biggnn(&mut p, "g", w, &cfg, &mut rng);
        let enc = encode_graph_values(
            &p,
            "g",
            &EncoderGraph::new(n, &edges),
            rnd(n, w, rng.gen()),
            &cfg,
        )?;
        if enc.nodes.shape() != [n, 2 * d] || enc.r.shape() != [1, 2 * d] {
            bad.push(format!(
                "BiGGNN n={n} D={d}: nodes {:?}, r {:?}",
                enc.nodes.shape(),
                enc.r.shape()
            ));
        }
        for j in 0..2 * d {
            let m = (0..n)
                .map(|i| enc.nodes.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            if m != enc.r.get(0, j) {
                bad.push(format!("BiGGNN r is not the column max at {j}"));
                break;
            }
        }

        let ecfg = EbimpmConfig {
            hidden: rng.gen_range(1..5),
            perspectives: rng.gen_range(1..6),
            aggregation_hidden: rng.gen_range(1..5),
        };
        let (l1, l2) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let mut p = ParameterSet::new(0);
        init_ebimpm(&mut p, "m", w, &ecfg, &mut rng);
        let mut t = Tape::new();
        let qe = t.constant(rnd(l1, w, rng.gen()));
        let se = t.constant(rnd(l2, w, rng.gen()));
        let (q, s) = context_encode(&mut t, &p, "m", qe, se)?;
        let (qm, sm) = multi_perspective_match(&mut t, &p, "m", q, s, &ecfg)?;
        let out = ebimpm_forward(&mut t, &p, "m", qe, se, &ecfg)?;
        let l = ecfg.perspectives;
        let shapes = [
            (t.value(q).shape(), [l1, 2 * ecfg.hidden]),
            (t.value(qm).shape(), [l1, 8 * l]),
            (t.value(sm).shape(), [l2, 8 * l]),
            (t.value(out.r_q).shape(), [1, 2 * ecfg.aggregation_hidden]),
            (t.value(out.r_s).shape(), [1, 2 * ecfg.aggregation_hidden]),
        ];
        for (got, want) in shapes {
            if got != want {
                bad.push(format!("EBiMPM l1={l1} l2={l2} l={l}: {got:?} != {want:?}"));
            }
        }
    }
    Ok(bad)
}

/// Word vectors of a generated dataset as a table over `vocab`.
pub fn table_from_dataset(d: &SyntheticDataset, vocab: Vocabulary) -> Result<EmbeddingTable> {
    let dim = d.embeddings.first().map_or(1, |(_, v)| v.len());
    let lookup: BTreeMap<&str, &Vec<f64>> =
        d.embeddings.iter().map(|(w, v)| (w.as_str(), v)).collect();
    let mut data = vec![0.0; vocab.len() * dim];
    let mut oov = vec![0];
    for (i, tok) in vocab.tokens().iter().enumerate().skip(1) {
        match lookup.get(tok.as_str()) {
            Some(v) => data[i * dim..(i + 1) * dim].copy_from_slice(v),
            None => oov.push(i),
        }
    }
    Ok(EmbeddingTable {
        matrix: Arc::new(Tensor::new(vocab.len(), dim, data)?),
        vocab,
        oov,
    })
}

#[derive(Clone, Debug)]
pub struct OverfitResult {
    pub pairs: usize,
    pub epochs: usize,
    pub final_mse: f64,
    pub seconds: f64,
}

/// Ranker settings for the overfit check: D = d = 16, l = 4.
pub fn overfit_config() -> RankerConfig {
    RankerConfig {
        biggnn: BiGgnnConfig {
            layers: 2,
            hidden: 16,
            share_encoders: false,
        },
        ebimpm: EbimpmConfig {
            hidden: 8,
            perspectives: 4,
            aggregation_hidden: 8,
        },
        ablation: Ablation::GraphAndSequence,
        ..Default::default()
    }
}

/// `count` balanced (question, sub-KSG) pairs from the synthetic dataset:
/// one positive and one negative per question, in question order.
pub fn synthetic_pairs(count: usize) -> Result<(EmbeddingTable, Vec<PairExample>)> {
    let d = synthetic::generate(synthetic::DEFAULT_SEED, synthetic::DEFAULT_WORD_DIM);
    let kg = KnowledgeGraph::from_triples(
        d.triples
            .iter()
            .map(|[a, r, b]| (a.as_str(), r.as_str(), b.as_str())),
    );
    let mut names = EntityNames::default();
    for (id, n) in &d.names {
        names.insert(id.clone(), n.clone());
    }
    let ctx = TextContext::new(&kg, Some(&names));
    let questions: Vec<QuestionRecord> = d
        .questions
        .iter()
        .map(|q| QuestionRecord::resolve(q.clone(), &kg).map(|(r, _)| r))
        .collect::<Result<_>>()?;
    let table = table_from_dataset(&d, Vocabulary::from_corpus(&questions, &ctx))?;
    let mut pairs = Vec::new();
    for q in &questions {
        if pairs.len() >= count {
            break;
        }
        let ksg = khop_retrieve(&kg, &q.topic_entities, 2)?;
        let part = partition_question(q, &ksg, PartitionOptions::default())?;
        let pos = part.subksgs.iter().find(|s| s.label == 1);
        let neg = part.subksgs.iter().find(|s| s.label == 0);
        let (Some(pos), Some(neg)) = (pos, neg) else {
            continue;
        };
        let qi = Arc::new(ModelInput::question(q, &table.vocab));
        for s in [pos, neg] {
            if pairs.len() < count {
                pairs.push(PairExample {
                    question: qi.clone(),
                    subksg: Arc::new(ModelInput::subksg(s, &ctx, &table.vocab)?),
                    label: s.label,
                });
            }
        }
    }
    if pairs.len() < count {
        return Err(Error::invalid(format!(
            "only {} synthetic pairs available",
            pairs.len()
        )));
    }
    Ok((table, pairs))
}

/// Trains the ranker on 20 synthetic pairs until the training MSE is below
/// 0.01 or 200 epochs pass, single-threaded.
pub fn overfit() -> Result<OverfitResult> {
    let (table, pairs) = synthetic_pairs(20)?;
    let start = Instant::now();
    let mut model = RankerModel::new(overfit_config(), &table, 11)?;
    let cfg = TrainConfig {
        max_epochs: 200,
        batch_size: 4,
        adam: AdamConfigSerde {
            lr: 5e-3,
            ..Default::default()
        },
        patience: 0,
        seed: 11,
        workers: 1,
        stop_below: Some(0.01),
        ..Default::default()
    };
    let out = train(&mut model, &pairs, &[], &cfg, |_| {})?;
    let final_mse = pair_mse(&model, &pairs)?;
    Ok(OverfitResult {
        pairs: pairs.len(),
        epochs: out.log.len(),
        final_mse,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Every oracle suite; the overfit run is the slow one.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        timed("partition oracle (200 random graphs)", || {
            let (bad, first) = partition_oracle(200, 1)?;
            Ok((bad == 0, first.unwrap_or_else(|| "200/200 agree".into())))
        }),
        timed("k-hop retrieval oracle (200 random graphs)", || {
            let bad = khop_oracle(200, 2)?;
            Ok((bad == 0, format!("{bad} disagreements")))
        }),
        timed("education example partition", || {
            let got = education_partition()?;
            Ok((got == education_expected(), format!("{got:?}")))
        }),
        timed("gradient checks", || {
            let cases = gradcheck_suite()?;
            let failed: Vec<String> = cases
                .iter()
                .filter(|c| !c.passes())
                .map(|c| format!("{} ({:.2e})", c.name, c.report.max_rel_error))
                .collect();
            let worst = cases
                .iter()
                .map(|c| c.report.max_rel_error)
                .fold(0.0, f64::max);
            Ok((
                failed.is_empty(),
                if failed.is_empty() {
                    format!("{} cases, worst relative error {worst:.2e}", cases.len())
                } else {
                    format!("failed: {}", failed.join(", "))
                },
            ))
        }),
        timed("gradient check negative control", || {
            let r = negative_control()?;
            Ok((
                !r.passes(GRAD_TOL),
                format!("corrupted error {:.2e}", r.max_rel_error),
            ))
        }),
        timed("metric oracle (1000 random lists)", || {
            let (mismatch, non_mono) = metric_oracle(1000, 3)?;
            Ok((
                mismatch == 0 && non_mono == 0,
                format!("{mismatch} mismatches, {non_mono} monotonicity violations"),
            ))
        }),
        timed("dimension contracts", || {
            let bad = dimension_contracts(50, 4)?;
            Ok((
                bad.is_empty(),
                bad.first()
                    .cloned()
                    .unwrap_or_else(|| "50 random shapes".into()),
            ))
        }),
        timed("overfit (20 pairs, D = d = 16, l = 4)", || {
            let r = overfit()?;
            Ok((
                r.final_mse < 0.01 && r.epochs <= 200,
                format!(
                    "MSE {:.5} after {} epochs in {:.1}s",
                    r.final_mse, r.epochs, r.seconds
                ),
            ))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_partition_on_a_path() {
        // 0 -> 1 -> 2, 0 -> 3 : node 1 has leaf child 2, root has mixed children
        let kg = KnowledgeGraph::from_triples([("a", "r", "b"), ("b", "r", "c"), ("a", "r", "d")]);
        let ksg = whole_graph(&kg);
        let ans: BTreeSet<EntityId> = [EntityId(2)].into_iter().collect();
        let got = literal_partition(&ksg, EntityId(0), &ans);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].anchor, EntityId(1));
        assert_eq!(got[0].nodes, [0, 1, 2].into_iter().map(EntityId).collect());
        assert_eq!(got[0].edges.len(), 2);
        assert_eq!(got[0].label, 1);
    }

    #[test]
    fn partition_matches_literal_simulation() {
        let (bad, first) = partition_oracle(60, 9).unwrap();
        assert_eq!(bad, 0, "{first:?}");
    }

    #[test]
    fn khop_matches_brute_force() {
        assert_eq!(khop_oracle(60, 9).unwrap(), 0);
    }

    #[test]
    fn metric_brute_force_hand_values() {
        let lists = vec![vec![0, 1, 0], vec![0, 0, 0], vec![1, 0, 1]];
        assert_eq!(brute_recall(&lists, 1), (0.5, 1.0 / 3.0));
        assert_eq!(brute_mrr(&lists, MrrMode::First), 0.75);
        assert_eq!(
            brute_mrr(&lists, MrrMode::All),
            (0.5 + (1.0 + 1.0 / 3.0) / 2.0) / 2.0
        );
        assert_eq!(metric_oracle(100, 1).unwrap(), (0, 0));
    }

    #[test]
    fn education_expected_partition() {
        assert_eq!(education_partition().unwrap(), education_expected());
    }

    #[test]
    fn dimensions_hold() {
        assert!(dimension_contracts(10, 1).unwrap().is_empty());
    }
}
