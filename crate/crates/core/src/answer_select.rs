//! Merging top-ranked sub-KSGs and picking answer entities with a
//! question-conditioned node classifier.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biggnn::{encode_graph, init_biggnn, BiGgnnConfig, EncoderGraph};
use crate::error::{Error, Result};
use crate::evalmetrics::{hits_precision_recall_f1, AnswerOutcome};
use crate::kg_store::{EntityId, Ksg, Triple};
use crate::numerics::nn::{init_linear, linear};
use crate::numerics::{AdamState, Checkpoint, ParameterSet, Tape, Tensor, Var};
use crate::partition::SubKsg;
use crate::ranker::{
    reduce_gradients, thread_pool, EpochRecord, RankedList, TrainConfig, TrainOutcome,
};
use crate::text_pipeline::{graphize_triples, EmbeddingTable, ModelInput, TextContext, Vocabulary};

/// Union of several sub-KSGs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedGraph {
    pub nodes: Vec<EntityId>,
    pub edges: Vec<Triple>,
    /// Anchors of the sub-KSGs each node came from (empty for the full KSG).
    pub provenance: BTreeMap<EntityId, Vec<EntityId>>,
}

impl MergedGraph {
    pub fn contains(&self, e: EntityId) -> bool {
        self.nodes.binary_search(&e).is_ok()
    }

    /// The whole retrieved KSG as one graph.
    pub fn from_ksg(ksg: &Ksg) -> Self {
        MergedGraph {
            nodes: ksg.nodes.clone(),
            edges: ksg.edges.clone(),
            provenance: BTreeMap::new(),
        }
    }
}

/// Union of the first `min(k, len)` sub-KSGs of `ranked`. `subksgs` is the
/// question's partition output, indexed by [`crate::ranker::RankedItem::index`].
pub fn merge_topk(ranked: &RankedList, subksgs: &[SubKsg], k: usize) -> Result<MergedGraph> {
    if k == 0 {
        return Err(Error::invalid("merge k must be >= 1"));
    }
    if ranked.items.is_empty() {
        return Err(Error::invalid(format!(
            "question {}: empty ranked list",
            ranked.question_id
        )));
    }
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut provenance: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
    for item in ranked.items.iter().take(k) {
        let s = subksgs.get(item.index).ok_or_else(|| {
            Error::invalid(format!(
                "question {}: ranked sub-KSG {} out of range",
                ranked.question_id, item.index
            ))
        })?;
        for &n in &s.nodes {
            nodes.insert(n);
            let p = provenance.entry(n).or_default();
            if !p.contains(&s.anchor) {
                p.push(s.anchor);
            }
        }
        edges.extend(s.edges.iter().copied());
    }
    Ok(MergedGraph {
        nodes: nodes.into_iter().collect(),
        edges: edges.into_iter().collect(),
        provenance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswererConfig {
    pub biggnn: BiGgnnConfig,
    pub threshold: f64,
}

impl Default for AnswererConfig {
    fn default() -> Self {
        AnswererConfig {
            biggnn: BiGgnnConfig::default(),
            threshold: 0.5,
        }
    }
}

/// One question over one graph, ready for the classifier.
#[derive(Clone, Debug)]
pub struct AnswerExample {
    pub question_id: String,
    pub question: Arc<ModelInput>,
    pub graph: EncoderGraph,
    pub node_tokens: Arc<Vec<Vec<usize>>>,
    /// Graph positions of entity nodes and their ids, ascending by id.
    pub entities: Vec<(usize, EntityId)>,
    pub answers: BTreeSet<EntityId>,
}

impl AnswerExample {
    /// `None` when the merged graph has no nodes.
    pub fn build(
        question_id: &str,
        question: Arc<ModelInput>,
        merged: &MergedGraph,
        answers: &BTreeSet<EntityId>,
        ctx: &TextContext,
        vocab: &Vocabulary,
    ) -> Option<Self> {
        if merged.nodes.is_empty() {
            log::warn!("question {question_id}: empty merged graph, skipped");
            return None;
        }
        let g = graphize_triples(&merged.nodes, &merged.edges, ctx);
        let mut entities: Vec<(usize, EntityId)> = g.entity_positions().collect();
        entities.sort_by_key(|&(_, e)| e);
        Some(AnswerExample {
            question_id: question_id.to_string(),
            question,
            graph: EncoderGraph::new(g.nodes.len(), &g.edges),
            node_tokens: Arc::new(g.nodes.iter().map(|n| vocab.indices(&n.tokens)).collect()),
            entities,
            answers: answers.clone(),
        })
    }

    pub fn targets(&self) -> Vec<f64> {
        self.entities
            .iter()
            .map(|(_, e)| f64::from(u8::from(self.answers.contains(e))))
            .collect()
    }

    /// Whether any gold answer is among the graph's entities.
    pub fn contains_answer(&self) -> bool {
        self.entities.iter().any(|(_, e)| self.answers.contains(e))
    }
}

const EMB: &str = "emb";

#[derive(Clone, Debug)]
pub struct AnswererModel {
    pub config: AnswererConfig,
    pub params: ParameterSet,
    pub vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEcho {
    answerer: AnswererConfig,
    vocab: Vec<String>,
}

impl AnswererModel {
    pub fn new(config: AnswererConfig, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.biggnn.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new(seed);
        params.insert(EMB, table.matrix.as_ref().clone());
        let (w, d) = (table.dim(), config.biggnn.hidden);
        init_biggnn(&mut params, "aq", w, &config.biggnn, &mut rng);
        init_biggnn(&mut params, "an", w + 2 * d, &config.biggnn, &mut rng);
        init_linear(&mut params, "cls", 2 * d, 1, &mut rng);
        Ok(AnswererModel {
            config,
            params,
            vocab: table.vocab.clone(),
        })
    }

    pub fn trainable(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| *n != EMB)
            .map(str::to_string)
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let echo = CheckpointEcho {
            answerer: self.config,
            vocab: self.vocab.tokens().to_vec(),
        };
        Ok(self.params.to_checkpoint(serde_json::to_value(echo)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let echo: CheckpointEcho = serde_json::from_value(ckpt.config.clone())?;
        let mut vocab = Vocabulary::default();
        for t in echo.vocab.iter().skip(1) {
            vocab.add(t);
        }
        Ok(AnswererModel {
            config: echo.answerer,
            params: ParameterSet::from_checkpoint(ckpt)?,
            vocab,
        })
    }

    /// Logits of the entity nodes (`entities.len() x 1`, in `entities` order).
    pub fn logits(&self, tape: &mut Tape, ex: &AnswerExample) -> Result<Var> {
        let emb = tape.constant_shared(self.params.get(EMB)?.clone());
        let qx = tape.gather_mean(emb, ex.question.node_tokens.clone())?;
        let (_, rq) = encode_graph(
            tape,
            &self.params,
            "aq",
            &ex.question.graph,
            qx,
            &self.config.biggnn,
        )?;
        let words = tape.gather_mean(emb, ex.node_tokens.clone())?;
        let cond = tape.repeat_rows(rq, ex.graph.len())?;
        let init = tape.concat_cols(&[words, cond])?;
        let (h, _) = encode_graph(
            tape,
            &self.params,
            "an",
            &ex.graph,
            init,
            &self.config.biggnn,
        )?;
        let ent = tape.gather_rows(h, ex.entities.iter().map(|&(p, _)| p).collect())?;
        linear(tape, &self.params, "cls", ent)
    }

    fn example_gradient(
        &self,
        ex: &AnswerExample,
        n: usize,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, ex)?;
        let loss = tape.bce_with_logits(z, ex.targets())?;
        let loss = tape.scale(loss, 1.0 / n as f64);
        let value = tape.value(loss).item();
        let grads = tape.param_grads(&tape.backward(loss)?);
        Ok((value, grads))
    }

    pub fn classify_nodes(&self, ex: &AnswerExample) -> Result<Vec<NodePrediction>> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, ex)?;
        let t = self.config.threshold;
        Ok(ex
            .entities
            .iter()
            .zip(tape.value(z).data())
            .map(|(&(_, node), &z)| {
                let probability = crate::numerics::sigmoid(z);
                NodePrediction {
                    node,
                    probability,
                    selected: probability >= t,
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePrediction {
    pub node: EntityId,
    pub probability: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub set: BTreeSet<EntityId>,
    pub top1: EntityId,
}

/// Entities with probability `>= threshold`, plus the most probable entity
/// (ties to the smallest id).
pub fn select_answers(preds: &[NodePrediction], threshold: f64) -> Result<Selection> {
    let mut best: Option<&NodePrediction> = None;
    for p in preds {
        match best {
            Some(b)
                if p.probability < b.probability
                    || (p.probability == b.probability && p.node > b.node) => {}
            _ => best = Some(p),
        }
    }
    let top1 = best
        .ok_or_else(|| Error::invalid("no node predictions"))?
        .node;
    Ok(Selection {
        set: preds
            .iter()
            .filter(|p| p.probability >= threshold)
            .map(|p| p.node)
            .collect(),
        top1,
    })
}

/// Mini-batch Adam on summed per-node BCE, early-stopped on dev Hits.
pub fn train_answerer(
    model: &mut AnswererModel,
    examples: &[AnswerExample],
    dev: &[AnswerExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let examples: Vec<&AnswerExample> =
        examples.iter().filter(|e| !e.entities.is_empty()).collect();
    if examples.is_empty() {
        return Err(Error::invalid("no answerer training examples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let pool = thread_pool(cfg.workers)?;
    let mut adam = AdamState::new(cfg.adam.into());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| model.example_gradient(examples[i], n))
                    .collect()
            });
            let mut grads = Vec::with_capacity(n);
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                grads.push(g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("answerer batch loss {batch_loss}"),
                });
            }
            total += batch_loss * n as f64;
            adam.step(&mut model.params, &reduce_gradients(grads))?;
        }
        let dev_hits = if dev.is_empty() {
            None
        } else {
            let outcomes = pool.install(|| evaluate_examples(model, dev))?;
            Some(hits_precision_recall_f1(&outcomes).hits)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / examples.len() as f64,
            dev_mrr: dev_hits,
            full_loss: None,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "answerer epoch {epoch}: loss {:.6}, dev hits {:?}",
            rec.train_loss,
            dev_hits
        );
        on_epoch(&rec);
        log.push(rec);
        if let Some(h) = dev_hits {
            if best.as_ref().is_none_or(|(b, _, _)| h > *b) {
                best = Some((h, epoch, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, p)) => {
            model.params = p;
            e
        }
        None => log.len(),
    };
    Ok(TrainOutcome { log, best_epoch })
}

/// Classify and select for each example (in parallel on the current pool).
pub fn evaluate_examples(
    model: &AnswererModel,
    examples: &[AnswerExample],
) -> Result<Vec<AnswerOutcome<EntityId>>> {
    examples
        .par_iter()
        .map(|ex| {
            let preds = model.classify_nodes(ex)?;
            let sel = select_answers(&preds, model.config.threshold)?;
            Ok(AnswerOutcome {
                top1: Some(sel.top1),
                predicted: sel.set,
                gold: ex.answers.clone(),
            })
        })
        .collect()
}

/// One line per entity node: question id, node, probability, selected flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub question_id: String,
    pub regime: String,
    pub node: String,
    pub probability: f64,
    pub selected: bool,
    pub top1: bool,
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg_store::KnowledgeGraph;
    use crate::numerics::{gradcheck_params, GradcheckOptions};
    use crate::ranker::{AdamConfigSerde, RankedItem};
    use crate::text_pipeline::QuestionGraph;

    fn sub(anchor: u32, nodes: &[u32], edges: &[(u32, u32)]) -> SubKsg {
        SubKsg {
            question_id: "q".into(),
            root: EntityId(nodes[0]),
            anchor: EntityId(anchor),
            nodes: nodes.iter().map(|&n| EntityId(n)).collect(),
            edges: edges
                .iter()
                .map(|&(a, b)| {
                    Triple::new(EntityId(a), crate::kg_store::RelationId(0), EntityId(b))
                })
                .collect(),
            label: 0,
        }
    }

    fn ranked(order: &[usize]) -> RankedList {
        RankedList {
            question_id: "q".into(),
            items: order
                .iter()
                .enumerate()
                .map(|(r, &i)| RankedItem {
                    index: i,
                    anchor: EntityId(i as u32),
                    score: 1.0 - r as f64 * 0.1,
                    label: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn merge_examples() {
        let subs = vec![
            sub(1, &[0, 1, 2], &[(0, 1), (1, 2)]),
            sub(4, &[3, 4, 5], &[(3, 4), (4, 5)]),
        ];
        let m = merge_topk(&ranked(&[0, 1]), &subs, 2).unwrap();
        assert_eq!(m.nodes.len(), 6);
        assert_eq!(merge_topk(&ranked(&[0, 1]), &subs, 99).unwrap(), m);
        assert_eq!(
            merge_topk(&ranked(&[0, 1]), &subs, 1).unwrap().nodes.len(),
            3
        );
        assert!(merge_topk(&ranked(&[]), &subs, 1).is_err());
        assert!(merge_topk(&ranked(&[0]), &subs, 0).is_err());
    }

    #[test]
    fn overlapping_merge_matches_set_union() {
        let subs = vec![
            sub(2, &[0, 1, 2, 3], &[(0, 1), (1, 2), (2, 3)]),
            sub(4, &[0, 1, 4, 5], &[(0, 1), (1, 4), (4, 5)]),
            sub(6, &[0, 6, 7], &[(0, 6), (6, 7)]),
        ];
        let mut prev = 0;
        for k in 1..=3 {
            let m = merge_topk(&ranked(&[0, 1, 2]), &subs, k).unwrap();
            let union: BTreeSet<EntityId> = subs[..k]
                .iter()
                .flat_map(|s| s.nodes.iter().copied())
                .collect();
            assert_eq!(m.nodes, union.into_iter().collect::<Vec<_>>());
            assert!(m.nodes.len() >= prev);
            prev = m.nodes.len();
            for e in &m.edges {
                assert!(subs[..k].iter().any(|s| s.edges.contains(e)));
            }
        }
        let m = merge_topk(&ranked(&[0, 1, 2]), &subs, 3).unwrap();
        assert_eq!(m.provenance[&EntityId(1)], vec![EntityId(2), EntityId(4)]);
    }

    #[test]
    fn selection_examples() {
        let p = |n: u32, pr: f64| NodePrediction {
            node: EntityId(n),
            probability: pr,
            selected: pr >= 0.5,
        };
        let s = select_answers(&[p(3, 0.9)], 0.5).unwrap();
        assert_eq!(s.top1, EntityId(3));
        assert_eq!(s.set, BTreeSet::from([EntityId(3)]));
        let s = select_answers(&[p(3, 0.2), p(1, 0.4), p(2, 0.4)], 0.5).unwrap();
        assert!(s.set.is_empty());
        assert_eq!(s.top1, EntityId(1));
        assert!(select_answers(&[], 0.5).is_err());
        let preds: Vec<NodePrediction> = (0..20).map(|i| p(i, (i as f64 * 0.37).fract())).collect();
        let mut prev = select_answers(&preds, 0.0).unwrap().set;
        for t in 1..=10 {
            let cur = select_answers(&preds, t as f64 / 10.0).unwrap().set;
            assert!(cur.is_subset(&prev));
            prev = cur;
        }
    }

    /// Star graphs where the answer is the object of relation `marked`.
    fn star_task() -> (KnowledgeGraph, Vec<(MergedGraph, BTreeSet<EntityId>)>) {
        let mut triples = Vec::new();
        for i in 0..6 {
            for (j, r) in ["other", "marked", "filler"].iter().enumerate() {
                let pos = (j + i) % 3;
                triples.push((format!("root{i}"), r.to_string(), format!("leaf{i}_{pos}")));
            }
        }
        let kg = KnowledgeGraph::from_triples(
            triples
                .iter()
                .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())),
        );
        let marked = kg.relation_id("marked").unwrap();
        let mut out = Vec::new();
        for i in 0..6 {
            let root = kg.entity_id(&format!("root{i}")).unwrap();
            let edges: Vec<Triple> = kg
                .triples()
                .iter()
                .filter(|t| t.subject == root)
                .copied()
                .collect();
            let mut nodes: Vec<EntityId> =
                edges.iter().flat_map(|t| [t.subject, t.object]).collect();
            nodes.sort_unstable();
            nodes.dedup();
            let answers = edges
                .iter()
                .filter(|t| t.relation == marked)
                .map(|t| t.object)
                .collect();
            out.push((
                MergedGraph {
                    nodes,
                    edges,
                    provenance: BTreeMap::new(),
                },
                answers,
            ));
        }
        (kg, out)
    }

    fn star_examples(vocab: &mut Vocabulary) -> Vec<AnswerExample> {
        let (kg, graphs) = star_task();
        let ctx = TextContext::new(&kg, None);
        for t in ["which", "is", "marked"] {
            vocab.add(t);
        }
        for r in kg.relation_names() {
            vocab.add(r);
        }
        for e in kg.entity_names() {
            vocab.add(e);
        }
        let q = QuestionGraph {
            nodes: vec!["which".into(), "is".into(), "marked".into()],
            edges: vec![(0, 1), (1, 2)],
        };
        let idx = vocab.indices(&q.nodes);
        let qin = Arc::new(ModelInput {
            graph: EncoderGraph::new(3, &q.edges),
            node_tokens: Arc::new(idx.iter().map(|&i| vec![i]).collect()),
            sequence: Arc::new(idx.iter().map(|&i| vec![i]).collect()),
        });
        graphs
            .iter()
            .enumerate()
            .map(|(i, (m, a))| {
                AnswerExample::build(&format!("q{i}"), qin.clone(), m, a, &ctx, vocab).unwrap()
            })
            .collect()
    }

    fn tiny(vocab: Vocabulary, seed: u64) -> AnswererModel {
        let cfg = AnswererConfig {
            biggnn: BiGgnnConfig {
                layers: 2,
                hidden: 4,
                share_encoders: false,
            },
            threshold: 0.5,
        };
        AnswererModel::new(cfg, &EmbeddingTable::random(vocab, 6, seed), seed).unwrap()
    }

    #[test]
    fn probabilities_and_zero_classifier() {
        let mut v = Vocabulary::default();
        let ex = star_examples(&mut v);
        let mut m = tiny(v, 1);
        for p in m.classify_nodes(&ex[0]).unwrap() {
            assert!(p.probability > 0.0 && p.probability < 1.0);
        }
        m.params.insert("cls.w", Tensor::zeros(8, 1));
        m.params.insert("cls.b", Tensor::zeros(1, 1));
        assert!(m
            .classify_nodes(&ex[0])
            .unwrap()
            .iter()
            .all(|p| p.probability == 0.5));
    }

    #[test]
    fn all_negative_loss_formula() {
        let mut v = Vocabulary::default();
        let mut ex = star_examples(&mut v).remove(0);
        ex.answers.clear();
        let m = tiny(v, 2);
        let preds = m.classify_nodes(&ex).unwrap();
        let want: f64 = preds.iter().map(|p| -(1.0 - p.probability).ln()).sum();
        let (got, _) = m.example_gradient(&ex, 1).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn classifier_gradcheck() {
        let mut v = Vocabulary::default();
        let ex = star_examples(&mut v).remove(1);
        let m = tiny(v, 3);
        let names = m.trainable();
        let only: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = gradcheck_params(
            &m.params,
            |t, p| {
                let mm = AnswererModel {
                    params: p.clone(),
                    ..m.clone()
                };
                let z = mm.logits(t, &ex)?;
                t.bce_with_logits(z, ex.targets())
            },
            Some(&only),
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn equivariant_in_node_order() {
        let mut v = Vocabulary::default();
        let ex = star_examples(&mut v).remove(2);
        let m = tiny(v.clone(), 4);
        let (kg, graphs) = star_task();
        let ctx = TextContext::new(&kg, None);
        let (mut merged, answers) = graphs[2].clone();
        merged.nodes.reverse();
        merged.edges.reverse();
        let ex2 =
            AnswerExample::build("q2", ex.question.clone(), &merged, &answers, &ctx, &v).unwrap();
        let (a, b) = (
            m.classify_nodes(&ex).unwrap(),
            m.classify_nodes(&ex2).unwrap(),
        );
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.node, y.node);
            assert!((x.probability - y.probability).abs() < 1e-12);
        }
    }

    #[test]
    fn overfits_marked_relation() {
        let mut v = Vocabulary::default();
        let ex = star_examples(&mut v);
        let mut m = tiny(v, 5);
        let cfg = TrainConfig {
            max_epochs: 150,
            batch_size: 6,
            adam: AdamConfigSerde {
                lr: 0.02,
                ..Default::default()
            },
            patience: 0,
            seed: 1,
            workers: 1,
            ..Default::default()
        };
        train_answerer(&mut m, &ex, &[], &cfg, |_| {}).unwrap();
        for e in &ex {
            let preds = m.classify_nodes(e).unwrap();
            for p in preds {
                assert_eq!(
                    p.selected,
                    e.answers.contains(&p.node),
                    "{} {:?}",
                    e.question_id,
                    p
                );
            }
        }
    }
}
