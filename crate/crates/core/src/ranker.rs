//! Sub-KSG ranking: the combined graph and sequence score, training pair
//! construction, MSE training with early stopping, and ranked lists.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::biggnn::{encode_graph, init_biggnn, BiGgnnConfig};
use crate::ebimpm::{ebimpm_forward, init_ebimpm, EbimpmConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{mrr, Labels, MrrMode};
use crate::kg_store::EntityId;
use crate::numerics::{AdamConfig, AdamState, Checkpoint, ParameterSet, Tape, Tensor, Var};
use crate::text_pipeline::{EmbeddingTable, ModelInput, Vocabulary};

/// Which representations enter the final cosine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Graph and sequence encoders.
    #[default]
    #[serde(rename = "g-g-e")]
    GraphAndSequence,
    /// Graph encoders only.
    #[serde(rename = "g-g")]
    GraphOnly,
    /// Sequence matcher only.
    #[serde(rename = "ebimpm")]
    SequenceOnly,
}

impl Ablation {
    pub fn uses_graph(self) -> bool {
        self != Ablation::SequenceOnly
    }

    pub fn uses_sequence(self) -> bool {
        self != Ablation::GraphOnly
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g-g-e" => Ok(Ablation::GraphAndSequence),
            "g-g" => Ok(Ablation::GraphOnly),
            "ebimpm" => Ok(Ablation::SequenceOnly),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (g-g-e | g-g | ebimpm)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RankerConfig {
    pub biggnn: BiGgnnConfig,
    pub ebimpm: EbimpmConfig,
    pub ablation: Ablation,
    /// Update word vectors during training (OOV rows stay frozen).
    pub train_embeddings: bool,
    /// Train against `2y - 1` instead of `y`.
    pub rescale_targets: bool,
}

const EMB: &str = "emb";

/// Parameters plus the vocabulary they were built against.
#[derive(Clone, Debug)]
pub struct RankerModel {
    pub config: RankerConfig,
    pub params: ParameterSet,
    pub vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEcho {
    ranker: RankerConfig,
    vocab: Vec<String>,
}

impl RankerModel {
    pub fn new(config: RankerConfig, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.biggnn.validate()?;
        config.ebimpm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new(seed);
        params.insert(EMB, table.matrix.as_ref().clone());
        params.freeze_rows(EMB, table.oov.clone());
        let word = table.dim();
        if config.ablation.uses_graph() {
            init_biggnn(&mut params, "gq", word, &config.biggnn, &mut rng);
            if !config.biggnn.share_encoders {
                init_biggnn(&mut params, "gs", word, &config.biggnn, &mut rng);
            }
        }
        if config.ablation.uses_sequence() {
            init_ebimpm(&mut params, "m", word, &config.ebimpm, &mut rng);
        }
        Ok(RankerModel {
            config,
            params,
            vocab: table.vocab.clone(),
        })
    }

    fn subksg_prefix(&self) -> &'static str {
        if self.config.biggnn.share_encoders {
            "gq"
        } else {
            "gs"
        }
    }

    /// Names that receive gradients.
    pub fn trainable(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| self.config.train_embeddings || *n != EMB)
            .map(str::to_string)
            .collect()
    }

    pub fn target(&self, label: u8) -> f64 {
        let y = f64::from(label);
        if self.config.rescale_targets {
            2.0 * y - 1.0
        } else {
            y
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let echo = CheckpointEcho {
            ranker: self.config,
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
        Ok(RankerModel {
            config: echo.ranker,
            params: ParameterSet::from_checkpoint(ckpt)?,
            vocab,
        })
    }

    fn embeddings(&self, tape: &mut Tape) -> Result<Var> {
        if self.config.train_embeddings {
            tape.param(&self.params, EMB)
        } else {
            Ok(tape.constant_shared(self.params.get(EMB)?.clone()))
        }
    }

    /// The two vectors whose cosine is the score: `[r_q ; r_q']` and
    /// `[r_S ; r_S']`, restricted to the enabled encoders.
    pub fn representations(
        &self,
        tape: &mut Tape,
        q: &ModelInput,
        s: &ModelInput,
    ) -> Result<(Var, Var)> {
        let emb = self.embeddings(tape)?;
        let mut left = Vec::with_capacity(2);
        let mut right = Vec::with_capacity(2);
        if self.config.ablation.uses_graph() {
            let qx = tape.gather_mean(emb, q.node_tokens.clone())?;
            let (_, rq) =
                encode_graph(tape, &self.params, "gq", &q.graph, qx, &self.config.biggnn)?;
            let sx = tape.gather_mean(emb, s.node_tokens.clone())?;
            let (_, rs) = encode_graph(
                tape,
                &self.params,
                self.subksg_prefix(),
                &s.graph,
                sx,
                &self.config.biggnn,
            )?;
            left.push(rq);
            right.push(rs);
        }
        if self.config.ablation.uses_sequence() {
            let qe = tape.gather_mean(emb, q.sequence.clone())?;
            let se = tape.gather_mean(emb, s.sequence.clone())?;
            let out = ebimpm_forward(tape, &self.params, "m", qe, se, &self.config.ebimpm)?;
            left.push(out.r_q);
            right.push(out.r_s);
        }
        Ok((tape.concat_cols(&left)?, tape.concat_cols(&right)?))
    }

    /// `1 x 1` score node.
    pub fn score_var(&self, tape: &mut Tape, q: &ModelInput, s: &ModelInput) -> Result<Var> {
        let (a, b) = self.representations(tape, q, s)?;
        tape.row_cosine(a, b)
    }

    pub fn score(&self, q: &ModelInput, s: &ModelInput) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.score_var(&mut tape, q, s)?;
        Ok(tape.value(v).item())
    }

    /// Squared error of one pair scaled by `1 / n`, with its gradients.
    fn pair_gradient(&self, ex: &PairExample, n: usize) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let s = self.score_var(&mut tape, &ex.question, &ex.subksg)?;
        let loss = tape.mse(s, vec![self.target(ex.label)])?;
        let loss = tape.scale(loss, 1.0 / n as f64);
        let value = tape.value(loss).item();
        let grads = tape.param_grads(&tape.backward(loss)?);
        Ok((value, grads))
    }
}

/// `(1/N) sum (y - y^)^2`.
pub fn mse_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "mse over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p) * (y - p))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Reference to one sub-KSG of one question by position in the question's
/// partition output.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubKsgRef {
    pub question_id: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub question_id: String,
    pub subksg: SubKsgRef,
    pub label: u8,
}

/// Stable per-key seed so each question's sample does not depend on the
/// order questions are visited.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Up to `n` distinct negatives from `pool` (all of it when smaller),
/// returned in pool order.
pub fn sample_negatives_random(
    question_id: &str,
    pool: &[SubKsgRef],
    n: usize,
    seed: u64,
) -> Vec<TrainingPair> {
    if pool.is_empty() {
        log::warn!("question {question_id}: no negative sub-KSGs to sample");
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, question_id));
    let mut picked: Vec<usize> =
        rand::seq::index::sample(&mut rng, pool.len(), n.min(pool.len())).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| TrainingPair {
            question_id: question_id.to_string(),
            subksg: pool[i].clone(),
            label: 0,
        })
        .collect()
}

/// TF-IDF vectors over a fixed document collection. Term weight is
/// `count * (ln((1 + N) / (1 + df)) + 1)`.
#[derive(Clone, Debug)]
pub struct TfidfIndex {
    n: usize,
    idf: HashMap<String, f64>,
    docs: Vec<HashMap<String, f64>>,
    norms: Vec<f64>,
}

impl TfidfIndex {
    pub fn new(docs: &[Vec<String>]) -> Self {
        let n = docs.len() as f64;
        let mut df: HashMap<&str, usize> = HashMap::new();
        for d in docs {
            let mut seen: Vec<&str> = d.iter().map(String::as_str).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let idf: HashMap<String, f64> = df
            .into_iter()
            .map(|(t, c)| (t.to_string(), ((1.0 + n) / (1.0 + c as f64)).ln() + 1.0))
            .collect();
        let mut index = TfidfIndex {
            n: docs.len(),
            idf,
            docs: Vec::new(),
            norms: Vec::new(),
        };
        for d in docs {
            let v = index.vectorize(d);
            index.norms.push(norm(&v));
            index.docs.push(v);
        }
        index
    }

    /// Terms unseen in the collection get the maximum idf.
    pub fn vectorize(&self, doc: &[String]) -> HashMap<String, f64> {
        let unseen = (1.0 + self.n as f64).ln() + 1.0;
        let mut v: HashMap<String, f64> = HashMap::new();
        for t in doc {
            *v.entry(t.clone()).or_default() += 1.0;
        }
        for (t, w) in v.iter_mut() {
            *w *= self.idf.get(t).copied().unwrap_or(unseen);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn similarity(&self, query: &HashMap<String, f64>, doc: usize) -> f64 {
        let (qn, dn) = (norm(query), self.norms[doc]);
        if qn == 0.0 || dn == 0.0 {
            return 0.0;
        }
        let d = &self.docs[doc];
        let dot: f64 = query
            .iter()
            .map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0))
            .sum();
        dot / (qn * dn)
    }
}

fn norm(v: &HashMap<String, f64>) -> f64 {
    // sort for an order-independent sum
    let mut w: Vec<f64> = v.values().copied().collect();
    w.sort_by(f64::total_cmp);
    w.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The eligible document most similar to `positive`; ties go to the lowest
/// document index.
pub fn sample_negative_tfidf(
    index: &TfidfIndex,
    positive: &[String],
    eligible: &[usize],
) -> Result<usize> {
    let q = index.vectorize(positive);
    let mut best: Option<(f64, usize)> = None;
    for &d in eligible {
        let s = index.similarity(&q, d);
        match best {
            Some((bs, bd)) if s < bs || (s == bs && d > bd) => {}
            _ => best = Some((s, d)),
        }
    }
    best.map(|(_, d)| d)
        .ok_or_else(|| Error::invalid("no answer-free candidate for confusion sampling"))
}

/// One encoded training pair.
#[derive(Clone, Debug)]
pub struct PairExample {
    pub question: Arc<ModelInput>,
    pub subksg: Arc<ModelInput>,
    pub label: u8,
}

/// A dev or test question with its encoded candidates.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub question_id: String,
    pub question: Arc<ModelInput>,
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub index: usize,
    pub anchor: EntityId,
    pub input: Arc<ModelInput>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfigSerde,
    /// Epochs without dev MRR improvement before stopping; `0` disables.
    pub patience: usize,
    pub seed: u64,
    pub workers: usize,
    pub mrr_mode: MrrMode,
    /// Stop once the loss over the whole training set, recomputed after the
    /// epoch, drops below this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_below: Option<f64>,
}

/// Serde mirror of [`AdamConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfigSerde {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfigSerde {
    fn default() -> Self {
        let a = AdamConfig::default();
        AdamConfigSerde {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl From<AdamConfigSerde> for AdamConfig {
    fn from(a: AdamConfigSerde) -> Self {
        AdamConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 50,
            adam: AdamConfigSerde::default(),
            patience: 5,
            seed: 0,
            workers: 1,
            mrr_mode: MrrMode::First,
            stop_below: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_mrr: Option<f64>,
    /// Loss over the whole training set after the epoch; only computed when
    /// a stopping threshold is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Sums per-pair gradients in pair order so the result does not depend on
/// how work was split across threads.
pub(crate) fn reduce_gradients(parts: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for g in parts {
        for (k, v) in g {
            match total.get_mut(&k) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(v.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    total.insert(k, v);
                }
            }
        }
    }
    total
}

/// Mini-batch Adam on the pair MSE. After each epoch the dev set (if any)
/// is ranked and the parameters with the best dev MRR are kept.
pub fn train(
    model: &mut RankerModel,
    pairs: &[PairExample],
    dev: &[CandidateSet],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let pool = thread_pool(cfg.workers)?;
    let mut adam = AdamState::new(cfg.adam.into());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
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
                    .map(|&i| model.pair_gradient(&pairs[i], n))
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
                    detail: format!("batch loss {batch_loss} after {} steps", adam.step_count()),
                });
            }
            total += batch_loss * n as f64;
            adam.step(&mut model.params, &reduce_gradients(grads))?;
        }
        let dev_mrr = if dev.is_empty() {
            None
        } else {
            let ranked = pool.install(|| rank_all(model, dev))?;
            let labels: Vec<Vec<u8>> = ranked.iter().map(RankedList::labels).collect();
            let refs: Vec<&Labels> = labels.iter().map(Vec::as_slice).collect();
            Some(mrr(&refs, cfg.mrr_mode))
        };
        let full_loss = match cfg.stop_below {
            Some(_) => Some(pool.install(|| pair_mse(model, pairs))?),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / pairs.len() as f64,
            dev_mrr,
            full_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, dev MRR {}",
            rec.train_loss,
            dev_mrr.map_or("-".to_string(), |m| format!("{m:.4}"))
        );
        on_epoch(&rec);
        log.push(rec);
        if let (Some(t), Some(l)) = (cfg.stop_below, full_loss) {
            if l < t {
                log::info!("training loss {l:.6} below {t} at epoch {epoch}");
                break;
            }
        }
        if let Some(m) = dev_mrr {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    log::info!("early stop at epoch {epoch}");
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

/// MSE of the current model over `pairs` (in parallel on the current pool).
pub fn pair_mse(model: &RankerModel, pairs: &[PairExample]) -> Result<f64> {
    let preds: Vec<f64> = pairs
        .par_iter()
        .map(|p| model.score(&p.question, &p.subksg))
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = pairs.iter().map(|p| model.target(p.label)).collect();
    mse_loss(&preds, &targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub index: usize,
    pub anchor: EntityId,
    pub score: f64,
    pub label: u8,
}

/// Candidates by descending score, ties by ascending anchor id then index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub question_id: String,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn from_scored(question_id: String, mut items: Vec<RankedItem>) -> Self {
        items.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.anchor.cmp(&b.anchor))
                .then(a.index.cmp(&b.index))
        });
        RankedList { question_id, items }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Scores every candidate (in parallel on the current rayon pool).
pub fn rank(model: &RankerModel, set: &CandidateSet) -> Result<RankedList> {
    if set.candidates.is_empty() {
        return Err(Error::invalid(format!(
            "question {} has no candidates",
            set.question_id
        )));
    }
    let items = set
        .candidates
        .par_iter()
        .map(|c| {
            Ok(RankedItem {
                index: c.index,
                anchor: c.anchor,
                score: model.score(&set.question, &c.input)?,
                label: c.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::from_scored(set.question_id.clone(), items))
}

pub fn rank_all(model: &RankerModel, sets: &[CandidateSet]) -> Result<Vec<RankedList>> {
    sets.iter()
        .filter(|s| !s.candidates.is_empty())
        .map(|s| rank(model, s))
        .collect()
}

/// `question_id<TAB>anchor<TAB>score` lines in ranked order.
pub fn write_scores(
    path: &Path,
    lists: &[RankedList],
    anchor_name: impl Fn(EntityId) -> String,
) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in lists {
        for i in &l.items {
            writeln!(
                w,
                "{}\t{}\t{}",
                l.question_id,
                anchor_name(i.anchor),
                i.score
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biggnn::EncoderGraph;
    use crate::numerics::{gradcheck_params, GradcheckOptions};

    fn vocab(n: usize) -> Vocabulary {
        let mut v = Vocabulary::default();
        for i in 0..n {
            v.add(&format!("w{i}"));
        }
        v
    }

    fn tiny_config(ablation: Ablation) -> RankerConfig {
        RankerConfig {
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
            ablation,
            ..Default::default()
        }
    }

    fn model(ablation: Ablation, seed: u64) -> RankerModel {
        let table = EmbeddingTable::random(vocab(6), 4, seed);
        RankerModel::new(tiny_config(ablation), &table, seed).unwrap()
    }

    fn input(n: usize, edges: &[(usize, usize)], toks: &[usize]) -> ModelInput {
        ModelInput {
            graph: EncoderGraph::new(n, edges),
            node_tokens: Arc::new((0..n).map(|i| vec![toks[i % toks.len()]]).collect()),
            sequence: Arc::new(toks.iter().map(|&t| vec![t]).collect()),
        }
    }

    fn question() -> ModelInput {
        input(3, &[(0, 1), (1, 2)], &[1, 2, 3])
    }

    fn subksg() -> ModelInput {
        input(2, &[(0, 1)], &[4, 5])
    }

    #[test]
    fn gradcheck_full_loss() {
        let m = model(Ablation::GraphAndSequence, 3);
        let (q, s) = (question(), subksg());
        let names = m.trainable();
        let only: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = gradcheck_params(
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
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn score_in_range_and_equal_inputs() {
        for ab in [
            Ablation::GraphAndSequence,
            Ablation::GraphOnly,
            Ablation::SequenceOnly,
        ] {
            let m = model(ab, 1);
            let s = m.score(&question(), &subksg()).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
        let mut cfg = tiny_config(Ablation::GraphAndSequence);
        cfg.biggnn.share_encoders = true;
        let m = RankerModel::new(cfg, &EmbeddingTable::random(vocab(6), 4, 2), 2).unwrap();
        let s = m.score(&question(), &question()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ablation_wiring() {
        let full = model(Ablation::GraphAndSequence, 5);
        let mut t = Tape::new();
        let (a, b) = full
            .representations(&mut t, &question(), &subksg())
            .unwrap();
        let (av, bv) = (t.value(a).clone(), t.value(b).clone());
        let g = 2 * full.config.biggnn.hidden;
        assert_eq!(av.cols(), g + full.config.ebimpm.output_width());

        let mut graph = full.clone();
        graph.config.ablation = Ablation::GraphOnly;
        let want = crate::numerics::cosine(&av.data()[..g], &bv.data()[..g]);
        assert!((graph.score(&question(), &subksg()).unwrap() - want).abs() < 1e-12);

        let mut seq = full.clone();
        seq.config.ablation = Ablation::SequenceOnly;
        let want = crate::numerics::cosine(&av.data()[g..], &bv.data()[g..]);
        assert!((seq.score(&question(), &subksg()).unwrap() - want).abs() < 1e-12);

        let graph_only = model(Ablation::GraphOnly, 5);
        assert!(graph_only.params.names().all(|n| !n.starts_with("m.")));
        let seq_only = model(Ablation::SequenceOnly, 5);
        assert!(seq_only.params.names().all(|n| !n.starts_with('g')));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[0.3, 1.0], &[0.3, 1.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(mse_loss(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            use rand::Rng;
            let n = rng.gen_range(1..10);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let mut direct = 0.0;
            for i in 0..n {
                direct += (y[i] - p[i]).powi(2);
            }
            assert!((mse_loss(&p, &y).unwrap() - direct / n as f64).abs() < 1e-15);
        }
    }

    fn refs(n: usize) -> Vec<SubKsgRef> {
        (0..n)
            .map(|i| SubKsgRef {
                question_id: "q".into(),
                index: i,
            })
            .collect()
    }

    #[test]
    fn random_negatives() {
        assert_eq!(sample_negatives_random("q", &refs(5), 20, 1).len(), 5);
        let a = sample_negatives_random("q", &refs(50), 20, 7);
        assert_eq!(a.len(), 20);
        assert_eq!(a, sample_negatives_random("q", &refs(50), 20, 7));
        assert!(a.iter().all(|p| p.label == 0));
        let mut idx: Vec<usize> = a.iter().map(|p| p.subksg.index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 20);
        assert!(sample_negatives_random("q", &[], 20, 1).is_empty());
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tfidf_by_hand() {
        // docs: "a b", "a c"; N = 2
        let docs = vec![toks("a b"), toks("a c")];
        let idx = TfidfIndex::new(&docs);
        let idf_a = (3.0f64 / 3.0).ln() + 1.0;
        let idf_b = (3.0f64 / 2.0).ln() + 1.0;
        let q = idx.vectorize(&toks("a b"));
        let want = idf_a * idf_a
            / ((idf_a * idf_a + idf_b * idf_b).sqrt() * (idf_a * idf_a + idf_b * idf_b).sqrt());
        assert!((idx.similarity(&q, 1) - want).abs() < 1e-15);
        assert!((idx.similarity(&q, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tfidf_selection() {
        let docs = vec![toks("x y"), toks("a b c"), toks("a b")];
        let idx = TfidfIndex::new(&docs);
        assert_eq!(
            sample_negative_tfidf(&idx, &toks("a b"), &[0, 1, 2]).unwrap(),
            2
        );
        assert_eq!(sample_negative_tfidf(&idx, &toks("a b"), &[0]).unwrap(), 0);
        assert!(sample_negative_tfidf(&idx, &toks("a b"), &[]).is_err());
        // equal similarity: lowest index
        let idx = TfidfIndex::new(&[toks("p"), toks("q"), toks("q")]);
        assert_eq!(sample_negative_tfidf(&idx, &toks("q"), &[2, 1]).unwrap(), 1);
    }

    fn candidate_set() -> CandidateSet {
        CandidateSet {
            question_id: "q".into(),
            question: Arc::new(question()),
            candidates: (0..4)
                .map(|i| Candidate {
                    index: i,
                    anchor: EntityId(10 - i as u32),
                    input: Arc::new(input(2 + i % 2, &[(0, 1)], &[i + 1, 5 - i])),
                    label: (i == 2) as u8,
                })
                .collect(),
        }
    }

    #[test]
    fn rank_properties() {
        let m = model(Ablation::GraphAndSequence, 8);
        let set = candidate_set();
        let a = rank(&m, &set).unwrap();
        let mut rev = set.clone();
        rev.candidates.reverse();
        assert_eq!(a, rank(&m, &rev).unwrap());
        let mut idx: Vec<usize> = a.items.iter().map(|i| i.index).collect();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(a.items.windows(2).all(|w| w[0].score >= w[1].score));

        let mut one = set.clone();
        one.candidates.truncate(1);
        assert_eq!(rank(&m, &one).unwrap().items.len(), 1);
        let mut none = set;
        none.candidates.clear();
        assert!(rank(&m, &none).is_err());
    }

    #[test]
    fn ties_by_anchor() {
        let items = vec![
            RankedItem {
                index: 0,
                anchor: EntityId(9),
                score: 0.5,
                label: 0,
            },
            RankedItem {
                index: 1,
                anchor: EntityId(3),
                score: 0.5,
                label: 0,
            },
        ];
        let l = RankedList::from_scored("q".into(), items);
        assert_eq!(l.items[0].anchor, EntityId(3));
    }

    #[test]
    fn descent_step() {
        let mut m = model(Ablation::GraphAndSequence, 11);
        let ex = PairExample {
            question: Arc::new(question()),
            subksg: Arc::new(subksg()),
            label: 1,
        };
        let before = m.pair_gradient(&ex, 1).unwrap().0;
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 1,
            adam: AdamConfigSerde {
                lr: 1e-6,
                ..Default::default()
            },
            ..Default::default()
        };
        train(&mut m, std::slice::from_ref(&ex), &[], &cfg, |_| {}).unwrap();
        let after = m.pair_gradient(&ex, 1).unwrap().0;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_is_deterministic_across_workers() {
        let pairs: Vec<PairExample> = (0..6)
            .map(|i| PairExample {
                question: Arc::new(question()),
                subksg: Arc::new(input(2 + i % 3, &[(0, 1)], &[i % 6 + 1, 2])),
                label: (i % 2) as u8,
            })
            .collect();
        let run = |workers| {
            let mut m = model(Ablation::GraphAndSequence, 4);
            let cfg = TrainConfig {
                max_epochs: 3,
                batch_size: 4,
                workers,
                seed: 9,
                ..Default::default()
            };
            let dev = vec![candidate_set()];
            let out = train(&mut m, &pairs, &dev, &cfg, |_| {}).unwrap();
            let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
            (losses, m.to_checkpoint().unwrap())
        };
        let (l1, c1) = run(1);
        let (l2, c2) = run(3);
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(Ablation::GraphAndSequence, 2);
        let back = RankerModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.vocab.tokens(), m.vocab.tokens());
        assert_eq!(
            back.score(&question(), &subksg()).unwrap(),
            m.score(&question(), &subksg()).unwrap()
        );
    }
}
