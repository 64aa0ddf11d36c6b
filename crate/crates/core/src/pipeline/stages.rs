//! Stage implementations. Every stage reads only files in the run
//! directory (ingest also reads the configured dataset) and rewrites its
//! own outputs in full, so rerunning a stage reproduces the same bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{NegativeMode, PipelineConfig, Regime};
use super::{
    create_dir, read_json, read_jsonl, write_json, write_jsonl, Manifest, RunDir, Stage,
    StageEntry, MANIFEST_FORMAT,
};
use crate::answer_select::{
    merge_topk, select_answers, train_answerer, write_predictions, AnswerExample, AnswererModel,
    MergedGraph, PredictionLine,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    hits_precision_recall_f1, AnswerOutcome, AnswerSelectionReport, MetricReport,
};
use crate::kg_store::{
    khop_retrieve, load_questions, load_triples, EntityId, KnowledgeGraph, Ksg, QuestionRecord,
    Triple,
};
use crate::numerics::Checkpoint;
use crate::partition::{partition_question, SubKsg, SubKsgRecord};
use crate::ranker::{
    derive_seed, rank_all, sample_negative_tfidf, sample_negatives_random, thread_pool, train,
    write_scores, Candidate, CandidateSet, EpochRecord, PairExample, RankedItem, RankedList,
    RankerModel, SubKsgRef, TfidfIndex, TrainingPair,
};
use crate::text_pipeline::{
    linearize_subksg, EmbeddingTable, EntityNames, ModelInput, TextContext, Vocabulary,
};

/// Question ids per split, in question-file order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Contiguous blocks of the file order sized by `fractions`.
    pub fn assign(ids: &[String], fractions: [f64; 3]) -> Self {
        let n = ids.len();
        let a = ((n as f64 * fractions[0]).round() as usize).min(n);
        let b = ((n as f64 * (fractions[0] + fractions[1])).round() as usize).clamp(a, n);
        Splits {
            train: ids[..a].to_vec(),
            dev: ids[a..b].to_vec(),
            test: ids[b..].to_vec(),
        }
    }

    pub fn split_of(&self, id: &str) -> &'static str {
        if self.train.iter().any(|x| x == id) {
            "train"
        } else if self.dev.iter().any(|x| x == id) {
            "dev"
        } else {
            "test"
        }
    }
}

/// Retrieved subgraph of one question, entities by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsgRecord {
    pub question_id: String,
    pub topics: Vec<String>,
    pub nodes: Vec<String>,
    pub edges: Vec<[String; 3]>,
}

impl KsgRecord {
    fn new(question_id: &str, topics: &[EntityId], ksg: &Ksg, kg: &KnowledgeGraph) -> Self {
        KsgRecord {
            question_id: question_id.to_string(),
            topics: topics
                .iter()
                .map(|&e| kg.entity_name(e).to_string())
                .collect(),
            nodes: ksg
                .nodes
                .iter()
                .map(|&e| kg.entity_name(e).to_string())
                .collect(),
            edges: ksg
                .edges
                .iter()
                .map(|t| kg.triple_names(t).map(str::to_string))
                .collect(),
        }
    }

    fn resolve(&self, kg: &KnowledgeGraph) -> Result<Ksg> {
        let (nodes, edges) = resolve_graph(kg, &self.question_id, &self.nodes, &self.edges)?;
        Ok(Ksg { nodes, edges })
    }
}

/// Sorted node and edge lists from names.
fn resolve_graph(
    kg: &KnowledgeGraph,
    qid: &str,
    nodes: &[String],
    edges: &[[String; 3]],
) -> Result<(Vec<EntityId>, Vec<Triple>)> {
    let ent = |n: &str| {
        kg.entity_id(n)
            .ok_or_else(|| Error::invalid(format!("question {qid}: unknown entity `{n}`")))
    };
    let mut ns: Vec<EntityId> = nodes.iter().map(|n| ent(n)).collect::<Result<_>>()?;
    ns.sort_unstable();
    ns.dedup();
    let mut es: Vec<Triple> = edges
        .iter()
        .map(|[s, r, o]| {
            let r = kg
                .relation_id(r)
                .ok_or_else(|| Error::invalid(format!("question {qid}: unknown relation `{r}`")))?;
            Ok(Triple::new(ent(s)?, r, ent(o)?))
        })
        .collect::<Result<_>>()?;
    es.sort_unstable();
    es.dedup();
    Ok((ns, es))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItemRecord {
    pub index: usize,
    pub anchor: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedListRecord {
    pub question_id: String,
    pub split: String,
    pub items: Vec<RankedItemRecord>,
}

impl RankedListRecord {
    fn resolve(&self, kg: &KnowledgeGraph) -> Result<RankedList> {
        let items = self
            .items
            .iter()
            .map(|i| {
                Ok(RankedItem {
                    index: i.index,
                    anchor: kg.entity_id(&i.anchor).ok_or_else(|| {
                        Error::invalid(format!(
                            "question {}: unknown anchor `{}`",
                            self.question_id, i.anchor
                        ))
                    })?,
                    score: i.score,
                    label: i.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RankedList {
            question_id: self.question_id.clone(),
            items,
        })
    }
}

/// A merged answer graph, entities by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedRecord {
    pub question_id: String,
    pub nodes: Vec<String>,
    pub edges: Vec<[String; 3]>,
    /// Node name to the anchors of the sub-KSGs it came from.
    pub provenance: BTreeMap<String, Vec<String>>,
}

impl MergedRecord {
    fn new(qid: &str, m: &MergedGraph, kg: &KnowledgeGraph) -> Self {
        let name = |e: &EntityId| kg.entity_name(*e).to_string();
        MergedRecord {
            question_id: qid.to_string(),
            nodes: m.nodes.iter().map(name).collect(),
            edges: m
                .edges
                .iter()
                .map(|t| kg.triple_names(t).map(str::to_string))
                .collect(),
            provenance: m
                .provenance
                .iter()
                .map(|(k, v)| (name(k), v.iter().map(name).collect()))
                .collect(),
        }
    }

    fn resolve(&self, kg: &KnowledgeGraph) -> Result<MergedGraph> {
        let (nodes, edges) = resolve_graph(kg, &self.question_id, &self.nodes, &self.edges)?;
        let ent = |n: &str| {
            kg.entity_id(n).ok_or_else(|| {
                Error::invalid(format!(
                    "question {}: unknown entity `{n}`",
                    self.question_id
                ))
            })
        };
        let provenance = self
            .provenance
            .iter()
            .map(|(k, v)| {
                Ok((
                    ent(k)?,
                    v.iter().map(|a| ent(a)).collect::<Result<Vec<_>>>()?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MergedGraph {
            nodes,
            edges,
            provenance,
        })
    }
}

/// What a stage did, for display.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub summary: serde_json::Value,
}

/// Dataset state produced by ingest.
struct Corpus {
    kg: KnowledgeGraph,
    names: Option<EntityNames>,
    questions: Vec<QuestionRecord>,
    by_id: HashMap<String, usize>,
    splits: Splits,
}

impl Corpus {
    fn ctx(&self) -> TextContext<'_> {
        TextContext::new(&self.kg, self.names.as_ref())
    }

    fn question(&self, id: &str) -> Result<&QuestionRecord> {
        self.by_id
            .get(id)
            .map(|&i| &self.questions[i])
            .ok_or_else(|| Error::invalid(format!("unknown question id `{id}`")))
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub run: RunDir,
}

impl Pipeline {
    /// Validates the config and binds it to `run_dir`. A run directory
    /// created under a different config is rejected.
    pub fn open(config: PipelineConfig, run_dir: impl Into<std::path::PathBuf>) -> Result<Self> {
        config.validate()?;
        let run = RunDir::new(run_dir);
        create_dir(&run.root)?;
        let hash = config.hash()?;
        match run.read_manifest()? {
            Some(m) if m.config_hash != hash => {
                return Err(Error::Config(format!(
                    "run directory {} was created with a different config ({} != {}); use a fresh run directory",
                    run.root.display(),
                    m.config_hash,
                    hash
                )));
            }
            Some(_) => {}
            None => {
                let mut recorded = serde_json::to_value(&config)?;
                if let Some(obj) = recorded.as_object_mut() {
                    obj.remove("workers");
                }
                run.write_manifest(&Manifest {
                    format: MANIFEST_FORMAT.into(),
                    config_hash: hash,
                    seed: config.seed,
                    config: recorded,
                    stages: BTreeMap::new(),
                })?
            }
        }
        Ok(Pipeline { config, run })
    }

    fn seed(&self, key: &str) -> u64 {
        derive_seed(self.config.seed, key)
    }

    fn finish(&self, stage: Stage, outputs: &[&str]) -> Result<()> {
        let mut m = self
            .run
            .read_manifest()?
            .ok_or_else(|| Error::Config("run manifest disappeared".into()))?;
        m.stages.insert(
            stage.name().to_string(),
            StageEntry {
                version: stage.version(),
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
            },
        );
        self.run.write_manifest(&m)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        log::info!("stage {}", stage.name());
        let pool = thread_pool(self.config.workers)?;
        let summary = pool.install(|| match stage {
            Stage::Ingest => self.ingest(),
            Stage::Retrieve => self.retrieve(),
            Stage::Partition => self.partition(),
            Stage::MakePairs => self.make_pairs(),
            Stage::TrainRanker => self.train_ranker(),
            Stage::Rank => self.rank(),
            Stage::Merge => self.merge(),
            Stage::TrainAnswerer => self.train_answerer(),
            Stage::Evaluate => self.evaluate(),
        })?;
        Ok(StageReport {
            stage: stage.name(),
            summary,
        })
    }

    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn stage_dir(&self, stage: Stage) -> Result<std::path::PathBuf> {
        let d = self.run.stage_dir(stage);
        create_dir(&d)?;
        Ok(d)
    }

    fn ingest(&self) -> Result<serde_json::Value> {
        let d = &self.config.data;
        let kg = load_triples(&d.triples)?;
        let load = load_questions(&d.questions, &kg)?;
        for e in &load.errors {
            log::warn!("{}:{}: {}", d.questions.display(), e.line, e.message);
        }
        let dir = self.stage_dir(Stage::Ingest)?;
        kg.write_triples(&dir.join("triples.tsv"))?;
        write_jsonl(
            &dir.join("questions.jsonl"),
            load.records.iter().map(|r| r.to_raw(&kg)),
        )?;
        let names_out = dir.join("entity_names.tsv");
        let names = match &d.entity_names {
            Some(p) => {
                let n = EntityNames::load(p)?;
                fs::copy(p, &names_out).map_err(|e| Error::io(p, e))?;
                Some(n)
            }
            None => {
                if names_out.exists() {
                    fs::remove_file(&names_out).map_err(|e| Error::io(&names_out, e))?;
                }
                None
            }
        };
        let ids: Vec<String> = load.records.iter().map(|r| r.id.clone()).collect();
        let splits = Splits::assign(&ids, d.splits);
        write_json(&dir.join("splits.json"), &splits)?;
        let ctx = TextContext::new(&kg, names.as_ref());
        let vocab = Vocabulary::from_corpus(&load.records, &ctx);
        let table = match &d.embeddings {
            Some(p) => EmbeddingTable::load(p, vocab)?,
            None => EmbeddingTable::random(vocab, d.word_dim, self.seed("embeddings")),
        };
        if table.oov.len() >= table.vocab.len() {
            return Err(Error::invalid("no vocabulary token has a word vector"));
        }
        table.save(&dir.join("embeddings.txt"))?;
        let summary = json!({
            "entities": kg.num_entities(),
            "relations": kg.num_relations(),
            "triples": kg.triples().len(),
            "self_loops": kg.self_loops(),
            "questions": load.records.len(),
            "answerable": load.records.iter().filter(|r| r.answerable).count(),
            "record_errors": load.errors,
            "warnings": load.warnings,
            "splits": {"train": splits.train.len(), "dev": splits.dev.len(), "test": splits.test.len()},
            "vocabulary": table.vocab.len(),
            "word_dim": table.dim(),
            "oov_tokens": table.oov.len() - 1,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        let mut outs = vec![
            "triples.tsv",
            "questions.jsonl",
            "splits.json",
            "embeddings.txt",
            "summary.json",
        ];
        if names.is_some() {
            outs.insert(2, "entity_names.tsv");
        }
        self.finish(Stage::Ingest, &outs)?;
        Ok(summary)
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let kg = load_triples(&self.run.input(Stage::Ingest, "triples.tsv")?)?;
        let load = load_questions(&self.run.input(Stage::Ingest, "questions.jsonl")?, &kg)?;
        if let Some(e) = load.errors.first() {
            return Err(Error::invalid(format!(
                "ingested question line {}: {}",
                e.line, e.message
            )));
        }
        let names_path = self.run.file(Stage::Ingest, "entity_names.tsv");
        let names = if names_path.exists() {
            Some(EntityNames::load(&names_path)?)
        } else {
            None
        };
        let splits: Splits = read_json(&self.run.input(Stage::Ingest, "splits.json")?)?;
        let by_id = load
            .records
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.clone(), i))
            .collect();
        Ok(Corpus {
            kg,
            names,
            questions: load.records,
            by_id,
            splits,
        })
    }

    fn load_table(&self, corpus: &Corpus) -> Result<EmbeddingTable> {
        let vocab = Vocabulary::from_corpus(&corpus.questions, &corpus.ctx());
        EmbeddingTable::load(&self.run.input(Stage::Ingest, "embeddings.txt")?, vocab)
    }

    fn retrieve(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let hops = self.config.retrieve.hops;
        let results: Vec<Option<Ksg>> = corpus
            .questions
            .par_iter()
            .map(|q| {
                if q.topic_entities.is_empty() {
                    Ok(None)
                } else {
                    khop_retrieve(&corpus.kg, &q.topic_entities, hops).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        let (mut nodes, mut edges, mut answerable, mut containing) =
            (0usize, 0usize, 0usize, 0usize);
        for (q, k) in corpus.questions.iter().zip(&results) {
            match k {
                Some(k) => {
                    nodes += k.nodes.len();
                    edges += k.edges.len();
                    if q.answerable {
                        answerable += 1;
                        containing += usize::from(q.answers.iter().any(|a| k.contains(*a)));
                    }
                    records.push(KsgRecord::new(&q.id, &q.topic_entities, k, &corpus.kg));
                }
                None => {
                    log::warn!(
                        "question {}: no topic entity in the graph, not retrieved",
                        q.id
                    );
                    skipped.push(q.id.clone());
                }
            }
        }
        let dir = self.stage_dir(Stage::Retrieve)?;
        write_jsonl(&dir.join("ksg.jsonl"), &records)?;
        let n = records.len().max(1) as f64;
        let summary = json!({
            "hops": hops,
            "retrieved": records.len(),
            "skipped": skipped,
            "mean_nodes": nodes as f64 / n,
            "mean_edges": edges as f64 / n,
            "answer_in_subgraph": if answerable > 0 { Some(containing as f64 / answerable as f64) } else { None },
        });
        write_json(&dir.join("summary.json"), &summary)?;
        self.finish(Stage::Retrieve, &["ksg.jsonl", "summary.json"])?;
        Ok(summary)
    }

    fn load_ksgs(&self, kg: &KnowledgeGraph) -> Result<BTreeMap<String, Ksg>> {
        let recs: Vec<KsgRecord> = read_jsonl(&self.run.input(Stage::Retrieve, "ksg.jsonl")?)?;
        recs.iter()
            .map(|r| Ok((r.question_id.clone(), r.resolve(kg)?)))
            .collect()
    }

    fn partition(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let ksgs = self.load_ksgs(&corpus.kg)?;
        let opts = self.config.partition;
        let order: Vec<(&String, &Ksg)> = ksgs.iter().collect();
        let mut parts = order
            .par_iter()
            .map(|(id, k)| partition_question(corpus.question(id)?, k, opts))
            .collect::<Result<Vec<_>>>()?;
        // file order, not id order
        parts.sort_by_key(|p| corpus.by_id[&p.question_id]);
        let dir = self.stage_dir(Stage::Partition)?;
        write_jsonl(
            &dir.join("subksgs.jsonl"),
            parts
                .iter()
                .flat_map(|p| p.subksgs.iter().map(|s| s.to_record(&corpus.kg))),
        )?;
        let answerable: Vec<_> = parts.iter().filter(|p| p.answerable).collect();
        let covered = answerable.iter().filter(|p| p.covered()).count();
        let per_question: Vec<serde_json::Value> = parts
            .iter()
            .map(|p| {
                json!({
                    "question_id": p.question_id,
                    "subksgs": p.subksgs.len(),
                    "positives": p.subksgs.iter().filter(|s| s.label == 1).count(),
                    "unreachable": p.unreachable.len(),
                })
            })
            .collect();
        let summary = json!({
            "questions": parts.len(),
            "answerable": answerable.len(),
            "covered": covered,
            "coverage": if answerable.is_empty() { None } else { Some(covered as f64 / answerable.len() as f64) },
            "subksgs": parts.iter().map(|p| p.subksgs.len()).sum::<usize>(),
            "positives": parts.iter().flat_map(|p| &p.subksgs).filter(|s| s.label == 1).count(),
            "label_mode": opts.label_mode,
            "cover_mixed_leaves": opts.cover_mixed_leaves,
            "per_question": per_question,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        self.finish(Stage::Partition, &["subksgs.jsonl", "summary.json"])?;
        Ok(summary)
    }

    /// Sub-KSGs per question id, in partition output order.
    fn load_partitions(&self, kg: &KnowledgeGraph) -> Result<BTreeMap<String, Vec<SubKsg>>> {
        let recs: Vec<SubKsgRecord> =
            read_jsonl(&self.run.input(Stage::Partition, "subksgs.jsonl")?)?;
        let mut out: BTreeMap<String, Vec<SubKsg>> = BTreeMap::new();
        for r in &recs {
            out.entry(r.question_id.clone())
                .or_default()
                .push(r.resolve(kg)?);
        }
        Ok(out)
    }

    fn make_pairs(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let parts = self.load_partitions(&corpus.kg)?;
        let neg = self.config.negatives;
        let mut pairs: Vec<TrainingPair> = Vec::new();
        let mut without_positive = Vec::new();
        let train_ids: Vec<&String> = corpus
            .splits
            .train
            .iter()
            .filter(|id| parts.contains_key(*id))
            .collect();
        let tfidf = match neg.mode {
            NegativeMode::Tfidf => {
                let ctx = corpus.ctx();
                let refs: Vec<(SubKsgRef, &SubKsg)> = train_ids
                    .iter()
                    .flat_map(|id| {
                        parts[*id].iter().enumerate().map(|(i, s)| {
                            (
                                SubKsgRef {
                                    question_id: (*id).clone(),
                                    index: i,
                                },
                                s,
                            )
                        })
                    })
                    .collect();
                let docs: Vec<Vec<String>> = refs
                    .iter()
                    .map(|(_, s)| linearize_subksg(s, &ctx))
                    .collect();
                Some((TfidfIndex::new(&docs), refs, docs))
            }
            NegativeMode::Random => None,
        };
        for id in &train_ids {
            let subs = &parts[*id];
            let q = corpus.question(id)?;
            let positives: Vec<usize> = (0..subs.len()).filter(|&i| subs[i].label == 1).collect();
            if positives.is_empty() {
                without_positive.push((*id).clone());
                continue;
            }
            for &i in &positives {
                pairs.push(TrainingPair {
                    question_id: (*id).clone(),
                    subksg: SubKsgRef {
                        question_id: (*id).clone(),
                        index: i,
                    },
                    label: 1,
                });
            }
            match &tfidf {
                None => {
                    let pool: Vec<SubKsgRef> = (0..subs.len())
                        .filter(|&i| subs[i].label == 0)
                        .map(|i| SubKsgRef {
                            question_id: (*id).clone(),
                            index: i,
                        })
                        .collect();
                    pairs.extend(sample_negatives_random(
                        id,
                        &pool,
                        neg.count,
                        self.seed("negatives"),
                    ));
                }
                Some((index, refs, docs)) => {
                    let mut eligible: Vec<usize> = (0..refs.len())
                        .filter(|&d| !refs[d].1.nodes.iter().any(|n| q.answers.contains(n)))
                        .collect();
                    for &i in &positives {
                        let pos_doc = refs
                            .iter()
                            .position(|(r, _)| r.question_id == **id && r.index == i)
                            .expect("positive is in the pool");
                        match sample_negative_tfidf(index, &docs[pos_doc], &eligible) {
                            Ok(d) => {
                                eligible.retain(|&e| e != d);
                                pairs.push(TrainingPair {
                                    question_id: (*id).clone(),
                                    subksg: refs[d].0.clone(),
                                    label: 0,
                                });
                            }
                            Err(e) => log::warn!("question {id}: {e}"),
                        }
                    }
                }
            }
        }
        let dir = self.stage_dir(Stage::MakePairs)?;
        write_jsonl(&dir.join("train.jsonl"), &pairs)?;
        let summary = json!({
            "mode": neg.mode,
            "questions": train_ids.len() - without_positive.len(),
            "without_positive": without_positive,
            "positives": pairs.iter().filter(|p| p.label == 1).count(),
            "negatives": pairs.iter().filter(|p| p.label == 0).count(),
        });
        write_json(&dir.join("summary.json"), &summary)?;
        self.finish(Stage::MakePairs, &["train.jsonl", "summary.json"])?;
        Ok(summary)
    }

    fn candidate_set(
        corpus: &Corpus,
        id: &str,
        subs: &[SubKsg],
        vocab: &Vocabulary,
        cache: &mut HashMap<String, Arc<ModelInput>>,
    ) -> Result<CandidateSet> {
        let question = question_input(corpus, id, vocab, cache)?;
        let ctx = corpus.ctx();
        let candidates = subs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Candidate {
                    index: i,
                    anchor: s.anchor,
                    input: Arc::new(ModelInput::subksg(s, &ctx, vocab)?),
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CandidateSet {
            question_id: id.to_string(),
            question,
            candidates,
        })
    }

    fn train_ranker(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let table = self.load_table(&corpus)?;
        let parts = self.load_partitions(&corpus.kg)?;
        let pairs: Vec<TrainingPair> =
            read_jsonl(&self.run.input(Stage::MakePairs, "train.jsonl")?)?;
        let vocab = &table.vocab;
        let ctx = corpus.ctx();
        let mut qcache = HashMap::new();
        let mut scache: HashMap<SubKsgRef, Arc<ModelInput>> = HashMap::new();
        let mut examples = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let question = question_input(&corpus, &p.question_id, vocab, &mut qcache)?;
            let subksg = match scache.get(&p.subksg) {
                Some(s) => s.clone(),
                None => {
                    let s = parts
                        .get(&p.subksg.question_id)
                        .and_then(|v| v.get(p.subksg.index))
                        .ok_or_else(|| {
                            Error::invalid(format!("pair refers to missing sub-KSG {:?}", p.subksg))
                        })?;
                    let s = Arc::new(ModelInput::subksg(s, &ctx, vocab)?);
                    scache.insert(p.subksg.clone(), s.clone());
                    s
                }
            };
            examples.push(PairExample {
                question,
                subksg,
                label: p.label,
            });
        }
        let dev: Vec<CandidateSet> = corpus
            .splits
            .dev
            .iter()
            .filter_map(|id| parts.get(id).map(|s| (id, s)))
            .map(|(id, s)| Self::candidate_set(&corpus, id, s, vocab, &mut qcache))
            .collect::<Result<_>>()?;
        let c = &self.config;
        let tcfg = c.ranker_training.to_train_config(
            self.seed("ranker-train"),
            c.workers,
            c.evaluate.mrr_mode,
        );
        let mut model = RankerModel::new(c.ranker, &table, self.seed("ranker-init"))?;
        let mut log: Vec<EpochRecord> = Vec::new();
        let outcome = train(&mut model, &examples, &dev, &tcfg, |r| log.push(r.clone()))?;
        let dir = self.stage_dir(Stage::TrainRanker)?;
        write_json(&dir.join("checkpoint.json"), &model.to_checkpoint()?)?;
        write_jsonl(&dir.join("train_log.jsonl"), &log)?;
        let best = log.get(outcome.best_epoch.saturating_sub(1));
        let summary = json!({
            "pairs": examples.len(),
            "dev_questions": dev.len(),
            "epochs": log.len(),
            "best_epoch": outcome.best_epoch,
            "best_dev_mrr": best.and_then(|r| r.dev_mrr),
            "final_train_loss": log.last().map(|r| r.train_loss),
            "parameters": model.params.num_values(),
        });
        write_json(&dir.join("summary.json"), &summary)?;
        self.finish(
            Stage::TrainRanker,
            &["checkpoint.json", "train_log.jsonl", "summary.json"],
        )?;
        Ok(summary)
    }

    fn rank(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let parts = self.load_partitions(&corpus.kg)?;
        let ckpt: Checkpoint = read_json(&self.run.input(Stage::TrainRanker, "checkpoint.json")?)?;
        let model = RankerModel::from_checkpoint(&ckpt)?;
        let mut qcache = HashMap::new();
        let sets: Vec<CandidateSet> = corpus
            .questions
            .iter()
            .filter_map(|q| parts.get(&q.id).map(|s| (&q.id, s)))
            .map(|(id, s)| Self::candidate_set(&corpus, id, s, &model.vocab, &mut qcache))
            .collect::<Result<_>>()?;
        let lists = rank_all(&model, &sets)?;
        let dir = self.stage_dir(Stage::Rank)?;
        let records: Vec<RankedListRecord> = lists
            .iter()
            .map(|l| RankedListRecord {
                question_id: l.question_id.clone(),
                split: corpus.splits.split_of(&l.question_id).to_string(),
                items: l
                    .items
                    .iter()
                    .map(|i| RankedItemRecord {
                        index: i.index,
                        anchor: corpus.kg.entity_name(i.anchor).to_string(),
                        score: i.score,
                        label: i.label,
                    })
                    .collect(),
            })
            .collect();
        write_jsonl(&dir.join("ranked.jsonl"), &records)?;
        write_scores(&dir.join("scores.tsv"), &lists, |e| {
            corpus.kg.entity_name(e).to_string()
        })?;
        let summary = json!({
            "questions": lists.len(),
            "candidates": lists.iter().map(|l| l.items.len()).sum::<usize>(),
        });
        write_json(&dir.join("summary.json"), &summary)?;
        self.finish(Stage::Rank, &["ranked.jsonl", "scores.tsv", "summary.json"])?;
        Ok(summary)
    }

    fn load_ranked(&self, kg: &KnowledgeGraph) -> Result<BTreeMap<String, RankedList>> {
        let recs: Vec<RankedListRecord> =
            read_jsonl(&self.run.input(Stage::Rank, "ranked.jsonl")?)?;
        recs.iter()
            .map(|r| Ok((r.question_id.clone(), r.resolve(kg)?)))
            .collect()
    }

    fn merge(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let parts = self.load_partitions(&corpus.kg)?;
        let ranked = self.load_ranked(&corpus.kg)?;
        let regimes = self.config.merge.regimes();
        let ksgs = if regimes.contains(&Regime::Full) {
            Some(self.load_ksgs(&corpus.kg)?)
        } else {
            None
        };
        let dir = self.stage_dir(Stage::Merge)?;
        let mut summary = serde_json::Map::new();
        let mut outputs = Vec::new();
        for regime in &regimes {
            let mut records = Vec::new();
            let (mut nodes, mut containing) = (0usize, 0usize);
            for q in &corpus.questions {
                let merged = match regime {
                    Regime::TopK(k) => match (ranked.get(&q.id), parts.get(&q.id)) {
                        (Some(r), Some(s)) => merge_topk(r, s, *k)?,
                        _ => continue,
                    },
                    Regime::Full => match ksgs.as_ref().and_then(|m| m.get(&q.id)) {
                        Some(k) => MergedGraph::from_ksg(k),
                        None => continue,
                    },
                };
                nodes += merged.nodes.len();
                containing += usize::from(q.answers.iter().any(|a| merged.contains(*a)));
                records.push(MergedRecord::new(&q.id, &merged, &corpus.kg));
            }
            let name = format!("{}.jsonl", regime.name());
            write_jsonl(&dir.join(&name), &records)?;
            outputs.push(name);
            summary.insert(
                regime.name(),
                json!({
                    "questions": records.len(),
                    "mean_nodes": nodes as f64 / records.len().max(1) as f64,
                    "containing_answer": containing,
                }),
            );
        }
        let summary = serde_json::Value::Object(summary);
        write_json(&dir.join("summary.json"), &summary)?;
        outputs.push("summary.json".into());
        let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.finish(Stage::Merge, &outs)?;
        Ok(summary)
    }

    fn load_merged(
        &self,
        kg: &KnowledgeGraph,
        regime: Regime,
    ) -> Result<BTreeMap<String, MergedGraph>> {
        let recs: Vec<MergedRecord> = read_jsonl(
            &self
                .run
                .input(Stage::Merge, &format!("{}.jsonl", regime.name()))?,
        )?;
        recs.iter()
            .map(|r| Ok((r.question_id.clone(), r.resolve(kg)?)))
            .collect()
    }

    fn answer_examples(
        corpus: &Corpus,
        ids: &[String],
        merged: &BTreeMap<String, MergedGraph>,
        vocab: &Vocabulary,
        cache: &mut HashMap<String, Arc<ModelInput>>,
    ) -> Result<Vec<AnswerExample>> {
        let ctx = corpus.ctx();
        let mut out = Vec::new();
        for id in ids {
            let Some(m) = merged.get(id) else { continue };
            let q = corpus.question(id)?;
            let qi = question_input(corpus, id, vocab, cache)?;
            if let Some(ex) = AnswerExample::build(id, qi, m, &q.answers, &ctx, vocab) {
                out.push(ex);
            }
        }
        Ok(out)
    }

    fn train_answerer(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let table = self.load_table(&corpus)?;
        let c = &self.config;
        let mut summary = serde_json::Map::new();
        let mut outputs = Vec::new();
        let mut cache = HashMap::new();
        for regime in c.merge.regimes() {
            let name = regime.name();
            let merged = self.load_merged(&corpus.kg, regime)?;
            let train_ex = Self::answer_examples(
                &corpus,
                &corpus.splits.train,
                &merged,
                &table.vocab,
                &mut cache,
            )?;
            let dev_ex = Self::answer_examples(
                &corpus,
                &corpus.splits.dev,
                &merged,
                &table.vocab,
                &mut cache,
            )?;
            let tcfg = c.answerer_training.to_train_config(
                self.seed(&format!("answerer-train-{name}")),
                c.workers,
                c.evaluate.mrr_mode,
            );
            let mut model = AnswererModel::new(
                c.answerer,
                &table,
                self.seed(&format!("answerer-init-{name}")),
            )?;
            let mut log: Vec<EpochRecord> = Vec::new();
            let outcome = train_answerer(&mut model, &train_ex, &dev_ex, &tcfg, |r| {
                log.push(r.clone())
            })?;
            let dir = self.stage_dir(Stage::TrainAnswerer)?.join(&name);
            create_dir(&dir)?;
            write_json(&dir.join("checkpoint.json"), &model.to_checkpoint()?)?;
            write_jsonl(&dir.join("train_log.jsonl"), &log)?;
            outputs.push(format!("{name}/checkpoint.json"));
            outputs.push(format!("{name}/train_log.jsonl"));
            let best = log.get(outcome.best_epoch.saturating_sub(1));
            summary.insert(
                name,
                json!({
                    "train_examples": train_ex.len(),
                    "dev_examples": dev_ex.len(),
                    "epochs": log.len(),
                    "best_epoch": outcome.best_epoch,
                    "best_dev_hits": best.and_then(|r| r.dev_mrr),
                    "final_train_loss": log.last().map(|r| r.train_loss),
                }),
            );
        }
        let summary = serde_json::Value::Object(summary);
        let dir = self.stage_dir(Stage::TrainAnswerer)?;
        write_json(&dir.join("summary.json"), &summary)?;
        outputs.push("summary.json".into());
        let outs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.finish(Stage::TrainAnswerer, &outs)?;
        Ok(summary)
    }

    /// Test-split report: ranking metrics, coverage, and answer selection
    /// per regime.
    fn evaluate(&self) -> Result<serde_json::Value> {
        let corpus = self.load_corpus()?;
        let parts = self.load_partitions(&corpus.kg)?;
        let ranked = self.load_ranked(&corpus.kg)?;
        let c = &self.config;
        let test = &corpus.splits.test;
        let lists: Vec<(String, Vec<u8>)> = test
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    ranked.get(id).map(RankedList::labels).unwrap_or_default(),
                )
            })
            .collect();
        let mut report =
            MetricReport::from_rankings(&lists, &c.evaluate.recall_k, c.evaluate.mrr_mode)?;
        let answerable: Vec<&QuestionRecord> = test
            .iter()
            .map(|id| corpus.question(id))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|q| q.answerable)
            .collect();
        if !answerable.is_empty() {
            let covered = answerable
                .iter()
                .filter(|q| {
                    parts
                        .get(&q.id)
                        .is_some_and(|s| s.iter().any(|s| s.label == 1))
                })
                .count();
            report.coverage = Some(covered as f64 / answerable.len() as f64);
        }
        let mut predictions = Vec::new();
        let mut cache = HashMap::new();
        for regime in c.merge.regimes() {
            let name = regime.name();
            let ckpt: Checkpoint = read_json(
                &self
                    .run
                    .input(Stage::TrainAnswerer, &format!("{name}/checkpoint.json"))?,
            )?;
            let model = AnswererModel::from_checkpoint(&ckpt)?;
            let merged = self.load_merged(&corpus.kg, regime)?;
            let examples = Self::answer_examples(&corpus, test, &merged, &model.vocab, &mut cache)?;
            let classified = examples
                .par_iter()
                .map(|ex| model.classify_nodes(ex))
                .collect::<Result<Vec<_>>>()?;
            let by_id: HashMap<&str, usize> = examples
                .iter()
                .enumerate()
                .map(|(i, e)| (e.question_id.as_str(), i))
                .collect();
            let mut outcomes = Vec::new();
            let (mut containing, mut violations) = (0usize, 0usize);
            for q in &answerable {
                let outcome = match by_id.get(q.id.as_str()) {
                    Some(&i) => {
                        let (ex, preds) = (&examples[i], &classified[i]);
                        let sel = select_answers(preds, model.config.threshold)?;
                        let contains = ex.contains_answer();
                        containing += usize::from(contains);
                        let hit = sel.set.intersection(&q.answers).next().is_some()
                            || q.answers.contains(&sel.top1);
                        violations += usize::from(hit && !contains);
                        for p in preds {
                            predictions.push(PredictionLine {
                                question_id: q.id.clone(),
                                regime: name.clone(),
                                node: corpus.kg.entity_name(p.node).to_string(),
                                probability: p.probability,
                                selected: p.selected,
                                top1: p.node == sel.top1,
                            });
                        }
                        AnswerOutcome {
                            top1: Some(sel.top1),
                            predicted: sel.set,
                            gold: q.answers.clone(),
                        }
                    }
                    None => AnswerOutcome {
                        top1: None,
                        predicted: BTreeSet::new(),
                        gold: q.answers.clone(),
                    },
                };
                outcomes.push(outcome);
            }
            report.answer_selection.push(AnswerSelectionReport {
                regime: name,
                metrics: hits_precision_recall_f1(&outcomes),
                containing,
                containment_violations: violations,
            });
        }
        let dir = self.stage_dir(Stage::Evaluate)?;
        report.write(&dir)?;
        write_predictions(&dir.join("predictions.jsonl"), &predictions)?;
        self.finish(
            Stage::Evaluate,
            &[
                "report.json",
                "report.txt",
                "recall_curve.csv",
                "predictions.jsonl",
            ],
        )?;
        Ok(serde_json::to_value(&report)?)
    }
}

fn question_input(
    corpus: &Corpus,
    id: &str,
    vocab: &Vocabulary,
    cache: &mut HashMap<String, Arc<ModelInput>>,
) -> Result<Arc<ModelInput>> {
    if let Some(q) = cache.get(id) {
        return Ok(q.clone());
    }
    let q = Arc::new(ModelInput::question(corpus.question(id)?, vocab));
    cache.insert(id.to_string(), q.clone());
    Ok(q)
}
