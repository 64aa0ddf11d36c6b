//! Ranking metrics (Recall@K, MRR), coverage, and answer-selection metrics
//! (Hits, macro precision/recall/F1).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A ranked list reduced to its 0/1 labels in rank order.
pub type Labels = [u8];

pub fn has_positive(labels: &Labels) -> bool {
    labels.contains(&1)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("K must be >= 1"));
    }
    Ok(())
}

fn hit_at_k(labels: &Labels, k: usize) -> bool {
    labels.iter().take(k).any(|&l| l == 1)
}

/// Fraction of questions with a positive in the top `k`, over questions that
/// have at least one positive. `0` when no question qualifies.
pub fn recall_at_k(lists: &[&Labels], k: usize) -> Result<f64> {
    check_k(k)?;
    let kept: Vec<&&Labels> = lists.iter().filter(|l| has_positive(l)).collect();
    if kept.is_empty() {
        return Ok(0.0);
    }
    Ok(kept.iter().filter(|l| hit_at_k(l, k)).count() as f64 / kept.len() as f64)
}

/// Same numerator as [`recall_at_k`] over every question.
pub fn recall_at_k_unfiltered(lists: &[&Labels], k: usize) -> Result<f64> {
    check_k(k)?;
    if lists.is_empty() {
        return Ok(0.0);
    }
    Ok(lists.iter().filter(|l| hit_at_k(l, k)).count() as f64 / lists.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MrrMode {
    /// Reciprocal rank of the first positive.
    #[default]
    First,
    /// Mean reciprocal rank over all positives of a question.
    All,
}

impl std::str::FromStr for MrrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(MrrMode::First),
            "all" => Ok(MrrMode::All),
            other => Err(Error::Config(format!(
                "unknown MRR mode `{other}` (first | all)"
            ))),
        }
    }
}

/// `None` when the list has no positive.
pub fn reciprocal_rank(labels: &Labels, mode: MrrMode) -> Option<f64> {
    let ranks = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1)
        .map(|(i, _)| 1.0 / (i + 1) as f64);
    match mode {
        MrrMode::First => ranks.into_iter().next(),
        MrrMode::All => {
            let v: Vec<f64> = ranks.collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }
    }
}

/// Mean reciprocal rank over questions with at least one positive.
pub fn mrr(lists: &[&Labels], mode: MrrMode) -> f64 {
    let rr: Vec<f64> = lists
        .iter()
        .filter_map(|l| reciprocal_rank(l, mode))
        .collect();
    if rr.is_empty() {
        0.0
    } else {
        rr.iter().sum::<f64>() / rr.len() as f64
    }
}

/// One question's answer-selection result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerOutcome<T: Ord> {
    pub top1: Option<T>,
    pub predicted: BTreeSet<T>,
    pub gold: BTreeSet<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerMetrics {
    /// Top-1 prediction is a gold answer.
    pub hits: f64,
    /// Thresholded set intersects the gold set.
    pub hits_set: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub questions: usize,
}

/// Per-question precision, recall and F1; an empty prediction has P = 0.
pub fn set_prf<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> (f64, f64, f64) {
    let tp = predicted.intersection(gold).count() as f64;
    let p = if predicted.is_empty() {
        0.0
    } else {
        tp / predicted.len() as f64
    };
    let r = if gold.is_empty() {
        0.0
    } else {
        tp / gold.len() as f64
    };
    let f = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f)
}

/// Hits@1 and macro-averaged P/R/F1 over questions with a non-empty gold set.
pub fn hits_precision_recall_f1<T: Ord>(outcomes: &[AnswerOutcome<T>]) -> AnswerMetrics {
    let scored: Vec<&AnswerOutcome<T>> = outcomes.iter().filter(|o| !o.gold.is_empty()).collect();
    let n = scored.len();
    if n == 0 {
        return AnswerMetrics::default();
    }
    let mut m = AnswerMetrics {
        questions: n,
        ..Default::default()
    };
    for o in &scored {
        if o.top1.as_ref().is_some_and(|t| o.gold.contains(t)) {
            m.hits += 1.0;
        }
        if o.predicted.intersection(&o.gold).next().is_some() {
            m.hits_set += 1.0;
        }
        let (p, r, f) = set_prf(&o.predicted, &o.gold);
        m.precision += p;
        m.recall += r;
        m.f1 += f;
    }
    let nf = n as f64;
    m.hits /= nf;
    m.hits_set /= nf;
    m.precision /= nf;
    m.recall /= nf;
    m.f1 /= nf;
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    /// Over questions with at least one positive sub-KSG.
    pub filtered: f64,
    /// Over every ranked question.
    pub unfiltered: f64,
}

/// Per-question ranking record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecordMetrics {
    pub question_id: String,
    pub candidates: usize,
    pub first_positive_rank: Option<usize>,
    pub reciprocal_rank: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSelectionReport {
    /// Graph the answerer read: `top{k}` or `full`.
    pub regime: String,
    pub metrics: AnswerMetrics,
    /// Questions whose merged graph contains a gold answer.
    pub containing: usize,
    /// Questions where a gold answer was selected but the merged graph held
    /// none; always 0 for a sound selector.
    pub containment_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub questions: usize,
    pub excluded: usize,
    pub mrr_mode: MrrMode,
    pub mrr: f64,
    pub recall: Vec<RecallPoint>,
    pub coverage: Option<f64>,
    pub answer_selection: Vec<AnswerSelectionReport>,
    pub per_question: Vec<QuestionRecordMetrics>,
}

impl MetricReport {
    /// Ranking part of the report from `(question id, labels in rank order)`.
    pub fn from_rankings(lists: &[(String, Vec<u8>)], ks: &[usize], mode: MrrMode) -> Result<Self> {
        let labels: Vec<&Labels> = lists.iter().map(|(_, l)| l.as_slice()).collect();
        let mut ks: Vec<usize> = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        let recall = ks
            .iter()
            .map(|&k| {
                Ok(RecallPoint {
                    k,
                    filtered: recall_at_k(&labels, k)?,
                    unfiltered: recall_at_k_unfiltered(&labels, k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let per_question = lists
            .iter()
            .map(|(id, l)| QuestionRecordMetrics {
                question_id: id.clone(),
                candidates: l.len(),
                first_positive_rank: l.iter().position(|&x| x == 1).map(|p| p + 1),
                reciprocal_rank: reciprocal_rank(l, mode),
            })
            .collect();
        Ok(MetricReport {
            questions: lists.len(),
            excluded: labels.iter().filter(|l| !has_positive(l)).count(),
            mrr_mode: mode,
            mrr: mrr(&labels, mode),
            recall,
            coverage: None,
            answer_selection: Vec::new(),
            per_question,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "questions        {}", self.questions);
        let _ = writeln!(
            s,
            "excluded         {} (no positive sub-KSG)",
            self.excluded
        );
        if let Some(c) = self.coverage {
            let _ = writeln!(s, "coverage         {c:.4}");
        }
        let mode = match self.mrr_mode {
            MrrMode::First => "first",
            MrrMode::All => "all",
        };
        let _ = writeln!(s, "MRR ({mode})       {:.4}", self.mrr);
        for p in &self.recall {
            let _ = writeln!(
                s,
                "R@{:<4}           {:.4}  (unfiltered {:.4})",
                p.k, p.filtered, p.unfiltered
            );
        }
        for a in &self.answer_selection {
            let m = &a.metrics;
            let _ = writeln!(
                s,
                "{:<7} Hits {:.4}  set-Hits {:.4}  P {:.4}  R {:.4}  F1 {:.4}  contains {}/{}  violations {}",
                a.regime, m.hits, m.hits_set, m.precision, m.recall, m.f1, a.containing, m.questions, a.containment_violations
            );
        }
        s
    }

    pub fn recall_csv(&self) -> String {
        let mut s = String::from("k,recall,recall_unfiltered\n");
        for p in &self.recall {
            let _ = writeln!(s, "{},{},{}", p.k, p.filtered, p.unfiltered);
        }
        s
    }

    /// Writes `report.json`, `report.txt` and `recall_curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        for (name, body) in [
            ("report.json", json + "\n"),
            ("report.txt", self.to_text()),
            ("recall_curve.csv", self.recall_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
