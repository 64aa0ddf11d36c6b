use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ksgrank::pipeline::{Pipeline, PipelineConfig, RunDir, Stage};
use ksgrank::Error;
use serde_json::Value;

fn config(name: &str) -> PipelineConfig {
    PipelineConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(name),
    )
    .unwrap()
}

fn run(p: &Pipeline, stages: &[Stage]) {
    for &s in stages {
        p.run_stage(s).unwrap();
    }
}

fn read(dir: &Path, stage: Stage, name: &str) -> Vec<u8> {
    std::fs::read(RunDir::new(dir).file(stage, name)).unwrap()
}

#[test]
fn stage_without_upstream_output_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::open(config("education.toml"), tmp.path()).unwrap();
    match p.run_stage(Stage::Retrieve) {
        Err(Error::MissingStageInput { producer, .. }) => assert_eq!(producer, "ingest"),
        other => panic!("expected a missing-input error, got {other:?}"),
    }
    p.run_stage(Stage::Ingest).unwrap();
    match p.run_stage(Stage::Partition) {
        Err(Error::MissingStageInput { producer, path }) => {
            assert_eq!(producer, "retrieve");
            assert!(path.ends_with("retrieve/ksg.jsonl"), "{}", path.display());
        }
        other => panic!("expected a missing-input error, got {other:?}"),
    }
}

#[test]
fn rerunning_a_stage_reproduces_its_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::open(config("synthetic.toml"), tmp.path()).unwrap();
    let stages = [
        Stage::Ingest,
        Stage::Retrieve,
        Stage::Partition,
        Stage::MakePairs,
    ];
    run(&p, &stages);
    let first: Vec<Vec<u8>> = [
        (Stage::Retrieve, "ksg.jsonl"),
        (Stage::Partition, "subksgs.jsonl"),
        (Stage::MakePairs, "train.jsonl"),
    ]
    .iter()
    .map(|&(s, n)| read(tmp.path(), s, n))
    .collect();
    let manifest = std::fs::read(tmp.path().join("manifest.json")).unwrap();
    run(&p, &stages);
    let again: Vec<Vec<u8>> = [
        (Stage::Retrieve, "ksg.jsonl"),
        (Stage::Partition, "subksgs.jsonl"),
        (Stage::MakePairs, "train.jsonl"),
    ]
    .iter()
    .map(|&(s, n)| read(tmp.path(), s, n))
    .collect();
    assert_eq!(first, again);
    assert_eq!(
        manifest,
        std::fs::read(tmp.path().join("manifest.json")).unwrap()
    );

    let m = RunDir::new(tmp.path()).read_manifest().unwrap().unwrap();
    let done: Vec<&str> = m.stages.keys().map(String::as_str).collect();
    assert_eq!(done, ["ingest", "make-pairs", "partition", "retrieve"]);
}

#[test]
fn run_directory_is_tied_to_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("education.toml");
    Pipeline::open(cfg.clone(), tmp.path()).unwrap();
    let other = PipelineConfig {
        seed: cfg.seed + 1,
        ..cfg.clone()
    };
    assert!(matches!(
        Pipeline::open(other, tmp.path()),
        Err(Error::Config(_))
    ));
    // the worker count does not change results, so it may differ
    let more_workers = PipelineConfig { workers: 2, ..cfg };
    Pipeline::open(more_workers, tmp.path()).unwrap();
}

#[test]
fn education_example_partition_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::open(config("education.toml"), tmp.path()).unwrap();
    run(&p, &[Stage::Ingest, Stage::Retrieve, Stage::Partition]);
    let text = String::from_utf8(read(tmp.path(), Stage::Partition, "subksgs.jsonl")).unwrap();
    let recs: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let labels: Vec<(String, u64)> = recs
        .iter()
        .map(|r| {
            (
                r["anchor"].as_str().unwrap().to_string(),
                r["label"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(
        labels,
        [("m.0n1dd_q".to_string(), 1), ("m.076hxb3".to_string(), 0)]
    );
}

#[test]
fn tfidf_negatives_avoid_answer_subgraphs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config("synthetic.toml");
    cfg.negatives.mode = ksgrank::pipeline::NegativeMode::Tfidf;
    let p = Pipeline::open(cfg, tmp.path()).unwrap();
    run(
        &p,
        &[
            Stage::Ingest,
            Stage::Retrieve,
            Stage::Partition,
            Stage::MakePairs,
        ],
    );
    let summary: Value =
        serde_json::from_slice(&read(tmp.path(), Stage::MakePairs, "summary.json")).unwrap();
    assert_eq!(summary["mode"], "tfidf");
    let pos = summary["positives"].as_u64().unwrap();
    let neg = summary["negatives"].as_u64().unwrap();
    assert!(pos > 0 && neg == pos, "{summary}");

    let lines = |stage, name| -> Vec<Value> {
        String::from_utf8(read(tmp.path(), stage, name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let mut nodes: HashMap<(String, u64), Vec<String>> = HashMap::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for r in lines(Stage::Partition, "subksgs.jsonl") {
        let q = r["question_id"].as_str().unwrap().to_string();
        let i = seen.entry(q.clone()).or_insert(0);
        let ns = r["nodes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|n| n.as_str().unwrap().to_string());
        nodes.insert((q, *i), ns.collect());
        *i += 1;
    }
    let answers: HashMap<String, Vec<String>> = lines(Stage::Ingest, "questions.jsonl")
        .iter()
        .map(|q| {
            let a = q["answers"]
                .as_array()
                .unwrap()
                .iter()
                .map(|n| n.as_str().unwrap().to_string());
            (q["id"].as_str().unwrap().to_string(), a.collect())
        })
        .collect();
    let mut borrowed = 0;
    for pair in lines(Stage::MakePairs, "train.jsonl") {
        if pair["label"] != 0 {
            continue;
        }
        let q = pair["question_id"].as_str().unwrap();
        let from = pair["subksg"]["question_id"].as_str().unwrap().to_string();
        if from != q {
            borrowed += 1;
        }
        let ns = &nodes[&(from, pair["subksg"]["index"].as_u64().unwrap())];
        assert!(
            answers[q].iter().all(|a| !ns.contains(a)),
            "negative for {q} holds an answer"
        );
    }
    assert!(borrowed > 0, "negatives should come from the shared pool");
}

#[test]
fn full_run_writes_every_declared_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config("synthetic.toml");
    cfg.ranker_training.max_epochs = 2;
    cfg.answerer_training.max_epochs = 2;
    Pipeline::open(cfg, tmp.path()).unwrap().run_all().unwrap();
    let m = RunDir::new(tmp.path()).read_manifest().unwrap().unwrap();
    assert_eq!(m.stages.len(), Stage::ALL.len());
    assert!(m.stages["ingest"]
        .outputs
        .contains(&"entity_names.tsv".to_string()));
    for (stage, entry) in &m.stages {
        let stage: Stage = stage.parse().unwrap();
        assert!(entry.outputs.len() >= 2, "{stage:?}");
        for o in &entry.outputs {
            let p: PathBuf = RunDir::new(tmp.path()).file(stage, o);
            assert!(p.exists(), "{} listed but missing", p.display());
        }
    }
    let csv = std::fs::read_to_string(tmp.path().join("evaluate/recall_curve.csv")).unwrap();
    let recalls: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(recalls.len(), 5);
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]), "{recalls:?}");
}
