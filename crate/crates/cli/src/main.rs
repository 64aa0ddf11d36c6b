use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ksgrank::pipeline::{Pipeline, PipelineConfig, Stage, StageReport};
use ksgrank::{synthetic, verify};

#[derive(Parser, Debug)]
#[command(
    name = "ksgrank",
    version,
    about = "Knowledge-subgraph ranking pipeline"
)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding stage outputs and the manifest.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "KSGRANK_SEED")]
    seed: Option<u64>,
    /// Overrides the config worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load triples, questions, names and embeddings; assign splits.
    Ingest,
    /// k-hop subgraph around each question's topic entities.
    Retrieve,
    /// Split each subgraph into labelled sub-KSGs.
    Partition,
    /// Sample training pairs for the ranker.
    MakePairs,
    /// Train the sub-KSG ranker.
    TrainRanker,
    /// Score and sort every question's sub-KSGs.
    Rank,
    /// Merge the top-ranked sub-KSGs per question.
    Merge,
    /// Train the answer selector on merged graphs.
    TrainAnswerer,
    /// Ranking and answer-selection metrics on the test split.
    Evaluate,
    /// Every stage in order.
    Run,
    /// Finite-difference check of every differentiable component.
    Gradcheck,
    /// All built-in oracles; exits non-zero on any failure.
    Selftest {
        /// Also run the pipeline twice from `--config` and compare reports.
        #[arg(long)]
        with_pipeline: bool,
    },
    /// Write the synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synthetic::DEFAULT_SEED)]
        data_seed: u64,
        #[arg(long, default_value_t = synthetic::DEFAULT_WORD_DIM)]
        word_dim: usize,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Retrieve => Stage::Retrieve,
            Command::Partition => Stage::Partition,
            Command::MakePairs => Stage::MakePairs,
            Command::TrainRanker => Stage::TrainRanker,
            Command::Rank => Stage::Rank,
            Command::Merge => Stage::Merge,
            Command::TrainAnswerer => Stage::TrainAnswerer,
            Command::Evaluate => Stage::Evaluate,
            _ => return None,
        })
    }
}

impl Cli {
    fn load_config(&self) -> Result<PipelineConfig> {
        let path = self
            .config
            .as_deref()
            .context("this command needs --config")?;
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(w) = self.workers {
            sets.push(format!("workers={w}"));
        }
        Ok(PipelineConfig::load_with_overrides(path, &sets)?)
    }
}

fn print_report(r: &StageReport) {
    println!("{}: {}", r.stage, r.summary);
}

fn print_evaluation(run_dir: &Path) -> Result<()> {
    let p = run_dir.join(Stage::Evaluate.name()).join("report.txt");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    print!("{text}");
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let cases = verify::gradcheck_suite()?;
    let mut ok = true;
    for c in &cases {
        let pass = c.passes();
        ok &= pass;
        println!(
            "{} {:<52} checked {:>5}  max rel error {:.2e}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            c.report.checked,
            c.report.max_rel_error
        );
    }
    let neg = verify::negative_control()?;
    let detected = !neg.passes(verify::GRAD_TOL);
    ok &= detected;
    println!(
        "{} negative control (gradient x1.01) error {:.2e}",
        if detected { "PASS" } else { "FAIL" },
        neg.max_rel_error
    );
    Ok(ok)
}

fn pipeline_twice(cfg: &PipelineConfig, run_dir: &Path) -> verify::CheckResult {
    let start = std::time::Instant::now();
    let outcome = (|| -> Result<(bool, String)> {
        let mut reports = Vec::new();
        for name in ["a", "b"] {
            let dir = run_dir.join(name);
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            Pipeline::open(cfg.clone(), &dir)?.run_all()?;
            reports.push(std::fs::read(dir.join("evaluate/report.json"))?);
        }
        Ok((
            reports[0] == reports[1],
            format!(
                "reports under {} identical: {}",
                run_dir.display(),
                reports[0] == reports[1]
            ),
        ))
    })();
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    verify::CheckResult {
        name: "pipeline determinism".into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(stage) = cli.command.stage() {
        let p = Pipeline::open(cli.load_config()?, &cli.run_dir)?;
        print_report(&p.run_stage(stage)?);
        if stage == Stage::Evaluate {
            print_evaluation(&cli.run_dir)?;
        }
        return Ok(true);
    }
    match &cli.command {
        Command::Run => {
            let p = Pipeline::open(cli.load_config()?, &cli.run_dir)?;
            for r in p.run_all()? {
                print_report(&r);
            }
            print_evaluation(&cli.run_dir)?;
            Ok(true)
        }
        Command::Gradcheck => gradcheck(),
        Command::Selftest { with_pipeline } => {
            let pipeline_cfg = if *with_pipeline {
                Some(cli.load_config()?)
            } else {
                None
            };
            let mut results = verify::run_all();
            if let Some(cfg) = pipeline_cfg {
                results.push(pipeline_twice(&cfg, &cli.run_dir));
            }
            for r in &results {
                println!(
                    "{} {:<44} {:>7.2}s  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
            }
            Ok(results.iter().all(|r| r.passed))
        }
        Command::Synth {
            out,
            data_seed,
            word_dim,
        } => {
            if *word_dim == 0 {
                bail!("--word-dim must be positive");
            }
            synthetic::generate(*data_seed, *word_dim).write(out)?;
            println!("wrote synthetic dataset to {}", out.display());
            Ok(true)
        }
        _ => unreachable!("stage commands handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
