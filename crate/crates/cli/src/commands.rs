//! Command implementations. Each writes fixed file names under its output
//! directory and returns what it wrote, so tests can drive it directly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use vgcl_core::eval::{evaluate, extract_embeddings, read_report, write_embeddings, write_report};
use vgcl_core::rng::{stream, Stream};
use vgcl_core::train::{self, TRAINLOG_FILE};
use vgcl_core::uncertainty::{self, collect_draws, read_scores, retention_curve, write_retention, write_scores};
use vgcl_core::{load_dataset, Checkpoint, EmbeddingSet, Error, EvalReport, Measure, Orientation, Params, ScoreVector, SparseGraph, TrainLog};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const PROBE_FILE: &str = "probe_results.json";
pub const SCORES_FILE: &str = "scores.tsv";
pub const RETENTION_FILE: &str = "retention.csv";

/// `dir` itself when it holds a dataset, otherwise `dir/name`.
pub fn dataset_dir(data: &Path, name: &str) -> PathBuf {
    if data.join("meta.json").exists() {
        data.to_path_buf()
    } else {
        data.join(name)
    }
}

pub fn load_graph(data: Option<&Path>, name: &str) -> Result<SparseGraph> {
    let data = data.context("no dataset directory: pass --data or set VGCL_DATA_DIR")?;
    let dir = dataset_dir(data, name);
    let g = load_dataset(&dir).with_context(|| format!("cannot load dataset {name} from {}", dir.display()))?;
    log::info!(
        "{}: {} nodes, {} edges, {} features, {} classes",
        g.name,
        g.num_nodes(),
        g.adjacency().num_edges(),
        g.num_features(),
        g.num_classes()
    );
    Ok(g)
}

fn load_checkpoint(dir: &Path, g: &SparseGraph) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?;
    ensure!(
        ckpt.meta.num_nodes == g.num_nodes(),
        "checkpoint {} was trained on {} nodes but the dataset has {}",
        dir.display(),
        ckpt.meta.num_nodes,
        g.num_nodes()
    );
    Ok(ckpt)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub struct TrainArgs<'a> {
    pub config: RunConfig,
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
}

pub fn cmd_train(args: TrainArgs) -> Result<TrainLog> {
    let g = load_graph(args.data, &args.config.dataset)?;
    let tc = args.config.train_config()?;
    create_dir(args.out)?;
    fs::write(args.out.join(CONFIG_FILE), args.config.to_json())
        .with_context(|| format!("cannot write {}", args.out.join(CONFIG_FILE).display()))?;
    let outcome = match args.resume {
        Some(from) => train::resume(&g, &tc, from, Some(args.out))?,
        None => train::train(&g, &tc, Some(args.out))?,
    };
    let best = outcome.log.best();
    println!(
        "best epoch {} of {}: infonce {:.6}; checkpoint in {}",
        best.epoch,
        tc.epochs,
        best.infonce,
        args.out.display()
    );
    Ok(outcome.log)
}

pub struct EmbedArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub samples: usize,
    pub seed: Option<u64>,
    pub out: &'a Path,
}

fn embeddings(ckpt: &Checkpoint, g: &SparseGraph, samples: usize, seed: Option<u64>) -> Result<EmbeddingSet> {
    let seed = seed.unwrap_or(ckpt.meta.config.seed);
    let mut rng = stream(seed, Stream::Embeddings);
    let e = extract_embeddings(&ckpt.params, g, samples, &mut rng)?;
    let samples = if matches!(ckpt.params, Params::Variational(_)) { samples } else { 1 };
    Ok(EmbeddingSet {
        embeddings: e,
        samples,
        source: ckpt.meta.config_hash.clone(),
    })
}

pub fn cmd_embed(args: EmbedArgs) -> Result<EmbeddingSet> {
    let meta = Checkpoint::load(args.checkpoint)?.meta;
    let g = load_graph(args.data, &meta.dataset)?;
    let ckpt = load_checkpoint(args.checkpoint, &g)?;
    let set = embeddings(&ckpt, &g, args.samples, args.seed)?;
    create_dir(args.out)?;
    write_embeddings(&args.out.join(EMBEDDINGS_FILE), &set.embeddings)?;
    Ok(set)
}

pub struct ProbeArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub runs: usize,
    pub samples: usize,
    pub standardize: bool,
    pub seed: Option<u64>,
    pub out: &'a Path,
}

pub fn cmd_probe(args: ProbeArgs) -> Result<EvalReport> {
    let meta = Checkpoint::load(args.checkpoint)?.meta;
    let g = load_graph(args.data, &meta.dataset)?;
    let ckpt = load_checkpoint(args.checkpoint, &g)?;
    let set = embeddings(&ckpt, &g, args.samples, args.seed)?;
    let report = evaluate(&set, &g, args.runs, args.standardize)?;
    create_dir(args.out)?;
    write_embeddings(&args.out.join(EMBEDDINGS_FILE), &set.embeddings)?;
    write_report(&args.out.join(PROBE_FILE), &report)?;
    println!(
        "test accuracy {:.2} ± {:.2} over {} runs",
        report.mean, report.stderr, report.runs
    );
    Ok(report)
}

/// Parses `all` or a comma-separated list of measure names.
pub fn parse_measures(s: &str) -> Result<Vec<Measure>> {
    if s == "all" {
        return Ok(Measure::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.trim().parse::<Measure>()?)).collect()
}

pub struct ScoreArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub measures: &'a [Measure],
    /// Whether the measures came from `all`, in which case measures that need
    /// a weight distribution are skipped for deterministic encoders.
    pub all: bool,
    pub draws: usize,
    pub seed: Option<u64>,
    pub out: &'a Path,
}

pub fn cmd_score(args: ScoreArgs) -> Result<Vec<ScoreVector>> {
    let meta = Checkpoint::load(args.checkpoint)?.meta;
    let g = load_graph(args.data, &meta.dataset)?;
    let ckpt = load_checkpoint(args.checkpoint, &g)?;
    let cfg = &ckpt.meta.config;
    let seed = args.seed.unwrap_or(cfg.seed);
    let draws = collect_draws(&ckpt.params, &g, &cfg.augment, &cfg.prior, args.draws, seed)?;
    let mut scores = Vec::with_capacity(args.measures.len());
    for &m in args.measures {
        match uncertainty::score(m, &draws) {
            Ok(s) => scores.push(s),
            Err(e @ Error::NotApplicable { .. }) if args.all => log::warn!("skipping {m}: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    create_dir(args.out)?;
    write_scores(&args.out.join(SCORES_FILE), &scores)?;
    Ok(scores)
}

pub struct RetentionArgs<'a> {
    pub scores: &'a Path,
    pub probe_result: &'a Path,
    pub measure: Measure,
    /// Orientation the caller expects the score column to have.
    pub orientation: Option<Orientation>,
    pub split: usize,
    pub out: &'a Path,
}

pub fn cmd_retention(args: RetentionArgs) -> Result<uncertainty::RetentionCurve> {
    let scores = read_scores(args.scores)?;
    let score = scores
        .iter()
        .find(|s| s.measure == args.measure)
        .with_context(|| format!("{} has no {} column", args.scores.display(), args.measure))?;
    if let Some(o) = args.orientation {
        if o != score.orientation {
            bail!(
                "{} in {} is {} but {} was requested",
                args.measure,
                args.scores.display(),
                score.orientation.as_str(),
                o.as_str()
            );
        }
    }
    let report = read_report(args.probe_result)?;
    let split = report.splits.get(args.split).with_context(|| {
        format!(
            "{} has {} splits, no split {}",
            args.probe_result.display(),
            report.splits.len(),
            args.split
        )
    })?;
    let curve = retention_curve(score, &split.test_nodes, &split.correct)?;
    create_dir(args.out)?;
    write_retention(&args.out.join(RETENTION_FILE), &curve)?;
    Ok(curve)
}

pub struct ReproduceArgs<'a> {
    pub config: RunConfig,
    pub data: Option<&'a Path>,
    pub out: &'a Path,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub dataset: String,
    pub mode: String,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub retention: Vec<(Measure, uncertainty::RetentionCurve)>,
}

impl Summary {
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {}: test accuracy {:.2} ± {:.2} over {} runs (best epoch {})",
            self.dataset, self.mode, self.report.mean, self.report.stderr, self.report.runs, self.best_epoch
        );
        if let Some((_, c)) = self.retention.iter().find(|(m, _)| *m == Measure::Cmds) {
            s.push_str(&format!(
                "; cmds retention at 10%: {:.2}, area {:.4}",
                100.0 * c.accuracy_at(0.1),
                c.area()
            ));
        }
        s
    }
}

/// Train, probe, score every applicable measure, then build retention curves
/// on the first probe split. `retention.csv` holds the CMDS curve and
/// `retention_<measure>.csv` every measure's.
pub fn cmd_reproduce(args: ReproduceArgs) -> Result<Summary> {
    let cfg = args.config;
    let out = args.out;
    let log = cmd_train(TrainArgs {
        config: cfg.clone(),
        data: args.data,
        out,
        resume: None,
    })?;
    let report = cmd_probe(ProbeArgs {
        checkpoint: out,
        data: args.data,
        runs: cfg.probe_runs,
        samples: cfg.embedding_samples,
        standardize: cfg.standardize,
        seed: None,
        out,
    })?;
    let scores = cmd_score(ScoreArgs {
        checkpoint: out,
        data: args.data,
        measures: &Measure::ALL,
        all: true,
        draws: cfg.draws,
        seed: None,
        out,
    })?;
    let split = &report.splits[0];
    let mut retention = Vec::new();
    for s in &scores {
        let curve = retention_curve(s, &split.test_nodes, &split.correct)?;
        write_retention(&out.join(format!("retention_{}.csv", s.measure)), &curve)?;
        if s.measure == Measure::Cmds {
            write_retention(&out.join(RETENTION_FILE), &curve)?;
        }
        retention.push((s.measure, curve));
    }
    let summary = Summary {
        dataset: cfg.dataset.clone(),
        mode: cfg.mode.as_str().to_string(),
        report,
        best_epoch: log.best_epoch,
        retention,
    };
    println!("{}", summary.line());
    Ok(summary)
}

/// Files `reproduce` writes that must match across identical strict runs.
pub const DETERMINISTIC_OUTPUTS: [&str; 4] = [TRAINLOG_FILE, RETENTION_FILE, PROBE_FILE, SCORES_FILE];
