//! Command-line front end: `train`, `embed`, `probe`, `score`, `retention`,
//! `reproduce`, and `synth` for a toy dataset.
//!
//! Exit codes: 0 on success, 1 for user or configuration errors, 2 when the
//! numbers themselves fail (a non-finite loss).

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use vgcl_core::{Measure, Orientation};

pub use commands::{Summary, DETERMINISTIC_OUTPUTS};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "vgcl", version, about = "Variational graph contrastive learning")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of a config file or preset.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Log zero seconds per epoch so identical runs write identical files.
    #[arg(long)]
    pub strict: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg.strict |= self.strict;
        cfg.validate()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and keep the epoch with the lowest contrastive loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory, or a directory holding one per dataset name.
        #[arg(long, env = "VGCL_DATA_DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from this checkpoint directory instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write the encoder output of the unaugmented graph.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "VGCL_DATA_DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit logistic-regression probes on repeated random splits.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "VGCL_DATA_DIR")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Weight samples averaged per embedding.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Z-score features with train-split statistics first.
        #[arg(long)]
        standardize: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compute per-node uncertainty scores.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "VGCL_DATA_DIR")]
        data: Option<PathBuf>,
        /// `all`, or a comma-separated list of cmds, astd, astd_norm, psfv,
        /// expected_likelihood, waic.
        #[arg(long, default_value = "all")]
        measure: String,
        #[arg(long, default_value_t = vgcl_core::uncertainty::DEFAULT_DRAWS)]
        draws: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Cumulative test accuracy with nodes admitted most-certain first.
    Retention {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        probe_result: PathBuf,
        #[arg(long, default_value = "cmds")]
        measure: String,
        /// Expected orientation of the score column; a mismatch is an error.
        #[arg(long)]
        orientation: Option<String>,
        /// Probe split whose test nodes and correctness are used.
        #[arg(long, default_value_t = 0)]
        split: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write a planted-partition graph in the dataset format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Dataset name recorded in meta.json.
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 300)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        features: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, probe, score and build retention curves with a shipped preset.
    Reproduce {
        #[arg(long, required_unless_present = "config")]
        dataset: Option<String>,
        /// infonce, vi or vgcl.
        #[arg(long, required_unless_present = "config")]
        model: Option<String>,
        /// Use this config instead of a preset.
        #[arg(long, conflicts_with_all = ["dataset", "model"])]
        config: Option<PathBuf>,
        #[arg(long, env = "VGCL_DATA_DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    use commands::*;
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            cmd_train(TrainArgs {
                config: cfg,
                data: data.as_deref(),
                out: &out,
                resume: resume.as_deref(),
            })?;
        }
        Command::Embed {
            checkpoint,
            data,
            samples,
            seed,
            out,
        } => {
            cmd_embed(EmbedArgs {
                checkpoint: &checkpoint,
                data: data.as_deref(),
                samples,
                seed,
                out: &out,
            })?;
        }
        Command::Probe {
            checkpoint,
            data,
            runs,
            samples,
            standardize,
            seed,
            out,
        } => {
            cmd_probe(ProbeArgs {
                checkpoint: &checkpoint,
                data: data.as_deref(),
                runs,
                samples,
                standardize,
                seed,
                out: &out,
            })?;
        }
        Command::Score {
            checkpoint,
            data,
            measure,
            draws,
            seed,
            out,
        } => {
            let measures = parse_measures(&measure)?;
            cmd_score(ScoreArgs {
                checkpoint: &checkpoint,
                data: data.as_deref(),
                measures: &measures,
                all: measure == "all",
                draws,
                seed,
                out: &out,
            })?;
        }
        Command::Retention {
            scores,
            probe_result,
            measure,
            orientation,
            split,
            out,
        } => {
            let measure: Measure = measure.parse()?;
            let orientation = orientation.map(|o| o.parse::<Orientation>()).transpose()?;
            let curve = cmd_retention(RetentionArgs {
                scores: &scores,
                probe_result: &probe_result,
                measure,
                orientation,
                split,
                out: &out,
            })?;
            println!(
                "{measure}: accuracy {:.2} at 10% retention, {:.2} overall",
                100.0 * curve.accuracy_at(0.1),
                100.0 * curve.points.last().expect("curve is non-empty").1
            );
        }
        Command::Synth {
            out,
            name,
            nodes,
            classes,
            features,
            seed,
        } => {
            let mut g = vgcl_core::synthetic::PlantedPartition {
                nodes,
                classes,
                features,
                seed,
                ..Default::default()
            }
            .generate();
            g.name = name;
            vgcl_core::save_dataset(&g, &out)?;
            println!("{} nodes, {} edges written to {}", g.num_nodes(), g.adjacency().num_edges(), out.display());
        }
        Command::Reproduce {
            dataset,
            model,
            config,
            data,
            out,
            runs,
            draws,
            overrides,
        } => {
            let mut cfg = match (config, dataset, model) {
                (Some(path), _, _) => RunConfig::load(&path)?,
                (None, Some(d), Some(m)) => RunConfig::preset(&d, &m)?,
                _ => bail!("reproduce needs --dataset and --model, or --config"),
            };
            if let Some(r) = runs {
                cfg.probe_runs = r;
            }
            if let Some(d) = draws {
                cfg.draws = d;
            }
            overrides.apply(&mut cfg)?;
            let out = out.unwrap_or_else(|| {
                let model = match cfg.mode {
                    vgcl_core::Mode::Infonce => "infonce",
                    vgcl_core::Mode::ViInfonce => "vi",
                    vgcl_core::Mode::Vgcl => "vgcl",
                };
                PathBuf::from("out").join(format!("{}_{model}", cfg.dataset))
            });
            cmd_reproduce(ReproduceArgs {
                config: cfg,
                data: data.as_deref(),
                out: &out,
            })?;
        }
    }
    Ok(())
}

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<vgcl_core::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        2
    } else {
        1
    }
}
