//! Full-batch training with model selection by minimum contrastive loss.
//!
//! Each epoch draws one pair of views, evaluates the objective, and takes a
//! single Adam step. The epoch whose contrastive loss is lowest is kept; its
//! checkpoint stores the pre-update state so that resuming from it replays
//! that epoch exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{make_views, AugmentConfig};
use crate::checkpoint::{BestSoFar, Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::model::{init_params, EncoderConfig, ParamKind};
use crate::ndiff::{AdamState, DenseMatrix};
use crate::objective::{total_loss, PriorConfig};
use crate::rng::{self, Stream, StreamPos};

pub const TRAINLOG_FILE: &str = "trainlog.csv";
/// Subdirectory of the output directory holding the final-epoch state.
pub const LAST_DIR: &str = "last";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Deterministic weights, contrastive loss only.
    Infonce,
    /// Gaussian weights with a KL term.
    ViInfonce,
    /// Gaussian weights with a KL term and hyperpriors.
    Vgcl,
}

impl Mode {
    pub fn param_kind(self) -> ParamKind {
        match self {
            Mode::Infonce => ParamKind::Deterministic,
            Mode::ViInfonce | Mode::Vgcl => ParamKind::Variational,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Infonce => "infonce",
            Mode::ViInfonce => "vi_infonce",
            Mode::Vgcl => "vgcl",
        }
    }
}

fn default_dim() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f64,
    /// Monte Carlo weight samples per step.
    pub samples: usize,
    pub augment: AugmentConfig,
    pub prior: PriorConfig,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub hidden: usize,
    #[serde(default = "default_dim")]
    pub out: usize,
    #[serde(default = "default_dim")]
    pub proj_hidden: usize,
    /// Log zero wall-clock time so repeated runs produce identical files.
    #[serde(default)]
    pub strict: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("training config", "epochs must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("training config", format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.samples == 0 {
            return Err(Error::invalid("training config", "samples must be >= 1"));
        }
        if self.mode == Mode::Infonce && self.samples != 1 {
            return Err(Error::invalid(
                "training config",
                format!("infonce mode uses a single forward pass, got samples = {}", self.samples),
            ));
        }
        self.augment.validate()?;
        match self.mode.param_kind() {
            ParamKind::Variational => self.prior.validate(),
            ParamKind::Deterministic if self.prior.tau > 0.0 && self.prior.tau.is_finite() => Ok(()),
            ParamKind::Deterministic => Err(Error::invalid(
                "prior",
                format!("tau must be positive and finite, got {}", self.prior.tau),
            )),
        }
    }

    pub fn encoder(&self, in_dim: usize) -> EncoderConfig {
        EncoderConfig {
            in_dim,
            hidden: self.hidden,
            out: self.out,
            proj_hidden: self.proj_hidden,
        }
    }

    /// Hash of every setting except `epochs`, so a run may be extended.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub infonce: f64,
    pub kl: f64,
    pub hyperprior: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,infonce,kl,hyperprior,total,is_best,seconds\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.infonce,
                r.kl,
                r.hyperprior,
                r.total,
                u8::from(r.epoch == self.best_epoch),
                r.seconds
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the start of the selected epoch.
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
    pub log: TrainLog,
}

struct Run<'a> {
    g: &'a SparseGraph,
    cfg: &'a TrainConfig,
    hash: String,
    state: Checkpoint,
    /// Directory the state was restored from.
    from: Option<&'a Path>,
}

/// Trains from scratch. With `out`, writes the selected checkpoint to `out`,
/// the final state to `out/last`, and `out/trainlog.csv`.
pub fn train(g: &SparseGraph, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let enc = cfg.encoder(g.num_features());
    enc.validate()?;
    let params = init_params(&enc, &mut rng::stream(cfg.seed, Stream::Init), cfg.mode.param_kind());
    let optimizer = AdamState::new(cfg.lr, params.tensors());
    let meta = CheckpointMeta {
        epoch: 0,
        loss: f64::NAN,
        mode: cfg.mode,
        config_hash: cfg.hash(),
        encoder: enc,
        dataset: g.name.clone(),
        num_nodes: g.num_nodes(),
        config: cfg.clone(),
        next_epoch: 1,
        adam_t: 0,
        augment_rng: StreamPos::of(&rng::stream(cfg.seed, Stream::Augment), Stream::Augment),
        weights_rng: StreamPos::of(&rng::stream(cfg.seed, Stream::Weights), Stream::Weights),
        best: None,
        log: Vec::new(),
    };
    let state = Checkpoint {
        meta,
        params,
        optimizer,
    };
    Run {
        g,
        cfg,
        hash: cfg.hash(),
        state,
        from: None,
    }
    .run(out)
}

/// Continues a run from a checkpoint directory up to `cfg.epochs`.
///
/// Every setting other than `epochs` must match the checkpoint.
pub fn resume(g: &SparseGraph, cfg: &TrainConfig, from: &Path, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = Checkpoint::load(from)?;
    let hash = cfg.hash();
    if state.meta.config_hash != hash {
        return Err(Error::CheckpointMismatch(format!(
            "{} was trained with config {} but the current config hashes to {hash}",
            from.display(),
            state.meta.config_hash
        )));
    }
    if state.meta.dataset != g.name || state.meta.num_nodes != g.num_nodes() {
        return Err(Error::CheckpointMismatch(format!(
            "{} was trained on {} ({} nodes), not {} ({} nodes)",
            from.display(),
            state.meta.dataset,
            state.meta.num_nodes,
            g.name,
            g.num_nodes()
        )));
    }
    if state.meta.next_epoch > cfg.epochs {
        return Err(Error::invalid(
            "training config",
            format!(
                "checkpoint already covers epoch {}; raise epochs to continue",
                state.meta.next_epoch - 1
            ),
        ));
    }
    state.meta.config = cfg.clone();
    Run { g, cfg, hash, state, from: Some(from) }.run(out)
}

fn check_finite(epoch: usize, component: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { epoch, component })
    }
}

impl Run<'_> {
    fn run(mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let mut aug_rng = self.state.meta.augment_rng.restore(seed);
        let mut w_rng = self.state.meta.weights_rng.restore(seed);
        let mut best_state: Option<Checkpoint> = None;

        for epoch in self.state.meta.next_epoch..=cfg.epochs {
            let started = Instant::now();
            let aug_pos = StreamPos::of(&aug_rng, Stream::Augment);
            let w_pos = StreamPos::of(&w_rng, Stream::Weights);

            let views = make_views(self.g, &cfg.augment, &mut aug_rng);
            let lg = total_loss(&views, &self.state.params, &cfg.prior, cfg.samples, &mut w_rng)?;
            let b = &lg.breakdown;
            check_finite(epoch, "infonce", b.infonce)?;
            check_finite(epoch, "kl", b.kl)?;
            check_finite(epoch, "hyperprior", b.hyperprior)?;
            check_finite(epoch, "total", b.total)?;
            if let Some(bad) = lg.grads.iter().position(|g| !g.is_finite()) {
                log::error!("non-finite gradient in tensor {bad} at epoch {epoch}");
                return Err(Error::NonFinite {
                    epoch,
                    component: "gradient",
                });
            }

            let is_best = self.state.meta.best.is_none_or(|best| b.infonce < best.infonce);
            if is_best {
                let mut snap = self.state.clone();
                snap.meta.epoch = epoch;
                snap.meta.loss = b.infonce;
                snap.meta.next_epoch = epoch;
                snap.meta.adam_t = snap.optimizer.t;
                snap.meta.augment_rng = aug_pos;
                snap.meta.weights_rng = w_pos;
                snap.meta.config_hash = self.hash.clone();
                best_state = Some(snap);
            }

            {
                let mut params = self.state.params.tensors_mut();
                let grads: Vec<&DenseMatrix> = lg.grads.iter().collect();
                self.state.optimizer.step(&mut params, &grads);
            }

            let seconds = if cfg.strict {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            };
            log::info!(
                "epoch {epoch}/{}: infonce {:.6} kl {:.6} hyperprior {:.6} total {:.6}{} ({seconds:.2}s)",
                cfg.epochs,
                b.infonce,
                b.kl,
                b.hyperprior,
                b.total,
                if is_best { " *" } else { "" }
            );
            let meta = &mut self.state.meta;
            meta.log.push(EpochRecord {
                epoch,
                infonce: b.infonce,
                kl: b.kl,
                hyperprior: b.hyperprior,
                total: b.total,
                seconds,
            });
            if is_best {
                meta.best = Some(BestSoFar {
                    epoch,
                    infonce: b.infonce,
                });
            }
            meta.epoch = epoch;
            meta.loss = b.infonce;
            meta.next_epoch = epoch + 1;
        }

        let meta = &mut self.state.meta;
        meta.adam_t = self.state.optimizer.t;
        meta.augment_rng = StreamPos::of(&aug_rng, Stream::Augment);
        meta.weights_rng = StreamPos::of(&w_rng, Stream::Weights);
        meta.config_hash = self.hash.clone();

        let best_epoch = meta.best.expect("at least one epoch ran or was restored").epoch;
        let log = TrainLog {
            records: meta.log.clone(),
            best_epoch,
        };
        let best = match best_state {
            Some(b) => b,
            // The selected epoch predates this session; its checkpoint is
            // already on disk.
            None => self.find_best(out, best_epoch)?,
        };
        let last = self.state;

        if let Some(dir) = out {
            best.save(dir)?;
            last.save(&dir.join(LAST_DIR))?;
            write_trainlog(&dir.join(TRAINLOG_FILE), &log)?;
        }
        Ok(TrainOutcome { best, last, log })
    }
}

impl Run<'_> {
    /// Looks for the best-epoch snapshot in `out`, next to a restored
    /// `last/` state, or at the restore point itself.
    fn find_best(&self, out: Option<&Path>, epoch: usize) -> Result<Checkpoint> {
        let mut dirs: Vec<&Path> = out.into_iter().collect();
        if let Some(from) = self.from {
            if from.file_name().is_some_and(|n| n == LAST_DIR) {
                dirs.extend(from.parent());
            }
            dirs.push(from);
        }
        for dir in dirs {
            if !dir.join(crate::checkpoint::META_FILE).exists() {
                continue;
            }
            let c = Checkpoint::load(dir)?;
            if c.meta.config_hash == self.hash && c.meta.epoch == epoch && c.meta.next_epoch == epoch {
                return Ok(c);
            }
        }
        Err(Error::invalid(
            "resume",
            format!("no epoch improved on the restored best and the checkpoint for epoch {epoch} was not found"),
        ))
    }
}

fn write_trainlog(path: &PathBuf, log: &TrainLog) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
}
