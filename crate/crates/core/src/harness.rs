//! Experiment orchestration: flat key=value configuration with environment
//! overrides, the two-phase training state machine, per-epoch metrics and
//! per-iteration diagnostics CSVs, and checkpointing.
//!
//! Determinism: every random draw in a run comes from a named stream derived
//! from the root seed (see [`crate::rng`]); identical configurations produce
//! byte-identical output files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::dataset::{self, InteractionTable};
use crate::error::{Error, Result};
use crate::eval::{self, EvalSplit, MetricReport};
use crate::memorization::{self, MemTracker};
use crate::metaweight::{self, MetaStepReport, WeightNet};
use crate::model::{self, ModelParams, SampleKind, TrainSample};
use crate::rng;
use crate::scheduler::{self, SchedulerState, SchedulerVariant};

/// Which loss the factorization model trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Bpr,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "bpr" => Ok(Self::Bpr),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// How ground-truth noise flags are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Flags from the rating-threshold rule.
    Ratings,
    /// Flags (and optional splits) stored in a canonical file.
    File,
    /// Treat the file as clean and inject `sigma` synthetic noisy positives.
    Inject,
    /// No flags; diagnostics needing them stay blank.
    None,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratings" => Ok(Self::Ratings),
            "file" => Ok(Self::File),
            "inject" => Ok(Self::Inject),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown noise mode {other:?}"))),
        }
    }
}

/// Training regime: the full method or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Two-phase self-guided denoising.
    Sgdl,
    /// Plain training end to end (baseline).
    Normal,
    /// Phase II trains only on the memorized snapshot (no weighting).
    WithoutDls,
    /// Phase II weighting without the scheduler (uniform memorized weights).
    WithoutAds,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgdl" => Ok(Self::Sgdl),
            "normal" => Ok(Self::Normal),
            "no-dls" | "without-dls" => Ok(Self::WithoutDls),
            "no-ads" | "without-ads" => Ok(Self::WithoutAds),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Full run configuration. Every field has a default; see the README for the
/// key reference.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub delimiter: String,
    pub noise_mode: NoiseMode,
    pub rating_threshold: u8,
    pub sigma: f64,
    pub split_ratios: (f64, f64, f64),
    pub loss: LossKind,
    pub dim: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub h: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub k_list: Vec<usize>,
    pub scheduler: SchedulerVariant,
    pub tau: f64,
    pub seed: u64,
    pub outdir: PathBuf,
    pub mode: TrainMode,
    /// Relative adjustment of the estimated noise rate (e.g. 0.05 raises
    /// sigma_hat by 5%, forcing an earlier transition).
    pub sigma_offset: f64,
    /// Epochs to train before the transition rule is consulted; the noise
    /// estimate is meaningless until the loss statistics warm up.
    pub min_phase1_epochs: usize,
    /// Scheduler (phi) learning rate. Decoupled from eta2 because the
    /// Gumbel-softmax backward scales with 1/tau.
    pub eta_sched: f64,
    pub patience: usize,
    pub weight_hidden: usize,
    pub sched_hidden: usize,
    /// Keep running the memorization pass during Phase II for diagnostics.
    pub track_memorization: bool,
    /// Test-split evaluation cadence in epochs (validation is evaluated
    /// whenever early stopping needs it regardless).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data.tsv"),
            delimiter: "tab".into(),
            noise_mode: NoiseMode::Ratings,
            rating_threshold: 3,
            sigma: 0.2,
            split_ratios: (0.8, 0.1, 0.1),
            loss: LossKind::Bpr,
            dim: 32,
            eta1: 0.05,
            eta2: 0.05,
            h: 5,
            phase1_epochs: 60,
            phase2_epochs: 40,
            batch_size: 128,
            k_list: vec![5, 20],
            scheduler: SchedulerVariant::Lstm,
            tau: 0.05,
            seed: 42,
            outdir: PathBuf::from("run-out"),
            mode: TrainMode::Sgdl,
            sigma_offset: 0.0,
            min_phase1_epochs: 10,
            eta_sched: 0.05,
            patience: 10,
            weight_hidden: 64,
            sched_hidden: 64,
            track_memorization: true,
            eval_every: 1,
        }
    }
}

/// Environment variables with this prefix override config keys
/// (`SGDL_ETA1=0.01` overrides `eta1`).
pub const ENV_PREFIX: &str = "SGDL_";

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `SGDL_*` environment overrides.
    pub fn apply_env(&mut self) -> Result<()> {
        let mut vars: Vec<(String, String)> =
            std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (key, value) in vars {
            self.set(&key[ENV_PREFIX.len()..].to_lowercase(), &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "dataset" => self.dataset = PathBuf::from(value),
            "delimiter" => self.delimiter = value.to_string(),
            "noise_mode" => self.noise_mode = value.parse()?,
            "rating_threshold" => {
                self.rating_threshold = value.parse().map_err(|_| bad("rating_threshold"))?
            }
            "sigma" => self.sigma = value.parse().map_err(|_| bad("sigma"))?,
            "split_ratios" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("split_ratios"))?;
                if parts.len() != 3 {
                    return Err(bad("split_ratios"));
                }
                self.split_ratios = (parts[0], parts[1], parts[2]);
            }
            "loss" => self.loss = value.parse()?,
            "dim" => self.dim = value.parse().map_err(|_| bad("dim"))?,
            "eta1" => self.eta1 = value.parse().map_err(|_| bad("eta1"))?,
            "eta2" => self.eta2 = value.parse().map_err(|_| bad("eta2"))?,
            "h" => self.h = value.parse().map_err(|_| bad("h"))?,
            "phase1_epochs" => {
                self.phase1_epochs = value.parse().map_err(|_| bad("phase1_epochs"))?
            }
            "phase2_epochs" => {
                self.phase2_epochs = value.parse().map_err(|_| bad("phase2_epochs"))?
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "k_list" => {
                self.k_list = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("k_list"))?
            }
            "scheduler" => self.scheduler = value.parse()?,
            "tau" => self.tau = value.parse().map_err(|_| bad("tau"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "outdir" => self.outdir = PathBuf::from(value),
            "mode" => self.mode = value.parse()?,
            "sigma_offset" => {
                self.sigma_offset = value.parse().map_err(|_| bad("sigma_offset"))?
            }
            "min_phase1_epochs" => {
                self.min_phase1_epochs = value.parse().map_err(|_| bad("min_phase1_epochs"))?
            }
            "eta_sched" => self.eta_sched = value.parse().map_err(|_| bad("eta_sched"))?,
            "patience" => self.patience = value.parse().map_err(|_| bad("patience"))?,
            "weight_hidden" => {
                self.weight_hidden = value.parse().map_err(|_| bad("weight_hidden"))?
            }
            "sched_hidden" => {
                self.sched_hidden = value.parse().map_err(|_| bad("sched_hidden"))?
            }
            "track_memorization" => {
                self.track_memorization = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad("track_memorization")),
                }
            }
            "eval_every" => self.eval_every = value.parse().map_err(|_| bad("eval_every"))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta1 <= 0.0 || self.eta2 <= 0.0 || self.eta_sched <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.h == 0 || self.h > 32 {
            return Err(Error::Config("h must lie in 1..=32".into()));
        }
        if self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("dim and batch_size must be positive".into()));
        }
        if self.k_list.is_empty() {
            return Err(Error::Config("k_list must not be empty".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(Error::Config("sigma must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The delimiter string, with the `tab` shorthand expanded.
    pub fn delim(&self) -> &str {
        if self.delimiter == "tab" {
            "\t"
        } else {
            &self.delimiter
        }
    }

    /// Cutoff used for validation-based early stopping (20 when present).
    fn stop_k(&self) -> usize {
        if self.k_list.contains(&20) {
            20
        } else {
            *self.k_list.iter().max().unwrap()
        }
    }
}

/// Load, label, split, and optionally inject noise per the config.
pub fn load_table(cfg: &RunConfig) -> Result<InteractionTable> {
    let ratings = dataset::parse_interactions(&cfg.dataset, cfg.delim())?;
    let table = match cfg.noise_mode {
        NoiseMode::Ratings => dataset::label_noise_by_rating(&ratings, cfg.rating_threshold)?,
        NoiseMode::File | NoiseMode::None | NoiseMode::Inject => {
            dataset::table_from_ratings(&ratings)?
        }
    };
    let table = if table.splits.is_some() {
        table
    } else {
        dataset::split_dataset(&table, cfg.split_ratios, cfg.seed)?
    };
    match cfg.noise_mode {
        NoiseMode::Inject => dataset::inject_noise(&table, cfg.sigma, cfg.seed),
        _ => Ok(table),
    }
}

/// Which phase an epoch belonged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Memorization,
    SelfGuided,
    Normal,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Memorization => write!(f, "memorization"),
            Phase::SelfGuided => write!(f, "self_guided"),
            Phase::Normal => write!(f, "normal"),
        }
    }
}

/// Everything recorded about one epoch.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    pub test: Option<MetricReport>,
    pub val_recall: Option<f64>,
    pub mem_count: Option<usize>,
    pub sigma_hat: Option<f64>,
    pub transition: bool,
    pub mp: Option<f64>,
    pub mr: Option<f64>,
    pub mem_rate_clean: Option<f64>,
    pub mem_rate_noisy: Option<f64>,
}

/// Result of a finished run, with the on-disk artifacts mirrored in memory.
#[derive(Debug)]
pub struct RunArtifacts {
    pub t_m: Option<usize>,
    pub sigma_hat_at_transition: Option<f64>,
    pub mem_snapshot_size: Option<usize>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub test_at_best: MetricReport,
    pub final_test: MetricReport,
    pub history: Vec<EpochRow>,
    /// `(loss, weight, noise_flag)` per train positive at the final state.
    pub weight_rows: Vec<(f64, f64, Option<bool>)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

struct Csv {
    w: BufWriter<File>,
}

impl Csv {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{header}")?;
        Ok(Self { w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.w, "{}", fields.join(","))?;
        Ok(())
    }
}

/// Open CSV sinks for one run directory.
pub struct RunWriters {
    metrics: Csv,
    memorization: Csv,
    meta: Csv,
    sched: Csv,
}

impl RunWriters {
    fn create(outdir: &Path, ks: &[usize]) -> Result<Self> {
        std::fs::create_dir_all(outdir)?;
        let mut header = String::from("epoch,phase");
        for k in ks {
            header.push_str(&format!(",recall@{k}"));
        }
        for k in ks {
            header.push_str(&format!(",ndcg@{k}"));
        }
        header.push_str(",mem_rate_clean,mem_rate_noisy,MP,MR,sigma_hat");
        Ok(Self {
            metrics: Csv::create(&outdir.join("metrics.csv"), &header)?,
            memorization: Csv::create(
                &outdir.join("memorization.csv"),
                "epoch,mem_count,sigma_hat,transition,MP,MR,mem_rate_clean,mem_rate_noisy",
            )?,
            meta: Csv::create(
                &outdir.join("meta_iterations.csv"),
                "iteration,mean_weight,mean_weight_clean,mean_weight_noisy,psi_grad_norm",
            )?,
            sched: Csv::create(
                &outdir.join("scheduler_iterations.csv"),
                "iteration,variant,pi_entropy,max_y,selected_clean_frac",
            )?,
        })
    }

    fn epoch_row(&mut self, row: &EpochRow, ks: usize) -> Result<()> {
        let mut fields = vec![row.epoch.to_string(), row.phase.to_string()];
        match &row.test {
            Some(test) => {
                for r in &test.recall {
                    fields.push(format!("{r:.6}"));
                }
                for n in &test.ndcg {
                    fields.push(format!("{n:.6}"));
                }
            }
            None => fields.extend(std::iter::repeat(String::new()).take(2 * ks)),
        }
        fields.push(fmt_opt(row.mem_rate_clean));
        fields.push(fmt_opt(row.mem_rate_noisy));
        fields.push(fmt_opt(row.mp));
        fields.push(fmt_opt(row.mr));
        fields.push(fmt_opt(row.sigma_hat));
        self.metrics.row(&fields)?;

        if let Some(count) = row.mem_count {
            self.memorization.row(&[
                row.epoch.to_string(),
                count.to_string(),
                fmt_opt(row.sigma_hat),
                u8::from(row.transition).to_string(),
                fmt_opt(row.mp),
                fmt_opt(row.mr),
                fmt_opt(row.mem_rate_clean),
                fmt_opt(row.mem_rate_noisy),
            ])?;
        }
        Ok(())
    }
}

/// Training state shared by both phases.
struct Trainer {
    cfg: RunConfig,
    table: InteractionTable,
    train_adj: Vec<Vec<u32>>,
    /// Interaction indices of the train positives, ascending.
    positives: Vec<usize>,
    theta: ModelParams,
    neg_rng: ChaCha12Rng,
    shuffle_rng: ChaCha12Rng,
    mem_rng: ChaCha12Rng,
    gumbel_rng: ChaCha12Rng,
}

/// Materialized epoch training set with per-sample interaction provenance
/// (None for sampled negatives).
struct EpochSet {
    samples: Vec<TrainSample>,
    origin: Vec<Option<usize>>,
}

impl Trainer {
    fn new(cfg: &RunConfig, table: &InteractionTable, stream_index: u64) -> Result<Self> {
        let positives = table.train_positives()?;
        if positives.is_empty() {
            return Err(Error::Argument("train split has no positives".into()));
        }
        let theta = ModelParams::init(table.num_users, table.num_items, cfg.dim, cfg.seed);
        Ok(Self {
            cfg: cfg.clone(),
            table: table.clone(),
            train_adj: table.train_adjacency()?,
            positives,
            theta,
            neg_rng: rng::stream(cfg.seed, "negsample", stream_index),
            shuffle_rng: rng::stream(cfg.seed, "shuffle", stream_index),
            mem_rng: rng::stream(cfg.seed, "membatch", stream_index),
            gumbel_rng: rng::stream(cfg.seed, "gumbel", stream_index),
        })
    }

    fn draw_negative(&mut self, user: u32) -> Result<u32> {
        model::sample_negative(user, &self.train_adj, self.table.num_items, &mut self.neg_rng)
    }

    /// One loss-bearing sample for a train-positive interaction.
    fn canonical_sample(&mut self, interaction: usize, id: usize) -> Result<TrainSample> {
        let x = &self.table.interactions[interaction];
        let (user, item) = (x.user, x.item);
        Ok(match self.cfg.loss {
            LossKind::Bce => {
                TrainSample { id, kind: SampleKind::Pointwise { user, item, label: 1 } }
            }
            LossKind::Bpr => {
                let neg = self.draw_negative(user)?;
                TrainSample {
                    id,
                    kind: SampleKind::Pairwise { user, pos_item: item, neg_item: neg },
                }
            }
        })
    }

    /// The epoch's training set: per positive, a pairwise sample (BPR) or a
    /// positive plus one sampled negative (BCE).
    fn materialize_epoch(&mut self, from: &[usize]) -> Result<EpochSet> {
        let mut samples = Vec::new();
        let mut origin = Vec::new();
        for &idx in from {
            let x = &self.table.interactions[idx];
            let (user, item) = (x.user, x.item);
            match self.cfg.loss {
                LossKind::Bpr => {
                    let neg = self.draw_negative(user)?;
                    samples.push(TrainSample {
                        id: samples.len(),
                        kind: SampleKind::Pairwise { user, pos_item: item, neg_item: neg },
                    });
                    origin.push(Some(idx));
                }
                LossKind::Bce => {
                    samples.push(TrainSample {
                        id: samples.len(),
                        kind: SampleKind::Pointwise { user, item, label: 1 },
                    });
                    origin.push(Some(idx));
                    let neg = self.draw_negative(user)?;
                    samples.push(TrainSample {
                        id: samples.len(),
                        kind: SampleKind::Pointwise { user, item: neg, label: 0 },
                    });
                    origin.push(None);
                }
            }
        }
        Ok(EpochSet { samples, origin })
    }

    fn shuffled_batches(&mut self, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.shuffle_rng);
        order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Plain unweighted epoch over the given positives.
    fn plain_epoch(&mut self, from: &[usize]) -> Result<()> {
        let set = self.materialize_epoch(from)?;
        let batches = self.shuffled_batches(set.samples.len());
        for batch_ids in batches {
            let batch: Vec<TrainSample> = batch_ids.iter().map(|&i| set.samples[i]).collect();
            let weights = vec![1.0; batch.len()];
            model::weighted_step(&mut self.theta, &batch, &weights, self.cfg.eta1)?;
        }
        Ok(())
    }

    /// Per-interaction losses feeding the noise-rate estimate. These are
    /// always the pointwise likelihood loss of the observed interaction:
    /// a pairwise loss depends on the drawn negative, which buries the
    /// clean/noisy bimodality the mixture fit relies on.
    fn positive_losses(&mut self) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.positives.len());
        for &idx in &self.positives {
            let x = &self.table.interactions[idx];
            let s = TrainSample {
                id: 0,
                kind: SampleKind::Pointwise { user: x.user, item: x.item, label: 1 },
            };
            losses.push(model::sample_loss(&self.theta, &s)?);
        }
        Ok(losses)
    }

    fn eval_row(
        &self,
        epoch: usize,
        phase: Phase,
        tracker: Option<&MemTracker>,
        sigma_hat: Option<f64>,
        transition: bool,
        need_val: bool,
        need_test: bool,
    ) -> Result<EpochRow> {
        let test = if need_test {
            Some(eval::evaluate_ranking(&self.theta, &self.table, &self.cfg.k_list, EvalSplit::Test)?)
        } else {
            None
        };
        let val_recall = if need_val {
            let val = eval::evaluate_ranking(
                &self.theta,
                &self.table,
                &[self.cfg.stop_k()],
                EvalSplit::Val,
            )?;
            Some(val.recall[0])
        } else {
            None
        };
        let mut row = EpochRow {
            epoch,
            phase,
            test,
            val_recall,
            mem_count: tracker.map(|t| t.mem_count()),
            sigma_hat,
            transition,
            mp: None,
            mr: None,
            mem_rate_clean: None,
            mem_rate_noisy: None,
        };
        if let Some(tracker) = tracker {
            if self.table.has_noise_flags() {
                let memorized = tracker.memorized_interactions();
                let report = memorization::mp_mr(&memorized, &self.table)?;
                row.mp = Some(report.mp);
                row.mr = Some(report.mr);
                let (clean, noisy) = eval::memory_rate(&memorized, &self.table)?;
                row.mem_rate_clean = Some(clean);
                row.mem_rate_noisy = Some(noisy);
            }
        }
        Ok(row)
    }

    /// Final per-positive `(loss, weight, flag)` rows.
    fn weight_rows(&mut self, psi: Option<&WeightNet>) -> Result<Vec<(f64, f64, Option<bool>)>> {
        let positives = self.positives.clone();
        let mut rows = Vec::with_capacity(positives.len());
        for (k, &idx) in positives.iter().enumerate() {
            let s = self.canonical_sample(idx, k)?;
            let loss = model::sample_loss(&self.theta, &s)?;
            let weight = psi.map_or(1.0, |p| p.weight_of(loss));
            rows.push((loss, weight, self.table.interactions[idx].noise_flag));
        }
        Ok(rows)
    }
}

/// Result of Phase I: the warmed model and the frozen memorized snapshot.
pub struct Phase1Result {
    pub theta: ModelParams,
    pub tracker: MemTracker,
    pub mem_snapshot: Vec<usize>,
    pub t_m: usize,
    pub sigma_hat: f64,
    /// True when the epoch cap forced the transition.
    pub forced: bool,
    pub history: Vec<EpochRow>,
}

/// Phase I: plain mini-batch training with the memorization pass and noise
/// estimate each epoch; returns at the first epoch satisfying the
/// transition rule, or at the epoch cap with a warning.
pub fn run_phase1(cfg: &RunConfig, table: &InteractionTable) -> Result<Phase1Result> {
    let mut trainer = Trainer::new(cfg, table, 1)?;
    let mut tracker = MemTracker::new(table, cfg.h)?;
    let total = trainer.positives.len();
    let mut history = Vec::new();
    let mut sigma_hat = 0.0;
    let mut transitioned = false;
    let mut t_m = 0;

    for epoch in 1..=cfg.phase1_epochs {
        let positives = trainer.positives.clone();
        trainer.plain_epoch(&positives)?;
        memorization::epoch_memorization_pass(&trainer.theta, &mut tracker)?;
        let losses = trainer.positive_losses()?;
        let raw = memorization::estimate_noise_rate(&losses);
        sigma_hat = (raw * (1.0 + cfg.sigma_offset)).clamp(0.0, 1.0);
        let transition = epoch >= cfg.min_phase1_epochs.max(cfg.h)
            && memorization::should_transition(tracker.mem_count(), sigma_hat, total);
        let need_test = transition || epoch % cfg.eval_every == 0 || epoch == cfg.phase1_epochs;
        let row = trainer.eval_row(
            epoch,
            Phase::Memorization,
            Some(&tracker),
            Some(sigma_hat),
            transition,
            false,
            need_test,
        )?;
        history.push(row);
        if transition {
            transitioned = true;
            t_m = epoch;
            break;
        }
    }

    if !transitioned {
        t_m = cfg.phase1_epochs;
        log::warn!(
            "phase 1 hit the epoch cap ({}) without reaching the memorization point; \
             forcing transition with |M| = {}",
            cfg.phase1_epochs,
            tracker.mem_count()
        );
    }
    let mem_snapshot = tracker.memorized_interactions();
    Ok(Phase1Result {
        theta: trainer.theta,
        tracker,
        mem_snapshot,
        t_m,
        sigma_hat,
        forced: !transitioned,
        history,
    })
}

/// Result of Phase II (or of the plain continuation in baseline modes).
pub struct Phase2Result {
    pub theta: ModelParams,
    pub psi: Option<WeightNet>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub best_theta: ModelParams,
    pub history: Vec<EpochRow>,
}

struct BestTracker {
    val: f64,
    epoch: usize,
    theta: ModelParams,
    since: usize,
}

impl BestTracker {
    fn new(theta: &ModelParams) -> Self {
        Self { val: f64::NEG_INFINITY, epoch: 0, theta: theta.clone(), since: 0 }
    }

    /// Returns true when patience is exhausted.
    fn observe(&mut self, epoch: usize, val: f64, theta: &ModelParams, patience: usize) -> bool {
        if val > self.val {
            self.val = val;
            self.epoch = epoch;
            self.theta = theta.clone();
            self.since = 0;
            false
        } else {
            self.since += 1;
            self.since >= patience
        }
    }
}

/// Phase II: the per-iteration lookahead / meta step / committed step cycle,
/// guided by the frozen memorized snapshot, with validation early stopping.
pub fn run_phase2(
    cfg: &RunConfig,
    table: &InteractionTable,
    phase1: Phase1Result,
    mut writers: Option<&mut RunWriters>,
) -> Result<Phase2Result> {
    if phase1.mem_snapshot.is_empty() {
        return Err(Error::Argument(
            "memorized snapshot is empty; cannot run self-guided phase".into(),
        ));
    }
    let mut trainer = Trainer::new(cfg, table, 2)?;
    trainer.theta = phase1.theta;
    let mut tracker = phase1.tracker;
    let snapshot = phase1.mem_snapshot;
    let flags = table.has_noise_flags();

    let mut psi = WeightNet::init(cfg.weight_hidden, cfg.seed);
    let mut sched = SchedulerState::new(cfg.scheduler, cfg.sched_hidden, snapshot.len(), cfg.seed);
    let use_scheduler = cfg.mode != TrainMode::WithoutAds;
    let scheduled = use_scheduler
        && matches!(cfg.scheduler, SchedulerVariant::Lstm | SchedulerVariant::Mlp);

    // the incoming (transition-point) model is the first early-stop candidate
    let entry = trainer.eval_row(phase1.t_m, Phase::SelfGuided, None, None, false, true, false)?;
    let mut best = BestTracker::new(&trainer.theta);
    best.observe(phase1.t_m, entry.val_recall.unwrap(), &trainer.theta, usize::MAX);
    let mut history = Vec::new();
    let mut iteration: u64 = 0;

    for offset in 1..=cfg.phase2_epochs {
        let epoch = phase1.t_m + offset;

        if cfg.mode == TrainMode::WithoutDls {
            // ablation: no weighting machinery; train on the snapshot only
            trainer.plain_epoch(&snapshot.clone())?;
        } else {
            let positives = trainer.positives.clone();
            let set = trainer.materialize_epoch(&positives)?;
            let batches = trainer.shuffled_batches(set.samples.len());

            for batch_ids in batches {
                iteration += 1;
                let batch: Vec<TrainSample> =
                    batch_ids.iter().map(|&i| set.samples[i]).collect();

                // memorized mini-batch, resampled every iteration
                let take = cfg.batch_size.min(snapshot.len());
                let picks =
                    rand::seq::index::sample(&mut trainer.mem_rng, snapshot.len(), take);
                let mem_ids: Vec<usize> = picks.iter().collect();
                let mut mem_samples = Vec::with_capacity(take);
                for (pos, &slot) in mem_ids.iter().enumerate() {
                    mem_samples.push(trainer.canonical_sample(snapshot[slot], pos)?);
                }

                let theta_hat =
                    metaweight::assumed_update(&trainer.theta, &batch, &psi, cfg.eta1)?;

                let mut feats = Vec::with_capacity(take);
                for m in &mem_samples {
                    feats.push(scheduler::compute_features(m, &trainer.theta, &theta_hat)?);
                }

                let draw = if scheduled {
                    let (_, pi) = sched.forward(&mem_ids, &feats)?;
                    Some((scheduler::gumbel_weights(&pi, cfg.tau, &mut trainer.gumbel_rng)?, pi))
                } else {
                    None
                };
                let y: Vec<f64> = match &draw {
                    Some((d, _)) => d.y.clone(),
                    None if use_scheduler && cfg.scheduler == SchedulerVariant::TopF => {
                        scheduler::topf_select(&feats)
                    }
                    None => vec![1.0 / take as f64; take],
                };

                let mem_batch: Vec<(TrainSample, f64)> =
                    mem_samples.iter().copied().zip(y.iter().copied()).collect();
                let grad_norm = metaweight::psi_meta_step(
                    &trainer.theta,
                    &theta_hat,
                    &batch,
                    &mem_batch,
                    &mut psi,
                    cfg.eta1,
                    cfg.eta2,
                )?;
                drop(theta_hat);

                let batch_loss_before = mean_loss(&trainer.theta, &batch)?;
                let weights = metaweight::actual_update(&mut trainer.theta, &batch, &psi, cfg.eta1)?;
                let batch_loss_after = mean_loss(&trainer.theta, &batch)?;

                if let Some((d, _)) = &draw {
                    let mut losses_after = Vec::with_capacity(take);
                    for m in &mem_samples {
                        losses_after.push(model::sample_loss(&trainer.theta, m)?);
                    }
                    sched.update_phi(&feats, d, &losses_after, cfg.eta_sched)?;
                }

                if let Some(w) = writers.as_deref_mut() {
                    let report = meta_report(
                        &batch_ids,
                        &set.origin,
                        &weights,
                        flags,
                        &trainer.table,
                        grad_norm,
                        batch_loss_before,
                        batch_loss_after,
                    );
                    w.meta.row(&[
                        iteration.to_string(),
                        format!("{:.6}", report.mean_weight),
                        fmt_opt(report.mean_weight_clean),
                        fmt_opt(report.mean_weight_noisy),
                        format!("{:.6e}", report.psi_grad_norm),
                    ])?;
                    if let Some((d, pi)) = &draw {
                        let max_y = d.y.iter().copied().fold(0.0, f64::max);
                        let clean_frac = flags.then(|| {
                            mem_ids
                                .iter()
                                .zip(&d.y)
                                .filter(|(slot, _)| {
                                    trainer.table.interactions[snapshot[**slot]].noise_flag
                                        == Some(false)
                                })
                                .map(|(_, w)| w)
                                .sum::<f64>()
                        });
                        w.sched.row(&[
                            iteration.to_string(),
                            format!("{:?}", cfg.scheduler).to_lowercase(),
                            format!("{:.6}", scheduler::entropy(pi)),
                            format!("{max_y:.6}"),
                            fmt_opt(clean_frac),
                        ])?;
                    }
                }
            }
        }

        let tracked = if cfg.track_memorization {
            memorization::epoch_memorization_pass(&trainer.theta, &mut tracker)?;
            Some(&tracker)
        } else {
            None
        };
        let need_test = offset % cfg.eval_every == 0 || offset == cfg.phase2_epochs;
        let row = trainer.eval_row(epoch, Phase::SelfGuided, tracked, None, false, true, need_test)?;
        if let Some(w) = writers.as_deref_mut() {
            w.epoch_row(&row, cfg.k_list.len())?;
        }
        let stop = best.observe(epoch, row.val_recall.unwrap(), &trainer.theta, cfg.patience);
        history.push(row);
        if stop {
            break;
        }
    }

    Ok(Phase2Result {
        theta: trainer.theta,
        psi: (cfg.mode != TrainMode::WithoutDls).then_some(psi),
        best_epoch: best.epoch,
        best_val_recall: best.val,
        best_theta: best.theta,
        history,
    })
}

fn mean_loss(theta: &ModelParams, batch: &[TrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += model::sample_loss(theta, s)?;
    }
    Ok(total / batch.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn meta_report(
    batch_ids: &[usize],
    origin: &[Option<usize>],
    weights: &[f64],
    flags: bool,
    table: &InteractionTable,
    psi_grad_norm: f64,
    batch_loss_before: f64,
    batch_loss_after: f64,
) -> MetaStepReport {
    let mean_weight = weights.iter().sum::<f64>() / weights.len() as f64;
    let (mut clean_sum, mut clean_n, mut noisy_sum, mut noisy_n) = (0.0, 0usize, 0.0, 0usize);
    if flags {
        for (&sample_idx, &w) in batch_ids.iter().zip(weights) {
            if let Some(interaction) = origin[sample_idx] {
                match table.interactions[interaction].noise_flag {
                    Some(false) => {
                        clean_sum += w;
                        clean_n += 1;
                    }
                    Some(true) => {
                        noisy_sum += w;
                        noisy_n += 1;
                    }
                    None => {}
                }
            }
        }
    }
    MetaStepReport {
        batch_loss_before,
        batch_loss_after,
        mean_weight,
        mean_weight_clean: (clean_n > 0).then(|| clean_sum / clean_n as f64),
        mean_weight_noisy: (noisy_n > 0).then(|| noisy_sum / noisy_n as f64),
        psi_grad_norm,
    }
}

/// Baseline: plain training end to end with the same evaluation protocol.
fn run_normal(
    cfg: &RunConfig,
    table: &InteractionTable,
    writers: &mut RunWriters,
) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(cfg, table, 1)?;
    let mut tracker =
        cfg.track_memorization.then(|| MemTracker::new(table, cfg.h)).transpose()?;
    let epochs = cfg.phase1_epochs + cfg.phase2_epochs;
    let mut best = BestTracker::new(&trainer.theta);
    let mut history = Vec::new();

    for epoch in 1..=epochs {
        let positives = trainer.positives.clone();
        trainer.plain_epoch(&positives)?;
        if let Some(t) = tracker.as_mut() {
            memorization::epoch_memorization_pass(&trainer.theta, t)?;
        }
        let need_test = epoch % cfg.eval_every == 0 || epoch == epochs;
        let row =
            trainer.eval_row(epoch, Phase::Normal, tracker.as_ref(), None, false, true, need_test)?;
        writers.epoch_row(&row, cfg.k_list.len())?;
        let stop = best.observe(epoch, row.val_recall.unwrap(), &trainer.theta, cfg.patience);
        history.push(row);
        if stop {
            break;
        }
    }

    let weight_rows = trainer.weight_rows(None)?;
    let theta = trainer.theta.clone();
    finish_run(cfg, table, None, best, history, weight_rows, &theta)
}

fn finish_run(
    cfg: &RunConfig,
    table: &InteractionTable,
    phase1: Option<(usize, f64, usize)>,
    best: BestTracker,
    history: Vec<EpochRow>,
    weight_rows: Vec<(f64, f64, Option<bool>)>,
    final_theta: &ModelParams,
) -> Result<RunArtifacts> {
    let ckpt_dir = cfg.outdir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    best.theta.save(&ckpt_dir.join("best.ckpt"))?;
    final_theta.save(&ckpt_dir.join("final.ckpt"))?;
    eval::export_weight_distribution(&weight_rows, &cfg.outdir.join("weights.csv"))?;
    let test_at_best = eval::evaluate_ranking(&best.theta, table, &cfg.k_list, EvalSplit::Test)?;
    let final_test = eval::evaluate_ranking(final_theta, table, &cfg.k_list, EvalSplit::Test)?;
    Ok(RunArtifacts {
        t_m: phase1.map(|(t, _, _)| t),
        sigma_hat_at_transition: phase1.map(|(_, s, _)| s),
        mem_snapshot_size: phase1.map(|(_, _, m)| m),
        epochs_run: history.len(),
        best_epoch: best.epoch,
        best_val_recall: best.val,
        test_at_best,
        final_test,
        history,
        weight_rows,
    })
}

/// Run the full pipeline on an already-built table, writing artifacts under
/// the config's output directory.
pub fn run_with_table(cfg: &RunConfig, table: &InteractionTable) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut writers = RunWriters::create(&cfg.outdir, &cfg.k_list)?;

    if cfg.mode == TrainMode::Normal {
        return run_normal(cfg, table, &mut writers);
    }

    let phase1 = run_phase1(cfg, table)?;
    for row in &phase1.history {
        writers.epoch_row(row, cfg.k_list.len())?;
    }
    log::info!(
        "memorization point at epoch {} (|M| = {}, sigma_hat = {:.4}{})",
        phase1.t_m,
        phase1.mem_snapshot.len(),
        phase1.sigma_hat,
        if phase1.forced { ", forced by epoch cap" } else { "" }
    );
    let ckpt_dir = cfg.outdir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    phase1.theta.save(&ckpt_dir.join("transition.ckpt"))?;

    let summary = (phase1.t_m, phase1.sigma_hat, phase1.mem_snapshot.len());
    let mut full_history = phase1.history.clone();
    let phase2 = run_phase2(cfg, table, phase1, Some(&mut writers))?;

    let mut trainer = Trainer::new(cfg, table, 3)?;
    trainer.theta = phase2.theta;
    let weight_rows = trainer.weight_rows(phase2.psi.as_ref())?;
    let final_theta = trainer.theta.clone();

    full_history.extend(phase2.history.iter().cloned());
    let best = BestTracker {
        val: phase2.best_val_recall,
        epoch: phase2.best_epoch,
        theta: phase2.best_theta,
        since: 0,
    };
    finish_run(cfg, table, Some(summary), best, full_history, weight_rows, &final_theta)
}

/// Full pipeline from a config: ingest, phase 1, phase 2, final artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    let table = load_table(cfg).map_err(|e| stage("ingest", e))?;
    run_with_table(cfg, &table).map_err(|e| stage("train", e))
}

fn stage(name: &str, err: Error) -> Error {
    Error::Config(format!("stage {name}: {err}"))
}

/// Per-epoch memorization curve without the phase transition: plain training
/// for `epochs`, reporting where the transition rule would fire.
pub fn inspect_memorization(
    cfg: &RunConfig,
    table: &InteractionTable,
    epochs: usize,
) -> Result<Vec<EpochRow>> {
    let mut trainer = Trainer::new(cfg, table, 1)?;
    let mut tracker = MemTracker::new(table, cfg.h)?;
    let total = trainer.positives.len();
    let mut rows = Vec::new();
    for epoch in 1..=epochs {
        let positives = trainer.positives.clone();
        trainer.plain_epoch(&positives)?;
        memorization::epoch_memorization_pass(&trainer.theta, &mut tracker)?;
        let losses = trainer.positive_losses()?;
        let raw = memorization::estimate_noise_rate(&losses);
        let sigma_hat = (raw * (1.0 + cfg.sigma_offset)).clamp(0.0, 1.0);
        let transition = epoch >= cfg.min_phase1_epochs.max(cfg.h)
            && memorization::should_transition(tracker.mem_count(), sigma_hat, total);
        rows.push(trainer.eval_row(
            epoch,
            Phase::Memorization,
            Some(&tracker),
            Some(sigma_hat),
            transition,
            false,
            epoch % cfg.eval_every == 0,
        )?);
    }
    Ok(rows)
}

/// Re-evaluate a checkpoint against the table implied by a config.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(MetricReport, MetricReport)> {
    let table = load_table(cfg)?;
    let theta = ModelParams::load(checkpoint)?;
    if theta.num_users() != table.num_users || theta.num_items() != table.num_items {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape {}x{} does not match dataset {}x{}",
            theta.num_users(),
            theta.num_items(),
            table.num_users,
            table.num_items
        )));
    }
    let val = eval::evaluate_ranking(&theta, &table, &cfg.k_list, EvalSplit::Val)?;
    let test = eval::evaluate_ranking(&theta, &table, &cfg.k_list, EvalSplit::Test)?;
    Ok((val, test))
}

/// Parse `key=value` pairs (CLI overrides) onto a config.
pub fn apply_overrides(cfg: &mut RunConfig, pairs: &[String]) -> Result<()> {
    for pair in pairs {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()
}
