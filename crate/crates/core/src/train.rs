//! Training loop: batch assembly with masked-prefix editing examples,
//! condition dropout, AdamW with warmup + cosine decay, checkpointing and
//! held-out evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::edit::{assemble_training_example, ExampleConfig, ModelSequence};
use crate::error::{Error, Result};
use crate::layout::LayoutSpec;
use crate::model::{
    cross_entropy, read_checkpoint, write_checkpoint, Condition, DType, Model, ModelCheckpoint, ModelConfig,
    ModelInput, RngState, Scalar,
};
use crate::optim::{clip_grad_norm, AdamState, AdamWConfig, LrSchedule};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub condition_dropout: f64,
    pub zero_init_heads: bool,
    /// 32 or 64.
    pub precision: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            condition_dropout: 0.1,
            zero_init_heads: true,
            precision: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Body frames of plain generation examples.
    pub plain_frames: usize,
    /// Body frames of editing examples.
    pub edit_frames: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let ex = ExampleConfig::toy();
        Self {
            plain_frames: ex.plain_frames,
            edit_frames: ex.edit_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: adam.lr,
            warmup_steps: 500,
            min_lr_ratio: 0.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditingSection {
    pub p_edit: f64,
    pub downsample_factor: usize,
}

impl Default for EditingSection {
    fn default() -> Self {
        let ex = ExampleConfig::toy();
        Self {
            p_edit: ex.p_edit,
            downsample_factor: ex.downsample_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingSection {
    pub log_every: u64,
    /// 0 disables periodic validation.
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Validation songs per evaluation (all when absent).
    pub eval_songs: Option<usize>,
}

impl Default for LoggingSection {
    fn default() -> Self {
        Self {
            log_every: 50,
            eval_every: 1000,
            checkpoint_every: 1000,
            eval_songs: Some(200),
        }
    }
}

/// Training configuration; every field has a default, so a TOML file only
/// needs the values it changes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub optimization: OptimSection,
    pub editing: EditingSection,
    pub logging: LoggingSection,
}

impl TrainConfig {
    /// A schedule that fits a single CPU core in minutes: a small model with
    /// a higher peak learning rate over fewer, smaller batches.
    pub fn toy() -> Self {
        Self {
            model: ModelSection {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                ff_mult: 4,
                ..Default::default()
            },
            optimization: OptimSection {
                steps: 3000,
                batch_size: 16,
                lr: 3e-3,
                warmup_steps: 200,
                min_lr_ratio: 0.05,
                ..Default::default()
            },
            logging: LoggingSection {
                log_every: 100,
                eval_every: 0,
                checkpoint_every: 0,
                eval_songs: Some(200),
            },
            ..Default::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        DType::from_bits(self.model.precision).map_err(|e| Error::Config(e.to_string()))?;
        let o = &self.optimization;
        if o.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("invalid Adam betas or eps".into());
        }
        if !(0.0..=1.0).contains(&o.min_lr_ratio) || o.weight_decay < 0.0 || !(o.grad_clip > 0.0) {
            return bad("min_lr_ratio, weight_decay or grad_clip out of range".into());
        }
        if !(0.0..=1.0).contains(&self.editing.p_edit) || self.editing.downsample_factor == 0 {
            return bad("p_edit must be in [0, 1] and downsample_factor >= 1".into());
        }
        if self.data.plain_frames == 0 || self.data.edit_frames < self.editing.downsample_factor {
            return bad("crop lengths too short".into());
        }
        if self.logging.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        Ok(())
    }

    pub fn example_config(&self) -> ExampleConfig {
        ExampleConfig {
            p_edit: self.editing.p_edit,
            plain_frames: self.data.plain_frames,
            edit_frames: self.data.edit_frames,
            downsample_factor: self.editing.downsample_factor,
        }
    }

    /// Model configuration for a dataset layout. `max_frames` leaves room
    /// to edit a whole plain-length crop at inference time, not just the
    /// shorter editing crops seen in training.
    pub fn model_config(&self, layout: &LayoutSpec, n_conditions: usize) -> ModelConfig {
        let d = layout.max_delay();
        let f = self.editing.downsample_factor;
        let body = self.data.edit_frames.max(self.data.plain_frames);
        let edit_len = body / f + 1 + body + d;
        let mut cfg = ModelConfig::new(layout.clone(), n_conditions);
        cfg.d_model = self.model.d_model;
        cfg.n_layers = self.model.n_layers;
        cfg.n_heads = self.model.n_heads;
        cfg.ff_mult = self.model.ff_mult;
        cfg.condition_dropout = self.model.condition_dropout;
        cfg.zero_init_heads = self.model.zero_init_heads;
        cfg.max_frames = (self.data.plain_frames + d).max(edit_len);
        cfg
    }

    pub fn adam(&self) -> AdamWConfig {
        let o = &self.optimization;
        AdamWConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        let o = &self.optimization;
        LrSchedule {
            peak_lr: o.lr,
            warmup_steps: o.warmup_steps,
            total_steps: o.steps,
            min_ratio: o.min_lr_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Optimizer state plus everything needed to continue a run bit-exactly.
pub struct Trainer<'a, F> {
    pub config: TrainConfig,
    pub model: Model<F>,
    pub optimizer: AdamState<F>,
    pub rng: ChaCha8Rng,
    /// Completed updates.
    pub step: u64,
    data: &'a Dataset,
    train_ids: Vec<usize>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.optimization.seed);
        let model = Model::new(config.model_config(data.layout(), data.manifest.n_conditions), &mut rng)?;
        let optimizer = AdamState::new(&model.params);
        Self::assemble(config, model, optimizer, rng, 0, data)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: ModelCheckpoint<F>, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        let rng = ckpt
            .rng
            .ok_or_else(|| Error::Config("checkpoint has no RNG state".into()))?
            .restore();
        Self::assemble(config, ckpt.model, optimizer, rng, ckpt.step, data)
    }

    fn assemble(
        config: TrainConfig,
        model: Model<F>,
        optimizer: AdamState<F>,
        rng: ChaCha8Rng,
        step: u64,
        data: &'a Dataset,
    ) -> Result<Self> {
        if !model.config.layout.same_structure(data.layout()) {
            return Err(Error::LayoutMismatch(
                "dataset layout differs from the model layout".into(),
            ));
        }
        if model.config.n_conditions != data.manifest.n_conditions {
            return Err(Error::Dataset(format!(
                "dataset has {} conditions, model {}",
                data.manifest.n_conditions, model.config.n_conditions
            )));
        }
        let train_ids = data.split(Split::Train);
        if train_ids.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            step,
            data,
            train_ids,
        })
    }

    /// Samples a batch, computes the masked mean cross-entropy and applies
    /// one update.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let ex_cfg = self.config.example_config();
        let mut batch: Vec<(ModelSequence, Condition)> = Vec::with_capacity(self.config.optimization.batch_size);
        for _ in 0..self.config.optimization.batch_size {
            let id = self.train_ids[self.rng.random_range(0..self.train_ids.len())];
            let ex = assemble_training_example(&self.data.grids[id], &ex_cfg, &mut self.rng)?;
            let cond = self
                .model
                .drop_condition(Condition::Id(self.data.condition(id)), &mut self.rng);
            batch.push((ex.sequence, cond));
        }
        let total: usize = batch.iter().map(|(s, _)| s.n_loss_cells()).sum();
        if total == 0 {
            return Err(Error::EmptyMask);
        }
        let scale = 1.0 / total as f64;
        let mut grads = self.model.params.zeros_like();
        let mut loss_sum = 0.0;
        for (seq, cond) in &batch {
            let fwd = self.model.forward_train(&ModelInput::from_sequence(seq, *cond))?;
            let (loss, dlogits) = cross_entropy(&fwd.logits, seq.grid.grid(), &seq.loss_mask, Some(scale))?;
            loss_sum += loss.sum;
            self.model
                .backward(&fwd, &dlogits.expect("gradient requested"), &mut grads);
        }
        let loss = loss_sum * scale;
        let grad_norm = clip_grad_norm(&mut grads, self.config.optimization.grad_clip);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let lr = self.config.schedule().lr(self.step);
        self.optimizer
            .step(&self.config.adam(), lr, &mut self.model.params, &grads);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> ModelCheckpoint<F> {
        ModelCheckpoint {
            model: self.model.clone(),
            step: self.step,
            optimizer: Some(self.optimizer.clone()),
            rng: Some(RngState::capture(&self.rng)),
            train_config: serde_json::to_value(&self.config).ok(),
        }
    }
}

/// Mean per-stream cross-entropy on plain sequences of a split, with the
/// unigram baseline: the entropy of each stream's empirical token
/// distribution over the same cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutReport {
    pub split: Split,
    pub n_songs: usize,
    pub stream_ce: Vec<f64>,
    pub unigram_entropy: Vec<f64>,
    pub mean_ce: f64,
}

impl HeldoutReport {
    /// `1 - ce / unigram` per stream.
    pub fn relative_gain(&self) -> Vec<f64> {
        self.stream_ce
            .iter()
            .zip(&self.unigram_entropy)
            .map(|(ce, h)| if *h > 0.0 { 1.0 - ce / h } else { f64::NAN })
            .collect()
    }
}

/// Entropy (nats) of the empirical distribution of `tokens`.
pub fn unigram_entropy(tokens: &[u32]) -> f64 {
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn evaluate_heldout<F: Scalar>(
    model: &Model<F>,
    data: &Dataset,
    split: Split,
    plain_frames: usize,
    limit: Option<usize>,
) -> Result<HeldoutReport> {
    let mut ids = data.split(split);
    if let Some(n) = limit {
        ids.truncate(n);
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!("empty {split:?} split")));
    }
    let n_streams = data.layout().n_streams();
    let mut sums = vec![0.0; n_streams];
    let mut counts = vec![0usize; n_streams];
    let mut targets: Vec<Vec<u32>> = vec![Vec::new(); n_streams];
    for &id in &ids {
        let grid = &data.grids[id];
        let body = grid.slice_frames(0, plain_frames.min(grid.n_frames()))?;
        let seq = ModelSequence::plain(&body);
        let logits = model.forward(&ModelInput::from_sequence(&seq, Condition::Id(data.condition(id))))?;
        let (loss, _) = cross_entropy(&logits, seq.grid.grid(), &seq.loss_mask, None)?;
        let n = seq.len();
        for s in 0..n_streams {
            sums[s] += loss.stream_sum[s];
            counts[s] += loss.stream_count[s];
            let row = seq.grid.grid().row(s);
            targets[s].extend((0..n).filter(|&t| seq.loss_mask[s * n + t]).map(|t| row[t]));
        }
    }
    let stream_ce: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let total: usize = counts.iter().sum();
    Ok(HeldoutReport {
        split,
        n_songs: ids.len(),
        mean_ce: sums.iter().sum::<f64>() / total as f64,
        unigram_entropy: targets.iter().map(|t| unigram_entropy(t)).collect(),
        stream_ce,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub validation: Option<HeldoutReport>,
    pub elapsed_s: f64,
}

fn append_jsonl(path: &Path, record: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{record}")?;
    Ok(())
}

/// Runs (or resumes) training, writing `metrics.jsonl`, periodic
/// `last.ckpt` and the final `model.ckpt` under `out_dir`.
pub fn train(config: &TrainConfig, dataset_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = Dataset::load(dataset_dir)?;
    match DType::from_bits(config.model.precision)? {
        DType::F32 => run::<f32>(config, &data, out_dir, resume),
        DType::F64 => run::<f64>(config, &data, out_dir, resume),
    }
}

fn run<F: Scalar>(config: &TrainConfig, data: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = match resume {
        Some(path) => Trainer::<F>::resume(config.clone(), read_checkpoint(path)?, data)?,
        None => Trainer::<F>::new(config.clone(), data)?,
    };
    let metrics = out_dir.join(METRICS_FILE);
    if resume.is_none() && metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let start = Instant::now();
    let log = &config.logging;
    let mut last_loss = None;
    let mut validation = None;
    while trainer.step < config.optimization.steps {
        let stats = match trainer.train_step() {
            Ok(s) => s,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                write_checkpoint(out_dir.join(DIVERGED_CHECKPOINT), &trainer.checkpoint())?;
                log::error!(
                    "{e}; diagnostic checkpoint written to {}",
                    out_dir.join(DIVERGED_CHECKPOINT).display()
                );
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        last_loss = Some(stats.loss);
        let step = stats.step;
        if step % log.log_every == 0 || step == config.optimization.steps {
            let elapsed = start.elapsed().as_secs_f64();
            log::info!(
                "step {step} loss {:.4} lr {:.2e} |g| {:.3}",
                stats.loss,
                stats.lr,
                stats.grad_norm
            );
            append_jsonl(
                &metrics,
                &serde_json::json!({"step": step, "loss": stats.loss, "lr": stats.lr,
                                    "grad_norm": stats.grad_norm, "elapsed_s": elapsed}),
            )?;
        }
        if log.eval_every > 0 && step % log.eval_every == 0 && !data.split(Split::Val).is_empty() {
            let report = evaluate_heldout(
                &trainer.model,
                data,
                Split::Val,
                config.data.plain_frames,
                log.eval_songs,
            )?;
            log::info!("step {step} validation ce {:.4}", report.mean_ce);
            append_jsonl(
                &metrics,
                &serde_json::json!({"step": step, "split": "val", "ce": report.mean_ce,
                                    "stream_ce": report.stream_ce}),
            )?;
            validation = Some(report);
        }
        if log.checkpoint_every > 0 && step % log.checkpoint_every == 0 {
            write_checkpoint(out_dir.join(LAST_CHECKPOINT), &trainer.checkpoint())?;
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    write_checkpoint(&final_path, &trainer.checkpoint())?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        steps: trainer.step,
        last_loss,
        validation,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
