//! The optimisation loop, validation, checkpoint retention and the
//! architecture/sharing ablation suite.
//!
//! Batches are a pure function of `(seed, step)`, so a run resumed from a
//! checkpoint replays exactly the batches the uninterrupted run would see.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{ModelConfig, SharingMode, TrainConfig};
use crate::dataset::{assemble, draw_choice, sample_batch, Augmentation, Pool, SourceSet};
use crate::error::{Error, Result};
use crate::generator::param_count_report;
use crate::losses::{si_snr_samples, total_loss, StageBatch, StageTerms};
use crate::model::Model;
use crate::optim::{build, clip_global_norm, Lookahead, Optimizer, RAdam};
use crate::params::{GradStore, ParamStore, Scope};
use crate::rng::substream;

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Steps completed including this one.
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub stages: Vec<StageTerms>,
    /// Mean top-stage SI-SNR on the validation batches, at epoch ends.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Latest checkpoint; the best one is written next to it.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines metric log.
    pub log: Option<PathBuf>,
    /// Fixed, non-augmented batches used for validation.
    pub validation_batches: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            checkpoint: None,
            log: None,
            validation_batches: 2,
        }
    }
}

/// `run.ckpt` → `run.best.ckpt`.
pub fn best_path(latest: &Path) -> PathBuf {
    let stem = latest.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    latest.with_file_name(format!("{stem}.best.ckpt"))
}

/// Number of stages stored in a parameter set, read from the encoder names.
pub fn stage_count(params: &ParamStore) -> usize {
    (0..)
        .take_while(|j| params.count_prefix(&format!("s{j}.enc.")) > 0)
        .count()
}

fn first_non_finite(params: &ParamStore, grads: &GradStore) -> Option<String> {
    params
        .iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        .map(|(n, _)| n.to_string())
        .or_else(|| {
            grads
                .iter()
                .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
                .map(|(n, _)| format!("gradient of {n}"))
        })
}

pub struct Trainer {
    pub model: Model,
    pub train: TrainConfig,
    optimizer: Lookahead<RAdam>,
    pool: Pool,
    validation: Vec<Vec<StageBatch>>,
    step: u64,
    best: Option<(f64, u64)>,
}

impl Trainer {
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        tracks: &[SourceSet],
        validation: &[SourceSet],
        validation_batches: usize,
    ) -> Result<Self> {
        let model = Model::new(model)?;
        let optimizer = build(&train.optimizer);
        Self::assemble(model, train, optimizer, tracks, validation, validation_batches, 0, None)
    }

    pub fn resume(
        ckpt: Checkpoint,
        tracks: &[SourceSet],
        validation: &[SourceSet],
        validation_batches: usize,
    ) -> Result<Self> {
        let model = ckpt.model()?;
        let mut optimizer = build(&ckpt.meta.train.optimizer);
        optimizer.load_state(ckpt.meta.step, ckpt.optimizer)?;
        let best = ckpt.meta.best_validation.zip(ckpt.meta.best_step);
        Self::assemble(
            model,
            ckpt.meta.train,
            optimizer,
            tracks,
            validation,
            validation_batches,
            ckpt.meta.step,
            best,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Model,
        train: TrainConfig,
        optimizer: Lookahead<RAdam>,
        tracks: &[SourceSet],
        validation: &[SourceSet],
        validation_batches: usize,
        step: u64,
        best: Option<(f64, u64)>,
    ) -> Result<Self> {
        train.validate()?;
        let rates = model.config.active_rates();
        let pool = Pool::new(tracks, model.instruments(), &rates)?;
        let val_pool = if validation.is_empty() {
            log::warn!("no validation tracks; validating on the training tracks");
            pool.clone()
        } else {
            Pool::new(validation, model.instruments(), &rates)?
        };
        let crop = val_pool.crop_len(train.crop_seconds);
        let validation = (0..validation_batches.max(1) as u64)
            .map(|k| {
                let mut rng = substream(model.config.seed, "validation", k);
                let choices = (0..train.batch_size)
                    .map(|_| draw_choice(&val_pool, crop, &Augmentation::none(), &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                assemble(&val_pool, &choices, crop)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            model,
            train,
            optimizer,
            pool,
            validation,
            step,
            best,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn best(&self) -> Option<(f64, u64)> {
        self.best
    }

    /// The training batch for `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<StageBatch>> {
        let aug = Augmentation {
            shuffle_probability: self.train.shuffle_probability,
            gain_range: self.train.gain_range,
        };
        let mut rng = substream(self.model.config.seed, "batch", step);
        let crop = self.pool.crop_len(self.train.crop_seconds);
        sample_batch(&self.pool, self.train.batch_size, crop, &aug, &mut rng)
    }

    /// One optimizer step. Returns the record without validation.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        let batch = self.batch(self.step)?;
        let weights = self.model.config.effective_loss();
        let (breakdown, mut grads) = {
            let mut sc = Scope::new(&self.model.params);
            let (total, breakdown, _) = total_loss(&mut sc, &self.model, &batch, &weights)?;
            (breakdown, sc.gradients(total))
        };
        if let Some(name) = first_non_finite(&self.model.params, &grads) {
            return Err(Error::NonFinite(format!("{name} at step {}", self.step + 1)));
        }
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step + 1)));
        }
        let grad_norm = clip_global_norm(&mut grads, self.train.optimizer.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(MetricRecord {
            step: self.step,
            loss: breakdown.total,
            grad_norm,
            stages: breakdown.stages,
            validation: None,
        })
    }

    /// Top-stage SI-SNR per instrument over the validation batches.
    pub fn validation_scores(&self) -> Result<Vec<Option<f64>>> {
        validation_scores(&self.model, &self.validation)
    }

    /// Mean top-stage SI-SNR over every non-silent validation target.
    pub fn validate(&self) -> Result<f64> {
        let (sum, n) = top_stage_values(&self.model, &self.validation)?
            .into_iter()
            .flatten()
            .flatten()
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            return Err(Error::Dataset("every validation target is silent".into()));
        }
        Ok(sum / n as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.config.clone(),
                train: self.train.clone(),
                step: self.step,
                seed: self.model.config.seed,
                best_validation: self.best.map(|b| b.0),
                best_step: self.best.map(|b| b.1),
            },
            params: self.model.params.clone(),
            optimizer: self.optimizer.state(),
        }
    }

    /// Trains until `train.max_steps`, validating at every epoch end.
    pub fn run(&mut self, opts: &TrainOptions) -> Result<TrainOutcome> {
        let mut log_file = opts.log.as_deref().map(|p| open_log(p, self.step == 0)).transpose()?;
        let mut records = Vec::new();
        let mut best_ckpt = None;
        let max = self.train.max_steps as u64;
        while self.step < max {
            let mut rec = self.train_step()?;
            let epoch_end = self.step % self.train.epoch_steps as u64 == 0;
            if epoch_end {
                let v = self.validate()?;
                rec.validation = Some(v);
                log::info!("step {}: loss {:.4}, validation SI-SNR {v:.3} dB", self.step, rec.loss);
                if self.best.is_none_or(|(b, _)| v > b) {
                    self.best = Some((v, self.step));
                    let c = self.checkpoint();
                    if let Some(p) = &opts.checkpoint {
                        save_checkpoint(&c, &best_path(p))?;
                    }
                    best_ckpt = Some(c);
                }
            } else {
                log::debug!("step {}: loss {:.4}", self.step, rec.loss);
            }
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
                let path = opts.log.as_deref().expect("log path");
                writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
            }
            let periodic = self.train.checkpoint_every > 0 && self.step % self.train.checkpoint_every as u64 == 0;
            if let Some(p) = opts.checkpoint.as_ref().filter(|_| epoch_end || periodic) {
                save_checkpoint(&self.checkpoint(), p)?;
            }
            records.push(rec);
        }
        let checkpoint = self.checkpoint();
        if let Some(p) = &opts.checkpoint {
            save_checkpoint(&checkpoint, p)?;
        }
        Ok(TrainOutcome {
            checkpoint,
            best: best_ckpt,
            log: records,
        })
    }
}

fn open_log(path: &Path, fresh: bool) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut o = OpenOptions::new();
    if fresh {
        o.write(true).create(true).truncate(true);
    } else {
        o.append(true).create(true);
    }
    o.open(path).map_err(|e| Error::io(path, e))
}

/// `[instrument][row]` top-stage SI-SNR, `None` for silent targets.
fn top_stage_values(model: &Model, batches: &[Vec<StageBatch>]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut out = vec![Vec::new(); model.instruments().len()];
    for batch in batches {
        let mixtures: Vec<_> = batch.iter().map(|b| b.mixture.clone()).collect();
        let mut sc = Scope::new(&model.params);
        let vars = model.forward(&mut sc, &mixtures)?;
        let (top, targets) = (vars.last().expect("one stage"), batch.last().expect("one stage"));
        for (i, (&est, target)) in top.estimates.iter().zip(&targets.sources).enumerate() {
            let (b, _, t) = target.dims3();
            let e = sc.g.value(est).data();
            for r in 0..b {
                let span = r * t..(r + 1) * t;
                out[i].push(si_snr_samples(&e[span.clone()], &target.data()[span]).ok());
            }
        }
    }
    Ok(out)
}

fn validation_scores(model: &Model, batches: &[Vec<StageBatch>]) -> Result<Vec<Option<f64>>> {
    Ok(top_stage_values(model, batches)?
        .into_iter()
        .map(|v| {
            let present: Vec<f64> = v.into_iter().flatten().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last step.
    pub checkpoint: Checkpoint,
    /// Best validation checkpoint reached during this call.
    pub best: Option<Checkpoint>,
    pub log: Vec<MetricRecord>,
}

/// Fresh training run.
pub fn train(
    model: ModelConfig,
    train: TrainConfig,
    tracks: &[SourceSet],
    validation: &[SourceSet],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    Trainer::new(model, train, tracks, validation, opts.validation_batches)?.run(opts)
}

/// Continues from the checkpoint at `path` up to `max_steps`.
pub fn resume(
    path: &Path,
    max_steps: Option<usize>,
    tracks: &[SourceSet],
    validation: &[SourceSet],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut t = Trainer::resume(load_checkpoint(path)?, tracks, validation, opts.validation_batches)?;
    if let Some(m) = max_steps {
        t.train.max_steps = m;
    }
    t.run(opts)
}

/// The seven ablation rows: vanilla, each architecture change on its own,
/// then all changes with each sharing regime.
pub fn ablation_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let with = |name: &str, sharing, enc, aux, multi| {
        let mut c = base.clone();
        c.sharing = sharing;
        c.ablation.stronger_encoder = enc;
        c.ablation.aux_losses = aux;
        c.ablation.multi_stage = multi;
        (name.to_string(), c)
    };
    use SharingMode::*;
    vec![
        with("vanilla", Baseline, false, false, false),
        with("+ stronger enc.", Baseline, true, false, false),
        with("+ aux loss", Baseline, false, true, false),
        with("+ multi-stage", Baseline, false, false, true),
        with("baseline", Baseline, true, true, true),
        with("shared_tcn", SharedTcn, true, true, true),
        with("meta", Meta, true, true, true),
    ]
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub config: ModelConfig,
    /// Validation SI-SNR per instrument, vocabulary order.
    pub scores: Vec<Option<f64>>,
    pub average: f64,
    /// Masking parameters an instrument's extractor needs: all owned mask
    /// tensors for baseline and shared TCN, one generated set for meta.
    pub masking_params: usize,
    pub stages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub instruments: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = format!("{:<16}", "");
        for i in &self.instruments {
            s += &format!(" {i:>9}");
        }
        s += &format!(" {:>9} {:>12}\n", "avg", "mask params");
        for r in &self.rows {
            s += &format!("{:<16}", r.name);
            for v in &r.scores {
                match v {
                    Some(v) => s += &format!(" {v:>9.2}"),
                    None => s += &format!(" {:>9}", "-"),
                }
            }
            s += &format!(" {:>9.2} {:>12}\n", r.average, r.masking_params);
        }
        s
    }
}

fn masking_params(model: &Model) -> usize {
    match model.config.sharing {
        SharingMode::Meta => param_count_report(&model.config).masking.per_instrument,
        _ => model
            .params
            .iter()
            .filter(|(n, _)| n.contains(".mask."))
            .map(|(_, t)| t.len())
            .sum(),
    }
}

/// Trains every ablation row for the budget in `train`. With a `work_dir`,
/// each row checkpoints to `<work_dir>/<row>.ckpt` and an interrupted
/// suite picks up where each row stopped.
pub fn run_ablation_suite(
    base: &ModelConfig,
    train: &TrainConfig,
    tracks: &[SourceSet],
    validation: &[SourceSet],
    work_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        log::info!("ablation row `{name}`");
        let opts = TrainOptions {
            checkpoint: work_dir.map(|d| d.join(format!("{}.ckpt", slug(&name)))),
            log: work_dir.map(|d| d.join(format!("{}.jsonl", slug(&name)))),
            ..TrainOptions::default()
        };
        let existing = opts.checkpoint.as_ref().filter(|p| p.exists());
        let mut trainer = match existing {
            Some(p) => {
                let c = load_checkpoint(p)?;
                if c.meta.model != cfg {
                    return Err(Error::Config(format!(
                        "{} was written for a different configuration",
                        p.display()
                    )));
                }
                log::info!("resuming `{name}` from step {}", c.meta.step);
                let mut t = Trainer::resume(c, tracks, validation, opts.validation_batches)?;
                t.train.max_steps = train.max_steps;
                t
            }
            None => Trainer::new(cfg.clone(), train.clone(), tracks, validation, opts.validation_batches)?,
        };
        trainer.run(&opts)?;
        let scores = trainer.validation_scores()?;
        let present: Vec<f64> = scores.iter().flatten().copied().collect();
        rows.push(AblationRow {
            name,
            average: present.iter().sum::<f64>() / present.len().max(1) as f64,
            scores,
            masking_params: masking_params(&trainer.model),
            stages: stage_count(&trainer.model.params),
            config: cfg,
        });
    }
    Ok(AblationTable {
        instruments: base.instruments.clone(),
        rows,
    })
}
