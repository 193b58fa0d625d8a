//! Loss, evaluation and the two training regimes.
//!
//! Direct training supervises only the final context. Stepwise training runs
//! one phase per attention iteration `n = 0..=N`: phase `n` supervises the
//! posterior computed from `IF^(n)` and updates only parameters used by
//! iterations `0..=n`, moving on once validation stops improving.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, SkeletonSequence};
use crate::error::{Error, Result};
use crate::gca::{AttentionMap, Units};
use crate::model::Model;
use crate::numerics::{rmsprop_step, sgd_step, GradBuffer, Matrix, RngStream};

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln p[label]` with `p` clamped at [`PROB_FLOOR`].
pub fn nll_loss(posterior: &[f64], label: usize) -> Result<f64> {
    let p = posterior.get(label).ok_or_else(|| {
        Error::contract(format!("label {label} out of range for {} classes", posterior.len()))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Direct,
    Stepwise,
}

/// Parameter update rule. Both use `momentum`; RMSProp additionally
/// divides each gradient by a running RMS with decay `rms_decay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    RmsProp,
    Sgd,
}

/// Quantity watched for early stopping and best-epoch selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    Loss,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Decay of the squared-gradient average (RMSProp only).
    pub rms_decay: f64,
    pub dropout: f64,
    /// Hidden and context width `d`.
    pub hidden: usize,
    pub batch_size: usize,
    /// Epoch budget of the whole run (direct) or of each step (stepwise).
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before stopping a phase.
    pub patience: usize,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub monitor: Monitor,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.5e-3,
            decay_rate: 0.95,
            momentum: 0.9,
            optimizer: Optimizer::RmsProp,
            rms_decay: 0.95,
            dropout: 0.5,
            hidden: 128,
            batch_size: 16,
            max_epochs: 50,
            patience: 3,
            clip_norm: 5.0,
            monitor: Monitor::Loss,
            regime: Regime::Direct,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("invalid training config: {what}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad("rms_decay must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("hidden, batch_size and max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0");
        }
        Ok(())
    }

    /// Learning rate of a (0-based, run-global) epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_rate.powi(epoch as i32)
    }
}

/// Sequences used by a training run. `test` may be empty.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [SkeletonSequence],
    pub validation: &'a [SkeletonSequence],
    pub test: &'a [SkeletonSequence],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Stepwise phase, absent for direct training.
    pub step: Option<usize>,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBoundary {
    pub step: usize,
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Regime,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepBoundary>,
    pub best_epoch: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    /// Epoch at which a non-finite loss or gradient stopped training.
    pub diverged_at: Option<usize>,
    /// Wall-clock seconds per epoch; kept out of the serialized report so
    /// that reports of repeated runs compare equal.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

impl PartialEq for TrainReport {
    /// Ignores wall-clock timing.
    fn eq(&self, other: &Self) -> bool {
        self.regime == other.regime
            && self.epochs == other.epochs
            && self.steps == other.steps
            && self.best_epoch == other.best_epoch
            && self.test_accuracy == other.test_accuracy
            && self.test_loss == other.test_loss
            && self.diverged_at == other.diverged_at
    }
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Step(&'a StepBoundary),
    Summary {
        regime: Regime,
        best_epoch: Option<usize>,
        test_accuracy: Option<f64>,
        test_loss: Option<f64>,
        diverged_at: Option<usize>,
    },
}

impl TrainReport {
    fn new(regime: Regime) -> Self {
        Self {
            regime,
            epochs: Vec::new(),
            steps: Vec::new(),
            best_epoch: None,
            test_accuracy: None,
            test_loss: None,
            diverged_at: None,
            epoch_seconds: Vec::new(),
        }
    }

    /// One JSON record per line: epochs, then step boundaries, then a summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |line: ReportLine<'_>| -> Result<()> {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
            Ok(())
        };
        for e in &self.epochs {
            push(ReportLine::Epoch(e))?;
        }
        for s in &self.steps {
            push(ReportLine::Step(s))?;
        }
        push(ReportLine::Summary {
            regime: self.regime,
            best_epoch: self.best_epoch,
            test_accuracy: self.test_accuracy,
            test_loss: self.test_loss,
            diverged_at: self.diverged_at,
        })?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    /// Writes per-epoch wall-clock times, one `{"epoch", "seconds"}` per line.
    pub fn save_timing(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (e, s) in self.epochs.iter().zip(&self.epoch_seconds) {
            writeln!(f, "{}", serde_json::json!({ "epoch": e.epoch, "seconds": s }))?;
        }
        f.flush()?;
        Ok(())
    }

    /// Fails with [`Error::Divergence`] if training stopped on a non-finite value.
    pub fn ensure_converged(&self) -> Result<()> {
        match self.diverged_at {
            None => Ok(()),
            Some(epoch) => Err(Error::Divergence {
                epoch,
                loss: self.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            }),
        }
    }

    /// First epoch whose validation loss is at or below `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val_loss <= target).map(|e| e.epoch + 1)
    }

    pub fn min_val_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, confusion matrix and mean loss at full depth, without dropout.
pub fn evaluate(model: &Model, sequences: &[SkeletonSequence]) -> Result<Evaluation> {
    evaluate_at_depth(model, sequences, model.max_depth())
}

pub fn evaluate_at_depth(model: &Model, sequences: &[SkeletonSequence], depth: usize) -> Result<Evaluation> {
    if sequences.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty set"));
    }
    let c = model.spec.dims.classes;
    let mut confusion = vec![vec![0; c]; c];
    let mut loss = 0.0;
    let mut correct = 0;
    for s in sequences {
        if s.label >= c {
            return Err(Error::contract(format!("sequence `{}` has label {} >= {c}", s.id, s.label)));
        }
        let tr = model.forward(s, depth, None)?;
        let p = tr.posterior();
        loss += nll_loss(p, s.label)?;
        let k = argmax(p);
        confusion[s.label][k] += 1;
        if k == s.label {
            correct += 1;
        }
    }
    let n = sequences.len();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
        confusion,
        count: n,
    })
}

/// Mean over frames of the share of each frame's attention mass that lies
/// on the `informative` units.
pub fn attention_quality(map: &AttentionMap, informative: &[usize]) -> Result<f64> {
    if informative.iter().any(|&j| j >= map.units) || map.values.len() != map.units * map.frames {
        return Err(Error::shape(
            "attention_quality",
            format!("informative units {informative:?} for a {}x{} map", map.units, map.frames),
        ));
    }
    let mut total = 0.0;
    for t in 0..map.frames {
        let frame: f64 = (0..map.units).map(|u| map.get(u, t)).sum();
        let hit: f64 = informative.iter().map(|&u| map.get(u, t)).sum();
        total += if frame > 0.0 { hit / frame } else { 0.0 };
    }
    Ok(total / map.frames as f64)
}

/// Attention quality of the joint-level stream per iteration, averaged
/// over `sequences`.
pub fn mean_attention_quality(model: &Model, sequences: &[SkeletonSequence], truth: &GroundTruth) -> Result<Vec<f64>> {
    let net = model
        .attention_network()
        .ok_or_else(|| Error::contract("model has no attention maps"))?;
    let stream = net
        .streams
        .iter()
        .position(|s| s.units == Units::Joints)
        .ok_or_else(|| Error::contract("model has no joint-level stream"))?;
    if sequences.is_empty() {
        return Err(Error::contract("cannot score attention on an empty set"));
    }
    let mut sums = vec![0.0; model.max_depth()];
    for s in sequences {
        let informative = truth
            .informative(s.label)
            .ok_or_else(|| Error::contract(format!("no ground truth for label {}", s.label)))?;
        let tr = model.forward(s, model.max_depth(), None)?;
        for (acc, map) in sums.iter_mut().zip(tr.attention_maps()[stream]) {
            *acc += attention_quality(map, informative)?;
        }
    }
    Ok(sums.into_iter().map(|v| v / sequences.len() as f64).collect())
}

/// Maps a non-finite intermediate value to `None`.
fn non_finite_as_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    rng: RngStream,
    grads: GradBuffer,
    epoch: usize,
    report: TrainReport,
}

enum PhaseEnd {
    Finished,
    Diverged,
}

impl Trainer<'_> {
    fn train_epoch(&mut self, model: &mut Model, depth: usize) -> Result<Option<f64>> {
        let lr = self.cfg.learning_rate_at(self.epoch);
        let n = self.data.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        let mut losses = vec![0.0; n];
        for batch in order.chunks(self.cfg.batch_size) {
            self.grads.zero();
            for &i in batch {
                let s = &self.data.train[i];
                let tr = if self.cfg.dropout > 0.0 {
                    model.forward(s, depth, Some((self.cfg.dropout, &mut self.rng)))?
                } else {
                    model.forward(s, depth, None)?
                };
                losses[i] = model.backward(&tr, s.label, &mut self.grads)?;
            }
            model.store.zero_grads();
            model.store.accumulate_grads(&self.grads, 1.0 / batch.len() as f64);
            if self.cfg.clip_norm > 0.0 {
                model.store.clip_grad_norm(self.cfg.clip_norm);
            }
            let stepped = match self.cfg.optimizer {
                Optimizer::RmsProp => rmsprop_step(&mut model.store, lr, self.cfg.rms_decay, self.cfg.momentum),
                Optimizer::Sgd => sgd_step(&mut model.store, lr, self.cfg.momentum),
            };
            match stepped {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        let loss = losses.iter().sum::<f64>() / n as f64;
        Ok(loss.is_finite().then_some(loss))
    }

    fn phase(&mut self, model: &mut Model, depth: usize, step: Option<usize>) -> Result<PhaseEnd> {
        let first_epoch = self.epoch;
        let mut best: Option<(f64, usize, Vec<Matrix>, f64)> = None;
        let mut stale = 0;
        for _ in 0..self.cfg.max_epochs {
            let start = Instant::now();
            let lr = self.cfg.learning_rate_at(self.epoch);
            let train_loss = non_finite_as_none(self.train_epoch(model, depth))?.flatten();
            let val = match train_loss {
                Some(_) => non_finite_as_none(evaluate_at_depth(model, self.data.validation, depth))?,
                None => None,
            };
            let (train_loss, val) = match (train_loss, val) {
                (Some(l), Some(v)) if v.mean_loss.is_finite() => (l, v),
                (l, _) => {
                    self.report.epochs.push(EpochRecord {
                        epoch: self.epoch,
                        step,
                        learning_rate: lr,
                        train_loss: l.unwrap_or(f64::NAN),
                        val_loss: f64::NAN,
                        val_accuracy: f64::NAN,
                    });
                    self.report.epoch_seconds.push(start.elapsed().as_secs_f64());
                    self.report.diverged_at = Some(self.epoch);
                    return Ok(PhaseEnd::Diverged);
                }
            };
            self.report.epochs.push(EpochRecord {
                epoch: self.epoch,
                step,
                learning_rate: lr,
                train_loss,
                val_loss: val.mean_loss,
                val_accuracy: val.accuracy,
            });
            self.report.epoch_seconds.push(start.elapsed().as_secs_f64());
            let metric = match self.cfg.monitor {
                Monitor::Loss => val.mean_loss,
                Monitor::Error => 1.0 - val.accuracy,
            };
            let improved = best.as_ref().map_or(true, |b| metric < b.0);
            if improved {
                best = Some((metric, self.epoch, model.store.snapshot(), val.mean_loss));
                stale = 0;
            } else {
                stale += 1;
            }
            self.epoch += 1;
            if stale >= self.cfg.patience {
                break;
            }
        }
        let (_, best_epoch, snapshot, best_loss) = best.expect("at least one epoch");
        model.store.restore(&snapshot);
        model.store.reset_momentum();
        self.report.best_epoch = Some(best_epoch);
        if let Some(step) = step {
            self.report.steps.push(StepBoundary {
                step,
                first_epoch,
                last_epoch: self.epoch - 1,
                best_epoch,
                best_val_loss: best_loss,
            });
        }
        Ok(PhaseEnd::Finished)
    }

    fn finish(mut self, model: &Model) -> Result<TrainReport> {
        if self.report.diverged_at.is_none() && !self.data.test.is_empty() {
            let ev = evaluate(model, self.data.test)?;
            self.report.test_accuracy = Some(ev.accuracy);
            self.report.test_loss = Some(ev.mean_loss);
        }
        Ok(self.report)
    }
}

fn trainer<'a>(model: &Model, data: TrainData<'a>, cfg: &'a TrainConfig, regime: Regime) -> Result<Trainer<'a>> {
    cfg.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::contract("training needs nonempty train and validation sets"));
    }
    Ok(Trainer {
        cfg,
        data,
        rng: RngStream::substream(cfg.seed, 1),
        grads: GradBuffer::for_store(&model.store),
        epoch: 0,
        report: TrainReport::new(regime),
    })
}

/// Trains every parameter against the final posterior. The returned model
/// holds the best-validation parameters. A non-finite loss stops training
/// and is recorded in [`TrainReport::diverged_at`].
pub fn train_direct(model: &mut Model, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut t = trainer(model, data, cfg, Regime::Direct)?;
    model.store.set_all_trainable(true);
    model.store.reset_momentum();
    t.phase(model, model.max_depth(), None)?;
    model.store.set_all_trainable(true);
    t.finish(model)
}

/// Trains attention iterations one at a time, each phase starting from the
/// previous phase's best parameters.
pub fn train_stepwise(model: &mut Model, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut t = trainer(model, data, cfg, Regime::Stepwise)?;
    model.store.reset_momentum();
    for step in 0..=model.max_depth() {
        model.set_trainable_for_step(step);
        if let PhaseEnd::Diverged = t.phase(model, step, Some(step))? {
            break;
        }
    }
    model.store.set_all_trainable(true);
    t.finish(model)
}

/// Dispatches on `cfg.regime`.
pub fn train(model: &mut Model, data: TrainData<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    match cfg.regime {
        Regime::Direct => train_direct(model, data, cfg),
        Regime::Stepwise => train_stepwise(model, data, cfg),
    }
}
