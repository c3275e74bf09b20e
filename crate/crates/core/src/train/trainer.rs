use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::Sgd;
use crate::autograd::Tape;
use crate::config::{AugmentMode, StageConfig};
use crate::data::{
    epoch_plan, AugmentConfig, DatasetManifest, EpochEntry, FoldAssignment, ImageSet, Label,
};
use crate::error::{Error, Result};
use crate::model::{build_stage, load_checkpoint, CheckpointMeta, Model};
use crate::nn::{accumulate_grads, named_tensors, softmax_cross_entropy_weighted};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 1;
const PLAN_STREAM: u64 = 1 << 20;
const AUG_STREAM: u64 = 2 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
    /// Learning-rate factor applied after every `patience / 2` flat epochs.
    pub lr_decay: f64,
    pub seed: u64,
    /// Loss weights `[normal, cancer]`; unweighted when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<[f64; 2]>,
    pub eval_batch_size: usize,
    /// Transform ranges; which samples get augmented is set by the stage.
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 30,
            patience: 6,
            lr_decay: 0.1,
            seed: 7,
            class_weights: None,
            eval_batch_size: 64,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size {} is below 2, which batch norm needs",
                self.batch_size
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.eval_batch_size == 0 {
            return bad("max_epochs, patience and eval_batch_size must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!(
                    "class weights {w:?} must be non-negative and not all zero"
                ));
            }
        }
        self.augment.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub report: MetricsReport,
}

/// Per-epoch metrics, written as `epoch,split,acc,f1_n,f1_c,loss` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_LOG_HEADER: &str = "epoch,split,acc,f1_n,f1_c,loss";

impl MetricsLog {
    pub fn line(r: &EpochRecord) -> String {
        format!(
            "{},{},{:.2},{:.2},{:.2},{:.6}",
            r.epoch,
            r.split,
            100.0 * r.report.accuracy,
            100.0 * r.report.f1_normal,
            100.0 * r.report.f1_cancer,
            r.report.loss.unwrap_or(f64::NAN)
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::line(r));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn val_accuracies(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Val)
            .map(|r| r.report.accuracy)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// Validation accuracy reached 100%.
    Saturated,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch, in eval mode.
    pub model: Model,
    pub meta: CheckpointMeta,
    pub log: MetricsLog,
    pub epochs_run: usize,
    pub stop: StopReason,
    /// Mean loss of every optimiser step, per epoch.
    pub batch_losses: Vec<Vec<f64>>,
}

/// Mean cross-entropy of `[n×2]` logits without recording gradients.
fn loss_value(logits: &Tensor, labels: &[usize], weights: Option<&[f64]>) -> Result<f64> {
    let mut tape = Tape::inference();
    let l = tape.constant(logits.clone());
    let loss = softmax_cross_entropy_weighted(&mut tape, l, labels, weights)?;
    tape.value(loss).item()
}

/// Metrics and mean loss of `model` on `set`, in eval mode. The model is not
/// modified.
pub fn evaluate(model: &Model, set: &ImageSet, batch_size: usize) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let mut logits = Vec::with_capacity(2 * set.len());
    let mut loss = 0.0;
    let all: Vec<EpochEntry> = (0..set.len())
        .map(|index| EpochEntry {
            index,
            augment: false,
        })
        .collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = set.batch(chunk, &AugmentConfig::identity(), &Rng::new(0), 0)?;
        let y = model.predict(&x)?;
        loss += loss_value(&y, &set.labels_of(chunk), None)? * chunk.len() as f64;
        logits.extend_from_slice(y.data());
    }
    Ok(MetricsReport::from_logits(&logits, &set.labels)?.with_loss(loss / set.len() as f64))
}

/// What the shared epoch loop needs from a trainable model.
trait Learner {
    /// One optimiser step; returns the batch logits and loss.
    fn step(&mut self, batch: &[EpochEntry], stream: u64, opt: &mut Sgd)
        -> Result<(Vec<f64>, f64)>;
    fn validate(&self) -> Result<MetricsReport>;
    fn snapshot(&self) -> Model;
}

fn diverged(epoch: usize, lr: f64, detail: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        learning_rate: lr,
        detail: detail.into(),
    }
}

fn run_epochs<L: Learner>(
    learner: &mut L,
    labels: &[Label],
    mode: AugmentMode,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let base = Rng::new(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut log = MetricsLog::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut flat = 0usize;
    let decay_every = (cfg.patience / 2).max(1);
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0;
    let mut batch_losses = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let plan = epoch_plan(labels, mode, &mut base.derive(PLAN_STREAM + epoch as u64))?;
        let mut logits = Vec::with_capacity(2 * plan.len());
        let mut truth = Vec::with_capacity(plan.len());
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut trace = Vec::new();
        for (bi, chunk) in plan.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("dropping a trailing batch of {}", chunk.len());
                continue;
            }
            let stream = ((epoch as u64) << 32) + (bi * cfg.batch_size) as u64;
            let (y, loss) = match learner.step(chunk, stream, &mut opt) {
                Ok(v) => v,
                Err(Error::Numeric(m)) => return Err(diverged(epoch, opt.learning_rate, m)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(
                    epoch,
                    opt.learning_rate,
                    format!("training loss became {loss}"),
                ));
            }
            trace.push(loss);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            logits.extend(y);
            truth.extend(chunk.iter().map(|e| labels[e.index]));
        }
        if seen == 0 {
            return Err(Error::Data(
                "training set yields no batch of at least 2 samples".into(),
            ));
        }
        batch_losses.push(trace);
        let train = MetricsReport::from_logits(&logits, &truth)?.with_loss(loss_sum / seen as f64);
        let val = learner.validate()?;
        if !val.loss.is_some_and(f64::is_finite) {
            return Err(diverged(
                epoch,
                opt.learning_rate,
                "validation loss is not finite",
            ));
        }
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.2}%, val loss {:.4} acc {:.2}%",
            train.loss.unwrap_or(f64::NAN),
            100.0 * train.accuracy,
            val.loss.unwrap_or(f64::NAN),
            100.0 * val.accuracy
        );
        let acc = val.accuracy;
        log.records.push(EpochRecord {
            epoch,
            split: Split::Train,
            report: train,
        });
        log.records.push(EpochRecord {
            epoch,
            split: Split::Val,
            report: val,
        });
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, learner.snapshot()));
            flat = 0;
        } else {
            flat += 1;
            if flat % decay_every == 0 {
                opt.learning_rate *= cfg.lr_decay;
                log::info!(
                    "validation flat for {flat} epochs; learning rate now {:e}",
                    opt.learning_rate
                );
            }
        }
        if acc >= 1.0 {
            stop = StopReason::Saturated;
            break;
        }
        if flat >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    let (acc, epoch, mut model) = best.expect("at least one epoch ran");
    model.set_training(false);
    Ok(TrainOutcome {
        model,
        meta: CheckpointMeta {
            epoch,
            val_accuracy: 100.0 * acc,
        },
        log,
        epochs_run,
        stop,
        batch_losses,
    })
}

struct SingleLearner<'a> {
    model: Model,
    train: &'a ImageSet,
    val: &'a ImageSet,
    aug: AugmentConfig,
    aug_rng: Rng,
    weights: Option<[f64; 2]>,
    eval_batch: usize,
}

impl Learner for SingleLearner<'_> {
    fn step(
        &mut self,
        batch: &[EpochEntry],
        stream: u64,
        opt: &mut Sgd,
    ) -> Result<(Vec<f64>, f64)> {
        let x = self.train.batch(batch, &self.aug, &self.aug_rng, stream)?;
        let labels = self.train.labels_of(batch);
        self.model.set_training(true);
        let mut tape = Tape::new();
        let y = self.model.forward(&mut tape, &x)?;
        let loss = softmax_cross_entropy_weighted(
            &mut tape,
            y,
            &labels,
            self.weights.as_ref().map(|w| &w[..]),
        )?;
        let lv = tape.value(loss).item()?;
        let logits = tape.value(y).data().to_vec();
        if !lv.is_finite() {
            return Ok((logits, lv));
        }
        tape.backward(loss)?;
        accumulate_grads(&mut self.model, &tape)?;
        opt.step(&mut self.model)?;
        self.model.post_step();
        Ok((logits, lv))
    }

    fn validate(&self) -> Result<MetricsReport> {
        evaluate(&self.model, self.val, self.eval_batch)
    }

    fn snapshot(&self) -> Model {
        self.model.clone()
    }
}

/// Train a single stage (S1, S2 or S2C) on in-memory image sets.
pub fn train_stage(
    stage: &StageConfig,
    cfg: &TrainConfig,
    train: &ImageSet,
    val: &ImageSet,
) -> Result<TrainOutcome> {
    if stage.stage.is_hybrid() {
        return Err(Error::Config(format!(
            "stage {} is trained with train_hybrid",
            stage.stage
        )));
    }
    cfg.validate()?;
    check_sets(stage, train, val)?;
    let base = Rng::new(cfg.seed);
    let model = build_stage(stage, None, &mut base.derive(INIT_STREAM))?;
    let mut learner = SingleLearner {
        model,
        train,
        val,
        aug: AugmentConfig {
            mode: stage.augmentation,
            ..cfg.augment.clone()
        },
        aug_rng: base.derive(AUG_STREAM),
        weights: cfg.class_weights,
        eval_batch: cfg.eval_batch_size,
    };
    run_epochs(&mut learner, &train.labels, stage.augmentation, cfg)
}

fn check_sets(stage: &StageConfig, train: &ImageSet, val: &ImageSet) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "training and validation sets must be non-empty".into(),
        ));
    }
    for s in [train, val] {
        if s.size != stage.input_size {
            return Err(Error::Data(format!(
                "images are {}×{} but the stage expects {}",
                s.size, s.size, stage.input_size
            )));
        }
    }
    Ok(())
}

/// Load the training folds (all but `val_fold`) and the validation fold.
pub fn load_fold_sets(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    val_fold: usize,
    size: usize,
) -> Result<(ImageSet, ImageSet)> {
    if val_fold >= folds.k {
        return Err(Error::Config(format!(
            "validation fold {val_fold} is not below k = {}",
            folds.k
        )));
    }
    let train = ImageSet::load(manifest, &folds.train_records(manifest, val_fold), size)?;
    let val = ImageSet::load(manifest, &folds.fold_records(manifest, val_fold), size)?;
    Ok((train, val))
}

/// Train a single stage on every fold except `val_fold`, validating on it.
pub fn train(
    stage: &StageConfig,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    val_fold: usize,
) -> Result<TrainOutcome> {
    let (tr, va) = load_fold_sets(manifest, folds, val_fold, stage.input_size)?;
    train_stage(stage, cfg, &tr, &va)
}

/// Short SHA-256 of every tensor's little-endian bytes, by name.
pub fn parameter_hashes(model: &Model) -> BTreeMap<String, String> {
    named_tensors(model)
        .into_iter()
        .map(|(name, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name, crate::config::short_hash(&bytes))
        })
        .collect()
}

/// Parameter hashes before and after hybrid training.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeAudit {
    pub before: BTreeMap<String, String>,
    pub after: BTreeMap<String, String>,
}

impl FreezeAudit {
    pub fn changed(&self) -> Vec<String> {
        self.before
            .iter()
            .filter(|(k, v)| self.after.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Component tensors (everything outside the fusion layer) that changed.
    pub fn changed_components(&self) -> Vec<String> {
        self.changed()
            .into_iter()
            .filter(|n| !n.starts_with("fc."))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct HybridOutcome {
    pub outcome: TrainOutcome,
    pub audit: FreezeAudit,
}

/// Bilinear features of every image, computed in eval mode.
fn feature_table(model: &Model, set: &ImageSet, batch_size: usize) -> Result<Tensor> {
    let all: Vec<EpochEntry> = (0..set.len())
        .map(|index| EpochEntry {
            index,
            augment: false,
        })
        .collect();
    let mut parts = Vec::new();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = set.batch(chunk, &AugmentConfig::identity(), &Rng::new(0), 0)?;
        parts.push(model.extract_features(&x)?);
    }
    let width = model.feature_width();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![set.len(), width], data)
}

fn rows(table: &Tensor, idx: impl Iterator<Item = usize>) -> Result<Tensor> {
    let w = table.shape()[1];
    let mut data = Vec::new();
    let mut n = 0;
    for i in idx {
        data.extend_from_slice(&table.data()[i * w..(i + 1) * w]);
        n += 1;
    }
    Tensor::new(vec![n, w], data)
}

struct HybridLearner<'a> {
    model: Model,
    train: &'a ImageSet,
    val: &'a ImageSet,
    train_features: Option<Tensor>,
    val_features: Tensor,
    aug: AugmentConfig,
    aug_rng: Rng,
    weights: Option<[f64; 2]>,
    eval_batch: usize,
}

impl Learner for HybridLearner<'_> {
    fn step(
        &mut self,
        batch: &[EpochEntry],
        stream: u64,
        opt: &mut Sgd,
    ) -> Result<(Vec<f64>, f64)> {
        let f = match &self.train_features {
            Some(table) if !batch.iter().any(|e| e.augment) => {
                rows(table, batch.iter().map(|e| e.index))?
            }
            _ => {
                let x = self.train.batch(batch, &self.aug, &self.aug_rng, stream)?;
                self.model.extract_features(&x)?
            }
        };
        let labels = self.train.labels_of(batch);
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let y = self.model.fuse(&mut tape, fv)?;
        let loss = softmax_cross_entropy_weighted(
            &mut tape,
            y,
            &labels,
            self.weights.as_ref().map(|w| &w[..]),
        )?;
        let lv = tape.value(loss).item()?;
        let logits = tape.value(y).data().to_vec();
        if !lv.is_finite() {
            return Ok((logits, lv));
        }
        tape.backward(loss)?;
        accumulate_grads(&mut self.model, &tape)?;
        opt.step(&mut self.model)?;
        Ok((logits, lv))
    }

    fn validate(&self) -> Result<MetricsReport> {
        let n = self.val.len();
        let mut logits = Vec::with_capacity(2 * n);
        let mut loss = 0.0;
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(self.eval_batch.max(1)) {
            let f = rows(&self.val_features, chunk.iter().copied())?;
            let mut tape = Tape::inference();
            let fv = tape.constant(f);
            let y = self.model.fuse(&mut tape, fv)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| self.val.labels[i].index()).collect();
            loss += loss_value(tape.value(y), &labels, None)? * chunk.len() as f64;
            logits.extend_from_slice(tape.value(y).data());
        }
        Ok(MetricsReport::from_logits(&logits, &self.val.labels)?.with_loss(loss / n as f64))
    }

    fn snapshot(&self) -> Model {
        self.model.clone()
    }
}

/// Fuse two trained components: both stay frozen in eval mode and only the
/// new linear layer trains. Features are computed once when no sample is
/// augmented.
pub fn train_hybrid_on(
    stage: &StageConfig,
    a: Model,
    b: Model,
    cfg: &TrainConfig,
    train: &ImageSet,
    val: &ImageSet,
) -> Result<HybridOutcome> {
    if !stage.stage.is_hybrid() {
        return Err(Error::Config(format!(
            "stage {} is not a hybrid",
            stage.stage
        )));
    }
    cfg.validate()?;
    check_sets(stage, train, val)?;
    let base = Rng::new(cfg.seed);
    let model = build_stage(stage, Some((a, b)), &mut base.derive(INIT_STREAM))?;
    let before = parameter_hashes(&model);
    let train_features = if stage.augmentation == AugmentMode::None {
        Some(feature_table(&model, train, cfg.eval_batch_size)?)
    } else {
        None
    };
    let val_features = feature_table(&model, val, cfg.eval_batch_size)?;
    let mut learner = HybridLearner {
        model,
        train,
        val,
        train_features,
        val_features,
        aug: AugmentConfig {
            mode: stage.augmentation,
            ..cfg.augment.clone()
        },
        aug_rng: base.derive(AUG_STREAM),
        weights: cfg.class_weights,
        eval_batch: cfg.eval_batch_size,
    };
    let outcome = run_epochs(&mut learner, &train.labels, stage.augmentation, cfg)?;
    let after = parameter_hashes(&learner.model);
    Ok(HybridOutcome {
        outcome,
        audit: FreezeAudit { before, after },
    })
}

/// Hybrid training from component checkpoints on the fold split.
#[allow(clippy::too_many_arguments)]
pub fn train_hybrid(
    stage: &StageConfig,
    ckpt_a: &Path,
    ckpt_b: &Path,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    val_fold: usize,
) -> Result<HybridOutcome> {
    let (a, _) = load_checkpoint(ckpt_a, None)?;
    let (b, _) = load_checkpoint(ckpt_b, None)?;
    let (tr, va) = load_fold_sets(manifest, folds, val_fold, stage.input_size)?;
    train_hybrid_on(stage, a, b, cfg, &tr, &va)
}
