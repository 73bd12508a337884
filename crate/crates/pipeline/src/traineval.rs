//! Training loop, evaluation metrics and k-fold cross validation.

use std::collections::HashMap;
use std::path::Path;

use patchgrid_core::augment::apply_policy;
use patchgrid_core::ingest::kfold_split;
use patchgrid_core::tiler::build_patch_dataset;
use patchgrid_core::{AugmentKind, AugmentPolicy, GridSpec, Manifest, PatchDataset, Rng, Split, Taxonomy, Tensor};
use patchgrid_nn::{
    adam_step, cross_entropy, knn_predict, softmax_cross_entropy_grad, AdamConfig, AdamState, Backbone, Checkpoint,
    Head, Mode, ModelSpec, Network, PlateauScheduler, ScheduleAction,
};
use serde::{Deserialize, Serialize};

use crate::data::PatchSet;
use crate::error::{PipelineError, Result};

// child stream ids under the run seed
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_FOLDS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grid: GridSpec,
    pub augment: AugmentPolicy,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub head: Head,
    pub backbone: Backbone,
    /// Model input `(height, width)`; patches are resized to it.
    pub input_size: (usize, usize),
    /// The Train split is cut into this many folds and the first one is
    /// held out for validation (5 gives 80/20).
    pub validation_folds: usize,
    /// Stop as soon as evaluation-mode training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
    /// Worker budget for evaluation passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::survey(),
            augment: AugmentPolicy::none(),
            batch_size: 32,
            initial_lr: 1e-3,
            max_epochs: 200,
            seed: 0,
            head: Head::DenseDropout,
            backbone: Backbone::SmallVgg,
            input_size: (224, 224),
            validation_folds: 5,
            target_train_accuracy: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad("initial_lr must be positive");
        }
        if self.validation_folds < 2 {
            return bad("validation_folds must be at least 2");
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input_size must be nonzero");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if let Some(t) = self.target_train_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                return bad("target_train_accuracy must be in (0, 1]");
            }
        }
        if let Head::Knn { k } = self.head {
            if k == 0 {
                return bad("knn head needs k >= 1");
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, class_count: usize) -> Result<ModelSpec> {
        let (h, w) = self.input_size;
        Ok(ModelSpec::build((h, w, 3), self.backbone, self.head, class_count)?)
    }
}

/// Anything that maps a `(N, H, W, 3)` batch to `(N, C)` class probabilities.
pub trait Classifier {
    fn taxonomy(&self) -> Taxonomy;
    fn probabilities(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A classifier that can take optimization steps.
pub trait Trainable: Classifier + Clone {
    /// One update on `batch`; returns the training-mode probabilities
    /// computed before the update.
    fn train_step(&mut self, batch: &Tensor<f32>, labels: &[usize], lr: f64, rng: &mut Rng) -> Result<Tensor<f32>>;
}

/// Network plus optimizer state.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    pub network: Network<f32>,
    pub adam: AdamState<f32>,
    pub taxonomy: Taxonomy,
}

impl NetworkModel {
    pub fn new(network: Network<f32>, learning_rate: f64, taxonomy: Taxonomy) -> Result<Self> {
        if network.class_count() != taxonomy.len() {
            return Err(PipelineError::TaxonomyMismatch {
                model: format!("{} classes", network.class_count()),
                data: format!("{:?}", taxonomy.mode()),
            });
        }
        let config = AdamConfig { learning_rate, ..AdamConfig::default() };
        let adam = AdamState::new(config, &network.params());
        Ok(Self { network, adam, taxonomy })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self { network: ckpt.network.clone(), adam: ckpt.adam.clone(), taxonomy: Taxonomy::new(ckpt.taxonomy) }
    }

    pub fn input_size(&self) -> (usize, usize) {
        let (h, w, _) = self.network.spec().input_size;
        (h, w)
    }
}

impl Classifier for NetworkModel {
    fn taxonomy(&self) -> Taxonomy {
        self.taxonomy
    }

    fn probabilities(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.network.predict(batch)?)
    }
}

impl Trainable for NetworkModel {
    fn train_step(&mut self, batch: &Tensor<f32>, labels: &[usize], lr: f64, rng: &mut Rng) -> Result<Tensor<f32>> {
        let (probs, cache) = self.network.forward(batch, Mode::Train, rng)?;
        let grads = self.network.backward_logits(&cache, softmax_cross_entropy_grad(&probs, labels)?)?;
        if !grads.is_finite() {
            return Err(PipelineError::Numeric(format!("non-finite gradient (max |g| = {})", grads.max_abs())));
        }
        self.adam.set_learning_rate(lr);
        adam_step(&mut self.network.params_mut(), &grads, &mut self.adam)?;
        Ok(probs)
    }
}

/// Untrained backbone features with a k-nearest-neighbour vote.
#[derive(Clone, Debug)]
pub struct KnnModel {
    pub network: Network<f32>,
    pub bank: Tensor<f32>,
    pub bank_labels: Vec<usize>,
    pub k: usize,
    pub taxonomy: Taxonomy,
}

impl KnnModel {
    pub fn fit(network: Network<f32>, train: &PatchSet, k: usize, batch_size: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(PipelineError::Data("knn bank is empty".into()));
        }
        let indices: Vec<usize> = (0..train.len()).collect();
        let mut rows = Vec::new();
        let mut width = 0;
        for chunk in indices.chunks(batch_size.max(1)) {
            let f = network.features(&train.batch(chunk)?)?;
            width = f.shape()[1];
            rows.extend_from_slice(f.data());
        }
        let bank = Tensor::new(vec![train.len(), width], rows)?;
        Ok(Self { network, bank, bank_labels: train.labels.clone(), k: k.min(train.len()), taxonomy: train.taxonomy })
    }
}

impl Classifier for KnnModel {
    fn taxonomy(&self) -> Taxonomy {
        self.taxonomy
    }

    /// One-hot rows at the voted class.
    fn probabilities(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let features = self.network.features(batch)?;
        let n = features.shape()[0];
        let c = self.taxonomy.len();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let class = knn_predict(features.sample(i), &self.bank, &self.bank_labels, self.k)?;
            out.data_mut()[i * c + class] = 1.0;
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self { counts: vec![vec![0; class_count]; class_count] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(PipelineError::Data("confusion matrix must be square and nonempty".into()));
        }
        Ok(Self { counts })
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.class_count()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Set where the predicted column is empty; precision is then 0.
    pub precision_undefined: Vec<bool>,
    /// Set where the true row is empty; recall is then 0.
    pub recall_undefined: Vec<bool>,
    pub accuracy: f64,
    /// Patches per true class.
    pub support: Vec<u64>,
    pub total: u64,
}

pub fn metrics(confusion: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = confusion.total();
    if total == 0 {
        return Err(PipelineError::Data("metrics of an empty confusion matrix".into()));
    }
    let c = confusion.class_count();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let cols: Vec<u64> = (0..c).map(|i| confusion.column_sum(i)).collect();
    let rows: Vec<u64> = (0..c).map(|i| confusion.row_sum(i)).collect();
    Ok(MetricsReport {
        precision: (0..c).map(|i| ratio(confusion.counts[i][i], cols[i])).collect(),
        recall: (0..c).map(|i| ratio(confusion.counts[i][i], rows[i])).collect(),
        precision_undefined: cols.iter().map(|&v| v == 0).collect(),
        recall_undefined: rows.iter().map(|&v| v == 0).collect(),
        accuracy: confusion.trace() as f64 / total as f64,
        support: rows,
        total,
    })
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl MetricsReport {
    /// Copy with every ratio rounded to 3 decimals.
    pub fn rounded(&self) -> Self {
        Self {
            precision: self.precision.iter().map(|&v| round3(v)).collect(),
            recall: self.recall.iter().map(|&v| round3(v)).collect(),
            accuracy: round3(self.accuracy),
            ..self.clone()
        }
    }

    /// Plain-text table with one row per class.
    pub fn table(&self, names: &[&str]) -> String {
        let mut out = format!("{:<12} {:>9} {:>9} {:>8}\n", "class", "precision", "recall", "patches");
        for (i, name) in names.iter().enumerate().take(self.precision.len()) {
            out += &format!("{:<12} {:>9.3} {:>9.3} {:>8}\n", name, self.precision[i], self.recall[i], self.support[i]);
        }
        out += &format!("{:<12} {:>9.3}\n", "accuracy", self.accuracy);
        out
    }
}

/// Result of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    /// Mean cross-entropy over all patches.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

fn check_taxonomy(model: Taxonomy, data: Taxonomy) -> Result<()> {
    if model != data {
        return Err(PipelineError::TaxonomyMismatch {
            model: format!("{:?}", model.mode()),
            data: format!("{:?}", data.mode()),
        });
    }
    Ok(())
}

fn probabilities_for<C: Classifier>(
    model: &C,
    patches: &PatchSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<(Tensor<f32>, f64)>> {
    indices
        .chunks(batch_size)
        .map(|chunk| {
            let p = model.probabilities(&patches.batch(chunk)?)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| patches.labels[i]).collect();
            let loss = cross_entropy(&p, &labels)?;
            Ok((p, loss * chunk.len() as f64))
        })
        .collect()
}

/// Evaluation-mode pass over every patch. Batches are split across up to
/// `threads` workers and reduced in batch order, so the result does not
/// depend on the worker count.
pub fn run_evaluation<C: Classifier + Sync>(
    model: &C,
    patches: &PatchSet,
    batch_size: usize,
    threads: usize,
) -> Result<Evaluation> {
    check_taxonomy(model.taxonomy(), patches.taxonomy)?;
    if patches.is_empty() {
        return Err(PipelineError::Data("nothing to evaluate".into()));
    }
    let batch_size = batch_size.max(1);
    let indices: Vec<usize> = (0..patches.len()).collect();
    let batches = indices.len().div_ceil(batch_size);
    let workers = threads.clamp(1, batches);
    let per_worker = batches.div_ceil(workers) * batch_size;
    let parts: Vec<Result<Vec<(Tensor<f32>, f64)>>> = if workers == 1 {
        vec![probabilities_for(model, patches, &indices, batch_size)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = indices
                .chunks(per_worker)
                .map(|part| scope.spawn(move || probabilities_for(model, patches, part, batch_size)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let c = patches.taxonomy.len();
    let mut confusion = ConfusionMatrix::new(c);
    let mut predictions = Vec::with_capacity(patches.len());
    let mut loss_sum = 0.0;
    for part in parts {
        for (probs, loss) in part? {
            for row in probs.data().chunks(c) {
                let i = predictions.len();
                let p = argmax(row);
                confusion.add(patches.labels[i], p);
                predictions.push(p);
            }
            loss_sum += loss;
        }
    }
    Ok(Evaluation { confusion, loss: loss_sum / patches.len() as f64, predictions })
}

/// Confusion matrix of argmax predictions, batch 32, one worker.
pub fn evaluate<C: Classifier + Sync>(model: &C, patches: &PatchSet) -> Result<ConfusionMatrix> {
    Ok(run_evaluation(model, patches, 32, 1)?.confusion)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The plateau schedule ran out of halvings.
    Scheduler,
    MaxEpochs,
    TargetAccuracy,
    /// Non-parametric head; no epochs were run.
    NotTrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Accuracy of the training-mode forward passes (dropout, augmentation).
    pub train_accuracy: f64,
    /// Evaluation-mode training accuracy; only measured with a target.
    pub clean_train_accuracy: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub action: ScheduleAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stop: StopReason,
}

impl History {
    /// Epochs at which the learning rate was halved.
    pub fn halvings(&self) -> Vec<usize> {
        self.epochs.iter().filter(|e| e.action == ScheduleAction::Halve).map(|e| e.epoch).collect()
    }
}

/// Best-validation-loss snapshot of a training run.
#[derive(Clone, Debug)]
pub struct Fitted<M> {
    pub model: M,
    pub scheduler: PlateauScheduler,
    pub history: History,
}

fn count_correct(probs: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = probs.shape()[1];
    probs.data().chunks(c).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Runs the epoch loop: shuffle, augment (training patches only), step,
/// validate, schedule. Returns the model from the epoch with the lowest
/// validation loss.
pub fn fit<M: Trainable + Sync>(
    mut model: M,
    train: &PatchSet,
    val: &PatchSet,
    config: &TrainConfig,
) -> Result<Fitted<M>> {
    config.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Data("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(PipelineError::Data("validation split is empty".into()));
    }
    check_taxonomy(model.taxonomy(), train.taxonomy)?;
    let root = Rng::seeded(config.seed);
    let mut scheduler = PlateauScheduler::new(config.initial_lr);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, M, PlateauScheduler)> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..config.max_epochs {
        let lr = scheduler.current_lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.child(STREAM_SHUFFLE).child(epoch as u64).shuffle(&mut order);
        let augment_stream = root.child(STREAM_AUGMENT).child(epoch as u64);
        let dropout_stream = root.child(STREAM_DROPOUT).child(epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = if config.augment.kind == AugmentKind::None {
                train.batch(chunk)?
            } else {
                let augmented = chunk
                    .iter()
                    .map(|&i| apply_policy(&train.tensors[i], &config.augment, &mut augment_stream.child(i as u64)))
                    .collect::<patchgrid_core::Result<Vec<_>>>()?;
                Tensor::stack(&augmented.iter().collect::<Vec<_>>())?
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let probs =
                model.train_step(&batch, &labels, lr, &mut dropout_stream.child(b as u64)).map_err(|e| match e {
                    PipelineError::Numeric(m) => {
                        PipelineError::Numeric(format!("epoch {epoch} batch {b} lr {lr}: {m}"))
                    }
                    other => other,
                })?;
            let loss = cross_entropy(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(PipelineError::Numeric(format!(
                    "epoch {epoch} batch {b} lr {lr}: training loss is {loss}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&probs, &labels);
        }
        let v = run_evaluation(&model, val, config.batch_size, config.threads)?;
        if !v.loss.is_finite() {
            return Err(PipelineError::Numeric(format!("epoch {epoch} lr {lr}: validation loss is {}", v.loss)));
        }
        let clean_train_accuracy = match config.target_train_accuracy {
            Some(_) => {
                Some(metrics(&run_evaluation(&model, train, config.batch_size, config.threads)?.confusion)?.accuracy)
            }
            None => None,
        };
        let action = scheduler.update(v.loss);
        if best.as_ref().is_none_or(|b| v.loss < b.1) {
            best = Some((epoch, v.loss, model.clone(), scheduler.clone()));
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            clean_train_accuracy,
            val_loss: v.loss,
            val_accuracy: v.confusion.trace() as f64 / v.confusion.total() as f64,
            action,
        };
        log::info!(
            "epoch={} split=train loss={:.5} acc={:.4} lr={} | split=val loss={:.5} acc={:.4}{}",
            epoch,
            record.train_loss,
            record.train_accuracy,
            lr,
            record.val_loss,
            record.val_accuracy,
            if action == ScheduleAction::Continue { String::new() } else { format!(" action={action:?}") }
        );
        epochs.push(record);
        if let (Some(target), Some(acc)) = (config.target_train_accuracy, clean_train_accuracy) {
            if acc >= target {
                stop = StopReason::TargetAccuracy;
                break;
            }
        }
        if action == ScheduleAction::Stop {
            stop = StopReason::Scheduler;
            break;
        }
    }
    let (best_epoch, best_val_loss, model, scheduler) = best.expect("at least one epoch ran");
    Ok(Fitted {
        model,
        scheduler,
        history: History { epochs, best_epoch: Some(best_epoch), best_val_loss: Some(best_val_loss), stop },
    })
}

/// A trained checkpoint with its training history and validation metrics.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: History,
    pub validation: MetricsReport,
}

/// Classifier restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum LoadedModel {
    Network(NetworkModel),
    Knn(KnnModel),
}

impl Classifier for LoadedModel {
    fn taxonomy(&self) -> Taxonomy {
        match self {
            Self::Network(m) => m.taxonomy(),
            Self::Knn(m) => m.taxonomy(),
        }
    }

    fn probabilities(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Self::Network(m) => m.probabilities(batch),
            Self::Knn(m) => m.probabilities(batch),
        }
    }
}

impl LoadedModel {
    pub fn input_size(&self) -> (usize, usize) {
        let (h, w, _) = match self {
            Self::Network(m) => m.network.spec().input_size,
            Self::Knn(m) => m.network.spec().input_size,
        };
        (h, w)
    }
}

/// Training configuration stored in a checkpoint's metadata, if any.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value(ckpt.meta.get("config")?.clone()).ok()
}

/// Restores a classifier. KNN checkpoints carry no bank, so `bank` (the
/// training patches) is required for them.
pub fn load_model(ckpt: &Checkpoint, bank: Option<&PatchSet>) -> Result<LoadedModel> {
    match checkpoint_config(ckpt).map(|c| (c.head, c.batch_size)) {
        Some((Head::Knn { k }, batch)) => {
            let bank = bank.ok_or_else(|| PipelineError::Config("knn checkpoint needs the training patches".into()))?;
            check_taxonomy(Taxonomy::new(ckpt.taxonomy), bank.taxonomy)?;
            Ok(LoadedModel::Knn(KnnModel::fit(ckpt.network.clone(), bank, k, batch)?))
        }
        _ => Ok(LoadedModel::Network(NetworkModel::from_checkpoint(ckpt))),
    }
}

/// Trains a fresh network on `train`, selecting the epoch by `val` loss.
pub fn fit_network(train: &PatchSet, val: &PatchSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.input != config.input_size || val.input != config.input_size {
        return Err(PipelineError::Config(format!(
            "patches are {:?}/{:?}, config input is {:?}",
            train.input, val.input, config.input_size
        )));
    }
    let taxonomy = train.taxonomy;
    let spec = config.model_spec(taxonomy.len())?;
    let network = Network::<f32>::init(&spec, &Rng::seeded(config.seed).child(STREAM_INIT))?;
    let mut meta = serde_json::json!({
        "config": config,
        "selection": "best_validation_loss",
    });
    if let Head::Knn { k } = config.head {
        let model = KnnModel::fit(network, train, k, config.batch_size)?;
        let v = run_evaluation(&model, val, config.batch_size, config.threads)?;
        let adam = AdamState::new(AdamConfig::default(), &model.network.params());
        let history =
            History { epochs: Vec::new(), best_epoch: None, best_val_loss: None, stop: StopReason::NotTrained };
        let validation = metrics(&v.confusion)?;
        meta["history"] = serde_json::to_value(&history)?;
        meta["validation"] = serde_json::to_value(validation.rounded())?;
        return Ok(TrainOutcome {
            checkpoint: Checkpoint {
                network: model.network,
                adam,
                scheduler: PlateauScheduler::new(config.initial_lr),
                taxonomy: taxonomy.mode(),
                seed: config.seed,
                meta,
            },
            history,
            validation,
        });
    }
    let model = NetworkModel::new(network, config.initial_lr, taxonomy)?;
    let fitted = fit(model, train, val, config)?;
    let v = run_evaluation(&fitted.model, val, config.batch_size, config.threads)?;
    let validation = metrics(&v.confusion)?;
    meta["history"] = serde_json::to_value(&fitted.history)?;
    meta["validation"] = serde_json::to_value(validation.rounded())?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            network: fitted.model.network,
            adam: fitted.model.adam,
            scheduler: fitted.scheduler,
            taxonomy: taxonomy.mode(),
            seed: config.seed,
            meta,
        },
        history: fitted.history,
        validation,
    })
}

/// Train-split patches grouped by source record.
#[derive(Clone, Debug)]
pub struct RecordPatches {
    pub patches: PatchSet,
    /// Index into the Train records for every patch.
    pub record_of: Vec<usize>,
    pub record_count: usize,
}

impl RecordPatches {
    pub fn from_dataset(dataset: &PatchDataset, manifest: &Manifest, input: (usize, usize)) -> Result<Self> {
        let records: HashMap<&str, usize> =
            manifest.records_in(Split::Train).enumerate().map(|(i, r)| (r.image_path.as_str(), i)).collect();
        let patches = PatchSet::from_dataset(dataset, Split::Train, input)?;
        let record_of = dataset
            .in_split(Split::Train)
            .map(|p| {
                records
                    .get(p.source_path.as_str())
                    .copied()
                    .ok_or_else(|| PipelineError::Data(format!("patch source {} not in manifest", p.source_path)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { patches, record_of, record_count: records.len() })
    }

    /// Patches whose record is in `records` (sorted ascending).
    pub fn select(&self, records: &[usize]) -> PatchSet {
        let idx: Vec<usize> =
            (0..self.patches.len()).filter(|&i| records.binary_search(&self.record_of[i]).is_ok()).collect();
        self.patches.subset(&idx)
    }
}

/// Loads the Train patches of `manifest` and trains with the first of
/// `config.validation_folds` record-level folds held out for validation.
pub fn train(manifest: &Manifest, root: &Path, config: &TrainConfig) -> Result<TrainOutcome> {
    let (train, val) = train_validation_split(manifest, root, config)?;
    fit_network(&train, &val, config)
}

/// The training and validation patches `train` uses under `config`.
pub fn train_validation_split(manifest: &Manifest, root: &Path, config: &TrainConfig) -> Result<(PatchSet, PatchSet)> {
    config.validate()?;
    let dataset = build_patch_dataset(manifest, root, &config.grid)?;
    let grouped = RecordPatches::from_dataset(&dataset, manifest, config.input_size)?;
    if grouped.patches.is_empty() {
        return Err(PipelineError::Data("manifest has no Train patches".into()));
    }
    let folds = kfold_split(
        &vec![(); grouped.record_count],
        config.validation_folds,
        Rng::seeded(config.seed).child(STREAM_FOLDS).next_u64(),
    )?;
    Ok((grouped.select(&folds.training(0)), grouped.select(&folds.validation(0))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_records: usize,
    pub validation_records: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

/// k-fold driver over `record_count` records. `run_fold(fold, train, val)`
/// gets sorted record indices and returns the held-out confusion matrix.
pub fn cross_validate_with<F>(record_count: usize, k: usize, seed: u64, mut run_fold: F) -> Result<CvReport>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<ConfusionMatrix>,
{
    let folds = kfold_split(&vec![(); record_count], k, seed)?;
    let mut results = Vec::with_capacity(k);
    for fold in 0..k {
        let (train, val) = (folds.training(fold), folds.validation(fold));
        let confusion = run_fold(fold, &train, &val)?;
        results.push(FoldResult {
            fold,
            train_records: train.len(),
            validation_records: val.len(),
            metrics: metrics(&confusion)?,
            confusion,
        });
    }
    let n = results.len() as f64;
    let c = results[0].metrics.precision.len();
    let mean_of = |f: &dyn Fn(&MetricsReport) -> f64| results.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let mean = MeanMetrics {
        accuracy: mean_of(&|m| m.accuracy),
        precision: (0..c).map(|i| mean_of(&|m| m.precision[i])).collect(),
        recall: (0..c).map(|i| mean_of(&|m| m.recall[i])).collect(),
    };
    Ok(CvReport { k, folds: results, mean })
}

/// k-fold cross validation of fresh networks over the Train records. Each
/// fold starts from its own initialization, optimizer and schedule; the
/// held-out fold drives the schedule and is the reported split.
pub fn cross_validate(manifest: &Manifest, root: &Path, config: &TrainConfig, k: usize) -> Result<CvReport> {
    config.validate()?;
    let dataset = build_patch_dataset(manifest, root, &config.grid)?;
    let grouped = RecordPatches::from_dataset(&dataset, manifest, config.input_size)?;
    let split_seed = Rng::seeded(config.seed).child(STREAM_FOLDS).next_u64();
    cross_validate_with(grouped.record_count, k, split_seed, |fold, train, val| {
        let fold_config =
            TrainConfig { seed: Rng::seeded(config.seed).child(fold as u64 + 100).next_u64(), ..config.clone() };
        let (train, val) = (grouped.select(train), grouped.select(val));
        log::info!("fold={fold} train_patches={} val_patches={}", train.len(), val.len());
        let outcome = fit_network(&train, &val, &fold_config)?;
        let model = load_model(&outcome.checkpoint, Some(&train))?;
        Ok(run_evaluation(&model, &val, config.batch_size, config.threads)?.confusion)
    })
}
