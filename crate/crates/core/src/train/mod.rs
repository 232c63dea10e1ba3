//! Optimization, model selection, evaluation and the ablation harness.

mod adam;
mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use metrics::{average_over_splits, ClassScore, ConfusionMatrix, MeanStd, MetricsReport, SplitSummary};

use crate::error::{Error, Result};
use crate::model::{total_loss, DuploModel, ModelConfig, Variant, PATCH};
use crate::nn::Mode;
use crate::rng::SeededRng;
use crate::sits::{extract_patches, LabelRaster, PatchSample, SitsCube, SplitAssignment, SplitPart};
use crate::tensor::{Tape, Tensor};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Desk-scale model profile (`d = 64`).
    pub small: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            learning_rate: DEFAULT_LEARNING_RATE,
            alpha1: 0.3,
            alpha2: 0.3,
            seed: 0,
            variant: Variant::Full,
            small: false,
        }
    }
}

impl TrainConfig {
    /// `d = 64`, 30 epochs.
    pub fn small() -> Self {
        Self {
            epochs: 30,
            small: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::Contract("auxiliary loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize, timestamps: usize, bands: usize) -> ModelConfig {
        let cfg = if self.small {
            ModelConfig::small(num_classes, timestamps, bands)
        } else {
            ModelConfig::new(num_classes, timestamps, bands)
        };
        cfg.with_seed(self.seed)
    }
}

/// Labeled patches of one cube.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub timestamps: usize,
    pub bands: usize,
    pub num_classes: usize,
    pub samples: Vec<PatchSample>,
}

impl PatchSet {
    pub fn from_cube(cube: &SitsCube, labels: &LabelRaster) -> Result<Self> {
        if (cube.height, cube.width) != (labels.height, labels.width) {
            return Err(Error::Data(format!(
                "cube is {}×{} but labels are {}×{}",
                cube.height, cube.width, labels.height, labels.width
            )));
        }
        Ok(Self {
            timestamps: cube.num_timestamps(),
            bands: cube.num_bands(),
            num_classes: labels.num_classes,
            samples: extract_patches(cube, labels),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices whose object belongs to `part`, in sample order.
    pub fn indices(&self, split: &SplitAssignment, part: SplitPart) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| split.part(self.samples[i].object_id) == Some(part))
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// `[n, T, B, 5, 5]` input and zero-based labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let per = self.timestamps * self.bands * PATCH * PATCH;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].data);
        }
        let x = Tensor::new(vec![indices.len(), self.timestamps, self.bands, PATCH, PATCH], data)?;
        Ok((x, self.labels(indices)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    /// Sample-weighted mean of the minibatch losses.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// One-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy\n");
        for r in &self.history {
            writeln!(s, "{},{:.8},{:.6}", r.epoch, r.train_loss, r.val_accuracy).unwrap();
        }
        s
    }
}

/// One-based index of the highest accuracy; the earliest epoch wins ties.
pub fn best_epoch(val_accuracy: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in val_accuracy.iter().enumerate() {
        if best.is_none_or(|b| a > val_accuracy[b]) {
            best = Some(i);
        }
    }
    best.map(|b| b + 1)
}

/// Forward, loss, backward and one Adam update on a single minibatch.
/// Returns the loss before the update.
pub fn train_step(
    model: &mut DuploModel<f32>,
    adam: &mut AdamState<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, input, Mode::Train, rng)?;
    let loss = total_loss(&mut tape, model.variant, &out.logits, labels, config.alpha1, config.alpha2)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    tape.backward(loss)?;
    adam.step(&mut model.store, |id| tape.param_grad(id))?;
    Ok(value)
}

/// Trains on the `train` part, keeps the parameters with the best `val`
/// accuracy and leaves them in `model`.
pub fn train(
    model: &mut DuploModel<f32>,
    data: &PatchSet,
    split: &SplitAssignment,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let train_idx = data.indices(split, SplitPart::Train);
    let val_idx = data.indices(split, SplitPart::Val);
    train_on(model, data, &train_idx, &val_idx, config)
}

pub fn train_on(
    model: &mut DuploModel<f32>,
    data: &PatchSet,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_idx.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    if model.variant != config.variant {
        return Err(Error::Contract(format!(
            "model is {} but the configuration asks for {}",
            model.variant, config.variant
        )));
    }
    let mut adam = AdamState::new(&model.store, config.learning_rate);
    let mut shuffle = SeededRng::derive(config.seed, "train.shuffle");
    let mut dropout = SeededRng::derive(config.seed, "train.dropout");
    let mut order = train_idx.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, crate::params::ParamStore<f32>)> = None;
    let mut best_epoch_seen = 0;

    for epoch in 1..=config.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = data.batch(chunk)?;
            let loss = match train_step(model, &mut adam, &x, &y, config, &mut dropout) {
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { epoch, step: step + 1 }),
                other => other?,
            };
            loss_sum += loss * chunk.len() as f64;
        }
        let val_accuracy = evaluate(model, data, val_idx)?.accuracy;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}/{}: train loss {:.6}, val accuracy {:.4}",
            config.epochs,
            record.train_loss,
            val_accuracy
        );
        history.push(record);
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, model.store.clone()));
            best_epoch_seen = epoch;
        }
    }
    let (best_val_accuracy, store) = best.expect("at least one epoch ran");
    model.store = store;
    debug_assert_eq!(
        best_epoch(&history.iter().map(|r| r.val_accuracy).collect::<Vec<_>>()),
        Some(best_epoch_seen)
    );
    Ok(TrainOutcome {
        history,
        best_epoch: best_epoch_seen,
        best_val_accuracy,
    })
}

/// Repeats [`train_step`] on one fixed batch until the loss drops below
/// `target` or `max_steps` is reached; returns every loss seen.
pub fn overfit_probe(
    model: &mut DuploModel<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    config: &TrainConfig,
    max_steps: usize,
    target: f64,
) -> Result<Vec<f64>> {
    config.validate()?;
    let mut adam = AdamState::new(&model.store, config.learning_rate);
    let mut rng = SeededRng::derive(config.seed, "train.dropout");
    let mut losses = Vec::new();
    for step in 1..=max_steps {
        let loss = match train_step(model, &mut adam, input, labels, config, &mut rng) {
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { epoch: 1, step }),
            other => other?,
        };
        losses.push(loss);
        if loss < target {
            break;
        }
    }
    Ok(losses)
}

/// Predictions for the given samples, in order.
pub fn predict_indices(model: &mut DuploModel<f32>, data: &PatchSet, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        out.extend(model.predict(&x)?);
    }
    Ok(out)
}

/// Metrics of the decision head in inference mode.
pub fn evaluate(model: &mut DuploModel<f32>, data: &PatchSet, indices: &[usize]) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    if model.config.num_classes != data.num_classes {
        return Err(Error::Data(format!(
            "model has {} classes, labels have {}",
            model.config.num_classes, data.num_classes
        )));
    }
    let predicted = predict_indices(model, data, indices)?;
    let confusion = ConfusionMatrix::from_predictions(data.num_classes, &data.labels(indices), &predicted)?;
    MetricsReport::from_confusion(confusion)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Trains and tests every variant on the same split with the same seed.
pub fn ablate(data: &PatchSet, split: &SplitAssignment, config: &TrainConfig) -> Result<Vec<AblationRow>> {
    let test_idx = data.indices(split, SplitPart::Test);
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = TrainConfig { variant, ..config.clone() };
        let model_cfg = cfg.model_config(data.num_classes, data.timestamps, data.bands);
        let mut model = DuploModel::new(model_cfg, variant)?;
        log::info!("ablation: training {}", variant.label());
        let outcome = train(&mut model, data, split, &cfg)?;
        let report = evaluate(&mut model, data, &test_idx)?;
        rows.push(AblationRow {
            variant,
            outcome,
            report,
        });
    }
    Ok(rows)
}

/// `variant,accuracy,fmeasure,kappa` with one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,accuracy,fmeasure,kappa\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6}",
            r.variant.label(),
            r.report.accuracy,
            r.report.fmeasure_weighted,
            r.report.kappa
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests;
