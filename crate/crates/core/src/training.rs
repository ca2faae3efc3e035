//! Training loop, evaluation, the `m` sweep and run-directory artifacts.

use std::path::{Path, PathBuf};

use log::info;
use ndarray::{stack, Array1, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSource;
use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{
    augment_tensor, load_tensor, make_splits, AugmentDraws, DatasetManifest, ImageRecord,
    Magnification,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{build_model, HybridModel, ModelConfig};
use crate::nn::{bce_with_logits, Mode, Module};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Backbone learning rate relative to `learning_rate` once unfrozen.
    pub backbone_lr_multiplier: f64,
    pub seed: u64,
    pub magnification: Magnification,
    pub loss: LossKind,
    /// Stop after this many epochs without a new best validation accuracy.
    pub early_stop_patience: Option<usize>,
    /// Weight of the malignant term in the loss.
    pub pos_weight: Option<f64>,
    /// Random flips and quarter turns on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            backbone_lr_multiplier: 0.1,
            seed: 0,
            magnification: Magnification::X40,
            loss: LossKind::BinaryCrossEntropy,
            early_stop_patience: None,
            pos_weight: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted (it turns training into a pure
    /// evaluation loop); negative or non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !self.backbone_lr_multiplier.is_finite() || self.backbone_lr_multiplier < 0.0 {
            return Err(Error::config("backbone_lr_multiplier must be >= 0"));
        }
        if let Some(w) = self.pos_weight {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::config(format!(
                    "pos_weight must be positive, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Preprocessed images and their labels, held in memory.
#[derive(Debug, Clone, Default)]
pub struct TensorDataset {
    images: Vec<Array3<f32>>,
    labels: Vec<u8>,
}

impl TensorDataset {
    pub fn new(images: Vec<Array3<f32>>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.dim().0 != 3 || images.iter().any(|im| im.dim() != first.dim()) {
                return Err(Error::invalid("dataset images must all be 3 x S x S"));
            }
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Self { images, labels })
    }

    /// Reads and preprocesses every record (paths relative to `root`).
    pub fn load(root: &Path, records: &[ImageRecord], input_size: usize) -> Result<Self> {
        let images = records
            .iter()
            .map(|r| load_tensor(&root.join(&r.path), input_size))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images, records.iter().map(|r| r.label.as_u8()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[Array3<f32>] {
        &self.images
    }

    /// Stacks the selected images into an (N, 3, S, S) batch.
    pub fn batch(&self, indices: &[usize]) -> Array4<f32> {
        let views: Vec<_> = indices.iter().map(|&i| self.images[i].view()).collect();
        stack(Axis(0), &views).expect("images share one shape")
    }

    fn augmented_batch(&self, indices: &[usize], draws: &[AugmentDraws]) -> Array4<f32> {
        let imgs: Vec<_> = indices
            .iter()
            .zip(draws)
            .map(|(&i, &d)| augment_tensor(&self.images[i], d))
            .collect();
        let views: Vec<_> = imgs.iter().map(|a| a.view()).collect();
        stack(Axis(0), &views).expect("images share one shape")
    }

    fn batch_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

struct Slot {
    m: ArrayD<f32>,
    v: ArrayD<f32>,
    t: i32,
}

/// Adam with per-parameter step counters, so parameters that start
/// training late (an unfrozen backbone) get the usual bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: Vec<Slot>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        }
    }

    /// Applies one update. `backbone_lr` is used for `backbone.*`
    /// parameters, `lr` for the rest; frozen parameters are left alone.
    pub fn step(&mut self, model: &mut HybridModel<f32>, lr: f64, backbone_lr: f64) {
        let frozen = model.backbone_frozen();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let slots = &mut self.slots;
        let mut idx = 0;
        model.visit_params_mut("", &mut |name, p| {
            if p.is_buffer() {
                return;
            }
            if slots.len() <= idx {
                slots.push(Slot {
                    m: ArrayD::zeros(p.value.raw_dim()),
                    v: ArrayD::zeros(p.value.raw_dim()),
                    t: 0,
                });
            }
            let slot = &mut slots[idx];
            idx += 1;
            let is_backbone = name.starts_with("backbone.");
            if is_backbone && frozen {
                return;
            }
            let lr = if is_backbone { backbone_lr } else { lr };
            slot.t += 1;
            let c1 = 1.0 - b1.powi(slot.t);
            let c2 = 1.0 - b2.powi(slot.t);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .for_each(|w, &g, m, v| {
                    let g = g as f64;
                    let mn = b1 * *m as f64 + (1.0 - b1) * g;
                    let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                    *m = mn as f32;
                    *v = vn as f32;
                    let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                    *w = (*w as f64 - update) as f32;
                });
        });
    }
}

/// One row of `history.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

/// Model snapshot from the epoch with the best validation accuracy.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub model: HybridModel<f32>,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
}

impl BestCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            &self.model,
            path,
            self.epoch,
            self.seed,
            Some(&self.metrics),
        )
    }
}

const EVAL_BATCH: usize = 16;

/// Logits for every image, computed in fixed-size chunks without caching.
pub fn predict_logits(model: &HybridModel<f32>, data: &TensorDataset) -> Result<Array1<f32>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(model.logits(&data.batch(chunk))?);
    }
    Ok(Array1::from(out))
}

/// Malignancy probabilities for every image.
pub fn predict_probs(model: &HybridModel<f32>, data: &TensorDataset) -> Result<Vec<f64>> {
    Ok(predict_logits(model, data)?
        .iter()
        .map(|&z| sigmoid(z as f64))
        .collect())
}

/// Metrics and mean binary cross-entropy over a dataset.
pub fn evaluate_with_loss(
    model: &HybridModel<f32>,
    data: &TensorDataset,
    magnification: Magnification,
) -> Result<(MetricsReport, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let logits = predict_logits(model, data)?;
    let loss = bce_with_logits(&logits, data.labels(), None)?.loss;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z as f64)).collect();
    let report =
        MetricsReport::from_predictions(magnification, &probs, data.labels(), DEFAULT_THRESHOLD)?;
    Ok((report, loss))
}

pub fn evaluate(
    model: &HybridModel<f32>,
    data: &TensorDataset,
    magnification: Magnification,
) -> Result<MetricsReport> {
    Ok(evaluate_with_loss(model, data, magnification)?.0)
}

/// Trains `model` in place and returns the run state plus the snapshot with
/// the best validation accuracy (ties keep the earlier epoch).
///
/// The backbone stays frozen for the model's `freeze_backbone_epochs`, then
/// trains at `backbone_lr_multiplier * learning_rate`.
pub fn train(
    model: &mut HybridModel<f32>,
    train_data: &TensorDataset,
    val_data: &TensorDataset,
    cfg: &TrainConfig,
) -> Result<(TrainState, BestCheckpoint)> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::invalid(format!(
            "training needs non-empty train and val sets (got {} and {})",
            train_data.len(),
            val_data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut state = TrainState {
        epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        best_epoch: 0,
        history: Vec::new(),
        stopped_early: false,
    };
    let mut best: Option<BestCheckpoint> = None;
    let freeze_epochs = model.config().freeze_backbone_epochs;
    for epoch in 1..=cfg.epochs {
        model.set_backbone_frozen(epoch <= freeze_epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = if cfg.augment {
                let draws: Vec<_> = chunk
                    .iter()
                    .map(|_| AugmentDraws::sample(&mut rng))
                    .collect();
                train_data.augmented_batch(chunk, &draws)
            } else {
                train_data.batch(chunk)
            };
            let labels = train_data.batch_labels(chunk);
            model.zero_grad();
            let logits = model.forward(&x, Mode::Train)?;
            let out = bce_with_logits(&logits, &labels, cfg.pos_weight)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                });
            }
            model.backward(&out.dlogits)?;
            adam.step(
                model,
                cfg.learning_rate,
                cfg.learning_rate * cfg.backbone_lr_multiplier,
            );
            loss_sum += out.loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_data.len() as f64;
        let (report, val_loss) = evaluate_with_loss(model, val_data, cfg.magnification)?;
        info!(
            "epoch {epoch}/{}: train_loss {train_loss:.6} val_loss {val_loss:.6} val_accuracy {:.2}",
            cfg.epochs, report.accuracy
        );
        state.history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy: report.accuracy,
        });
        state.epoch = epoch;
        if report.accuracy > state.best_val_accuracy {
            state.best_val_accuracy = report.accuracy;
            state.best_epoch = epoch;
            best = Some(BestCheckpoint {
                model: model.clone(),
                epoch,
                seed: cfg.seed,
                metrics: report,
            });
        }
        if let Some(patience) = cfg.early_stop_patience {
            if epoch - state.best_epoch >= patience {
                state.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let best = best.expect("at least one epoch ran");
    Ok((state, best))
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Index of the maximum accuracy, ties resolved toward the smallest `m`.
pub fn select_m(accuracies: &[(usize, f64)]) -> Option<usize> {
    accuracies
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub chosen_m: usize,
    /// Best validation accuracy per candidate, in candidate order.
    pub accuracies: Vec<(usize, f64)>,
}

/// Trains one model per candidate `m` on the same data and seed and picks
/// the best by validation accuracy.
pub fn sweep_m(
    candidates: &[usize],
    base: &ModelConfig,
    source: &BackboneSource,
    train_data: &TensorDataset,
    val_data: &TensorDataset,
    cfg: &TrainConfig,
) -> Result<SweepOutcome> {
    if candidates.is_empty() {
        return Err(Error::invalid("sweep needs at least one candidate m"));
    }
    if let Some(&bad) = candidates.iter().find(|&&m| m < 1) {
        return Err(Error::invalid(format!(
            "candidate m must be >= 1, got {bad}"
        )));
    }
    let mut accuracies = Vec::with_capacity(candidates.len());
    for &m in candidates {
        let run = || -> Result<f64> {
            let model_cfg = base.clone().with_m(m);
            let mut model = build_model::<f32>(&model_cfg, source, cfg.seed)?;
            let (state, _) = train(&mut model, train_data, val_data, cfg)?;
            Ok(state.best_val_accuracy)
        };
        let acc = run().map_err(|e| Error::Sweep {
            m,
            source: Box::new(e),
        })?;
        info!("sweep m = {m}: best val accuracy {acc:.2}");
        accuracies.push((m, acc));
    }
    let chosen_m = select_m(&accuracies).expect("non-empty");
    Ok(SweepOutcome {
        chosen_m,
        accuracies,
    })
}

/// Files produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub state: TrainState,
    pub best_metrics: MetricsReport,
    pub checkpoint: PathBuf,
}

/// Splits the manifest, trains, and writes `config.json`, the split files,
/// `history.csv` and the `best` checkpoint into `run_dir`.
pub fn run_experiment(
    run_dir: &Path,
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    cfg.save_json(&run_dir.join("config.json"))?;
    let splits = make_splits(manifest, &cfg.split, cfg.train.magnification)?;
    splits.write_to(run_dir)?;
    info!(
        "split at {}: {} train / {} val / {} test images",
        cfg.train.magnification,
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let size = cfg.model.input_size;
    let train_data = TensorDataset::load(manifest.root(), &splits.train, size)?;
    let val_data = TensorDataset::load(manifest.root(), &splits.val, size)?;
    let mut model = build_model::<f32>(&cfg.model, &cfg.backbone_source(), cfg.train.seed)?;
    let (state, best) = train(&mut model, &train_data, &val_data, &cfg.train)?;
    write_history(&run_dir.join("history.csv"), &state.history)?;
    let checkpoint = run_dir.join("best");
    best.save(&checkpoint)?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        state,
        best_metrics: best.metrics,
        checkpoint,
    })
}
