//! Training loop, evaluation, and history emission.
//!
//! One thread owns the model and optimizer; augmentation and evaluation
//! fan out over rayon with per-sample seeds, so results are independent of
//! worker scheduling.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{apply_augmentations, center_eval_crop, sample_seed, AugmentConfig, AugmentError};
use crate::checkpoint::Checkpoint;
use crate::dataset::Sample;
use crate::metrics::{classification_report, MetricsError, MetricsReport};
use crate::model::{Model, ModelError};
use crate::optim::{Adam, OptimError, OptimHyper};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::volume::{IntensityDomain, Volume};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    InvalidConfig(String),
    #[error("{which} set is empty")]
    EmptySet { which: &'static str },
    #[error("training set contains only label {label}; both classes are required")]
    SingleClass { label: usize },
    #[error("scan {scan_id}: label {label} out of range for {num_classes} classes")]
    LabelRange {
        scan_id: String,
        label: usize,
        num_classes: usize,
    },
    #[error("scan {scan_id}: shape {found:?} differs from first scan's {expect:?}")]
    ShapeMismatch {
        scan_id: String,
        expect: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("scan {scan_id}: expected unit-normalized intensities; run preprocessing first")]
    NotUnit { scan_id: String },
    #[error("epoch {epoch} step {step}: loss became {loss}; aborting")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub hyper: OptimHyper,
    /// Micro-batches accumulated per optimizer step; 1 disables accumulation.
    pub accum_steps: usize,
    /// Center depth-crop applied to validation volumes.
    pub eval_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 2,
            seed: 0,
            augment: AugmentConfig::default(),
            hyper: OptimHyper::default(),
            accum_steps: 1,
            eval_depth: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.accum_steps == 0 {
            return Err(TrainError::InvalidConfig("accum_steps must be positive".into()));
        }
        if self.eval_depth == 0 {
            return Err(TrainError::InvalidConfig("eval_depth must be positive".into()));
        }
        self.hyper
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.augment
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Snapshot at the best validation epoch (the initial model when
    /// `epochs` is 0).
    pub best: Checkpoint,
    /// 1-based epoch of the snapshot; 0 means the initial model.
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub best_report: MetricsReport,
    pub history: Vec<EpochRow>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Argmax prediction per sample, in dataset order.
    pub preds: Vec<usize>,
}

fn check_samples(
    samples: &[Sample],
    which: &'static str,
    expect: &mut Option<(usize, usize, usize)>,
    num_classes: usize,
) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySet { which });
    }
    for s in samples {
        if s.volume.intensity_domain != IntensityDomain::Unit {
            return Err(TrainError::NotUnit { scan_id: s.id.clone() });
        }
        if s.label >= num_classes {
            return Err(TrainError::LabelRange {
                scan_id: s.id.clone(),
                label: s.label,
                num_classes,
            });
        }
        let shape = s.volume.shape();
        match expect {
            None => *expect = Some(shape),
            Some(e) if *e != shape => {
                return Err(TrainError::ShapeMismatch {
                    scan_id: s.id.clone(),
                    expect: *e,
                    found: shape,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn batch_tensor(volumes: &[Volume]) -> Tensor<f32> {
    let (d, h, w) = volumes[0].shape();
    let mut data = Vec::with_capacity(volumes.len() * d * h * w);
    for v in volumes {
        data.extend_from_slice(&v.voxels);
    }
    Tensor::new(vec![volumes.len(), 1, d, h, w], data).expect("batch dims agree")
}

/// Runs the seeded epoch loop: shuffle, augment, batch, optimize, then score
/// the validation set. The returned checkpoint is the epoch with the highest
/// validation macro F1; ties keep the earlier epoch.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let num_classes = model.config.num_classes;
    let mut shape = None;
    check_samples(train_set, "training", &mut shape, num_classes)?;
    let mut val_shape = None;
    check_samples(val_set, "validation", &mut val_shape, num_classes)?;

    let first_label = train_set[0].label;
    if train_set.iter().all(|s| s.label == first_label) {
        return Err(TrainError::SingleClass { label: first_label });
    }

    let trainable = model.trainable_count();
    let sizes: Vec<usize> = model.entries()[..trainable]
        .iter()
        .map(|(_, shape, _)| shape.iter().product())
        .collect();
    let mut adam: Adam<f32> = Adam::new(cfg.hyper.clone(), &sizes)?;

    let mut best: Option<(f64, usize, Checkpoint, MetricsReport)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad_acc: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut acc_samples = 0usize;
        let mut acc_batches = 0usize;
        let mut step = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let n_batches = batches.len();

        for (b, batch) in batches.into_iter().enumerate() {
            let volumes: Vec<Volume> = batch
                .par_iter()
                .map(|&i| {
                    apply_augmentations(
                        train_set[i].volume.clone(),
                        &cfg.augment,
                        sample_seed(cfg.seed, epoch as u64, i as u64),
                    )
                })
                .collect::<Result<_, _>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train_set[i].label).collect();

            let mut tape = Tape::new();
            let pass = model.forward_train(&mut tape, batch_tensor(&volumes))?;
            let loss_id = tape.cross_entropy(pass.logits, &labels)?;
            tape.backward(loss_id)?;

            let loss = tape.value(loss_id).data()[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: b + 1, loss });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();

            // Accumulate sample-weighted gradients so uneven final batches
            // still average exactly over the effective batch.
            let weight = batch.len() as f32;
            for (slot, &pid) in pass.param_ids.iter().enumerate() {
                if let Some(g) = tape.grad(pid) {
                    let acc = &mut grad_acc[slot];
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += weight * gi;
                    }
                }
            }
            acc_samples += batch.len();
            acc_batches += 1;

            if acc_batches == cfg.accum_steps || b + 1 == n_batches {
                let inv = 1.0 / acc_samples as f32;
                adam.begin_step();
                for slot in 0..trainable {
                    for a in &mut grad_acc[slot] {
                        *a *= inv;
                    }
                    adam.update(slot, model.param_data_mut(slot), &grad_acc[slot])?;
                    grad_acc[slot].fill(0.0);
                }
                acc_samples = 0;
                acc_batches = 0;
                step += 1;
            }
        }
        let _ = step;

        let eval = evaluate(model, val_set, cfg.eval_depth)?;
        let val_f1 = eval.report.macro_f1;
        history.push(EpochRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_macro_f1: val_f1,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(f, _, _, _)| val_f1 > *f) {
            best = Some((val_f1, epoch, Checkpoint::from_model(model), eval.report));
        }
    }

    let (best_val_f1, best_epoch, best, best_report) = match best {
        Some(b) => b,
        None => {
            let eval = evaluate(model, val_set, cfg.eval_depth)?;
            (eval.report.macro_f1, 0, Checkpoint::from_model(model), eval.report)
        }
    };
    Ok(TrainOutcome { best, best_epoch, best_val_f1, best_report, history })
}

/// Eval-mode scoring: center depth-crop, forward, argmax. Samples run in
/// parallel against the shared read-only model.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    depth_to: usize,
) -> Result<EvalOutcome, TrainError> {
    let num_classes = model.config.num_classes;
    let mut shape = None;
    check_samples(samples, "evaluation", &mut shape, num_classes)?;

    let preds: Vec<usize> = samples
        .par_iter()
        .map(|s| -> Result<usize, TrainError> {
            let probs = predict_probs(model, s.volume.clone(), depth_to)?;
            Ok(argmax(&probs))
        })
        .collect::<Result<_, _>>()?;

    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = classification_report(&labels, &preds, num_classes)?;
    Ok(EvalOutcome { report, preds })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for one preprocessed volume: center depth-crop,
/// eval-mode forward, softmax in f64.
pub fn predict_probs(
    model: &Model,
    volume: Volume,
    depth_to: usize,
) -> Result<Vec<f64>, TrainError> {
    if volume.intensity_domain != IntensityDomain::Unit {
        return Err(TrainError::NotUnit { scan_id: volume.scan_id.clone() });
    }
    let cropped = center_eval_crop(volume, depth_to)?;
    let mut tape = Tape::new();
    let pass = model.forward_eval(&mut tape, batch_tensor(std::slice::from_ref(&cropped)))?;
    let logits = tape.value(pass.logits).data();
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY as f32, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Writes history rows as `epoch,train_loss,val_macro_f1,seconds` CSV.
pub fn write_history_csv(path: &Path, rows: &[EpochRow]) -> Result<(), TrainError> {
    let mut body = String::from("epoch,train_loss,val_macro_f1,seconds\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.epoch, r.train_loss, r.val_macro_f1, r.seconds
        ));
    }
    std::fs::write(path, body).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}
