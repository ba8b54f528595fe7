//! Training (Adam over masked BCE with teacher forcing), checkpoint
//! selection by validation frame macro F1, per-class threshold calibration,
//! and split evaluation.

mod checkpoint;
mod model;

pub use checkpoint::{
    checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    FORMAT_VERSION, MAGIC,
};
pub use model::{eval_scores, infer_scores, train_scores, ModelSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chainorder::{ClassOrder, OrderError};
use crate::data::{
    chunk_clip, feature_stats, standardize, Chunk, Clip, DataError, Dataset, SplitKind,
};
use crate::featex::{identity_running_stats, BN_MOMENTUM};
use crate::heads::{ActivityMatrix, HeadError, HeadKind, ThresholdVector};
use crate::metrics::{
    accumulate, frame_counts, segment_counts, DetectionCounts, MetricsError, MetricsFamily,
    MetricsReport,
};
use crate::nn::tape::ChannelStats;
use crate::nn::{AdamConfig, ParamStore, Tape, Tensor, TensorError};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_THRESHOLD_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Order(#[from] OrderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss or updated parameters went non-finite")]
    Diverged { epoch: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: ModelSpec,
    /// Chain detection order; carried but unused by the other heads.
    pub order: ClassOrder,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// When set, chunk padding is excluded from the loss.
    pub mask_padding: bool,
}

impl TrainConfig {
    pub fn new(spec: ModelSpec, order: ClassOrder) -> Self {
        TrainConfig {
            spec,
            order,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            mask_padding: true,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.spec.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.order.len() != self.spec.classes {
            return Err(TrainError::Config(format!(
                "order covers {} classes, model has {}",
                self.order.len(),
                self.spec.classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_frame_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the checkpoint carries.
    pub best_epoch: usize,
}

/// Standardizes clip features with the given stats, then chunks them.
fn standardized_chunks(
    clips: &[&Clip],
    frames: usize,
    mean: &[f64],
    std: &[f64],
) -> Result<Vec<Chunk>, TrainError> {
    let mut out = Vec::new();
    for clip in clips {
        let z = standardize(&clip.features, mean, std)?;
        let zclip = Clip {
            id: clip.id.clone(),
            features: z,
            labels: clip.labels.clone(),
            split: clip.split,
        };
        out.extend(chunk_clip(&zclip, frames)?);
    }
    Ok(out)
}

fn validation_pass(
    store: &ParamStore,
    cfg: &TrainConfig,
    val_chunks: &[Chunk],
    running: &[ChannelStats],
    thresholds: &ThresholdVector,
    epoch: usize,
    last_batch: usize,
) -> Result<(f64, f64), TrainError> {
    let mut loss_sum = 0.0;
    let mut cells = 0.0;
    let mut counts = vec![DetectionCounts::default(); cfg.spec.classes];
    for chunk in val_chunks {
        let targets = chunk.labels.to_tensor();
        let mask = cfg.mask_padding.then(|| chunk.loss_mask());
        let count = Tape::unmasked_count(&targets, mask.as_ref()) as f64;

        let mut tape = Tape::new();
        let ids = store.bind(&mut tape)?;
        let scores = model::eval_scores(
            &mut tape,
            &ids,
            &cfg.spec,
            &chunk.features,
            &chunk.labels,
            &cfg.order,
            running,
        )?;
        let loss = tape.bce_mean(scores, &targets, mask.as_ref())?;
        let value = tape.value(loss).scalar_value();
        if !value.is_finite() {
            // Blame the update that produced these parameters.
            return Err(TrainError::Diverged {
                epoch,
                batch: last_batch,
            });
        }
        loss_sum += value * count;
        cells += count;

        let mut tape = Tape::new();
        let ids = store.bind(&mut tape)?;
        let (_, detections) = model::infer_scores(
            &mut tape,
            &ids,
            &cfg.spec,
            &chunk.features,
            &cfg.order,
            thresholds,
            running,
        )?;
        let detections = detections.truncated(chunk.valid_frames)?;
        let truth = chunk.labels.truncated(chunk.valid_frames)?;
        accumulate(&mut counts, &frame_counts(&detections, &truth)?);
    }
    if cells == 0.0 {
        return Err(TrainError::Config(
            "validation split has no unmasked cells".into(),
        ));
    }
    Ok((loss_sum / cells, MetricsFamily::from_counts(&counts).macro_f1))
}

/// Runs the full training loop and returns the best-validation checkpoint
/// along with per-epoch statistics. A given dataset, config, and seed fully
/// determine both.
pub fn train_model(
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainingHistory), TrainError> {
    cfg.validate()?;
    if dataset.vocabulary.len() != cfg.spec.classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, model expects {}",
            dataset.vocabulary.len(),
            cfg.spec.classes
        )));
    }
    let bins = cfg.spec.extractor.bins;
    for clip in &dataset.clips {
        if clip.features.cols() != bins {
            return Err(TrainError::Config(format!(
                "clip {} has {} bins, extractor expects {bins}",
                clip.id,
                clip.features.cols()
            )));
        }
    }
    let train_clips = dataset.clips_in(SplitKind::Train);
    let val_clips = dataset.clips_in(SplitKind::Val);
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(TrainError::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }

    let (feat_mean, feat_std) = feature_stats(&train_clips)?;
    let frames = cfg.spec.extractor.frames;
    let train_chunks = standardized_chunks(&train_clips, frames, &feat_mean, &feat_std)?;
    let val_chunks = standardized_chunks(&val_clips, frames, &feat_mean, &feat_std)?;

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    cfg.spec.register_params(&mut store, &mut init_rng)?;
    let mut running = identity_running_stats(&cfg.spec.extractor);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let half = ThresholdVector::uniform(cfg.spec.classes, 0.5)?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>, Vec<ChannelStats>)> = None;
    let mut indices: Vec<usize> = (0..train_chunks.len()).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut cell_sum = 0.0;
        let mut batches = 0;
        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape)?;
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let chunk = &train_chunks[i];
                let (scores, observed) = model::train_scores(
                    &mut tape,
                    &ids,
                    &cfg.spec,
                    &chunk.features,
                    &chunk.labels,
                    &cfg.order,
                    &running,
                )?;
                for (b, stats) in observed.iter().enumerate() {
                    running[b].blend(stats, BN_MOMENTUM);
                }
                let targets = chunk.labels.to_tensor();
                let mask = cfg.mask_padding.then(|| chunk.loss_mask());
                let count = Tape::unmasked_count(&targets, mask.as_ref()) as f64;
                let loss = tape.bce_mean(scores, &targets, mask.as_ref())?;
                parts.push((loss, count));
            }
            let total: f64 = parts.iter().map(|(_, c)| c).sum();
            if total == 0.0 {
                return Err(TrainError::Config("batch has no unmasked cells".into()));
            }
            // Pooled mean over the batch: each chunk's mean loss weighted by
            // its unmasked cell count.
            let mut combined: Option<crate::nn::NodeId> = None;
            for (node, count) in &parts {
                let scaled = tape.scale_offset(*node, count / total, 0.0);
                combined = Some(match combined {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled)?,
                });
            }
            let loss_node = combined.expect("batch is non-empty");
            let loss_value = tape.value(loss_node).scalar_value();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                });
            }
            let grads = tape.backward(loss_node)?;
            store.adam_step(grads.named(), &adam)?;
            // A finite loss can still produce an exploding update; catch it
            // here so the failure names the batch that caused it.
            if !store.all_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx + 1,
                });
            }
            loss_sum += loss_value * total;
            cell_sum += total;
            batches = batch_idx + 1;
        }

        let (val_loss, val_f1) =
            validation_pass(&store, cfg, &val_chunks, &running, &half, epoch, batches)?;
        history.push(EpochRecord {
            train_loss: loss_sum / cell_sum,
            val_loss,
            val_frame_macro_f1: val_f1,
        });
        if best.as_ref().map_or(true, |(f, ..)| val_f1 > *f) {
            best = Some((val_f1, epoch, store.snapshot(), running.clone()));
        }
    }

    let (_, best_epoch, params, running_stats) = best.expect("at least one epoch ran");
    let ckpt = Checkpoint {
        spec: cfg.spec.clone(),
        vocabulary: dataset.vocabulary.clone(),
        order: cfg.order.clone(),
        params,
        running_stats,
        feat_mean,
        feat_std,
        thresholds: None,
        best_epoch,
    };
    Ok((ckpt, TrainingHistory { epochs: history, best_epoch }))
}

/// Binarization candidates: step, 2·step, ... up to 1 - step.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut k = 1u32;
    loop {
        let v = k as f64 * step;
        if v > 1.0 - step + 1e-12 {
            break;
        }
        grid.push(v);
        k += 1;
    }
    grid
}

/// Best threshold for one class: maximizes F1 over the candidate grid,
/// smallest candidate on ties.
fn best_threshold(scores: &[f64], truth: &[bool], grid: &[f64]) -> (f64, f64) {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &eps in grid {
        let mut counts = DetectionCounts::default();
        for (&s, &t) in scores.iter().zip(truth) {
            match (s > eps, t) {
                (true, true) => counts.true_positives += 1,
                (true, false) => counts.false_positives += 1,
                (false, true) => counts.false_negatives += 1,
                (false, false) => {}
            }
        }
        let f1 = counts.f1();
        if f1 > best.1 {
            best = (eps, f1);
        }
    }
    best
}

fn check_vocabulary(ckpt: &Checkpoint, dataset: &Dataset) -> Result<(), TrainError> {
    if ckpt.vocabulary != dataset.vocabulary {
        return Err(TrainError::Config(format!(
            "checkpoint classes {:?} do not match dataset classes {:?}",
            ckpt.vocabulary.names(),
            dataset.vocabulary.names()
        )));
    }
    Ok(())
}

/// Per-class threshold search on the validation split. Independent and GRU
/// heads score once and search each class separately; the chain head is
/// calibrated position by position in chain order, re-running inference as
/// earlier thresholds get fixed, because those change later conditioning.
pub fn calibrate_thresholds(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    step: f64,
) -> Result<ThresholdVector, TrainError> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(TrainError::Config(format!(
            "threshold grid step {step} must lie in (0, 0.5]"
        )));
    }
    check_vocabulary(ckpt, dataset)?;
    let val_clips = dataset.clips_in(SplitKind::Val);
    if val_clips.is_empty() {
        return Err(TrainError::Config(
            "threshold calibration needs a non-empty val split".into(),
        ));
    }
    let grid = threshold_grid(step);
    let classes = ckpt.spec.classes;
    let chunks = standardized_chunks(
        &val_clips,
        ckpt.spec.extractor.frames,
        &ckpt.feat_mean,
        &ckpt.feat_std,
    )?;
    let store = ckpt.param_store()?;
    let mut thresholds = ThresholdVector::uniform(classes, 0.5)?;

    let score_columns = |thresholds: &ThresholdVector| -> Result<Vec<(Vec<Vec<f64>>, Vec<Vec<bool>>)>, TrainError> {
        // One entry per chunk: per-class score and truth columns over valid frames.
        let mut out = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape)?;
            let (scores, _) = model::infer_scores(
                &mut tape,
                &ids,
                &ckpt.spec,
                &chunk.features,
                &ckpt.order,
                thresholds,
                &ckpt.running_stats,
            )?;
            let mut cols = vec![Vec::with_capacity(chunk.valid_frames); classes];
            let mut truths = vec![Vec::with_capacity(chunk.valid_frames); classes];
            for t in 0..chunk.valid_frames {
                for c in 0..classes {
                    cols[c].push(scores.get(t, c));
                    truths[c].push(chunk.labels.get(t, c));
                }
            }
            out.push((cols, truths));
        }
        Ok(out)
    };

    match ckpt.spec.head {
        HeadKind::Independent | HeadKind::Gru => {
            let columns = score_columns(&thresholds)?;
            for c in 0..classes {
                let scores: Vec<f64> = columns.iter().flat_map(|(s, _)| s[c].clone()).collect();
                let truth: Vec<bool> = columns.iter().flat_map(|(_, t)| t[c].clone()).collect();
                let (eps, _) = best_threshold(&scores, &truth, &grid);
                thresholds.set(c, eps)?;
            }
        }
        HeadKind::Chain => {
            for position in 0..classes {
                let class = ckpt.order.class_at(position);
                // Scores at this position depend only on thresholds already
                // fixed at earlier positions.
                let columns = score_columns(&thresholds)?;
                let scores: Vec<f64> =
                    columns.iter().flat_map(|(s, _)| s[class].clone()).collect();
                let truth: Vec<bool> =
                    columns.iter().flat_map(|(_, t)| t[class].clone()).collect();
                let (eps, _) = best_threshold(&scores, &truth, &grid);
                thresholds.set(class, eps)?;
            }
        }
    }
    Ok(thresholds)
}

/// Inference over one split: per-clip detections are reassembled from chunks
/// (padding dropped), then frame and segment counts accumulate across clips.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    split: SplitKind,
    thresholds: &ThresholdVector,
    frames_per_segment: usize,
) -> Result<MetricsReport, TrainError> {
    check_vocabulary(ckpt, dataset)?;
    if thresholds.as_slice().len() != ckpt.spec.classes {
        return Err(TrainError::Config(format!(
            "{} thresholds for {} classes",
            thresholds.as_slice().len(),
            ckpt.spec.classes
        )));
    }
    let clips = dataset.clips_in(split);
    if clips.is_empty() {
        return Err(TrainError::Config(format!(
            "no clips in the {} split",
            split.as_str()
        )));
    }
    let store = ckpt.param_store()?;
    let classes = ckpt.spec.classes;
    let mut frame_acc = vec![DetectionCounts::default(); classes];
    let mut segment_acc = vec![DetectionCounts::default(); classes];
    for clip in clips {
        let z = standardize(&clip.features, &ckpt.feat_mean, &ckpt.feat_std)?;
        let zclip = Clip {
            id: clip.id.clone(),
            features: z,
            labels: clip.labels.clone(),
            split: clip.split,
        };
        let chunks = chunk_clip(&zclip, ckpt.spec.extractor.frames)?;
        let mut pred = ActivityMatrix::zeros(clip.frames(), classes);
        let mut offset = 0;
        for chunk in &chunks {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape)?;
            let (_, detections) = model::infer_scores(
                &mut tape,
                &ids,
                &ckpt.spec,
                &chunk.features,
                &ckpt.order,
                thresholds,
                &ckpt.running_stats,
            )?;
            for t in 0..chunk.valid_frames {
                for c in 0..classes {
                    pred.set(offset + t, c, detections.get(t, c));
                }
            }
            offset += chunk.valid_frames;
        }
        accumulate(&mut frame_acc, &frame_counts(&pred, &clip.labels)?);
        accumulate(
            &mut segment_acc,
            &segment_counts(&pred, &clip.labels, frames_per_segment)?,
        );
    }
    Ok(MetricsReport::from_counts(
        dataset.vocabulary.names().to_vec(),
        &frame_acc,
        &segment_acc,
        frames_per_segment,
    ))
}
