//! Datasets: clips of features and labels, synthetic generation, file
//! ingestion, chunking, and label statistics.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset};
pub use synth::{
    dependent_preset, independent_preset, synth_generate, synth_label_stream, ClassDynamics,
    SynthConfig, DEPENDENT_PAIR,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::heads::ActivityMatrix;
use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}: empty file")]
    EmptyFile { file: String },
    #[error("{file}:{line}: cannot parse {cell:?} as a number")]
    BadNumber {
        file: String,
        line: usize,
        cell: String,
    },
    #[error("{file}:{line}: {got} columns, expected {expected}")]
    ColumnCount {
        file: String,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{file}: {got} rows, expected {expected} to match the feature file")]
    RowCountMismatch {
        file: String,
        expected: usize,
        got: usize,
    },
    #[error("{file}: label at row {row}, column {col} is {value:?}, not 0 or 1")]
    NonBinaryLabel {
        file: String,
        row: usize,
        col: usize,
        value: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("clip {id}: {reason}")]
    ClipInvariant { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(DataError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// Ordered, unique, non-empty class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::Vocabulary("no classes".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(DataError::Vocabulary(format!("class {i} has an empty name")));
            }
            if names[..i].contains(name) {
                return Err(DataError::Vocabulary(format!("duplicate class name {name:?}")));
            }
        }
        Ok(ClassVocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One recording: a feature sequence with aligned per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub features: Tensor,
    pub labels: ActivityMatrix,
    pub split: SplitKind,
}

impl Clip {
    pub fn new(
        id: String,
        features: Tensor,
        labels: ActivityMatrix,
        split: SplitKind,
    ) -> Result<Self, DataError> {
        if features.rank() != 2 {
            return Err(DataError::ClipInvariant {
                id,
                reason: format!("features must be [frames, bins], got {:?}", features.shape()),
            });
        }
        if features.rows() == 0 {
            return Err(DataError::ClipInvariant {
                id,
                reason: "clip has no frames".into(),
            });
        }
        if labels.frames() != features.rows() {
            return Err(DataError::ClipInvariant {
                id,
                reason: format!(
                    "{} feature frames but {} label frames",
                    features.rows(),
                    labels.frames()
                ),
            });
        }
        if !features.all_finite() {
            return Err(DataError::ClipInvariant {
                id,
                reason: "non-finite feature value".into(),
            });
        }
        Ok(Clip {
            id,
            features,
            labels,
            split,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: ClassVocabulary,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn new(vocabulary: ClassVocabulary, clips: Vec<Clip>) -> Result<Self, DataError> {
        for clip in &clips {
            if clip.labels.classes() != vocabulary.len() {
                return Err(DataError::ClipInvariant {
                    id: clip.id.clone(),
                    reason: format!(
                        "{} label classes but vocabulary has {}",
                        clip.labels.classes(),
                        vocabulary.len()
                    ),
                });
            }
        }
        Ok(Dataset { vocabulary, clips })
    }

    pub fn clips_in(&self, split: SplitKind) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    /// Per-class active-frame counts over one split; drives the frequency
    /// order strategies.
    pub fn class_frame_counts(&self, split: SplitKind) -> Vec<u64> {
        let l = self.vocabulary.len();
        let mut counts = vec![0u64; l];
        for clip in self.clips.iter().filter(|c| c.split == split) {
            for c in 0..l {
                counts[c] += clip.labels.count_active(c) as u64;
            }
        }
        counts
    }
}

/// A fixed-length piece of a clip. The first `valid_frames` rows are real;
/// the rest is zero padding excluded from loss and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub features: Tensor,
    pub labels: ActivityMatrix,
    pub valid_frames: usize,
}

impl Chunk {
    /// 0/1 mask tensor of shape [frames, classes]: 1 on valid rows.
    pub fn loss_mask(&self) -> Tensor {
        let frames = self.labels.frames();
        let classes = self.labels.classes();
        let mut data = vec![0.0; frames * classes];
        data[..self.valid_frames * classes].fill(1.0);
        Tensor::new(vec![frames, classes], data).expect("mask layout")
    }

    pub fn is_padded(&self) -> bool {
        self.valid_frames < self.labels.frames()
    }
}

/// Splits a clip into consecutive chunks of `frames` frames. The final
/// partial chunk is zero-padded in features and labels.
pub fn chunk_clip(clip: &Clip, frames: usize) -> Result<Vec<Chunk>, DataError> {
    if frames == 0 {
        return Err(DataError::Config("chunk length must be at least 1".into()));
    }
    let total = clip.frames();
    let bins = clip.features.cols();
    let classes = clip.labels.classes();
    let mut out = Vec::with_capacity(total.div_ceil(frames));
    let mut start = 0;
    while start < total {
        let end = (start + frames).min(total);
        let valid = end - start;
        let mut feat = Tensor::zeros(vec![frames, bins]);
        for t in 0..valid {
            let src = clip.features.row_slice(start + t);
            feat.data_mut()[t * bins..(t + 1) * bins].copy_from_slice(src);
        }
        let mut labels = ActivityMatrix::zeros(frames, classes);
        for t in 0..valid {
            for c in 0..classes {
                labels.set(t, c, clip.labels.get(start + t, c));
            }
        }
        out.push(Chunk {
            features: feat,
            labels,
            valid_frames: valid,
        });
        start = end;
    }
    Ok(out)
}

/// Reassigns splits by seeded shuffle then partition. Fractions must be
/// positive and sum to 1; every split must receive at least one clip.
pub fn split_dataset(
    dataset: &mut Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(), DataError> {
    let (ft, fv, fe) = fractions;
    for (name, f) in [("train", ft), ("val", fv), ("test", fe)] {
        if !(f > 0.0 && f.is_finite()) {
            return Err(DataError::Config(format!(
                "{name} fraction {f} must be positive"
            )));
        }
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!(
            "fractions sum to {}, expected 1",
            ft + fv + fe
        )));
    }
    let n = dataset.clips.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DataError::Config(format!(
            "{n} clips split as {n_train}/{n_val}/{} leaves an empty split",
            n.saturating_sub(n_train + n_val)
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for (rank, &idx) in order.iter().enumerate() {
        dataset.clips[idx].split = if rank < n_train {
            SplitKind::Train
        } else if rank < n_train + n_val {
            SplitKind::Val
        } else {
            SplitKind::Test
        };
    }
    Ok(())
}

/// Pairwise frame co-occurrence rates plus marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceStats {
    /// rates[j][k] = fraction of frames where j and k are both active.
    pub rates: Vec<Vec<f64>>,
    pub marginals: Vec<f64>,
    pub frames: usize,
}

impl CooccurrenceStats {
    /// How far a pair deviates from independence:
    /// rate(j,k) - marginal(j) * marginal(k).
    pub fn dependence_gap(&self, j: usize, k: usize) -> f64 {
        self.rates[j][k] - self.marginals[j] * self.marginals[k]
    }
}

/// Statistics over explicit label matrices.
pub fn cooccurrence_from_labels(labels: &[&ActivityMatrix]) -> Result<CooccurrenceStats, DataError> {
    let first = labels
        .first()
        .ok_or_else(|| DataError::Config("co-occurrence of an empty label set".into()))?;
    let classes = first.classes();
    let mut joint = vec![vec![0u64; classes]; classes];
    let mut frames = 0usize;
    for m in labels {
        if m.classes() != classes {
            return Err(DataError::Config(format!(
                "label matrices disagree on class count: {} vs {classes}",
                m.classes()
            )));
        }
        frames += m.frames();
        for t in 0..m.frames() {
            for j in 0..classes {
                if !m.get(t, j) {
                    continue;
                }
                for k in 0..classes {
                    if m.get(t, k) {
                        joint[j][k] += 1;
                    }
                }
            }
        }
    }
    if frames == 0 {
        return Err(DataError::Config("co-occurrence over zero frames".into()));
    }
    let rates: Vec<Vec<f64>> = joint
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / frames as f64).collect())
        .collect();
    let marginals: Vec<f64> = (0..classes).map(|c| rates[c][c]).collect();
    Ok(CooccurrenceStats {
        rates,
        marginals,
        frames,
    })
}

/// Statistics over every clip of a dataset.
pub fn cooccurrence_stats(dataset: &Dataset) -> Result<CooccurrenceStats, DataError> {
    let labels: Vec<&ActivityMatrix> = dataset.clips.iter().map(|c| &c.labels).collect();
    cooccurrence_from_labels(&labels)
}

/// Per-bin mean and standard deviation over all frames of the given clips.
/// Deviations are floored to keep standardization finite on constant bins.
pub fn feature_stats(clips: &[&Clip]) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let first = clips
        .first()
        .ok_or_else(|| DataError::Config("feature stats of an empty clip set".into()))?;
    let bins = first.features.cols();
    let mut mean = vec![0.0; bins];
    let mut frames = 0usize;
    for clip in clips {
        if clip.features.cols() != bins {
            return Err(DataError::Config(format!(
                "clip {} has {} bins, expected {bins}",
                clip.id,
                clip.features.cols()
            )));
        }
        frames += clip.frames();
        for t in 0..clip.frames() {
            for (m, v) in mean.iter_mut().zip(clip.features.row_slice(t)) {
                *m += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= frames as f64;
    }
    let mut var = vec![0.0; bins];
    for clip in clips {
        for t in 0..clip.frames() {
            for (i, v) in clip.features.row_slice(t).iter().enumerate() {
                let d = v - mean[i];
                var[i] += d * d;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| (v / frames as f64).sqrt().max(1e-12))
        .collect();
    Ok((mean, std))
}

/// Applies stored standardization to one clip's features.
pub fn standardize(features: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor, DataError> {
    if features.rank() != 2 || features.cols() != mean.len() || mean.len() != std.len() {
        return Err(DataError::Config(format!(
            "standardize: features {:?} against {} / {} stats",
            features.shape(),
            mean.len(),
            std.len()
        )));
    }
    let bins = mean.len();
    let data: Vec<f64> = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % bins]) / std[i % bins])
        .collect();
    Ok(Tensor::new(features.shape().to_vec(), data).expect("same layout"))
}
