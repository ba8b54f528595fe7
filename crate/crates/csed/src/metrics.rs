//! Detection metrics: per-class precision, recall, F1, in two time
//! resolutions.
//!
//! Frame metrics count every frame as its own decision. Segment metrics
//! first collapse fixed-length runs of frames into one decision per segment
//! (active if any frame is active); a trailing partial segment still counts.
//! Macro averages are plain arithmetic means over classes, and any ratio
//! with a zero denominator is defined as zero so degenerate classes drag the
//! average down instead of poisoning it.

use thiserror::Error;

use crate::heads::ActivityMatrix;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction is {pf}x{pc}, reference is {rf}x{rc}")]
    ShapeMismatch {
        pf: usize,
        pc: usize,
        rf: usize,
        rc: usize,
    },
    #[error("frames_per_segment must be at least 1")]
    ZeroSegment,
    #[error("relative improvement against a zero baseline is undefined")]
    ZeroBaseline,
}

/// Raw per-class detection counts; everything else derives from these.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DetectionCounts {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl DetectionCounts {
    pub fn add(&mut self, other: &DetectionCounts) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_positives)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.true_positives + self.false_negatives)
    }

    pub fn f1(&self) -> f64 {
        ratio(
            2 * self.true_positives,
            2 * self.true_positives + self.false_positives + self.false_negatives,
        )
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_shapes(pred: &ActivityMatrix, truth: &ActivityMatrix) -> Result<(), MetricsError> {
    if pred.frames() != truth.frames() || pred.classes() != truth.classes() {
        return Err(MetricsError::ShapeMismatch {
            pf: pred.frames(),
            pc: pred.classes(),
            rf: truth.frames(),
            rc: truth.classes(),
        });
    }
    Ok(())
}

/// Per-class counts at frame resolution.
pub fn frame_counts(
    pred: &ActivityMatrix,
    truth: &ActivityMatrix,
) -> Result<Vec<DetectionCounts>, MetricsError> {
    check_shapes(pred, truth)?;
    let mut out = vec![DetectionCounts::default(); pred.classes()];
    for t in 0..pred.frames() {
        for c in 0..pred.classes() {
            tally(&mut out[c], pred.get(t, c), truth.get(t, c));
        }
    }
    Ok(out)
}

/// Per-class counts after collapsing each run of `frames_per_segment` frames
/// into one decision (active if any frame in the run is active).
pub fn segment_counts(
    pred: &ActivityMatrix,
    truth: &ActivityMatrix,
    frames_per_segment: usize,
) -> Result<Vec<DetectionCounts>, MetricsError> {
    check_shapes(pred, truth)?;
    if frames_per_segment == 0 {
        return Err(MetricsError::ZeroSegment);
    }
    let mut out = vec![DetectionCounts::default(); pred.classes()];
    let mut start = 0;
    while start < pred.frames() {
        let end = (start + frames_per_segment).min(pred.frames());
        for c in 0..pred.classes() {
            let p = (start..end).any(|t| pred.get(t, c));
            let r = (start..end).any(|t| truth.get(t, c));
            tally(&mut out[c], p, r);
        }
        start = end;
    }
    Ok(out)
}

fn tally(counts: &mut DetectionCounts, predicted: bool, actual: bool) {
    match (predicted, actual) {
        (true, true) => counts.true_positives += 1,
        (true, false) => counts.false_positives += 1,
        (false, true) => counts.false_negatives += 1,
        (false, false) => {}
    }
}

/// Sums per-class counts from another clip into an accumulator.
pub fn accumulate(acc: &mut [DetectionCounts], extra: &[DetectionCounts]) {
    debug_assert_eq!(acc.len(), extra.len());
    for (a, e) in acc.iter_mut().zip(extra) {
        a.add(e);
    }
}

/// Ready-to-report numbers for one class at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub counts: DetectionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<DetectionCounts> for ClassMetrics {
    fn from(counts: DetectionCounts) -> Self {
        ClassMetrics {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
        }
    }
}

/// One resolution (frame or segment): per-class metrics plus macro averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFamily {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricsFamily {
    pub fn from_counts(counts: &[DetectionCounts]) -> Self {
        let per_class: Vec<ClassMetrics> =
            counts.iter().map(|c| ClassMetrics::from(*c)).collect();
        let n = per_class.len().max(1) as f64;
        MetricsFamily {
            macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / n,
            macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / n,
            macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n,
            per_class,
        }
    }
}

/// Full evaluation outcome for one model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub frame: MetricsFamily,
    pub segment: MetricsFamily,
    pub frames_per_segment: usize,
}

impl MetricsReport {
    pub fn from_counts(
        class_names: Vec<String>,
        frame: &[DetectionCounts],
        segment: &[DetectionCounts],
        frames_per_segment: usize,
    ) -> Self {
        MetricsReport {
            class_names,
            frame: MetricsFamily::from_counts(frame),
            segment: MetricsFamily::from_counts(segment),
            frames_per_segment,
        }
    }

    /// Per-class frame F1, in class order; the chain-order strategies
    /// consume this.
    pub fn per_class_frame_f1(&self) -> Vec<f64> {
        self.frame.per_class.iter().map(|m| m.f1).collect()
    }
}

/// Relative improvement of `candidate` over `baseline`, in percent.
pub fn relative_improvement_percent(candidate: f64, baseline: f64) -> Result<f64, MetricsError> {
    if baseline == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok((candidate - baseline) / baseline * 100.0)
}
