//! Classifier heads over the shared latent sequence.
//!
//! Three variants score the same [frames, latent] input:
//!
//! * independent: one sigmoid output per class, no coupling;
//! * gru: a GRU over time, then a shared linear layer, still no coupling
//!   between classes within a frame;
//! * chain: classes are decided one at a time in a fixed order, and each
//!   decision feeds the next as an extra input, within the same frame.
//!
//! The chain runs one shared GRU cell across chain positions (not across
//! time). Its hidden state starts at zero for every frame, and the
//! conditioning input is a class-indexed multi-hot vector of the classes
//! already decided for that frame: ground-truth labels in teacher mode,
//! thresholded detections in inference mode.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::chainorder::ClassOrder;
use crate::nn::rnn::{bind_gru, gru_step, register_gru};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::{Tensor, TensorError};
use crate::nn::ParamStore;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("score {value} at frame {frame}, class {class} outside (0, 1)")]
    ScoreRange {
        frame: usize,
        class: usize,
        value: f64,
    },
    #[error("activity {value} at frame {frame}, class {class} is not 0 or 1")]
    NotBinary {
        frame: usize,
        class: usize,
        value: f64,
    },
    #[error("threshold {value} for class {class} outside [0, 1]")]
    ThresholdRange { class: usize, value: f64 },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which classifier head a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Independent,
    Gru,
    Chain,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::Independent => write!(f, "independent"),
            HeadKind::Gru => write!(f, "gru"),
            HeadKind::Chain => write!(f, "chain"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "independent" => Ok(HeadKind::Independent),
            "gru" => Ok(HeadKind::Gru),
            "chain" => Ok(HeadKind::Chain),
            other => Err(format!("unknown head kind {other:?}")),
        }
    }
}

/// Per-frame, per-class probabilities, all strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    inner: Tensor,
}

impl ScoreMatrix {
    pub fn from_tensor(inner: Tensor) -> Result<Self, HeadError> {
        if inner.rank() != 2 {
            return Err(HeadError::Dimension(format!(
                "scores must be [frames, classes], got {:?}",
                inner.shape()
            )));
        }
        let classes = inner.cols();
        for (i, &v) in inner.data().iter().enumerate() {
            if !(v > 0.0 && v < 1.0) {
                return Err(HeadError::ScoreRange {
                    frame: i / classes,
                    class: i % classes,
                    value: v,
                });
            }
        }
        Ok(ScoreMatrix { inner })
    }

    pub fn frames(&self) -> usize {
        self.inner.rows()
    }

    pub fn classes(&self) -> usize {
        self.inner.cols()
    }

    pub fn get(&self, frame: usize, class: usize) -> f64 {
        self.inner.at2(frame, class)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.inner
    }

    /// Applies per-class thresholds: active iff score > threshold.
    pub fn binarize(&self, thresholds: &ThresholdVector) -> Result<ActivityMatrix, HeadError> {
        if thresholds.len() != self.classes() {
            return Err(HeadError::Dimension(format!(
                "{} thresholds for {} classes",
                thresholds.len(),
                self.classes()
            )));
        }
        let mut out = ActivityMatrix::zeros(self.frames(), self.classes());
        for t in 0..self.frames() {
            for c in 0..self.classes() {
                if self.get(t, c) > thresholds.get(c) {
                    out.set(t, c, true);
                }
            }
        }
        Ok(out)
    }

    /// Keeps the first `frames` rows; used to drop chunk padding.
    pub fn truncated(&self, frames: usize) -> Result<ScoreMatrix, HeadError> {
        if frames == 0 || frames > self.frames() {
            return Err(HeadError::Dimension(format!(
                "cannot keep {frames} of {} frames",
                self.frames()
            )));
        }
        let classes = self.classes();
        let data = self.inner.data()[..frames * classes].to_vec();
        Ok(ScoreMatrix {
            inner: Tensor::new(vec![frames, classes], data).expect("prefix slice keeps layout"),
        })
    }
}

/// Binary activity per frame and class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMatrix {
    frames: usize,
    classes: usize,
    data: Vec<u8>,
}

impl ActivityMatrix {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        ActivityMatrix {
            frames,
            classes,
            data: vec![0; frames * classes],
        }
    }

    /// Validates a 0/1 tensor of shape [frames, classes].
    pub fn from_tensor(t: &Tensor) -> Result<Self, HeadError> {
        if t.rank() != 2 {
            return Err(HeadError::Dimension(format!(
                "activity must be [frames, classes], got {:?}",
                t.shape()
            )));
        }
        let classes = t.cols();
        let mut out = ActivityMatrix::zeros(t.rows(), classes);
        for (i, &v) in t.data().iter().enumerate() {
            if v == 1.0 {
                out.data[i] = 1;
            } else if v != 0.0 {
                return Err(HeadError::NotBinary {
                    frame: i / classes,
                    class: i % classes,
                    value: v,
                });
            }
        }
        Ok(out)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, frame: usize, class: usize) -> bool {
        self.data[frame * self.classes + class] == 1
    }

    pub fn set(&mut self, frame: usize, class: usize, active: bool) {
        self.data[frame * self.classes + class] = active as u8;
    }

    /// Frames in which the class is active.
    pub fn count_active(&self, class: usize) -> usize {
        (0..self.frames).filter(|&t| self.get(t, class)).count()
    }

    /// The matrix as a 0/1 f64 tensor, e.g. for loss targets.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.frames, self.classes],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("element count matches by construction")
    }

    /// Keeps the first `frames` rows.
    pub fn truncated(&self, frames: usize) -> Result<ActivityMatrix, HeadError> {
        if frames == 0 || frames > self.frames {
            return Err(HeadError::Dimension(format!(
                "cannot keep {frames} of {} frames",
                self.frames
            )));
        }
        Ok(ActivityMatrix {
            frames,
            classes: self.classes,
            data: self.data[..frames * self.classes].to_vec(),
        })
    }
}

/// Per-class decision thresholds in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(values: Vec<f64>) -> Result<Self, HeadError> {
        for (class, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(HeadError::ThresholdRange { class, value: v });
            }
        }
        Ok(ThresholdVector(values))
    }

    /// The default operating point before calibration.
    pub fn uniform(classes: usize, value: f64) -> Result<Self, HeadError> {
        ThresholdVector::new(vec![value; classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn set(&mut self, class: usize, value: f64) -> Result<(), HeadError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(HeadError::ThresholdRange { class, value });
        }
        self.0[class] = value;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Class-indexed multi-hot conditioning vector for one frame at one chain
/// position: 1 at classes already decided active, 0 elsewhere (including
/// every class not yet visited).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Builds the conditioning vector for a chain position. `active_earlier`
/// lists classes detected (or labeled) active at strictly earlier positions;
/// anything at the current or a later position is an error, never silently
/// leaked into the input.
pub fn condition_vector(
    active_earlier: &[usize],
    position: usize,
    order: &ClassOrder,
) -> Result<ConditionVector, HeadError> {
    let classes = order.len();
    if position >= classes {
        return Err(HeadError::Conditioning(format!(
            "position {position} out of range for {classes} classes"
        )));
    }
    let mut v = vec![0.0; classes];
    for &class in active_earlier {
        let p = order.position_of(class).ok_or_else(|| {
            HeadError::Conditioning(format!("class {class} not in order"))
        })?;
        if p >= position {
            return Err(HeadError::Conditioning(format!(
                "class {class} sits at position {p}, not before {position}"
            )));
        }
        v[class] = 1.0;
    }
    Ok(ConditionVector(v))
}

/// Registers the parameters of one head under "head." names.
/// The chain consumes latent + classes inputs and shares one scalar output
/// layer across positions; the other heads emit all classes at once.
pub fn register_head_params(
    kind: HeadKind,
    latent_dim: usize,
    classes: usize,
    hidden: usize,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<(), TensorError> {
    if latent_dim == 0 || classes == 0 {
        return Err(TensorError::Argument(
            "head: latent_dim and classes must be positive".into(),
        ));
    }
    match kind {
        HeadKind::Independent => {
            store.init_uniform("head.out.w", vec![classes, latent_dim], latent_dim, rng)?;
            store.init_uniform("head.out.b", vec![classes], latent_dim, rng)?;
        }
        HeadKind::Gru => {
            if hidden == 0 {
                return Err(TensorError::Argument("head: hidden must be positive".into()));
            }
            register_gru(store, "head.gru", latent_dim, hidden, rng)?;
            store.init_uniform("head.out.w", vec![classes, hidden], hidden, rng)?;
            store.init_uniform("head.out.b", vec![classes], hidden, rng)?;
        }
        HeadKind::Chain => {
            if hidden == 0 {
                return Err(TensorError::Argument("head: hidden must be positive".into()));
            }
            register_gru(store, "head.gru", latent_dim + classes, hidden, rng)?;
            store.init_uniform("head.out.w", vec![1, hidden], hidden, rng)?;
            store.init_uniform("head.out.b", vec![1], hidden, rng)?;
        }
    }
    Ok(())
}

fn out_layer(ids: &BTreeMap<String, NodeId>) -> Result<(NodeId, NodeId), TensorError> {
    let w = ids
        .get("head.out.w")
        .copied()
        .ok_or_else(|| TensorError::Usage("head.out.w not bound".into()))?;
    let b = ids
        .get("head.out.b")
        .copied()
        .ok_or_else(|| TensorError::Usage("head.out.b not bound".into()))?;
    Ok((w, b))
}

/// Independent head: per-class sigmoid over a shared linear layer.
pub fn independent_scores(
    tape: &mut Tape,
    latent: NodeId,
    ids: &BTreeMap<String, NodeId>,
) -> Result<NodeId, TensorError> {
    let (w, b) = out_layer(ids)?;
    let z = tape.linear(latent, w, Some(b))?;
    Ok(tape.sigmoid(z))
}

/// GRU head: unidirectional GRU over time, shared linear layer, sigmoid.
pub fn gru_scores(
    tape: &mut Tape,
    latent: NodeId,
    hidden: usize,
    ids: &BTreeMap<String, NodeId>,
) -> Result<NodeId, TensorError> {
    let cell = bind_gru(ids, "head.gru")?;
    let steps = crate::nn::rnn::gru_sequence(tape, latent, &cell, hidden, false)?;
    let stacked = tape.stack_rows(&steps)?;
    let (w, b) = out_layer(ids)?;
    let z = tape.linear(stacked, w, Some(b))?;
    Ok(tape.sigmoid(z))
}

/// How the chain obtains the classes already decided for each frame.
enum Conditioning<'a> {
    /// Ground-truth labels (teacher forcing); no thresholding happens.
    Teacher(&'a ActivityMatrix),
    /// Detections thresholded during this very pass.
    Detections(&'a ThresholdVector),
}

/// Output of a chain pass. Score columns live at true class indices, not at
/// chain positions.
struct ChainPass {
    scores: NodeId,
    detections: Option<ActivityMatrix>,
}

fn chain_pass(
    tape: &mut Tape,
    latent: NodeId,
    order: &ClassOrder,
    hidden: usize,
    ids: &BTreeMap<String, NodeId>,
    conditioning: Conditioning<'_>,
) -> Result<ChainPass, HeadError> {
    let (frames, latent_dim) = {
        let t = tape.value(latent);
        if t.rank() != 2 || t.rows() == 0 {
            return Err(HeadError::Dimension(format!(
                "chain: latent must be non-empty [frames, dim], got {:?}",
                t.shape()
            )));
        }
        (t.rows(), t.cols())
    };
    let classes = order.len();
    match &conditioning {
        Conditioning::Teacher(labels) => {
            if labels.frames() != frames || labels.classes() != classes {
                return Err(HeadError::Dimension(format!(
                    "chain: labels are {}x{}, expected {}x{}",
                    labels.frames(),
                    labels.classes(),
                    frames,
                    classes
                )));
            }
        }
        Conditioning::Detections(thresholds) => {
            if thresholds.len() != classes {
                return Err(HeadError::Dimension(format!(
                    "chain: {} thresholds for {classes} classes",
                    thresholds.len()
                )));
            }
        }
    }
    let cell = bind_gru(ids, "head.gru")?;
    let (w, b) = out_layer(ids).map_err(HeadError::Tensor)?;
    {
        let wt = tape.value(w);
        if wt.shape() != [1, hidden] {
            return Err(HeadError::Dimension(format!(
                "chain: output weight is {:?}, expected [1, {hidden}]",
                wt.shape()
            )));
        }
        let cw = tape.value(cell.w_update).cols();
        if cw != latent_dim + classes {
            return Err(HeadError::Dimension(format!(
                "chain: cell consumes {cw} inputs, latent {latent_dim} + {classes} classes given"
            )));
        }
    }

    // Decisions made so far; in teacher mode this mirrors the labels of
    // visited classes instead.
    let mut decided = ActivityMatrix::zeros(frames, classes);
    // The hidden state is carried across chain positions and is zero at
    // position 0 for every frame; rows never mix, so one batched GRU step
    // per position preserves per-frame isolation.
    let mut h = tape.constant(Tensor::zeros(vec![frames, hidden]));
    let mut columns: Vec<Option<NodeId>> = vec![None; classes];
    for position in 0..classes {
        let class = order.class_at(position);
        let mut cond_rows = Vec::with_capacity(frames);
        for t in 0..frames {
            let active: Vec<usize> = (0..position)
                .map(|p| order.class_at(p))
                .filter(|&c| decided.get(t, c))
                .collect();
            cond_rows.push(condition_vector(&active, position, order)?.0);
        }
        let cond = tape.constant(Tensor::from_rows(&cond_rows).map_err(HeadError::Tensor)?);
        let input = tape.concat_cols(&[latent, cond]).map_err(HeadError::Tensor)?;
        h = gru_step(tape, input, h, &cell).map_err(HeadError::Tensor)?;
        let z = tape.linear(h, w, Some(b)).map_err(HeadError::Tensor)?;
        let z = tape.sigmoid(z);
        columns[class] = Some(z);
        match &conditioning {
            Conditioning::Teacher(labels) => {
                for t in 0..frames {
                    decided.set(t, class, labels.get(t, class));
                }
            }
            Conditioning::Detections(thresholds) => {
                let eps = thresholds.get(class);
                let zv = tape.value(z);
                for t in 0..frames {
                    decided.set(t, class, zv.at2(t, 0) > eps);
                }
            }
        }
    }
    let columns: Vec<NodeId> = columns.into_iter().map(|c| c.unwrap()).collect();
    let scores = tape.concat_cols(&columns).map_err(HeadError::Tensor)?;
    let detections = match conditioning {
        Conditioning::Teacher(_) => None,
        Conditioning::Detections(_) => Some(decided),
    };
    Ok(ChainPass { scores, detections })
}

/// Teacher-forced chain pass: conditioning comes from ground-truth labels of
/// already visited classes. Returns the [frames, classes] score node for the
/// loss; gradients flow through the whole chain.
pub fn chain_scores_teacher(
    tape: &mut Tape,
    latent: NodeId,
    labels: &ActivityMatrix,
    order: &ClassOrder,
    hidden: usize,
    ids: &BTreeMap<String, NodeId>,
) -> Result<NodeId, HeadError> {
    let pass = chain_pass(
        tape,
        latent,
        order,
        hidden,
        ids,
        Conditioning::Teacher(labels),
    )?;
    Ok(pass.scores)
}

/// Inference chain pass: each position's scores are thresholded immediately
/// and the resulting detections condition the later positions.
pub fn chain_infer(
    tape: &mut Tape,
    latent: NodeId,
    order: &ClassOrder,
    thresholds: &ThresholdVector,
    hidden: usize,
    ids: &BTreeMap<String, NodeId>,
) -> Result<(ScoreMatrix, ActivityMatrix), HeadError> {
    let pass = chain_pass(
        tape,
        latent,
        order,
        hidden,
        ids,
        Conditioning::Detections(thresholds),
    )?;
    let scores = ScoreMatrix::from_tensor(tape.value(pass.scores).clone())?;
    Ok((scores, pass.detections.expect("inference pass yields detections")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(frames: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![frames, dim],
            (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn chain_setup(latent_dim: usize, classes: usize, hidden: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_head_params(HeadKind::Chain, latent_dim, classes, hidden, &mut store, &mut rng)
            .unwrap();
        store
    }

    #[test]
    fn score_matrix_rejects_out_of_range() {
        let t = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        match ScoreMatrix::from_tensor(t) {
            Err(HeadError::ScoreRange { frame: 0, class: 1, value }) => assert_eq!(value, 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binarize_uses_strict_greater() {
        let t = Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap();
        let scores = ScoreMatrix::from_tensor(t).unwrap();
        let thresholds = ThresholdVector::uniform(2, 0.5).unwrap();
        let act = scores.binarize(&thresholds).unwrap();
        assert!(!act.get(0, 0), "score equal to threshold stays inactive");
        assert!(act.get(0, 1));
    }

    #[test]
    fn condition_vector_is_class_indexed() {
        let order = ClassOrder::from_permutation(vec![2, 0, 1]).unwrap();
        // At position 2, classes 2 and 0 are decided; only class 2 active.
        let v = condition_vector(&[2], 2, &order).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 1.0]);
        // Unvisited entries stay zero even though class 1 comes later.
        let v = condition_vector(&[2, 0], 2, &order).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn condition_vector_rejects_unvisited_classes() {
        let order = ClassOrder::from_permutation(vec![2, 0, 1]).unwrap();
        // Class 1 is decided last; it cannot condition position 1.
        assert!(condition_vector(&[1], 1, &order).is_err());
        // The class at the current position is not "earlier" either.
        assert!(condition_vector(&[0], 1, &order).is_err());
        assert!(condition_vector(&[], 3, &order).is_err());
    }

    #[test]
    fn independent_scores_shape_and_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        register_head_params(HeadKind::Independent, 4, 3, 0, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).unwrap();
        let latent = tape.constant(random_latent(5, 4, 2));
        let scores = independent_scores(&mut tape, latent, &ids).unwrap();
        let m = ScoreMatrix::from_tensor(tape.value(scores).clone()).unwrap();
        assert_eq!((m.frames(), m.classes()), (5, 3));
    }

    #[test]
    fn gru_scores_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        register_head_params(HeadKind::Gru, 4, 3, 6, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).unwrap();
        let latent = tape.constant(random_latent(5, 4, 4));
        let scores = gru_scores(&mut tape, latent, 6, &ids).unwrap();
        assert_eq!(tape.value(scores).shape(), &[5, 3]);
    }

    #[test]
    fn chain_scores_land_at_class_indices() {
        // With order [2, 0, 1] the first decided column must be class 2's.
        let store = chain_setup(4, 3, 5, 7);
        let order = ClassOrder::from_permutation(vec![2, 0, 1]).unwrap();
        let latent_t = random_latent(4, 4, 8);
        let labels = ActivityMatrix::zeros(4, 3);

        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).unwrap();
        let latent = tape.constant(latent_t.clone());
        let scores = chain_scores_teacher(&mut tape, latent, &labels, &order, 5, &ids).unwrap();
        assert_eq!(tape.value(scores).shape(), &[4, 3]);

        // Reference: first position by hand. Conditioning is all zeros, the
        // state starts at zero, so column of class 2 is sigmoid(w·gru(x)+b).
        let mut tape2 = Tape::new();
        let ids2 = store.bind(&mut tape2).unwrap();
        let cell = bind_gru(&ids2, "head.gru").unwrap();
        let latent2 = tape2.constant(latent_t);
        let zeros = tape2.constant(Tensor::zeros(vec![4, 3]));
        let input = tape2.concat_cols(&[latent2, zeros]).unwrap();
        let h0 = tape2.constant(Tensor::zeros(vec![4, 5]));
        let h1 = gru_step(&mut tape2, input, h0, &cell).unwrap();
        let (w, b) = out_layer(&ids2).unwrap();
        let z = tape2.linear(h1, w, Some(b)).unwrap();
        let z = tape2.sigmoid(z);
        for t in 0..4 {
            let got = tape.value(scores).at2(t, 2);
            let want = tape2.value(z).at2(t, 0);
            assert!((got - want).abs() < 1e-15, "frame {t}: {got} vs {want}");
        }
    }

    #[test]
    fn teacher_conditioning_only_looks_backward() {
        let store = chain_setup(3, 3, 4, 11);
        let order = ClassOrder::identity(3).unwrap();
        let latent_t = random_latent(6, 3, 12);
        let mut labels = ActivityMatrix::zeros(6, 3);
        labels.set(0, 0, true);
        labels.set(2, 1, true);

        let run = |labels: &ActivityMatrix| {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape).unwrap();
            let latent = tape.constant(latent_t.clone());
            let scores =
                chain_scores_teacher(&mut tape, latent, labels, &order, 4, &ids).unwrap();
            tape.value(scores).clone()
        };
        let base = run(&labels);
        // Changing labels of the last class in the order cannot move any
        // score: nothing is conditioned on it.
        let mut flipped = labels.clone();
        for t in 0..6 {
            flipped.set(t, 2, true);
        }
        assert_eq!(base, run(&flipped));
        // Changing the first class's labels must move later columns.
        let mut first = labels.clone();
        first.set(3, 0, true);
        let moved = run(&first);
        assert_ne!(base, moved);
        // ... but never the first column itself.
        for t in 0..6 {
            assert_eq!(base.at2(t, 0), moved.at2(t, 0));
        }
    }

    #[test]
    fn frames_do_not_leak_into_each_other() {
        let store = chain_setup(3, 2, 4, 21);
        let order = ClassOrder::identity(2).unwrap();
        let a = random_latent(5, 3, 22);
        let mut swapped_rows: Vec<Vec<f64>> = (0..5).map(|r| a.row_slice(r).to_vec()).collect();
        swapped_rows.swap(1, 3);
        let b = Tensor::from_rows(&swapped_rows).unwrap();
        let mut labels = ActivityMatrix::zeros(5, 2);
        labels.set(1, 0, true);
        let mut labels_swapped = ActivityMatrix::zeros(5, 2);
        labels_swapped.set(3, 0, true);

        let run = |latent_t: &Tensor, labels: &ActivityMatrix| {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape).unwrap();
            let latent = tape.constant(latent_t.clone());
            let scores = chain_scores_teacher(&mut tape, latent, labels, &order, 4, &ids).unwrap();
            tape.value(scores).clone()
        };
        let out_a = run(&a, &labels);
        let out_b = run(&b, &labels_swapped);
        // Swapping frames 1 and 3 of the input swaps exactly those score rows.
        for t in 0..5 {
            let src = match t {
                1 => 3,
                3 => 1,
                other => other,
            };
            for c in 0..2 {
                assert!((out_a.at2(t, c) - out_b.at2(src, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn inference_propagates_thresholded_detections() {
        let store = chain_setup(3, 2, 4, 31);
        let order = ClassOrder::identity(2).unwrap();
        let latent_t = random_latent(4, 3, 32);
        let run = |eps0: f64| {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape).unwrap();
            let latent = tape.constant(latent_t.clone());
            let mut thresholds = ThresholdVector::uniform(2, 0.5).unwrap();
            thresholds.set(0, eps0).unwrap();
            chain_infer(&mut tape, latent, &order, &thresholds, 4, &ids).unwrap()
        };
        // With an impossible threshold nothing is detected for class 0, so
        // class 1 sees all-zero conditioning.
        let (scores_hi, act_hi) = run(1.0);
        assert_eq!(act_hi.count_active(0), 0);
        // With a trivial threshold every frame detects class 0 and class 1's
        // scores must shift.
        let (scores_lo, act_lo) = run(0.0);
        assert_eq!(act_lo.count_active(0), 4);
        assert_eq!(
            (0..4).map(|t| scores_hi.get(t, 0)).collect::<Vec<_>>(),
            (0..4).map(|t| scores_lo.get(t, 0)).collect::<Vec<_>>(),
            "class 0 scores do not depend on its own threshold"
        );
        assert!(
            (0..4).any(|t| (scores_hi.get(t, 1) - scores_lo.get(t, 1)).abs() > 1e-12),
            "class 1 must react to class 0 detections"
        );
        // Detections match thresholding of the returned scores.
        let manual = scores_lo
            .binarize(&{
                let mut t = ThresholdVector::uniform(2, 0.5).unwrap();
                t.set(0, 0.0).unwrap();
                t
            })
            .unwrap();
        assert_eq!(manual, act_lo);
    }

    #[test]
    fn threshold_vector_bounds() {
        assert!(ThresholdVector::new(vec![0.0, 1.0, 0.5]).is_ok());
        assert!(ThresholdVector::new(vec![-0.1]).is_err());
        assert!(ThresholdVector::new(vec![1.1]).is_err());
    }
}
