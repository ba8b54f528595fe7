//! One assembled model: the convolutional-recurrent feature extractor plus
//! one of the three detection heads, with a single parameter registry so a
//! seed fully determines initialization.

use std::collections::BTreeMap;

use rand::Rng;

use crate::chainorder::ClassOrder;
use crate::featex::{self, FeatureExtractorConfig, Mode};
use crate::heads::{
    self, ActivityMatrix, HeadError, HeadKind, ScoreMatrix, ThresholdVector,
};
use crate::nn::tape::ChannelStats;
use crate::nn::{NodeId, ParamStore, Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub extractor: FeatureExtractorConfig,
    pub head: HeadKind,
    pub classes: usize,
    /// Hidden width of the head's GRU; unused by the independent head.
    pub head_hidden: usize,
}

impl ModelSpec {
    /// Head GRU width defaults to the latent width, matching the reference
    /// architecture where both are 124.
    pub fn new(extractor: FeatureExtractorConfig, head: HeadKind, classes: usize) -> Self {
        let head_hidden = extractor.latent_dim();
        ModelSpec {
            extractor,
            head,
            classes,
            head_hidden,
        }
    }

    /// Width of the chain GRU's per-frame input: latent plus the
    /// class-indexed conditioning vector.
    pub fn chain_input_dim(&self) -> usize {
        self.extractor.latent_dim() + self.classes
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.extractor.validate()?;
        if self.classes == 0 {
            return Err(TensorError::Argument("model: classes must be positive".into()));
        }
        if self.head != HeadKind::Independent && self.head_hidden == 0 {
            return Err(TensorError::Argument(
                "model: head_hidden must be positive for recurrent heads".into(),
            ));
        }
        Ok(())
    }

    /// Registers extractor parameters first, then head parameters.
    pub fn register_params(
        &self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<(), TensorError> {
        self.validate()?;
        featex::register_params(&self.extractor, store, rng)?;
        heads::register_head_params(
            self.head,
            self.extractor.latent_dim(),
            self.classes,
            self.head_hidden,
            store,
            rng,
        )
    }
}

/// Training-mode forward for one chunk: per-chunk batch statistics, teacher
/// forcing for the chain head. Returns the [frames, classes] score node and
/// the observed batch-norm statistics in block order.
pub fn train_scores(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    spec: &ModelSpec,
    features: &Tensor,
    labels: &ActivityMatrix,
    order: &ClassOrder,
    running: &[ChannelStats],
) -> Result<(NodeId, Vec<ChannelStats>), HeadError> {
    let x = tape.constant(features.clone());
    let (latent, observed) = featex::extract(tape, x, &spec.extractor, ids, running, Mode::Train)?;
    let scores = match spec.head {
        HeadKind::Independent => heads::independent_scores(tape, latent, ids)?,
        HeadKind::Gru => heads::gru_scores(tape, latent, spec.head_hidden, ids)?,
        HeadKind::Chain => {
            heads::chain_scores_teacher(tape, latent, labels, order, spec.head_hidden, ids)?
        }
    };
    Ok((scores, observed))
}

/// Loss-side forward with frozen running statistics: same scores as
/// training (teacher forcing included) but batch norm in inference mode.
/// Used for validation losses, which must not disturb running stats.
pub fn eval_scores(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    spec: &ModelSpec,
    features: &Tensor,
    labels: &ActivityMatrix,
    order: &ClassOrder,
    running: &[ChannelStats],
) -> Result<NodeId, HeadError> {
    let x = tape.constant(features.clone());
    let (latent, _) = featex::extract(tape, x, &spec.extractor, ids, running, Mode::Infer)?;
    Ok(match spec.head {
        HeadKind::Independent => heads::independent_scores(tape, latent, ids)?,
        HeadKind::Gru => heads::gru_scores(tape, latent, spec.head_hidden, ids)?,
        HeadKind::Chain => {
            heads::chain_scores_teacher(tape, latent, labels, order, spec.head_hidden, ids)?
        }
    })
}

/// Inference-mode forward for one chunk: frozen running statistics, and the
/// chain head conditions on its own thresholded detections.
pub fn infer_scores(
    tape: &mut Tape,
    ids: &BTreeMap<String, NodeId>,
    spec: &ModelSpec,
    features: &Tensor,
    order: &ClassOrder,
    thresholds: &ThresholdVector,
    running: &[ChannelStats],
) -> Result<(ScoreMatrix, ActivityMatrix), HeadError> {
    let x = tape.constant(features.clone());
    let (latent, _) = featex::extract(tape, x, &spec.extractor, ids, running, Mode::Infer)?;
    match spec.head {
        HeadKind::Chain => heads::chain_infer(tape, latent, order, thresholds, spec.head_hidden, ids),
        _ => {
            let node = match spec.head {
                HeadKind::Independent => heads::independent_scores(tape, latent, ids)?,
                _ => heads::gru_scores(tape, latent, spec.head_hidden, ids)?,
            };
            let scores = ScoreMatrix::from_tensor(tape.value(node).clone())?;
            let detections = scores.binarize(thresholds)?;
            Ok((scores, detections))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_spec(head: HeadKind) -> ModelSpec {
        let mut spec = ModelSpec::new(FeatureExtractorConfig::desk_scale(), head, 3);
        spec.head_hidden = 8;
        spec
    }

    fn random_chunk(spec: &ModelSpec, seed: u64) -> (Tensor, ActivityMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &spec.extractor;
        let features = Tensor::new(
            vec![cfg.frames, cfg.bins],
            (0..cfg.frames * cfg.bins)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let mut labels = ActivityMatrix::zeros(cfg.frames, spec.classes);
        for t in 0..cfg.frames {
            for c in 0..spec.classes {
                labels.set(t, c, rng.gen_bool(0.3));
            }
        }
        (features, labels)
    }

    #[test]
    fn all_heads_produce_frame_by_class_scores() {
        for head in [HeadKind::Independent, HeadKind::Gru, HeadKind::Chain] {
            let spec = desk_spec(head);
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            spec.register_params(&mut store, &mut rng).unwrap();

            let (features, labels) = random_chunk(&spec, 2);
            let order = ClassOrder::identity(spec.classes).unwrap();
            let running = featex::identity_running_stats(&spec.extractor);

            let mut tape = Tape::new();
            let ids = store.bind(&mut tape).unwrap();
            let (scores, observed) =
                train_scores(&mut tape, &ids, &spec, &features, &labels, &order, &running)
                    .unwrap();
            assert_eq!(
                tape.value(scores).shape(),
                [spec.extractor.frames, spec.classes]
            );
            assert_eq!(observed.len(), spec.extractor.blocks.len());

            let thresholds = ThresholdVector::uniform(spec.classes, 0.5).unwrap();
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape).unwrap();
            let (scores, detections) = infer_scores(
                &mut tape,
                &ids,
                &spec,
                &features,
                &order,
                &thresholds,
                &running,
            )
            .unwrap();
            assert_eq!(scores.frames(), spec.extractor.frames);
            assert_eq!(scores.classes(), spec.classes);
            assert_eq!(detections.frames(), spec.extractor.frames);
        }
    }

    #[test]
    fn non_chain_detections_match_direct_binarization() {
        let spec = desk_spec(HeadKind::Gru);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        spec.register_params(&mut store, &mut rng).unwrap();
        let (features, _) = random_chunk(&spec, 6);
        let order = ClassOrder::identity(spec.classes).unwrap();
        let running = featex::identity_running_stats(&spec.extractor);
        let thresholds = ThresholdVector::uniform(spec.classes, 0.4).unwrap();

        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).unwrap();
        let (scores, detections) =
            infer_scores(&mut tape, &ids, &spec, &features, &order, &thresholds, &running)
                .unwrap();
        assert_eq!(scores.binarize(&thresholds).unwrap(), detections);
    }

    #[test]
    fn spec_validation_catches_zero_hidden() {
        let mut spec = desk_spec(HeadKind::Chain);
        spec.head_hidden = 0;
        assert!(spec.validate().is_err());
        let mut spec = desk_spec(HeadKind::Independent);
        spec.head_hidden = 0;
        assert!(spec.validate().is_ok());
    }
}
