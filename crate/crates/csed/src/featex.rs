//! Spectrogram encoder: stacked conv blocks, then a bidirectional GRU.
//!
//! Each block is conv 3x3 -> batch norm -> relu -> max pool over frequency
//! only, so the frame count never changes. The blocks must pool the
//! frequency axis down to exactly one bin; what remains is a per-frame
//! channel vector that the bi-GRU turns into the latent sequence shared by
//! every classifier head.

use std::collections::BTreeMap;

use rand::Rng;

use crate::nn::rnn::{bigru, bind_gru, register_gru};
use crate::nn::tape::{ChannelStats, NodeId, Tape};
use crate::nn::tensor::TensorError;
use crate::nn::ParamStore;

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the freshly observed batch statistics blended into the
/// running statistics after each training batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub channels: usize,
    /// Frequency pooling factor; time is never pooled.
    pub pool_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureExtractorConfig {
    /// Frames per chunk fed through the network.
    pub frames: usize,
    /// Frequency bins per frame.
    pub bins: usize,
    pub blocks: Vec<ConvBlockConfig>,
    /// GRU state size per direction.
    pub gru_hidden: usize,
}

impl FeatureExtractorConfig {
    /// Latent width per frame: both GRU directions concatenated.
    pub fn latent_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    /// Full-size configuration: 512x64 input, three 64-channel blocks each
    /// pooling frequency by 4, and a 62-wide GRU per direction (latent 124).
    pub fn full_scale() -> Self {
        FeatureExtractorConfig {
            frames: 512,
            bins: 16 * 4,
            blocks: vec![
                ConvBlockConfig { channels: 64, pool_bins: 4 },
                ConvBlockConfig { channels: 64, pool_bins: 4 },
                ConvBlockConfig { channels: 64, pool_bins: 4 },
            ],
            gru_hidden: 62,
        }
    }

    /// Small configuration sized so a full training study runs in minutes on
    /// one core: 64x16 input, two 8-channel blocks, latent 16.
    pub fn desk_scale() -> Self {
        FeatureExtractorConfig {
            frames: 64,
            bins: 16,
            blocks: vec![
                ConvBlockConfig { channels: 8, pool_bins: 4 },
                ConvBlockConfig { channels: 8, pool_bins: 4 },
            ],
            gru_hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.frames == 0 || self.bins == 0 {
            return Err(TensorError::Argument(
                "extractor: frames and bins must be positive".into(),
            ));
        }
        if self.blocks.is_empty() {
            return Err(TensorError::Argument(
                "extractor: at least one conv block required".into(),
            ));
        }
        if self.gru_hidden == 0 {
            return Err(TensorError::Argument(
                "extractor: gru_hidden must be positive".into(),
            ));
        }
        let mut remaining = self.bins;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.channels == 0 || block.pool_bins == 0 {
                return Err(TensorError::Argument(format!(
                    "extractor block {i}: channels and pool_bins must be positive"
                )));
            }
            if remaining % block.pool_bins != 0 {
                return Err(TensorError::Argument(format!(
                    "extractor block {i}: pool {} does not divide {} remaining bins",
                    block.pool_bins, remaining
                )));
            }
            remaining /= block.pool_bins;
        }
        if remaining != 1 {
            return Err(TensorError::Argument(format!(
                "extractor: pooling leaves {remaining} frequency bins, must collapse to 1"
            )));
        }
        Ok(())
    }
}

/// Registers all extractor parameters. Order is fixed (blocks first, then
/// the forward and backward GRU cells) so a given seed always produces the
/// same initialization.
pub fn register_params(
    cfg: &FeatureExtractorConfig,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<(), TensorError> {
    cfg.validate()?;
    let mut cin = 1;
    for (i, block) in cfg.blocks.iter().enumerate() {
        let fan_in = 3 * 3 * cin;
        store.init_uniform(
            &format!("featex.block{i}.kernel"),
            vec![3, 3, cin, block.channels],
            fan_in,
            rng,
        )?;
        store.init_uniform(&format!("featex.block{i}.bias"), vec![block.channels], fan_in, rng)?;
        // Batch norm affine terms start at identity, not random.
        store.insert(
            &format!("featex.block{i}.gamma"),
            crate::nn::Tensor::full(vec![block.channels], 1.0),
        )?;
        store.insert(
            &format!("featex.block{i}.beta"),
            crate::nn::Tensor::zeros(vec![block.channels]),
        )?;
        cin = block.channels;
    }
    register_gru(store, "featex.bigru.fwd", cin, cfg.gru_hidden, rng)?;
    register_gru(store, "featex.bigru.bwd", cin, cfg.gru_hidden, rng)?;
    Ok(())
}

/// Fresh running statistics for every block.
pub fn identity_running_stats(cfg: &FeatureExtractorConfig) -> Vec<ChannelStats> {
    cfg.blocks
        .iter()
        .map(|b| ChannelStats::identity(b.channels))
        .collect()
}

/// Encodes one chunk. `x` must be a [frames, bins] node already on the tape.
/// In training mode batch norm uses this chunk's statistics and the observed
/// stats come back for running-average updates; in inference mode the
/// provided running stats are used and the returned vec is empty.
pub fn extract(
    tape: &mut Tape,
    x: NodeId,
    cfg: &FeatureExtractorConfig,
    ids: &BTreeMap<String, NodeId>,
    running: &[ChannelStats],
    mode: Mode,
) -> Result<(NodeId, Vec<ChannelStats>), TensorError> {
    cfg.validate()?;
    {
        let xt = tape.value(x);
        if xt.shape() != [cfg.frames, cfg.bins] {
            return Err(TensorError::ShapeMismatch {
                left: xt.shape().to_vec(),
                right: vec![cfg.frames, cfg.bins],
            });
        }
    }
    if running.len() != cfg.blocks.len() {
        return Err(TensorError::Argument(format!(
            "extractor: {} running stats for {} blocks",
            running.len(),
            cfg.blocks.len()
        )));
    }
    let lookup = |name: String| -> Result<NodeId, TensorError> {
        ids.get(&name)
            .copied()
            .ok_or_else(|| TensorError::Usage(format!("extractor parameter {name} not bound")))
    };
    let mut h = tape.reshape(x, vec![cfg.frames, cfg.bins, 1])?;
    let mut observed = Vec::new();
    for (i, block) in cfg.blocks.iter().enumerate() {
        let kernel = lookup(format!("featex.block{i}.kernel"))?;
        let bias = lookup(format!("featex.block{i}.bias"))?;
        let gamma = lookup(format!("featex.block{i}.gamma"))?;
        let beta = lookup(format!("featex.block{i}.beta"))?;
        h = tape.conv2d(h, kernel, bias)?;
        h = match mode {
            Mode::Train => {
                let (out, stats) = tape.batch_norm_train(h, gamma, beta, BN_EPS)?;
                observed.push(stats);
                out
            }
            Mode::Infer => tape.batch_norm_infer(h, gamma, beta, BN_EPS, &running[i])?,
        };
        h = tape.relu(h);
        h = tape.max_pool(h, 1, block.pool_bins)?;
    }
    let channels = cfg.blocks.last().unwrap().channels;
    let flat = tape.reshape(h, vec![cfg.frames, channels])?;
    let fwd = bind_gru(ids, "featex.bigru.fwd")?;
    let bwd = bind_gru(ids, "featex.bigru.bwd")?;
    let latent = bigru(tape, flat, &fwd, &bwd, cfg.gru_hidden)?;
    Ok((latent, observed))
}
