//! Binary checkpoint files. Layout: magic bytes, format version, then
//! name-sorted records of (name, shape, f64 little-endian values), trailed by
//! a CRC32 of everything before it. Every piece of model state rides in the
//! same record stream: parameters keep their registry names, and reserved
//! prefixes carry normalization stats, running batch-norm moments, the class
//! vocabulary, thresholds, and config echoes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::model::ModelSpec;
use crate::chainorder::ClassOrder;
use crate::data::ClassVocabulary;
use crate::featex::{ConvBlockConfig, FeatureExtractorConfig};
use crate::heads::{HeadKind, ThresholdVector};
use crate::nn::tape::ChannelStats;
use crate::nn::{ParamStore, Tensor, TensorError};

pub const MAGIC: [u8; 4] = *b"CSED";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("file too short to be a checkpoint ({0} bytes)")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("not a checkpoint file: {0}")]
    Format(String),
    #[error("unsupported format version {found}, supported {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint is missing record {0:?}")]
    Missing(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to run or evaluate a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub vocabulary: ClassVocabulary,
    pub order: ClassOrder,
    pub params: BTreeMap<String, Tensor>,
    pub running_stats: Vec<ChannelStats>,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub thresholds: Option<ThresholdVector>,
    /// 1-based epoch the parameters were snapshotted at.
    pub best_epoch: usize,
}

impl Checkpoint {
    /// Rebuilds a parameter store (fresh optimizer state) for binding.
    pub fn param_store(&self) -> Result<ParamStore, TensorError> {
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            store.insert(name, value.clone())?;
        }
        Ok(store)
    }

    fn head_code(&self) -> f64 {
        match self.spec.head {
            HeadKind::Independent => 0.0,
            HeadKind::Gru => 1.0,
            HeadKind::Chain => 2.0,
        }
    }

    fn to_records(&self) -> BTreeMap<String, Tensor> {
        let mut records = self.params.clone();
        let scalar = Tensor::scalar;
        records.insert("meta.best_epoch".into(), scalar(self.best_epoch as f64));
        records.insert("meta.classes".into(), scalar(self.spec.classes as f64));
        records.insert("meta.head".into(), scalar(self.head_code()));
        records.insert(
            "meta.head_hidden".into(),
            scalar(self.spec.head_hidden as f64),
        );
        let ex = &self.spec.extractor;
        records.insert("meta.frames".into(), scalar(ex.frames as f64));
        records.insert("meta.bins".into(), scalar(ex.bins as f64));
        records.insert("meta.gru_hidden".into(), scalar(ex.gru_hidden as f64));
        let block_rows: Vec<f64> = ex
            .blocks
            .iter()
            .flat_map(|b| [b.channels as f64, b.pool_bins as f64])
            .collect();
        records.insert(
            "meta.blocks".into(),
            Tensor::new(vec![ex.blocks.len(), 2], block_rows).expect("block layout"),
        );
        records.insert(
            "meta.order".into(),
            Tensor::new(
                vec![self.order.len()],
                self.order.as_slice().iter().map(|&c| c as f64).collect(),
            )
            .expect("order layout"),
        );
        records.insert(
            "norm.mean".into(),
            Tensor::new(vec![self.feat_mean.len()], self.feat_mean.clone()).expect("norm layout"),
        );
        records.insert(
            "norm.std".into(),
            Tensor::new(vec![self.feat_std.len()], self.feat_std.clone()).expect("norm layout"),
        );
        for (i, stats) in self.running_stats.iter().enumerate() {
            records.insert(
                format!("state.block{i}.mean"),
                Tensor::new(vec![stats.mean.len()], stats.mean.clone()).expect("stats layout"),
            );
            records.insert(
                format!("state.block{i}.var"),
                Tensor::new(vec![stats.var.len()], stats.var.clone()).expect("stats layout"),
            );
        }
        if let Some(t) = &self.thresholds {
            records.insert(
                "thresholds.values".into(),
                Tensor::new(vec![t.as_slice().len()], t.as_slice().to_vec())
                    .expect("threshold layout"),
            );
        }
        for (i, name) in self.vocabulary.names().iter().enumerate() {
            records.insert(format!("vocab.{i:04}.{name}"), Tensor::zeros(vec![0]));
        }
        records
    }

    /// The exact bytes `save_checkpoint` writes; stable for a given value.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for (name, tensor) in self.to_records() {
            let bytes = name.as_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&out);
        out.extend_from_slice(&hasher.finalize().to_le_bytes());
        out
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "record overruns the file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn parse_records(body: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let mut r = Reader { buf: body, pos: 0 };
    let mut records = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!(
                "record {name:?} claims rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        if count * 8 > body.len() - r.pos {
            return Err(CheckpointError::Malformed(format!(
                "record {name:?} claims {count} values past the end of the file"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64()?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("record {name:?}: {e}")))?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::Malformed(format!(
                "duplicate record {name:?}"
            )));
        }
    }
    Ok(records)
}

fn scalar_usize(records: &BTreeMap<String, Tensor>, name: &str) -> Result<usize, CheckpointError> {
    let t = records
        .get(name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
    if t.len() != 1 {
        return Err(CheckpointError::Malformed(format!(
            "{name} is not a scalar"
        )));
    }
    let v = t.data()[0];
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
        return Err(CheckpointError::Malformed(format!(
            "{name} = {v} is not a non-negative integer"
        )));
    }
    Ok(v as usize)
}

fn vector(records: &BTreeMap<String, Tensor>, name: &str) -> Result<Vec<f64>, CheckpointError> {
    let t = records
        .get(name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
    if t.rank() != 1 {
        return Err(CheckpointError::Malformed(format!(
            "{name} has shape {:?}, expected a vector",
            t.shape()
        )));
    }
    Ok(t.data().to_vec())
}

fn from_records(records: BTreeMap<String, Tensor>) -> Result<Checkpoint, CheckpointError> {
    let classes = scalar_usize(&records, "meta.classes")?;
    let head = match scalar_usize(&records, "meta.head")? {
        0 => HeadKind::Independent,
        1 => HeadKind::Gru,
        2 => HeadKind::Chain,
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown head code {other}"
            )))
        }
    };
    let blocks_tensor = records
        .get("meta.blocks")
        .ok_or_else(|| CheckpointError::Missing("meta.blocks".into()))?;
    if blocks_tensor.rank() != 2 || blocks_tensor.cols() != 2 {
        return Err(CheckpointError::Malformed(format!(
            "meta.blocks has shape {:?}, expected [n, 2]",
            blocks_tensor.shape()
        )));
    }
    let mut blocks = Vec::with_capacity(blocks_tensor.rows());
    for i in 0..blocks_tensor.rows() {
        let channels = blocks_tensor.at2(i, 0);
        let pool = blocks_tensor.at2(i, 1);
        if channels.fract() != 0.0 || pool.fract() != 0.0 || channels < 1.0 || pool < 1.0 {
            return Err(CheckpointError::Malformed(format!(
                "block {i} has non-integral layout ({channels}, {pool})"
            )));
        }
        blocks.push(ConvBlockConfig {
            channels: channels as usize,
            pool_bins: pool as usize,
        });
    }
    let spec = ModelSpec {
        extractor: FeatureExtractorConfig {
            frames: scalar_usize(&records, "meta.frames")?,
            bins: scalar_usize(&records, "meta.bins")?,
            blocks,
            gru_hidden: scalar_usize(&records, "meta.gru_hidden")?,
        },
        head,
        classes,
        head_hidden: scalar_usize(&records, "meta.head_hidden")?,
    };
    spec.validate()
        .map_err(|e| CheckpointError::Malformed(format!("config echo: {e}")))?;

    let order_values = vector(&records, "meta.order")?;
    let mut positions = Vec::with_capacity(order_values.len());
    for v in order_values {
        if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
            return Err(CheckpointError::Malformed(format!(
                "meta.order entry {v} is not a class index"
            )));
        }
        positions.push(v as usize);
    }
    let order = ClassOrder::from_permutation(positions)
        .map_err(|e| CheckpointError::Malformed(format!("meta.order: {e}")))?;
    if order.len() != classes {
        return Err(CheckpointError::Malformed(format!(
            "order covers {} classes, model has {classes}",
            order.len()
        )));
    }

    let feat_mean = vector(&records, "norm.mean")?;
    let feat_std = vector(&records, "norm.std")?;
    if feat_mean.len() != spec.extractor.bins || feat_std.len() != spec.extractor.bins {
        return Err(CheckpointError::Malformed(format!(
            "normalization stats cover {} / {} bins, extractor has {}",
            feat_mean.len(),
            feat_std.len(),
            spec.extractor.bins
        )));
    }

    let mut running_stats = Vec::with_capacity(spec.extractor.blocks.len());
    for (i, block) in spec.extractor.blocks.iter().enumerate() {
        let mean = vector(&records, &format!("state.block{i}.mean"))?;
        let var = vector(&records, &format!("state.block{i}.var"))?;
        if mean.len() != block.channels || var.len() != block.channels {
            return Err(CheckpointError::Malformed(format!(
                "running stats for block {i} cover {} / {} channels, block has {}",
                mean.len(),
                var.len(),
                block.channels
            )));
        }
        running_stats.push(ChannelStats { mean, var });
    }

    let thresholds = match records.get("thresholds.values") {
        None => None,
        Some(t) => {
            let values = t.data().to_vec();
            if values.len() != classes {
                return Err(CheckpointError::Malformed(format!(
                    "{} thresholds for {classes} classes",
                    values.len()
                )));
            }
            Some(
                ThresholdVector::new(values)
                    .map_err(|e| CheckpointError::Malformed(format!("thresholds: {e}")))?,
            )
        }
    };

    let mut names = vec![None; classes];
    for name in records.keys().filter(|n| n.starts_with("vocab.")) {
        let rest = &name["vocab.".len()..];
        let (index, class_name) = rest
            .split_once('.')
            .ok_or_else(|| CheckpointError::Malformed(format!("bad vocab record {name:?}")))?;
        let index: usize = index
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad vocab index in {name:?}")))?;
        if index >= classes || names[index].is_some() {
            return Err(CheckpointError::Malformed(format!(
                "vocab record {name:?} out of range or duplicated"
            )));
        }
        names[index] = Some(class_name.to_string());
    }
    let names: Vec<String> = names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or(CheckpointError::Missing(format!("vocab entry {i}"))))
        .collect::<Result<_, _>>()?;
    let vocabulary = ClassVocabulary::new(names)
        .map_err(|e| CheckpointError::Malformed(format!("vocabulary: {e}")))?;

    let mut params = BTreeMap::new();
    for (name, tensor) in &records {
        let reserved = ["meta.", "norm.", "state.", "thresholds.", "vocab."]
            .iter()
            .any(|p| name.starts_with(p));
        if reserved {
            continue;
        }
        if !(name.starts_with("featex.") || name.starts_with("head.")) {
            return Err(CheckpointError::Malformed(format!(
                "unexpected record {name:?}"
            )));
        }
        if !tensor.all_finite() {
            return Err(CheckpointError::Malformed(format!(
                "parameter {name:?} holds non-finite values"
            )));
        }
        params.insert(name.clone(), tensor.clone());
    }

    // The parameter set must exactly match what this spec would register.
    let mut reference = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    spec.register_params(&mut reference, &mut rng)
        .map_err(|e| CheckpointError::Malformed(format!("config echo: {e}")))?;
    let expected = reference.snapshot();
    for (name, tensor) in &expected {
        match params.get(name) {
            None => return Err(CheckpointError::Missing(name.clone())),
            Some(t) if t.shape() != tensor.shape() => {
                return Err(CheckpointError::Malformed(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    tensor.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|n| !expected.contains_key(*n)) {
        return Err(CheckpointError::Malformed(format!(
            "parameter {extra:?} does not belong to this architecture"
        )));
    }

    Ok(Checkpoint {
        spec,
        vocabulary,
        order,
        params,
        running_stats,
        feat_mean,
        feat_std,
        thresholds,
        best_epoch: scalar_usize(&records, "meta.best_epoch")?,
    })
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::Format(format!(
            "magic bytes {:02x?} do not match",
            &bytes[..4]
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    from_records(parse_records(&body[8..])?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}
