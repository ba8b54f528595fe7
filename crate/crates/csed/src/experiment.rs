//! Experiment orchestration: a single config file describes dataset, model
//! variants, chain orders, training settings, and seeds; `run_study` trains
//! every requested combination and assembles a comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::chainorder::{ClassOrder, OrderError, OrderStrategy};
use crate::data::{
    dependent_preset, independent_preset, load_dataset, synth_generate, DataError, Dataset,
    SplitKind, SynthConfig,
};
use crate::featex::FeatureExtractorConfig;
use crate::heads::{HeadKind, ThresholdVector};
use crate::metrics::{relative_improvement_percent, MetricsReport};
use crate::train::{
    calibrate_thresholds, evaluate, train_model, Checkpoint, ModelSpec, TrainConfig, TrainError,
    TrainingHistory, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE,
    DEFAULT_THRESHOLD_STEP,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Order(#[from] OrderError),
    #[error("run {label}: {source}")]
    Run {
        label: String,
        #[source]
        source: Box<ExperimentError>,
    },
}

impl ExperimentError {
    fn config(msg: impl Into<String>) -> Self {
        ExperimentError::Config(msg.into())
    }
}

/// Picks the error family a run failure belongs to, looking through the
/// combination tag.
pub fn root_error(err: &ExperimentError) -> &ExperimentError {
    match err {
        ExperimentError::Run { source, .. } => root_error(source),
        other => other,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Built-in generator configuration: "dependent" or "independent".
    pub preset: Option<String>,
    /// Path to a dataset manifest, relative to the config file.
    pub manifest: Option<PathBuf>,
    /// Full inline generator configuration.
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "desk" (minutes on one core) or "full" (the 512x64 architecture).
    pub extractor: String,
    pub heads: Vec<String>,
    #[serde(default)]
    pub orders: Vec<String>,
    /// Head GRU width override; defaults to the latent width.
    pub head_hidden: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub mask_padding: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seeds: vec![0],
            mask_padding: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub enabled: bool,
    pub threshold_step: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            enabled: true,
            threshold_step: DEFAULT_THRESHOLD_STEP,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub frames_per_segment: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            frames_per_segment: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub output: Option<OutputSection>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let sources = [
            self.dataset.preset.is_some(),
            self.dataset.manifest.is_some(),
            self.dataset.synth.is_some(),
        ]
        .iter()
        .filter(|&&s| s)
        .count();
        if sources != 1 {
            return Err(ExperimentError::config(
                "dataset needs exactly one of: preset, manifest, synth",
            ));
        }
        if let Some(name) = &self.dataset.preset {
            if !matches!(name.as_str(), "dependent" | "independent") {
                return Err(ExperimentError::config(format!(
                    "unknown dataset preset {name:?}; use \"dependent\" or \"independent\""
                )));
            }
        }
        if let Some(synth) = &self.dataset.synth {
            synth.validate()?;
        }
        extractor_by_name(&self.model.extractor)?;
        if self.model.heads.is_empty() {
            return Err(ExperimentError::config("model.heads must not be empty"));
        }
        let heads = self.parsed_heads()?;
        let orders = self.parsed_orders()?;
        if heads.contains(&HeadKind::Chain) && orders.is_empty() {
            return Err(ExperimentError::config(
                "the chain head needs at least one entry in model.orders",
            ));
        }
        let t = &self.training;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(ExperimentError::config(format!(
                "training.learning_rate {} must be finite and non-negative",
                t.learning_rate
            )));
        }
        if t.batch_size == 0 {
            return Err(ExperimentError::config("training.batch_size must be at least 1"));
        }
        if t.epochs == 0 {
            return Err(ExperimentError::config("training.epochs must be at least 1"));
        }
        if t.seeds.is_empty() {
            return Err(ExperimentError::config("training.seeds must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &t.seeds {
            if !seen.insert(s) {
                return Err(ExperimentError::config(format!(
                    "training.seeds repeats seed {s}; duplicates would double-count aggregates"
                )));
            }
        }
        let step = self.calibration.threshold_step;
        if !(step > 0.0 && step <= 0.5) {
            return Err(ExperimentError::config(format!(
                "calibration.threshold_step {step} must lie in (0, 0.5]"
            )));
        }
        if self.metrics.frames_per_segment == 0 {
            return Err(ExperimentError::config(
                "metrics.frames_per_segment must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn parsed_heads(&self) -> Result<Vec<HeadKind>, ExperimentError> {
        let mut heads = Vec::new();
        for name in &self.model.heads {
            let head: HeadKind = name
                .parse()
                .map_err(|e| ExperimentError::config(format!("model.heads: {e}")))?;
            if heads.contains(&head) {
                return Err(ExperimentError::config(format!(
                    "model.heads lists {head} twice"
                )));
            }
            heads.push(head);
        }
        Ok(heads)
    }

    pub fn parsed_orders(&self) -> Result<Vec<OrderStrategy>, ExperimentError> {
        let mut orders = Vec::new();
        for name in &self.model.orders {
            let strategy: OrderStrategy = name
                .parse()
                .map_err(|e| ExperimentError::config(format!("model.orders: {e}")))?;
            if orders.contains(&strategy) {
                return Err(ExperimentError::config(format!(
                    "model.orders lists {strategy} twice"
                )));
            }
            orders.push(strategy);
        }
        Ok(orders)
    }

    /// Builds the dataset named by the config. Manifest paths resolve
    /// relative to `base_dir` (normally the config file's directory).
    pub fn resolve_dataset(&self, base_dir: &Path) -> Result<(Dataset, String), ExperimentError> {
        if let Some(name) = &self.dataset.preset {
            let cfg = match name.as_str() {
                "dependent" => dependent_preset(),
                "independent" => independent_preset(),
                other => {
                    return Err(ExperimentError::config(format!(
                        "unknown dataset preset {other:?}"
                    )))
                }
            };
            return Ok((synth_generate(&cfg)?, format!("preset:{name}")));
        }
        if let Some(manifest) = &self.dataset.manifest {
            let path = if manifest.is_absolute() {
                manifest.clone()
            } else {
                base_dir.join(manifest)
            };
            return Ok((load_dataset(&path)?, format!("manifest:{}", path.display())));
        }
        let synth = self
            .dataset
            .synth
            .as_ref()
            .expect("validate guarantees one source");
        Ok((synth_generate(synth)?, "synth:inline".to_string()))
    }

    /// Resolves everything the run matrix needs; no training happens here.
    pub fn compile(&self, base_dir: &Path) -> Result<StudyPlan, ExperimentError> {
        self.validate()?;
        let (dataset, dataset_label) = self.resolve_dataset(base_dir)?;
        Ok(StudyPlan {
            dataset,
            dataset_label,
            extractor: extractor_by_name(&self.model.extractor)?,
            extractor_label: self.model.extractor.clone(),
            head_hidden: self.model.head_hidden,
            heads: self.parsed_heads()?,
            orders: self.parsed_orders()?,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            mask_padding: self.training.mask_padding,
            seeds: self.training.seeds.clone(),
            calibration_step: self.calibration.enabled.then_some(self.calibration.threshold_step),
            frames_per_segment: self.metrics.frames_per_segment,
            baseline_scores: None,
        })
    }
}

pub fn extractor_by_name(name: &str) -> Result<FeatureExtractorConfig, ExperimentError> {
    match name {
        "desk" => Ok(FeatureExtractorConfig::desk_scale()),
        "full" => Ok(FeatureExtractorConfig::full_scale()),
        other => Err(ExperimentError::config(format!(
            "unknown extractor {other:?}; use \"desk\" or \"full\""
        ))),
    }
}

/// A fully resolved experiment: dataset in memory, every knob fixed.
#[derive(Debug, Clone)]
pub struct StudyPlan {
    pub dataset: Dataset,
    pub dataset_label: String,
    pub extractor: FeatureExtractorConfig,
    pub extractor_label: String,
    pub head_hidden: Option<usize>,
    pub heads: Vec<HeadKind>,
    pub orders: Vec<OrderStrategy>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_padding: bool,
    pub seeds: Vec<u64>,
    /// Grid step for validation-split threshold calibration; `None` keeps
    /// every threshold at 0.5.
    pub calibration_step: Option<f64>,
    pub frames_per_segment: usize,
    /// Per-class frame F1 of an externally supplied reference model, for the
    /// F1-based orders. When absent, the study's own independent runs
    /// provide the scores.
    pub baseline_scores: Option<Vec<f64>>,
}

impl StudyPlan {
    pub fn spec_for(&self, head: HeadKind) -> ModelSpec {
        let mut spec = ModelSpec::new(
            self.extractor.clone(),
            head,
            self.dataset.vocabulary.len(),
        );
        if let Some(hidden) = self.head_hidden {
            spec.head_hidden = hidden;
        }
        spec
    }

    pub fn train_config(&self, head: HeadKind, order: ClassOrder, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.spec_for(head), order);
        cfg.learning_rate = self.learning_rate;
        cfg.batch_size = self.batch_size;
        cfg.epochs = self.epochs;
        cfg.seed = seed;
        cfg.mask_padding = self.mask_padding;
        cfg
    }
}

/// One trained and evaluated combination.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub head: HeadKind,
    /// `None` for heads that ignore the chain order.
    pub strategy: Option<OrderStrategy>,
    pub order: ClassOrder,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub history: TrainingHistory,
    pub test_report: MetricsReport,
}

impl TrainedRun {
    /// Stable file-name stem: head, order, seed.
    pub fn stem(&self) -> String {
        let order = self
            .strategy
            .map(|s| s.to_string().replace(':', "-"))
            .unwrap_or_else(|| "none".to_string());
        format!("{}_{}_seed{}", self.head, order, self.seed)
    }

    pub fn label(&self) -> String {
        match self.strategy {
            Some(s) => format!("{}/{}/seed {}", self.head, s, self.seed),
            None => format!("{}/seed {}", self.head, self.seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub runs: Vec<TrainedRun>,
    /// Per-class frame F1 that fed the F1-based orders, if any were needed.
    pub baseline_class_f1: Option<Vec<f64>>,
    pub report: ExperimentReport,
}

/// Mean and, with at least two values, sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Aggregate {
    pub fn over(values: &[f64]) -> Self {
        let n = values.len();
        assert!(n > 0, "aggregate over no values");
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Aggregate { mean, std, n }
    }

    /// "0.561±0.012" with a std, "0.561" without.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.3}±{:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadRow {
    pub head: HeadKind,
    pub label: &'static str,
    pub frame: Aggregate,
    pub segment: Aggregate,
    /// Relative frame / segment macro F1 change vs. the independent row, in
    /// percent; absent for the baseline itself or without a baseline.
    pub frame_gain_percent: Option<f64>,
    pub segment_gain_percent: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OrderRow {
    pub label: String,
    pub frame: Aggregate,
    pub segment: Aggregate,
}

#[derive(Debug, Clone)]
pub struct RunRow {
    pub head: HeadKind,
    pub order_label: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub frame_macro_f1: f64,
    pub segment_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub artifact_version: &'static str,
    pub dataset_label: String,
    pub extractor_label: String,
    pub class_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub frames_per_segment: usize,
    pub threshold_note: String,
    /// Which chain order the head-comparison chain row aggregates.
    pub chain_comparison_order: Option<String>,
    pub head_rows: Vec<HeadRow>,
    pub order_rows: Vec<OrderRow>,
    /// Mean across the per-order means, std across them; present with ≥1
    /// order row.
    pub order_average: Option<OrderRow>,
    pub order_notes: BTreeMap<String, String>,
    pub run_rows: Vec<RunRow>,
}

fn head_label(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Independent => "Baseline",
        HeadKind::Gru => "+GRU (w/o Chain)",
        HeadKind::Chain => "+Chain (proposed)",
    }
}

/// Resolves one order strategy to a concrete class order plus a provenance
/// note naming the numbers it came from.
pub fn resolve_order(
    strategy: OrderStrategy,
    dataset: &Dataset,
    baseline_f1: Option<(&[f64], &str)>,
) -> Result<(ClassOrder, String), ExperimentError> {
    let names = dataset.vocabulary.names();
    match strategy {
        OrderStrategy::HigherF1 | OrderStrategy::LowerF1 => {
            let (scores, source) = baseline_f1.ok_or_else(|| {
                ExperimentError::config(format!(
                    "the {strategy} order needs per-class F1 of a reference model; \
                     include the independent head in the study or supply a baseline report"
                ))
            })?;
            if scores.len() != names.len() {
                return Err(ExperimentError::config(format!(
                    "reference F1 covers {} classes, dataset has {}",
                    scores.len(),
                    names.len()
                )));
            }
            let order = if strategy == OrderStrategy::HigherF1 {
                ClassOrder::by_score_desc(scores)?
            } else {
                ClassOrder::by_score_asc(scores)?
            };
            let listed: Vec<String> = scores.iter().map(|v| format!("{v:.4}")).collect();
            let note = format!(
                "per-class frame F1 [{}] from {source}; {}",
                listed.join(", "),
                order.format_with_names(names)
            );
            Ok((order, note))
        }
        OrderStrategy::HigherFreq | OrderStrategy::LowerFreq => {
            let counts = dataset.class_frame_counts(SplitKind::Train);
            let scores: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let order = if strategy == OrderStrategy::HigherFreq {
                ClassOrder::by_score_desc(&scores)?
            } else {
                ClassOrder::by_score_asc(&scores)?
            };
            let listed: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
            let note = format!(
                "train-split active-frame counts [{}]; {}",
                listed.join(", "),
                order.format_with_names(names)
            );
            Ok((order, note))
        }
        OrderStrategy::Random(seed) => {
            let order = ClassOrder::random(names.len(), seed)?;
            let note = format!(
                "uniform shuffle, seed {seed}; {}",
                order.format_with_names(names)
            );
            Ok((order, note))
        }
    }
}

fn run_cell(
    plan: &StudyPlan,
    head: HeadKind,
    order: &ClassOrder,
    seed: u64,
) -> Result<(Checkpoint, TrainingHistory, MetricsReport), ExperimentError> {
    let cfg = plan.train_config(head, order.clone(), seed);
    let (mut ckpt, history) = train_model(&plan.dataset, &cfg)?;
    let thresholds = match plan.calibration_step {
        Some(step) => {
            let tv = calibrate_thresholds(&ckpt, &plan.dataset, step)?;
            ckpt.thresholds = Some(tv.clone());
            tv
        }
        None => ThresholdVector::uniform(ckpt.spec.classes, 0.5).map_err(TrainError::from)?,
    };
    let report = evaluate(
        &ckpt,
        &plan.dataset,
        SplitKind::Test,
        &thresholds,
        plan.frames_per_segment,
    )?;
    Ok((ckpt, history, report))
}

fn tag<T>(
    result: Result<T, ExperimentError>,
    label: impl Fn() -> String,
) -> Result<T, ExperimentError> {
    result.map_err(|e| match e {
        tagged @ ExperimentError::Run { .. } => tagged,
        source => ExperimentError::Run {
            label: label(),
            source: Box::new(source),
        },
    })
}

pub fn run_study(plan: &StudyPlan) -> Result<StudyResult, ExperimentError> {
    run_study_with(plan, &mut |_| {})
}

/// Runs the full (head, order, seed) matrix. Independent runs go first so
/// their validation F1 can seed the F1-based chain orders; `progress`
/// receives one line per finished run.
pub fn run_study_with(
    plan: &StudyPlan,
    progress: &mut dyn FnMut(&str),
) -> Result<StudyResult, ExperimentError> {
    let classes = plan.dataset.vocabulary.len();
    let identity = ClassOrder::identity(classes)?;
    let mut runs: Vec<TrainedRun> = Vec::new();

    let mut baseline_class_f1 = plan.baseline_scores.clone();
    let mut baseline_source = "supplied baseline report";
    if plan.heads.contains(&HeadKind::Independent) {
        let mut val_f1_sums = vec![0.0; classes];
        for &seed in &plan.seeds {
            let label = || format!("independent/seed {seed}");
            let (ckpt, history, test_report) =
                tag(run_cell(plan, HeadKind::Independent, &identity, seed), label)?;
            let thresholds = match &ckpt.thresholds {
                Some(tv) => tv.clone(),
                None => ThresholdVector::uniform(classes, 0.5).map_err(TrainError::from)?,
            };
            let val_report = tag(
                evaluate(
                    &ckpt,
                    &plan.dataset,
                    SplitKind::Val,
                    &thresholds,
                    plan.frames_per_segment,
                )
                .map_err(ExperimentError::from),
                label,
            )?;
            for (sum, f1) in val_f1_sums.iter_mut().zip(val_report.per_class_frame_f1()) {
                *sum += f1;
            }
            let run = TrainedRun {
                head: HeadKind::Independent,
                strategy: None,
                order: identity.clone(),
                seed,
                checkpoint: ckpt,
                history,
                test_report,
            };
            progress(&format!(
                "{}: test frame macro F1 {:.3}, best epoch {}",
                run.label(),
                run.test_report.frame.macro_f1,
                run.history.best_epoch
            ));
            runs.push(run);
        }
        if baseline_class_f1.is_none() {
            let n = plan.seeds.len() as f64;
            baseline_class_f1 = Some(val_f1_sums.iter().map(|s| s / n).collect());
            baseline_source = "this study's independent runs (validation split, mean over seeds)";
        }
    }

    let mut order_notes = BTreeMap::new();
    let mut resolved_orders: Vec<(OrderStrategy, ClassOrder)> = Vec::new();
    if plan.heads.contains(&HeadKind::Chain) {
        for &strategy in &plan.orders {
            let reference = baseline_class_f1
                .as_deref()
                .map(|scores| (scores, baseline_source));
            let (order, note) = resolve_order(strategy, &plan.dataset, reference)?;
            order_notes.insert(strategy.to_string(), note);
            resolved_orders.push((strategy, order));
        }
    }

    if plan.heads.contains(&HeadKind::Gru) {
        for &seed in &plan.seeds {
            let label = || format!("gru/seed {seed}");
            let (ckpt, history, test_report) =
                tag(run_cell(plan, HeadKind::Gru, &identity, seed), label)?;
            let run = TrainedRun {
                head: HeadKind::Gru,
                strategy: None,
                order: identity.clone(),
                seed,
                checkpoint: ckpt,
                history,
                test_report,
            };
            progress(&format!(
                "{}: test frame macro F1 {:.3}, best epoch {}",
                run.label(),
                run.test_report.frame.macro_f1,
                run.history.best_epoch
            ));
            runs.push(run);
        }
    }

    for (strategy, order) in &resolved_orders {
        for &seed in &plan.seeds {
            let label = || format!("chain/{strategy}/seed {seed}");
            let (ckpt, history, test_report) =
                tag(run_cell(plan, HeadKind::Chain, order, seed), label)?;
            let run = TrainedRun {
                head: HeadKind::Chain,
                strategy: Some(*strategy),
                order: order.clone(),
                seed,
                checkpoint: ckpt,
                history,
                test_report,
            };
            progress(&format!(
                "{}: test frame macro F1 {:.3}, best epoch {}",
                run.label(),
                run.test_report.frame.macro_f1,
                run.history.best_epoch
            ));
            runs.push(run);
        }
    }

    let report = assemble_report(plan, &runs, order_notes);
    Ok(StudyResult {
        runs,
        baseline_class_f1,
        report,
    })
}

fn aggregate_runs<'a>(runs: impl Iterator<Item = &'a TrainedRun>) -> Option<(Aggregate, Aggregate)> {
    let mut frame = Vec::new();
    let mut segment = Vec::new();
    for run in runs {
        frame.push(run.test_report.frame.macro_f1);
        segment.push(run.test_report.segment.macro_f1);
    }
    (!frame.is_empty()).then(|| (Aggregate::over(&frame), Aggregate::over(&segment)))
}

fn assemble_report(
    plan: &StudyPlan,
    runs: &[TrainedRun],
    order_notes: BTreeMap<String, String>,
) -> ExperimentReport {
    let chain_comparison_order = plan
        .heads
        .contains(&HeadKind::Chain)
        .then(|| plan.orders.first().map(|s| s.to_string()))
        .flatten();

    let baseline_agg = aggregate_runs(runs.iter().filter(|r| r.head == HeadKind::Independent));
    let mut head_rows = Vec::new();
    for head in [HeadKind::Independent, HeadKind::Gru, HeadKind::Chain] {
        if !plan.heads.contains(&head) {
            continue;
        }
        let selected: Vec<&TrainedRun> = runs
            .iter()
            .filter(|r| {
                r.head == head
                    && (head != HeadKind::Chain
                        || r.strategy.map(|s| s.to_string()) == chain_comparison_order)
            })
            .collect();
        let Some((frame, segment)) = aggregate_runs(selected.into_iter()) else {
            continue;
        };
        let (mut frame_gain, mut segment_gain) = (None, None);
        if head != HeadKind::Independent {
            if let Some((bf, bs)) = &baseline_agg {
                frame_gain = relative_improvement_percent(frame.mean, bf.mean).ok();
                segment_gain = relative_improvement_percent(segment.mean, bs.mean).ok();
            }
        }
        head_rows.push(HeadRow {
            head,
            label: head_label(head),
            frame,
            segment,
            frame_gain_percent: frame_gain,
            segment_gain_percent: segment_gain,
        });
    }

    let mut order_rows = Vec::new();
    for strategy in &plan.orders {
        let selected = runs
            .iter()
            .filter(|r| r.head == HeadKind::Chain && r.strategy == Some(*strategy));
        if let Some((frame, segment)) = aggregate_runs(selected) {
            order_rows.push(OrderRow {
                label: strategy.to_string(),
                frame,
                segment,
            });
        }
    }
    let order_average = (!order_rows.is_empty()).then(|| {
        let frame: Vec<f64> = order_rows.iter().map(|r| r.frame.mean).collect();
        let segment: Vec<f64> = order_rows.iter().map(|r| r.segment.mean).collect();
        OrderRow {
            label: "Average".to_string(),
            frame: Aggregate::over(&frame),
            segment: Aggregate::over(&segment),
        }
    });

    let run_rows = runs
        .iter()
        .map(|r| RunRow {
            head: r.head,
            order_label: r
                .strategy
                .map(|s| s.to_string())
                .unwrap_or_else(|| "-".to_string()),
            seed: r.seed,
            best_epoch: r.history.best_epoch,
            frame_macro_f1: r.test_report.frame.macro_f1,
            segment_macro_f1: r.test_report.segment.macro_f1,
        })
        .collect();

    let threshold_note = match plan.calibration_step {
        Some(step) => format!("calibrated on the validation split, grid step {step}"),
        None => "default 0.5 for every class".to_string(),
    };

    ExperimentReport {
        artifact_version: env!("CARGO_PKG_VERSION"),
        dataset_label: plan.dataset_label.clone(),
        extractor_label: plan.extractor_label.clone(),
        class_names: plan.dataset.vocabulary.names().to_vec(),
        seeds: plan.seeds.clone(),
        learning_rate: plan.learning_rate,
        batch_size: plan.batch_size,
        epochs: plan.epochs,
        frames_per_segment: plan.frames_per_segment,
        threshold_note,
        chain_comparison_order,
        head_rows,
        order_rows,
        order_average,
        order_notes,
        run_rows,
    }
}

fn push_gain(line: &mut String, row: &HeadRow) {
    if let (Some(f), Some(s)) = (row.frame_gain_percent, row.segment_gain_percent) {
        let _ = write!(line, "   {f:+.1}% / {s:+.1}%");
    }
}

pub fn render_report_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment report (csed {})", report.artifact_version);
    let _ = writeln!(out, "================================");
    let _ = writeln!(
        out,
        "dataset: {} ({} classes)",
        report.dataset_label,
        report.class_names.len()
    );
    let _ = writeln!(out, "extractor: {}", report.extractor_label);
    let _ = writeln!(
        out,
        "training: lr {}, batch {}, {} epochs; checkpoint = best validation frame macro F1",
        report.learning_rate, report.batch_size, report.epochs
    );
    let _ = writeln!(out, "thresholds: {}", report.threshold_note);
    let _ = writeln!(
        out,
        "segments: {} frames per segment",
        report.frames_per_segment
    );
    let seeds: Vec<String> = report.seeds.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "seeds: {}", seeds.join(" "));

    if !report.head_rows.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "head comparison (frame / segment macro F1{})",
            if report.seeds.len() > 1 {
                ", mean±std over seeds"
            } else {
                ""
            }
        );
        let _ = writeln!(out, "---------------------------------------------------");
        for row in &report.head_rows {
            let mut line = format!(
                "{:<20} {:>13}  {:>13}",
                row.label,
                row.frame.display(),
                row.segment.display()
            );
            push_gain(&mut line, row);
            let _ = writeln!(out, "{line}");
        }
        if let Some(order) = &report.chain_comparison_order {
            let _ = writeln!(out, "chain row aggregates the {order} order");
        }
    }

    if !report.order_rows.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "chain order comparison (frame / segment macro F1{})",
            if report.seeds.len() > 1 {
                ", mean±std over seeds"
            } else {
                ""
            }
        );
        let _ = writeln!(out, "---------------------------------------------------");
        for row in &report.order_rows {
            let _ = writeln!(
                out,
                "{:<20} {:>13}  {:>13}",
                row.label,
                row.frame.display(),
                row.segment.display()
            );
        }
        if let Some(avg) = &report.order_average {
            let _ = writeln!(
                out,
                "{:<20} {:>13}  {:>13}",
                avg.label,
                avg.frame.display(),
                avg.segment.display()
            );
        }
        if !report.order_notes.is_empty() {
            let _ = writeln!(out, "order provenance:");
            for (strategy, note) in &report.order_notes {
                let _ = writeln!(out, "  {strategy}: {note}");
            }
        }
    }

    if !report.run_rows.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "runs (test split)");
        let _ = writeln!(out, "---------------------------------------------------");
        for row in &report.run_rows {
            let _ = writeln!(
                out,
                "{:<12} {:<12} seed {:<6} best epoch {:<4} frame {:.3}  segment {:.3}",
                row.head.to_string(),
                row.order_label,
                row.seed,
                row.best_epoch,
                row.frame_macro_f1,
                row.segment_macro_f1
            );
        }
    }
    out
}

fn csv_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

pub fn render_comparison_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "row,frame_macro_f1_mean,frame_macro_f1_std,segment_macro_f1_mean,segment_macro_f1_std,frame_gain_percent,segment_gain_percent\n",
    );
    for row in &report.head_rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.label,
            row.frame.mean,
            csv_opt(row.frame.std),
            row.segment.mean,
            csv_opt(row.segment.std),
            csv_opt(row.frame_gain_percent),
            csv_opt(row.segment_gain_percent)
        );
    }
    out
}

pub fn render_orders_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "order,frame_macro_f1_mean,frame_macro_f1_std,segment_macro_f1_mean,segment_macro_f1_std\n",
    );
    let rows = report.order_rows.iter().chain(report.order_average.iter());
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.label,
            row.frame.mean,
            csv_opt(row.frame.std),
            row.segment.mean,
            csv_opt(row.segment.std)
        );
    }
    out
}

pub fn render_runs_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("head,order,seed,best_epoch,frame_macro_f1,segment_macro_f1\n");
    for row in &report.run_rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.head, row.order_label, row.seed, row.best_epoch, row.frame_macro_f1,
            row.segment_macro_f1
        );
    }
    out
}

pub fn render_history_csv(history: &TrainingHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_frame_macro_f1\n");
    for (i, record) in history.epochs.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            record.train_loss,
            record.val_loss,
            record.val_frame_macro_f1
        );
    }
    out
}

/// Per-class frame and segment table plus a macro row: L + 1 data rows.
pub fn render_eval_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "class,frame_tp,frame_fp,frame_fn,frame_precision,frame_recall,frame_f1,segment_tp,segment_fp,segment_fn,segment_precision,segment_recall,segment_f1\n",
    );
    for (i, name) in report.class_names.iter().enumerate() {
        let f = &report.frame.per_class[i];
        let s = &report.segment.per_class[i];
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            name,
            f.counts.true_positives,
            f.counts.false_positives,
            f.counts.false_negatives,
            f.precision,
            f.recall,
            f.f1,
            s.counts.true_positives,
            s.counts.false_positives,
            s.counts.false_negatives,
            s.precision,
            s.recall,
            s.f1
        );
    }
    let _ = writeln!(
        out,
        "macro,,,,{},{},{},,,,{},{},{}",
        report.frame.macro_precision,
        report.frame.macro_recall,
        report.frame.macro_f1,
        report.segment.macro_precision,
        report.segment.macro_recall,
        report.segment.macro_f1
    );
    out
}

pub fn render_eval_text(report: &MetricsReport, threshold_note: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "evaluation report");
    let _ = writeln!(out, "=================");
    let _ = writeln!(out, "thresholds: {threshold_note}");
    let _ = writeln!(
        out,
        "segments: {} frames per segment",
        report.frames_per_segment
    );
    let _ = writeln!(out);
    let width = report
        .class_names
        .iter()
        .map(|n| n.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let _ = writeln!(out, "{:<width$}  frame F1  segment F1", "class");
    for (i, name) in report.class_names.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.3}  {:>10.3}",
            name, report.frame.per_class[i].f1, report.segment.per_class[i].f1
        );
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>8.3}  {:>10.3}",
        "macro", report.frame.macro_f1, report.segment.macro_f1
    );
    out
}

/// Reads per-class frame F1 back out of a `render_eval_csv` report, keyed by
/// class name. The macro row is skipped.
pub fn parse_baseline_report(text: &str) -> Result<Vec<(String, f64)>, ExperimentError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ExperimentError::config("baseline report is empty"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let class_col = columns.iter().position(|c| *c == "class").ok_or_else(|| {
        ExperimentError::config("baseline report has no \"class\" column")
    })?;
    let f1_col = columns.iter().position(|c| *c == "frame_f1").ok_or_else(|| {
        ExperimentError::config("baseline report has no \"frame_f1\" column")
    })?;
    let mut scores = Vec::new();
    for (index, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let name = cells.get(class_col).copied().unwrap_or_default();
        if name == "macro" {
            continue;
        }
        let raw = cells.get(f1_col).copied().unwrap_or_default();
        let value: f64 = raw.parse().map_err(|_| {
            ExperimentError::config(format!(
                "baseline report line {}: bad frame_f1 value {raw:?}",
                index + 2
            ))
        })?;
        scores.push((name.to_string(), value));
    }
    if scores.is_empty() {
        return Err(ExperimentError::config(
            "baseline report lists no class rows",
        ));
    }
    Ok(scores)
}

/// Reorders named baseline scores to class-index order for a dataset.
pub fn baseline_scores_for(
    dataset: &Dataset,
    named: &[(String, f64)],
) -> Result<Vec<f64>, ExperimentError> {
    let names = dataset.vocabulary.names();
    let mut scores = vec![None; names.len()];
    for (name, value) in named {
        match names.iter().position(|n| n == name) {
            Some(i) => scores[i] = Some(*value),
            None => {
                return Err(ExperimentError::config(format!(
                    "baseline report class {name:?} is not in the dataset vocabulary"
                )))
            }
        }
    }
    scores
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| {
                ExperimentError::config(format!(
                    "baseline report is missing class {:?}",
                    names[i]
                ))
            })
        })
        .collect()
}
