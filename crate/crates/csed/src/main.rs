//! Command-line front end: reproducible experiments from one TOML config.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 training
//! divergence, 5 I/O error. All artifact files are byte-identical across
//! reruns with the same inputs; wall-clock timestamps go only to the
//! sidecar `run.log`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use csed::chainorder::OrderStrategy;
use csed::data::{
    cooccurrence_from_labels, cooccurrence_stats, dependent_preset, independent_preset,
    save_dataset, synth_generate, synth_label_stream, CooccurrenceStats, DataError,
    SplitKind, SynthConfig,
};
use csed::experiment::{
    baseline_scores_for, parse_baseline_report, render_comparison_csv, render_eval_csv,
    render_eval_text, render_history_csv, render_orders_csv, render_report_text, render_runs_csv,
    resolve_order, root_error, run_study_with, ExperimentConfig, ExperimentError, StudyPlan,
    TrainedRun,
};
use csed::heads::{HeadKind, ThresholdVector};
use csed::train::{
    calibrate_thresholds, evaluate, load_checkpoint, save_checkpoint, train_model,
    CheckpointError, TrainError,
};

#[derive(Parser)]
#[command(
    name = "csed",
    version,
    about = "Multi-label sound event detection: chained, recurrent, and independent heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and write it as CSV files
    /// plus a manifest.
    Synth {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; created when missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single head and write checkpoint plus history, once per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Head to train; required unless the config lists exactly one.
        #[arg(long)]
        head: Option<String>,
        /// Chain order; required for the chain head unless the config lists
        /// exactly one.
        #[arg(long)]
        order: Option<String>,
        /// Training seed; repeatable. Overrides the config's seed list.
        #[arg(long)]
        seed: Vec<u64>,
        /// Eval CSV of an independent-head run, used by the F1-based orders.
        #[arg(long)]
        baseline_report: Option<PathBuf>,
    },
    /// Fill a checkpoint's per-class thresholds from the validation split.
    Calibrate {
        /// Checkpoint to calibrate.
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory for the updated checkpoint; in place when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split and write report files.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Segment length override for segment-based metrics.
        #[arg(long)]
        frames_per_segment: Option<usize>,
    },
    /// Train and evaluate every configured head/order/seed combination and
    /// write the comparison report.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeatable; overrides the config's seed list.
        #[arg(long)]
        seed: Vec<u64>,
        /// Restrict the study to one head.
        #[arg(long)]
        head: Option<String>,
        /// Restrict the study to one chain order.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        frames_per_segment: Option<usize>,
        /// External per-class baseline F1 source for the F1-based orders.
        #[arg(long)]
        baseline_report: Option<PathBuf>,
    },
    /// Print the resolved chain order for each configured strategy.
    Orders {
        #[arg(long)]
        config: PathBuf,
        /// Resolve only this strategy instead of the config's list.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        baseline_report: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn dispatch(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Synth { config, out } => cmd_synth(&config, &out),
        Command::Train {
            config,
            out,
            head,
            order,
            seed,
            baseline_report,
        } => cmd_train(&config, out, head, order, seed, baseline_report),
        Command::Calibrate {
            checkpoint,
            config,
            out,
        } => cmd_calibrate(&checkpoint, &config, out),
        Command::Eval {
            checkpoint,
            config,
            out,
            frames_per_segment,
        } => cmd_eval(&checkpoint, &config, out, frames_per_segment),
        Command::Compare {
            config,
            out,
            seed,
            head,
            order,
            frames_per_segment,
            baseline_report,
        } => cmd_compare(&config, out, seed, head, order, frames_per_segment, baseline_report),
        Command::Orders {
            config,
            order,
            baseline_report,
        } => cmd_orders(&config, order, baseline_report),
    }
}

fn exit_code(err: &ExperimentError) -> i32 {
    match root_error(err) {
        ExperimentError::Config(_) | ExperimentError::Order(_) => 2,
        ExperimentError::Io { .. } => 5,
        ExperimentError::Data(e) => data_code(e),
        ExperimentError::Train(e) => train_code(e),
        ExperimentError::Run { .. } => 2,
    }
}

fn data_code(err: &DataError) -> i32 {
    match err {
        DataError::Io { .. } => 5,
        DataError::Config(_) | DataError::Vocabulary(_) => 2,
        _ => 3,
    }
}

fn train_code(err: &TrainError) -> i32 {
    match err {
        TrainError::Diverged { .. } => 4,
        TrainError::Config(_) => 2,
        TrainError::Data(e) => data_code(e),
        TrainError::Checkpoint(e) => match e {
            CheckpointError::Io { .. } => 5,
            _ => 3,
        },
        _ => 2,
    }
}

fn config_base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, content: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, content).map_err(io_err(path))
}

/// Appends wall-clock bounds and per-run lines to the one file allowed to
/// differ between identical reruns.
fn write_sidecar_log(dir: &Path, lines: &[String]) -> Result<(), ExperimentError> {
    let now = |label: &str| {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("{label} unix_time {secs}")
    };
    let mut text = String::new();
    let _ = writeln!(text, "{}", now("finished"));
    for line in lines {
        let _ = writeln!(text, "{line}");
    }
    write_text(&dir.join("run.log"), &text)
}

/// The generator configuration named by the config's dataset section.
fn synth_config_of(cfg: &ExperimentConfig) -> Result<SynthConfig, ExperimentError> {
    if let Some(name) = &cfg.dataset.preset {
        return Ok(match name.as_str() {
            "dependent" => dependent_preset(),
            _ => independent_preset(),
        });
    }
    if let Some(synth) = &cfg.dataset.synth {
        return Ok(synth.clone());
    }
    Err(ExperimentError::Config(
        "synth needs a generator config (dataset.preset or dataset.synth), not a manifest".into(),
    ))
}

fn max_abs_gap(stats: &CooccurrenceStats) -> Option<(usize, usize, f64)> {
    let classes = stats.marginals.len();
    let mut worst: Option<(usize, usize, f64)> = None;
    for j in 0..classes {
        for k in (j + 1)..classes {
            let gap = stats.dependence_gap(j, k).abs();
            if worst.map_or(true, |(_, _, w)| gap > w) {
                worst = Some((j, k, gap));
            }
        }
    }
    worst
}

const INDEPENDENCE_TOLERANCE: f64 = 0.01;
const INDEPENDENCE_CHECK_FRAMES: usize = 1_000_000;

fn cmd_synth(config_path: &Path, out: &Path) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let synth = synth_config_of(&cfg)?;
    let dataset = synth_generate(&synth)?;
    let manifest = save_dataset(&dataset, out)?;
    let (train, val, test) = (
        dataset.clips_in(SplitKind::Train).len(),
        dataset.clips_in(SplitKind::Val).len(),
        dataset.clips_in(SplitKind::Test).len(),
    );
    println!(
        "wrote {} clips ({train} train / {val} val / {test} test) to {}",
        dataset.clips.len(),
        manifest.display()
    );

    let written = cooccurrence_stats(&dataset)?;
    if let Some((j, k, gap)) = max_abs_gap(&written) {
        println!(
            "written clips ({} frames): max |P(j,k) - P(j)P(k)| = {gap:.4} on pair ({j},{k})",
            written.frames
        );
    }
    // Verdict on a long fresh label stream, where sampling noise is well
    // under the tolerance.
    let stream = synth_label_stream(&synth, INDEPENDENCE_CHECK_FRAMES)?;
    let stats = cooccurrence_from_labels(&[&stream])?;
    match max_abs_gap(&stats) {
        Some((j, k, gap)) if gap > INDEPENDENCE_TOLERANCE => println!(
            "generator check ({INDEPENDENCE_CHECK_FRAMES} frames): independent: FAIL \
             (pair ({j},{k}) gap {gap:.4} exceeds {INDEPENDENCE_TOLERANCE})"
        ),
        Some((j, k, gap)) => println!(
            "generator check ({INDEPENDENCE_CHECK_FRAMES} frames): independent: PASS \
             (largest gap {gap:.4} on pair ({j},{k}), tolerance {INDEPENDENCE_TOLERANCE})"
        ),
        None => println!("generator check: single class, nothing to test"),
    }
    Ok(())
}

/// Applies CLI overrides shared by train and compare onto a compiled plan.
fn apply_overrides(
    plan: &mut StudyPlan,
    seeds: Vec<u64>,
    head: Option<String>,
    order: Option<String>,
    frames_per_segment: Option<usize>,
    baseline_report: Option<PathBuf>,
) -> Result<(), ExperimentError> {
    if !seeds.is_empty() {
        let mut seen = std::collections::BTreeSet::new();
        for &s in &seeds {
            if !seen.insert(s) {
                return Err(ExperimentError::Config(format!("--seed {s} repeated")));
            }
        }
        plan.seeds = seeds;
    }
    if let Some(name) = head {
        let head: HeadKind = name
            .parse()
            .map_err(|e| ExperimentError::Config(format!("--head: {e}")))?;
        plan.heads = vec![head];
    }
    if let Some(name) = order {
        let strategy: OrderStrategy = name
            .parse()
            .map_err(|e| ExperimentError::Config(format!("--order: {e}")))?;
        plan.orders = vec![strategy];
    }
    if let Some(fps) = frames_per_segment {
        if fps == 0 {
            return Err(ExperimentError::Config(
                "--frames-per-segment must be at least 1".into(),
            ));
        }
        plan.frames_per_segment = fps;
    }
    if let Some(path) = baseline_report {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let named = parse_baseline_report(&text)?;
        plan.baseline_scores = Some(baseline_scores_for(&plan.dataset, &named)?);
    }
    if plan.heads.contains(&HeadKind::Chain) {
        for strategy in &plan.orders {
            if strategy.needs_reference_f1()
                && plan.baseline_scores.is_none()
                && !plan.heads.contains(&HeadKind::Independent)
            {
                return Err(ExperimentError::Config(format!(
                    "the {strategy} order ranks classes by a reference model's per-class F1; \
                     pass --baseline-report with an eval CSV of the independent baseline"
                )));
            }
        }
    }
    Ok(())
}

/// Flag paths are taken as given (relative to the working directory);
/// config-file paths resolve relative to the config file.
fn out_dir_of(
    cfg: &ExperimentConfig,
    flag: Option<PathBuf>,
    base_dir: &Path,
) -> Result<PathBuf, ExperimentError> {
    if let Some(dir) = flag {
        return Ok(dir);
    }
    let dir = cfg
        .output
        .as_ref()
        .map(|o| o.dir.clone())
        .ok_or_else(|| {
            ExperimentError::Config("no output directory; pass --out or set output.dir".into())
        })?;
    Ok(if dir.is_absolute() {
        dir
    } else {
        base_dir.join(dir)
    })
}

fn run_stem(head: HeadKind, strategy: Option<OrderStrategy>, seed: u64) -> String {
    let order = strategy
        .map(|s| s.to_string().replace(':', "-"))
        .unwrap_or_else(|| "none".to_string());
    format!("{head}_{order}_seed{seed}")
}

fn cmd_train(
    config_path: &Path,
    out: Option<PathBuf>,
    head: Option<String>,
    order: Option<String>,
    seeds: Vec<u64>,
    baseline_report: Option<PathBuf>,
) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base_dir = config_base_dir(config_path);
    let out_dir = out_dir_of(&cfg, out, &base_dir)?;
    let mut plan = cfg.compile(&base_dir)?;
    apply_overrides(&mut plan, seeds, head, order, None, baseline_report)?;

    if plan.heads.len() != 1 {
        return Err(ExperimentError::Config(format!(
            "train runs a single head but the config lists {}; pass --head",
            plan.heads.len()
        )));
    }
    let head = plan.heads[0];
    let classes = plan.dataset.vocabulary.len();
    let order = if head == HeadKind::Chain {
        if plan.orders.len() != 1 {
            return Err(ExperimentError::Config(format!(
                "the chain head needs exactly one order but the config lists {}; pass --order",
                plan.orders.len()
            )));
        }
        let strategy = plan.orders[0];
        let reference = plan
            .baseline_scores
            .as_deref()
            .map(|scores| (scores, "supplied baseline report"));
        let (order, note) = resolve_order(strategy, &plan.dataset, reference)?;
        println!("{strategy} order: {note}");
        Some((strategy, order))
    } else {
        None
    };
    let resolved = order
        .as_ref()
        .map(|(_, o)| o.clone())
        .unwrap_or(csed::chainorder::ClassOrder::identity(classes)?);

    ensure_dir(&out_dir)?;
    let mut log_lines = Vec::new();
    for &seed in &plan.seeds {
        let train_cfg = plan.train_config(head, resolved.clone(), seed);
        let (mut ckpt, history) = train_model(&plan.dataset, &train_cfg)?;
        if let Some(step) = plan.calibration_step {
            ckpt.thresholds = Some(calibrate_thresholds(&ckpt, &plan.dataset, step)?);
        }
        let stem = run_stem(head, order.as_ref().map(|(s, _)| *s), seed);
        let ckpt_path = out_dir.join(format!("{stem}.ckpt"));
        save_checkpoint(&ckpt, &ckpt_path).map_err(TrainError::from)?;
        let history_path = out_dir.join(format!("{stem}_history.csv"));
        write_text(&history_path, &render_history_csv(&history))?;
        let line = format!(
            "{stem}: best epoch {} (val frame macro F1 {:.3}), wrote {} and {}",
            history.best_epoch,
            history.epochs[history.best_epoch - 1].val_frame_macro_f1,
            ckpt_path.display(),
            history_path.display()
        );
        println!("{line}");
        log_lines.push(line);
    }
    write_sidecar_log(&out_dir, &log_lines)
}

fn threshold_note(ckpt_has: bool) -> &'static str {
    if ckpt_has {
        "calibrated per class (stored in the checkpoint)"
    } else {
        "default 0.5 for every class (checkpoint carries no calibrated thresholds)"
    }
}

fn cmd_calibrate(
    checkpoint_path: &Path,
    config_path: &Path,
    out: Option<PathBuf>,
) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base_dir = config_base_dir(config_path);
    let (dataset, _) = cfg.resolve_dataset(&base_dir)?;
    let mut ckpt = load_checkpoint(checkpoint_path).map_err(TrainError::from)?;
    let step = cfg.calibration.threshold_step;
    let thresholds = calibrate_thresholds(&ckpt, &dataset, step)?;
    for (i, name) in dataset.vocabulary.names().iter().enumerate() {
        println!("{name}: {}", thresholds.get(i));
    }
    ckpt.thresholds = Some(thresholds);
    let target = match out {
        Some(dir) => {
            ensure_dir(&dir)?;
            let name = checkpoint_path
                .file_name()
                .ok_or_else(|| ExperimentError::Config("checkpoint path has no file name".into()))?;
            dir.join(name)
        }
        None => checkpoint_path.to_path_buf(),
    };
    save_checkpoint(&ckpt, &target).map_err(TrainError::from)?;
    println!("wrote {}", target.display());
    Ok(())
}

fn cmd_eval(
    checkpoint_path: &Path,
    config_path: &Path,
    out: Option<PathBuf>,
    frames_per_segment: Option<usize>,
) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base_dir = config_base_dir(config_path);
    let (dataset, _) = cfg.resolve_dataset(&base_dir)?;
    let ckpt = load_checkpoint(checkpoint_path).map_err(TrainError::from)?;
    let fps = frames_per_segment.unwrap_or(cfg.metrics.frames_per_segment);
    if fps == 0 {
        return Err(ExperimentError::Config(
            "--frames-per-segment must be at least 1".into(),
        ));
    }
    let (thresholds, note) = match &ckpt.thresholds {
        Some(tv) => (tv.clone(), threshold_note(true)),
        None => (
            ThresholdVector::uniform(ckpt.spec.classes, 0.5).map_err(TrainError::from)?,
            threshold_note(false),
        ),
    };
    let report = evaluate(&ckpt, &dataset, SplitKind::Test, &thresholds, fps)?;
    let text = render_eval_text(&report, note);
    print!("{text}");
    if let Some(dir) = out {
        ensure_dir(&dir)?;
        let stem = checkpoint_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "eval".to_string());
        write_text(&dir.join(format!("{stem}_eval.csv")), &render_eval_csv(&report))?;
        write_text(&dir.join(format!("{stem}_eval.txt")), &text)?;
        println!("wrote {0}/{stem}_eval.csv and {0}/{stem}_eval.txt", dir.display());
    }
    Ok(())
}

fn cmd_compare(
    config_path: &Path,
    out: Option<PathBuf>,
    seeds: Vec<u64>,
    head: Option<String>,
    order: Option<String>,
    frames_per_segment: Option<usize>,
    baseline_report: Option<PathBuf>,
) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base_dir = config_base_dir(config_path);
    let out_dir = out_dir_of(&cfg, out, &base_dir)?;
    let mut plan = cfg.compile(&base_dir)?;
    apply_overrides(&mut plan, seeds, head, order, frames_per_segment, baseline_report)?;

    ensure_dir(&out_dir)?;
    let checkpoints_dir = out_dir.join("checkpoints");
    let history_dir = out_dir.join("history");
    ensure_dir(&checkpoints_dir)?;
    ensure_dir(&history_dir)?;

    let mut log_lines = Vec::new();
    let result = run_study_with(&plan, &mut |line| {
        println!("{line}");
        log_lines.push(line.to_string());
    })?;

    for run in &result.runs {
        save_checkpoint(&run.checkpoint, &checkpoint_path(&checkpoints_dir, run))
            .map_err(TrainError::from)?;
        write_text(
            &history_dir.join(format!("{}_history.csv", run.stem())),
            &render_history_csv(&run.history),
        )?;
    }
    let report = &result.report;
    let text = render_report_text(report);
    write_text(&out_dir.join("report.txt"), &text)?;
    write_text(&out_dir.join("comparison.csv"), &render_comparison_csv(report))?;
    if !report.order_rows.is_empty() {
        write_text(&out_dir.join("orders.csv"), &render_orders_csv(report))?;
    }
    write_text(&out_dir.join("runs.csv"), &render_runs_csv(report))?;
    write_sidecar_log(&out_dir, &log_lines)?;
    print!("{text}");
    println!("wrote report files to {}", out_dir.display());
    Ok(())
}

fn checkpoint_path(dir: &Path, run: &TrainedRun) -> PathBuf {
    dir.join(format!("{}.ckpt", run.stem()))
}

fn cmd_orders(
    config_path: &Path,
    order: Option<String>,
    baseline_report: Option<PathBuf>,
) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base_dir = config_base_dir(config_path);
    let (dataset, _) = cfg.resolve_dataset(&base_dir)?;
    let strategies = match order {
        Some(name) => vec![name
            .parse::<OrderStrategy>()
            .map_err(|e| ExperimentError::Config(format!("--order: {e}")))?],
        None => cfg.parsed_orders()?,
    };
    if strategies.is_empty() {
        return Err(ExperimentError::Config(
            "no orders to resolve; set model.orders or pass --order".into(),
        ));
    }
    let baseline = match baseline_report {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            Some(baseline_scores_for(&dataset, &parse_baseline_report(&text)?)?)
        }
        None => None,
    };
    for strategy in strategies {
        let reference = baseline
            .as_deref()
            .map(|scores| (scores, "supplied baseline report"));
        let (_, note) = resolve_order(strategy, &dataset, reference)?;
        println!("{strategy}: {note}");
    }
    Ok(())
}
