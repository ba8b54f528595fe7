//! Release gates for the whole pipeline: gradient verification, metric
//! oracles, dimension pins, the degenerate-chain equivalence, the comparative
//! study on coupled data, determinism, checkpoint safety, and generator
//! statistics. Each gate prints one PASS line (run with `--nocapture` to see
//! them); a failing gate panics with the measured numbers. The two study
//! gates train one shared set of runs, so expect the suite to spend most of
//! its time there.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csed::chainorder::{ClassOrder, OrderStrategy};
use csed::data::{
    cooccurrence_from_labels, dependent_preset, independent_preset, synth_generate,
    synth_label_stream, ClassDynamics, SynthConfig, DEPENDENT_PAIR,
};
use csed::experiment::{run_study, render_report_text, render_runs_csv, StudyPlan, StudyResult};
use csed::featex::FeatureExtractorConfig;
use csed::heads::{
    chain_infer, gru_scores, independent_scores, register_head_params, ActivityMatrix, HeadKind,
    ThresholdVector,
};
use csed::metrics::{frame_counts, relative_improvement_percent, segment_counts, MetricsFamily};
use csed::nn::gradcheck::{check_gradients, sample_coords};
use csed::nn::rnn::{bigru, bind_gru, gru_step, register_gru};
use csed::nn::tape::NodeId;
use csed::nn::{ParamStore, Tape, Tensor, TensorError};
use csed::train::{load_checkpoint, save_checkpoint, train_model, ModelSpec, TrainConfig};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_COORDS: usize = 24;
const EXACT_TOL: f64 = 1e-12;
const INDEPENDENT_GAP_TOL: f64 = 0.01;
const DEPENDENT_GAP_MIN: f64 = 0.05;
const RELATIVE_GAIN_MIN_PERCENT: f64 = 2.0;
const COOC_FRAMES: usize = 1_000_000;

/// Training settings for the comparative study; mirrors the packaged
/// experiment configs.
const STUDY_EPOCHS: usize = 300;
const STUDY_LEARNING_RATE: f64 = 0.005;
const STUDY_BATCH_SIZE: usize = 16;
const STUDY_HEAD_HIDDEN: usize = 32;
const STUDY_THRESHOLD_STEP: f64 = 0.05;
const STUDY_FRAMES_PER_SEGMENT: usize = 8;
const DEPENDENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const INDEPENDENT_SEEDS: [u64; 3] = [1, 2, 3];
const RANDOM_ORDER_SEED: u64 = 7;

fn gate(number: usize, label: &str, ok: bool, details: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("[{number}/9] {label}: {verdict} ({details})");
    assert!(ok, "[{number}/9] {label}: FAIL ({details})");
}

// ---------------------------------------------------------------- gradients

/// Runs one finite-difference sweep: the closure rebuilds the loss from the
/// store's current values, so both the analytic backward pass and every
/// probe evaluate the identical computation.
fn max_rel_err(
    name: &str,
    store: &mut ParamStore,
    mut loss: impl FnMut(&mut Tape, &BTreeMap<String, NodeId>) -> NodeId,
    coord_seed: u64,
) -> f64 {
    let analytic = {
        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).expect(name);
        let l = loss(&mut tape, &ids);
        tape.backward(l).expect(name).into_named()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(coord_seed);
    let coords = sample_coords(store, GRAD_COORDS, &mut rng);
    let forward = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids = s.bind(&mut tape)?;
        let l = loss(&mut tape, &ids);
        Ok(tape.value(l).scalar_value())
    };
    let summary = check_gradients(store, forward, &analytic, &coords, GRAD_STEP).expect(name);
    assert!(
        summary.coords_checked >= 20,
        "{name}: only {} coordinates checked",
        summary.coords_checked
    );
    assert!(
        summary.max_rel_err < GRAD_TOL,
        "{name}: max relative error {} at {} (numeric {}, analytic {})",
        summary.max_rel_err,
        summary.worst_coord,
        summary.worst_numeric,
        summary.worst_analytic
    );
    summary.max_rel_err
}

fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_labels(frames: usize, classes: usize, seed: u64) -> ActivityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = ActivityMatrix::zeros(frames, classes);
    for t in 0..frames {
        for c in 0..classes {
            labels.set(t, c, rng.gen_bool(0.5));
        }
    }
    labels
}

/// Squared sum with a distinct fixed weight per output coordinate. Plain
/// sums or unweighted squares are blind to some directions (batch norm makes
/// the sum of squares of its own output a near-constant), so every component
/// gets a generic quadratic instead.
fn weighted_square_loss(tape: &mut Tape, x: NodeId) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let weights = tape.constant(random_tensor(shape, 90));
    let wx = tape.mul(x, weights).unwrap();
    let sq = tape.mul(wx, wx).unwrap();
    tape.sum_all(sq)
}

#[test]
fn gradients_match_central_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut init_rng = ChaCha8Rng::seed_from_u64(40);

    // Plain linear layer, input included as a checked parameter.
    {
        let mut store = ParamStore::new();
        store.init_uniform("w", vec![3, 7], 7, &mut init_rng).unwrap();
        store.init_uniform("b", vec![3], 7, &mut init_rng).unwrap();
        store.insert("x", random_tensor(vec![5, 7], 1)).unwrap();
        let err = max_rel_err("linear", &mut store, |tape, ids| {
            let y = tape.linear(ids["x"], ids["w"], Some(ids["b"])).unwrap();
            weighted_square_loss(tape, y)
        }, 41);
        worst = worst.max(err);
    }

    // 3x3 same-padded convolution.
    {
        let mut store = ParamStore::new();
        store.init_uniform("k", vec![3, 3, 1, 4], 9, &mut init_rng).unwrap();
        store.init_uniform("b", vec![4], 9, &mut init_rng).unwrap();
        store.insert("x", random_tensor(vec![6, 8, 1], 2)).unwrap();
        let err = max_rel_err("conv2d", &mut store, |tape, ids| {
            let y = tape.conv2d(ids["x"], ids["k"], ids["b"]).unwrap();
            weighted_square_loss(tape, y)
        }, 42);
        worst = worst.max(err);
    }

    // Batch norm in training mode: the batch statistics depend on x, so
    // perturbing x moves the normalizer too.
    {
        let mut store = ParamStore::new();
        store.insert("gamma", random_tensor(vec![3], 3)).unwrap();
        store.insert("beta", random_tensor(vec![3], 4)).unwrap();
        store.insert("x", random_tensor(vec![6, 8, 3], 5)).unwrap();
        let err = max_rel_err("batchnorm", &mut store, |tape, ids| {
            let (y, _) = tape
                .batch_norm_train(ids["x"], ids["gamma"], ids["beta"], 1e-5)
                .unwrap();
            weighted_square_loss(tape, y)
        }, 43);
        worst = worst.max(err);
    }

    // Max pooling has no parameters of its own; the input carries the check.
    // Distinct random values keep every window's argmax stable under the
    // finite-difference step.
    {
        let mut store = ParamStore::new();
        store.insert("x", random_tensor(vec![8, 8, 2], 6)).unwrap();
        let err = max_rel_err("maxpool", &mut store, |tape, ids| {
            let y = tape.max_pool(ids["x"], 2, 4).unwrap();
            weighted_square_loss(tape, y)
        }, 44);
        worst = worst.max(err);
    }

    // One recurrent step from a nonzero state, so the state-to-state weights
    // see a nonvanishing gradient.
    {
        let mut store = ParamStore::new();
        register_gru(&mut store, "cell", 5, 4, &mut init_rng).unwrap();
        store.insert("x", random_tensor(vec![1, 5], 7)).unwrap();
        store.insert("h0", random_tensor(vec![1, 4], 8)).unwrap();
        let err = max_rel_err("gru cell", &mut store, |tape, ids| {
            let cell = bind_gru(ids, "cell").unwrap();
            let h1 = gru_step(tape, ids["x"], ids["h0"], &cell).unwrap();
            weighted_square_loss(tape, h1)
        }, 45);
        worst = worst.max(err);
    }

    // Both directions of the bidirectional encoder over a short sequence.
    {
        let mut store = ParamStore::new();
        register_gru(&mut store, "fwd", 6, 3, &mut init_rng).unwrap();
        register_gru(&mut store, "bwd", 6, 3, &mut init_rng).unwrap();
        store.insert("x", random_tensor(vec![6, 6], 9)).unwrap();
        let err = max_rel_err("bigru", &mut store, |tape, ids| {
            let fwd = bind_gru(ids, "fwd").unwrap();
            let bwd = bind_gru(ids, "bwd").unwrap();
            let y = bigru(tape, ids["x"], &fwd, &bwd, 3).unwrap();
            weighted_square_loss(tape, y)
        }, 46);
        worst = worst.max(err);
    }

    // The three heads run against their training loss.
    let head_labels = random_labels(6, 4, 10);
    let head_targets = head_labels.to_tensor();
    {
        let mut store = ParamStore::new();
        register_head_params(HeadKind::Independent, 5, 4, 6, &mut store, &mut init_rng).unwrap();
        store.insert("latent", random_tensor(vec![6, 5], 11)).unwrap();
        let targets = head_targets.clone();
        let err = max_rel_err("independent head", &mut store, move |tape, ids| {
            let scores = independent_scores(tape, ids["latent"], ids).unwrap();
            tape.bce_mean(scores, &targets, None).unwrap()
        }, 47);
        worst = worst.max(err);
    }
    {
        let mut store = ParamStore::new();
        register_head_params(HeadKind::Gru, 5, 4, 6, &mut store, &mut init_rng).unwrap();
        store.insert("latent", random_tensor(vec![6, 5], 12)).unwrap();
        let targets = head_targets.clone();
        let err = max_rel_err("gru head", &mut store, move |tape, ids| {
            let scores = gru_scores(tape, ids["latent"], 6, ids).unwrap();
            tape.bce_mean(scores, &targets, None).unwrap()
        }, 48);
        worst = worst.max(err);
    }
    {
        let mut store = ParamStore::new();
        register_head_params(HeadKind::Chain, 5, 4, 6, &mut store, &mut init_rng).unwrap();
        store.insert("latent", random_tensor(vec![6, 5], 13)).unwrap();
        let order = ClassOrder::from_permutation(vec![2, 0, 3, 1]).unwrap();
        let labels = head_labels.clone();
        let targets = head_targets.clone();
        let err = max_rel_err("chain head", &mut store, move |tape, ids| {
            let scores =
                csed::heads::chain_scores_teacher(tape, ids["latent"], &labels, &order, 6, ids)
                    .unwrap();
            tape.bce_mean(scores, &targets, None).unwrap()
        }, 49);
        worst = worst.max(err);
    }

    let secs = started.elapsed().as_secs_f64();
    gate(
        1,
        "component gradients",
        secs < 120.0,
        &format!("9 components, max relative error {worst:.2e}, {secs:.1}s"),
    );
}

// ------------------------------------------------------------------ metrics

#[derive(Default, Clone, Copy)]
struct BruteCounts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl BruteCounts {
    fn f1(self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

fn brute_frame(pred: &ActivityMatrix, truth: &ActivityMatrix) -> Vec<BruteCounts> {
    let mut out = vec![BruteCounts::default(); pred.classes()];
    for c in 0..pred.classes() {
        for t in 0..pred.frames() {
            match (pred.get(t, c), truth.get(t, c)) {
                (true, true) => out[c].tp += 1,
                (true, false) => out[c].fp += 1,
                (false, true) => out[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    out
}

fn brute_segment(
    pred: &ActivityMatrix,
    truth: &ActivityMatrix,
    frames_per_segment: usize,
) -> Vec<BruteCounts> {
    let mut out = vec![BruteCounts::default(); pred.classes()];
    let segments = pred.frames().div_ceil(frames_per_segment);
    for c in 0..pred.classes() {
        for s in 0..segments {
            let lo = s * frames_per_segment;
            let hi = ((s + 1) * frames_per_segment).min(pred.frames());
            let p = (lo..hi).any(|t| pred.get(t, c));
            let r = (lo..hi).any(|t| truth.get(t, c));
            match (p, r) {
                (true, true) => out[c].tp += 1,
                (true, false) => out[c].fp += 1,
                (false, true) => out[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    out
}

fn random_activity(frames: usize, classes: usize, density: f64, rng: &mut ChaCha8Rng) -> ActivityMatrix {
    let mut m = ActivityMatrix::zeros(frames, classes);
    for t in 0..frames {
        for c in 0..classes {
            m.set(t, c, rng.gen_bool(density));
        }
    }
    m
}

#[test]
fn metrics_match_brute_force_recounts() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst: f64 = 0.0;
    for instance in 0..1000 {
        let frames = rng.gen_range(1..=200);
        let classes = rng.gen_range(1..=4);
        let fps = [1, 7, 100][instance % 3];
        let pred = random_activity(frames, classes, rng.gen_range(0.02..0.98), &mut rng);
        let truth = random_activity(frames, classes, rng.gen_range(0.02..0.98), &mut rng);

        let frame = frame_counts(&pred, &truth).unwrap();
        let segment = segment_counts(&pred, &truth, fps).unwrap();
        let frame_brute = brute_frame(&pred, &truth);
        let segment_brute = brute_segment(&pred, &truth, fps);

        for c in 0..classes {
            assert_eq!(
                (frame[c].true_positives, frame[c].false_positives, frame[c].false_negatives),
                (frame_brute[c].tp, frame_brute[c].fp, frame_brute[c].fn_),
                "frame counts diverge on instance {instance} class {c}"
            );
            assert_eq!(
                (segment[c].true_positives, segment[c].false_positives, segment[c].false_negatives),
                (segment_brute[c].tp, segment_brute[c].fp, segment_brute[c].fn_),
                "segment counts diverge on instance {instance} class {c} fps {fps}"
            );
        }
        let frame_family = MetricsFamily::from_counts(&frame);
        let segment_family = MetricsFamily::from_counts(&segment);
        for c in 0..classes {
            worst = worst.max((frame_family.per_class[c].f1 - frame_brute[c].f1()).abs());
            worst = worst.max((segment_family.per_class[c].f1 - segment_brute[c].f1()).abs());
        }
        let frame_macro: f64 =
            frame_brute.iter().map(|b| b.f1()).sum::<f64>() / classes as f64;
        let segment_macro: f64 =
            segment_brute.iter().map(|b| b.f1()).sum::<f64>() / classes as f64;
        worst = worst.max((frame_family.macro_f1 - frame_macro).abs());
        worst = worst.max((segment_family.macro_f1 - segment_macro).abs());
    }
    assert!(worst <= EXACT_TOL, "brute-force recount differs by {worst}");

    // Fixed worked example: four frames, two classes.
    let mut truth = ActivityMatrix::zeros(4, 2);
    let mut pred = ActivityMatrix::zeros(4, 2);
    for (t, active) in [true, true, false, false].iter().enumerate() {
        truth.set(t, 0, *active);
    }
    for (t, active) in [true, false, false, false].iter().enumerate() {
        pred.set(t, 0, *active);
    }
    for (t, active) in [false, true, true, false].iter().enumerate() {
        truth.set(t, 1, *active);
    }
    for (t, active) in [false, true, true, true].iter().enumerate() {
        pred.set(t, 1, *active);
    }
    let family = MetricsFamily::from_counts(&frame_counts(&pred, &truth).unwrap());
    assert!((family.per_class[0].f1 - 2.0 / 3.0).abs() <= EXACT_TOL);
    assert!((family.per_class[1].f1 - 0.8).abs() <= EXACT_TOL);
    assert!((family.macro_f1 - 11.0 / 15.0).abs() <= EXACT_TOL);

    let secs = started.elapsed().as_secs_f64();
    gate(
        2,
        "metric recounts",
        secs < 30.0,
        &format!("1000 instances + worked example, max deviation {worst:.1e}, {secs:.1}s"),
    );
}

// --------------------------------------------------------------- dimensions

#[test]
fn model_dimensions_conform() {
    let full = FeatureExtractorConfig::full_scale();
    assert_eq!(full.gru_hidden, 62);
    assert_eq!(full.latent_dim(), 124);
    assert_eq!(full.frames, 512);
    let spec = ModelSpec::new(full, HeadKind::Chain, 10);
    assert_eq!(spec.chain_input_dim(), 134);

    // The score matrix keeps one row per input frame; a real pass at desk
    // scale pins that, and the frame count above carries it to full scale.
    let desk = FeatureExtractorConfig::desk_scale();
    let classes = 10;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mspec = ModelSpec::new(desk.clone(), HeadKind::Chain, classes);
    mspec.register_params(&mut store, &mut rng).unwrap();
    let mut tape = Tape::new();
    let ids = store.bind(&mut tape).unwrap();
    let latent = tape.constant(random_tensor(vec![desk.frames, desk.latent_dim()], 4));
    let order = ClassOrder::identity(classes).unwrap();
    let thresholds = ThresholdVector::uniform(classes, 0.5).unwrap();
    let (scores, detections) =
        chain_infer(&mut tape, latent, &order, &thresholds, mspec.head_hidden, &ids).unwrap();
    assert_eq!((scores.frames(), scores.classes()), (desk.frames, classes));
    assert_eq!(
        (detections.frames(), detections.classes()),
        (desk.frames, classes)
    );

    gate(
        3,
        "dimension pins",
        true,
        "latent 124 from hidden 62, chain input 134 at 10 classes, one score row per frame",
    );
}

// -------------------------------------------------- degenerate equivalence

#[test]
fn single_class_chain_equals_binary_classifier() {
    let frames = 12;
    let latent_dim = 6;
    let hidden = 5;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    register_head_params(HeadKind::Chain, latent_dim, 1, hidden, &mut store, &mut rng).unwrap();
    let latent = random_tensor(vec![frames, latent_dim], 22);

    let chain = {
        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).unwrap();
        let node = tape.constant(latent.clone());
        let order = ClassOrder::identity(1).unwrap();
        let thresholds = ThresholdVector::uniform(1, 0.5).unwrap();
        let (scores, _) = chain_infer(&mut tape, node, &order, &thresholds, hidden, &ids).unwrap();
        scores
    };

    // The same weights composed directly: per frame, one recurrent step from
    // a zero state over [latent, 0], then the shared output layer.
    let manual = {
        let mut tape = Tape::new();
        let ids = store.bind(&mut tape).unwrap();
        let cell = bind_gru(&ids, "head.gru").unwrap();
        let node = tape.constant(latent);
        let zero_bit = tape.constant(Tensor::zeros(vec![1, 1]));
        let h0 = tape.constant(Tensor::zeros(vec![1, hidden]));
        let mut rows = Vec::with_capacity(frames);
        for t in 0..frames {
            let x_t = tape.row(node, t).unwrap();
            let x = tape.concat_cols(&[x_t, zero_bit]).unwrap();
            let h1 = gru_step(&mut tape, x, h0, &cell).unwrap();
            let z = tape.linear(h1, ids["head.out.w"], Some(ids["head.out.b"])).unwrap();
            rows.push(tape.sigmoid(z));
        }
        let stacked = tape.stack_rows(&rows).unwrap();
        tape.value(stacked).clone()
    };

    let mut worst: f64 = 0.0;
    for t in 0..frames {
        worst = worst.max((chain.get(t, 0) - manual.data()[t]).abs());
    }
    gate(
        4,
        "single-class chain equivalence",
        worst <= EXACT_TOL,
        &format!("max score deviation {worst:.1e} over {frames} frames"),
    );
}

// ------------------------------------------------------- comparative study

struct Studies {
    dependent: StudyResult,
    independent: StudyResult,
    dependent_secs: f64,
}

static STUDIES: OnceLock<Studies> = OnceLock::new();

fn all_orders() -> Vec<OrderStrategy> {
    vec![
        OrderStrategy::HigherF1,
        OrderStrategy::LowerF1,
        OrderStrategy::HigherFreq,
        OrderStrategy::LowerFreq,
        OrderStrategy::Random(RANDOM_ORDER_SEED),
    ]
}

fn study_plan(cfg: &SynthConfig, label: &str, heads: Vec<HeadKind>, seeds: Vec<u64>) -> StudyPlan {
    StudyPlan {
        dataset: synth_generate(cfg).unwrap(),
        dataset_label: label.to_string(),
        extractor: FeatureExtractorConfig::desk_scale(),
        extractor_label: "desk".to_string(),
        head_hidden: Some(STUDY_HEAD_HIDDEN),
        heads,
        orders: all_orders(),
        learning_rate: STUDY_LEARNING_RATE,
        batch_size: STUDY_BATCH_SIZE,
        epochs: STUDY_EPOCHS,
        mask_padding: true,
        seeds,
        calibration_step: Some(STUDY_THRESHOLD_STEP),
        frames_per_segment: STUDY_FRAMES_PER_SEGMENT,
        baseline_scores: None,
    }
}

fn studies() -> &'static Studies {
    STUDIES.get_or_init(|| {
        let started = Instant::now();
        let dependent = run_study(&study_plan(
            &dependent_preset(),
            "dependent",
            vec![HeadKind::Independent, HeadKind::Gru, HeadKind::Chain],
            DEPENDENT_SEEDS.to_vec(),
        ))
        .expect("dependent study");
        let dependent_secs = started.elapsed().as_secs_f64();
        let independent = run_study(&study_plan(
            &independent_preset(),
            "independent",
            vec![HeadKind::Independent, HeadKind::Chain],
            INDEPENDENT_SEEDS.to_vec(),
        ))
        .expect("independent study");
        Studies {
            dependent,
            independent,
            dependent_secs,
        }
    })
}

fn head_mean(result: &StudyResult, head: HeadKind, strategy: Option<OrderStrategy>) -> f64 {
    let values: Vec<f64> = result
        .runs
        .iter()
        .filter(|r| r.head == head && r.strategy == strategy)
        .map(|r| r.test_report.frame.macro_f1)
        .collect();
    assert!(!values.is_empty(), "no runs for {head:?} {strategy:?}");
    values.iter().sum::<f64>() / values.len() as f64
}

fn chain_f1(result: &StudyResult, strategy: OrderStrategy, seed: u64) -> f64 {
    result
        .runs
        .iter()
        .find(|r| r.head == HeadKind::Chain && r.strategy == Some(strategy) && r.seed == seed)
        .map(|r| r.test_report.frame.macro_f1)
        .unwrap_or_else(|| panic!("missing chain run {strategy:?} seed {seed}"))
}

/// Per-seed standard deviation of chain F1 across the five orders, averaged
/// over the given seeds.
fn mean_order_std(result: &StudyResult, seeds: &[u64]) -> f64 {
    let orders = all_orders();
    let mut total = 0.0;
    for &seed in seeds {
        let values: Vec<f64> = orders.iter().map(|&s| chain_f1(result, s, seed)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (values.len() - 1) as f64;
        total += var.sqrt();
    }
    total / seeds.len() as f64
}

#[test]
fn chain_orders_heads_on_coupled_data() {
    let studies = studies();
    let baseline = head_mean(&studies.dependent, HeadKind::Independent, None);
    let gru = head_mean(&studies.dependent, HeadKind::Gru, None);
    let chain = head_mean(
        &studies.dependent,
        HeadKind::Chain,
        Some(OrderStrategy::HigherF1),
    );
    let gain = relative_improvement_percent(chain, baseline).unwrap();
    let ordered = chain >= gru && gru >= baseline;
    gate(
        5,
        "head ordering on coupled data",
        ordered && gain >= RELATIVE_GAIN_MIN_PERCENT && studies.dependent_secs < 3600.0,
        &format!(
            "chain {chain:.4} >= gru {gru:.4} >= independent {baseline:.4}, \
             chain +{gain:.1}% over independent, {:.0}s",
            studies.dependent_secs
        ),
    );
}

#[test]
fn order_spread_tracks_label_coupling() {
    let studies = studies();
    let spread_independent = mean_order_std(&studies.independent, &INDEPENDENT_SEEDS);
    let spread_dependent = mean_order_std(&studies.dependent, &INDEPENDENT_SEEDS);
    gate(
        6,
        "order sensitivity",
        spread_independent <= spread_dependent,
        &format!(
            "chain F1 std across 5 orders: {spread_independent:.4} on independent data \
             <= {spread_dependent:.4} on dependent data (3 seeds)"
        ),
    );
}

// ------------------------------------------------------------- determinism

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        class_names: vec!["hum".to_string(), "click".to_string()],
        bins: 16,
        frames_per_clip: 64,
        clips_per_split: (6, 2, 2),
        dynamics: vec![ClassDynamics::new(0.7, 0.85), ClassDynamics::new(0.6, 0.8)],
        dependency: vec![vec![0.0; 2]; 2],
        template_seed: 5,
        noise_level: 0.2,
        seed: 11,
    }
}

fn tiny_plan() -> StudyPlan {
    let mut plan = study_plan(
        &tiny_synth(),
        "tiny",
        vec![HeadKind::Independent, HeadKind::Gru, HeadKind::Chain],
        vec![1],
    );
    plan.orders = vec![OrderStrategy::HigherFreq];
    plan.epochs = 2;
    plan.batch_size = 4;
    plan.head_hidden = None;
    plan.calibration_step = Some(0.25);
    plan
}

#[test]
fn identical_settings_reproduce_identical_artifacts() {
    let first = run_study(&tiny_plan()).unwrap();
    let second = run_study(&tiny_plan()).unwrap();
    assert_eq!(first.runs.len(), second.runs.len());
    let mut checkpoint_bytes = 0;
    for (a, b) in first.runs.iter().zip(&second.runs) {
        assert_eq!(a.stem(), b.stem());
        let bytes_a = a.checkpoint.to_bytes();
        let bytes_b = b.checkpoint.to_bytes();
        assert!(
            bytes_a == bytes_b,
            "checkpoint bytes differ for {}",
            a.stem()
        );
        checkpoint_bytes += bytes_a.len();
    }
    let report_a = render_report_text(&first.report);
    let report_b = render_report_text(&second.report);
    assert_eq!(report_a, report_b, "reports differ");
    assert_eq!(
        render_runs_csv(&first.report),
        render_runs_csv(&second.report),
        "run tables differ"
    );
    gate(
        7,
        "determinism",
        true,
        &format!(
            "{} runs re-trained byte-identically ({checkpoint_bytes} checkpoint bytes), reports equal",
            first.runs.len()
        ),
    );
}

// -------------------------------------------------------------- checkpoints

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let dataset = synth_generate(&tiny_synth()).unwrap();
    let spec = ModelSpec::new(FeatureExtractorConfig::desk_scale(), HeadKind::Independent, 2);
    let mut cfg = TrainConfig::new(spec, ClassOrder::identity(2).unwrap());
    cfg.epochs = 1;
    cfg.batch_size = 4;
    let (ckpt, _) = train_model(&dataset, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("model.ckpt");
    let path_b = dir.path().join("model-again.ckpt");
    save_checkpoint(&ckpt, &path_a).unwrap();
    let loaded = load_checkpoint(&path_a).unwrap();
    save_checkpoint(&loaded, &path_b).unwrap();
    let bytes_a = std::fs::read(&path_a).unwrap();
    let bytes_b = std::fs::read(&path_b).unwrap();
    assert!(bytes_a == bytes_b, "round-trip changed the file");

    let mut corrupted = bytes_a.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0x40;
    let path_c = dir.path().join("model-corrupt.ckpt");
    std::fs::write(&path_c, &corrupted).unwrap();
    let rejected = load_checkpoint(&path_c).is_err();
    gate(
        8,
        "checkpoint round-trip",
        rejected,
        &format!(
            "{} bytes save/load/save identical, flipped byte at {mid} rejected",
            bytes_a.len()
        ),
    );
}

// ---------------------------------------------------- generator statistics

#[test]
fn generator_cooccurrence_matches_design() {
    let independent = synth_label_stream(&independent_preset(), COOC_FRAMES).unwrap();
    let stats = cooccurrence_from_labels(&[&independent]).unwrap();
    let classes = independent.classes();
    let mut max_gap: f64 = 0.0;
    for j in 0..classes {
        for k in 0..classes {
            if j != k {
                max_gap = max_gap.max(stats.dependence_gap(j, k).abs());
            }
        }
    }

    let dependent = synth_label_stream(&dependent_preset(), COOC_FRAMES).unwrap();
    let dep_stats = cooccurrence_from_labels(&[&dependent]).unwrap();
    let (a, b) = DEPENDENT_PAIR;
    let designed_gap = dep_stats.dependence_gap(a, b);

    gate(
        9,
        "generator co-occurrence",
        max_gap <= INDEPENDENT_GAP_TOL && designed_gap >= DEPENDENT_GAP_MIN,
        &format!(
            "independent preset max |gap| {max_gap:.4} <= {INDEPENDENT_GAP_TOL}, \
             dependent preset gap({a},{b}) {designed_gap:.4} >= {DEPENDENT_GAP_MIN}, \
             {COOC_FRAMES} frames each"
        ),
    );
}
