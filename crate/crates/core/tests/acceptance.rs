//! Acceptance checks. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fail.

use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsed::autodiff::gradcheck::run_suite;
use wsed::autodiff::{Array, Mode};
use wsed::dataset::{to_examples, Example, SynthSpec};
use wsed::features::{extract_mbe, AudioClip, FeatureConfig};
use wsed::metrics::{
    evaluate_split, evaluate_strong_grids, harmonic_f, segment_counts, segment_er, segment_f, weak_prf,
    ActivityGrid, LabelSet, SegmentCounts,
};
use wsed::model::{
    BaselineConfig, BaselineMlp, Checkpoint, ConvSpec, Crnn, ModelConfig, SedModel,
};
use wsed::train::{
    combined_loss, fit, replicate_weak_to_strong, training_metric, weak_from_strong, TrainConfig,
};

// Pinned tolerances and budgets.
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SEEDS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const SHAPE_RANDOM_LENGTHS: usize = 50;
const METRIC_PAIRS: usize = 1000;
const METRIC_RATIO_TOL: f64 = 1e-12;
const PAPER_F_TARGET: f64 = 13.1;
const PAPER_F_TOL: f64 = 0.05;
const IDENTITY_MAX_CLASSES: usize = 10;
const CHECKPOINT_INPUTS: usize = 10;
const LINEARITY_TOL: f64 = 1e-10;
const E2E_MAX_PARAMS: usize = 50_000;
const E2E_MAX_EPOCHS: usize = 150;
const E2E_MIN_WEAK_F: f64 = 80.0;
const E2E_MIN_ER_MARGIN: f64 = 0.15;
const E2E_BUDGET: Duration = Duration::from_secs(30 * 60);
const SWEEP_ROWS: usize = 7;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(1000, GRAD_SEEDS, None).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    for r in &reports {
        ensure(r.seeds >= GRAD_SEEDS, "too few seeds")?;
        ensure(
            r.max_rel_error < GRAD_TOLERANCE,
            format!("{} max rel error {:.3e}", r.operator, r.max_rel_error),
        )?;
    }
    ensure(elapsed < GRAD_BUDGET, format!("suite took {elapsed:?}"))?;
    Ok(format!(
        "{} operators x {GRAD_SEEDS} seeds, worst {} {:.2e} < {GRAD_TOLERANCE:e}, {:.1}s",
        reports.len(),
        worst.operator,
        worst.max_rel_error,
        elapsed.as_secs_f64()
    ))
}

// 2
fn feature_shape_law() -> Outcome {
    let cfg = FeatureConfig::default();
    let sr = 44_100;
    let clip = AudioClip::new(vec![0.0; 10 * sr as usize], sr).map_err(err)?;
    let m = extract_mbe(&clip, &cfg).map_err(err)?;
    ensure(
        (m.frames(), m.bands()) == (500, 40),
        format!("10 s clip gave {}x{}", m.frames(), m.bands()),
    )?;
    let hop = cfg.hop_len(sr).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..SHAPE_RANDOM_LENGTHS {
        let len = rng.random_range(1..=12 * sr as usize);
        let samples = (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let m = extract_mbe(&AudioClip::new(samples, sr).map_err(err)?, &cfg).map_err(err)?;
        ensure(
            m.frames() == len.div_ceil(hop) && m.bands() == 40,
            format!("len {len}: {} frames, expected {}", m.frames(), len.div_ceil(hop)),
        )?;
    }
    Ok(format!("10 s -> 500x40; {SHAPE_RANDOM_LENGTHS} random lengths follow ceil(len/{hop})"))
}

// 3
fn brute_force(reference: &[Vec<bool>], predicted: &[Vec<bool>]) -> ([usize; 4], f64, Option<f64>) {
    let (mut tp, mut fp, mut fn_, mut n, mut sdi) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (r, p) in reference.iter().zip(predicted) {
        let (mut seg_fp, mut seg_fn) = (0usize, 0usize);
        for (&a, &b) in r.iter().zip(p) {
            if a {
                n += 1;
            }
            if a && b {
                tp += 1;
            }
            if !a && b {
                seg_fp += 1;
            }
            if a && !b {
                seg_fn += 1;
            }
        }
        fp += seg_fp;
        fn_ += seg_fn;
        // S + D + I per segment is max(FN, FP).
        sdi += seg_fp.max(seg_fn);
    }
    let f = if tp + fp + fn_ == 0 {
        0.0
    } else {
        200.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let er = (n > 0).then(|| sdi as f64 / n as f64);
    ([tp, fp, fn_, sdi], f, er)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared_er = 0;
    for _ in 0..METRIC_PAIRS {
        let k = rng.random_range(1..=20);
        let c = rng.random_range(1..=10);
        let density = rng.random_range(0.0..1.0);
        let mut grid = || -> Vec<Vec<bool>> {
            (0..k).map(|_| (0..c).map(|_| rng.random_bool(density)).collect()).collect()
        };
        let (r, p) = (grid(), grid());
        let (rg, pg) = (ActivityGrid::from_rows(&r).unwrap(), ActivityGrid::from_rows(&p).unwrap());
        let (counts, f, er) = brute_force(&r, &p);
        let per_segment = segment_counts(&rg, &pg).map_err(err)?;
        let sum = |g: fn(&SegmentCounts) -> usize| per_segment.iter().map(g).sum::<usize>();
        let got_counts = [sum(|c| c.tp), sum(|c| c.fp), sum(|c| c.fn_), sum(|c| c.s + c.d + c.i)];
        ensure(got_counts == counts, format!("counts {got_counts:?} vs {counts:?}"))?;
        let got_f = segment_f(&rg, &pg).map_err(err)?;
        ensure((got_f - f).abs() <= METRIC_RATIO_TOL, format!("F {got_f} vs {f}"))?;
        match (segment_er(&rg, &pg), er) {
            (Ok(got), Some(want)) => {
                ensure((got - want).abs() <= METRIC_RATIO_TOL, format!("ER {got} vs {want}"))?;
                compared_er += 1;
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("ER {got:?} vs {want:?}")),
        }
        // Weak P/R/F on the same rows read as per-clip label sets.
        let sets = |g: &Vec<Vec<bool>>| -> Vec<LabelSet> {
            g.iter()
                .map(|row| row.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect())
                .collect()
        };
        let prf = weak_prf(&sets(&p), &sets(&r)).map_err(err)?;
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (rr, pp) in r.iter().zip(&p) {
            for (&a, &b) in rr.iter().zip(pp) {
                tp += usize::from(a && b);
                fp += usize::from(!a && b);
                fn_ += usize::from(a && !b);
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let (pw, rw) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let fw = if pw + rw == 0.0 { 0.0 } else { 2.0 * pw * rw / (pw + rw) };
        ensure(
            (prf.precision - pw).abs() <= METRIC_RATIO_TOL
                && (prf.recall - rw).abs() <= METRIC_RATIO_TOL
                && (prf.f - fw).abs() <= METRIC_RATIO_TOL,
            format!("weak {prf:?} vs {pw} {rw} {fw}"),
        )?;
    }
    // Hand case: reference {A, B}, prediction {A, C} in one segment.
    let r = ActivityGrid::from_rows(&[vec![true, true, false]]).unwrap();
    let p = ActivityGrid::from_rows(&[vec![true, false, true]]).unwrap();
    let (f, er) = (segment_f(&r, &p).map_err(err)?, segment_er(&r, &p).map_err(err)?);
    ensure(f == 50.0 && er == 0.5, format!("hand case F {f} ER {er}"))?;
    Ok(format!(
        "{METRIC_PAIRS} random grid pairs ({compared_er} with defined ER) match recount (counts exact, ratios within {METRIC_RATIO_TOL:e}); hand case F=50 ER=0.5"
    ))
}

// 4
fn reported_score_arithmetic() -> Outcome {
    let f = harmonic_f(12.2, 14.1);
    ensure((f - PAPER_F_TARGET).abs() <= PAPER_F_TOL, format!("F {f}"))?;
    let ideal = training_metric(100.0, 0.0);
    ensure(ideal == 1.0, format!("ideal metric {ideal}"))?;
    Ok(format!("P=12.2 R=14.1 -> F={f:.3}; metric(F=100, ER=0) = {ideal}"))
}

// 5
fn small_crnn(seed: u64, dropout: f64) -> Crnn {
    Crnn::new(ModelConfig {
        num_classes: 3,
        input_bands: 8,
        conv: vec![ConvSpec { filters: 4, pool: 4 }, ConvSpec { filters: 4, pool: 2 }],
        gru_units: 5,
        strong_dense: vec![6, 3],
        weak_dense: vec![4, 3],
        dropout,
        seed,
    })
    .unwrap()
}

fn round_trip_laws() -> Outcome {
    let mut checked = 0;
    for c in 1..=IDENTITY_MAX_CLASSES {
        for bits in 0u32..(1 << c) {
            let weak: Vec<f64> = (0..c).map(|i| f64::from((bits >> i) & 1)).collect();
            let expected: LabelSet = (0..c).filter(|&i| (bits >> i) & 1 == 1).collect();
            let grid = replicate_weak_to_strong(&Array::from_vec(&[c], weak).unwrap(), 7).map_err(err)?;
            ensure(weak_from_strong(&grid, 0.5).map_err(err)? == expected, format!("C={c} bits={bits}"))?;
            checked += 1;
        }
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let mut trained = small_crnn(4, 0.2);
    // Move the batch-norm statistics away from their initial values.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array::random_uniform(&[3, 9, 8], -2.0, 2.0, &mut rng);
    trained.forward(&x, Mode::Train).map_err(err)?;
    let path = dir.path().join("model.wsedm");
    trained.to_checkpoint().save(&path).map_err(err)?;
    let mut first = Crnn::from_checkpoint(&Checkpoint::load(&path).map_err(err)?).map_err(err)?;
    let path2 = dir.path().join("again.wsedm");
    first.to_checkpoint().save(&path2).map_err(err)?;
    let mut second = Crnn::from_checkpoint(&Checkpoint::load(&path2).map_err(err)?).map_err(err)?;
    ensure(
        std::fs::read(&path).map_err(err)? == std::fs::read(&path2).map_err(err)?,
        "re-saved checkpoint differs",
    )?;
    for i in 0..CHECKPOINT_INPUTS {
        let t = rng.random_range(1..20);
        let x = Array::random_uniform(&[1, t, 8], -3.0, 3.0, &mut rng);
        let a = first.forward(&x, Mode::Infer).map_err(err)?;
        let b = second.forward(&x, Mode::Infer).map_err(err)?;
        let same = a.strong.data().iter().zip(b.strong.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            && a.weak.as_ref().unwrap().data().iter().zip(b.weak.as_ref().unwrap().data())
                .all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(same, format!("input {i}: outputs differ after reload"))?;
    }
    Ok(format!(
        "identity on all {checked} weak vectors (C<=10); {CHECKPOINT_INPUTS} inputs bit-identical after save/load"
    ))
}

// 6
fn gradients(model: &mut Crnn, x: &Array, weak_t: &Array, ws: f64, ww: f64) -> Result<(Vec<f64>, bool), String> {
    model.zero_grad();
    let pred = model.forward(x, Mode::Train).map_err(err)?;
    let strong_t = replicate_weak_to_strong(weak_t, x.shape()[1]).map_err(err)?;
    let loss = combined_loss(&pred.strong, &strong_t, Some((pred.weak.as_ref().unwrap(), weak_t)), ws, ww)
        .map_err(err)?;
    let strong_grad_zero = loss.grad_strong.data().iter().all(|&g| g == 0.0);
    model.backward(&loss.grad_strong, loss.grad_weak.as_ref()).map_err(err)?;
    Ok((model.params().iter().flat_map(|p| p.grad().to_vec()).collect(), strong_grad_zero))
}

fn loss_weighting() -> Outcome {
    let mut model = small_crnn(6, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Array::random_uniform(&[2, 10, 8], -2.0, 2.0, &mut rng);
    let weak_t = Array::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();

    // With w_s = 0 nothing flows in from the strong loss.
    let (g0, strong_zero) = gradients(&mut model, &x, &weak_t, 0.0, 1.0)?;
    ensure(strong_zero, "strong-loss gradient is not exactly zero at w_s = 0")?;
    // The weak head is computed downstream of the strong head, so every
    // strong-head parameter also serves the weak output; the parameters
    // exclusive to one head are those of the weak head. Check that the
    // exclusive set of a zero-weighted head gets exactly zero gradient.
    let weak_only = model.weak_head_params().iter().map(|p| p.len()).sum::<usize>();
    let total = g0.len();
    let (g_strong_only, _) = gradients(&mut model, &x, &weak_t, 1.0, 0.0)?;
    ensure(
        g_strong_only[total - weak_only..].iter().all(|&g| g == 0.0),
        "weak-head parameters moved with w_w = 0",
    )?;
    // Weak-only gradient reaches the shared strong-head layers.
    ensure(g0[..total - weak_only].iter().any(|&g| g != 0.0), "weak loss does not reach the trunk")?;

    let (g1, _) = gradients(&mut model, &x, &weak_t, 1.0, 1.0)?;
    let (g2, _) = gradients(&mut model, &x, &weak_t, 2.0, 1.0)?;
    let scale = g1.iter().chain(&g2).fold(0.0f64, |m, g| m.max(g.abs()));
    let worst = g0
        .iter()
        .zip(&g1)
        .zip(&g2)
        .map(|((a, b), c)| ((c - a) - 2.0 * (b - a)).abs() / scale)
        .fold(0.0f64, f64::max);
    ensure(worst <= LINEARITY_TOL, format!("doubling w_s: relative deviation {worst:.2e}"))?;
    Ok(format!(
        "w_s=0 injects exactly zero strong gradient; zero-weighted head's exclusive params get 0; doubling w_s doubles its contribution (dev {worst:.1e} <= {LINEARITY_TOL:e})"
    ))
}

// Shared desk-scale dataset: 200 training and 40 validation clips.
fn dataset() -> &'static (Vec<Example>, Vec<Example>) {
    static DATA: OnceLock<(Vec<Example>, Vec<Example>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = FeatureConfig::default();
        let train_clips = SynthSpec::new(200, 4, 7).generate().unwrap();
        let val_clips = SynthSpec::new(40, 4, 8).generate().unwrap();
        let mut train = to_examples(&train_clips, &cfg).unwrap();
        for e in &mut train {
            e.strong = None;
        }
        (train, to_examples(&val_clips, &cfg).unwrap())
    })
}

fn e2e_model_config() -> ModelConfig {
    ModelConfig {
        num_classes: 4,
        input_bands: 40,
        conv: [5, 4, 2].into_iter().map(|pool| ConvSpec { filters: 16, pool }).collect(),
        gru_units: 8,
        strong_dense: vec![16, 4],
        weak_dense: vec![8, 4],
        dropout: 0.15,
        seed: 1,
    }
}

// 7
fn end_to_end_learning() -> Outcome {
    let start = Instant::now();
    let (train, val) = dataset();
    let model = Crnn::new(e2e_model_config()).map_err(err)?;
    let params = model.count_parameters();
    ensure(params <= E2E_MAX_PARAMS, format!("{params} parameters"))?;
    let cfg = TrainConfig {
        strong_weight: 1.0,
        weak_weight: 1.0,
        max_epochs: E2E_MAX_EPOCHS,
        patience: 20,
        batch_size: 8,
        dropout: 0.15,
        lr: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = fit(model, train, val, &cfg).map_err(err)?;
    let mut best = out.model;
    let report = evaluate_split(&mut best, val, 1.0, 0.5).map_err(err)?;
    let er = report.strong.ok_or("no strong scores")?.er;

    let degenerate: Vec<Array> = val
        .iter()
        .map(|e| {
            let mut weak = vec![0.0; 4];
            e.weak.iter().for_each(|&c| weak[c] = 1.0);
            replicate_weak_to_strong(&Array::from_vec(&[4], weak).unwrap(), e.features.frames()).unwrap()
        })
        .collect();
    let deg = evaluate_strong_grids(val, &degenerate, 4, 1.0, 0.5).map_err(err)?;
    let deg_er = deg.strong.ok_or("no degenerate strong scores")?.er;
    let elapsed = start.elapsed();
    let summary = format!(
        "{params} params, best epoch {} of {}: weak F {:.1}% (>= {E2E_MIN_WEAK_F}), ER {er:.3} vs replicated-weak ER {deg_er:.3} (margin {:.3} >= {E2E_MIN_ER_MARGIN}), {:.0}s",
        out.best_epoch,
        out.history.len(),
        report.weak.f,
        deg_er - er,
        elapsed.as_secs_f64()
    );
    ensure(report.weak.f >= E2E_MIN_WEAK_F, summary.clone())?;
    ensure(deg_er - er >= E2E_MIN_ER_MARGIN, summary.clone())?;
    ensure(elapsed < E2E_BUDGET, summary.clone())?;
    Ok(summary)
}

// 8
fn wsed(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_wsed"))
        .args(args)
        .output()
        .map_err(err)
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let out = wsed(args)?;
    if !out.status.success() {
        return Err(format!(
            "`wsed {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn sweep_plumbing() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    run_ok(&["-q", "synth", "--out", &d("train"), "--clips", "40", "--classes", "4", "--seed", "21"])?;
    run_ok(&["-q", "synth", "--out", &d("val"), "--clips", "10", "--classes", "4", "--seed", "22", "--split", "validation"])?;
    let sweep = |out: &str| -> Result<String, String> {
        run_ok(&[
            "-q", "sweep", "--train", &d("train/manifest.tsv"), "--validation", &d("val/manifest.tsv"),
            "--weights", "0.002,0.02,0.2,1", "--epochs", "2", "--patience", "1", "--seed", "3",
            "--conv-filters", "8,8,8", "--gru-units", "8", "--strong-hidden", "8", "--weak-hidden", "8",
            "--out", &d(out),
        ])?;
        std::fs::read_to_string(d(out)).map_err(err)
    };
    let first = sweep("a.csv")?;
    let second = sweep("b.csv")?;
    let rows = first.lines().count() - 1;
    ensure(rows == SWEEP_ROWS, format!("{rows} rows"))?;
    ensure(first == second, "re-run differs")?;
    let pairs: Vec<String> = first
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join("/"))
        .collect();
    Ok(format!("{rows} rows ({}), identical on re-run", pairs.join(" ")))
}

// 9
fn baseline_harness() -> Outcome {
    let c = 4;
    let model = BaselineMlp::new(BaselineConfig { seed: 2, ..BaselineConfig::new(c, 40) }).map_err(err)?;
    let expected = 200 * 50 + 50 + 50 * 50 + 50 + 50 * c + c;
    ensure(model.count_parameters() == expected, format!("{} != {expected}", model.count_parameters()))?;
    let (train, val) = dataset();
    let cfg = TrainConfig {
        max_epochs: 5,
        patience: 4,
        batch_size: 8,
        lr: 3e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = fit(model, train, val, &cfg).map_err(err)?;
    let mut m = out.model;
    let report = evaluate_split(&mut m, val, 1.0, 0.5).map_err(err)?;
    let strong = report.strong.ok_or("no strong scores")?;
    let values = [report.weak.precision, report.weak.recall, report.weak.f, strong.er, strong.f];
    ensure(values.iter().all(|v| v.is_finite()), format!("non-finite report {values:?}"))?;
    ensure(
        out.history.iter().all(|r| r.total_loss.is_finite()),
        "non-finite training loss",
    )?;
    Ok(format!(
        "{expected} params (hand count); weak P/R/F {:.1}/{:.1}/{:.1}, ER {:.2}, seg F {:.1}",
        report.weak.precision, report.weak.recall, report.weak.f, strong.er, strong.f
    ))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Check); 9] = [
        ("gradient correctness", gradient_correctness),
        ("feature shape law", feature_shape_law),
        ("metric oracle equivalence", metric_oracle),
        ("reported-score arithmetic", reported_score_arithmetic),
        ("round-trip label and checkpoint laws", round_trip_laws),
        ("loss weighting", loss_weighting),
        ("end-to-end weak supervision", end_to_end_learning),
        ("sweep plumbing", sweep_plumbing),
        ("baseline harness", baseline_harness),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {p:?}")));
        match result {
            Ok(detail) => println!("criterion {} [{name}]: PASS ({detail})", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} [{name}]: FAIL ({detail})", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
