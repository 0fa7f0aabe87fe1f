//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! The trend criteria train fifteen desk-scale models, so a full run takes
//! 25 to 45 minutes on one core depending on the build profile.

use std::process::ExitCode;
use std::time::Instant;

use recyclegan::data::{generate_synthetic_domains, LabelMap, SceneTask, SyntheticDomains, SyntheticSceneConfig};
use recyclegan::eval::{
    evaluate, infer_framewise, infer_smoothed, seg_metrics, train_oracle, EvalOptions, EvalReport, OracleConfig,
};
use recyclegan::losses::LossMode;
use recyclegan::nn::NetworkParams;
use recyclegan::tensor::Tensor;
use recyclegan::train::{decode_checkpoint, encode_checkpoint, fit, FitSinks, TrainConfig, TrainState};
use recyclegan::verify::{run_verification, VerifyOptions, VERIFY_BUDGET};

const SEEDS: [u64; 3] = [0, 1, 2];
const TREND_STEPS: u64 = 2000;
const TREND_BUDGET_SECS: f64 = 3600.0;
const SEG_TOLERANCE: f64 = 1e-4;
const SMOOTH_TOLERANCE: f64 = 1e-12;
const SHORT_STEPS: u64 = 40;
const RESUME_AT: u64 = 17;

struct Outcome {
    passed: bool,
    summary: String,
}

fn report(n: usize, title: &str, o: &Outcome) {
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("{tag} criterion {n}: {title}: {}", o.summary);
}

fn scene(task: SceneTask) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        task,
        ..Default::default()
    }
}

/// Training streams for one seed, plus a held-out pair from unseen
/// trajectories.
fn datasets(task: SceneTask, seed: u64) -> (SyntheticDomains, SyntheticDomains) {
    let cfg = scene(task);
    let train = generate_synthetic_domains(&cfg, 1 + 2 * seed, 2 + 2 * seed).unwrap();
    let held = generate_synthetic_domains(&cfg, 1001 + 2 * seed, 1002 + 2 * seed).unwrap();
    (train, held)
}

fn train(d: &SyntheticDomains, mode: LossMode, seed: u64, steps: u64) -> recyclegan::error::Result<TrainState> {
    let cfg = TrainConfig {
        mode,
        seed,
        steps,
        ..Default::default()
    };
    let mut state = TrainState::new(cfg)?;
    fit(&mut state, &d.x, &d.y, FitSinks::default())?;
    Ok(state)
}

fn mode_name(m: LossMode) -> &'static str {
    match m {
        LossMode::Cycle => "cycle",
        LossMode::Recycle => "recycle",
        LossMode::Combined => "combined",
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_1() -> Outcome {
    match run_verification(&VerifyOptions::default()) {
        Ok(r) => {
            let failed: Vec<String> = r.failures().map(|c| c.to_string()).collect();
            for f in &failed {
                println!("  {f}");
            }
            let in_budget = r.elapsed < VERIFY_BUDGET;
            Outcome {
                passed: r.passed() && in_budget,
                summary: format!(
                    "{} checks, {} failed, {:.1}s (budget {}s)",
                    r.checks.len(),
                    failed.len(),
                    r.elapsed.as_secs_f64(),
                    VERIFY_BUDGET.as_secs()
                ),
            }
        }
        Err(e) => Outcome {
            passed: false,
            summary: format!("suite error: {e}"),
        },
    }
}

fn criterion_2() -> Outcome {
    let opts = VerifyOptions {
        filter: Some("identity/".into()),
        ..Default::default()
    };
    let identities = match run_verification(&opts) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                summary: format!("suite error: {e}"),
            }
        }
    };
    let map = |ids: &[u8]| LabelMap::new(1, ids.len(), ids.to_vec()).unwrap();
    let m = seg_metrics(&[map(&[0, 1, 1, 1])], &[map(&[0, 0, 1, 1])], 2).unwrap();
    let hand = (m.mean_pixel_accuracy, m.average_class_accuracy, m.mean_iou);
    let seg_ok = (hand.0 - 0.75).abs() < SEG_TOLERANCE
        && (hand.1 - 0.75).abs() < SEG_TOLERANCE
        && (hand.2 - 0.5833).abs() < SEG_TOLERANCE;
    let loss_checks: Vec<_> = identities.checks.iter().filter(|c| c.name.starts_with("identity/")).collect();
    let n_checks = loss_checks.len();
    let worst = loss_checks.iter().map(|c| c.value).fold(0.0, f64::max);
    Outcome {
        passed: identities.passed() && n_checks == 4 && seg_ok,
        summary: format!(
            "{n_checks} loss identities (worst {worst:.1e}); hand seg case MP {:.4} AC {:.4} IoU {:.4}",
            hand.0, hand.1, hand.2
        ),
    }
}

struct TrendRun {
    mode: LossMode,
    report: EvalReport,
    secs: f64,
}

/// Trains every (task, mode, seed) combination the trend criteria need and
/// evaluates each on its held-out streams.
fn trend_runs() -> Result<Vec<TrendRun>, String> {
    let mut runs = Vec::new();
    let plan = [
        (SceneTask::Labels, &[LossMode::Cycle, LossMode::Recycle, LossMode::Combined][..]),
        (SceneTask::Images, &[LossMode::Cycle, LossMode::Recycle][..]),
    ];
    for (task, modes) in plan {
        for seed in SEEDS {
            let (d, held) = datasets(task, seed);
            let oracle = match task {
                SceneTask::Labels => Some(train_oracle(&d.x, &OracleConfig::default()).map_err(|e| e.to_string())?),
                SceneTask::Images => None,
            };
            for &mode in modes {
                let t0 = Instant::now();
                let state = train(&d, mode, seed, TREND_STEPS).map_err(|e| format!("{} seed {seed}: {e}", mode_name(mode)))?;
                let secs = t0.elapsed().as_secs_f64();
                let label = format!("{}/{}/{seed}", task.tag(), mode_name(mode));
                let report = evaluate(
                    &label,
                    state.step,
                    &state.params,
                    &held.x,
                    &held.y,
                    &held.scene,
                    oracle.as_ref(),
                    &EvalOptions::default(),
                )
                .map_err(|e| format!("{label}: {e}"))?;
                let f = report.fields();
                let pick = |k: &str| f.iter().find(|(n, _)| *n == k).map_or(String::new(), |(_, v)| v.clone());
                eprintln!(
                    "  {label}: {secs:.0}s mean_iou={} oracle={} mse={} diversity={}",
                    pick("mean_iou"),
                    pick("oracle_score"),
                    pick("translation_mse"),
                    pick("diversity_ratio")
                );
                runs.push(TrendRun { mode, report, secs });
            }
        }
    }
    Ok(runs)
}

fn per_mode(runs: &[TrendRun], task: SceneTask, mode: LossMode, f: impl Fn(&EvalReport) -> Option<f64>) -> Vec<f64> {
    runs.iter()
        .filter(|r| r.report.task == task && r.mode == mode)
        .filter_map(|r| f(&r.report))
        .collect()
}

fn criterion_3(runs: &[TrendRun]) -> Outcome {
    let iou = |m| per_mode(runs, SceneTask::Labels, m, |r| r.segmentation.as_ref().map(|s| s.mean_iou));
    let mse = |m| per_mode(runs, SceneTask::Images, m, |r| r.translation_mse);
    let (c, r, b) = (iou(LossMode::Cycle), iou(LossMode::Recycle), iou(LossMode::Combined));
    let (mc, mr) = (mse(LossMode::Cycle), mse(LossMode::Recycle));
    let complete = [&c, &r, &b, &mc, &mr].iter().all(|v| v.len() == SEEDS.len());
    let longest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let oracle = |m| per_mode(runs, SceneTask::Labels, m, |r| r.oracle.as_ref().map(|o| o.normalized));
    let passed = complete
        && mean(&r) > mean(&c)
        && mean(&b) >= mean(&c)
        && mean(&mr) < mean(&mc)
        && longest * SEEDS.len() as f64 <= TREND_BUDGET_SECS;
    Outcome {
        passed,
        summary: format!(
            "mean IoU cycle {:.4} recycle {:.4} combined {:.4}; translation MSE cycle {:.5} recycle {:.5}; \
             oracle score cycle {:.3} recycle {:.3} combined {:.3}; slowest run {longest:.0}s",
            mean(&c),
            mean(&r),
            mean(&b),
            mean(&mc),
            mean(&mr),
            mean(&oracle(LossMode::Cycle)),
            mean(&oracle(LossMode::Recycle)),
            mean(&oracle(LossMode::Combined)),
        ),
    }
}

fn criterion_4(runs: &[TrendRun]) -> Outcome {
    let ratio = |m| per_mode(runs, SceneTask::Labels, m, |r| Some(r.diversity.ratio));
    let (c, r) = (ratio(LossMode::Cycle), ratio(LossMode::Recycle));
    Outcome {
        passed: c.len() == SEEDS.len() && r.len() == SEEDS.len() && mean(&r) >= mean(&c),
        summary: format!(
            "diversity ratio recycle {:.4} vs cycle {:.4} (per seed cycle {:?})",
            mean(&r),
            mean(&c),
            c.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    }
}

fn short_run(d: &SyntheticDomains, stop_at: Option<u64>, from: Option<TrainState>) -> (TrainState, Vec<u8>) {
    let cfg = TrainConfig {
        steps: SHORT_STEPS,
        seed: 42,
        pool_size: 4,
        decay_start: SHORT_STEPS / 2,
        ..Default::default()
    };
    let mut state = from.unwrap_or_else(|| TrainState::new(cfg).unwrap());
    let mut csv = Vec::new();
    fit(
        &mut state,
        &d.x,
        &d.y,
        FitSinks {
            csv: Some(&mut csv),
            stop_at,
            ..Default::default()
        },
    )
    .unwrap();
    (state, csv)
}

fn criterion_5() -> Outcome {
    let d = generate_synthetic_domains(
        &SyntheticSceneConfig {
            length: 60,
            ..scene(SceneTask::Images)
        },
        5,
        6,
    )
    .unwrap();
    let (a, csv_a) = short_run(&d, None, None);
    let (_, csv_b) = short_run(&d, None, None);
    let same_csv = csv_a == csv_b && !csv_a.is_empty();

    let (half, mut csv_resumed) = short_run(&d, Some(RESUME_AT), None);
    let restored = decode_checkpoint(&encode_checkpoint(&half)).unwrap();
    let (resumed, tail) = short_run(&d, None, Some(restored));
    csv_resumed.extend(tail);
    let resume_ok = encode_checkpoint(&resumed) == encode_checkpoint(&a) && csv_resumed == csv_a;

    let bytes = encode_checkpoint(&a);
    let back = decode_checkpoint(&bytes).unwrap();
    let round_trip = back == a && encode_checkpoint(&back) == bytes;
    Outcome {
        passed: same_csv && resume_ok && round_trip,
        summary: format!(
            "identical CSVs {same_csv}; resume at step {RESUME_AT} of {SHORT_STEPS} bitwise {resume_ok}; \
             checkpoint round trip ({} bytes) {round_trip}",
            bytes.len()
        ),
    }
}

fn criterion_6() -> Outcome {
    let d = generate_synthetic_domains(
        &SyntheticSceneConfig {
            length: 24,
            ..scene(SceneTask::Images)
        },
        7,
        8,
    )
    .unwrap();
    let state = train(&d, LossMode::Recycle, 3, 25).unwrap();
    let g: &NetworkParams<f32> = &state.params.g_y;
    let framewise = infer_framewise(g, &d.x).unwrap();
    let outs = framewise.frames().to_vec();
    let echo = |_: &Tensor<f32>, curr: &Tensor<f32>| {
        let i = outs.iter().position(|f| f == curr).expect("stub sees framewise outputs");
        Ok(outs[i + 1].clone())
    };
    let stubbed = infer_smoothed(g, &echo, &d.x).unwrap();
    let max_diff = framewise
        .frames()
        .iter()
        .zip(stubbed.frames())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| (f64::from(*p) - f64::from(*q)).abs()))
        .fold(0.0, f64::max);
    let smoothed = infer_smoothed(g, &state.params.p_y, &d.x).unwrap();
    let bound = [&framewise, &stubbed, &smoothed]
        .iter()
        .flat_map(|s| s.frames().iter().flat_map(|f| f.data().iter().map(|v| v.abs())))
        .fold(0.0f32, f32::max);
    Outcome {
        passed: max_diff <= SMOOTH_TOLERANCE && bound <= 1.0 && smoothed.len() == d.x.len(),
        summary: format!("stubbed predictor max deviation {max_diff:.1e}; max |output| {bound:.4}"),
    }
}

fn main() -> ExitCode {
    let mut all = true;
    // Criteria 3 and 4 fail the process only when training itself fails.
    let mut show = |n, title: &str, o: Outcome, gating: bool| {
        all &= o.passed || !gating;
        report(n, title, &o);
        if !o.passed && !gating {
            println!("  (criterion {n} is a measured trend; reported, not gating)");
        }
    };
    show(1, "verification suite", criterion_1(), true);
    show(2, "loss identities and segmentation metrics", criterion_2(), true);
    let (c5, c6) = (criterion_5(), criterion_6());
    let t0 = Instant::now();
    let (c3, c4, trained) = match trend_runs() {
        Ok(runs) => {
            eprintln!("  trend runs took {:.0}s", t0.elapsed().as_secs_f64());
            (criterion_3(&runs), criterion_4(&runs), true)
        }
        Err(e) => {
            let fail = || Outcome {
                passed: false,
                summary: format!("trend runs failed: {e}"),
            };
            (fail(), fail(), false)
        }
    };
    show(3, "recycle beats cycle", c3, !trained);
    show(4, "mode-collapse probe", c4, !trained);
    show(5, "determinism and persistence", c5, true);
    show(6, "smoothed inference contract", c6, true);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
