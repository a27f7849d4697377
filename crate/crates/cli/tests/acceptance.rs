//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 5-7 train real networks at desk scale and take most of an hour on one core.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lidnet::boxes::Rect;
use lidnet::dataset::{build_dataset, Dataset};
use lidnet::denoiser::{CriticConfig, DenoiserConfig};
use lidnet::detector::{Detector, DetectorConfig};
use lidnet::metrics::*;
use lidnet::phantom::{Ellipse, PhantomSpec, SimulationConfig};
use lidnet::trainer::*;
use lidnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use support::oracles::*;

// 1: relative FD error, 1e-3 for the composite detector loss
const GRAD_MINUTES: f64 = 2.0;
// 2
const REDUCTION_TOL: f64 = 1e-6;
const REDUCTION_SEEDS: u64 = 20;
// 3: exact for AP, this elsewhere
const ORACLE_TOL: f64 = 1e-9;
// 4
const SCHEDULE_MINUTES: f64 = 1.0;
// 5
const CLEAN_AP50: f64 = 0.80;
const LDCT_DROP: f64 = 0.10;
const EVAL_DETECTOR_STEPS: usize = 1500;
const DETECTION_MINUTES: f64 = 20.0;
// 6, 7
const SEEDS: [u64; 3] = [1, 2, 3];
const LAMBDA: f64 = 5.0;
const DIRECTIONAL_MINUTES: f64 = 45.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn report(n: usize, title: &str, o: &Outcome, failures: &mut Vec<usize>) {
    println!("criterion {n} {}: {title}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    if !o.passed {
        failures.push(n);
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let cases = support::grad_cases::all();
    let elapsed = minutes(t.elapsed());
    let failed: Vec<String> = cases
        .iter()
        .filter(|(_, r, tol)| !r.passes(*tol))
        .map(|(name, r, tol)| format!("{name} {:.2e} > {tol:.0e}", r.relative_error))
        .collect();
    let worst = cases.iter().map(|(_, r, _)| r.relative_error).fold(0.0, f64::max);
    Outcome {
        passed: failed.is_empty() && elapsed < GRAD_MINUTES,
        detail: format!("{} losses, worst relative error {worst:.2e}, {:.1}s {}", cases.len(), elapsed * 60.0, failed.join("; ")),
    }
}

fn reduction_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..REDUCTION_SEEDS {
        let det = Detector::<f64>::new(DetectorConfig::tiny(), seed).unwrap();
        let (roi, global) = support::grad_cases::full_box_pair(&det, 1, seed);
        worst = worst.max((roi - global).abs());
    }
    Outcome {
        passed: worst <= REDUCTION_TOL,
        detail: format!("{REDUCTION_SEEDS} seeds, max |roi - global| = {worst:.2e}"),
    }
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<ScoredBox>, Vec<TruthBox>) {
    let square = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(3..8) as f64;
        (rng.random_range(0..2usize), Rect::from_rcwh(rng.random_range(0..12) as f64, rng.random_range(0..12) as f64, s, s))
    };
    let gts = (0..rng.random_range(1..=5))
        .map(|_| {
            let (image, rect) = square(rng);
            TruthBox { image, rect, label: 1 }
        })
        .collect();
    let dets = (0..rng.random_range(0..=5))
        .map(|_| {
            let (image, rect) = square(rng);
            ScoredBox { image, rect, label: 1, score: rng.random_range(1..1000) as f64 / 1000.0 }
        })
        .collect();
    (dets, gts)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut ap_mismatches = 0;

    for (seed, window) in [(1, 11), (2, 7), (3, 3)] {
        let a = random_image(17, 21, seed);
        let noise = random_image(17, 21, seed + 100);
        let b = Tensor::from_fn(&[17, 21], |i| 0.7 * a.data()[i] + 0.3 * noise.data()[i]);
        let cfg = SsimConfig { window, ..SsimConfig::default() };
        worst = worst.max((ssim(&a, &b, &cfg).unwrap() - ssim_oracle(&a, &b, &cfg)).abs());
    }

    for trial in 0..8 {
        let (rows, cols) = (rng.random_range(3..9), rng.random_range(3..9));
        let roi = Roi::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect());
        let levels = [2, 4, 8, 32][trial % 4];
        for angle in [GlcmAngle::Deg0, GlcmAngle::Deg45, GlcmAngle::Deg90, GlcmAngle::Deg135] {
            for symmetric in [true, false] {
                let cfg = GlcmConfig { n_levels: levels, symmetric, ..GlcmConfig::default() };
                let (sr, sc) = angle.step();
                let (want_m, want_f) = glcm_oracle(&roi, levels, (sr, sc), symmetric);
                let got_m = glcm(&roi, &cfg, 1, angle).unwrap();
                let f = glcm_features(&got_m, levels);
                for (a, b) in got_m.iter().zip(&want_m) {
                    worst = worst.max((a - b).abs());
                }
                for (a, b) in [f.correlation, f.homogeneity, f.energy].iter().zip(want_f) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }

    let hand = radiomics_features(
        &Roi::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]),
        &GlcmConfig { n_levels: 2, angles: vec![GlcmAngle::Deg0], ..GlcmConfig::default() },
    )
    .unwrap();
    for (got, want) in [(hand.energy, 0.5), (hand.homogeneity, 1.0), (hand.correlation, 1.0)] {
        worst = worst.max((got - want).abs());
    }

    for _ in 0..500 {
        let quarter = |rng: &mut ChaCha8Rng| {
            let (r, c) = (rng.random_range(0..60), rng.random_range(0..60));
            let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
            let q = |v: i32| v as f64 / 4.0;
            Rect::new(q(r), q(c), q((r + h).min(80)), q((c + w).min(80)))
        };
        let (a, b) = (quarter(&mut rng), quarter(&mut rng));
        worst = worst.max((a.iou(&b) - iou_oracle(&a, &b)).abs());
    }

    let scenes = 2000;
    for _ in 0..scenes {
        let (dets, gts) = random_scene(&mut rng);
        for mode in [Interpolation::AllPoints, Interpolation::ElevenPoint] {
            for thr in [0.5, 0.75] {
                let want = ap_oracle(&dets, &gts, thr, mode);
                let flags = match_detections(&dets, &gts, thr);
                if ap_from_ranked::<Q>(&flags, gts.len(), mode) != want {
                    ap_mismatches += 1;
                }
                worst = worst.max((average_precision(&dets, &gts, thr, mode).ap - to_f64(want)).abs());
            }
        }
    }

    Outcome {
        passed: worst <= ORACLE_TOL && ap_mismatches == 0,
        detail: format!("max deviation {worst:.2e}, {ap_mismatches} inexact AP of {} rational checks", scenes * 4),
    }
}

fn state_machine() -> Outcome {
    let t = Instant::now();
    let spec = PhantomSpec {
        image_size: 32,
        body_ellipse: Ellipse { center_row: 16.0, center_col: 16.0, semi_rows: 12.0, semi_cols: 13.0 },
        n_lesions: (1, 2),
        lesion_radius: (2.5, 3.5),
        ..PhantomSpec::default()
    };
    let ds = build_dataset(&spec, &SimulationConfig::default(), 6, 3).unwrap();
    let cfg = TrainConfig {
        t1: 2,
        t2: 2,
        t3: 1,
        rounds: 2,
        batch_size: 2,
        eval_every: 0,
        denoiser: DenoiserConfig { width: 4 },
        detector: DetectorConfig::tiny(),
        critic: CriticConfig { channels: [2, 3, 4, 4], ..CriticConfig::default() },
        seed: 7,
        ..TrainConfig::desk()
    };
    let ec = EvalConfig::default();
    let ctx = TrainContext { train: &ds.train, eval: &ds.test, eval_config: &ec, checkpoint_dir: None };
    let st = train::<f32>(&cfg, &ctx).unwrap();
    let trace = st.logs.trace_string();
    let frozen_ok = st.logs.phases.iter().all(|r| match r.phase {
        Phase::Denoiser => r.detector_before == r.detector_after,
        _ => r.denoiser_before == r.denoiser_after,
    });
    let elapsed = minutes(t.elapsed());
    Outcome {
        passed: trace == "PPDDTDDT" && frozen_ok && elapsed < SCHEDULE_MINUTES,
        detail: format!("trace {trace}, frozen checksums {}, {:.1}s", if frozen_ok { "stable" } else { "CHANGED" }, elapsed * 60.0),
    }
}

/// Desk-scale benchmark shared by criteria 5-7.
struct Bench {
    ds: Dataset,
    eval_detector: Detector<f32>,
    ec: EvalConfig,
}

fn detection_sanity() -> (Outcome, Bench) {
    let t = Instant::now();
    let ds = build_dataset(&PhantomSpec::default(), &SimulationConfig::default(), 200, 100).unwrap();
    let cfg = TrainConfig { t1: EVAL_DETECTOR_STEPS, seed: 100, ..TrainConfig::desk() };
    let (eval_detector, losses) = train_eval_detector::<f32>(&cfg, &ds.train).unwrap();
    let ec = EvalConfig::default();
    let ndct: Vec<_> = ds.test.iter().map(|s| s.ndct.clone()).collect();
    let ldct: Vec<_> = ds.test.iter().map(|s| s.ldct.clone()).collect();
    let anns: Vec<_> = ds.test.iter().map(|s| s.annotations.clone()).collect();
    let clean = evaluate_images("ndct", &ndct, &ndct, &anns, &eval_detector, &ec).unwrap().ap50;
    let noisy = evaluate_images("ldct", &ldct, &ndct, &anns, &eval_detector, &ec).unwrap().ap50;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fell = mean(&losses[losses.len() - 100..]) / mean(&losses[..20]);
    let elapsed = minutes(t.elapsed());
    let outcome = Outcome {
        passed: clean >= CLEAN_AP50 && clean - noisy >= LDCT_DROP && elapsed < DETECTION_MINUTES,
        detail: format!(
            "NDCT AP-50 {clean:.3} (>= {CLEAN_AP50}), LDCT AP-50 {noisy:.3} (drop {:.3} >= {LDCT_DROP}), loss ratio {fell:.2}, {:.1} min",
            clean - noisy,
            elapsed
        ),
    };
    (outcome, Bench { ds, eval_detector, ec })
}

/// Shortened schedule so three seeds of each arm fit the runtime budget.
fn directional_config(seed: u64, lambda: f64) -> TrainConfig {
    let mut cfg = TrainConfig { t1: 1000, t2: 400, t3: 200, rounds: 3, eval_every: 0, seed, ..TrainConfig::desk() };
    cfg.objective.weights.lambda1 = lambda;
    cfg.objective.weights.lambda2 = lambda;
    cfg
}

struct Arm {
    eval: MetricReport,
    /// AP-50 of the co-trained detector on denoised test images after the last step.
    final_ap50: f64,
    elapsed: Duration,
}

fn run_arm(bench: &Bench, cfg: &TrainConfig) -> Arm {
    let t = Instant::now();
    let ctx = TrainContext { train: &bench.ds.train, eval: &bench.ds.test, eval_config: &bench.ec, checkpoint_dir: None };
    let st = train::<f32>(cfg, &ctx).unwrap();
    let eval = evaluate("arm", &st.denoiser, &bench.eval_detector, &bench.ds.test, &bench.ec).unwrap();
    let final_ap50 = st.logs.ap_curve.last().map(|p| p.ap50).unwrap_or(f64::NAN);
    Arm { eval, final_ap50, elapsed: t.elapsed() }
}

fn mean_mad(r: &MetricReport) -> f64 {
    (r.correlation + r.homogeneity + r.energy) / 3.0
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional(lid: &[Arm], rec: &[Arm]) -> Outcome {
    let (ap_l, ap_r) = (mean(lid.iter().map(|a| a.eval.ap50)), mean(rec.iter().map(|a| a.eval.ap50)));
    let (mad_l, mad_r) = (mean(lid.iter().map(|a| mean_mad(&a.eval))), mean(rec.iter().map(|a| mean_mad(&a.eval))));
    let elapsed: f64 = lid.iter().chain(rec).map(|a| minutes(a.elapsed)).sum();
    let per_seed: Vec<String> = lid
        .iter()
        .zip(rec)
        .map(|(l, r)| format!("{:.3}/{:.3} {:.4}/{:.4}", l.eval.ap50, r.eval.ap50, mean_mad(&l.eval), mean_mad(&r.eval)))
        .collect();
    Outcome {
        passed: ap_l >= ap_r && mad_l < mad_r && elapsed < DIRECTIONAL_MINUTES,
        detail: format!(
            "(a) AP-50 {ap_l:.3} vs {ap_r:.3}, (b) radiomics MAD {mad_l:.4} vs {mad_r:.4}; per seed lid/rec [{}], {elapsed:.1} min",
            per_seed.join(", ")
        ),
    }
}

fn cts_ablation(collab: &[Arm], simul: &[Arm]) -> Outcome {
    let (c, s) = (mean(collab.iter().map(|a| a.final_ap50)), mean(simul.iter().map(|a| a.final_ap50)));
    let elapsed: f64 = collab.iter().chain(simul).map(|a| minutes(a.elapsed)).sum();
    let per_seed: Vec<String> = collab.iter().zip(simul).map(|(a, b)| format!("{:.3}/{:.3}", a.final_ap50, b.final_ap50)).collect();
    Outcome {
        passed: c >= s && c.is_finite() && elapsed < DIRECTIONAL_MINUTES,
        detail: format!("final AP-50 collaborative {c:.3} vs simultaneous {s:.3}; per seed [{}], {elapsed:.1} min", per_seed.join(", ")),
    }
}

fn lidnet(args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_lidnet"))
        .args(args)
        .env_remove("RUST_LOG")
        .env_remove("LIDNET_RUN_DIR")
        .output()
        .expect("binary runs");
    out.status.success() && out.stderr.is_empty()
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let cfg = json!({
        "dataset": {
            "phantom": {
                "image_size": 32,
                "body_ellipse": {"center_row": 16.0, "center_col": 16.0, "semi_rows": 12.0, "semi_cols": 13.0},
                "n_lesions": [1, 2],
                "lesion_radius": [2.5, 3.5]
            },
            "n_train": 8,
            "n_test": 4,
            "path": p("data")
        },
        "train": {
            "t1": 6, "t2": 4, "t3": 2, "rounds": 2, "batch_size": 2, "eval_every": 4,
            "denoiser": {"width": 4},
            "detector": DetectorConfig::tiny(),
            "critic": {"channels": [2, 3, 4, 4]},
            "objective": {"top_k": 3}
        },
        "eval": {"detector_steps": 6, "overlays": 2}
    });
    std::fs::write(root.join("config.json"), cfg.to_string()).unwrap();
    let config = p("config.json");
    let mut ok = lidnet(&["simulate", "--config", &config])
        && lidnet(&["train", "--config", &config, "--role", "eval-detector", "--out", &p("evaldet")]);
    for run in ["a", "b"] {
        ok = ok
            && lidnet(&["train", "--config", &config, "--out", &p(run), "--seed", "9", "--variant", "gan"])
            && lidnet(&["eval", "--config", &config, "--out", &p(run), "--eval-detector", &p("evaldet/eval_detector")])
            && lidnet(&["report", "--out", &p(run)]);
    }
    let files = ["eval/metrics.csv", "eval/metrics.json", "report/table.md", "losses.csv", "ap_curve.csv"];
    let same = |f: &str| {
        let read = |run: &str| std::fs::read(Path::new(root).join(run).join(f)).ok();
        read("a").is_some() && read("a") == read("b")
    };
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    Outcome {
        passed: ok && differing.is_empty(),
        detail: if !ok {
            "pipeline did not complete".into()
        } else if differing.is_empty() {
            format!("two seeded gan runs, {} artifacts byte-identical", files.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    }
}

fn main() {
    // `cargo test -- <filter>` forwards its arguments; listing or a foreign filter skips the suite
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list" || (!a.starts_with('-') && !"acceptance".contains(a.as_str()))) {
        return;
    }
    let mut failures = Vec::new();
    report(1, "gradient suite", &gradient_suite(), &mut failures);
    report(2, "ROI to global reduction", &reduction_identity(), &mut failures);
    report(3, "metric oracles", &metric_oracles(), &mut failures);
    report(4, "schedule state machine", &state_machine(), &mut failures);
    let (sanity, bench) = detection_sanity();
    report(5, "desk detection sanity", &sanity, &mut failures);

    let lid: Vec<Arm> = SEEDS.iter().map(|&s| run_arm(&bench, &directional_config(s, LAMBDA))).collect();
    let rec: Vec<Arm> = SEEDS.iter().map(|&s| run_arm(&bench, &directional_config(s, 0.0))).collect();
    report(6, "directional LIDnet effect", &directional(&lid, &rec), &mut failures);

    let simul: Vec<Arm> = SEEDS
        .iter()
        .map(|&s| run_arm(&bench, &TrainConfig { strategy: Strategy::Simultaneous, ..directional_config(s, LAMBDA) }))
        .collect();
    report(7, "collaborative vs simultaneous", &cts_ablation(&lid, &simul), &mut failures);
    report(8, "reproducibility", &reproducibility(), &mut failures);

    if !failures.is_empty() {
        println!("acceptance: {} of 8 criteria failed: {failures:?}", failures.len());
        std::process::exit(1);
    }
    println!("acceptance: all 8 criteria passed");
}
