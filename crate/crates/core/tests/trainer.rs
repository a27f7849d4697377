use lidnet::dataset::{build_dataset, Dataset};
use lidnet::denoiser::{CriticConfig, DenoiserConfig, Variant};
use lidnet::detector::DetectorConfig;
use lidnet::metrics::EvalConfig;
use lidnet::phantom::{Ellipse, PhantomSpec, SimulationConfig};
use lidnet::trainer::*;
use lidnet::Error;

fn small_dataset() -> Dataset {
    let spec = PhantomSpec {
        image_size: 32,
        body_ellipse: Ellipse {
            center_row: 16.0,
            center_col: 16.0,
            semi_rows: 12.0,
            semi_cols: 13.0,
        },
        n_lesions: (1, 2),
        lesion_radius: (2.5, 3.5),
        ..PhantomSpec::default()
    };
    build_dataset(&spec, &SimulationConfig::default(), 6, 3).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        t1: 2,
        t2: 2,
        t3: 1,
        rounds: 2,
        batch_size: 2,
        eval_every: 0,
        denoiser: DenoiserConfig { width: 4 },
        detector: DetectorConfig::tiny(),
        critic: CriticConfig {
            channels: [2, 3, 4, 4],
            ..CriticConfig::default()
        },
        seed: 7,
        ..TrainConfig::desk()
    }
}

fn run(cfg: &TrainConfig, ds: &Dataset) -> lidnet::Result<TrainState<f32>> {
    let ec = EvalConfig::default();
    let ctx = TrainContext {
        train: &ds.train,
        eval: &ds.test,
        eval_config: &ec,
        checkpoint_dir: None,
    };
    train(cfg, &ctx)
}

#[test]
fn collaborative_trace_unrolls_the_schedule() {
    let cfg = small_config();
    let codes: String = TrainSchedule::trace(&cfg).iter().map(|s| s.phase.code()).collect();
    assert_eq!(codes, "PPDDTDDT");
    let st = run(&cfg, &small_dataset()).unwrap();
    assert_eq!(st.logs.trace_string(), "PPDDTDDT");
    assert_eq!(st.step, 8);
}

#[test]
fn frozen_sets_are_bit_identical_within_their_phase() {
    for variant in [Variant::Cnn, Variant::Gan] {
        let cfg = TrainConfig { variant, ..small_config() };
        let st = run(&cfg, &small_dataset()).unwrap();
        let steps: Vec<(Phase, usize)> = st.logs.phases.iter().map(|r| (r.phase, r.steps)).collect();
        assert_eq!(
            steps,
            vec![
                (Phase::PretrainDet, 2),
                (Phase::Denoiser, 2),
                (Phase::Detector, 1),
                (Phase::Denoiser, 2),
                (Phase::Detector, 1)
            ]
        );
        for r in &st.logs.phases {
            match r.phase {
                Phase::Denoiser => {
                    assert_eq!(r.detector_before, r.detector_after);
                    assert_ne!(r.denoiser_before, r.denoiser_after);
                }
                _ => {
                    assert_eq!(r.denoiser_before, r.denoiser_after);
                    assert_ne!(r.detector_before, r.detector_after);
                }
            }
        }
    }
}

#[test]
fn zero_length_phases_are_no_ops() {
    let ds = small_dataset();
    let cfg = TrainConfig { t1: 0, t2: 0, t3: 0, ..small_config() };
    let st = run(&cfg, &ds).unwrap();
    assert_eq!(st.step, 0);
    let fresh = TrainState::<f32>::new(&cfg, ds.train.len(), 32).unwrap();
    assert_eq!(st.denoiser.params.checksum(), fresh.denoiser.params.checksum());
    assert_eq!(st.detector.params.checksum(), fresh.detector.params.checksum());
}

#[test]
fn detector_phase_consumes_generator_output() {
    let cfg = TrainConfig { t3: 3, ..small_config() };
    let st = run(&cfg, &small_dataset()).unwrap();
    assert_eq!(st.logs.dataflow.len(), 2);
    for c in &st.logs.dataflow {
        assert_eq!(c.input, c.expected);
    }
}

#[test]
fn simultaneous_budget_matches_and_never_freezes() {
    let cfg = TrainConfig {
        strategy: Strategy::Simultaneous,
        ..small_config()
    };
    let st = run(&cfg, &small_dataset()).unwrap();
    assert_eq!(st.step as usize, cfg.total_steps());
    assert_eq!(st.logs.trace_string(), "S".repeat(8));
    assert_eq!(st.logs.phases.len(), 1);
    let r = &st.logs.phases[0];
    assert_ne!(r.denoiser_before, r.denoiser_after);
    assert_ne!(r.detector_before, r.detector_after);
    assert!(TrainSchedule::trace(&cfg).iter().all(|s| s.frozen() == (false, false)));
}

#[test]
fn same_seed_gives_identical_loss_traces() {
    let ds = small_dataset();
    let cfg = TrainConfig { variant: Variant::Gan, eval_every: 4, ..small_config() };
    let a = run(&cfg, &ds).unwrap();
    let b = run(&cfg, &ds).unwrap();
    assert_eq!(a.logs.losses_csv(), b.logs.losses_csv());
    assert_eq!(a.logs.ap_csv(), b.logs.ap_csv());
    assert_eq!(a.denoiser.params.checksum(), b.denoiser.params.checksum());
    let c = run(&TrainConfig { seed: 8, ..cfg }, &ds).unwrap();
    assert_ne!(a.logs.losses_csv(), c.logs.losses_csv());
}

#[test]
fn ap_curve_has_points_at_the_cadence_and_the_end() {
    let cfg = TrainConfig { eval_every: 3, ..small_config() };
    let st = run(&cfg, &small_dataset()).unwrap();
    let steps: Vec<u64> = st.logs.ap_curve.iter().map(|p| p.step).collect();
    assert_eq!(steps, vec![3, 6, 8]);
    assert!(st.logs.ap_csv().starts_with("step,phase,ap50,ap75\n"));
}

#[test]
fn divergence_reports_step_and_phase() {
    let cfg = TrainConfig {
        lr_generator: 1e30,
        t2: 4,
        ..small_config()
    };
    match run(&cfg, &small_dataset()) {
        Err(Error::Training { step, phase, .. }) => {
            assert!(step > 2);
            assert_eq!(phase, "denoiser");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("diverging run finished"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = small_dataset();
    for cfg in [
        TrainConfig { rounds: 0, ..small_config() },
        TrainConfig { batch_size: 0, ..small_config() },
        TrainConfig { lr_detector: -1.0, ..small_config() },
    ] {
        assert!(matches!(run(&cfg, &ds), Err(Error::Config(_))));
    }
}

#[test]
fn checkpoints_land_at_phase_boundaries() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let ec = EvalConfig::default();
    let ctx = TrainContext {
        train: &ds.train,
        eval: &[],
        eval_config: &ec,
        checkpoint_dir: Some(dir.path()),
    };
    let cfg = TrainConfig { variant: Variant::Gan, ..small_config() };
    let st = train::<f32>(&cfg, &ctx).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "00-pretrain_det-r0",
            "01-denoiser-r0",
            "02-detector-r0",
            "03-denoiser-r1",
            "04-detector-r1",
            "final"
        ]
    );
    let ck = lidnet::checkpoint::load(&dir.path().join("final/denoiser")).unwrap();
    assert_eq!(ck.step, st.step);
    assert_eq!(ck.params.checksum(), st.denoiser.params.checksum());
    assert!(dir.path().join("final/critic").is_dir());
}
