use std::fs;
use std::path::{Path, PathBuf};

use lidnet::boxes::Rect;
use lidnet::checkpoint;
use lidnet::dataset::{build_dataset, derive_seed, load_dataset, save_dataset, Dataset};
use lidnet::denoiser::Denoiser;
use lidnet::detector::{Detection, Detector, DetectorConfig, Proposal};
use lidnet::metrics::{denoise_images, evaluate_images, reports_to_csv, MetricReport, PSNR_CAP_DB};
use lidnet::phantom::{Annotation, Image};
use lidnet::rawio::{read_f32le, write_f32le};
use lidnet::trainer::{train_eval_detector, TrainConfig, TrainContext};
use lidnet::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Profile};
use crate::error::{CliError, CliResult};
use crate::render;
use crate::{Common, EvalArgs, ReportArgs, Role, SimulateArgs, TrainArgs};

pub const LOCK_FILE: &str = ".lidnet.lock";
pub const CONFIG_FILE: &str = "config.json";
const OVERLAY_SCALE: u32 = 6;

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another command; remove {} if no command is running",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Clears `path` under `--force`, refuses otherwise.
fn claim_output(path: &Path, force: bool) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(CliError::Io(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    let r = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
    r.map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable value");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    Ok(lidnet::rawio::read_json(path)?)
}

/// Config from `--config`, else the copy saved in the run directory, else the profile.
fn run_config(common: &Common, run: &Path) -> CliResult<ExperimentConfig> {
    let saved = run.join(CONFIG_FILE);
    match (&common.config, saved.exists()) {
        (Some(p), _) => ExperimentConfig::load(Some(p), common.profile),
        (None, true) => ExperimentConfig::load(Some(&saved), Profile::Desk),
        (None, false) => ExperimentConfig::load(None, common.profile),
    }
}

fn run_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_root())
}

fn load_data(path: Option<&PathBuf>, cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let dir = path.cloned().unwrap_or_else(|| cfg.dataset_dir());
    Ok(load_dataset(&dir)?)
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref(), args.common.profile)?;
    if let Some(s) = args.common.seed {
        cfg.dataset.phantom.rng_seed = s;
        cfg.dataset.simulation.rng_seed = derive_seed(s, u64::MAX);
    }
    cfg.dataset.n_train = args.n_train.unwrap_or(cfg.dataset.n_train);
    cfg.dataset.n_test = args.n_test.unwrap_or(cfg.dataset.n_test);
    cfg.validate()?;
    let out = args.common.out.clone().unwrap_or_else(|| cfg.dataset_dir());
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let _lock = RunLock::acquire(&parent)?;
    claim_output(&out, args.common.force)?;
    let d = &cfg.dataset;
    let ds = build_dataset(&d.phantom, &d.simulation, d.n_train, d.n_test)?;
    save_dataset(&ds, &out)?;
    println!(
        "simulated {} train + {} test samples ({}x{}, n0 = {}) into {}",
        ds.train.len(),
        ds.test.len(),
        ds.image_size,
        ds.image_size,
        d.simulation.n0,
        out.display()
    );
    println!("dataset checksum {}", ds.checksum());
    Ok(())
}

/// The trainer config for the NDCT-only evaluation detector.
pub fn eval_detector_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        t1: cfg.eval.detector_steps,
        seed: cfg.eval.detector_seed,
        ..cfg.train.clone()
    }
}

fn eval_detector_dir(cfg: &ExperimentConfig, run: &Path, flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| cfg.eval.detector_checkpoint.clone())
        .unwrap_or_else(|| run.join("eval_detector"))
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let c = &args.common;
    let mut cfg = ExperimentConfig::load(c.config.as_deref(), c.profile)?;
    if let Some(s) = args.strategy {
        cfg.train.strategy = s;
    }
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    if let Some(l) = args.lambda1 {
        cfg.train.objective.weights.lambda1 = l;
    }
    if let Some(l) = args.lambda2 {
        cfg.train.objective.weights.lambda2 = l;
    }
    if let Some(s) = c.seed {
        match args.role {
            Role::Lidnet => cfg.train.seed = s,
            Role::EvalDetector => cfg.eval.detector_seed = s,
        }
    }
    cfg.validate()?;
    let run = run_dir(c, &cfg);
    let _lock = RunLock::acquire(&run)?;
    let ds = load_data(args.data.as_ref(), &cfg)?;
    match args.role {
        Role::EvalDetector => {
            let dir = eval_detector_dir(&cfg, &run, None);
            let losses_path = run.join("eval_detector_losses.csv");
            claim_output(&dir, c.force)?;
            claim_output(&losses_path, c.force)?;
            let tc = eval_detector_config(&cfg);
            let (det, losses) = train_eval_detector::<f32>(&tc, &ds.train)?;
            let meta = serde_json::json!({ "role": "eval-detector", "detector": det.config, "seed": tc.seed });
            checkpoint::save(&dir, &det.params, None, tc.t1 as u64, meta)?;
            let mut csv = String::from("step,detection\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", i + 1));
            }
            write_text(&losses_path, &csv)?;
            println!(
                "trained evaluation detector on {} clean images for {} steps into {}",
                ds.train.len(),
                tc.t1,
                dir.display()
            );
        }
        Role::Lidnet => {
            let ck = run.join("checkpoints");
            claim_output(&ck, c.force)?;
            for f in [CONFIG_FILE, "losses.csv", "ap_curve.csv", "phases.json", "trace.txt"] {
                claim_output(&run.join(f), c.force)?;
            }
            write_json(&run.join(CONFIG_FILE), &cfg)?;
            let ctx = TrainContext {
                train: &ds.train,
                eval: &ds.test,
                eval_config: &cfg.eval.metrics,
                checkpoint_dir: Some(&ck),
            };
            let state = lidnet::trainer::train::<f32>(&cfg.train, &ctx)?;
            write_text(&run.join("losses.csv"), &state.logs.losses_csv())?;
            write_text(&run.join("ap_curve.csv"), &state.logs.ap_csv())?;
            write_json(&run.join("phases.json"), &state.logs.phases)?;
            write_text(&run.join("trace.txt"), &format!("{}\n", state.logs.trace_string()))?;
            let last = state.logs.ap_curve.last().map_or(f64::NAN, |p| p.ap50);
            println!(
                "trained {:?}/{:?} for {} steps, co-trained AP-50 {last:.4}, into {}",
                cfg.train.strategy,
                cfg.train.variant,
                state.step,
                run.display()
            );
        }
    }
    Ok(())
}

fn require_checkpoint(dir: &Path) -> CliResult<checkpoint::Checkpoint> {
    if !dir.join("index.json").exists() {
        return Err(CliError::MissingCheckpoint(dir.to_path_buf()));
    }
    Ok(checkpoint::load(dir)?)
}

pub fn load_eval_detector(dir: &Path) -> CliResult<Detector<f32>> {
    let ck = require_checkpoint(dir)?;
    let config: DetectorConfig = serde_json::from_value(ck.meta["detector"].clone())
        .map_err(|e| CliError::Io(format!("{}: detector config in checkpoint meta: {e}", dir.display())))?;
    let mut det = Detector::new(config, 0)?;
    ck.restore_into(&mut det.params)?;
    Ok(det)
}

/// A detection with its best IoU against the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub detection: Detection,
    pub iou: f64,
}

/// Everything `report` needs to draw one test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayRecord {
    pub id: String,
    /// Denoised image relative to the eval directory.
    pub image: String,
    pub image_size: usize,
    pub ground_truth: Vec<Annotation>,
    pub proposal_source: String,
    pub proposals: Vec<Proposal>,
    pub detections: Vec<ScoredDetection>,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let c = &args.common;
    let provisional = ExperimentConfig::load(c.config.as_deref(), c.profile)?;
    let run = run_dir(c, &provisional);
    let cfg = run_config(c, &run)?;
    let ck_dir = args.checkpoint.clone().unwrap_or_else(|| run.join("checkpoints").join("final"));
    let det_dir = eval_detector_dir(&cfg, &run, args.eval_detector.as_ref());
    let _lock = RunLock::acquire(&run)?;
    let eval_det = load_eval_detector(&det_dir)?;
    let ck = require_checkpoint(&ck_dir.join("denoiser"))?;
    let mut denoiser = Denoiser::<f32>::new(cfg.train.denoiser.clone(), 0)?;
    ck.restore_into(&mut denoiser.params)?;
    let ds = load_data(args.data.as_ref(), &cfg)?;
    let out = run.join("eval");
    claim_output(&out, c.force)?;

    let m = &cfg.eval.metrics;
    let ndct: Vec<Image> = ds.test.iter().map(|s| s.ndct.clone()).collect();
    let ldct: Vec<Image> = ds.test.iter().map(|s| s.ldct.clone()).collect();
    let anns: Vec<Vec<Annotation>> = ds.test.iter().map(|s| s.annotations.clone()).collect();
    let denoised = denoise_images(&denoiser, &ldct, m.batch_size)?;
    let rows = vec![
        evaluate_images("NDCT-control", &ndct, &ndct, &anns, &eval_det, m)?,
        evaluate_images("LDCT-control", &ldct, &ndct, &anns, &eval_det, m)?,
        evaluate_images(&args.name, &denoised, &ndct, &anns, &eval_det, m)?,
    ];

    // proposals come from the co-trained detector when the checkpoint has one
    let co_dir = ck_dir.join("detector");
    let (proposer, source) = if co_dir.join("index.json").exists() {
        let mut d = Detector::<f32>::new(cfg.train.detector.clone(), 0)?;
        checkpoint::load(&co_dir)?.restore_into(&mut d.params)?;
        (d, "co-trained")
    } else {
        (eval_det.clone(), "eval-detector")
    };
    let n_overlay = cfg.eval.overlays.min(ds.test.len());
    let mut overlays = Vec::new();
    fs::create_dir_all(out.join("denoised")).map_err(|e| CliError::io(&out, e))?;
    for (i, s) in ds.test.iter().take(n_overlay).enumerate() {
        let size = ds.image_size;
        let x = denoised[i].clone().reshape(&[1, 1, size, size]);
        let proposals = proposer.top_proposals(&x, cfg.train.objective.top_k)?.remove(0);
        let found = eval_det.infer(&x, m.score_thresh, m.nms_iou)?.remove(0);
        let detections = found
            .into_iter()
            .map(|d| ScoredDetection {
                iou: s
                    .annotations
                    .iter()
                    .map(|a| Rect::from_annotation(a).iou(&d.rect))
                    .fold(0.0, f64::max),
                detection: d,
            })
            .collect();
        let rel = format!("denoised/{}.f32", s.id);
        write_f32le(&out.join(&rel), denoised[i].data())?;
        overlays.push(OverlayRecord {
            id: s.id.clone(),
            image: rel,
            image_size: size,
            ground_truth: s.annotations.clone(),
            proposal_source: source.into(),
            proposals,
            detections,
        });
    }
    let csv = reports_to_csv(&rows);
    write_text(&out.join("metrics.csv"), &csv)?;
    write_json(&out.join("metrics.json"), &rows)?;
    write_json(&out.join("overlays.json"), &overlays)?;
    print!("{csv}");
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureRecord {
    pub file: String,
    pub kind: String,
    pub rectangles: usize,
}

/// Parses an `ap_curve.csv`, insisting on strictly increasing steps.
pub fn read_ap_curve(path: &Path) -> CliResult<Vec<(f64, f64, f64)>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: &str| CliError::Io(format!("{}: malformed line {line:?}", path.display()));
    let mut pts: Vec<(f64, f64, f64)> = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let p = (num(f[0])?, num(f[2])?, num(f[3])?);
        if pts.last().is_some_and(|q| q.0 >= p.0) {
            return Err(CliError::Io(format!("{}: steps are not increasing", path.display())));
        }
        pts.push(p);
    }
    Ok(pts)
}

/// Markdown table with AP and SSIM in percent, as in published tables.
pub fn markdown_table(rows: &[MetricReport]) -> String {
    let mut s = String::from(
        "| Method | AP-50 | AP-75 | Correlation | Homogeneity | Energy | PSNR | SSIM | RMSE |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.4} | {:.4} | {:.4} | {:.2} | {:.2} | {:.4} |\n",
            r.name,
            100.0 * r.ap50,
            100.0 * r.ap75,
            r.correlation,
            r.homogeneity,
            r.energy,
            r.psnr,
            100.0 * r.ssim,
            r.rmse
        ));
    }
    s.push_str("\nAP-50, AP-75 and SSIM are percentages. Radiomics columns are mean absolute differences to NDCT.\n");
    for r in rows.iter().filter(|r| r.psnr_capped > 0) {
        s.push_str(&format!(
            "PSNR for {} is capped at {PSNR_CAP_DB} dB on {} of {} images that equal NDCT.\n",
            r.name, r.psnr_capped, r.n_images
        ));
    }
    s
}

fn save_png(img: &image::RgbImage, path: &Path) -> CliResult<()> {
    img.save(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let c = &args.common;
    let provisional = ExperimentConfig::load(c.config.as_deref(), c.profile)?;
    let run = run_dir(c, &provisional);
    let eval_dir = run.join("eval");
    let rows: Vec<MetricReport> = read_json(&eval_dir.join("metrics.json"))?;
    let overlays: Vec<OverlayRecord> = read_json(&eval_dir.join("overlays.json"))?;
    let mut curves = vec![(run.clone(), read_ap_curve(&run.join("ap_curve.csv"))?)];
    for other in &args.compare {
        curves.push((other.clone(), read_ap_curve(&other.join("ap_curve.csv"))?));
    }
    let _lock = RunLock::acquire(&run)?;
    let out = run.join("report");
    claim_output(&out, c.force)?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    write_text(&out.join("table.md"), &markdown_table(&rows))?;
    let mut figures = Vec::new();
    let label = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut series = Vec::new();
    for (dir, pts) in &curves {
        series.push((format!("{} AP-50", label(dir)), pts.iter().map(|p| (p.0, p.1)).collect()));
        if curves.len() == 1 {
            series.push((format!("{} AP-75", label(dir)), pts.iter().map(|p| (p.0, p.2)).collect()));
        }
    }
    save_png(&render::plot_curves(&series, 480, 300), &out.join("ap_curve.png"))?;
    let mut legend = String::from("series,color\n");
    for (i, (name, _)) in series.iter().enumerate() {
        let [r, g, b] = render::SERIES[i % render::SERIES.len()].0;
        legend.push_str(&format!("{name},#{r:02x}{g:02x}{b:02x}\n"));
    }
    write_text(&out.join("ap_curve_legend.csv"), &legend)?;
    figures.push(FigureRecord {
        file: "ap_curve.png".into(),
        kind: "ap-curve".into(),
        rectangles: 0,
    });

    for o in &overlays {
        let n = o.image_size;
        let img = Tensor::from_vec(&[n, n], read_f32le(&eval_dir.join(&o.image), n * n)?);
        let base = render::grayscale(&img, OVERLAY_SCALE);
        let draw_truth = |canvas: &mut image::RgbImage| {
            for a in &o.ground_truth {
                render::rectangle(canvas, &Rect::from_annotation(a), OVERLAY_SCALE, render::GROUND_TRUTH, 3);
            }
        };
        let mut props = base.clone();
        draw_truth(&mut props);
        for p in &o.proposals {
            render::labelled(&mut props, &p.rect, OVERLAY_SCALE, render::PROPOSAL, p.score);
        }
        let file = format!("overlay-{}-proposals.png", o.id);
        save_png(&props, &out.join(&file))?;
        figures.push(FigureRecord {
            file,
            kind: "proposals".into(),
            rectangles: o.proposals.len(),
        });
        let mut dets = base;
        draw_truth(&mut dets);
        for d in &o.detections {
            render::labelled(&mut dets, &d.detection.rect, OVERLAY_SCALE, render::DETECTION, d.iou);
        }
        let file = format!("overlay-{}-detections.png", o.id);
        save_png(&dets, &out.join(&file))?;
        figures.push(FigureRecord {
            file,
            kind: "detections".into(),
            rectangles: o.detections.len(),
        });
    }
    write_json(&out.join("figures.json"), &figures)?;
    println!("wrote {} figures and table.md into {}", figures.len(), out.display());
    Ok(())
}
