//! Image-quality, texture and detection metrics.

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::boxes::Rect;
use crate::dataset::CtSample;
use crate::denoiser::Denoiser;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::phantom::{Annotation, Image};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 200.0;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

pub fn rmse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are identical and `db` is [`PSNR_CAP_DB`].
    pub capped: bool,
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, data_range: f64) -> Result<Psnr> {
    if !(data_range > 0.0) {
        return Err(Error::Contract(format!("data_range must be positive, got {data_range}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, capped: true });
    }
    let db = 10.0 * (data_range * data_range / m).log10();
    Ok(Psnr { db: db.min(PSNR_CAP_DB), capped: db >= PSNR_CAP_DB })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a row-major `rows x cols` plane.
fn filter_valid(x: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (or, oc) = (rows - k + 1, cols - k + 1);
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..k).map(|j| taps[j] * x[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..k).map(|i| taps[i] * tmp[(r + i) * oc + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained windows of 2-D images.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Contract(format!("ssim expects a 2-D image, got {s:?}")));
    }
    let (rows, cols) = (s[0], s[1]);
    if cfg.window == 0 || cfg.window > rows || cfg.window > cols {
        return Err(Error::Contract(format!(
            "ssim window {} larger than image {rows}x{cols}",
            cfg.window
        )));
    }
    let x: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let f = |v: &[f64]| filter_valid(v, rows, cols, &taps);
    let (mx, my, sxx, syy, sxy) = (f(&x), f(&y), f(&xx), f(&yy), f(&xy));
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlcmAngle {
    #[serde(rename = "0")]
    Deg0,
    #[serde(rename = "45")]
    Deg45,
    #[serde(rename = "90")]
    Deg90,
    #[serde(rename = "135")]
    Deg135,
}

impl GlcmAngle {
    /// Unit `(row, col)` step.
    pub fn step(self) -> (isize, isize) {
        match self {
            GlcmAngle::Deg0 => (0, 1),
            GlcmAngle::Deg45 => (-1, 1),
            GlcmAngle::Deg90 => (-1, 0),
            GlcmAngle::Deg135 => (-1, -1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlcmConfig {
    pub n_levels: usize,
    pub distances: Vec<usize>,
    pub angles: Vec<GlcmAngle>,
    pub symmetric: bool,
    pub normalize: bool,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        Self {
            n_levels: 32,
            distances: vec![1],
            angles: vec![GlcmAngle::Deg0, GlcmAngle::Deg45, GlcmAngle::Deg90, GlcmAngle::Deg135],
            symmetric: true,
            normalize: true,
        }
    }
}

impl GlcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 2 {
            return Err(Error::Config("GLCM needs at least 2 gray levels".into()));
        }
        if self.distances.is_empty() || self.angles.is_empty() || self.distances.contains(&0) {
            return Err(Error::Config("GLCM needs at least one positive distance and one angle".into()));
        }
        Ok(())
    }
}

/// Row-major 2-D region of interest.
#[derive(Clone, Debug, PartialEq)]
pub struct Roi {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl Roi {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(rows * cols, pixels.len(), "ROI size mismatch");
        Self { rows, cols, pixels }
    }

    pub fn crop(image: &Image, a: &Annotation) -> Self {
        let w = image.shape()[1];
        let pixels = (a.row..a.row + a.height)
            .flat_map(|r| (a.col..a.col + a.width).map(move |c| (r, c)))
            .map(|(r, c)| f64::from(image.data()[r * w + c]))
            .collect();
        Self::new(a.height, a.width, pixels)
    }

    /// Min-max binning into `levels` gray levels; constant ROIs map to 0.
    pub fn quantize(&self, levels: usize) -> Vec<usize> {
        let lo = self.pixels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return vec![0; self.pixels.len()];
        }
        self.pixels
            .iter()
            .map(|&v| (((v - lo) / (hi - lo) * levels as f64) as usize).min(levels - 1))
            .collect()
    }
}

/// Co-occurrence matrix (`n_levels²`, row-major) for one offset.
pub fn glcm(roi: &Roi, cfg: &GlcmConfig, distance: usize, angle: GlcmAngle) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (sr, sc) = angle.step();
    let (dr, dc) = (sr * distance as isize, sc * distance as isize);
    if dr.unsigned_abs() >= roi.rows || dc.unsigned_abs() >= roi.cols {
        return Err(Error::Data(format!(
            "ROI {}x{} too small for offset ({dr}, {dc})",
            roi.rows, roi.cols
        )));
    }
    let q = roi.quantize(cfg.n_levels);
    let n = cfg.n_levels;
    let mut m = vec![0.0; n * n];
    for r in 0..roi.rows as isize {
        for c in 0..roi.cols as isize {
            let (r2, c2) = (r + dr, c + dc);
            if r2 < 0 || c2 < 0 || r2 >= roi.rows as isize || c2 >= roi.cols as isize {
                continue;
            }
            let i = q[r as usize * roi.cols + c as usize];
            let j = q[r2 as usize * roi.cols + c2 as usize];
            m[i * n + j] += 1.0;
            if cfg.symmetric {
                m[j * n + i] += 1.0;
            }
        }
    }
    if cfg.normalize {
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= s);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadiomicsFeatures {
    pub correlation: f64,
    pub homogeneity: f64,
    pub energy: f64,
    /// Some offset had zero marginal variance; its correlation was taken as 1.
    pub degenerate_correlation: bool,
}

/// Features of one normalised co-occurrence matrix.
pub fn glcm_features(p: &[f64], n: usize) -> RadiomicsFeatures {
    let mut energy = 0.0;
    let mut homogeneity = 0.0;
    let (mut mi, mut mj) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = p[i * n + j];
            energy += v * v;
            homogeneity += v / (1.0 + (i as f64 - j as f64).abs());
            mi += i as f64 * v;
            mj += j as f64 * v;
        }
    }
    let (mut vi, mut vj, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = p[i * n + j];
            let (a, b) = (i as f64 - mi, j as f64 - mj);
            vi += a * a * v;
            vj += b * b * v;
            cov += a * b * v;
        }
    }
    let denom = (vi * vj).sqrt();
    let degenerate = denom <= 1e-15;
    RadiomicsFeatures {
        correlation: if degenerate { 1.0 } else { cov / denom },
        homogeneity,
        energy,
        degenerate_correlation: degenerate,
    }
}

/// Features averaged over every configured (distance, angle) pair.
pub fn radiomics_features(roi: &Roi, cfg: &GlcmConfig) -> Result<RadiomicsFeatures> {
    let norm = GlcmConfig { normalize: true, ..cfg.clone() };
    let mut acc = RadiomicsFeatures::default();
    let mut count = 0.0;
    for &d in &cfg.distances {
        for &a in &cfg.angles {
            let f = glcm_features(&glcm(roi, &norm, d, a)?, cfg.n_levels);
            acc.correlation += f.correlation;
            acc.homogeneity += f.homogeneity;
            acc.energy += f.energy;
            acc.degenerate_correlation |= f.degenerate_correlation;
            count += 1.0;
        }
    }
    acc.correlation /= count;
    acc.homogeneity /= count;
    acc.energy /= count;
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoiMad {
    pub correlation: f64,
    pub homogeneity: f64,
    pub energy: f64,
    pub n_rois: usize,
}

impl RoiMad {
    pub fn mean(&self) -> f64 {
        (self.correlation + self.homogeneity + self.energy) / 3.0
    }
}

/// Mean absolute difference of each radiomics feature over all boxes.
pub fn roi_feature_mad(
    denoised: &[Image],
    ndct: &[Image],
    boxes: &[Vec<Annotation>],
    cfg: &GlcmConfig,
) -> Result<RoiMad> {
    if denoised.len() != ndct.len() || ndct.len() != boxes.len() {
        return Err(Error::Contract("denoised, ndct and boxes must pair up".into()));
    }
    let mut mad = RoiMad::default();
    for ((d, y), bs) in denoised.iter().zip(ndct).zip(boxes) {
        same_shape(d, y)?;
        for b in bs {
            let fd = radiomics_features(&Roi::crop(d, b), cfg)?;
            let fy = radiomics_features(&Roi::crop(y, b), cfg)?;
            mad.correlation += (fd.correlation - fy.correlation).abs();
            mad.homogeneity += (fd.homogeneity - fy.homogeneity).abs();
            mad.energy += (fd.energy - fy.energy).abs();
            mad.n_rois += 1;
        }
    }
    if mad.n_rois == 0 {
        return Err(Error::Data("no ROI boxes to compare".into()));
    }
    let n = mad.n_rois as f64;
    mad.correlation /= n;
    mad.homogeneity /= n;
    mad.energy /= n;
    Ok(mad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub rect: Rect,
    pub label: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub image: usize,
    pub rect: Rect,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoints,
    ElevenPoint,
}

/// True-positive flags of score-ranked detections (ties keep input order).
/// Each detection claims the unmatched same-label ground truth of highest IoU,
/// provided that IoU reaches `threshold`.
pub fn match_detections(dets: &[ScoredBox], gts: &[TruthBox], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, t) in gts.iter().enumerate() {
                if used[g] || t.image != d.image || t.label != d.label {
                    continue;
                }
                let iou = d.rect.iou(&t.rect);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the interpolated precision-recall curve of a ranked list.
pub fn ap_from_ranked<N>(tp: &[bool], n_gt: usize, mode: Interpolation) -> N
where
    N: Num + Clone + PartialOrd + FromPrimitive,
{
    let num = |k: usize| N::from_usize(k).expect("count representable");
    if n_gt == 0 {
        return N::zero();
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(num(hits) / num(n_gt));
        precision.push(num(hits) / num(k + 1));
    }
    // precision envelope from the right
    let mut env = precision.clone();
    for k in (0..env.len().saturating_sub(1)).rev() {
        if env[k + 1] > env[k] {
            env[k] = env[k + 1].clone();
        }
    }
    match mode {
        Interpolation::AllPoints => {
            let mut ap = N::zero();
            let mut prev = N::zero();
            for k in 0..recall.len() {
                if recall[k] > prev {
                    ap = ap + (recall[k].clone() - prev) * env[k].clone();
                    prev = recall[k].clone();
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut ap = N::zero();
            for t in 0..=10 {
                let level = num(t) / num(10);
                if let Some(k) = recall.iter().position(|r| *r >= level) {
                    ap = ap + env[k].clone();
                }
            }
            ap / num(11)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// No ground truth existed for any evaluated class.
    pub no_ground_truth: bool,
}

/// Mean over labels present in the ground truth of per-label AP.
pub fn average_precision(
    dets: &[ScoredBox],
    gts: &[TruthBox],
    threshold: f64,
    mode: Interpolation,
) -> ApResult {
    let mut labels: Vec<usize> = gts.iter().map(|g| g.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return ApResult { ap: 0.0, no_ground_truth: true };
    }
    let mut total = 0.0;
    for &l in &labels {
        let d: Vec<ScoredBox> = dets.iter().filter(|d| d.label == l).copied().collect();
        let g: Vec<TruthBox> = gts.iter().filter(|g| g.label == l).copied().collect();
        let tp = match_detections(&d, &g, threshold);
        total += ap_from_ranked::<f64>(&tp, g.len(), mode);
    }
    ApResult {
        ap: total / labels.len() as f64,
        no_ground_truth: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub interpolation: Interpolation,
    pub ssim: SsimConfig,
    pub glcm: GlcmConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.3,
            interpolation: Interpolation::AllPoints,
            ssim: SsimConfig::default(),
            glcm: GlcmConfig::default(),
            batch_size: 8,
        }
    }
}

/// AP-50 and AP-75 of `detector` on `images` (each `[H, W]`).
pub fn detection_ap<T: Scalar>(
    detector: &Detector<T>,
    images: &[Image],
    annotations: &[Vec<Annotation>],
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    if images.len() != annotations.len() {
        return Err(Error::Contract("images and annotations must pair up".into()));
    }
    let mut dets = Vec::new();
    for (start, chunk) in images.chunks(cfg.batch_size.max(1)).enumerate() {
        let s = chunk[0].shape();
        let x = Tensor::stack(chunk).reshape(&[chunk.len(), 1, s[0], s[1]]).cast::<T>();
        for (k, found) in detector.infer(&x, cfg.score_thresh, cfg.nms_iou)?.into_iter().enumerate() {
            let image = start * cfg.batch_size.max(1) + k;
            dets.extend(found.into_iter().map(|d| ScoredBox {
                image,
                rect: d.rect,
                label: d.label,
                score: d.score,
            }));
        }
    }
    let gts: Vec<TruthBox> = annotations
        .iter()
        .enumerate()
        .flat_map(|(image, anns)| {
            anns.iter().map(move |a| TruthBox {
                image,
                rect: Rect::from_annotation(a),
                label: a.label,
            })
        })
        .collect();
    let ap50 = average_precision(&dets, &gts, 0.5, cfg.interpolation);
    let ap75 = average_precision(&dets, &gts, 0.75, cfg.interpolation);
    Ok((ap50.ap, ap75.ap))
}

/// One row of the evaluation table. SSIM is stored in [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub ap50: f64,
    pub ap75: f64,
    pub correlation: f64,
    pub homogeneity: f64,
    pub energy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// Images whose PSNR hit the cap.
    pub psnr_capped: usize,
    pub n_images: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "name,AP-50,AP-75,Correlation,Homogeneity,Energy,PSNR,SSIM,RMSE";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.name,
            self.ap50,
            self.ap75,
            self.correlation,
            self.homogeneity,
            self.energy,
            self.psnr,
            self.ssim,
            self.rmse
        )
    }

    /// Mean radiomics MAD over the three features.
    pub fn radiomics_mad(&self) -> f64 {
        (self.correlation + self.homogeneity + self.energy) / 3.0
    }
}

pub fn reports_to_csv(rows: &[MetricReport]) -> String {
    let mut s = String::from(MetricReport::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Scores already-denoised `images` against the clean references: detection
/// through the frozen `eval_detector`, radiomics on the annotated boxes, and
/// per-image PSNR/SSIM/RMSE averaged over the set.
pub fn evaluate_images<T: Scalar>(
    name: &str,
    images: &[Image],
    ndct: &[Image],
    annotations: &[Vec<Annotation>],
    eval_detector: &Detector<T>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if images.is_empty() || images.len() != ndct.len() {
        return Err(Error::Contract("need equally many denoised and reference images".into()));
    }
    let (ap50, ap75) = detection_ap(eval_detector, images, annotations, cfg)?;
    let mad = roi_feature_mad(images, ndct, annotations, &cfg.glcm)?;
    let (mut p, mut s, mut r, mut capped) = (0.0, 0.0, 0.0, 0);
    for (a, b) in images.iter().zip(ndct) {
        let q = psnr(a, b, cfg.ssim.data_range)?;
        p += q.db;
        capped += q.capped as usize;
        s += ssim(a, b, &cfg.ssim)?;
        r += rmse(a, b)?;
    }
    let n = images.len() as f64;
    Ok(MetricReport {
        name: name.to_string(),
        ap50,
        ap75,
        correlation: mad.correlation,
        homogeneity: mad.homogeneity,
        energy: mad.energy,
        psnr: p / n,
        ssim: s / n,
        rmse: r / n,
        psnr_capped: capped,
        n_images: images.len(),
    })
}

/// Denoises the LDCT test inputs with `denoiser` and scores the result.
pub fn evaluate<T: Scalar, D: Scalar>(
    name: &str,
    denoiser: &Denoiser<D>,
    eval_detector: &Detector<T>,
    test: &[CtSample],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let ldct: Vec<Image> = test.iter().map(|s| s.ldct.clone()).collect();
    let images = denoise_images(denoiser, &ldct, cfg.batch_size)?;
    let ndct: Vec<Image> = test.iter().map(|s| s.ndct.clone()).collect();
    let anns: Vec<Vec<Annotation>> = test.iter().map(|s| s.annotations.clone()).collect();
    evaluate_images(name, &images, &ndct, &anns, eval_detector, cfg)
}

/// Runs `denoiser` over `[H, W]` images in batches.
pub fn denoise_images<D: Scalar>(denoiser: &Denoiser<D>, images: &[Image], batch: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let y = denoiser.denoise(&Tensor::stack(chunk).cast::<D>())?.cast::<f32>();
        out.extend((0..chunk.len()).map(|i| y.index_first(i)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v)
    }

    #[test]
    fn psnr_and_rmse_closed_forms() {
        let a = img(2, 2, vec![0.1; 4]);
        let b = img(2, 2, vec![0.2; 4]);
        assert!((rmse(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr(&a, &b, 1.0).unwrap().db - 20.0).abs() < 1e-9);
        let same = psnr(&a, &a, 1.0).unwrap();
        assert!(same.capped && same.db == PSNR_CAP_DB);
        let checker = img(2, 2, vec![0.5, -0.5, -0.5, 0.5]);
        let zeros = img(2, 2, vec![0.0; 4]);
        let p = psnr(&checker, &zeros, 1.0).unwrap().db;
        assert!((p - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constant_images() {
        let a = img(16, 16, vec![0.5; 256]);
        let b = img(16, 16, vec![0.6; 256]);
        let expect = (2.0 * 0.3 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert!((ssim(&a, &b, &SsimConfig::default()).unwrap() - expect).abs() < 1e-9);
        assert!((ssim(&a, &a, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_window_too_large() {
        let a = img(8, 8, vec![0.0; 64]);
        assert!(matches!(ssim(&a, &a, &SsimConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn two_by_two_glcm_by_hand() {
        let roi = Roi::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let cfg = GlcmConfig {
            n_levels: 2,
            angles: vec![GlcmAngle::Deg0],
            ..GlcmConfig::default()
        };
        let p = glcm(&roi, &cfg, 1, GlcmAngle::Deg0).unwrap();
        assert_eq!(p, vec![0.5, 0.0, 0.0, 0.5]);
        let f = radiomics_features(&roi, &cfg).unwrap();
        assert!((f.energy - 0.5).abs() < 1e-15);
        assert!((f.homogeneity - 1.0).abs() < 1e-15);
        assert!((f.correlation - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_roi_is_degenerate() {
        let roi = Roi::new(3, 3, vec![0.4; 9]);
        let f = radiomics_features(&roi, &GlcmConfig::default()).unwrap();
        assert_eq!((f.energy, f.homogeneity, f.correlation), (1.0, 1.0, 1.0));
        assert!(f.degenerate_correlation);
    }

    #[test]
    fn offset_larger_than_roi_is_reported() {
        let roi = Roi::new(1, 4, vec![0.0, 1.0, 0.0, 1.0]);
        let err = glcm(&roi, &GlcmConfig::default(), 1, GlcmAngle::Deg90).unwrap_err();
        assert!(err.to_string().contains("offset (-1, 0)"), "{err}");
    }

    #[test]
    fn single_pair_ap() {
        let gt = TruthBox { image: 0, rect: Rect::from_rcwh(0.0, 0.0, 10.0, 10.0), label: 1 };
        // 10 wide, 6 high inside the 10x10 truth: IoU = 60 / 100
        let det = ScoredBox { image: 0, rect: Rect::from_rcwh(0.0, 0.0, 10.0, 6.0), label: 1, score: 0.9 };
        assert!((det.rect.iou(&gt.rect) - 0.6).abs() < 1e-12);
        assert_eq!(average_precision(&[det], &[gt], 0.5, Interpolation::AllPoints).ap, 1.0);
        assert_eq!(average_precision(&[det], &[gt], 0.75, Interpolation::AllPoints).ap, 0.0);
        assert!(average_precision(&[det], &[], 0.5, Interpolation::AllPoints).no_ground_truth);
    }

    #[test]
    fn mad_single_roi_and_identity() {
        let a = Tensor::from_vec(&[4, 4], (0..16).map(|i| (i % 5) as f32 / 5.0).collect());
        let ann = Annotation { row: 0, col: 0, width: 4, height: 4, label: 1 };
        let m = roi_feature_mad(&[a.clone()], &[a.clone()], &[vec![ann]], &GlcmConfig::default()).unwrap();
        assert_eq!((m.correlation, m.homogeneity, m.energy), (0.0, 0.0, 0.0));
        assert!(roi_feature_mad(&[a.clone()], &[a], &[vec![]], &GlcmConfig::default()).is_err());
    }
}
