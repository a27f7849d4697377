//! Feature-space perceptual losses and the joint denoiser objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::boxes::Rect;
use crate::denoiser::{generator_adversarial_loss, reconstruction_loss_reduced, Critic, ReconMode, ReconReduction, Variant};
use crate::detector::{roi_align, select_top_k, Detector, LossPlan, Proposal};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::phantom::Annotation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda1: 5.0, lambda2: 5.0 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }

    /// Whether the detector takes part in the denoiser objective at all.
    pub fn uses_detector(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_or_adv: f64,
    pub roi_perceptual: f64,
    pub detection: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(first: f64, roi: f64, det: f64, w: &ObjectiveWeights) -> Self {
        Self {
            recon_or_adv: first,
            roi_perceptual: roi,
            detection: det,
            total: first + w.lambda1 * roi + w.lambda2 * det,
        }
    }

    pub const CSV_HEADER: &'static str = "step,phase,recon_or_adv,roi_pl,det,total";

    pub fn csv_row(&self, step: u64, phase: &str) -> String {
        format!(
            "{step},{phase},{},{},{},{}",
            self.recon_or_adv, self.roi_perceptual, self.detection, self.total
        )
    }
}

fn require_frozen(detector_frozen: bool) -> Result<()> {
    if detector_frozen {
        Ok(())
    } else {
        Err(Error::Scheduling("detector must be frozen while the denoiser objective is evaluated".into()))
    }
}

/// Adversarial form: `-E[D(G(x))] + l1 * L_roi + l2 * L_det`.
pub fn total_loss_gan(adv: f64, roi: f64, det: f64, w: &ObjectiveWeights, detector_frozen: bool) -> Result<LossBreakdown> {
    require_frozen(detector_frozen)?;
    w.validate()?;
    Ok(LossBreakdown::combine(adv, roi, det, w))
}

/// Single-network form: `L_rec + l1 * L_roi + l2 * L_det`.
pub fn total_loss_cnn(recon: f64, roi: f64, det: f64, w: &ObjectiveWeights, detector_frozen: bool) -> Result<LossBreakdown> {
    require_frozen(detector_frozen)?;
    w.validate()?;
    Ok(LossBreakdown::combine(recon, roi, det, w))
}

/// `|T(x_hat) - T(y)|_F^2 / (w h d)`, averaged over the batch.
pub fn global_perceptual_loss<'t, T: Scalar>(fx: Var<'t, T>, fy: Var<'t, T>) -> Result<Var<'t, T>> {
    if fx.shape() != fy.shape() {
        return Err(Error::Contract(format!(
            "feature shapes differ: {:?} vs {:?}",
            fx.shape(),
            fy.shape()
        )));
    }
    Ok(fx.sub(fy).square().mean())
}

/// Fixed-size bilinear pooling of pixel-space boxes; boxes with no area
/// after clipping to the image are dropped with a warning.
pub fn roi_pool<'t, T: Scalar>(
    fmap: Var<'t, T>,
    rois: &[(usize, Rect)],
    stride: usize,
    pool: usize,
) -> Option<Var<'t, T>> {
    let usable = usable_rois(&fmap, rois, stride);
    if usable.is_empty() {
        return None;
    }
    Some(roi_align(fmap, &usable, stride, pool))
}

fn usable_rois<T: Scalar>(fmap: &Var<'_, T>, rois: &[(usize, Rect)], stride: usize) -> Vec<(usize, Rect)> {
    let s = fmap.shape();
    let (rows, cols) = ((s[2] * stride) as f64, (s[3] * stride) as f64);
    rois.iter()
        .filter_map(|&(b, r)| {
            let c = r.clip(rows, cols);
            if c.area() > 0.0 {
                Some((b, c))
            } else {
                log::warn!("skipping degenerate RoI {r:?}");
                None
            }
        })
        .collect()
}

/// `(1/K) sum_i |T(x_hat)_i - T(y)_i|_F^2 / (P P d)` over pooled boxes,
/// averaged over the batch. Zero, with a warning, if no box is usable.
pub fn roi_perceptual_loss<'t, T: Scalar>(
    fx: Var<'t, T>,
    fy: Var<'t, T>,
    rois: &[(usize, Rect)],
    stride: usize,
    pool: usize,
) -> Result<Var<'t, T>> {
    if fx.shape() != fy.shape() {
        return Err(Error::Contract("feature shapes differ".into()));
    }
    let usable = usable_rois(&fx, rois, stride);
    if usable.is_empty() {
        log::warn!("no usable proposals; ROI perceptual term is zero");
        return Ok(fx.tape().constant(Tensor::scalar(T::zero())));
    }
    let px = roi_align(fx, &usable, stride, pool);
    let py = roi_align(fy, &usable, stride, pool);
    Ok(px.sub(py).square().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveOptions {
    pub weights: ObjectiveWeights,
    pub recon_mode: ReconMode,
    pub recon_reduction: ReconReduction,
    /// Number of top-scoring proposals K for the ROI term.
    pub top_k: usize,
    /// Pooled size P for the ROI term.
    pub roi_pool: usize,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            weights: ObjectiveWeights::default(),
            recon_mode: ReconMode::Mae,
            recon_reduction: ReconReduction::SampleSum,
            top_k: 5,
            roi_pool: 7,
        }
    }
}

/// Discrete choices made while evaluating the generator objective: the top-K
/// proposals per image and the detector's sampling plan. Holding them fixed
/// makes the objective a smooth function of its inputs.
#[derive(Clone, Debug, Default)]
pub struct ObjectivePlan {
    pub proposals: Vec<Vec<Proposal>>,
    pub detection: Option<LossPlan>,
}

/// On-tape terms of one generator objective evaluation.
pub struct GeneratorTerms<'t, T: Scalar> {
    pub first: Var<'t, T>,
    pub roi: Var<'t, T>,
    pub det: Var<'t, T>,
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    pub plan: ObjectivePlan,
}

/// The joint denoiser objective on a generated batch `x_hat` `[N, 1, H, W]`
/// against clean targets `y`. The detector (and critic) must be bound frozen.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<'t, T: Scalar, R: Rng>(
    variant: Variant,
    opts: &ObjectiveOptions,
    x_hat: Var<'t, T>,
    y: &Tensor<T>,
    annotations: &[Vec<Annotation>],
    detector: &Detector<T>,
    det_params: &Bound<'t, T>,
    critic: Option<(&dyn Critic<T>, &Bound<'t, T>)>,
    rng: &mut R,
) -> Result<GeneratorTerms<'t, T>> {
    objective(variant, opts, x_hat, y, annotations, detector, det_params, critic, Plan::Draw(rng))
}

/// [`generator_objective`] under a plan from an earlier evaluation.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective_with_plan<'t, T: Scalar>(
    variant: Variant,
    opts: &ObjectiveOptions,
    x_hat: Var<'t, T>,
    y: &Tensor<T>,
    detector: &Detector<T>,
    det_params: &Bound<'t, T>,
    critic: Option<(&dyn Critic<T>, &Bound<'t, T>)>,
    plan: &ObjectivePlan,
) -> Result<GeneratorTerms<'t, T>> {
    objective::<T, rand_chacha::ChaCha8Rng>(variant, opts, x_hat, y, &[], detector, det_params, critic, Plan::Fixed(plan))
}

enum Plan<'a, R> {
    Draw(&'a mut R),
    Fixed(&'a ObjectivePlan),
}

#[allow(clippy::too_many_arguments)]
fn objective<'t, T: Scalar, R: Rng>(
    variant: Variant,
    opts: &ObjectiveOptions,
    x_hat: Var<'t, T>,
    y: &Tensor<T>,
    annotations: &[Vec<Annotation>],
    detector: &Detector<T>,
    det_params: &Bound<'t, T>,
    critic: Option<(&dyn Critic<T>, &Bound<'t, T>)>,
    mut plan: Plan<'_, R>,
) -> Result<GeneratorTerms<'t, T>> {
    opts.weights.validate()?;
    let tape = x_hat.tape();
    let yv = tape.constant(y.clone());
    let first = match variant {
        Variant::Cnn => reconstruction_loss_reduced(x_hat, yv, opts.recon_mode, opts.recon_reduction)?,
        Variant::Gan => {
            let (c, cp) = critic.ok_or_else(|| Error::Config("gan variant needs a critic".into()))?;
            if cp.is_trainable() {
                return Err(Error::Scheduling("critic must be frozen during the generator update".into()));
            }
            generator_adversarial_loss(c, cp, x_hat)
        }
    };
    let zero = || tape.constant(Tensor::scalar(T::zero()));
    let (mut roi, mut det) = (zero(), zero());
    let mut used = ObjectivePlan::default();
    if opts.weights.uses_detector() {
        require_frozen(!det_params.is_trainable())?;
        let s = x_hat.shape();
        let fx = detector.features(det_params, x_hat)?;
        let rpn = detector.rpn(det_params, fx);
        if opts.weights.lambda1 > 0.0 {
            let fy = detector.features(det_params, yv)?;
            used.proposals = match &plan {
                Plan::Fixed(p) => p.proposals.clone(),
                Plan::Draw(_) => (0..s[0])
                    .map(|n| select_top_k(&detector.rpn_propose(&rpn, n, s[2], s[3]), opts.top_k))
                    .collect(),
            };
            let rois: Vec<(usize, Rect)> = used
                .proposals
                .iter()
                .enumerate()
                .flat_map(|(n, ps)| ps.iter().map(move |p| (n, p.rect)))
                .collect();
            roi = roi_perceptual_loss(fx, fy, &rois, detector.stride(), opts.roi_pool)?;
        }
        if opts.weights.lambda2 > 0.0 {
            let lp = match &mut plan {
                Plan::Fixed(p) => p
                    .detection
                    .clone()
                    .ok_or_else(|| Error::Contract("plan has no detection part".into()))?,
                Plan::Draw(rng) => detector.plan_loss(&rpn, annotations, s[2], s[3], *rng),
            };
            det = detector.loss_with_plan(det_params, fx, &rpn, &lp)?.total;
            used.detection = Some(lp);
        }
    }
    let w = opts.weights;
    let total = first.add(roi.scale(w.lambda1)).add(det.scale(w.lambda2));
    let (f, r, d) = (first.item().as_f64(), roi.item().as_f64(), det.item().as_f64());
    let breakdown = match variant {
        Variant::Cnn => total_loss_cnn(f, r, d, &w, true)?,
        Variant::Gan => total_loss_gan(f, r, d, &w, true)?,
    };
    Ok(GeneratorTerms {
        first,
        roi,
        det,
        total,
        breakdown,
        plan: used,
    })
}
