//! Compact two-stage lesion detector: strided residual backbone, anchor-based
//! region proposal network, and RoI classification / box-regression heads.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::boxes::Rect;
use crate::error::{Error, Result};
use crate::kernels::{FeatureBox, RoiPlan};
use crate::nn::{Bound, Conv2d, Init, Linear, ParamSet};
use crate::phantom::Annotation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Output widths of the stride-2 stem convolutions; the feature stride is
    /// `2^len` and the feature depth is the last entry.
    pub stem_channels: Vec<usize>,
    pub res_blocks: usize,
    pub rpn_channels: usize,
    /// Anchor side lengths in input pixels.
    pub anchor_sizes: Vec<f64>,
    /// Anchor height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub pool_size: usize,
    pub head_hidden: usize,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_samples: usize,
    pub head_fg_iou: f64,
    pub head_bg_iou: f64,
    pub head_samples: usize,
    pub positive_fraction: f64,
    pub pre_nms_top_n: usize,
    pub proposal_nms_iou: f64,
    pub post_nms_top_n: usize,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            stem_channels: vec![16, 32, 64],
            res_blocks: 1,
            rpn_channels: 64,
            anchor_sizes: vec![6.0, 9.0, 13.0],
            anchor_ratios: vec![1.0],
            pool_size: 4,
            head_hidden: 128,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_samples: 64,
            head_fg_iou: 0.5,
            head_bg_iou: 0.5,
            head_samples: 32,
            positive_fraction: 0.25,
            pre_nms_top_n: 100,
            proposal_nms_iou: 0.7,
            post_nms_top_n: 20,
            max_detections: 10,
        }
    }
}

impl DetectorConfig {
    /// Stride-4 variant for 64x64 phantoms: lesions of 5-10 px are too small
    /// for the 8x8 map of the default backbone to localise well.
    pub fn desk() -> Self {
        Self {
            stem_channels: vec![16, 32],
            rpn_channels: 32,
            ..Self::default()
        }
    }

    /// A network of a few hundred parameters, for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            stem_channels: vec![3, 4],
            res_blocks: 0,
            rpn_channels: 4,
            anchor_sizes: vec![5.0],
            pool_size: 2,
            head_hidden: 6,
            rpn_samples: 16,
            head_samples: 8,
            pre_nms_top_n: 16,
            post_nms_top_n: 4,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    pub fn depth(&self) -> usize {
        *self.stem_channels.last().expect("non-empty stem")
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1");
        }
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return bad("stem_channels must be non-empty and positive");
        }
        if self.anchors_per_cell() == 0 || self.anchor_sizes.iter().chain(&self.anchor_ratios).any(|&v| !(v > 0.0)) {
            return bad("anchors need positive sizes and ratios");
        }
        if self.pool_size == 0 || self.head_hidden == 0 || self.rpn_channels == 0 {
            return bad("pool_size, head_hidden and rpn_channels must be positive");
        }
        for (fg, bg) in [(self.rpn_fg_iou, self.rpn_bg_iou), (self.head_fg_iou, self.head_bg_iou)] {
            if !(0.0 <= bg && bg <= fg && fg <= 1.0) {
                return bad("IoU thresholds must satisfy 0 <= bg <= fg <= 1");
            }
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        if self.rpn_samples == 0 || self.head_samples == 0 || self.post_nms_top_n == 0 {
            return bad("sample and proposal counts must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    stem: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
    rpn_conv: Conv2d,
    rpn_obj: Conv2d,
    rpn_box: Conv2d,
    fc: Linear,
    cls: Linear,
    bbox: Linear,
}

/// Detector parameters ψ with their architecture.
#[derive(Clone, Debug)]
pub struct Detector<T: Scalar> {
    pub config: DetectorConfig,
    pub params: ParamSet<T>,
    layers: Layers,
}

/// One region proposal: decoded, clipped box and objectness in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub rect: Rect,
    pub score: f64,
    /// Anchor index within the image (`cell * anchors_per_cell + a`).
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    pub label: usize,
    pub score: f64,
}

/// Raw RPN outputs for a batch.
pub struct RpnOutput<'t, T: Scalar> {
    /// `[N, A, h, w]` objectness logits.
    pub logits: Var<'t, T>,
    /// `[N, 4A, h, w]` box offsets, channel `4a + k`.
    pub deltas: Var<'t, T>,
}

/// Head outputs for a list of RoIs.
pub struct HeadOutput<'t, T: Scalar> {
    /// `[R, C + 1]`, class 0 is background.
    pub class_logits: Var<'t, T>,
    /// `[R, 4C]`, offsets per foreground class.
    pub box_deltas: Var<'t, T>,
}

/// Outcome of matching one box against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    Positive { gt: usize, label: usize, offsets: [f64; 4] },
    Background,
    Ignored,
}

/// Non-differentiable choices behind one detector loss evaluation: sampled
/// anchors, sampled RoIs and their targets. Holding it fixed makes the loss a
/// smooth function of ψ and of the input.
#[derive(Clone, Debug)]
pub struct LossPlan {
    pub rpn: Vec<SampledBox>,
    pub rois: Vec<(usize, Rect)>,
    pub heads: Vec<SampledBox>,
}

#[derive(Clone, Copy, Debug)]
pub struct SampledBox {
    /// Image in batch.
    pub image: usize,
    /// Anchor index (RPN) or RoI index (heads).
    pub index: usize,
    /// 0 for background.
    pub label: usize,
    pub offsets: [f64; 4],
}

/// The four detector loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct DetectorLoss<'t, T: Scalar> {
    pub rpn_objectness: Var<'t, T>,
    pub rpn_box: Var<'t, T>,
    pub head_class: Var<'t, T>,
    pub head_box: Var<'t, T>,
    pub total: Var<'t, T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut stem = Vec::new();
        let mut in_c = 1;
        for (i, &c) in config.stem_channels.iter().enumerate() {
            stem.push(Conv2d::new(&mut p, &format!("stem{i}"), in_c, c, 3, 2, Init::He, &mut rng));
            in_c = c;
        }
        let d = config.depth();
        let res = (0..config.res_blocks)
            .map(|i| {
                (
                    Conv2d::new(&mut p, &format!("res{i}.a"), d, d, 3, 1, Init::He, &mut rng),
                    Conv2d::new(&mut p, &format!("res{i}.b"), d, d, 3, 1, Init::Normal(0.01), &mut rng),
                )
            })
            .collect();
        let a = config.anchors_per_cell();
        let rpn_conv = Conv2d::new(&mut p, "rpn.conv", d, config.rpn_channels, 3, 1, Init::He, &mut rng);
        let rpn_obj = Conv2d::new(&mut p, "rpn.obj", config.rpn_channels, a, 1, 1, Init::Normal(0.01), &mut rng);
        let rpn_box = Conv2d::new(&mut p, "rpn.box", config.rpn_channels, 4 * a, 1, 1, Init::Normal(0.01), &mut rng);
        let flat = d * config.pool_size * config.pool_size;
        let fc = Linear::new(&mut p, "head.fc", flat, config.head_hidden, Init::He, &mut rng);
        let c = config.num_classes;
        let cls = Linear::new(&mut p, "head.cls", config.head_hidden, c + 1, Init::Normal(0.01), &mut rng);
        let bbox = Linear::new(&mut p, "head.box", config.head_hidden, 4 * c, Init::Normal(0.001), &mut rng);
        Ok(Self {
            config,
            params: p,
            layers: Layers {
                stem,
                res,
                rpn_conv,
                rpn_obj,
                rpn_box,
                fc,
                cls,
                bbox,
            },
        })
    }

    /// Same architecture, different scalar type.
    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    /// Backbone `H`: `[N, 1, H, W] -> [N, d, H/s, W/s]`.
    pub fn features<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let stride = self.stride();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Contract(format!("detector expects [N, 1, H, W], got {s:?}")));
        }
        if s[2] < stride || s[3] < stride || s[2] % stride != 0 || s[3] % stride != 0 {
            return Err(Error::Contract(format!(
                "image {}x{} is not a positive multiple of the feature stride {stride}",
                s[2], s[3]
            )));
        }
        let mut h = x;
        for conv in &self.layers.stem {
            h = conv.forward(p, h).relu();
        }
        for (a, b) in &self.layers.res {
            let r = b.forward(p, a.forward(p, h).relu());
            h = h.add(r).relu();
        }
        Ok(h)
    }

    pub fn rpn<'t>(&self, p: &Bound<'t, T>, fmap: Var<'t, T>) -> RpnOutput<'t, T> {
        let h = self.layers.rpn_conv.forward(p, fmap).relu();
        RpnOutput {
            logits: self.layers.rpn_obj.forward(p, h),
            deltas: self.layers.rpn_box.forward(p, h),
        }
    }

    /// Anchors of one image in proposal-index order, for an `h x w` map.
    pub fn anchors(&self, h: usize, w: usize) -> Vec<Rect> {
        let s = self.stride() as f64;
        let mut out = Vec::with_capacity(h * w * self.config.anchors_per_cell());
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = ((y as f64 + 0.5) * s, (x as f64 + 0.5) * s);
                for &size in &self.config.anchor_sizes {
                    for &ratio in &self.config.anchor_ratios {
                        let ah = size * ratio.sqrt();
                        let aw = size / ratio.sqrt();
                        out.push(Rect::new(cy - ah / 2.0, cx - aw / 2.0, cy + ah / 2.0, cx + aw / 2.0));
                    }
                }
            }
        }
        out
    }

    /// Flat positions of anchor `m` of image `n` in the logit and delta maps.
    fn rpn_offsets(&self, shape: &[usize], n: usize, m: usize) -> (usize, [usize; 4]) {
        let (a_n, h, w) = (self.config.anchors_per_cell(), shape[2], shape[3]);
        let (cell, a) = (m / a_n, m % a_n);
        let hw = h * w;
        let logit = (n * a_n + a) * hw + cell;
        let delta = [0, 1, 2, 3].map(|k| (n * 4 * a_n + 4 * a + k) * hw + cell);
        (logit, delta)
    }

    /// All `cells x anchors` proposals of image `n`, decoded and clipped.
    pub fn rpn_propose(&self, rpn: &RpnOutput<'_, T>, n: usize, rows: usize, cols: usize) -> Vec<Proposal> {
        let shape = rpn.logits.shape();
        let logits = rpn.logits.value();
        let deltas = rpn.deltas.value();
        self.anchors(shape[2], shape[3])
            .iter()
            .enumerate()
            .map(|(m, anchor)| {
                let (li, di) = self.rpn_offsets(&shape, n, m);
                let d = di.map(|i| deltas.data()[i].as_f64());
                Proposal {
                    rect: clip_nonempty(&anchor.decode(d), rows as f64, cols as f64),
                    score: crate::autograd::sigmoid(logits.data()[li].as_f64()),
                    index: m,
                }
            })
            .collect()
    }

    /// Proposals surviving score ranking and NMS, best first.
    pub fn filtered_proposals(&self, all: &[Proposal]) -> Vec<Proposal> {
        let pre = select_top_k(all, self.config.pre_nms_top_n.max(1));
        let rects: Vec<Rect> = pre.iter().map(|p| p.rect).collect();
        let scores: Vec<f64> = pre.iter().map(|p| p.score).collect();
        let keep = nms(&rects, &scores, self.config.proposal_nms_iou);
        keep.iter().take(self.config.post_nms_top_n).map(|&i| pre[i]).collect()
    }

    /// Heads S1/S2 on RoIs `(image, box)` in input-pixel coordinates.
    pub fn detect_heads<'t>(
        &self,
        p: &Bound<'t, T>,
        fmap: Var<'t, T>,
        rois: &[(usize, Rect)],
    ) -> Result<HeadOutput<'t, T>> {
        if rois.is_empty() {
            return Err(Error::Contract("detect_heads needs at least one proposal".into()));
        }
        let pooled = roi_align(fmap, rois, self.stride(), self.config.pool_size);
        let s = pooled.shape();
        let flat = pooled.reshape(&[s[0], s[1] * s[2] * s[3]]);
        let h = self.layers.fc.forward(p, flat).relu();
        Ok(HeadOutput {
            class_logits: self.layers.cls.forward(p, h),
            box_deltas: self.layers.bbox.forward(p, h),
        })
    }

    /// Samples anchors and RoIs and assigns their targets, from current
    /// forward values.
    pub fn plan_loss<R: Rng>(
        &self,
        rpn: &RpnOutput<'_, T>,
        annotations: &[Vec<Annotation>],
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> LossPlan {
        let cfg = &self.config;
        let shape = rpn.logits.shape();
        let anchors = self.anchors(shape[2], shape[3]);
        let mut plan = LossPlan {
            rpn: Vec::new(),
            rois: Vec::new(),
            heads: Vec::new(),
        };
        for (n, anns) in annotations.iter().enumerate() {
            let gts: Vec<(Rect, usize)> = anns.iter().map(|a| (Rect::from_annotation(a), a.label)).collect();
            let assign = assign_targets(&anchors, &gts, cfg.rpn_fg_iou, cfg.rpn_bg_iou, true);
            for (index, label, offsets) in sample(&assign, cfg.rpn_samples, cfg.positive_fraction, rng) {
                plan.rpn.push(SampledBox { image: n, index, label: label.min(1), offsets });
            }

            let mut candidates: Vec<Rect> = self
                .filtered_proposals(&self.rpn_propose(rpn, n, rows, cols))
                .iter()
                .map(|p| p.rect)
                .collect();
            candidates.extend(gts.iter().map(|g| g.0));
            let assign = assign_targets(&candidates, &gts, cfg.head_fg_iou, cfg.head_bg_iou, false);
            for (i, label, offsets) in sample(&assign, cfg.head_samples, cfg.positive_fraction, rng) {
                plan.heads.push(SampledBox { image: n, index: plan.rois.len(), label, offsets });
                plan.rois.push((n, candidates[i]));
            }
        }
        plan
    }

    /// Four-term detector loss under a fixed plan.
    pub fn loss_with_plan<'t>(
        &self,
        p: &Bound<'t, T>,
        fmap: Var<'t, T>,
        rpn: &RpnOutput<'t, T>,
        plan: &LossPlan,
    ) -> Result<DetectorLoss<'t, T>> {
        let tape = fmap.tape();
        let shape = rpn.logits.shape();
        let (mut li, mut labels) = (Vec::new(), Vec::new());
        let (mut di, mut targets) = (Vec::new(), Vec::new());
        for s in &plan.rpn {
            let (l, d) = self.rpn_offsets(&shape, s.image, s.index);
            li.push(l);
            labels.push(T::lit(s.label as f64));
            if s.label > 0 {
                di.extend_from_slice(&d);
                targets.extend(s.offsets.iter().map(|&v| T::lit(v)));
            }
        }
        let n_rpn = plan.rpn.len();
        let rpn_objectness = if n_rpn == 0 {
            log::warn!("no anchors sampled; objectness loss is zero");
            zero(tape)
        } else {
            let l = rpn.logits.gather(Rc::new(li));
            let y = tape.constant(Tensor::from_vec(&[n_rpn], labels));
            l.softplus().sub(l.mul(y)).sum().scale(1.0 / n_rpn as f64)
        };
        let rpn_box = if di.is_empty() {
            zero(tape)
        } else {
            let len = di.len();
            let d = rpn.deltas.gather(Rc::new(di));
            let t = tape.constant(Tensor::from_vec(&[len], targets));
            d.sub(t).smooth_l1().sum().scale(1.0 / n_rpn as f64)
        };

        let (head_class, head_box) = if plan.rois.is_empty() {
            log::warn!("no RoIs sampled; head losses are zero");
            (zero(tape), zero(tape))
        } else {
            let out = self.detect_heads(p, fmap, &plan.rois)?;
            let c1 = self.config.num_classes + 1;
            let r = plan.heads.len();
            let logp = out.class_logits.log_softmax_rows();
            let pick: Vec<usize> = plan.heads.iter().map(|s| s.index * c1 + s.label).collect();
            let head_class = logp.gather(Rc::new(pick)).sum().scale(-1.0 / r as f64);
            let c4 = 4 * self.config.num_classes;
            let (mut bi, mut bt) = (Vec::new(), Vec::new());
            for s in plan.heads.iter().filter(|s| s.label > 0) {
                for k in 0..4 {
                    bi.push(s.index * c4 + 4 * (s.label - 1) + k);
                    bt.push(T::lit(s.offsets[k]));
                }
            }
            let head_box = if bi.is_empty() {
                zero(tape)
            } else {
                let len = bi.len();
                let d = out.box_deltas.gather(Rc::new(bi));
                let t = tape.constant(Tensor::from_vec(&[len], bt));
                d.sub(t).smooth_l1().sum().scale(1.0 / r as f64)
            };
            (head_class, head_box)
        };
        let total = rpn_objectness.add(rpn_box).add(head_class).add(head_box);
        Ok(DetectorLoss {
            rpn_objectness,
            rpn_box,
            head_class,
            head_box,
            total,
        })
    }

    /// Full training loss on a batch `[N, 1, H, W]`; the plan is drawn from `rng`.
    pub fn full_loss<'t, R: Rng>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        annotations: &[Vec<Annotation>],
        rng: &mut R,
    ) -> Result<(DetectorLoss<'t, T>, LossPlan)> {
        let s = x.shape();
        if annotations.len() != s[0] {
            return Err(Error::Contract(format!(
                "{} annotation lists for a batch of {}",
                annotations.len(),
                s[0]
            )));
        }
        let fmap = self.features(p, x)?;
        let rpn = self.rpn(p, fmap);
        let plan = self.plan_loss(&rpn, annotations, s[2], s[3], rng);
        Ok((self.loss_with_plan(p, fmap, &rpn, &plan)?, plan))
    }

    /// Detections per image of a batch `[N, 1, H, W]`.
    pub fn infer(&self, images: &Tensor<T>, score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(images.clone());
        let s = x.shape();
        let fmap = self.features(&p, x)?;
        let rpn = self.rpn(&p, fmap);
        let mut rois = Vec::new();
        for n in 0..s[0] {
            for prop in self.filtered_proposals(&self.rpn_propose(&rpn, n, s[2], s[3])) {
                rois.push((n, prop.rect));
            }
        }
        let mut out = vec![Vec::new(); s[0]];
        if rois.is_empty() {
            return Ok(out);
        }
        let heads = self.detect_heads(&p, fmap, &rois)?;
        let c = self.config.num_classes;
        let logits = heads.class_logits.value();
        let deltas = heads.box_deltas.value();
        let mut cands: Vec<Vec<Vec<(Rect, f64)>>> = vec![vec![Vec::new(); c + 1]; s[0]];
        for (r, &(n, rect)) in rois.iter().enumerate() {
            let row: Vec<f64> = logits.data()[r * (c + 1)..(r + 1) * (c + 1)].iter().map(|v| v.as_f64()).collect();
            let probs = softmax(&row);
            for label in 1..=c {
                if probs[label] < score_thresh {
                    continue;
                }
                let d = [0, 1, 2, 3].map(|k| deltas.data()[r * 4 * c + 4 * (label - 1) + k].as_f64());
                let b = clip_nonempty(&rect.decode(d), s[2] as f64, s[3] as f64);
                cands[n][label].push((b, probs[label]));
            }
        }
        for (n, per_class) in cands.into_iter().enumerate() {
            for (label, list) in per_class.into_iter().enumerate() {
                let rects: Vec<Rect> = list.iter().map(|x| x.0).collect();
                let scores: Vec<f64> = list.iter().map(|x| x.1).collect();
                for i in nms(&rects, &scores, nms_iou) {
                    out[n].push(Detection { rect: rects[i], label, score: scores[i] });
                }
            }
            out[n].sort_by(|a, b| b.score.total_cmp(&a.score));
            out[n].truncate(self.config.max_detections);
        }
        Ok(out)
    }

    /// The `k` best raw proposals per image, as used by the ROI perceptual loss.
    pub fn top_proposals(&self, images: &Tensor<T>, k: usize) -> Result<Vec<Vec<Proposal>>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let s = images.shape().to_vec();
        let fmap = self.features(&p, tape.constant(images.clone()))?;
        let rpn = self.rpn(&p, fmap);
        Ok((0..s[0]).map(|n| select_top_k(&self.rpn_propose(&rpn, n, s[2], s[3]), k)).collect())
    }
}

fn zero<T: Scalar>(tape: &Tape<T>) -> Var<'_, T> {
    tape.constant(Tensor::scalar(T::zero()))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Clips to the image, keeping at least one pixel of extent on each axis.
pub fn clip_nonempty(r: &Rect, rows: f64, cols: f64) -> Rect {
    let fix = |lo: f64, hi: f64, size: f64| {
        let (mut a, mut b) = (lo.clamp(0.0, size), hi.clamp(0.0, size));
        if !(b - a >= 1.0) {
            let c = (0.5 * (a + b)).clamp(0.5, size - 0.5);
            a = c - 0.5;
            b = c + 0.5;
        }
        (a, b)
    };
    let (r1, r2) = fix(r.r1, r.r2, rows);
    let (c1, c2) = fix(r.c1, r.c2, cols);
    Rect::new(r1, c1, r2, c2)
}

/// Bilinear fixed-size pooling of pixel-space boxes from a feature map.
pub fn roi_align<'t, T: Scalar>(fmap: Var<'t, T>, rois: &[(usize, Rect)], stride: usize, pool: usize) -> Var<'t, T> {
    let s = fmap.shape();
    let st = stride as f64;
    let boxes: Vec<FeatureBox> = rois
        .iter()
        .map(|&(batch, r)| FeatureBox {
            batch,
            y1: r.r1 / st,
            x1: r.c1 / st,
            y2: r.r2 / st,
            x2: r.c2 / st,
        })
        .collect();
    let plan = RoiPlan::new([s[0], s[1], s[2], s[3]], &boxes, pool);
    fmap.roi_pool(Rc::new(plan))
}

/// The `k` highest-scoring proposals, best first; ties keep the lower index.
pub fn select_top_k(proposals: &[Proposal], k: usize) -> Vec<Proposal> {
    if k > proposals.len() {
        log::warn!("requested top {k} of only {} proposals", proposals.len());
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| proposals[i]).collect()
}

/// Greedy non-maximum suppression; returns kept indices, best first.
pub fn nms(rects: &[Rect], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rects.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| rects[k].iou(&rects[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Matches boxes to ground truth by IoU. With `best_match`, each ground truth
/// also claims its highest-IoU box(es) even below `iou_fg`.
pub fn assign_targets(
    boxes: &[Rect],
    gts: &[(Rect, usize)],
    iou_fg: f64,
    iou_bg: f64,
    best_match: bool,
) -> Vec<Assignment> {
    let ious: Vec<Vec<f64>> = boxes.iter().map(|b| gts.iter().map(|g| b.iou(&g.0)).collect()).collect();
    let mut out: Vec<Assignment> = ious
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (g, &v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            match best {
                Some((g, v)) if v >= iou_fg => positive(&boxes[i], gts, g),
                Some((_, v)) if v >= iou_bg => Assignment::Ignored,
                _ => Assignment::Background,
            }
        })
        .collect();
    if best_match {
        for g in 0..gts.len() {
            let top = ious.iter().map(|r| r[g]).fold(0.0, f64::max);
            if top <= 0.0 {
                continue;
            }
            for (i, row) in ious.iter().enumerate() {
                if row[g] == top && !matches!(out[i], Assignment::Positive { .. }) {
                    out[i] = positive(&boxes[i], gts, g);
                }
            }
        }
    }
    out
}

fn positive(b: &Rect, gts: &[(Rect, usize)], g: usize) -> Assignment {
    Assignment::Positive {
        gt: g,
        label: gts[g].1,
        offsets: b.encode(&gts[g].0),
    }
}

/// Draws at most `total` boxes, positives capped at `fraction`, remainder
/// filled with background. Returns `(box index, label, offsets)`.
fn sample<R: Rng>(assign: &[Assignment], total: usize, fraction: f64, rng: &mut R) -> Vec<(usize, usize, [f64; 4])> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, a) in assign.iter().enumerate() {
        match a {
            Assignment::Positive { .. } => pos.push(i),
            Assignment::Background => neg.push(i),
            Assignment::Ignored => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((total as f64 * fraction).floor() as usize);
    let n_neg = neg.len().min(total - n_pos);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for &i in &pos[..n_pos] {
        if let Assignment::Positive { label, offsets, .. } = assign[i] {
            out.push((i, label, offsets));
        }
    }
    out.extend(neg[..n_neg].iter().map(|&i| (i, 0, [0.0; 4])));
    out.sort_by_key(|x| x.0);
    out
}

/// One JSON object per line: `{"id", "box": [row, col, width, height], "label", "score"}`.
pub fn detections_to_json_lines(items: &[(String, Vec<Detection>)]) -> String {
    let mut s = String::new();
    for (id, dets) in items {
        for d in dets {
            let line = serde_json::json!({
                "id": id,
                "box": d.rect.to_rcwh(),
                "label": d.label,
                "score": d.score,
            });
            s.push_str(&line.to_string());
            s.push('\n');
        }
    }
    s
}
