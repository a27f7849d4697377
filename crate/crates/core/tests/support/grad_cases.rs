//! Finite-difference cases for every differentiable loss, on 8x8 inputs and sub-1k-parameter networks.

use lidnet::boxes::Rect;
use lidnet::denoiser::{
    discriminator_loss_with, reconstruction_loss_reduced, Critic, CriticConfig, Denoiser, DenoiserConfig,
    Discriminator, ReconMode, ReconReduction, Variant,
};
use lidnet::detector::{Detector, DetectorConfig};
use lidnet::gradcheck::{check_input, check_params, GradCheck, DEFAULT_STEP};
use lidnet::objectives::{
    generator_objective, generator_objective_with_plan, global_perceptual_loss, roi_perceptual_loss,
    ObjectiveOptions, ObjectivePlan,
};
use lidnet::phantom::Annotation;
use lidnet::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const TOL_DETECTOR: f64 = 1e-3;

pub fn image(seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(&[2, 1, 8, 8], |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        0.2 + 0.6 * ((s >> 11) as f64 / (1u64 << 53) as f64)
    })
}

pub fn annotations() -> Vec<Vec<Annotation>> {
    vec![
        vec![Annotation { row: 1, col: 2, width: 4, height: 5, label: 1 }],
        vec![Annotation { row: 3, col: 3, width: 5, height: 4, label: 1 }],
    ]
}

pub fn detector() -> Detector<f64> {
    let det = Detector::<f64>::new(DetectorConfig::tiny(), 3).unwrap();
    assert!(det.params.count() <= 1000, "{} parameters", det.params.count());
    det
}

pub fn denoiser() -> Denoiser<f64> {
    let mut d = Denoiser::<f64>::new(DenoiserConfig { width: 2 }, 4).unwrap();
    // zero-initialised output layer would leave most gradients at zero
    let i = d.params.index_of("out.weight").unwrap();
    d.params.get_mut(i).data_mut().iter_mut().enumerate().for_each(|(k, v)| *v = 0.05 * (k as f64 - 8.0) / 9.0);
    // zero biases put dead channels exactly on the relu kink
    for i in 0..d.params.len() {
        if d.params.names()[i].ends_with(".bias") {
            d.params.get_mut(i).data_mut().iter_mut().enumerate().for_each(|(k, v)| *v = 0.013 * (k + 1) as f64);
        }
    }
    assert!(d.params.count() <= 1000, "{} parameters", d.params.count());
    d
}

pub fn critic() -> Discriminator<f64> {
    let cfg = CriticConfig { channels: [2, 2, 3, 3], ..CriticConfig::default() };
    Discriminator::new(cfg, 8, 5).unwrap()
}

pub fn global_perceptual() -> GradCheck {
    let det = detector();
    let y = image(2);
    check_input(&image(1), DEFAULT_STEP, |tape, x| {
        let p = det.params.bind(tape, false);
        global_perceptual_loss(det.features(&p, x)?, det.features(&p, tape.constant(y.clone()))?)
    })
    .unwrap()
}

pub fn roi_perceptual() -> GradCheck {
    let det = detector();
    let y = image(2);
    let rois = [(0, Rect::new(0.5, 1.0, 6.0, 7.5)), (1, Rect::new(2.0, 0.0, 8.0, 5.0)), (1, Rect::new(1.0, 1.0, 4.0, 4.0))];
    check_input(&image(1), DEFAULT_STEP, |tape, x| {
        let p = det.params.bind(tape, false);
        let fy = det.features(&p, tape.constant(y.clone()))?;
        roi_perceptual_loss(det.features(&p, x)?, fy, &rois, det.stride(), 3)
    })
    .unwrap()
}

/// Composite RPN + head loss under a fixed sampling plan.
pub fn detection() -> GradCheck {
    let det = detector();
    let x = image(1);
    let anns = annotations();
    let plan = {
        let tape = Tape::new();
        let p = det.params.bind(&tape, false);
        let fmap = det.features(&p, tape.constant(x.clone())).unwrap();
        let rpn = det.rpn(&p, fmap);
        det.plan_loss(&rpn, &anns, 8, 8, &mut ChaCha8Rng::seed_from_u64(0))
    };
    assert!(plan.rpn.iter().any(|s| s.label > 0));
    assert!(plan.heads.iter().any(|s| s.label > 0));
    check_params(&det.params, DEFAULT_STEP, |tape, p| {
        let fmap = det.features(p, tape.constant(x.clone()))?;
        let rpn = det.rpn(p, fmap);
        Ok(det.loss_with_plan(p, fmap, &rpn, &plan)?.total)
    })
    .unwrap()
}

/// Critic loss with fixed interpolation weights; `gp = 0` isolates the Wasserstein term.
pub fn discriminator(gp: f64) -> GradCheck {
    let d = critic();
    let (x_hat, y) = (image(1), image(2));
    check_params(&d.params, DEFAULT_STEP, |tape, p| {
        Ok(discriminator_loss_with(tape, &d, p, &x_hat, &y, gp, &[0.3, 0.8])?.total)
    })
    .unwrap()
}

/// Full generator objective with respect to the denoiser weights.
pub fn joint(variant: Variant) -> GradCheck {
    let g = denoiser();
    let det = detector();
    let c = critic();
    let (x, y) = (image(1), image(2));
    let anns = annotations();
    let opts = ObjectiveOptions { top_k: 2, roi_pool: 3, ..ObjectiveOptions::default() };
    let plan: ObjectivePlan = {
        let tape = Tape::new();
        let gp = g.params.bind(&tape, false);
        let dp = det.params.bind(&tape, false);
        let cp = c.params.bind(&tape, false);
        let x_hat = g.forward(&gp, tape.constant(x.clone())).unwrap();
        let critic = Some((&c as &dyn Critic<f64>, &cp));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        generator_objective(variant, &opts, x_hat, &y, &anns, &det, &dp, critic, &mut rng).unwrap().plan
    };
    assert_eq!(plan.proposals.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2]);
    check_params(&g.params, DEFAULT_STEP, |tape, gp| {
        let dp = det.params.bind(tape, false);
        let cp = c.params.bind(tape, false);
        let x_hat = g.forward(gp, tape.constant(x.clone()))?;
        let critic = Some((&c as &dyn Critic<f64>, &cp));
        Ok(generator_objective_with_plan(variant, &opts, x_hat, &y, &det, &dp, critic, &plan)?.total)
    })
    .unwrap()
}

pub fn reconstruction(mode: ReconMode, reduction: ReconReduction) -> GradCheck {
    let y = image(2);
    check_input(&image(1), DEFAULT_STEP, |tape, x| {
        reconstruction_loss_reduced(x, tape.constant(y.clone()), mode, reduction)
    })
    .unwrap()
}

/// Every case with its tolerance.
pub fn all() -> Vec<(String, GradCheck, f64)> {
    let mut out = vec![
        ("global perceptual".to_string(), global_perceptual(), TOL),
        ("roi perceptual".to_string(), roi_perceptual(), TOL),
        ("detection".to_string(), detection(), TOL_DETECTOR),
        ("critic".to_string(), discriminator(0.0), TOL),
        ("critic + penalty".to_string(), discriminator(10.0), TOL),
        ("joint cnn".to_string(), joint(Variant::Cnn), TOL),
        ("joint gan".to_string(), joint(Variant::Gan), TOL),
    ];
    for mode in [ReconMode::Mse, ReconMode::Mae] {
        for red in [ReconReduction::PixelMean, ReconReduction::SampleSum] {
            out.push((format!("reconstruction {mode:?} {red:?}"), reconstruction(mode, red), TOL));
        }
    }
    out
}

/// Full-image ROI loss and global loss for one detector and batch.
pub fn full_box_pair(det: &Detector<f64>, n: usize, seed: u64) -> (f64, f64) {
    let size = 16;
    let images = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 1, size, size], |_| rand::Rng::random::<f64>(&mut rng))
    };
    let tape = Tape::new();
    let p = det.params.bind(&tape, false);
    let fx = det.features(&p, tape.constant(images(seed))).unwrap();
    let fy = det.features(&p, tape.constant(images(seed + 1000))).unwrap();
    let side = fx.shape()[2];
    let full = Rect::new(0.0, 0.0, size as f64, size as f64);
    let rois: Vec<(usize, Rect)> = (0..n).map(|i| (i, full)).collect();
    let roi = roi_perceptual_loss(fx, fy, &rois, det.stride(), side).unwrap().item();
    let global = global_perceptual_loss(fx, fy).unwrap().item();
    (roi, global)
}
