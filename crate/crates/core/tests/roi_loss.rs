mod support;

use lidnet::boxes::Rect;
use lidnet::detector::{Detector, DetectorConfig};
use lidnet::objectives::roi_perceptual_loss;
use lidnet::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::grad_cases::full_box_pair;

fn images(n: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, size, size], |_| rng.random::<f64>())
}

#[test]
fn full_box_roi_loss_reduces_to_global_loss() {
    for seed in 0..20 {
        let det = Detector::<f64>::new(DetectorConfig::tiny(), seed).unwrap();
        for n in [1, 2] {
            let (roi, global) = full_box_pair(&det, n, seed);
            assert!(global > 0.0);
            assert!((roi - global).abs() <= 1e-6, "seed {seed}, batch {n}: {roi} vs {global}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn roi_loss_ignores_proposal_order(seed in any::<u64>(), k in 1usize..6) {
        let det = Detector::<f64>::new(DetectorConfig::tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rois: Vec<(usize, Rect)> = (0..k)
            .map(|_| {
                let (r, c) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
                (rng.random_range(0..2), Rect::new(r, c, r + rng.random_range(1.0..6.0), c + rng.random_range(1.0..6.0)))
            })
            .collect();
        let loss = |rois: &[(usize, Rect)]| {
            let tape = Tape::new();
            let p = det.params.bind(&tape, false);
            let fx = det.features(&p, tape.constant(images(2, 16, seed))).unwrap();
            let fy = det.features(&p, tape.constant(images(2, 16, !seed))).unwrap();
            roi_perceptual_loss(fx, fy, rois, det.stride(), 3).unwrap().item()
        };
        let before = loss(&rois);
        rois.reverse();
        rois.rotate_left(k / 2);
        prop_assert!((loss(&rois) - before).abs() <= 1e-12 * before.max(1.0));
    }
}
