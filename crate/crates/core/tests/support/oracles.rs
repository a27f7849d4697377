//! Slow reference implementations written straight from the definitions.

use lidnet::boxes::Rect;
use lidnet::metrics::*;
use lidnet::Tensor;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Q = Ratio<i64>;

pub fn random_image(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.random::<f64>())
}

/// Weighted statistics over every window position, straight from the definition.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &SsimConfig) -> f64 {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let k = cfg.window;
    let c = (k as f64 - 1.0) / 2.0;
    let mut w = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *v = (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp();
            total += *v;
        }
    }
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let (x, y) = (a.data(), b.data());
    let mut sum = 0.0;
    let mut count = 0;
    for r0 in 0..=rows - k {
        for q0 in 0..=cols - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (r0 + i) * cols + q0 + j;
                    mx += w[i][j] / total * x[p];
                    my += w[i][j] / total * y[p];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (r0 + i) * cols + q0 + j;
                    let wt = w[i][j] / total;
                    vx += wt * (x[p] - mx).powi(2);
                    vy += wt * (y[p] - my).powi(2);
                    cov += wt * (x[p] - mx) * (y[p] - my);
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn quantize_oracle(px: &[f64], levels: usize) -> Vec<usize> {
    let lo = px.iter().cloned().fold(f64::MAX, f64::min);
    let hi = px.iter().cloned().fold(f64::MIN, f64::max);
    px.iter()
        .map(|&v| {
            if hi == lo {
                return 0;
            }
            let mut l = 0;
            // the largest level whose lower edge is at or below v
            while l + 1 < levels && (v - lo) / (hi - lo) * levels as f64 >= (l + 1) as f64 {
                l += 1;
            }
            l
        })
        .collect()
}

/// Pair counting over every ordered pixel pair, then Haralick features from marginals.
pub fn glcm_oracle(roi: &Roi, levels: usize, offset: (isize, isize), symmetric: bool) -> (Vec<f64>, [f64; 3]) {
    let q = quantize_oracle(&roi.pixels, levels);
    let mut m = vec![0.0; levels * levels];
    for p in 0..q.len() {
        for p2 in 0..q.len() {
            let (r, c) = ((p / roi.cols) as isize, (p % roi.cols) as isize);
            let (r2, c2) = ((p2 / roi.cols) as isize, (p2 % roi.cols) as isize);
            if (r2 - r, c2 - c) == offset {
                m[q[p] * levels + q[p2]] += 1.0;
                if symmetric {
                    m[q[p2] * levels + q[p]] += 1.0;
                }
            }
        }
    }
    let s: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v /= s);
    let px: Vec<f64> = (0..levels).map(|i| (0..levels).map(|j| m[i * levels + j]).sum()).collect();
    let py: Vec<f64> = (0..levels).map(|j| (0..levels).map(|i| m[i * levels + j]).sum()).collect();
    let mean = |p: &[f64]| p.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>();
    let (ux, uy) = (mean(&px), mean(&py));
    let sd = |p: &[f64], u: f64| p.iter().enumerate().map(|(i, v)| (i as f64 - u).powi(2) * v).sum::<f64>().sqrt();
    let (sx, sy) = (sd(&px, ux), sd(&py, uy));
    let mut exy = 0.0;
    let (mut energy, mut homogeneity) = (0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = m[i * levels + j];
            exy += (i * j) as f64 * v;
            energy += v * v;
            homogeneity += v / (1.0 + i.abs_diff(j) as f64);
        }
    }
    let correlation = if sx * sy > 1e-15 { (exy - ux * uy) / (sx * sy) } else { 1.0 };
    (m, [correlation, homogeneity, energy])
}

/// IoU by counting quarter-pixel cells, exact for quarter-integer corners.
pub fn iou_oracle(a: &Rect, b: &Rect) -> f64 {
    let cell = |r: &Rect, y: i64, x: i64| {
        let (cy, cx) = ((y as f64 + 0.5) / 4.0, (x as f64 + 0.5) / 4.0);
        cy > r.r1 && cy < r.r2 && cx > r.c1 && cx < r.c2
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..4 * 20 {
        for x in 0..4 * 20 {
            let (ia, ib) = (cell(a, y, x), cell(b, y, x));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching and the precision envelope, in exact rational arithmetic.
pub fn ap_oracle(dets: &[ScoredBox], gts: &[TruthBox], threshold: f64, mode: Interpolation) -> Q {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::new();
    for &i in &order {
        let d = dets[i];
        let candidates = (0..gts.len()).filter(|&g| !taken[g] && gts[g].image == d.image && gts[g].label == d.label);
        let best = candidates
            .map(|g| (g, d.rect.iou(&gts[g].rect)))
            .filter(|&(_, iou)| iou >= threshold)
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        flags.push(best.is_some());
    }
    let n = gts.len() as i64;
    let points: Vec<(Q, Q)> = (1..=flags.len())
        .map(|k| {
            let hits = flags[..k].iter().filter(|&&t| t).count() as i64;
            (Q::new(hits, n), Q::new(hits, k as i64))
        })
        .collect();
    let best_precision_at = |r: Q| points.iter().filter(|p| p.0 >= r).map(|p| p.1).max();
    match mode {
        Interpolation::AllPoints => {
            let mut levels: Vec<Q> = points.iter().map(|p| p.0).filter(|r| *r > Q::from(0)).collect();
            levels.dedup();
            let mut prev = Q::from(0);
            let mut ap = Q::from(0);
            for r in levels {
                ap += (r - prev) * best_precision_at(r).unwrap();
                prev = r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10).map(|t| best_precision_at(Q::new(t, 10)).unwrap_or(Q::from(0))).sum::<Q>() / Q::from(11)
        }
    }
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}
