//! Independent reference implementations shared by the integration targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use allsky::anchors::{shape_iou, LabeledBox};
use allsky::features::{FeatureLevel, MultiScaleFeature, CHANNELS, LEVELS};
use allsky::rng::XorShift64Star;
use allsky::RotatedBox;

/// Local box coordinates of an image point, from the box's corner convention.
fn inside(b: &RotatedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let dx = x - b.cx;
    let dy = y - b.cy;
    // w axis (cos, -sin), h axis (sin, cos) in image coordinates.
    let u = dx * c - dy * s;
    let v = dx * s + dy * c;
    u.abs() <= b.w / 2.0 && v.abs() <= b.h / 2.0
}

fn bounding(b: &RotatedBox) -> (f64, f64, f64, f64) {
    let (s, c) = b.theta.sin_cos();
    let ex = (b.w / 2.0 * c).abs() + (b.h / 2.0 * s).abs();
    let ey = (b.w / 2.0 * s).abs() + (b.h / 2.0 * c).abs();
    (b.cx - ex, b.cx + ex, b.cy - ey, b.cy + ey)
}

/// Stratified Monte-Carlo IoU: one jittered sample per cell of a `side × side`
/// grid over the joint bounding rectangle.
pub fn monte_carlo_iou(a: &RotatedBox, b: &RotatedBox, side: usize, rng: &mut XorShift64Star) -> f64 {
    let (ax0, ax1, ay0, ay1) = bounding(a);
    let (bx0, bx1, by0, by1) = bounding(b);
    let (x0, x1, y0, y1) = (ax0.min(bx0), ax1.max(bx1), ay0.min(by0), ay1.max(by1));
    let (dx, dy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.next_f64()) * dx;
            let y = y0 + (j as f64 + rng.next_f64()) * dy;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += u64::from(ia && ib);
            either += u64::from(ia || ib);
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn random_box(rng: &mut XorShift64Star) -> RotatedBox {
    RotatedBox::new(
        rng.uniform(-5.0, 5.0),
        rng.uniform(-5.0, 5.0),
        rng.uniform(2.0, 30.0),
        rng.uniform(2.0, 30.0),
        rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// For each `k` in `1..=k_max`, the best average IoU over every partition of
/// `boxes` into `k` groups that is stable under nearest-median reassignment.
pub fn exhaustive_kmeans_optimum(boxes: &[LabeledBox], k_max: usize) -> Vec<f64> {
    let n = boxes.len();
    let mut best = vec![f64::NEG_INFINITY; k_max + 1];
    // Restricted growth strings enumerate each set partition once.
    let mut labels = vec![0usize; n];
    let mut maxes = vec![0usize; n];
    loop {
        let k = maxes[n - 1] + 1;
        if k <= k_max {
            let centers: Vec<(f64, f64)> = (0..k)
                .map(|g| {
                    let members = || boxes.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(b, _)| b);
                    (median(members().map(|b| b.w).collect()), median(members().map(|b| b.h).collect()))
                })
                .collect();
            let mut stable = true;
            let mut total = 0.0;
            for (b, &l) in boxes.iter().zip(&labels) {
                let ious: Vec<f64> = centers.iter().map(|&(w, h)| shape_iou(b.w, b.h, w, h)).collect();
                let top = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if ious[l] < top {
                    stable = false;
                    break;
                }
                total += top;
            }
            if stable {
                best[k] = best[k].max(total / n as f64);
            }
        }
        // Advance to the next restricted growth string.
        let mut i = n - 1;
        loop {
            if i == 0 {
                return best[1..].to_vec();
            }
            let limit = maxes[i - 1] + 1;
            if labels[i] < limit {
                labels[i] += 1;
                maxes[i] = maxes[i - 1].max(labels[i]);
                for j in i + 1..n {
                    labels[j] = 0;
                    maxes[j] = maxes[i];
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Three well-separated shape clusters with 10% jitter.
pub fn three_cluster_shapes(n: usize, seed: u64) -> Vec<LabeledBox> {
    let mut rng = XorShift64Star::for_stream(seed, 99);
    let centers = [(20.0, 10.0), (60.0, 18.0), (30.0, 45.0)];
    (0..n)
        .map(|i| {
            let (w, h) = centers[i % 3];
            LabeledBox {
                w: w * rng.uniform(0.9, 1.1),
                h: h * rng.uniform(0.9, 1.1),
            }
        })
        .collect()
}

/// Bilinear read of one channel with zero outside the grid; `(x, y)` in image pixels.
pub fn bilinear(level: &FeatureLevel, x: f64, y: f64, c: usize) -> f64 {
    let s = level.stride() as f64;
    let g = level.grid() as i64;
    let fx = x / s - 0.5;
    let fy = y / s - 0.5;
    let (x0, y0) = (fx.floor() as i64, fy.floor() as i64);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let mut acc = 0.0;
    for (xi, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
        for (yi, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
            if (0..g).contains(&xi) && (0..g).contains(&yi) {
                acc += wx * wy * level.cell(xi as usize, yi as usize)[c];
            }
        }
    }
    acc
}

/// Bin `(row, col)` of an `out × out` RoIAlign with `spb²` samples per bin.
pub fn roi_bin(level: &FeatureLevel, b: &RotatedBox, out: usize, spb: usize, row: usize, col: usize) -> Vec<f64> {
    let (s, c) = b.theta.sin_cos();
    let mut acc = vec![0.0; CHANNELS];
    for sy in 0..spb {
        for sx in 0..spb {
            let u = b.w * ((col as f64 + (sx as f64 + 0.5) / spb as f64) / out as f64 - 0.5);
            let v = b.h * ((row as f64 + (sy as f64 + 0.5) / spb as f64) / out as f64 - 0.5);
            let x = b.cx + u * c + v * s;
            let y = b.cy - u * s + v * c;
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += bilinear(level, x, y, ch) / (spb * spb) as f64;
            }
        }
    }
    acc
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn multi_dist(a: &MultiScaleFeature, b: &MultiScaleFeature) -> f64 {
    let mut s = 0.0;
    for i in 0..LEVELS {
        s += dist(a.level(i), b.level(i));
    }
    s
}

pub fn oracle_global(q: &MultiScaleFeature, d: &MultiScaleFeature) -> f64 {
    1.0 / (1.0 + multi_dist(q, d))
}

pub fn oracle_regional(q: &[MultiScaleFeature], d: &[MultiScaleFeature]) -> f64 {
    if q.is_empty() && d.is_empty() {
        return 1.0;
    }
    if q.is_empty() || d.is_empty() {
        return 0.0;
    }
    let mut outer = 0.0;
    for a in q {
        let mut inner = 0.0;
        for b in d {
            inner += multi_dist(a, b);
        }
        outer += inner / d.len() as f64;
    }
    1.0 / (1.0 + outer / q.len() as f64)
}

pub fn random_feature(rng: &mut XorShift64Star) -> MultiScaleFeature {
    MultiScaleFeature::from_levels(std::array::from_fn(|_| (0..CHANNELS).map(|_| rng.next_f64()).collect()))
}

/// Average precision by the definition: mean of precision@rank over relevant hits.
pub fn oracle_ap(query: &str, ranking: &[String], relevant: &BTreeSet<String>) -> f64 {
    let list: Vec<&String> = ranking.iter().filter(|id| id.as_str() != query).collect();
    let mut precisions = Vec::new();
    for (pos, id) in list.iter().enumerate() {
        if relevant.contains(id.as_str()) {
            let hits = list[..=pos].iter().filter(|x| relevant.contains(x.as_str())).count();
            precisions.push(hits as f64 / (pos + 1) as f64);
        }
    }
    let rel = relevant.iter().filter(|r| r.as_str() != query).count();
    if rel == 0 {
        0.0
    } else {
        precisions.iter().sum::<f64>() / rel as f64
    }
}
