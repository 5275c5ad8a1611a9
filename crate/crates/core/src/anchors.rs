//! Rotated boxes, rotated IoU, shape-only K-means box priors and proposal
//! candidates placed on the anchor lattice.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{normalize_half_turn, CameraModel, CircularAnchor, ImagePoint};
use crate::rng::XorShift64Star;

/// Oriented rectangle. `theta` is the image angle of the `w` axis; in pixel
/// coordinates the `w` axis is `(cos θ, -sin θ)` and the `h` axis `(sin θ, cos θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RotatedBox {
    /// Builds a box with `theta` folded into `[-π/2, π/2)`.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box sides must be positive");
        Self {
            cx,
            cy,
            w,
            h,
            theta: normalize_half_turn(theta),
        }
    }

    pub fn center(&self) -> ImagePoint {
        ImagePoint::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Unit vectors of the `w` and `h` axes in pixel coordinates.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.theta.sin_cos();
        ([c, -s], [s, c])
    }

    /// Pixel position of box-local coordinates `(u, v)` measured from the center.
    pub fn local_to_image(&self, u: f64, v: f64) -> ImagePoint {
        let (a, b) = self.axes();
        ImagePoint::new(self.cx + u * a[0] + v * b[0], self.cy + u * a[1] + v * b[1])
    }

    /// Corners with positive signed area in pixel coordinates.
    pub fn corners(&self) -> [ImagePoint; 4] {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [
            self.local_to_image(-hw, -hh),
            self.local_to_image(hw, -hh),
            self.local_to_image(hw, hh),
            self.local_to_image(-hw, hh),
        ]
    }

    pub fn contains(&self, p: &ImagePoint) -> bool {
        let (a, b) = self.axes();
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        let u = dx * a[0] + dy * a[1];
        let v = dx * b[0] + dy * b[1];
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    /// Same center and angle, sides multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }

    fn sort_key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }
}

fn cmp_boxes(a: &RotatedBox, b: &RotatedBox) -> Ordering {
    a.sort_key()
        .iter()
        .zip(b.sort_key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn cross(o: &ImagePoint, a: &ImagePoint, b: &ImagePoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn polygon_area(poly: &[ImagePoint]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (&poly[i], &poly[(i + 1) % n]);
            p.x * q.y - q.x * p.y
        })
        .sum();
    twice.abs() / 2.0
}

fn line_intersection(p: &ImagePoint, q: &ImagePoint, a: &ImagePoint, b: &ImagePoint) -> ImagePoint {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    ImagePoint::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Sutherland–Hodgman clipping of `subject` by the convex, positively
/// oriented `clip` polygon.
fn clip_polygon(subject: &[ImagePoint], clip: &[ImagePoint]) -> Vec<ImagePoint> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (&clip[i], &clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_in = cross(a, b, &prev) >= 0.0;
        for cur in input {
            let cur_in = cross(a, b, &cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(&prev, &cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(&prev, &cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

/// Intersection area of two rotated boxes.
pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    polygon_area(&clip_polygon(&a.corners(), &b.corners()))
}

/// Rotated IoU by convex clipping. Exactly symmetric: the pair is put in a
/// canonical order before clipping.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let (first, second) = match cmp_boxes(a, b) {
        Ordering::Equal => return 1.0,
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    let reach = (first.w.hypot(first.h) + second.w.hypot(second.h)) / 2.0;
    if first.center().distance(&second.center()) > reach {
        return 0.0;
    }
    let inter = intersection_area(first, second);
    let union = first.area() + second.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Ground-truth shape used for clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrior {
    pub w: f64,
    pub h: f64,
}

/// IoU of two boxes sharing a center and orientation.
pub fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Default number of priors.
pub const DEFAULT_K: usize = 6;
/// Default number of K-means restarts.
pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Sorted by area ascending.
    pub priors: Vec<BoxPrior>,
    pub avg_iou: f64,
}

fn nearest(b: &LabeledBox, priors: &[BoxPrior]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in priors.iter().enumerate() {
        let iou = shape_iou(b.w, b.h, p.w, p.h);
        // Strict comparison keeps the lowest index on ties.
        if iou > best.1 {
            best = (i, iou);
        }
    }
    best
}

/// Mean over `boxes` of the IoU with the nearest prior.
pub fn average_iou(boxes: &[LabeledBox], priors: &[BoxPrior]) -> f64 {
    boxes.iter().map(|b| nearest(b, priors).1).sum::<f64>() / boxes.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn seed_priors(boxes: &[LabeledBox], k: usize, rng: &mut XorShift64Star) -> Vec<BoxPrior> {
    let first = boxes[rng.below(boxes.len())];
    let mut priors = vec![BoxPrior { w: first.w, h: first.h }];
    while priors.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|b| {
                let d = 1.0 - nearest(b, &priors).1;
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            weights
                .iter()
                .position(|w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or(boxes.len() - 1)
        } else {
            rng.below(boxes.len())
        };
        priors.push(BoxPrior {
            w: boxes[pick].w,
            h: boxes[pick].h,
        });
    }
    priors
}

fn lloyd(boxes: &[LabeledBox], mut priors: Vec<BoxPrior>) -> Vec<BoxPrior> {
    let k = priors.len();
    let mut assignment: Vec<usize> = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let next: Vec<usize> = boxes.iter().map(|b| nearest(b, &priors).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        let mut ws = vec![Vec::new(); k];
        let mut hs = vec![Vec::new(); k];
        for (b, &c) in boxes.iter().zip(&assignment) {
            ws[c].push(b.w);
            hs[c].push(b.h);
        }
        for c in 0..k {
            if ws[c].is_empty() {
                // Re-seed an empty cluster at the worst-fit box.
                let worst = boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, nearest(b, &priors).1))
                    .fold((0, f64::INFINITY), |acc, (i, iou)| if iou < acc.1 { (i, iou) } else { acc });
                priors[c] = BoxPrior {
                    w: boxes[worst.0].w,
                    h: boxes[worst.0].h,
                };
            } else {
                priors[c] = BoxPrior {
                    w: median(&mut ws[c]),
                    h: median(&mut hs[c]),
                };
            }
        }
    }
    priors
}

/// Lloyd's K-means under the `1 - IoU` shape distance with median centroid
/// updates and k-means++ seeding; best of `restarts` runs by average IoU.
pub fn kmeans_box_priors(boxes: &[LabeledBox], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidParameter("K and restarts must be >= 1".into()));
    }
    if boxes.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} labeled boxes cannot seed {k} priors",
            boxes.len()
        )));
    }
    if boxes.iter().any(|b| !(b.w > 0.0 && b.h > 0.0)) {
        return Err(Error::InvalidInput("labeled boxes must have positive sides".into()));
    }
    let runs: Vec<KMeansResult> = (0..restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = XorShift64Star::for_stream(seed, restart as u64);
            let mut priors = lloyd(boxes, seed_priors(boxes, k, &mut rng));
            priors.sort_by(|a, b| (a.w * a.h).total_cmp(&(b.w * b.h)).then(a.w.total_cmp(&b.w)));
            let avg_iou = average_iou(boxes, &priors);
            KMeansResult { priors, avg_iou }
        })
        .collect();
    // First run wins on ties so the result does not depend on scheduling.
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.avg_iou > best.avg_iou { run } else { best })
        .expect("restarts >= 1");
    Ok(best)
}

/// Fraction of a 5×5 interior sample grid that must fall in the FOV disk.
pub const IN_FIELD_FRACTION: f64 = 0.8;
const IN_FIELD_GRID: usize = 5;

/// True when at least 80% of the box's 5×5 interior grid lies in the disk.
pub fn in_field(b: &RotatedBox, cam: &CameraModel) -> bool {
    let n = IN_FIELD_GRID;
    let mut inside = 0usize;
    for i in 0..n {
        for j in 0..n {
            let u = ((i as f64 + 0.5) / n as f64 - 0.5) * b.w;
            let v = ((j as f64 + 0.5) / n as f64 - 0.5) * b.h;
            if cam.contains(&b.local_to_image(u, v)) {
                inside += 1;
            }
        }
    }
    inside as f64 >= IN_FIELD_FRACTION * (n * n) as f64
}

/// One box per `(anchor, prior)`, dropped when not in field; ordered by
/// `(lat_index, lon_index, prior index)`.
pub fn candidates(lattice: &[CircularAnchor], priors: &[BoxPrior], cam: &CameraModel) -> Vec<RotatedBox> {
    let mut anchors: Vec<&CircularAnchor> = lattice.iter().collect();
    anchors.sort_by_key(|a| (a.lat_index, a.lon_index));
    anchors
        .iter()
        .flat_map(|a| {
            priors.iter().map(move |p| RotatedBox {
                cx: a.point.x,
                cy: a.point.y,
                w: p.w,
                h: p.h,
                theta: a.direction,
            })
        })
        .filter(|b| in_field(b, cam))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::anchor_lattice;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn random_box(rng: &mut XorShift64Star) -> RotatedBox {
        RotatedBox::new(
            rng.uniform(-20.0, 20.0),
            rng.uniform(-20.0, 20.0),
            rng.uniform(2.0, 40.0),
            rng.uniform(2.0, 40.0),
            rng.uniform(-PI, PI),
        )
    }

    #[test]
    fn iou_analytic_cases() {
        let a = RotatedBox::new(0.0, 0.0, 2.0, 1.0, 0.0);
        let b = RotatedBox::new(1.0, 0.0, 2.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rotated_iou(&a, &a), 1.0);
        let far = RotatedBox::new(30.0, 0.0, 2.0, 1.0, 0.7);
        assert_eq!(rotated_iou(&a, &far), 0.0);
    }

    #[test]
    fn swapped_sides_quarter_turn_is_same_set() {
        let a = RotatedBox::new(3.0, 4.0, 10.0, 4.0, 0.3);
        let b = RotatedBox::new(3.0, 4.0, 4.0, 10.0, 0.3 + PI / 2.0);
        assert!((rotated_iou(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nested_box() {
        let outer = RotatedBox::new(0.0, 0.0, 10.0, 10.0, 0.4);
        let inner = RotatedBox::new(0.0, 0.0, 2.0, 3.0, -1.0);
        assert!((rotated_iou(&outer, &inner) - 6.0 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_exactly() {
        let mut rng = XorShift64Star::for_stream(11, 0);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            assert_eq!(rotated_iou(&a, &b), rotated_iou(&b, &a));
        }
    }

    proptest! {
        #[test]
        fn rigid_rotation_invariance(
            ax in -10.0..10.0f64, ay in -10.0..10.0f64, aw in 1.0..20.0f64, ah in 1.0..20.0f64, at in -3.0..3.0f64,
            bx in -10.0..10.0f64, by in -10.0..10.0f64, bw in 1.0..20.0f64, bh in 1.0..20.0f64, bt in -3.0..3.0f64,
            rot in -3.0..3.0f64,
        ) {
            let a = RotatedBox::new(ax, ay, aw, ah, at);
            let b = RotatedBox::new(bx, by, bw, bh, bt);
            // Rotating by +rot on screen maps (x, y) to (x cos + y sin, -x sin + y cos).
            let turn = |r: &RotatedBox| {
                let (s, c) = rot.sin_cos();
                RotatedBox::new(r.cx * c + r.cy * s, -r.cx * s + r.cy * c, r.w, r.h, r.theta + rot)
            };
            let before = rotated_iou(&a, &b);
            let after = rotated_iou(&turn(&a), &turn(&b));
            prop_assert!((before - after).abs() < 1e-9, "{} vs {}", before, after);
            prop_assert!((0.0..=1.0).contains(&before));
        }
    }

    #[test]
    fn kmeans_single_shape() {
        let boxes = vec![LabeledBox { w: 30.0, h: 10.0 }; 20];
        let r = kmeans_box_priors(&boxes, 1, 5, 3).unwrap();
        assert_eq!(r.priors, vec![BoxPrior { w: 30.0, h: 10.0 }]);
        assert_eq!(r.avg_iou, 1.0);
    }

    #[test]
    fn kmeans_two_pure_clusters() {
        let mut boxes = vec![LabeledBox { w: 10.0, h: 20.0 }; 50];
        boxes.extend(vec![LabeledBox { w: 40.0, h: 5.0 }; 50]);
        let r = kmeans_box_priors(&boxes, 2, 9, 4).unwrap();
        assert_eq!(r.priors, vec![BoxPrior { w: 10.0, h: 20.0 }, BoxPrior { w: 40.0, h: 5.0 }]);
        assert_eq!(r.avg_iou, 1.0);
    }

    #[test]
    fn kmeans_errors() {
        let boxes = vec![LabeledBox { w: 1.0, h: 1.0 }; 3];
        assert!(matches!(kmeans_box_priors(&boxes, 4, 0, 1), Err(Error::InsufficientData(_))));
        assert!(kmeans_box_priors(&boxes, 0, 0, 1).is_err());
        assert!(kmeans_box_priors(&boxes, 1, 0, 0).is_err());
    }

    #[test]
    fn kmeans_deterministic() {
        let mut rng = XorShift64Star::for_stream(2, 0);
        let boxes: Vec<LabeledBox> = (0..200)
            .map(|_| LabeledBox {
                w: rng.uniform(5.0, 80.0),
                h: rng.uniform(5.0, 80.0),
            })
            .collect();
        let a = kmeans_box_priors(&boxes, 6, 17, 5).unwrap();
        let b = kmeans_box_priors(&boxes, 6, 17, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.priors.windows(2).all(|w| w[0].w * w[0].h <= w[1].w * w[1].h));
    }

    #[test]
    fn candidate_counts() {
        let cam = CameraModel::default();
        let lattice = anchor_lattice(&cam, 8).unwrap();
        let tiny = vec![BoxPrior { w: 2.0, h: 2.0 }; 6];
        let c = candidates(&lattice, &tiny, &cam);
        assert_eq!(c.len(), 64 * 6);
        for (i, b) in c.iter().enumerate() {
            assert_eq!(b.theta, lattice[i / 6].direction);
        }
    }

    #[test]
    fn oversized_prior_dropped_near_rim() {
        let cam = CameraModel::default();
        let l = 8;
        let lattice = anchor_lattice(&cam, l).unwrap();
        let big = 5.0 * cam.rim_radius();
        let priors: Vec<BoxPrior> = vec![
            BoxPrior { w: 4.0, h: 4.0 },
            BoxPrior { w: 10.0, h: 6.0 },
            BoxPrior { w: 20.0, h: 8.0 },
            BoxPrior { w: 30.0, h: 10.0 },
            BoxPrior { w: 40.0, h: 20.0 },
            BoxPrior { w: big, h: 10.0 },
        ];
        let got = candidates(&lattice, &priors, &cam);
        // Brute-force oracle: explicit Cartesian product, explicit grid test.
        let mut expect = Vec::new();
        for a in &lattice {
            for p in &priors {
                let (s, c) = a.direction.sin_cos();
                let mut inside = 0;
                for i in 0..5 {
                    for j in 0..5 {
                        let u = (i as f64 - 2.0) / 5.0 * p.w;
                        let v = (j as f64 - 2.0) / 5.0 * p.h;
                        let x = a.point.x + u * c + v * s;
                        let y = a.point.y - u * s + v * c;
                        if (x - cam.center_x()).hypot(y - cam.center_y()) <= cam.rim_radius() {
                            inside += 1;
                        }
                    }
                }
                if inside >= 20 {
                    expect.push((a.point.x, a.point.y, p.w, p.h, a.direction));
                }
            }
        }
        let got_tuples: Vec<_> = got.iter().map(|b| (b.cx, b.cy, b.w, b.h, b.theta)).collect();
        assert_eq!(got_tuples, expect);
        assert!(got.iter().all(|b| b.w != big), "w = 5R loses both outer sample columns");
        assert!(got.len() < lattice.len() * priors.len());
    }
}
