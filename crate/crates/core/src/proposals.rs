//! Contrast saliency scoring of candidates, rotated NMS and region selection.

use rayon::prelude::*;

use crate::anchors::{rotated_iou, RotatedBox};
use crate::error::{Error, Result};
use crate::features::{pool_region, roi_align_raw, FeaturePyramid, MultiScaleFeature, LEVELS};

/// Regions kept per image unless configured otherwise.
pub const DEFAULT_TOP_N: usize = 8;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

const SCORE_BINS: usize = 7;
const SCORE_SAMPLES: usize = 2;
const SURROUND_SCALE: f64 = 1.5;

/// Objectness stand-in: anything that scores a box against a pyramid.
pub trait ProposalScorer: Send + Sync {
    fn score(&self, pyr: &FeaturePyramid, b: &RotatedBox) -> f64;
}

/// Center-minus-surround contrast of the channel-mean activation.
///
/// Per level, `e_in` is the mean of the 7×7 RoIAlign bins of the box and
/// `e_big` the same for the box dilated ×1.5; the surrounding ring energy is
/// `(2.25 e_big - e_in) / 1.25` and the level score `e_in - e_ring`. The
/// result is the mean over the four levels.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContrastScorer;

fn mean_activation(pyr: &FeaturePyramid, level: usize, b: &RotatedBox) -> f64 {
    let l = pyr.level(level);
    // The channel mean commutes with bilinear sampling, so the single-channel
    // mean map gives the same bins as averaging the 256-channel RoIAlign output.
    let bins = roi_align_raw(l.channel_means(), l.grid(), 1, l.stride(), b, SCORE_BINS, SCORE_SAMPLES);
    bins.iter().sum::<f64>() / bins.len() as f64
}

impl ProposalScorer for ContrastScorer {
    fn score(&self, pyr: &FeaturePyramid, b: &RotatedBox) -> f64 {
        let big = b.scaled(SURROUND_SCALE);
        let area_ratio = SURROUND_SCALE * SURROUND_SCALE;
        let total: f64 = (0..LEVELS)
            .map(|i| {
                let e_in = mean_activation(pyr, i, b);
                let e_big = mean_activation(pyr, i, &big);
                let e_ring = (area_ratio * e_big - e_in) / (area_ratio - 1.0);
                e_in - e_ring
            })
            .sum();
        total / LEVELS as f64
    }
}

pub fn saliency_score(pyr: &FeaturePyramid, b: &RotatedBox) -> f64 {
    ContrastScorer.score(pyr, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRecord {
    pub rbox: RotatedBox,
    pub score: f64,
    pub feature: MultiScaleFeature,
}

/// Greedy NMS over `scores`, returning kept indices in score order.
///
/// Ties are broken by input order; a box is suppressed when its rotated IoU
/// with an already kept box is `>= nms_iou`.
pub fn greedy_nms(boxes: &[RotatedBox], scores: &[f64], top_n: usize, nms_iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(top_n);
    for i in order {
        if kept.len() == top_n {
            break;
        }
        if kept.iter().all(|&k| rotated_iou(&boxes[k], &boxes[i]) < nms_iou) {
            kept.push(i);
        }
    }
    kept
}

fn validate(top_n: usize, nms_iou: f64) -> Result<()> {
    if top_n == 0 {
        return Err(Error::InvalidParameter("top_n must be >= 1".into()));
    }
    if !(nms_iou > 0.0 && nms_iou < 1.0) {
        return Err(Error::InvalidParameter(format!("nms_iou must lie in (0, 1), got {nms_iou}")));
    }
    Ok(())
}

/// Scores, suppresses and pools up to `top_n` regions with `scorer`.
pub fn select_regions_with(
    scorer: &dyn ProposalScorer,
    pyr: &FeaturePyramid,
    cands: &[RotatedBox],
    top_n: usize,
    nms_iou: f64,
) -> Result<Vec<RegionRecord>> {
    validate(top_n, nms_iou)?;
    let scores: Vec<f64> = cands.par_iter().map(|b| scorer.score(pyr, b)).collect();
    let kept = greedy_nms(cands, &scores, top_n, nms_iou);
    Ok(kept
        .into_iter()
        .map(|i| RegionRecord {
            rbox: cands[i],
            score: scores[i],
            feature: pool_region(pyr, &cands[i]),
        })
        .collect())
}

pub fn select_regions(pyr: &FeaturePyramid, cands: &[RotatedBox], top_n: usize, nms_iou: f64) -> Result<Vec<RegionRecord>> {
    select_regions_with(&ContrastScorer, pyr, cands, top_n, nms_iou)
}
