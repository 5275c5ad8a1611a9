//! Global and regional similarity, ranking, mAP and the ablation harness.
//!
//! Per image pair, with `d` the Euclidean distance between same-level
//! descriptors:
//!
//! ```text
//! dis_G        = Σ_i d(G^Q_i, G^I_i)                  SS^G = 1 / (1 + dis_G)
//! dis_R(r)     = (1/r_d) Σ_r' Σ_i d(R^Q_r,i, R^I_r',i)
//! SS^R         = 1 / (1 + (1/r_q) Σ_r dis_R(r))
//! SS           = SS^G + SS^R
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{FeatureScalar, MultiScaleFeature, LEVELS};
use crate::image::GrayImage;
use crate::index_store::{build_index, Index, IndexParams};
use crate::pipeline::{AnchorMode, ImageFeatures, IndexConfig};

/// Per-query relevant ids.
pub type Relevance = BTreeMap<String, BTreeSet<String>>;

/// Which parts of the score are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreParts {
    Both,
    GlobalOnly,
    RegionalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreMode {
    pub levels: [bool; LEVELS],
    pub parts: ScoreParts,
}

impl ScoreMode {
    pub const FULL: ScoreMode = ScoreMode {
        levels: [true; LEVELS],
        parts: ScoreParts::Both,
    };
}

/// Feature-scale variants from the multi-scale ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// `R-P(i+2)` alone.
    Regional(usize),
    /// `G-P(i+2)` alone.
    Global(usize),
    AllRegional,
    AllGlobal,
    Combined,
}

impl FeatureMode {
    /// Rows in table order: single regional levels, `R-Pi`, `G-P2`, `G-P5`, `G-Pi`, `R-Pi&G-Pi`.
    pub const TABLE: [FeatureMode; 9] = [
        FeatureMode::Regional(0),
        FeatureMode::Regional(1),
        FeatureMode::Regional(2),
        FeatureMode::Regional(3),
        FeatureMode::AllRegional,
        FeatureMode::Global(0),
        FeatureMode::Global(3),
        FeatureMode::AllGlobal,
        FeatureMode::Combined,
    ];

    pub fn score_mode(&self) -> ScoreMode {
        let single = |i: usize| std::array::from_fn(|j| j == i);
        match *self {
            FeatureMode::Regional(i) => ScoreMode {
                levels: single(i),
                parts: ScoreParts::RegionalOnly,
            },
            FeatureMode::Global(i) => ScoreMode {
                levels: single(i),
                parts: ScoreParts::GlobalOnly,
            },
            FeatureMode::AllRegional => ScoreMode {
                levels: [true; LEVELS],
                parts: ScoreParts::RegionalOnly,
            },
            FeatureMode::AllGlobal => ScoreMode {
                levels: [true; LEVELS],
                parts: ScoreParts::GlobalOnly,
            },
            FeatureMode::Combined => ScoreMode::FULL,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            FeatureMode::Regional(i) => format!("R-P{}", i + 2),
            FeatureMode::Global(i) => format!("G-P{}", i + 2),
            FeatureMode::AllRegional => "R-Pi".into(),
            FeatureMode::AllGlobal => "G-Pi".into(),
            FeatureMode::Combined => "R-Pi&G-Pi".into(),
        }
    }
}

/// Euclidean distance in `f64`, accumulated in eight interleaved lanes.
#[inline]
pub fn level_distance<A: FeatureScalar, B: FeatureScalar>(a: &[A], b: &[B]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            let d = x[k].into() - y[k].into();
            lanes[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = (*x).into() - (*y).into();
        tail += d * d;
    }
    (lanes.iter().sum::<f64>() + tail).sqrt()
}

fn feature_distance<A: FeatureScalar, B: FeatureScalar>(
    q: &MultiScaleFeature<A>,
    i: &MultiScaleFeature<B>,
    levels: &[bool; LEVELS],
) -> f64 {
    (0..LEVELS)
        .filter(|&l| levels[l])
        .map(|l| level_distance(q.level(l), i.level(l)))
        .sum()
}

pub fn global_similarity_with<A: FeatureScalar, B: FeatureScalar>(
    q: &MultiScaleFeature<A>,
    i: &MultiScaleFeature<B>,
    levels: &[bool; LEVELS],
) -> f64 {
    1.0 / (1.0 + feature_distance(q, i, levels))
}

/// `SS^G` over all four levels.
pub fn global_similarity<A: FeatureScalar, B: FeatureScalar>(q: &MultiScaleFeature<A>, i: &MultiScaleFeature<B>) -> f64 {
    global_similarity_with(q, i, &[true; LEVELS])
}

/// `SS^R`; 1 when both sides have no regions, 0 when exactly one side has none.
pub fn regional_similarity_with<A: FeatureScalar, B: FeatureScalar>(
    q: &[&MultiScaleFeature<A>],
    i: &[&MultiScaleFeature<B>],
    levels: &[bool; LEVELS],
) -> f64 {
    match (q.is_empty(), i.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mean_dis: f64 = q
        .iter()
        .map(|qr| i.iter().map(|ir| feature_distance(*qr, *ir, levels)).sum::<f64>() / i.len() as f64)
        .sum::<f64>()
        / q.len() as f64;
    1.0 / (1.0 + mean_dis)
}

pub fn regional_similarity<A: FeatureScalar, B: FeatureScalar>(q: &[&MultiScaleFeature<A>], i: &[&MultiScaleFeature<B>]) -> f64 {
    regional_similarity_with(q, i, &[true; LEVELS])
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub image_id: String,
    pub ss_g: f64,
    pub ss_r: f64,
    pub ss: f64,
}

/// Scores one query against one entry's features under `mode`.
pub fn score_pair(query: &ImageFeatures, entry: &ImageFeatures, mode: &ScoreMode) -> (f64, f64, f64) {
    let ss_g = global_similarity_with(&query.global, &entry.global, &mode.levels);
    let qr: Vec<_> = query.regions.iter().map(|r| &r.feature).collect();
    let ir: Vec<_> = entry.regions.iter().map(|r| &r.feature).collect();
    let ss_r = regional_similarity_with(&qr, &ir, &mode.levels);
    let ss = match mode.parts {
        ScoreParts::Both => ss_g + ss_r,
        ScoreParts::GlobalOnly => ss_g,
        ScoreParts::RegionalOnly => ss_r,
    };
    (ss_g, ss_r, ss)
}

/// Sorts by `ss` descending, ties by id ascending.
fn sort_results(results: &mut [QueryResult]) {
    results.sort_by(|a, b| b.ss.total_cmp(&a.ss).then_with(|| a.image_id.cmp(&b.image_id)));
}

/// Ranks every index entry against a query built with `query_params`.
pub fn rank(query: &ImageFeatures, query_params: &IndexParams, idx: &Index) -> Result<Vec<QueryResult>> {
    rank_with_mode(query, query_params, idx, &ScoreMode::FULL)
}

pub fn rank_with_mode(query: &ImageFeatures, query_params: &IndexParams, idx: &Index, mode: &ScoreMode) -> Result<Vec<QueryResult>> {
    if let Some(diff) = idx.params().mismatch(query_params) {
        return Err(Error::ConfigMismatch(diff));
    }
    Ok(rank_unchecked(query, idx, mode))
}

fn rank_unchecked(query: &ImageFeatures, idx: &Index, mode: &ScoreMode) -> Vec<QueryResult> {
    let mut results: Vec<QueryResult> = idx
        .entries()
        .par_iter()
        .map(|e| {
            let (ss_g, ss_r, ss) = score_pair(query, &e.features, mode);
            QueryResult {
                image_id: e.image_id.clone(),
                ss_g,
                ss_r,
                ss,
            }
        })
        .collect();
    sort_results(&mut results);
    results
}

/// A ranked result list for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub ranking: Vec<String>,
}

/// Mean over relevant items of precision at their rank; the query's own id is skipped.
pub fn average_precision(query_id: &str, ranking: &[String], relevant: &BTreeSet<String>) -> Result<f64> {
    let n_relevant = relevant.iter().filter(|r| r.as_str() != query_id).count();
    if n_relevant == 0 {
        return Err(Error::InvalidInput(format!("query `{query_id}` has an empty relevance set")));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, id) in ranking.iter().filter(|id| id.as_str() != query_id).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(total / n_relevant as f64)
}

pub fn mean_average_precision(runs: &[RankedList], relevance: &Relevance) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("mAP needs at least one query".into()));
    }
    let mut sum = 0.0;
    for run in runs {
        let relevant = relevance
            .get(&run.query_id)
            .ok_or_else(|| Error::InvalidInput(format!("no relevance set for query `{}`", run.query_id)))?;
        sum += average_precision(&run.query_id, &run.ranking, relevant)?;
    }
    Ok(sum / runs.len() as f64)
}

/// Uses every indexed image named in `relevance` as a query against the
/// index (its stored features are the query features) and returns the mAP.
pub fn evaluate_index(idx: &Index, relevance: &Relevance, mode: &ScoreMode) -> Result<f64> {
    let runs = relevance
        .keys()
        .map(|qid| {
            let entry = idx
                .get(qid)
                .ok_or_else(|| Error::InvalidInput(format!("query `{qid}` is not in the index")))?;
            let ranking = rank_unchecked(&entry.features, idx, mode).into_iter().map(|r| r.image_id).collect();
            Ok(RankedList {
                query_id: qid.clone(),
                ranking,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_average_precision(&runs, relevance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationConfig {
    pub anchor_mode: AnchorMode,
    pub feature_mode: FeatureMode,
}

/// mAP of one ablation cell over `images`, querying with every id in `relevance`.
pub fn run_ablation(images: &[(String, GrayImage)], relevance: &Relevance, base: &IndexConfig, ablation: AblationConfig) -> Result<f64> {
    let cfg = IndexConfig {
        anchor_mode: ablation.anchor_mode,
        ..base.clone()
    };
    let idx = build_index(images, &cfg)?;
    evaluate_index(&idx, relevance, &ablation.feature_mode.score_mode())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub anchor_mode: AnchorMode,
    pub feature_mode: FeatureMode,
    pub map: f64,
}

/// Every `(anchor mode, feature mode)` cell, building one index per anchor mode.
pub fn ablation_grid(
    images: &[(String, GrayImage)],
    relevance: &Relevance,
    base: &IndexConfig,
    anchor_modes: &[AnchorMode],
    feature_modes: &[FeatureMode],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &anchor_mode in anchor_modes {
        let cfg = IndexConfig {
            anchor_mode,
            ..base.clone()
        };
        let idx = build_index(images, &cfg)?;
        for &feature_mode in feature_modes {
            rows.push(AblationRow {
                anchor_mode,
                feature_mode,
                map: evaluate_index(&idx, relevance, &feature_mode.score_mode())?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::RotatedBox;
    use crate::features::{StoredFeature, CHANNELS, FEATURE_LEN};
    use crate::geometry::CameraModel;
    use crate::index_store::IndexEntry;
    use crate::pipeline::Region;
    use crate::rng::XorShift64Star;

    fn unit_feature(rng: &mut XorShift64Star) -> MultiScaleFeature {
        MultiScaleFeature::from_levels(std::array::from_fn(|_| (0..CHANNELS).map(|_| rng.next_f64()).collect()))
    }

    /// Plain nested-loop reading of the score formulas.
    fn oracle_dis(a: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for level in 0..4 {
            let mut sq = 0.0;
            for c in 0..256 {
                let d = a[level * 256 + c] - b[level * 256 + c];
                sq += d * d;
            }
            total += sq.sqrt();
        }
        total
    }

    fn oracle_regional(q: &[MultiScaleFeature], i: &[MultiScaleFeature]) -> f64 {
        let mut outer = 0.0;
        for qr in q {
            let mut inner = 0.0;
            for ir in i {
                inner += oracle_dis(qr.as_slice(), ir.as_slice());
            }
            outer += inner / i.len() as f64;
        }
        1.0 / (1.0 + outer / q.len() as f64)
    }

    /// Feature with per-level difference of exactly 1 against the reference basis.
    fn basis(offset: usize) -> MultiScaleFeature {
        MultiScaleFeature::from_levels(std::array::from_fn(|_| {
            let mut v = vec![0.0; CHANNELS];
            v[offset] = 1.0;
            v
        }))
    }

    #[test]
    fn global_analytic_cases() {
        let mut rng = XorShift64Star::for_stream(1, 0);
        let f = unit_feature(&mut rng);
        assert_eq!(global_similarity(&f, &f), 1.0);
        // Zero against a basis vector per level: distance 1 per level, 4 in total.
        let a = MultiScaleFeature::from_raw(vec![0.0; FEATURE_LEN]).unwrap();
        let b = basis(3);
        assert_eq!(global_similarity(&a, &b), 0.2);
    }

    #[test]
    fn regional_analytic_cases() {
        let mut rng = XorShift64Star::for_stream(2, 0);
        let f = unit_feature(&mut rng);
        assert_eq!(regional_similarity(&[&f], &[&f]), 1.0);
        // Per-region dis of 1 and 3 against a single zero region.
        let zero = MultiScaleFeature::from_raw(vec![0.0; FEATURE_LEN]).unwrap();
        let one = MultiScaleFeature::from_raw((0..FEATURE_LEN).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let three = MultiScaleFeature::from_raw(
            (0..FEATURE_LEN)
                .map(|i| if i % CHANNELS == 0 && i < 3 * CHANNELS { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        assert_eq!(regional_similarity(&[&one, &three], &[&zero]), 1.0 / 3.0);
        let empty: [&MultiScaleFeature; 0] = [];
        assert_eq!(regional_similarity(&empty, &empty), 1.0);
        assert_eq!(regional_similarity(&[&f], &empty), 0.0);
        assert_eq!(regional_similarity(&empty, &[&f]), 0.0);
    }

    #[test]
    fn formulas_match_loop_oracle() {
        let mut rng = XorShift64Star::for_stream(3, 0);
        for _ in 0..100 {
            let q = unit_feature(&mut rng);
            let i = unit_feature(&mut rng);
            let expect = 1.0 / (1.0 + oracle_dis(q.as_slice(), i.as_slice()));
            assert!((global_similarity(&q, &i) - expect).abs() < 1e-12);
            let qs: Vec<_> = (0..3).map(|_| unit_feature(&mut rng)).collect();
            let is: Vec<_> = (0..4).map(|_| unit_feature(&mut rng)).collect();
            let got = regional_similarity(&qs.iter().collect::<Vec<_>>(), &is.iter().collect::<Vec<_>>());
            assert!((got - oracle_regional(&qs, &is)).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_analytic_and_self_exclusion() {
        let rel: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let ranking: Vec<String> = ["q", "a", "x", "b"].iter().map(|s| s.to_string()).collect();
        let ap = average_precision("q", &ranking, &rel).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let top: Vec<String> = ["a", "b", "x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(average_precision("q", &top, &rel).unwrap(), 1.0);
        assert!(average_precision("q", &top, &BTreeSet::new()).is_err());
        assert!(mean_average_precision(&[], &Relevance::new()).is_err());
    }

    fn entry(id: &str, global: StoredFeature, regions: Vec<StoredFeature>) -> IndexEntry {
        IndexEntry {
            image_id: id.into(),
            features: ImageFeatures {
                global,
                regions: regions
                    .into_iter()
                    .map(|feature| Region {
                        rbox: RotatedBox::new(100.0, 100.0, 10.0, 10.0, 0.0),
                        feature,
                    })
                    .collect(),
            },
        }
    }

    fn params() -> IndexParams {
        IndexParams {
            l: 8,
            k: 6,
            top_n: 8,
            nms_iou: 0.5,
            seed: 1,
            camera: CameraModel::default(),
        }
    }

    #[test]
    fn single_entry_and_self_match() {
        let mut rng = XorShift64Star::for_stream(4, 0);
        let entries: Vec<IndexEntry> = (0..5)
            .map(|i| entry(&format!("e{i}"), unit_feature(&mut rng).to_stored(), vec![unit_feature(&mut rng).to_stored()]))
            .collect();
        let idx = Index::from_entries(params(), entries.clone()).unwrap();
        let res = rank(&entries[3].features, &params(), &idx).unwrap();
        assert_eq!(res[0].image_id, "e3");
        assert_eq!(res[0].ss, 2.0);
        assert_eq!(res.len(), 5);
        let one = Index::from_entries(params(), vec![entries[0].clone()]).unwrap();
        assert_eq!(rank(&entries[2].features, &params(), &one).unwrap()[0].image_id, "e0");
    }

    #[test]
    fn mismatched_params_rejected() {
        let idx = Index::from_entries(params(), vec![]).unwrap();
        let q = ImageFeatures {
            global: StoredFeature::zeros(),
            regions: vec![],
        };
        let other = IndexParams { seed: 2, ..params() };
        assert!(matches!(rank(&q, &other, &idx), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn combined_mode_is_rank() {
        let mut rng = XorShift64Star::for_stream(6, 0);
        let entries: Vec<IndexEntry> = (0..12)
            .map(|i| {
                entry(
                    &format!("e{i:02}"),
                    unit_feature(&mut rng).to_stored(),
                    (0..1 + rng.below(3)).map(|_| unit_feature(&mut rng).to_stored()).collect(),
                )
            })
            .collect();
        let idx = Index::from_entries(params(), entries.clone()).unwrap();
        let a = rank(&entries[0].features, &params(), &idx).unwrap();
        let b = rank_with_mode(&entries[0].features, &params(), &idx, &FeatureMode::Combined.score_mode()).unwrap();
        assert_eq!(a, b);
        let g = rank_with_mode(&entries[0].features, &params(), &idx, &FeatureMode::AllGlobal.score_mode()).unwrap();
        assert!(g.iter().all(|r| r.ss == r.ss_g));
        let r2 = rank_with_mode(&entries[0].features, &params(), &idx, &FeatureMode::Regional(0).score_mode()).unwrap();
        for r in &r2 {
            let e = idx.get(&r.image_id).unwrap();
            let qr: Vec<_> = entries[0].features.regions.iter().map(|x| &x.feature).collect();
            let ir: Vec<_> = e.regions().iter().map(|x| &x.feature).collect();
            let mut expect = 0.0;
            for q in &qr {
                for i in &ir {
                    expect += level_distance(q.level(0), i.level(0));
                }
            }
            expect /= (qr.len() * ir.len()) as f64;
            assert!((r.ss - 1.0 / (1.0 + expect)).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_labels() {
        let labels: Vec<String> = FeatureMode::TABLE.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["R-P2", "R-P3", "R-P4", "R-P5", "R-Pi", "G-P2", "G-P5", "G-Pi", "R-Pi&G-Pi"]);
    }
}
