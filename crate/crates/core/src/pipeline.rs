//! Per-image extraction: pyramid, global feature, anchors, candidates and
//! selected regions, all under one validated configuration.

use crate::anchors::{self, BoxPrior, RotatedBox};
use crate::error::{Error, Result};
use crate::features::{global_feature, Backbone, PseudoBackbone, StoredFeature};
use crate::geometry::{anchor_lattice, CameraModel, CircularAnchor, ImagePoint};
use crate::image::GrayImage;
use crate::index_store::IndexParams;
use crate::proposals::{select_regions, DEFAULT_NMS_IOU, DEFAULT_TOP_N};

pub const DEFAULT_L: u32 = 8;
pub const DEFAULT_SEED: u64 = 20240101;

/// Anchor placement and box orientation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnchorMode {
    /// `RA+HD`: uniform `l × l` grid over the disk's bounding square, `θ = 0`.
    RectangularHorizontal,
    /// `CA+HD`: circular anchors, `θ` forced to 0.
    CircularHorizontal,
    /// `CA+DD`: circular anchors oriented along the deformation lines.
    CircularDeformation,
}

impl AnchorMode {
    pub const ALL: [AnchorMode; 3] = [
        AnchorMode::RectangularHorizontal,
        AnchorMode::CircularHorizontal,
        AnchorMode::CircularDeformation,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AnchorMode::RectangularHorizontal => "RA+HD",
            AnchorMode::CircularHorizontal => "CA+HD",
            AnchorMode::CircularDeformation => "CA+DD",
        }
    }
}

/// Uniform `l × l` lattice over the FOV bounding square, axis-aligned.
pub fn rectangular_lattice(cam: &CameraModel, l: u32) -> Result<Vec<CircularAnchor>> {
    if l == 0 {
        return Err(Error::InvalidParameter("lattice size l must be >= 1".into()));
    }
    let r = cam.rim_radius();
    let step = 2.0 * r / f64::from(l);
    let mut out = Vec::with_capacity((l * l) as usize);
    for row in 0..l {
        for col in 0..l {
            out.push(CircularAnchor {
                point: ImagePoint::new(
                    cam.center_x() - r + (f64::from(col) + 0.5) * step,
                    cam.center_y() - r + (f64::from(row) + 0.5) * step,
                ),
                direction: 0.0,
                lat_index: row,
                lon_index: col,
            });
        }
    }
    Ok(out)
}

/// Global feature plus selected regions of one image, at storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub global: StoredFeature,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub rbox: RotatedBox,
    pub feature: StoredFeature,
}

/// Rounds a box through `f32` without renormalizing the angle, so that
/// in-memory and persisted boxes compare equal.
pub fn narrow_box(b: &RotatedBox) -> RotatedBox {
    RotatedBox {
        cx: b.cx as f32 as f64,
        cy: b.cy as f32 as f64,
        w: b.w as f32 as f64,
        h: b.h as f32 as f64,
        theta: b.theta as f32 as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub camera: CameraModel,
    pub l: u32,
    pub priors: Vec<BoxPrior>,
    pub top_n: usize,
    pub nms_iou: f64,
    pub seed: u64,
    pub anchor_mode: AnchorMode,
}

impl IndexConfig {
    pub fn new(camera: CameraModel, priors: Vec<BoxPrior>) -> Self {
        Self {
            camera,
            l: DEFAULT_L,
            priors,
            top_n: DEFAULT_TOP_N,
            nms_iou: DEFAULT_NMS_IOU,
            seed: DEFAULT_SEED,
            anchor_mode: AnchorMode::CircularDeformation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(Error::InvalidParameter("l must be >= 1".into()));
        }
        if self.priors.is_empty() {
            return Err(Error::InvalidParameter("at least one box prior is required".into()));
        }
        if self.priors.iter().any(|p| !(p.w > 0.0 && p.h > 0.0 && p.w.is_finite() && p.h.is_finite())) {
            return Err(Error::InvalidParameter("box priors must have positive finite sides".into()));
        }
        if self.top_n == 0 || self.top_n > u32::MAX as usize {
            return Err(Error::InvalidParameter("top_n must be >= 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::InvalidParameter(format!("nms_iou must lie in (0, 1), got {}", self.nms_iou)));
        }
        Ok(())
    }

    pub fn params(&self) -> IndexParams {
        IndexParams {
            l: self.l,
            k: self.priors.len() as u32,
            top_n: self.top_n as u32,
            nms_iou: self.nms_iou,
            seed: self.seed,
            camera: self.camera,
        }
    }

    pub fn backbone(&self) -> PseudoBackbone {
        PseudoBackbone { seed: self.seed }
    }

    pub fn lattice(&self) -> Result<Vec<CircularAnchor>> {
        match self.anchor_mode {
            AnchorMode::RectangularHorizontal => rectangular_lattice(&self.camera, self.l),
            AnchorMode::CircularHorizontal => Ok(anchor_lattice(&self.camera, self.l)?
                .into_iter()
                .map(|a| CircularAnchor { direction: 0.0, ..a })
                .collect()),
            AnchorMode::CircularDeformation => anchor_lattice(&self.camera, self.l),
        }
    }

    pub fn candidates(&self) -> Result<Vec<RotatedBox>> {
        Ok(anchors::candidates(&self.lattice()?, &self.priors, &self.camera))
    }

    /// Runs the whole per-image pipeline.
    pub fn extract(&self, img: &GrayImage) -> Result<ImageFeatures> {
        let cands = self.candidates()?;
        self.extract_with(img, &cands)
    }

    pub(crate) fn extract_with(&self, img: &GrayImage, cands: &[RotatedBox]) -> Result<ImageFeatures> {
        self.validate()?;
        let size = self.camera.image_size() as usize;
        if img.width() != size || img.height() != size {
            return Err(Error::InvalidInput(format!(
                "image is {}x{}, camera expects {size}x{size}",
                img.width(),
                img.height()
            )));
        }
        let pyr = self.backbone().build_pyramid(img)?;
        let global = global_feature(&pyr).to_stored();
        let regions = select_regions(&pyr, cands, self.top_n, self.nms_iou)?
            .into_iter()
            .map(|r| Region {
                rbox: narrow_box(&r.rbox),
                feature: r.feature.to_stored(),
            })
            .collect();
        Ok(ImageFeatures { global, regions })
    }
}
