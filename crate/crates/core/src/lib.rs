//! Saliency region proposals and content-based retrieval for all-sky
//! (circular fisheye) imagery.
//!
//! The pipeline stages are:
//!
//! 1. **Geometry** – equidistant fisheye camera, magnetic-meridian sky frame,
//!    deformation-line lattice and circular anchors.
//! 2. **Anchors** – rotated boxes, rotated IoU, K-means box priors and
//!    in-field candidate generation.
//! 3. **Features** – deterministic pseudo-backbone pyramid `P2..P5`,
//!    RoIAlign and per-scale 256-D descriptors.
//! 4. **Proposals** – contrast saliency scoring and rotated NMS.
//! 5. **Index / search** – persisted index, global + regional similarity,
//!    ranking and mAP evaluation.
//! 6. **Synth** – a synthetic all-sky corpus with ground truth.

pub mod anchors;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod index_store;
pub mod pipeline;
pub mod proposals;
pub mod rng;
pub mod search;
pub mod synth;
pub mod text;

pub use anchors::{kmeans_box_priors, rotated_iou, BoxPrior, LabeledBox, RotatedBox};
pub use error::{Error, Result};
pub use features::{FeaturePyramid, MultiScaleFeature, PseudoBackbone, StoredFeature};
pub use geometry::{anchor_lattice, CameraModel, CircularAnchor, ImagePoint, SkyDirection};
pub use image::GrayImage;
pub use index_store::{Index, IndexEntry, IndexParams};
pub use pipeline::{AnchorMode, ImageFeatures, IndexConfig};
pub use search::{rank, QueryResult};
