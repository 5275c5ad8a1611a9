//! Synthetic all-sky corpus: auroral arcs and vortices drawn along
//! deformation lines, with ground-truth rotated boxes and relevance classes.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::anchors::{kmeans_box_priors, KMeansResult, LabeledBox, RotatedBox, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::geometry::{band_angle, deformation_point, deformation_tangent, unproject, CameraModel, ImagePoint};
use crate::image::{GrayImage, NamedImage};
use crate::pipeline::DEFAULT_SEED;
use crate::rng::XorShift64Star;
use crate::search::Relevance;
use crate::text::{format_box_table, format_manifest, format_relevance, parse_manifest, ManifestRecord};

pub const BENCHMARK_CLASSES: u32 = 10;
pub const BENCHMARK_PER_CLASS: u32 = 10;
pub const BENCHMARK_SEED: u64 = 20240101;

/// Ground-truth level set threshold, as a fraction of structure intensity.
pub const GT_LEVEL: f64 = 0.2;
/// Peak of the smooth sky background (at the zenith, fading to 0 at the rim).
const SKY_GLOW: f64 = 0.06;
/// Stream offset separating per-image streams from per-class template streams.
const IMAGE_STREAM_BASE: u64 = 1 << 32;
const NOISE_STREAM: u64 = 7;
const SPIRAL_WINDING: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureKind {
    Arc,
    Vortex,
}

impl StructureKind {
    pub fn label(&self) -> &'static str {
        match self {
            StructureKind::Arc => "arc",
            StructureKind::Vortex => "vortex",
        }
    }
}

/// One auroral structure placed on a deformation line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureSpec {
    pub kind: StructureKind,
    /// Deformation-line index out of [`SceneSpec::lat_bands`].
    pub lat_band: u32,
    /// Center position along the line as a fraction in `[0, 1]`.
    pub lon_center: f64,
    /// Length along the line as a fraction.
    pub lon_extent: f64,
    pub intensity: f64,
    /// Gaussian profile scale across the line, in sky radians.
    pub thickness: f64,
}

impl StructureSpec {
    pub fn validate(&self, lat_bands: u32) -> Result<()> {
        let lo = self.lon_center - self.lon_extent / 2.0;
        let hi = self.lon_center + self.lon_extent / 2.0;
        if self.lat_band >= lat_bands {
            return Err(Error::InvalidParameter(format!(
                "lat_band {} out of range for {lat_bands} bands",
                self.lat_band
            )));
        }
        if !(lo >= 0.0 && hi <= 1.0 && self.lon_extent > 0.0) {
            return Err(Error::InvalidParameter("structure must lie within its deformation line".into()));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) || !(self.thickness > 0.0 && self.thickness.is_finite()) {
            return Err(Error::InvalidParameter("intensity must be in (0, 1] and thickness > 0".into()));
        }
        Ok(())
    }

    fn band(&self, lat_bands: u32) -> f64 {
        band_angle(self.lat_band, lat_bands)
    }

    /// Noise-free structure value at sky vector `v`.
    fn value(&self, lat_bands: u32, v: [f64; 3]) -> f64 {
        let beta_k = self.band(lat_bands);
        let beta = v[0].clamp(-1.0, 1.0).acos();
        let gamma = v[2].max(0.0).atan2(v[1]);
        let across = beta - beta_k;
        let arc_scale = PI * beta_k.sin();
        match self.kind {
            StructureKind::Arc => {
                let t = gamma / PI;
                let overshoot = ((t - self.lon_center).abs() - self.lon_extent / 2.0).max(0.0) * arc_scale;
                let d2 = across * across + overshoot * overshoot;
                self.intensity * (-d2 / (2.0 * self.thickness * self.thickness)).exp()
            }
            StructureKind::Vortex => {
                let along = (gamma - PI * self.lon_center) * beta_k.sin();
                let radius = self.lon_extent * arc_scale / 2.0;
                let rho = along.hypot(across);
                let envelope = (-rho * rho / (2.0 * (radius / 2.0).powi(2))).exp();
                // Two-armed logarithmic spiral; arms have a Gaussian profile of width `thickness`.
                let psi = across.atan2(along);
                let phase = 2.0 * psi - SPIRAL_WINDING * (rho.max(1e-9) / radius).ln();
                let off = (phase / PI).rem_euclid(2.0) - 1.0;
                let gap = (1.0 - off.abs()) * PI * rho / SPIRAL_WINDING;
                let arms = (-gap * gap / (2.0 * self.thickness * self.thickness)).exp();
                self.intensity * envelope * (0.35 + 0.65 * arms)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub class_id: u32,
    pub structures: Vec<StructureSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of deformation lines the `lat_band` indices refer to.
    pub lat_bands: u32,
}

fn pixel_center(x: usize, y: usize) -> ImagePoint {
    ImagePoint::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Renders a scene; returns the 8-bit-quantized image and one ground-truth
/// box per structure whose level set is non-empty.
pub fn render_scene(spec: &SceneSpec, cam: &CameraModel) -> Result<(GrayImage, Vec<RotatedBox>)> {
    if spec.noise_sigma < 0.0 || !spec.noise_sigma.is_finite() {
        return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
    }
    for s in &spec.structures {
        s.validate(spec.lat_bands)?;
    }
    let size = cam.image_size() as usize;
    let mut img = GrayImage::new(size, size);
    let mut rng = XorShift64Star::for_stream(spec.seed, NOISE_STREAM);
    let mut level_sets: Vec<Vec<ImagePoint>> = vec![Vec::new(); spec.structures.len()];
    for y in 0..size {
        for x in 0..size {
            let p = pixel_center(x, y);
            let Ok(dir) = unproject(&p, cam) else { continue };
            let v = dir.to_vector();
            let mut value = if spec.structures.is_empty() && spec.noise_sigma == 0.0 {
                0.0
            } else {
                SKY_GLOW * dir.elevation().sin()
            };
            for (s, set) in spec.structures.iter().zip(level_sets.iter_mut()) {
                let sv = s.value(spec.lat_bands, v);
                if sv >= GT_LEVEL * s.intensity {
                    set.push(p);
                }
                value += sv;
            }
            if spec.noise_sigma > 0.0 {
                value += spec.noise_sigma * rng.gaussian();
            }
            img.set(x, y, value.clamp(0.0, 1.0));
        }
    }
    img.quantize_8bit();
    let boxes = spec
        .structures
        .iter()
        .zip(&level_sets)
        .filter(|(_, set)| !set.is_empty())
        .map(|(s, set)| {
            let theta = deformation_tangent(cam, s.band(spec.lat_bands), PI * s.lon_center);
            enclosing_box(set, theta)
        })
        .collect();
    Ok((img, boxes))
}

/// Smallest box at angle `theta` covering every pixel (as a unit square) in `points`.
fn enclosing_box(points: &[ImagePoint], theta: f64) -> RotatedBox {
    let probe = RotatedBox::new(0.0, 0.0, 1.0, 1.0, theta);
    let (a, b) = probe.axes();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        let u = p.x * a[0] + p.y * a[1];
        let v = p.x * b[0] + p.y * b[1];
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let (uc, vc) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
    RotatedBox::new(
        uc * a[0] + vc * b[0],
        uc * a[1] + vc * b[1],
        umax - umin + 1.0,
        vmax - vmin + 1.0,
        theta,
    )
}

/// Knobs of the synthetic corpus beyond class and image counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub noise_sigma: f64,
    pub lat_bands: u32,
    /// Absolute jitter of `lon_center` and relative jitter of extent/thickness.
    pub geometry_jitter: f64,
    pub intensity_jitter: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.03,
            lat_bands: 8,
            geometry_jitter: 0.05,
            intensity_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub class_id: u32,
    pub image: GrayImage,
    pub boxes: Vec<RotatedBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<SyntheticImage>,
    pub relevance: Relevance,
}

impl Dataset {
    /// Ground-truth shapes for prior clustering.
    pub fn labeled_boxes(&self) -> Vec<LabeledBox> {
        self.items
            .iter()
            .flat_map(|i| i.boxes.iter().map(|b| LabeledBox { w: b.w, h: b.h }))
            .collect()
    }

    /// K-means priors over the ground-truth shapes with the default seed and restarts.
    pub fn fit_priors(&self, k: usize) -> Result<KMeansResult> {
        kmeans_box_priors(&self.labeled_boxes(), k, DEFAULT_SEED, DEFAULT_RESTARTS)
    }

    pub fn images(&self) -> Vec<NamedImage> {
        self.items.iter().map(|i| (i.id.clone(), i.image.clone())).collect()
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.items
            .iter()
            .map(|i| ManifestRecord {
                id: i.id.clone(),
                class_id: i.class_id,
                path: format!("images/{}.pgm", i.id),
                boxes: i.boxes.clone(),
            })
            .collect()
    }

    /// Writes `images/*.pgm`, `manifest.txt`, `relevance.txt` and `labels.txt` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for item in &self.items {
            item.image.save_pgm(&images.join(format!("{}.pgm", item.id)))?;
        }
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("manifest.txt", format_manifest(&self.manifest()))?;
        write("relevance.txt", format_relevance(&self.relevance))?;
        write("labels.txt", format_box_table(self.labeled_boxes().iter().map(|b| (b.w, b.h))))?;
        Ok(())
    }
}

/// Reads a manifest and every image it lists (paths relative to the manifest).
pub fn load_corpus(manifest_path: &Path) -> Result<(Vec<ManifestRecord>, Vec<NamedImage>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let records = parse_manifest(&text, &manifest_path.display().to_string())?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = records
        .iter()
        .map(|r| Ok((r.id.clone(), GrayImage::load_pgm(&base.join(&r.path))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, images))
}

#[derive(Debug, Clone, Copy)]
struct ClassTemplate {
    kind: StructureKind,
    lat_band: u32,
    lon_center: f64,
    lon_extent: f64,
    thickness: f64,
    intensity: f64,
}

/// Shape palette cycled over classes: arcs differ in thickness, vortices in size.
const ARC_SHAPES: [(f64, f64); 5] = [(0.45, 0.010), (0.35, 0.018), (0.55, 0.030), (0.40, 0.048), (0.60, 0.075)];
const VORTEX_SHAPES: [(f64, f64); 5] = [(0.12, 0.008), (0.18, 0.022), (0.24, 0.012), (0.30, 0.035), (0.36, 0.018)];

fn class_templates(n_classes: u32, lat_bands: u32, master_seed: u64) -> Vec<ClassTemplate> {
    let inner: Vec<u32> = if lat_bands > 4 { (1..lat_bands - 1).collect() } else { (0..lat_bands).collect() };
    let mut bands = inner.clone();
    let mut rng = XorShift64Star::for_stream(master_seed, 0);
    (0..n_classes)
        .map(|c| {
            if bands.is_empty() {
                bands = inner.clone();
            }
            let lat_band = bands.swap_remove(rng.below(bands.len()));
            let (kind, (lon_extent, thickness)) = if c % 2 == 0 {
                (StructureKind::Arc, ARC_SHAPES[(c / 2) as usize % ARC_SHAPES.len()])
            } else {
                (StructureKind::Vortex, VORTEX_SHAPES[(c / 2) as usize % VORTEX_SHAPES.len()])
            };
            let mut t = XorShift64Star::for_stream(master_seed, 1 + u64::from(c));
            let margin = lon_extent / 2.0 + 0.08;
            ClassTemplate {
                kind,
                lat_band,
                lon_center: t.uniform(margin, 1.0 - margin),
                lon_extent,
                thickness,
                intensity: t.uniform(0.7, 0.85),
            }
        })
        .collect()
}

/// The frozen 10 × 10 benchmark corpus.
pub fn benchmark_dataset(cam: &CameraModel) -> Result<Dataset> {
    generate_dataset(BENCHMARK_CLASSES, BENCHMARK_PER_CLASS, cam, BENCHMARK_SEED)
}

pub fn generate_dataset(n_classes: u32, per_class: u32, cam: &CameraModel, master_seed: u64) -> Result<Dataset> {
    generate_dataset_with(n_classes, per_class, cam, master_seed, &SynthParams::default())
}

/// Each class shares a `(kind, lat_band, lon_center)` template; images get
/// independent geometry and intensity jitter and fresh noise.
pub fn generate_dataset_with(
    n_classes: u32,
    per_class: u32,
    cam: &CameraModel,
    master_seed: u64,
    params: &SynthParams,
) -> Result<Dataset> {
    if n_classes < 2 || per_class < 2 {
        return Err(Error::InvalidParameter("need at least 2 classes and 2 images per class".into()));
    }
    let templates = class_templates(n_classes, params.lat_bands, master_seed);
    let jobs: Vec<(u32, u32)> = (0..n_classes).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
    let items = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(class_id, i))| {
            let tpl = &templates[class_id as usize];
            let mut rng = XorShift64Star::for_stream(master_seed, IMAGE_STREAM_BASE + index as u64);
            let g = params.geometry_jitter;
            let lon_extent = tpl.lon_extent * (1.0 + rng.uniform(-g, g));
            let half = lon_extent / 2.0;
            let structure = StructureSpec {
                kind: tpl.kind,
                lat_band: tpl.lat_band,
                lon_center: (tpl.lon_center + rng.uniform(-g, g)).clamp(half, 1.0 - half),
                lon_extent,
                intensity: (tpl.intensity + rng.uniform(-params.intensity_jitter, params.intensity_jitter)).clamp(0.05, 1.0),
                thickness: tpl.thickness * (1.0 + rng.uniform(-g, g)),
            };
            let spec = SceneSpec {
                class_id,
                structures: vec![structure],
                noise_sigma: params.noise_sigma,
                seed: rng.next_u64(),
                lat_bands: params.lat_bands,
            };
            let (image, boxes) = render_scene(&spec, cam)?;
            Ok(SyntheticImage {
                id: format!("c{class_id:02}_{i:03}"),
                class_id,
                image,
                boxes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut relevance = Relevance::new();
    for item in &items {
        let rel: BTreeSet<String> = items
            .iter()
            .filter(|o| o.class_id == item.class_id && o.id != item.id)
            .map(|o| o.id.clone())
            .collect();
        relevance.insert(item.id.clone(), rel);
    }
    Ok(Dataset { items, relevance })
}

/// Pixel position of a structure's center on its deformation line.
pub fn structure_center(s: &StructureSpec, lat_bands: u32, cam: &CameraModel) -> ImagePoint {
    cam.project_vector(deformation_point(band_angle(s.lat_band, lat_bands), PI * s.lon_center))
}
