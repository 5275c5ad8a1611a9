//! Equidistant fisheye camera, magnetic-meridian sky frame and the
//! deformation-line lattice that places circular anchors.
//!
//! Sky vectors are expressed in the orthonormal frame `(e_m, e_t, e_z)`:
//! `e_m` is horizontal toward magnetic north (azimuth 0), `e_t` horizontal
//! toward magnetic east (azimuth π/2) and `e_z` points at the zenith.
//!
//! Image coordinates have `y` growing downward; image angles are measured
//! counterclockwise as seen on screen, so a unit step at image angle `α` is
//! `(cos α, -sin α)` in pixel coordinates.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Error, Result};

/// Arc-length step (sky radians) for the tangent central difference.
const TANGENT_STEP: f64 = 1e-4;

/// Relative slack accepted on the rim before a point counts as out of field.
const RIM_SLACK: f64 = 1e-9;

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a - TAU * ((a + PI) / TAU).floor();
    if r >= PI {
        r - TAU
    } else {
        r
    }
}

/// Wraps an undirected (line) angle into `[-π/2, π/2)`.
pub fn normalize_half_turn(a: f64) -> f64 {
    let r = a - PI * ((a + FRAC_PI_2) / PI).floor();
    if r >= FRAC_PI_2 {
        r - PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

impl ImagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Fisheye projection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    center_x: f64,
    center_y: f64,
    rim_radius: f64,
    phi: f64,
    image_size: u32,
}

impl CameraModel {
    /// Validates that the FOV disk fits in the `image_size` square and
    /// normalizes `phi` into `[-π, π)`.
    pub fn new(center_x: f64, center_y: f64, rim_radius: f64, phi: f64, image_size: u32) -> Result<Self> {
        if !(center_x.is_finite() && center_y.is_finite() && rim_radius.is_finite() && phi.is_finite()) {
            return Err(Error::InvalidParameter("camera parameters must be finite".into()));
        }
        if rim_radius <= 0.0 {
            return Err(Error::InvalidParameter(format!("rim_radius must be > 0, got {rim_radius}")));
        }
        let size = f64::from(image_size);
        if center_x - rim_radius < 0.0
            || center_y - rim_radius < 0.0
            || center_x + rim_radius >= size
            || center_y + rim_radius >= size
        {
            return Err(Error::InvalidParameter(format!(
                "FOV disk (center ({center_x}, {center_y}), radius {rim_radius}) does not fit in a {image_size}px image"
            )));
        }
        Ok(Self {
            center_x,
            center_y,
            rim_radius,
            phi: normalize_angle(phi),
            image_size,
        })
    }

    /// Camera centered at `image_size / 2`.
    pub fn centered(image_size: u32, rim_radius: f64, phi: f64) -> Result<Self> {
        let c = f64::from(image_size) / 2.0;
        Self::new(c, c, rim_radius, phi, image_size)
    }

    pub fn center_x(&self) -> f64 {
        self.center_x
    }

    pub fn center_y(&self) -> f64 {
        self.center_y
    }

    pub fn center(&self) -> ImagePoint {
        ImagePoint::new(self.center_x, self.center_y)
    }

    pub fn rim_radius(&self) -> f64 {
        self.rim_radius
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn image_size(&self) -> u32 {
        self.image_size
    }

    /// Same camera with the meridian offset replaced.
    pub fn with_phi(&self, phi: f64) -> Self {
        Self {
            phi: normalize_angle(phi),
            ..*self
        }
    }

    pub fn contains(&self, p: &ImagePoint) -> bool {
        p.distance(&self.center()) <= self.rim_radius
    }

    /// Distance of `p` from the projected magnetic meridian (a diameter at image angle `phi`).
    pub fn distance_to_meridian(&self, p: &ImagePoint) -> f64 {
        let dx = p.x - self.center_x;
        let dy_up = self.center_y - p.y;
        (dx * self.phi.sin() - dy_up * self.phi.cos()).abs()
    }

    /// Projects a sky vector given in the `(e_m, e_t, e_z)` frame. No range
    /// checks: slightly sub-horizon vectors land just outside the rim.
    pub(crate) fn project_vector(&self, v: [f64; 3]) -> ImagePoint {
        let azimuth = v[1].atan2(v[0]);
        let elevation = v[2].atan2(v[0].hypot(v[1]));
        self.project_angles(azimuth, elevation)
    }

    fn project_angles(&self, azimuth: f64, elevation: f64) -> ImagePoint {
        let r = self.rim_radius * (FRAC_PI_2 - elevation) / FRAC_PI_2;
        let alpha = self.phi + azimuth;
        ImagePoint::new(self.center_x + r * alpha.cos(), self.center_y - r * alpha.sin())
    }
}

impl Default for CameraModel {
    /// 512×512 frame, disk of radius 240 px at the image center, `phi = 0`.
    fn default() -> Self {
        Self::centered(512, 240.0, 0.0).expect("default camera is valid")
    }
}

/// A direction on the upper sky hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkyDirection {
    azimuth: f64,
    elevation: f64,
}

impl SkyDirection {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        if !azimuth.is_finite() || !(0.0..=FRAC_PI_2).contains(&elevation) {
            return Err(Error::InvalidParameter(format!(
                "sky direction needs finite azimuth and elevation in [0, π/2], got ({azimuth}, {elevation})"
            )));
        }
        Ok(Self {
            azimuth: normalize_angle(azimuth),
            elevation,
        })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    /// Unit vector in the `(e_m, e_t, e_z)` frame.
    pub fn to_vector(&self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }
}

pub fn project(dir: &SkyDirection, cam: &CameraModel) -> ImagePoint {
    cam.project_angles(dir.azimuth, dir.elevation)
}

pub fn unproject(p: &ImagePoint, cam: &CameraModel) -> Result<SkyDirection> {
    let dx = p.x - cam.center_x;
    let dy_up = cam.center_y - p.y;
    let r = dx.hypot(dy_up);
    if !r.is_finite() || r > cam.rim_radius * (1.0 + RIM_SLACK) {
        return Err(Error::OutOfField { x: p.x, y: p.y });
    }
    let elevation = (FRAC_PI_2 - FRAC_PI_2 * r / cam.rim_radius).max(0.0);
    let azimuth = if r == 0.0 { 0.0 } else { normalize_angle(dy_up.atan2(dx) - cam.phi) };
    Ok(SkyDirection { azimuth, elevation })
}

/// A lattice point at a deformation-line intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularAnchor {
    pub point: ImagePoint,
    /// Image angle of the deformation-line tangent, in `[-π/2, π/2)`.
    pub direction: f64,
    pub lat_index: u32,
    pub lon_index: u32,
}

/// Meridian angle of the midpoint of segment `index` of `segments`, from M.N. (0) to M.S. (π).
fn segment_midpoint(index: u32, segments: u32) -> f64 {
    (f64::from(index) + 0.5) * PI / f64::from(segments)
}

/// Point on the deformation line `{x·e_m = cos(beta)}` at arc parameter `gamma ∈ [0, π]`.
///
/// `gamma = 0` is the eastern horizon end, `gamma = π/2` the meridian crossing.
pub(crate) fn deformation_point(beta: f64, gamma: f64) -> [f64; 3] {
    let (s, c) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    [c, s * cg, s * sg]
}

/// Image angle of the deformation-line tangent at `(beta, gamma)`, in `[-π/2, π/2)`.
pub(crate) fn deformation_tangent(cam: &CameraModel, beta: f64, gamma: f64) -> f64 {
    let dgamma = TANGENT_STEP / beta.sin();
    let ahead = cam.project_vector(deformation_point(beta, gamma + dgamma));
    let behind = cam.project_vector(deformation_point(beta, gamma - dgamma));
    normalize_half_turn((behind.y - ahead.y).atan2(ahead.x - behind.x))
}

/// Band latitude (meridian angle from M.N.) of deformation line `lat_index` out of `l`.
pub fn band_angle(lat_index: u32, l: u32) -> f64 {
    segment_midpoint(lat_index, l)
}

/// `l²` circular anchors ordered by `(lat_index, lon_index)`.
pub fn anchor_lattice(cam: &CameraModel, l: u32) -> Result<Vec<CircularAnchor>> {
    if l == 0 {
        return Err(Error::InvalidParameter("lattice size l must be >= 1".into()));
    }
    let mut anchors = Vec::with_capacity((l * l) as usize);
    for lat_index in 0..l {
        let beta = segment_midpoint(lat_index, l);
        for lon_index in 0..l {
            let gamma = segment_midpoint(lon_index, l);
            anchors.push(CircularAnchor {
                point: cam.project_vector(deformation_point(beta, gamma)),
                direction: deformation_tangent(cam, beta, gamma),
                lat_index,
                lon_index,
            });
        }
    }
    Ok(anchors)
}

/// `n_samples` points along deformation line `lat_index`, from the eastern
/// horizon end to the western one, evenly spaced in arc length.
pub fn deformation_line(cam: &CameraModel, lat_index: u32, l: u32, n_samples: usize) -> Result<Vec<ImagePoint>> {
    if lat_index >= l {
        return Err(Error::InvalidParameter(format!("lat_index {lat_index} out of range for l = {l}")));
    }
    if n_samples < 2 {
        return Err(Error::InvalidParameter("deformation_line needs at least 2 samples".into()));
    }
    let beta = segment_midpoint(lat_index, l);
    let last = (n_samples - 1) as f64;
    Ok((0..n_samples)
        .map(|i| {
            let gamma = PI * i as f64 / last;
            cam.project_vector(deformation_point(beta, gamma))
        })
        .collect())
}
