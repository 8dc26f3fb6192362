//! Axis-aligned 3D boxes, anchor grids and box regression targets.
//!
//! All coordinates are in voxels. Axis order is always (x, y, z); for the
//! ultrasound volumes this toolkit targets, y is the thin (depth) axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer extent along (x, y, z).
pub type Shape3 = [usize; 3];

/// Axis-aligned box in center-size form.
///
/// Serialized as the JSON array `[cx, cy, cz, w, h, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 6]", into = "[f64; 6]")]
pub struct Box3 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub h: f64,
    pub d: f64,
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        let b = Self::new_unchecked(center, size);
        if !b.is_valid() {
            return Err(Error::domain(format!(
                "box needs finite center and positive size, got center {center:?} size {size:?}"
            )));
        }
        Ok(b)
    }

    pub const fn new_unchecked(center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            w: size[0],
            h: size[1],
            d: size[2],
        }
    }

    /// Box spanning `[lo, hi]` per axis. Fails when any `hi <= lo`.
    pub fn from_corners(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        Self::new(
            [
                0.5 * (lo[0] + hi[0]),
                0.5 * (lo[1] + hi[1]),
                0.5 * (lo[2] + hi[2]),
            ],
            [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        )
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.w, self.h, self.d]
    }

    pub fn lo(&self) -> [f64; 3] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cz - 0.5 * self.d,
        ]
    }

    pub fn hi(&self) -> [f64; 3] {
        [
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
            self.cz + 0.5 * self.d,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.d
    }

    pub fn is_valid(&self) -> bool {
        let all_finite = self.center().iter().chain(self.size().iter()).all(|v| v.is_finite());
        all_finite && self.w > 0.0 && self.h > 0.0 && self.d > 0.0
    }

    /// True for the marker produced by [`clip_box`] when a box leaves the volume.
    pub fn is_degenerate(&self) -> bool {
        !self.is_valid()
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            cx: self.cx + offset[0],
            cy: self.cy + offset[1],
            cz: self.cz + offset[2],
            ..*self
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.cx, self.cy, self.cz, self.w, self.h, self.d]
    }
}

impl From<Box3> for [f64; 6] {
    fn from(b: Box3) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 6]> for Box3 {
    type Error = Error;

    fn try_from(v: [f64; 6]) -> Result<Self> {
        Box3::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }
}

/// Intersection over union using continuous volumes.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi, blo, bhi) = (a.lo(), a.hi(), b.lo(), b.hi());
    let mut inter = 1.0;
    for k in 0..3 {
        let overlap = ahi[k].min(bhi[k]) - alo[k].max(blo[k]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Anchor sizes and feature-grid stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSpec {
    pub basic_sizes: Vec<f64>,
    pub stride: [usize; 3],
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            basic_sizes: vec![8.0, 16.0, 28.0, 40.0, 55.0],
            stride: [16, 16, 16],
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.basic_sizes.is_empty() {
            return Err(Error::config("anchor basic_sizes must not be empty"));
        }
        if self.basic_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("anchor basic_sizes must all be positive"));
        }
        if self.basic_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("anchor basic_sizes must be strictly increasing"));
        }
        if self.stride.contains(&0) {
            return Err(Error::config("anchor stride must be positive on every axis"));
        }
        Ok(())
    }

    /// n³ for n basic sizes.
    pub fn anchors_per_cell(&self) -> usize {
        self.basic_sizes.len().pow(3)
    }

    /// Feature grid covering a volume (or patch) of the given shape.
    pub fn feature_shape(&self, volume_shape: Shape3) -> Shape3 {
        [0, 1, 2].map(|k| (volume_shape[k] / self.stride[k]).max(1))
    }
}

/// Every (w, h, d) combination of basic sizes at every feature cell.
///
/// Cells are visited z-major (x fastest); within a cell, sizes vary w fastest,
/// then h, then d. Anchor `i` therefore belongs to cell `i / n³`.
pub fn generate_anchors(spec: &AnchorSpec, feature_shape: Shape3) -> Result<Vec<Box3>> {
    spec.validate()?;
    if feature_shape.contains(&0) {
        return Err(Error::config("feature_shape components must be >= 1"));
    }
    let sizes = &spec.basic_sizes;
    let cells: usize = feature_shape.iter().product();
    let mut anchors = Vec::with_capacity(cells * spec.anchors_per_cell());
    for iz in 0..feature_shape[2] {
        for iy in 0..feature_shape[1] {
            for ix in 0..feature_shape[0] {
                let center = [
                    (ix as f64 + 0.5) * spec.stride[0] as f64,
                    (iy as f64 + 0.5) * spec.stride[1] as f64,
                    (iz as f64 + 0.5) * spec.stride[2] as f64,
                ];
                for &d in sizes {
                    for &h in sizes {
                        for &w in sizes {
                            anchors.push(Box3::new_unchecked(center, [w, h, d]));
                        }
                    }
                }
            }
        }
    }
    Ok(anchors)
}

/// Regression target: center shifts normalized by anchor size, then log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dw: f64,
    pub dh: f64,
    pub dd: f64,
}

impl BoxDelta {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            dw: v[3],
            dh: v[4],
            dd: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.dx, self.dy, self.dz, self.dw, self.dh, self.dd]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode(anchor: &Box3, target: &Box3) -> BoxDelta {
    BoxDelta {
        dx: (target.cx - anchor.cx) / anchor.w,
        dy: (target.cy - anchor.cy) / anchor.h,
        dz: (target.cz - anchor.cz) / anchor.d,
        dw: (target.w / anchor.w).ln(),
        dh: (target.h / anchor.h).ln(),
        dd: (target.d / anchor.d).ln(),
    }
}

pub fn decode(anchor: &Box3, delta: &BoxDelta) -> Box3 {
    Box3 {
        cx: anchor.cx + delta.dx * anchor.w,
        cy: anchor.cy + delta.dy * anchor.h,
        cz: anchor.cz + delta.dz * anchor.d,
        w: anchor.w * delta.dw.exp(),
        h: anchor.h * delta.dh.exp(),
        d: anchor.d * delta.dd.exp(),
    }
}

/// Clamps the corners of `b` to `[0, shape]` per axis.
///
/// An axis that collapses keeps zero extent, so the result reports
/// [`Box3::is_degenerate`] and is dropped by size filtering.
pub fn clip_box(b: &Box3, volume_shape: Shape3) -> Box3 {
    let (lo, hi) = (b.lo(), b.hi());
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for k in 0..3 {
        let limit = volume_shape[k] as f64;
        let l = lo[k].clamp(0.0, limit);
        let h = hi[k].clamp(0.0, limit);
        if h > l {
            center[k] = 0.5 * (l + h);
            size[k] = h - l;
        } else {
            center[k] = l;
            size[k] = 0.0;
        }
    }
    Box3::new_unchecked(center, size)
}
