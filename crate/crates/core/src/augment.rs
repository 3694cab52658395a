//! Spatial silhouette augmentation: flip, affine, perspective and body
//! dilation.
//!
//! Parameters are sampled once per clip and the same transform is applied to
//! every frame. Geometric warps use inverse nearest-neighbour mapping, so the
//! output stays binary; pixels mapped from outside the canvas are background.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::silhouette::{Clip, SilhouetteFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelShape {
    Rectangle,
    Cross,
    Ellipse,
}

impl std::str::FromStr for KernelShape {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "rectangle" | "rect" => Ok(Self::Rectangle),
            "cross" => Ok(Self::Cross),
            "ellipse" => Ok(Self::Ellipse),
            other => Err(format!("unknown kernel shape `{other}`")),
        }
    }
}

impl std::fmt::Display for KernelShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rectangle => "rectangle",
            Self::Cross => "cross",
            Self::Ellipse => "ellipse",
        })
    }
}

/// Structuring element of odd `size` as row-major booleans.
pub fn structuring_element(shape: KernelShape, size: usize) -> Vec<bool> {
    let k = size;
    let mut m = vec![false; k * k];
    let half = k / 2;
    match shape {
        KernelShape::Rectangle => m.fill(true),
        KernelShape::Cross => {
            for i in 0..k {
                m[half * k + i] = true;
                m[i * k + half] = true;
            }
        }
        KernelShape::Ellipse => {
            // Same rasterization as OpenCV's MORPH_ELLIPSE.
            let r = half as f64;
            for i in 0..k {
                let dy = i as f64 - r;
                if dy.abs() > r {
                    continue;
                }
                let dx = if r > 0.0 {
                    (r * ((r * r - dy * dy) / (r * r)).sqrt()).round() as usize
                } else {
                    0
                };
                let lo = half.saturating_sub(dx);
                let hi = (half + dx + 1).min(k);
                for j in lo..hi {
                    m[i * k + j] = true;
                }
            }
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialAugConfig {
    pub p_flip: f64,
    pub p_affine: f64,
    pub p_perspective: f64,
    pub p_dilation: f64,
    /// Rotation angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Shear level is drawn from `[-shear, shear]`.
    pub shear: f64,
    /// Maximum Euclidean displacement of each perspective corner, in pixels.
    pub perspective_px: f64,
    pub dilation_shapes: Vec<KernelShape>,
    pub dilation_sizes: Vec<usize>,
    /// Dilated band height as a fraction of body height.
    pub band_frac_min: f64,
    pub band_frac_max: f64,
}

impl Default for SpatialAugConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_affine: 0.5,
            p_perspective: 0.5,
            p_dilation: 0.5,
            rotation_deg: 10.0,
            shear: 5e-3,
            perspective_px: 10.0,
            dilation_shapes: vec![KernelShape::Rectangle, KernelShape::Cross, KernelShape::Ellipse],
            dilation_sizes: vec![3, 5],
            band_frac_min: 0.1,
            band_frac_max: 0.5,
        }
    }
}

impl SpatialAugConfig {
    /// Configuration under which no transform ever fires.
    pub fn disabled() -> Self {
        Self {
            p_flip: 0.0,
            p_affine: 0.0,
            p_perspective: 0.0,
            p_dilation: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("aug.p_flip", self.p_flip),
            ("aug.p_affine", self.p_affine),
            ("aug.p_perspective", self.p_perspective),
            ("aug.p_dilation", self.p_dilation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::ParamOutOfRange {
                    name,
                    value: p.to_string(),
                    range: "[0, 1]",
                });
            }
        }
        let nonneg = [
            ("aug.rot_deg", self.rotation_deg),
            ("aug.shear", self.shear),
            ("aug.persp_px", self.perspective_px),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ParamOutOfRange {
                    name,
                    value: v.to_string(),
                    range: "[0, inf)",
                });
            }
        }
        if self.dilation_shapes.is_empty() {
            return Err(Error::ParamOutOfRange {
                name: "aug.dilate_shapes",
                value: "[]".into(),
                range: "non-empty",
            });
        }
        if self.dilation_sizes.is_empty() || self.dilation_sizes.iter().any(|s| s % 2 == 0) {
            return Err(Error::ParamOutOfRange {
                name: "aug.dilate_sizes",
                value: format!("{:?}", self.dilation_sizes),
                range: "non-empty odd sizes",
            });
        }
        if !(0.0 <= self.band_frac_min
            && self.band_frac_min <= self.band_frac_max
            && self.band_frac_max <= 1.0)
        {
            return Err(Error::ParamOutOfRange {
                name: "aug.band_frac_min",
                value: format!("{}..{}", self.band_frac_min, self.band_frac_max),
                range: "0 <= min <= max <= 1",
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub shear: f64,
}

/// Displacement `(dx, dy)` of the top-left, top-right, bottom-right and
/// bottom-left canvas corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveParams {
    pub corner_offsets: [(f64, f64); 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilationParams {
    pub shape: KernelShape,
    pub size: usize,
    /// Dilated rows are `band_top..band_top + band_height`.
    pub band_top: usize,
    pub band_height: usize,
}

/// What fired on one clip, with the sampled parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flip: bool,
    pub affine: Option<AffineParams>,
    pub perspective: Option<PerspectiveParams>,
    pub dilation: Option<DilationParams>,
}

impl AugRecord {
    /// Re-applies exactly the recorded transforms.
    pub fn replay(&self, clip: &Clip) -> Clip {
        let mut out = clip.clone();
        if self.flip {
            out = horizontal_flip(&out);
        }
        if let Some(p) = self.affine {
            out = apply_affine(&out, p);
        }
        if let Some(p) = self.perspective {
            out = apply_perspective(&out, p);
        }
        if let Some(p) = self.dilation {
            out = apply_dilation(&out, p);
        }
        out
    }
}

pub fn horizontal_flip(clip: &Clip) -> Clip {
    clip.map_frames(|f| {
        let w = f.width();
        SilhouetteFrame::from_fn(f.height(), w, |r, c| f.get(r, w - 1 - c))
    })
}

/// Warps every frame through an inverse map from output pixel centre
/// `(x, y)` to source coordinates, sampling the nearest source pixel.
fn warp_clip(clip: &Clip, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Clip {
    let Some(first) = clip.frames.first() else {
        return clip.clone();
    };
    let (h, w) = (first.height(), first.width());
    let lut: Vec<Option<usize>> = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let (sx, sy) = inverse(c as f64, r as f64);
            let (sx, sy) = (sx.round(), sy.round());
            (sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64)
                .then(|| sy as usize * w + sx as usize)
        })
        .collect();
    clip.map_frames(|f| {
        let src = f.pixels();
        let pixels = lut.iter().map(|s| s.map_or(0, |j| src[j])).collect();
        SilhouetteFrame::from_pixels(h, w, pixels).expect("lut covers the frame")
    })
}

fn canvas_centre(clip: &Clip) -> (f64, f64) {
    clip.frames
        .first()
        .map(|f| ((f.width() as f64 - 1.0) / 2.0, (f.height() as f64 - 1.0) / 2.0))
        .unwrap_or((0.0, 0.0))
}

/// Forward affine matrix about the canvas centre: rotation after an x-shear.
/// Maps centred `(dx, dy)` to `(a·dx + b·dy, c·dx + d·dy)`.
pub fn affine_matrix(p: AffineParams) -> [f64; 4] {
    let (s, c) = p.angle_deg.to_radians().sin_cos();
    // R · [[1, shear], [0, 1]]
    [c, c * p.shear - s, s, s * p.shear + c]
}

pub fn apply_affine(clip: &Clip, p: AffineParams) -> Clip {
    if p.angle_deg == 0.0 && p.shear == 0.0 {
        return clip.clone();
    }
    let (cx, cy) = canvas_centre(clip);
    let [a, b, c, d] = affine_matrix(p);
    let det = a * d - b * c;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    warp_clip(clip, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + ia * dx + ib * dy, cy + ic * dx + id * dy)
    })
}

pub fn random_affine<R: Rng + ?Sized>(clip: &Clip, cfg: &SpatialAugConfig, rng: &mut R) -> (Clip, AugRecord) {
    let p = sample_affine(cfg, rng);
    let record = AugRecord {
        affine: Some(p),
        ..AugRecord::default()
    };
    (apply_affine(clip, p), record)
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn sample_affine<R: Rng + ?Sized>(cfg: &SpatialAugConfig, rng: &mut R) -> AffineParams {
    AffineParams {
        angle_deg: symmetric(rng, cfg.rotation_deg),
        shear: symmetric(rng, cfg.shear),
    }
}

/// Solves the 8-unknown projective map sending each `src[i]` to `dst[i]`.
/// Returns row-major `[h11, h12, h13, h21, h22, h23, h31, h32]` with `h33 = 1`.
pub fn solve_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<[f64; 8]> {
    let mut m = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        m[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        m[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the augmented system.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        let inv = 1.0 / m[col][col];
        for k in col..9 {
            m[col][k] *= inv;
        }
        for row in 0..8 {
            if row != col && m[row][col] != 0.0 {
                let f = m[row][col];
                for k in col..9 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut h = [0.0; 8];
    for (i, hi) in h.iter_mut().enumerate() {
        *hi = m[i][8];
    }
    Some(h)
}

pub fn apply_homography(h: &[f64; 8], x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + 1.0;
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

fn canvas_corners(h: usize, w: usize) -> [(f64, f64); 4] {
    let (x1, y1) = (w as f64 - 1.0, h as f64 - 1.0);
    [(0.0, 0.0), (x1, 0.0), (x1, y1), (0.0, y1)]
}

/// Destination positions of the canvas corners under `p`.
pub fn displaced_corners(h: usize, w: usize, p: &PerspectiveParams) -> [(f64, f64); 4] {
    let mut out = canvas_corners(h, w);
    for (c, (dx, dy)) in out.iter_mut().zip(p.corner_offsets) {
        c.0 += dx;
        c.1 += dy;
    }
    out
}

pub fn apply_perspective(clip: &Clip, p: PerspectiveParams) -> Clip {
    let Some(first) = clip.frames.first() else {
        return clip.clone();
    };
    if p.corner_offsets.iter().all(|&(dx, dy)| dx == 0.0 && dy == 0.0) {
        return clip.clone();
    }
    let (h, w) = (first.height(), first.width());
    let src = canvas_corners(h, w);
    let dst = displaced_corners(h, w, &p);
    // Inverse mapping: output (displaced) coordinates back to the source.
    match solve_homography(&dst, &src) {
        Some(inv) => warp_clip(clip, |x, y| apply_homography(&inv, x, y)),
        None => clip.clone(),
    }
}

fn sample_perspective<R: Rng + ?Sized>(cfg: &SpatialAugConfig, rng: &mut R) -> PerspectiveParams {
    let mut corner_offsets = [(0.0, 0.0); 4];
    for c in &mut corner_offsets {
        let radius = if cfg.perspective_px > 0.0 {
            cfg.perspective_px * rng.random::<f64>().sqrt()
        } else {
            0.0
        };
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        *c = (radius * theta.cos(), radius * theta.sin());
    }
    PerspectiveParams { corner_offsets }
}

pub fn random_perspective<R: Rng + ?Sized>(
    clip: &Clip,
    cfg: &SpatialAugConfig,
    rng: &mut R,
) -> (Clip, AugRecord) {
    let p = sample_perspective(cfg, rng);
    let record = AugRecord {
        perspective: Some(p),
        ..AugRecord::default()
    };
    (apply_perspective(clip, p), record)
}

/// Dilates rows `band_top..band_top + band_height` of every frame; rows
/// outside the band are copied unchanged.
pub fn apply_dilation(clip: &Clip, p: DilationParams) -> Clip {
    if p.band_height == 0 {
        return clip.clone();
    }
    let kernel = structuring_element(p.shape, p.size);
    let k = p.size as isize;
    let half = k / 2;
    clip.map_frames(|f| {
        let (h, w) = (f.height() as isize, f.width() as isize);
        let band = p.band_top..(p.band_top + p.band_height).min(f.height());
        SilhouetteFrame::from_fn(f.height(), f.width(), |r, c| {
            if f.get(r, c) || !band.contains(&r) {
                return f.get(r, c);
            }
            (0..k).any(|i| {
                (0..k).any(|j| {
                    let (rr, cc) = (r as isize + i - half, c as isize + j - half);
                    kernel[(i * k + j) as usize]
                        && (0..h).contains(&rr)
                        && (0..w).contains(&cc)
                        && f.get(rr as usize, cc as usize)
                })
            })
        })
    })
}

fn clip_row_extent(clip: &Clip) -> Option<(usize, usize)> {
    clip.frames
        .iter()
        .filter_map(|f| f.row_extent())
        .reduce(|(t0, b0), (t1, b1)| (t0.min(t1), b0.max(b1)))
}

fn sample_dilation<R: Rng + ?Sized>(clip: &Clip, cfg: &SpatialAugConfig, rng: &mut R) -> DilationParams {
    let shape = cfg.dilation_shapes[rng.random_range(0..cfg.dilation_shapes.len())];
    let size = cfg.dilation_sizes[rng.random_range(0..cfg.dilation_sizes.len())];
    let frac = if cfg.band_frac_max > cfg.band_frac_min {
        rng.random_range(cfg.band_frac_min..=cfg.band_frac_max)
    } else {
        cfg.band_frac_min
    };
    let Some((top, bottom)) = clip_row_extent(clip) else {
        return DilationParams {
            shape,
            size,
            band_top: 0,
            band_height: 0,
        };
    };
    let body = bottom - top + 1;
    let band_height = ((frac * body as f64).round() as usize).clamp(1, body);
    let band_top = rng.random_range(top..=bottom + 1 - band_height);
    DilationParams {
        shape,
        size,
        band_top,
        band_height,
    }
}

pub fn random_body_dilation<R: Rng + ?Sized>(
    clip: &Clip,
    cfg: &SpatialAugConfig,
    rng: &mut R,
) -> (Clip, AugRecord) {
    let p = sample_dilation(clip, cfg, rng);
    let record = AugRecord {
        dilation: Some(p),
        ..AugRecord::default()
    };
    (apply_dilation(clip, p), record)
}

/// Gates each transform by its probability and composes them in the order
/// flip → affine → perspective → dilation.
pub fn apply_sao_spatial<R: Rng + ?Sized>(
    clip: &Clip,
    cfg: &SpatialAugConfig,
    rng: &mut R,
) -> (Clip, AugRecord) {
    let mut record = AugRecord::default();
    let mut out = clip.clone();
    if rng.random_bool(cfg.p_flip) {
        record.flip = true;
        out = horizontal_flip(&out);
    }
    if rng.random_bool(cfg.p_affine) {
        let p = sample_affine(cfg, rng);
        record.affine = Some(p);
        out = apply_affine(&out, p);
    }
    if rng.random_bool(cfg.p_perspective) {
        let p = sample_perspective(cfg, rng);
        record.perspective = Some(p);
        out = apply_perspective(&out, p);
    }
    if rng.random_bool(cfg.p_dilation) {
        let p = sample_dilation(&out, cfg, rng);
        record.dilation = Some(p);
        out = apply_dilation(&out, p);
    }
    (out, record)
}
