//! Box geometry, the delta parameterization used for box regression, and
//! sliding-window anchor generation.
//!
//! Boxes use continuous corner coordinates: `width = x2 - x1`, with no "+1"
//! pixel convention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound applied to `tw`/`th` before exponentiation in [`decode`].
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must be finite with x2 >= x1 and y2 >= y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("score {0} is outside [0, 1]")]
    InvalidScore(f64),
    #[error("invalid anchor: width {width} and height {height} must both be positive")]
    InvalidAnchor { width: f64, height: f64 },
    #[error("scale factor must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("anchor stride must be positive")]
    ZeroStride,
    #[error("anchor {0} list must be non-empty with positive finite entries")]
    InvalidTemplates(&'static str),
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 < x1 || y2 < y1 {
            return Err(BoxError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from its center and size. Negative sizes are rejected.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    /// Grows a degenerate box around its center so both sides are at least `min_side`.
    pub fn with_min_extent(&self, min_side: f64) -> BBox {
        let (cx, cy) = self.center();
        let w = self.width().max(min_side);
        let h = self.height().max(min_side);
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = BoxError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A box with a confidence and optional class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    score: f64,
    pub class_id: Option<u32>,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self, BoxError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(BoxError::InvalidScore(score));
        }
        Ok(Self {
            bbox,
            score,
            class_id: None,
        })
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Regression target relative to a reference box.
///
/// `tx = (cx_g - cx_a) / w_a`, `ty = (cy_g - cy_a) / h_a`,
/// `tw = ln(w_g / w_a)`, `th = ln(h_g / h_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionDelta {
    pub const ZERO: RegressionDelta = RegressionDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.tx * factor,
            self.ty * factor,
            self.tw * factor,
            self.th * factor,
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

fn check_reference(anchor: &BBox) -> Result<(f64, f64), BoxError> {
    let (w, h) = (anchor.width(), anchor.height());
    if w <= 0.0 || h <= 0.0 {
        return Err(BoxError::InvalidAnchor {
            width: w,
            height: h,
        });
    }
    Ok((w, h))
}

/// Regression delta that moves `anchor` onto `target`.
///
/// A zero-size target dimension yields an infinite log ratio; [`decode`]
/// clamps it, so callers regressing toward degenerate targets should widen
/// them first.
pub fn encode(target: &BBox, anchor: &BBox) -> Result<RegressionDelta, BoxError> {
    let (aw, ah) = check_reference(anchor)?;
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = target.center();
    Ok(RegressionDelta {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (target.width() / aw).ln(),
        th: (target.height() / ah).ln(),
    })
}

/// Applies `delta` to `anchor`. Size terms are clamped at [`MAX_LOG_SCALE`].
pub fn decode(delta: &RegressionDelta, anchor: &BBox) -> Result<BBox, BoxError> {
    let (aw, ah) = check_reference(anchor)?;
    let (acx, acy) = anchor.center();
    let cx = acx + delta.tx * aw;
    let cy = acy + delta.ty * ah;
    let w = aw * delta.tw.min(MAX_LOG_SCALE).exp();
    let h = ah * delta.th.min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Mirrors a box about the vertical center line of an image of width `image_w`.
pub fn flip_h(b: &BBox, image_w: f64) -> BBox {
    BBox {
        x1: image_w - b.x2,
        y1: b.y1,
        x2: image_w - b.x1,
        y2: b.y2,
    }
}

pub fn rescale(b: &BBox, factor: f64) -> Result<BBox, BoxError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(BoxError::InvalidScale(factor));
    }
    Ok(BBox {
        x1: b.x1 * factor,
        y1: b.y1 * factor,
        x2: b.x2 * factor,
        y2: b.y2 * factor,
    })
}

pub fn clip_to(b: &BBox, w: f64, h: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}

/// A reference box tied to a feature-grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub grid_row: u32,
    pub grid_col: u32,
    pub template_index: u32,
}

/// Anchor scales used by default (pixels, square-root of template area).
pub const DEFAULT_ANCHOR_SCALES: [f64; 6] = [32.0, 64.0, 96.0, 128.0, 256.0, 512.0];
pub const DEFAULT_ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const DEFAULT_FEATURE_STRIDE: u32 = 16;

/// Width and height of every anchor template, in `scale`-major order.
///
/// Template `k = scale_idx * ratios.len() + ratio_idx` has area `scale^2`
/// and aspect `w / h = ratio`.
pub fn anchor_templates(scales: &[f64], ratios: &[f64]) -> Result<Vec<(f64, f64)>, BoxError> {
    let valid = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
    if !valid(scales) {
        return Err(BoxError::InvalidTemplates("scale"));
    }
    if !valid(ratios) {
        return Err(BoxError::InvalidTemplates("ratio"));
    }
    let mut out = Vec::with_capacity(scales.len() * ratios.len());
    for &s in scales {
        for &r in ratios {
            let root = r.sqrt();
            out.push((s * root, s / root));
        }
    }
    Ok(out)
}

/// Dense sliding-window anchors over a `image_w` x `image_h` canvas.
///
/// Produces `ceil(W / stride) * ceil(H / stride) * |scales| * |ratios|`
/// anchors ordered by row, then column, then template. Anchors are not
/// clipped to the image.
pub fn generate_anchors(
    image_w: u32,
    image_h: u32,
    stride: u32,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<Anchor>, BoxError> {
    if stride == 0 {
        return Err(BoxError::ZeroStride);
    }
    let templates = anchor_templates(scales, ratios)?;
    if image_w == 0 || image_h == 0 {
        return Ok(Vec::new());
    }
    let cols = image_w.div_ceil(stride);
    let rows = image_h.div_ceil(stride);
    let step = f64::from(stride);
    let mut anchors = Vec::with_capacity((rows * cols) as usize * templates.len());
    for row in 0..rows {
        let cy = (f64::from(row) + 0.5) * step;
        for col in 0..cols {
            let cx = (f64::from(col) + 0.5) * step;
            for (k, &(w, h)) in templates.iter().enumerate() {
                anchors.push(Anchor {
                    bbox: BBox::from_center(cx, cy, w, h)?,
                    grid_row: row,
                    grid_col: col,
                    template_index: k as u32,
                });
            }
        }
    }
    Ok(anchors)
}
