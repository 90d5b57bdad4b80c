//! Axis-aligned boxes on the unit canvas, overlap, suppression and the
//! center/log-size delta codec used by the box refinement head.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude allowed for the log-size components before exponentiation.
pub const DELTA_LOG_CLAMP: f64 = 4.0;
/// Side length a degenerate decoded box is expanded to.
pub const MIN_BOX_SIDE: f64 = 1e-4;
const DEGENERATE_AREA: f64 = 1e-8;

/// An axis-aligned box in normalized canvas coordinates.
///
/// Construction guarantees finite coordinates inside `[0, 1]` and strictly
/// positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let fail = |reason| Error::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite coordinate"));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(fail("non-positive area"));
        }
        if x_min < 0.0 || y_min < 0.0 || x_max > 1.0 || y_max > 1.0 {
            return Err(fail("outside the unit canvas"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from its center and size, clipped to the canvas.
    ///
    /// Returns `None` if nothing of positive area remains after clipping.
    pub fn from_center_clipped(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let x_min = (cx - 0.5 * w).clamp(0.0, 1.0);
        let x_max = (cx + 0.5 * w).clamp(0.0, 1.0);
        let y_min = (cy - 0.5 * h).clamp(0.0, 1.0);
        let y_max = (cy + 0.5 * h).clamp(0.0, 1.0);
        Self::new(x_min, y_min, x_max, y_max).ok()
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Total order on the coordinates, used as a deterministic tie-breaker.
    pub(crate) fn coord_cmp(&self, other: &BoundingBox) -> Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// A scored, classified box. `class_id` never names the background slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: usize, score: f64) -> Result<Self> {
        if !(score > 0.0 && score <= 1.0) {
            return Err(Error::Contract(format!(
                "detection score {score} outside (0, 1]"
            )));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

/// Center shifts relative to the source size and log-scale size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    /// Clamps the log-size components to `[-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP]`.
    pub fn clamped(self) -> Self {
        Self {
            dw: self.dw.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP),
            dh: self.dh.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP),
            ..self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Descending score, then lower class id. `sort_by` is stable so input
/// order settles the rest.
fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Greedy class-wise non-maximum suppression.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for cand in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// Gaussian Soft-NMS: every remaining same-class detection has its score
/// multiplied by `exp(-iou^2 / sigma)` against each selected box; anything
/// that decays below `score_floor` is dropped.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Vec<Detection> {
    let mut pool: Vec<Detection> = dets.to_vec();
    pool.sort_by(rank_order);
    pool.retain(|d| d.score >= score_floor);
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        // pool stays sorted, so the head is the current maximum
        let best = pool.remove(0);
        for d in pool.iter_mut() {
            if d.class_id == best.class_id {
                let o = iou(&best.bbox, &d.bbox);
                if o > 0.0 {
                    d.score *= (-(o * o) / sigma).exp();
                }
            }
        }
        pool.retain(|d| d.score >= score_floor && d.score > 0.0);
        pool.sort_by(rank_order);
        kept.push(best);
    }
    kept
}

pub fn encode_deltas(src: &BoundingBox, target: &BoundingBox) -> BoxDeltas {
    let (scx, scy) = src.center();
    let (tcx, tcy) = target.center();
    let (sw, sh) = (src.width(), src.height());
    BoxDeltas {
        dx: (tcx - scx) / sw,
        dy: (tcy - scy) / sh,
        dw: (target.width() / sw).ln(),
        dh: (target.height() / sh).ln(),
    }
}

pub fn apply_deltas(src: &BoundingBox, d: &BoxDeltas) -> BoundingBox {
    let d = d.clamped();
    let (scx, scy) = src.center();
    let (sw, sh) = (src.width(), src.height());
    let cx = scx + d.dx * sw;
    let cy = scy + d.dy * sh;
    let w = sw * d.dw.exp();
    let h = sh * d.dh.exp();
    match BoundingBox::from_center_clipped(cx, cy, w, h) {
        Some(b) if b.area() > DEGENERATE_AREA => b,
        _ => {
            let side = |c: f64| {
                let c = c.clamp(0.5 * MIN_BOX_SIDE, 1.0 - 0.5 * MIN_BOX_SIDE);
                (c - 0.5 * MIN_BOX_SIDE, c + 0.5 * MIN_BOX_SIDE)
            };
            // recover the clipped extent where it is still wide enough
            let clip = |c: f64, s: f64| {
                let lo = (c - 0.5 * s).clamp(0.0, 1.0);
                let hi = (c + 0.5 * s).clamp(0.0, 1.0);
                if hi - lo >= MIN_BOX_SIDE {
                    (lo, hi)
                } else {
                    side(c)
                }
            };
            let (x0, x1) = clip(cx, w);
            let (y0, y1) = clip(cy, h);
            BoundingBox::new(x0, y0, x1, y1).expect("expanded box is valid")
        }
    }
}
