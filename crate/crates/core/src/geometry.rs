//! Normalized center-size boxes and the verb-box constructions built on them.
//!
//! All spatial reasoning uses fractions of the image: `(cx, cy, w, h)` with
//! centers in [0,1]. Corner form is derived on demand. The verb box variants
//! (MBR, shifted MBR, adaptive shifted MBR) define the interaction region a
//! verb decoder samples from.

use crate::rng::Rng;

/// Normalized center-size rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Smallest representable box side after clamping.
pub const MIN_SIZE: f64 = 1e-4;

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// (x1, y1, x2, y2) corner form.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Center in [0,1], strictly positive sides.
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    /// Clamp center into [0,1] and sides into [MIN_SIZE, 1].
    pub fn clamped(&self) -> BBox {
        BBox {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.clamp(MIN_SIZE, 1.0),
            h: self.h.clamp(MIN_SIZE, 1.0),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

/// Adaptive shifted MBR, before clamping: center at the midpoint of the two
/// input centers, sides `(w_s+w_o)/2 + |x_s-x_o|` (resp. heights).
pub fn asmbr_raw(subject: &BBox, object: &BBox) -> BBox {
    BBox {
        cx: (subject.cx + object.cx) / 2.0,
        cy: (subject.cy + object.cy) / 2.0,
        w: (subject.w + object.w) / 2.0 + (subject.cx - object.cx).abs(),
        h: (subject.h + object.h) / 2.0 + (subject.cy - object.cy).abs(),
    }
}

/// Verb box: adaptive shifted MBR of the subject and object boxes, clamped
/// back into the valid range.
pub fn make_asmbr(subject: &BBox, object: &BBox) -> BBox {
    asmbr_raw(subject, object).clamped()
}

/// Minimum bounding rectangle of both boxes' extents.
pub fn make_mbr(subject: &BBox, object: &BBox) -> BBox {
    let (sx1, sy1, sx2, sy2) = subject.corners();
    let (ox1, oy1, ox2, oy2) = object.corners();
    BBox::from_corners(sx1.min(ox1), sy1.min(oy1), sx2.max(ox2), sy2.max(oy2))
}

/// MBR size with the center moved to the midpoint of the input centers.
pub fn make_smbr(subject: &BBox, object: &BBox) -> BBox {
    let mbr = make_mbr(subject, object);
    BBox {
        cx: (subject.cx + object.cx) / 2.0,
        cy: (subject.cy + object.cy) / 2.0,
        w: mbr.w,
        h: mbr.h,
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: IoU minus the enclosing-box penalty, in [-1, 1].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    let hull = make_mbr(a, b).area();
    let i = inter / union;
    if hull > 0.0 {
        i - (hull - union) / hull
    } else {
        i
    }
}

/// Shift the center by offsets uniform in ±`noise_scale`·(w/2, h/2) and scale
/// each side by a factor uniform in [1-`noise_scale`, 1+`noise_scale`], then
/// clamp. `noise_scale` = 0 returns the input bit-exactly.
pub fn noise_box(gt: &BBox, noise_scale: f64, rng: &mut Rng) -> BBox {
    debug_assert!(noise_scale >= 0.0);
    let dx = noise_scale * (gt.w / 2.0) * rng.uniform_in(-1.0, 1.0);
    let dy = noise_scale * (gt.h / 2.0) * rng.uniform_in(-1.0, 1.0);
    let fw = 1.0 + noise_scale * rng.uniform_in(-1.0, 1.0);
    let fh = 1.0 + noise_scale * rng.uniform_in(-1.0, 1.0);
    BBox {
        cx: gt.cx + dx,
        cy: gt.cy + dy,
        w: gt.w * fw,
        h: gt.h * fh,
    }
    .clamped()
}
