//! Axis-aligned boxes in corner form.

/// Corner-form box `(x0, y0, x1, y1)`. Model outputs live in normalized
/// search-crop coordinates; frame boxes use pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Top-left corner plus size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        let [cx, cy] = self.center();
        [cx, cy, self.width(), self.height()]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    /// Area, zero for inverted boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Swaps inverted coordinates so that `x0 ≤ x1` and `y0 ≤ y1`.
    pub fn ordered(&self) -> Self {
        Self::new(
            self.x0.min(self.x1),
            self.y0.min(self.y1),
            self.x0.max(self.x1),
            self.y0.max(self.y1),
        )
    }

    pub fn clamp(&self, lo_x: f64, lo_y: f64, hi_x: f64, hi_y: f64) -> Self {
        let o = self.ordered();
        Self::new(
            o.x0.clamp(lo_x, hi_x),
            o.y0.clamp(lo_y, hi_y),
            o.x1.clamp(lo_x, hi_x),
            o.y1.clamp(lo_y, hi_y),
        )
    }

    pub fn clamp_unit(&self) -> Self {
        self.clamp(0.0, 0.0, 1.0, 1.0)
    }

    pub fn intersection(&self, o: &Self) -> f64 {
        let w = self.x1.min(o.x1) - self.x0.max(o.x0);
        let h = self.y1.min(o.y1) - self.y0.max(o.y0);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection over union; 0 when the union has zero area.
    pub fn iou(&self, o: &Self) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU. When the enclosing box has zero area the result is 1
    /// for identical boxes and 0 otherwise.
    pub fn giou(&self, o: &Self) -> f64 {
        let cw = self.x1.max(o.x1) - self.x0.min(o.x0);
        let ch = self.y1.max(o.y1) - self.y0.min(o.y0);
        let enclosing = cw.max(0.0) * ch.max(0.0);
        if enclosing <= 0.0 {
            return if self == o { 1.0 } else { 0.0 };
        }
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        self.iou(o) - (enclosing - union) / enclosing
    }

    pub fn center_distance(&self, o: &Self) -> f64 {
        let [ax, ay] = self.center();
        let [bx, by] = o.center();
        (ax - bx).hypot(ay - by)
    }

    pub fn mirror_x(&self) -> Self {
        Self::new(1.0 - self.x1, self.y0, 1.0 - self.x0, self.y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BoundingBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((a.iou(&BoundingBox::new(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        let p = BoundingBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(p.iou(&p), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(a.giou(&a), 1.0);
        assert_eq!(a.giou(&b), -7.0 / 9.0);
        let p = BoundingBox::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(p.giou(&p), 1.0);
        assert_eq!(p.giou(&BoundingBox::new(0.7, 0.5, 0.7, 0.5)), 0.0);
    }

    #[test]
    fn parameterizations_round_trip() {
        let b = BoundingBox::new(0.1, 0.2, 0.7, 0.9);
        let [cx, cy, w, h] = b.to_cxcywh();
        let r = BoundingBox::from_cxcywh(cx, cy, w, h);
        assert!(r.to_array().iter().zip(b.to_array()).all(|(a, b)| (a - b).abs() < 1e-12));
        let [x, y, w, h] = b.to_xywh();
        assert_eq!(BoundingBox::from_xywh(x, y, w, h).x0, b.x0);
        let d = BoundingBox::new(0.25, 0.5, 0.5, 0.75);
        assert_eq!(d.mirror_x(), BoundingBox::new(0.5, 0.5, 0.75, 0.75));
        assert_eq!(BoundingBox::new(0.8, 0.9, 0.2, 0.1).ordered(), BoundingBox::new(0.2, 0.1, 0.8, 0.9));
    }
}
