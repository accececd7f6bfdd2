//! Box geometry for the proposal stage: anchors, IoU, delta encoding,
//! training assignment, and non-maximum suppression.

use crate::{Error, Result};

/// Axis-aligned box in image pixels, center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Whether the box lies entirely inside `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x1 >= 0.0 && y1 >= 0.0 && x2 <= width && y2 <= height
    }

    /// Clip the box to `[0, width] x [0, height]`, keeping center form.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let (x1, y1, x2, y2) = self.corners();
        BBox::from_corners(
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        )
    }
}

/// Dimensionless box regression target: center offsets over the anchor
/// extent and log extent ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

/// Square anchors tiled over a feature map: one box per (cell, size).
///
/// Anchor `a` for cell `(r, c)` and size slot `s` sits at index
/// `(r * feature_w + c) * sizes.len() + s`, matching the channel layout of
/// the proposal head outputs.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    sizes: Vec<f64>,
    stride: f64,
    feature_h: usize,
    feature_w: usize,
    boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn feature_extents(&self) -> (usize, usize) {
        (self.feature_h, self.feature_w)
    }

    /// Decompose a flat anchor index into `(row, col, size_slot)`.
    pub fn cell_of(&self, index: usize) -> (usize, usize, usize) {
        let s = index % self.sizes.len();
        let cell = index / self.sizes.len();
        (cell / self.feature_w, cell % self.feature_w, s)
    }
}

/// Tile one square anchor per size at the center of every feature cell;
/// cell `(r, c)` maps to image point `((c + 0.5) * stride, (r + 0.5) * stride)`.
/// Anchors may extend past image borders; they are flagged at assignment
/// time, not clipped here.
pub fn generate_anchors(
    feature_extents: (usize, usize),
    stride: f64,
    sizes: &[f64],
) -> Result<AnchorSet> {
    let (feature_h, feature_w) = feature_extents;
    if stride < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "anchor stride must be >= 1, got {stride}"
        )));
    }
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("empty anchor size list".into()));
    }
    let mut boxes = Vec::with_capacity(feature_h * feature_w * sizes.len());
    for r in 0..feature_h {
        for c in 0..feature_w {
            let cx = (c as f64 + 0.5) * stride;
            let cy = (r as f64 + 0.5) * stride;
            for &s in sizes {
                boxes.push(BBox::new(cx, cy, s, s));
            }
        }
    }
    Ok(AnchorSet {
        sizes: sizes.to_vec(),
        stride,
        feature_h,
        feature_w,
        boxes,
    })
}

/// Intersection area over union area; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Parameterize `gt` relative to `anchor`:
/// `tx = (x - x_a) / w_a`, `ty = (y - y_a) / h_a`,
/// `tw = ln(w / w_a)`, `th = ln(h / h_a)`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<BoxDelta> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ground-truth box has non-positive extents {}x{}",
            gt.w, gt.h
        )));
    }
    Ok(BoxDelta {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &BBox, delta: &BoxDelta) -> BBox {
    BBox {
        cx: anchor.cx + delta.tx * anchor.w,
        cy: anchor.cy + delta.ty * anchor.h,
        w: anchor.w * delta.tw.exp(),
        h: anchor.h * delta.th.exp(),
    }
}

/// Training label of one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Label every anchor for training.
///
/// An anchor is positive if its IoU with some ground truth reaches
/// `pos_iou`, or if it is the best-overlapping anchor for a ground truth;
/// negative if its best IoU is below `neg_iou`; ignored otherwise. When
/// `image_extent` is given, anchors crossing the image boundary are ignored
/// outright and excluded from the best-overlap search.
pub fn assign_anchors(
    anchors: &AnchorSet,
    gts: &[BBox],
    pos_iou: f64,
    neg_iou: f64,
    image_extent: Option<(f64, f64)>,
) -> Result<Vec<AnchorLabel>> {
    if !(0.0..=1.0).contains(&neg_iou) || !(0.0..=1.0).contains(&pos_iou) || neg_iou > pos_iou {
        return Err(Error::InvalidArgument(format!(
            "require 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}"
        )));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let in_bounds: Vec<bool> = anchors
        .boxes()
        .iter()
        .map(|a| match image_extent {
            Some((w, h)) => a.inside(w, h),
            None => true,
        })
        .collect();
    for (i, &ok) in in_bounds.iter().enumerate() {
        if !ok {
            labels[i] = AnchorLabel::Ignore;
        }
    }
    if gts.is_empty() {
        return Ok(labels);
    }

    // Best gt per anchor, then threshold rules.
    let mut best_gt = vec![(0usize, 0.0f64); n];
    for (i, anchor) in anchors.boxes().iter().enumerate() {
        if !in_bounds[i] {
            continue;
        }
        let mut best = (0usize, 0.0f64);
        for (j, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best.1 {
                best = (j, v);
            }
        }
        best_gt[i] = best;
        labels[i] = if best.1 >= pos_iou {
            AnchorLabel::Positive(best.0)
        } else if best.1 < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }

    // Force the best anchor per gt positive (requires nonzero overlap).
    for (j, gt) in gts.iter().enumerate() {
        let mut best = (usize::MAX, 0.0f64);
        for (i, anchor) in anchors.boxes().iter().enumerate() {
            if !in_bounds[i] {
                continue;
            }
            let v = iou(anchor, gt);
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.0 != usize::MAX && best.1 > 0.0 {
            labels[best.0] = AnchorLabel::Positive(j);
            best_gt[best.0] = (j, best.1);
        }
    }
    Ok(labels)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited in descending score order (ties broken by lower
/// original index); a box overlapping an already-kept box with IoU strictly
/// above `iou_threshold` is suppressed. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "nms got {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::InvalidArgument(format!(
            "nms threshold must be in [0,1], got {iou_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_anchor_center_and_size() {
        let set = generate_anchors((1, 1), 4.0, &[4.0]).unwrap();
        assert_eq!(set.len(), 1);
        let a = set.boxes()[0];
        assert_eq!((a.cx, a.cy, a.w, a.h), (2.0, 2.0, 4.0, 4.0));
    }

    #[test]
    fn six_sizes_on_two_by_two_gives_24() {
        let sizes = [4.0, 6.0, 10.0, 16.0, 22.0, 32.0];
        let set = generate_anchors((2, 2), 4.0, &sizes).unwrap();
        assert_eq!(set.len(), 24);
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        let c = BBox::from_corners(10.0, 10.0, 12.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &c), 0.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn encode_identity_and_doubling() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = encode_box(&anchor, &anchor).unwrap();
        assert_eq!(d, BoxDelta::ZERO);
        let gt = BBox::new(0.0, 0.0, 20.0, 20.0);
        let d = encode_box(&anchor, &gt).unwrap();
        assert_eq!(d.tx, 0.0);
        assert_eq!(d.ty, 0.0);
        assert!((d.tw - 2.0f64.ln()).abs() < 1e-15);
        assert!((d.th - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn encode_rejects_degenerate_gt() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(encode_box(&anchor, &BBox::new(0.0, 0.0, 0.0, 5.0)).is_err());
    }

    #[test]
    fn assignment_with_no_gts_is_all_negative() {
        let set = generate_anchors((3, 3), 4.0, &[4.0]).unwrap();
        let labels = assign_anchors(&set, &[], 0.7, 0.3, None).unwrap();
        assert!(labels.iter().all(|&l| l == AnchorLabel::Negative));
    }

    #[test]
    fn exact_match_anchor_is_positive() {
        let set = generate_anchors((3, 3), 4.0, &[4.0]).unwrap();
        let gt = set.boxes()[4];
        let labels = assign_anchors(&set, &[gt], 0.7, 0.3, None).unwrap();
        assert_eq!(labels[4], AnchorLabel::Positive(0));
    }

    #[test]
    fn cross_boundary_anchors_are_ignored() {
        let set = generate_anchors((2, 2), 4.0, &[6.0]).unwrap();
        // All four 6x6 anchors poke outside an 8x8 image.
        let labels = assign_anchors(&set, &[], 0.7, 0.3, Some((8.0, 8.0))).unwrap();
        assert!(labels.iter().all(|&l| l == AnchorLabel::Ignore));
    }

    #[test]
    fn nms_keeps_single_box_and_suppresses_duplicate() {
        let b = BBox::new(5.0, 5.0, 4.0, 4.0);
        assert_eq!(nms(&[b], &[0.5], 0.7).unwrap(), vec![0]);
        let kept = nms(&[b, b], &[0.9, 0.8], 0.7).unwrap();
        assert_eq!(kept, vec![0]);
        let kept = nms(&[b, b], &[0.8, 0.9], 0.7).unwrap();
        assert_eq!(kept, vec![1]);
    }
}
