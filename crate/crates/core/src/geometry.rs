//! Oriented 7-DoF box algebra.
//!
//! The normalized box view (NBV) maps a box onto the `[-1, 1]^3` cube: points
//! are translated to the box center, rotated by `-theta` about the vertical
//! axis and scaled by `(2/l, 2/w, 2/h)`. Length runs along the body x axis,
//! width along body y, height along z.

use std::f64::consts::PI;

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Per-point derivative of the three NBV coordinates w.r.t. `(x, y, z, w, l, h, theta)`.
pub type PointJacobian = SMatrix<f64, 3, 7>;

/// Label value for points that belong to no object.
pub const BACKGROUND: i32 = -1;

/// Areas below this are treated as zero in the polygon IoU routines.
const AREA_EPS: f64 = 1e-12;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a - two_pi * ((a + PI) / two_pi).floor();
    if r <= -PI {
        r += two_pi;
    }
    if r > PI {
        r -= two_pi;
    }
    r
}

/// Upright box: center, full extents and yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    /// Builds a box, normalizing yaw. Fails on non-positive or non-finite extents.
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Box7 {
            x,
            y,
            z,
            w,
            l,
            h,
            theta: wrap_angle(theta),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(p: [f64; 7]) -> Result<Self> {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.theta]
    }

    pub fn center(&self) -> Point {
        Point::new(self.x, self.y, self.z)
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.l * self.l + self.h * self.h).sqrt()
    }

    /// BEV distance of the center from `origin`.
    pub fn bev_distance(&self, origin: &Point) -> f64 {
        (self.x - origin.x).hypot(self.y - origin.y)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.to_array();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite parameter in {p:?}")));
        }
        if self.w <= 0.0 || self.l <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got w={} l={} h={}",
                self.w, self.l, self.h
            )));
        }
        Ok(())
    }

    /// Uniformly scales center and extents about the world origin.
    pub fn scaled(&self, s: f64) -> Box7 {
        Box7 {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
            w: self.w * s,
            l: self.l * s,
            h: self.h * s,
            theta: self.theta,
        }
    }

    #[inline]
    fn to_body(&self, p: &Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let d = p - self.center();
        Point::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// NBV coordinates of a single point.
    #[inline]
    pub fn to_nbv(&self, p: &Point) -> Point {
        let b = self.to_body(p);
        Point::new(2.0 * b.x / self.l, 2.0 * b.y / self.w, 2.0 * b.z / self.h)
    }

    /// World coordinates of a single NBV point.
    #[inline]
    pub fn from_nbv(&self, q: &Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let bx = 0.5 * q.x * self.l;
        let by = 0.5 * q.y * self.w;
        Point::new(
            self.x + c * bx - s * by,
            self.y + s * bx + c * by,
            self.z + 0.5 * q.z * self.h,
        )
    }

    /// Analytic Jacobian of [`Box7::to_nbv`] with respect to the box parameters.
    pub fn nbv_jacobian_at(&self, p: &Point) -> PointJacobian {
        let (s, c) = self.theta.sin_cos();
        let b = self.to_body(p);
        let (l, w, h) = (self.l, self.w, self.h);
        let mut j = PointJacobian::zeros();
        j[(0, 0)] = -2.0 * c / l;
        j[(0, 1)] = -2.0 * s / l;
        j[(0, 4)] = -2.0 * b.x / (l * l);
        j[(0, 6)] = 2.0 * b.y / l;
        j[(1, 0)] = 2.0 * s / w;
        j[(1, 1)] = -2.0 * c / w;
        j[(1, 3)] = -2.0 * b.y / (w * w);
        j[(1, 6)] = -2.0 * b.x / w;
        j[(2, 2)] = -2.0 / h;
        j[(2, 5)] = -2.0 * b.z / (h * h);
        j
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(bx, by)| {
            [self.x + c * bx - s * by, self.y + s * bx + c * by]
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Per-point object id, or [`BACKGROUND`].
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<i32>) -> Result<Self> {
        let cloud = PointCloud {
            points,
            labels: Some(labels),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has non-finite coordinates")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NbvCloud {
    pub points: Vec<Point>,
    pub source_indices: Vec<usize>,
}

impl NbvCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NbvJacobian {
    pub per_point: Vec<PointJacobian>,
}

pub fn nbv_transform(cloud: &PointCloud, b: &Box7) -> Result<NbvCloud> {
    b.validate()?;
    cloud.validate()?;
    Ok(NbvCloud {
        points: cloud.points.iter().map(|p| b.to_nbv(p)).collect(),
        source_indices: (0..cloud.len()).collect(),
    })
}

pub fn nbv_inverse(nbv: &NbvCloud, b: &Box7) -> Result<PointCloud> {
    b.validate()?;
    Ok(PointCloud::new(nbv.points.iter().map(|q| b.from_nbv(q)).collect()))
}

pub fn nbv_jacobian(cloud: &PointCloud, b: &Box7) -> Result<NbvJacobian> {
    b.validate()?;
    cloud.validate()?;
    Ok(NbvJacobian {
        per_point: cloud.points.iter().map(|p| b.nbv_jacobian_at(p)).collect(),
    })
}

/// The eight corners, ordered by the NBV sign pattern `(sx, sy, sz)` with z varying fastest.
pub fn box_corners(b: &Box7) -> [Point; 8] {
    let mut out = [Point::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let sx = if i & 4 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 1 == 0 { -1.0 } else { 1.0 };
        *c = b.from_nbv(&Point::new(sx, sy, sz));
    }
    out
}

/// Keeps points whose NBV coordinates all lie within `[-context, context]`.
pub fn crop_context(cloud: &PointCloud, b: &Box7, context: f64) -> Result<NbvCloud> {
    if !(context >= 1.0) {
        return Err(Error::InvalidInput(format!("context multiplier must be >= 1, got {context}")));
    }
    b.validate()?;
    let mut out = NbvCloud::default();
    for (i, p) in cloud.points.iter().enumerate() {
        let q = b.to_nbv(p);
        if q.iter().all(|v| v.abs() <= context) {
            out.points.push(q);
            out.source_indices.push(i);
        }
    }
    Ok(out)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Sutherland-Hodgman clipping of `subject` against the convex counter-clockwise `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of the two box footprints.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    // quick reject on circumscribed circles
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.x - b.x).hypot(a.y - b.y) > ra + rb {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()));
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

pub fn bev_iou(a: &Box7, b: &Box7) -> f64 {
    let (aa, ab) = (a.l * a.w, b.l * b.w);
    if aa < AREA_EPS || ab < AREA_EPS {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = aa + ab - inter;
    if union < AREA_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if va < AREA_EPS || vb < AREA_EPS {
        return 0.0;
    }
    let top = (a.z + 0.5 * a.h).min(b.z + 0.5 * b.h);
    let bottom = (a.z - 0.5 * a.h).max(b.z - 0.5 * b.h);
    let dz = top - bottom;
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = va + vb - inter;
    if union < AREA_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression by BEV IoU.
///
/// Returns the indices of kept boxes in descending confidence order; equal
/// confidences are ordered by input index.
pub fn nms(boxes: &[(Box7, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].1.total_cmp(&boxes[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| bev_iou(&boxes[k].0, &boxes[i].0) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix4, Vector4};
    use proptest::prelude::*;

    fn bx(p: [f64; 7]) -> Box7 {
        Box7::from_array(p).unwrap()
    }

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point::new(p[0], p[1], p[2])).collect())
    }

    /// Composes scale * rotate * translate as 4x4 homogeneous matrices.
    fn homogeneous_nbv(b: &Box7, p: &Point) -> Point {
        let (s, c) = b.theta.sin_cos();
        let scale = Matrix4::from_diagonal(&Vector4::new(2.0 / b.l, 2.0 / b.w, 2.0 / b.h, 1.0));
        #[rustfmt::skip]
        let rot = Matrix4::new(
            c, s, 0.0, 0.0,
            -s, c, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let trans = Matrix4::new(
            1.0, 0.0, 0.0, -b.x,
            0.0, 1.0, 0.0, -b.y,
            0.0, 0.0, 1.0, -b.z,
            0.0, 0.0, 0.0, 1.0,
        );
        let r = scale * rot * trans * Vector4::new(p.x, p.y, p.z, 1.0);
        Point::new(r.x, r.y, r.z)
    }

    #[test]
    fn nbv_examples() {
        let q = nbv_transform(&cloud(&[[1.0, 1.0, 1.0]]), &bx([0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(q.points[0], Point::new(1.0, 1.0, 1.0), epsilon = 1e-12);

        let q = nbv_transform(&cloud(&[[5.0, -1.0, 2.0]]), &bx([3.0, -2.0, 1.0, 2.0, 4.0, 2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(q.points[0], Point::new(1.0, 1.0, 1.0), epsilon = 1e-12);

        let b = bx([0.0, 0.0, 0.0, 2.0, 4.0, 2.0, PI / 2.0]);
        let p = Point::new(0.0, 2.0, 0.0);
        let oracle = homogeneous_nbv(&b, &p);
        assert_abs_diff_eq!(oracle, Point::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        let q = nbv_transform(&cloud(&[[0.0, 2.0, 0.0]]), &b).unwrap();
        assert_abs_diff_eq!(q.points[0], oracle, epsilon = 1e-12);
    }

    #[test]
    fn nbv_rejects_non_finite() {
        let b = bx([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let err = nbv_transform(&cloud(&[[f64::NAN, 0.0, 0.0]]), &b).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(Box7::new(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn inverse_examples() {
        let b = bx([0.0, 0.0, 0.0, 2.0, 4.0, 2.0, 0.0]);
        let nbv = NbvCloud {
            points: vec![Point::new(1.0, 1.0, 1.0), Point::zeros()],
            source_indices: vec![0, 1],
        };
        let back = nbv_inverse(&nbv, &b).unwrap();
        assert_abs_diff_eq!(back.points[0], Point::new(2.0, 1.0, 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(back.points[1], b.center(), epsilon = 1e-12);

        let b = bx([3.0, -2.0, 1.5, 1.1, 4.2, 1.3, 2.7]);
        let back = nbv_inverse(&NbvCloud { points: vec![Point::zeros()], source_indices: vec![0] }, &b).unwrap();
        assert_abs_diff_eq!(back.points[0], b.center(), epsilon = 1e-12);

        for (p, b) in [
            ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]),
            ([5.0, -1.0, 2.0], [3.0, -2.0, 1.0, 2.0, 4.0, 2.0, 0.0]),
            ([0.0, 2.0, 0.0], [0.0, 0.0, 0.0, 2.0, 4.0, 2.0, PI / 2.0]),
        ] {
            let c = cloud(&[p]);
            let b = bx(b);
            let back = nbv_inverse(&nbv_transform(&c, &b).unwrap(), &b).unwrap();
            assert_abs_diff_eq!(back.points[0], c.points[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn jacobian_examples() {
        let b = bx([1.0, 2.0, 3.0, 1.5, 4.0, 1.2, 0.0]);
        let j = b.nbv_jacobian_at(&b.center());
        assert_abs_diff_eq!(j[(0, 0)], -2.0 / 4.0, epsilon = 1e-15);
        for (r, c) in [(0, 4), (1, 3), (2, 5)] {
            assert_eq!(j[(r, c)], 0.0);
        }
        let j = b.nbv_jacobian_at(&Point::new(1.0 + 2.0, 2.0, 3.0));
        assert_abs_diff_eq!(j[(0, 4)], -1.0 / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn corners_map_to_sign_patterns() {
        let b = bx([1.0, 2.0, 3.0, 2.0, 4.0, 2.0, PI / 4.0]);
        for (i, c) in box_corners(&b).iter().enumerate() {
            let q = b.to_nbv(c);
            let expect = Point::new(
                if i & 4 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 1 == 0 { -1.0 } else { 1.0 },
            );
            assert_abs_diff_eq!(q, expect, epsilon = 1e-12);
        }
        let unit = bx([0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
        for c in box_corners(&unit) {
            assert!(c.iter().all(|v| (v.abs() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn yaw_pi_gives_same_corner_set() {
        let a = bx([0.5, -1.0, 0.2, 1.7, 4.1, 1.5, 0.0]);
        let b = bx([0.5, -1.0, 0.2, 1.7, 4.1, 1.5, PI]);
        let ca = box_corners(&a);
        let cb = box_corners(&b);
        for p in &ca {
            assert!(cb.iter().any(|q| (p - q).norm() < 1e-9));
        }
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_abs_diff_eq!(bev_iou(&a, &a), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou_3d(&a, &a), 1.0, epsilon = 1e-12);
        let shifted = bx([0.5, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_abs_diff_eq!(bev_iou(&a, &shifted), 1.0 / 3.0, epsilon = 1e-12);
        let far = bx([10.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.3]);
        assert_eq!(bev_iou(&a, &far), 0.0);
        let up = bx([0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0]);
        assert_abs_diff_eq!(iou_3d(&a, &up), 1.0 / 3.0, epsilon = 1e-12);
        let big = bx([0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
        assert_abs_diff_eq!(iou_3d(&a, &big), 1.0 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn rotated_iou_matches_area_formula() {
        // a square rotated by 45 degrees inside a larger axis-aligned square
        let a = bx([0.0, 0.0, 0.0, 4.0, 4.0, 1.0, 0.0]);
        let b = bx([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, PI / 4.0]);
        assert_abs_diff_eq!(bev_iou(&a, &b), 1.0 / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn crop_thresholds() {
        let b = bx([0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
        let c = cloud(&[[3.9, 0.0, 0.0], [4.1, 0.0, 0.0], [0.5, 0.5, 0.5], [1.5, 0.0, 0.0]]);
        let k = crop_context(&c, &b, 4.0).unwrap();
        assert_eq!(k.source_indices, vec![0, 2, 3]);
        let k = crop_context(&c, &b, 1.0).unwrap();
        assert_eq!(k.source_indices, vec![2]);
        assert!(crop_context(&c, &b, 0.5).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = bx([0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.1), vec![1]);
        let b = bx([10.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0]);
        assert_eq!(nms(&[(a, 0.5), (b, 0.6)], 0.1), vec![1, 0]);
        // chain: A overlaps B, B overlaps C, A and C disjoint
        let ba = bx([0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0]);
        let bb = bx([2.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0]);
        let bc = bx([4.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0]);
        assert_eq!(bev_iou(&ba, &bc), 0.0);
        assert_eq!(nms(&[(bc, 0.5), (ba, 0.9), (bb, 0.7)], 0.1), vec![1, 0]);
        // ties keep input order
        assert_eq!(nms(&[(a, 0.5), (b, 0.5)], 0.1), vec![0, 1]);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.1 - 4.0 * PI), 0.1, epsilon = 1e-12);
    }

    prop_compose! {
        fn arb_box()(x in -50.0..50.0, y in -50.0..50.0, z in -2.0..2.0,
                     w in 0.3..3.0, l in 0.3..6.0, h in 0.3..3.0, t in -PI..PI) -> Box7 {
            Box7::new(x, y, z, w, l, h, t).unwrap()
        }
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (-60.0..60.0, -60.0..60.0, -5.0..5.0).prop_map(|(x, y, z)| Point::new(x, y, z))
    }

    proptest! {
        #[test]
        fn prop_round_trip(b in arb_box(), pts in prop::collection::vec(arb_point(), 1..20)) {
            let c = PointCloud::new(pts);
            let back = nbv_inverse(&nbv_transform(&c, &b).unwrap(), &b).unwrap();
            for (p, q) in c.points.iter().zip(&back.points) {
                prop_assert!((p - q).amax() < 1e-9);
            }
        }

        #[test]
        fn prop_scale_invariance(b in arb_box(), p in arb_point(), s in 0.1..10.0f64) {
            let q1 = b.to_nbv(&p);
            let q2 = b.scaled(s).to_nbv(&(p * s));
            prop_assert!((q1 - q2).amax() < 1e-9);
        }

        #[test]
        fn prop_iou_symmetric_bounded(a in arb_box(), d in (-3.0..3.0, -3.0..3.0), b in arb_box()) {
            let b = Box7 { x: a.x + d.0, y: a.y + d.1, ..b };
            let ab = bev_iou(&a, &b);
            prop_assert!((ab - bev_iou(&b, &a)).abs() < 1e-12);
            let v = iou_3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn prop_yaw_periodicity(a in arb_box(), b in arb_box()) {
            let flipped = Box7::new(a.x, a.y, a.z, a.w, a.l, a.h, a.theta + PI).unwrap();
            let b = Box7 { x: a.x + 0.7, y: a.y - 0.4, ..b };
            prop_assert!((iou_3d(&a, &b) - iou_3d(&flipped, &b)).abs() < 1e-9);
        }

        #[test]
        fn prop_crop_nested(b in arb_box(), pts in prop::collection::vec(arb_point(), 1..60)) {
            let c = PointCloud::new(pts.iter().map(|p| b.center() + p * 0.2).collect());
            let small = crop_context(&c, &b, 2.0).unwrap();
            let large = crop_context(&c, &b, 4.0).unwrap();
            prop_assert!(small.source_indices.iter().all(|i| large.source_indices.contains(i)));
        }

        #[test]
        fn prop_nms_invariants(raw in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..12)) {
            let boxes: Vec<_> = raw.into_iter().map(|(b, c)| (Box7 { x: b.x * 0.05, y: b.y * 0.05, ..b }, c)).collect();
            let kept = nms(&boxes, 0.1);
            for w in kept.windows(2) {
                prop_assert!(boxes[w[0]].1 >= boxes[w[1]].1);
            }
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(bev_iou(&boxes[a].0, &boxes[b].0) <= 0.1);
                }
            }
        }
    }
}
