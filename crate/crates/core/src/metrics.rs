//! Layout metrics: floor-plan IoU, room-volume IoU and per-boundary image
//! region IoU.
//!
//! Polygon intersection is exact. Each simple polygon is written as a signed
//! sum of fan triangles around a common apex, so the intersection area is the
//! signed sum of pairwise convex triangle intersections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{row_from_latitude, BoundaryKind, ColumnBoundary};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IoUReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou2d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou3d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ceiling_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor_iou: Option<f64>,
}

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed shoelace area (positive for counter-clockwise).
pub fn signed_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

/// Area of the intersection of two counter-clockwise triangles.
fn triangle_overlap(a: &[Pt; 3], b: &[Pt; 3]) -> f64 {
    let mut poly: Vec<Pt> = a.to_vec();
    let mut next = Vec::with_capacity(8);
    for i in 0..3 {
        let (p, q) = (b[i], b[(i + 1) % 3]);
        next.clear();
        let n = poly.len();
        for k in 0..n {
            let cur = poly[k];
            let prev = poly[(k + n - 1) % n];
            let c_in = cross(p, q, cur) >= 0.0;
            let p_in = cross(p, q, prev) >= 0.0;
            if c_in {
                if !p_in {
                    next.push(intersect(prev, cur, p, q));
                }
                next.push(cur);
            } else if p_in {
                next.push(intersect(prev, cur, p, q));
            }
        }
        std::mem::swap(&mut poly, &mut next);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    signed_area(&poly).max(0.0)
}

fn intersect(a: Pt, b: Pt, p: Pt, q: Pt) -> Pt {
    let da = cross(p, q, a);
    let db = cross(p, q, b);
    let t = da / (da - db);
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

struct Fan {
    tris: Vec<([Pt; 3], f64, [f64; 4])>,
}

impl Fan {
    fn new(poly: &[Pt], apex: Pt) -> Self {
        let orient = signed_area(poly).signum();
        let n = poly.len();
        let tris = (0..n)
            .filter_map(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                let s = cross(apex, a, b);
                if s == 0.0 {
                    return None;
                }
                let tri = if s > 0.0 { [apex, a, b] } else { [apex, b, a] };
                let bbox = [
                    tri.iter().map(|p| p[0]).fold(f64::MAX, f64::min),
                    tri.iter().map(|p| p[0]).fold(f64::MIN, f64::max),
                    tri.iter().map(|p| p[1]).fold(f64::MAX, f64::min),
                    tri.iter().map(|p| p[1]).fold(f64::MIN, f64::max),
                ];
                Some((tri, s.signum() * orient, bbox))
            })
            .collect();
        Self { tris }
    }
}

/// Exact area of `a ∩ b` for simple polygons of either orientation.
pub fn intersection_area(a: &[Pt], b: &[Pt]) -> f64 {
    let count = (a.len() + b.len()) as f64;
    let apex = a
        .iter()
        .chain(b)
        .fold([0.0, 0.0], |s, p| [s[0] + p[0] / count, s[1] + p[1] / count]);
    let fa = Fan::new(a, apex);
    let fb = Fan::new(b, apex);
    let mut total = 0.0;
    for (ta, sa, ba) in &fa.tris {
        for (tb, sb, bb) in &fb.tris {
            if ba[1] < bb[0] || bb[1] < ba[0] || ba[3] < bb[2] || bb[3] < ba[2] {
                continue;
            }
            total += sa * sb * triangle_overlap(ta, tb);
        }
    }
    total.max(0.0)
}

pub fn polygon_iou_2d(pred: &[Pt], gt: &[Pt]) -> Result<f64> {
    let (ap, ag) = (signed_area(pred).abs(), signed_area(gt).abs());
    if pred.len() < 3 || gt.len() < 3 || ap < 1e-12 || ag < 1e-12 {
        return Err(Error::DegeneratePolygon);
    }
    let inter = intersection_area(pred, gt).min(ap).min(ag);
    Ok((inter / (ap + ag - inter)).clamp(0.0, 1.0))
}

/// Volume IoU of two extruded floor plans.
pub fn iou_3d(pred: &[Pt], pred_height: f64, gt: &[Pt], gt_height: f64) -> Result<f64> {
    if !(pred_height > 0.0 && gt_height > 0.0) {
        return Err(Error::DegeneratePolygon);
    }
    let (ap, ag) = (signed_area(pred).abs(), signed_area(gt).abs());
    if pred.len() < 3 || gt.len() < 3 || ap < 1e-12 || ag < 1e-12 {
        return Err(Error::DegeneratePolygon);
    }
    let inter = intersection_area(pred, gt).min(ap).min(ag) * pred_height.min(gt_height);
    let union = ap * pred_height + ag * gt_height - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// IoU of the region above a ceiling boundary (or below a floor boundary),
/// summed over the columns valid in `gt`. Regions are measured in pixel rows
/// of an `height`-row grid.
pub fn image_region_iou(kind: BoundaryKind, pred: &ColumnBoundary, gt: &ColumnBoundary, height: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} columns, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let h = height as f64;
    let extent = |lat: f64| -> Result<f64> {
        let row = row_from_latitude(
            lat.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
            height,
        )?;
        let row = row.clamp(0.0, h);
        Ok(match kind {
            BoundaryKind::Ceiling => row,
            BoundaryKind::Floor => h - row,
        })
    };
    let (mut inter, mut union, mut n) = (0.0, 0.0, 0usize);
    for i in 0..gt.len() {
        if !gt.valid[i] {
            continue;
        }
        n += 1;
        let g = extent(gt.lat[i])?;
        // both regions are anchored at the same image edge
        let p = if pred.valid[i] { extent(pred.lat[i])? } else { 0.0 };
        inter += p.min(g);
        union += p.max(g);
    }
    if n == 0 {
        return Err(Error::NoValidColumns);
    }
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(inter / union)
}
