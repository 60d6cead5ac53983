//! Training losses on predicted boundary latitudes, each with its analytic
//! gradient with respect to the predicted ceiling and floor latitudes.
//!
//! `L_pano = λ·L_b + μ·L_d + γ·(L_n + L_g)`, `L_pp = δ·L_b`,
//! `L_total = mean L_pano + mean L_pp`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{column_lon, ColumnBoundary};

/// Camera height used to turn floor latitudes into horizon depth, meters.
pub const CAM_HEIGHT: f64 = 1.6;

const NORMAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.1,
            gamma: 0.01,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.mu, self.gamma, self.delta];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and nonnegative".into()))
        }
    }
}

/// Batch loss values; panorama terms are means over panorama items.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_b: f64,
    pub l_d: f64,
    pub l_n: f64,
    pub l_g: f64,
    pub l_pano: f64,
    pub l_pp: f64,
    pub l_total: f64,
}

/// Ground truth for one item; perspective items may lack one boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTarget {
    pub ceiling: Option<ColumnBoundary>,
    pub floor: Option<ColumnBoundary>,
}

/// A loss value with its gradient on the predicted latitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_ceiling: Vec<f64>,
    pub d_floor: Vec<f64>,
}

impl LossGrad {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            d_ceiling: vec![0.0; n],
            d_floor: vec![0.0; n],
        }
    }

    fn add_scaled(&mut self, other: &LossGrad, s: f64) {
        self.value += s * other.value;
        for (a, b) in self.d_ceiling.iter_mut().zip(&other.d_ceiling) {
            *a += s * b;
        }
        for (a, b) in self.d_floor.iter_mut().zip(&other.d_floor) {
            *a += s * b;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_len(n: usize, b: &ColumnBoundary) -> Result<()> {
    if b.len() != n {
        return Err(Error::Shape(format!("prediction has {n} columns, target {}", b.len())));
    }
    Ok(())
}

/// Mean absolute latitude error over every (column, boundary) pair that is
/// valid in the target and in `mask`.
pub fn boundary_l1_grad(
    ceiling: &[f64],
    floor: &[f64],
    target: &BoundaryTarget,
    mask: Option<&[bool]>,
) -> Result<LossGrad> {
    let n = ceiling.len();
    if floor.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(Error::Shape("prediction and mask lengths differ".into()));
    }
    let mut out = LossGrad::zeros(n);
    let mut count = 0usize;
    for (gt, pred, grad) in [
        (&target.ceiling, ceiling, &mut out.d_ceiling),
        (&target.floor, floor, &mut out.d_floor),
    ] {
        let Some(gt) = gt else { continue };
        check_len(n, gt)?;
        for i in 0..n {
            if gt.valid[i] && mask.is_none_or(|m| m[i]) {
                let diff = pred[i] - gt.lat[i];
                out.value += diff.abs();
                grad[i] = sign(diff);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidColumns);
    }
    let inv = 1.0 / count as f64;
    out.value *= inv;
    out.d_ceiling
        .iter_mut()
        .chain(out.d_floor.iter_mut())
        .for_each(|g| *g *= inv);
    Ok(out)
}

pub fn boundary_l1(ceiling: &[f64], floor: &[f64], target: &BoundaryTarget, mask: Option<&[bool]>) -> Result<f64> {
    Ok(boundary_l1_grad(ceiling, floor, target, mask)?.value)
}

fn depth_and_slope(lat: f64, cam_h: f64, column: usize) -> Result<(f64, f64)> {
    if !(lat < 0.0) {
        return Err(Error::DegenerateBoundary { column, lat });
    }
    let s = lat.sin();
    Ok((-cam_h / lat.tan(), cam_h / (s * s)))
}

/// Mean absolute horizon-depth error on columns valid in `gt`.
pub fn depth_l1_grad(floor: &[f64], gt: &ColumnBoundary, cam_h: f64) -> Result<LossGrad> {
    let n = floor.len();
    check_len(n, gt)?;
    let mut out = LossGrad::zeros(n);
    let mut count = 0usize;
    for i in 0..n {
        if !gt.valid[i] {
            continue;
        }
        let (dp, slope) = depth_and_slope(floor[i], cam_h, i)?;
        let (dg, _) = depth_and_slope(gt.lat[i], cam_h, i)?;
        out.value += (dp - dg).abs();
        out.d_floor[i] = sign(dp - dg) * slope;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidColumns);
    }
    let inv = 1.0 / count as f64;
    out.value *= inv;
    out.d_floor.iter_mut().for_each(|g| *g *= inv);
    Ok(out)
}

pub fn depth_l1(floor: &[f64], gt: &ColumnBoundary, cam_h: f64) -> Result<f64> {
    Ok(depth_l1_grad(floor, gt, cam_h)?.value)
}

fn check_depths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::Shape(
            "depth sequences must match and have at least 2 columns".into(),
        ));
    }
    Ok(())
}

fn unit(v: [f64; 2]) -> ([f64; 2], f64) {
    let len = v[0].hypot(v[1]).max(NORMAL_EPS);
    ([v[0] / len, v[1] / len], len)
}

/// Normal loss on depth sequences and its gradient on predicted depth.
///
/// Segment normals are 90° rotations of the directions between consecutive
/// floor-plan points, so comparing normals equals comparing directions.
pub fn normal_loss_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_depths(pred, gt)?;
    let n = pred.len();
    let bearing: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let phi = column_lon(i, n);
            [phi.sin(), phi.cos()]
        })
        .collect();
    let point = |d: &[f64], i: usize| [d[i] * bearing[i][0], d[i] * bearing[i][1]];
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let j = (i + 1) % n;
        let (pi, pj) = (point(pred, i), point(pred, j));
        let (gi, gj) = (point(gt, i), point(gt, j));
        let (up, len) = unit([pj[0] - pi[0], pj[1] - pi[1]]);
        let (ug, _) = unit([gj[0] - gi[0], gj[1] - gi[1]]);
        let dot = up[0] * ug[0] + up[1] * ug[1];
        value += 1.0 - dot;
        // d(-u_p . u_g)/dv = -(I - u_p u_p^T) u_g / |v|
        let dv = if len > NORMAL_EPS {
            [-(ug[0] - dot * up[0]) / len, -(ug[1] - dot * up[1]) / len]
        } else {
            [-ug[0] / NORMAL_EPS, -ug[1] / NORMAL_EPS]
        };
        grad[j] += dv[0] * bearing[j][0] + dv[1] * bearing[j][1];
        grad[i] -= dv[0] * bearing[i][0] + dv[1] * bearing[i][1];
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((value * inv, grad))
}

pub fn normal_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(normal_loss_grad(pred, gt)?.0)
}

/// Mean absolute difference of circular central depth differences.
pub fn gradient_loss_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_depths(pred, gt)?;
    let n = pred.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let (next, prev) = ((i + 1) % n, (i + n - 1) % n);
        let diff = (pred[next] - pred[prev]) - (gt[next] - gt[prev]);
        value += diff.abs();
        grad[next] += sign(diff);
        grad[prev] -= sign(diff);
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((value * inv, grad))
}

pub fn gradient_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(gradient_loss_grad(pred, gt)?.0)
}

pub fn loss_pano(l_b: f64, l_d: f64, l_n: f64, l_g: f64, w: &LossWeights) -> f64 {
    w.lambda * l_b + w.mu * l_d + w.gamma * (l_n + l_g)
}

/// `δ·L_b` over columns valid in both the target and `mask`.
pub fn loss_pp(
    ceiling: &[f64],
    floor: &[f64],
    target: &BoundaryTarget,
    mask: Option<&[bool]>,
    w: &LossWeights,
) -> Result<f64> {
    Ok(w.delta * boundary_l1(ceiling, floor, target, mask)?)
}

/// Mean of each domain's per-item losses, summed; an empty domain adds 0.
pub fn loss_total(pano: &[f64], pp: &[f64]) -> f64 {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(pano) + mean(pp)
}

/// Per-item panorama loss and gradient, with the components used in logging.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoItemLoss {
    pub l_b: f64,
    pub l_d: f64,
    pub l_n: f64,
    pub l_g: f64,
    pub grad: LossGrad,
}

pub fn pano_item_loss(
    ceiling: &[f64],
    floor: &[f64],
    target: &BoundaryTarget,
    w: &LossWeights,
    cam_h: f64,
) -> Result<PanoItemLoss> {
    let (Some(gt_floor), Some(_)) = (&target.floor, &target.ceiling) else {
        return Err(Error::Data("panorama targets need both boundaries".into()));
    };
    let n = ceiling.len();
    let lb = boundary_l1_grad(ceiling, floor, target, None)?;
    let mut grad = LossGrad::zeros(n);
    grad.add_scaled(&lb, w.lambda);
    let mut l_d = 0.0;
    if w.mu != 0.0 {
        let ld = depth_l1_grad(floor, gt_floor, cam_h)?;
        grad.add_scaled(&ld, w.mu);
        l_d = ld.value;
    }
    let (mut l_n, mut l_g) = (0.0, 0.0);
    if w.gamma != 0.0 {
        if gt_floor.valid_count() != n {
            return Err(Error::Data("normal and gradient losses need every column valid".into()));
        }
        let mut dp = Vec::with_capacity(n);
        let mut slope = Vec::with_capacity(n);
        let mut dg = Vec::with_capacity(n);
        for i in 0..n {
            let (d, s) = depth_and_slope(floor[i], cam_h, i)?;
            dp.push(d);
            slope.push(s);
            dg.push(depth_and_slope(gt_floor.lat[i], cam_h, i)?.0);
        }
        let (vn, gn) = normal_loss_grad(&dp, &dg)?;
        let (vg, gg) = gradient_loss_grad(&dp, &dg)?;
        for i in 0..n {
            grad.d_floor[i] += w.gamma * (gn[i] + gg[i]) * slope[i];
        }
        grad.value += w.gamma * (vn + vg);
        l_n = vn;
        l_g = vg;
    }
    Ok(PanoItemLoss {
        l_b: lb.value,
        l_d,
        l_n,
        l_g,
        grad,
    })
}

pub fn pp_item_loss(
    ceiling: &[f64],
    floor: &[f64],
    target: &BoundaryTarget,
    mask: Option<&[bool]>,
    w: &LossWeights,
) -> Result<LossGrad> {
    let mut lb = boundary_l1_grad(ceiling, floor, target, mask)?;
    lb.value *= w.delta;
    lb.d_ceiling
        .iter_mut()
        .chain(lb.d_floor.iter_mut())
        .for_each(|g| *g *= w.delta);
    Ok(lb)
}

/// Combines per-item losses into the batch breakdown.
pub fn combine(pano: &[PanoItemLoss], pp: &[LossGrad]) -> LossBreakdown {
    let mean = |f: &dyn Fn(&PanoItemLoss) -> f64| {
        if pano.is_empty() {
            0.0
        } else {
            pano.iter().map(f).sum::<f64>() / pano.len() as f64
        }
    };
    let pano_values: Vec<f64> = pano.iter().map(|p| p.grad.value).collect();
    let pp_values: Vec<f64> = pp.iter().map(|p| p.value).collect();
    let l_pano = loss_total(&pano_values, &[]);
    let l_pp = loss_total(&[], &pp_values);
    LossBreakdown {
        l_b: mean(&|p| p.l_b),
        l_d: mean(&|p| p.l_d),
        l_n: mean(&|p| p.l_n),
        l_g: mean(&|p| p.l_g),
        l_pano,
        l_pp,
        l_total: l_pano + l_pp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::BoundaryKind;

    fn full(kind: BoundaryKind, lat: Vec<f64>) -> ColumnBoundary {
        ColumnBoundary::full(kind, lat).unwrap()
    }

    fn target(c: Vec<f64>, f: Vec<f64>) -> BoundaryTarget {
        BoundaryTarget {
            ceiling: Some(full(BoundaryKind::Ceiling, c)),
            floor: Some(full(BoundaryKind::Floor, f)),
        }
    }

    fn wavy(n: usize, base: f64, amp: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|i| base + amp * (i as f64 * 0.7 + phase).sin()).collect()
    }

    #[test]
    fn boundary_l1_examples() {
        let t = target(vec![0.5; 8], vec![-0.5; 8]);
        assert_eq!(boundary_l1(&[0.5; 8], &[-0.5; 8], &t, None).unwrap(), 0.0);
        let v = boundary_l1(&[0.6; 8], &[-0.4; 8], &t, None).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        let mask: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let mut c = vec![0.5; 8];
        c[..4].fill(0.7);
        c[4..].fill(1.2);
        let v = boundary_l1(&c, &[-0.5; 8], &t, Some(&mask)).unwrap();
        assert!((v - 0.1).abs() < 1e-12);
        assert!(boundary_l1(&c, &[-0.5; 8], &t, Some(&[false; 8])).is_err());
    }

    #[test]
    fn single_boundary_target() {
        let t = BoundaryTarget {
            ceiling: None,
            floor: Some(full(BoundaryKind::Floor, vec![-0.5; 4])),
        };
        let v = boundary_l1(&[1.0; 4], &[-0.3; 4], &t, None).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn depth_l1_examples() {
        let gt = full(BoundaryKind::Floor, vec![-(0.5f64).atan(); 3]);
        let pred = [-std::f64::consts::FRAC_PI_4; 3];
        let v = depth_l1(&pred, &gt, CAM_HEIGHT).unwrap();
        assert!((v - 1.6).abs() < 1e-12);
        assert_eq!(depth_l1(&gt.lat, &gt, CAM_HEIGHT).unwrap(), 0.0);
        assert!(depth_l1(&[0.1; 3], &gt, CAM_HEIGHT).is_err());
    }

    #[test]
    fn normal_and_gradient_examples() {
        let gt = wavy(16, 3.0, 0.5, 0.0);
        assert!(normal_loss(&gt, &gt).unwrap().abs() < 1e-15);
        assert_eq!(gradient_loss(&gt, &gt).unwrap(), 0.0);
        let scaled: Vec<f64> = gt.iter().map(|d| 2.5 * d).collect();
        assert!(normal_loss(&scaled, &gt).unwrap().abs() < 1e-12);
        assert_eq!(gradient_loss(&[2.0; 16], &[5.0; 16]).unwrap(), 0.0);
        assert!(normal_loss(&wavy(16, 3.0, 0.5, 1.0), &gt).unwrap() > 0.0);
        // duplicate points are guarded
        assert!(normal_loss(&[0.0; 4], &[1.0; 4]).unwrap().is_finite());
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        assert_eq!(loss_pano(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((loss_pano(0.2, 0.1, 0.05, 0.03, &w) - 0.2108).abs() < 1e-12);
        let w0 = LossWeights { gamma: 0.0, ..w };
        assert!((loss_pano(0.2, 0.1, 0.05, 0.03, &w0) - 0.21).abs() < 1e-12);
        let w2 = LossWeights { delta: 2.0, ..w };
        let t = target(vec![0.5; 4], vec![-0.5; 4]);
        let v = loss_pp(&[0.8; 4], &[-0.2; 4], &t, None, &w2).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        assert_eq!(loss_total(&[0.3, 0.5], &[]), 0.4);
    }

    fn fd_check(f: impl Fn(&[f64], &[f64]) -> f64, c: &[f64], fl: &[f64], dc: &[f64], dfl: &[f64]) {
        let h = 1e-6;
        for (which, base, grad) in [(0, c, dc), (1, fl, dfl)] {
            for i in 0..base.len() {
                let mut p = base.to_vec();
                let mut m = base.to_vec();
                p[i] += h;
                m[i] -= h;
                let (vp, vm) = if which == 0 {
                    (f(&p, fl), f(&m, fl))
                } else {
                    (f(c, &p), f(c, &m))
                };
                let num = (vp - vm) / (2.0 * h);
                let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-8);
                assert!(err < 1e-4, "boundary {which} column {i}: fd {num} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn pano_loss_gradient_matches_finite_differences() {
        let n = 24;
        let t = target(wavy(n, 0.6, 0.1, 0.0), wavy(n, -0.6, 0.1, 0.3));
        let pc = wavy(n, 0.65, 0.12, 0.9);
        let pf = wavy(n, -0.55, 0.15, 1.7);
        let w = LossWeights {
            lambda: 1.0,
            mu: 0.3,
            gamma: 0.5,
            delta: 1.0,
        };
        let out = pano_item_loss(&pc, &pf, &t, &w, CAM_HEIGHT).unwrap();
        let f = |c: &[f64], fl: &[f64]| pano_item_loss(c, fl, &t, &w, CAM_HEIGHT).unwrap().grad.value;
        fd_check(f, &pc, &pf, &out.grad.d_ceiling, &out.grad.d_floor);
        let expect = loss_pano(out.l_b, out.l_d, out.l_n, out.l_g, &w);
        assert!((out.grad.value - expect).abs() < 1e-12);
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let n = 10;
        let gt = full(BoundaryKind::Floor, wavy(n, -0.5, 0.1, 0.0));
        let pf = wavy(n, -0.7, 0.2, 2.0);
        let g = depth_l1_grad(&pf, &gt, CAM_HEIGHT).unwrap();
        let f = |_: &[f64], fl: &[f64]| depth_l1(fl, &gt, CAM_HEIGHT).unwrap();
        fd_check(f, &[], &pf, &[], &g.d_floor);
    }

    #[test]
    fn invalid_columns_do_not_matter() {
        let mut t = target(vec![0.5; 6], vec![-0.5; 6]);
        t.floor.as_mut().unwrap().valid[2] = false;
        let w = LossWeights::default();
        let mask = [true, true, true, true, false, true];
        let a = pp_item_loss(&[0.6; 6], &[-0.4; 6], &t, Some(&mask), &w).unwrap();
        let mut c = [0.6; 6];
        c[4] = 1.4;
        let mut f = [-0.4; 6];
        f[2] = -1.2;
        f[4] = -0.01;
        let b = pp_item_loss(&c, &f, &t, Some(&mask), &w).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.d_floor[2], 0.0);
    }

    #[test]
    fn combine_domains() {
        let t = target(vec![0.5; 8], vec![-0.5; 8]);
        let w = LossWeights::default();
        let p = pano_item_loss(&[0.6; 8], &[-0.5; 8], &t, &w, CAM_HEIGHT).unwrap();
        let b = combine(std::slice::from_ref(&p), &[]);
        assert_eq!(b.l_pp, 0.0);
        assert_eq!(b.l_total, b.l_pano);
        assert!((b.l_b - 0.05).abs() < 1e-12);
        let q = pp_item_loss(&[0.6; 8], &[-0.5; 8], &t, None, &w).unwrap();
        let b = combine(&[p], &[q.clone(), q]);
        assert!((b.l_pp - 0.05).abs() < 1e-12);
        assert!((b.l_total - b.l_pano - b.l_pp).abs() < 1e-15);
    }
}
