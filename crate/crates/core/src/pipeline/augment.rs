//! Training-time augmentation of loaded samples.
//!
//! Panoramas: left-right flip, horizontal rotation, luminance and
//! pano-stretch. Perspective views: flip and luminance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::LonLat;
use crate::layout::{column_lon, BoundaryKind, ColumnBoundary};
use crate::losses::CAM_HEIGHT;
use crate::model::Branch;
use crate::raster::RgbImage;

use super::data::LoadedSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentToggles {
    pub flip: bool,
    pub rotate: bool,
    pub luminance: bool,
    pub stretch: bool,
}

impl Default for AugmentToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl AugmentToggles {
    pub fn all() -> Self {
        Self {
            flip: true,
            rotate: true,
            luminance: true,
            stretch: true,
        }
    }

    pub fn none() -> Self {
        Self {
            flip: false,
            rotate: false,
            luminance: false,
            stretch: false,
        }
    }
}

pub const LUMINANCE_RANGE: [f64; 2] = [0.5, 2.0];
pub const STRETCH_RANGE: [f64; 2] = [0.5, 2.0];

/// Applies each enabled augmentation with its random parameters.
pub fn augment(sample: &LoadedSample, toggles: AugmentToggles, rng: &mut impl Rng) -> LoadedSample {
    let mut s = sample.clone();
    let pano = s.domain == Branch::Pano;
    if pano && toggles.stretch {
        let kx = rng.random_range(STRETCH_RANGE[0]..STRETCH_RANGE[1]);
        let kz = rng.random_range(STRETCH_RANGE[0]..STRETCH_RANGE[1]);
        s = pano_stretch(&s, kx, kz);
    }
    if pano && toggles.rotate {
        let k = rng.random_range(0..s.image.width());
        s = rotate(&s, k);
    }
    if toggles.flip && rng.random_bool(0.5) {
        s = flip(&s);
    }
    if toggles.luminance {
        let u = rng.random_range(LUMINANCE_RANGE[0]..LUMINANCE_RANGE[1]);
        s = luminance(&s, u);
    }
    s
}

fn map_boundaries(
    s: &LoadedSample,
    f: impl Fn(&ColumnBoundary) -> ColumnBoundary,
) -> (Option<ColumnBoundary>, Option<ColumnBoundary>) {
    (s.ceiling.as_ref().map(&f), s.floor.as_ref().map(&f))
}

/// Mirrors image columns and boundary arrays (longitude `phi` to `-phi`).
pub fn flip(s: &LoadedSample) -> LoadedSample {
    let (w, h) = (s.image.width(), s.image.height());
    let image = RgbImage::from_fn(w, h, |x, y| s.image.get(w - 1 - x, y));
    let (ceiling, floor) = map_boundaries(s, ColumnBoundary::reversed);
    LoadedSample {
        image,
        ceiling,
        floor,
        ..s.clone()
    }
}

/// Circular horizontal rotation so that output column `i` shows input column
/// `i + k`. Panoramas only; boundaries must span the image width.
pub fn rotate(s: &LoadedSample, k: usize) -> LoadedSample {
    let (w, h) = (s.image.width(), s.image.height());
    let image = RgbImage::from_fn(w, h, |x, y| s.image.get((x + k) % w, y));
    let (ceiling, floor) = map_boundaries(s, |b| {
        // boundaries may be stored at another column count
        let n = b.len();
        if (k * n).is_multiple_of(w) {
            b.rotate_columns(k * n / w)
        } else {
            b.resample(w, true).rotate_columns(k).resample(n, true)
        }
    });
    LoadedSample {
        image,
        ceiling,
        floor,
        ..s.clone()
    }
}

pub fn luminance(s: &LoadedSample, factor: f64) -> LoadedSample {
    let mut image = s.image.clone();
    for v in image.data_mut() {
        *v = (*v as f64 * factor).clamp(0.0, 1.0) as f32;
    }
    LoadedSample { image, ..s.clone() }
}

/// Source bearing of output bearing `phi` under a floor-plan stretch.
fn source_bearing(phi: f64, kx: f64, kz: f64) -> f64 {
    (phi.sin() / kx).atan2(phi.cos() / kz)
}

/// Stretches the room by `kx` along `x` and `kz` along `z`, warping the image
/// and recomputing both boundaries. Wall points between two columns are
/// interpolated along the straight chord joining their floor-plan points.
pub fn pano_stretch(s: &LoadedSample, kx: f64, kz: f64) -> LoadedSample {
    if kx == 1.0 && kz == 1.0 {
        return s.clone();
    }
    let (w, h) = (s.image.width(), s.image.height());
    let image = RgbImage::from_fn(w, h, |x, y| {
        let ll = LonLat {
            lon: column_lon(x, w),
            lat: (0.5 - (y as f64 + 0.5) / h as f64) * std::f64::consts::PI,
        };
        let d = ll.direction();
        let src = LonLat::from_direction([d[0] / kx, d[1], d[2] / kz]);
        let u = (src.lon / std::f64::consts::TAU + 0.5) * w as f64;
        let v = (0.5 - src.lat / std::f64::consts::PI) * h as f64;
        s.image.sample_bilinear(u, v, true)
    });
    let (ceiling, floor) = match (&s.ceiling, &s.floor) {
        (Some(c), Some(f)) if c.valid_count() == c.len() && f.valid_count() == f.len() => {
            let (c, f) = stretch_boundaries(c, f, kx, kz);
            (Some(c), Some(f))
        }
        _ => (s.ceiling.clone(), s.floor.clone()),
    };
    LoadedSample {
        image,
        ceiling,
        floor,
        ..s.clone()
    }
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Distance along `dir` to the line through `a` and `b`.
fn ray_line(dir: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let e = [b[0] - a[0], b[1] - a[1]];
    let denom = cross(dir, e);
    (denom.abs() > 1e-12).then(|| cross(a, e) / denom).filter(|d| *d > 0.0)
}

/// Ray distance when a corner lies between the column points `a` and `b`:
/// the walls through `(prev, a)` and `(b, next)` are extended to meet, and the
/// ray hits whichever wall covers its bearing.
fn corner_hit(a: [f64; 2], b: [f64; 2], prev: [f64; 2], next: [f64; 2], dir: [f64; 2]) -> Option<f64> {
    let ea = [a[0] - prev[0], a[1] - prev[1]];
    let eb = [next[0] - b[0], next[1] - b[1]];
    let denom = cross(ea, eb);
    if denom.abs() < 1e-9 * (ea[0].hypot(ea[1]) * eb[0].hypot(eb[1])) {
        return None;
    }
    let t = cross([b[0] - a[0], b[1] - a[1]], eb) / denom;
    let c = [a[0] + t * ea[0], a[1] + t * ea[1]];
    // the corner must sit strictly inside the angular wedge (a, b)
    let (ca, cb) = (cross(a, c), cross(c, b));
    let wedge = cross(a, b);
    if ca * wedge <= 0.0 || cb * wedge <= 0.0 || a[0] * c[0] + a[1] * c[1] <= 0.0 {
        return None;
    }
    if cross(c, dir) * wedge > 0.0 {
        ray_line(dir, b, next)
    } else {
        ray_line(dir, prev, a)
    }
}

fn stretch_boundaries(
    ceil: &ColumnBoundary,
    floor: &ColumnBoundary,
    kx: f64,
    kz: f64,
) -> (ColumnBoundary, ColumnBoundary) {
    let n = floor.len();
    let depth: Vec<f64> = floor.lat.iter().map(|&l| CAM_HEIGHT / (-l).tan()).collect();
    let up: Vec<f64> = depth.iter().zip(&ceil.lat).map(|(d, l)| d * l.tan()).collect();
    let point = |i: usize| {
        let phi = column_lon(i, n);
        [depth[i] * phi.sin(), depth[i] * phi.cos()]
    };
    let mut c_out = vec![0.0; n];
    let mut f_out = vec![0.0; n];
    for j in 0..n {
        let src = source_bearing(column_lon(j, n), kx, kz);
        let t = (src / std::f64::consts::TAU + 0.5) * n as f64 - 0.5;
        let t0 = t.floor();
        let frac = t - t0;
        let i0 = (t0 as i64).rem_euclid(n as i64) as usize;
        let i1 = (i0 + 1) % n;
        let dir = [src.sin(), src.cos()];
        let d = corner_hit(point(i0), point(i1), point((i0 + n - 1) % n), point((i1 + 1) % n), dir)
            .or_else(|| ray_line(dir, point(i0), point(i1)))
            .unwrap_or(depth[i0] + (depth[i1] - depth[i0]) * frac);
        let hc = up[i0] + (up[i1] - up[i0]) * frac;
        let p = [kx * d * dir[0], kz * d * dir[1]];
        let dn = p[0].hypot(p[1]);
        f_out[j] = -(CAM_HEIGHT / dn).atan();
        c_out[j] = (hc / dn).atan();
    }
    (
        ColumnBoundary {
            kind: BoundaryKind::Ceiling,
            lat: c_out,
            valid: vec![true; n],
        },
        ColumnBoundary {
            kind: BoundaryKind::Floor,
            lat: f_out,
            valid: vec![true; n],
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::RoomModel;
    use crate::pipeline::synth::{pano_ground_truth, render_panorama, Style};
    use crate::Execution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn room() -> RoomModel {
        RoomModel::new(vec![[-1.5, -2.0], [3.0, -2.0], [3.0, 2.5], [-1.5, 2.5]], 1.6, 3.0)
            .unwrap()
            .rotated(0.4)
    }

    fn sample(room: &RoomModel, w: usize) -> LoadedSample {
        let style = Style {
            walls: vec![[0.5, 0.4, 0.3], [0.3, 0.5, 0.4]],
            floor: [0.2, 0.2, 0.2],
            ceiling: [0.9, 0.9, 0.9],
        };
        let (c, f) = pano_ground_truth(room, w).unwrap();
        LoadedSample {
            id: "s".into(),
            domain: Branch::Pano,
            image: render_panorama(room, &style, w, 1, Execution::Sequential),
            ceiling: Some(c),
            floor: Some(f),
            pitch: 0.0,
            hfov_deg: None,
        }
    }

    fn max_dev(a: &ColumnBoundary, b: &ColumnBoundary) -> f64 {
        a.lat.iter().zip(&b.lat).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn toggles_off_is_identity() {
        let s = sample(&room(), 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, AugmentToggles::none(), &mut rng), s);
    }

    #[test]
    fn flip_is_an_involution_and_matches_mirrored_room() {
        let r = room();
        let s = sample(&r, 128);
        assert_eq!(flip(&flip(&s)), s);
        let (c, f) = pano_ground_truth(&r.mirrored(), 128).unwrap();
        let fl = flip(&s);
        assert!(max_dev(fl.ceiling.as_ref().unwrap(), &c) < 1e-12);
        assert!(max_dev(fl.floor.as_ref().unwrap(), &f) < 1e-12);
    }

    #[test]
    fn rotation_matches_rotated_room() {
        let r = room();
        let s = sample(&r, 128);
        let k = 13;
        let rot = rotate(&s, k);
        let yaw = k as f64 * std::f64::consts::TAU / 128.0;
        // output bearing phi shows input bearing phi + yaw
        let (c, f) = pano_ground_truth(&r.rotated(-yaw), 128).unwrap();
        assert!(max_dev(rot.ceiling.as_ref().unwrap(), &c) < 1e-9);
        assert!(max_dev(rot.floor.as_ref().unwrap(), &f) < 1e-9);
        assert_eq!(rot.image.get(0, 10), s.image.get(k, 10));
    }

    #[test]
    fn stretch_identity_and_consistency() {
        let r = room();
        let s = sample(&r, 512);
        assert_eq!(pano_stretch(&s, 1.0, 1.0), s);
        for (kx, kz) in [(1.5, 0.8), (0.6, 1.9), (2.0, 2.0)] {
            let st = pano_stretch(&s, kx, kz);
            let (c, f) = pano_ground_truth(&r.stretched(kx, kz), 512).unwrap();
            let tol = 0.1f64.to_radians();
            assert!(
                max_dev(st.ceiling.as_ref().unwrap(), &c) < tol,
                "{kx} {kz} {}",
                max_dev(st.ceiling.as_ref().unwrap(), &c).to_degrees()
            );
            assert!(
                max_dev(st.floor.as_ref().unwrap(), &f) < tol,
                "{kx} {kz} {}",
                max_dev(st.floor.as_ref().unwrap(), &f).to_degrees()
            );
        }
    }

    #[test]
    fn luminance_clips() {
        let s = sample(&room(), 32);
        let l = luminance(&s, 2.0);
        assert!(l.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(luminance(&s, 1.0), s);
    }
}
