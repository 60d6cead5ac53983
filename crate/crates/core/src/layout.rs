//! Column-wise layout representation.
//!
//! A layout is stored as one latitude per equirectangular column for the
//! ceiling-wall and floor-wall boundaries. Given a camera height, the floor
//! boundary converts to a horizon depth (distance to the wall on the
//! bird's-eye plane) and from there to a floor-plan polygon.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EquirectSpec, VerticalShift};

/// Longitude of the center of column `i` in an `n`-column full-sphere grid.
pub fn column_lon(i: usize, n: usize) -> f64 {
    ((i as f64 + 0.5) / n as f64 - 0.5) * 2.0 * PI
}

pub fn row_from_latitude(lat: f64, height: usize) -> Result<f64> {
    if !(lat.abs() <= FRAC_PI_2) {
        return Err(Error::LatitudeOutOfRange(lat));
    }
    Ok((0.5 - lat / PI) * height as f64)
}

pub fn latitude_from_row(v: f64, height: usize) -> Result<f64> {
    let h = height as f64;
    if !(0.0..=h).contains(&v) {
        return Err(Error::PixelOutOfRange {
            u: 0.0,
            v,
            width: 0,
            height,
        });
    }
    Ok((0.5 - v / h) * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Ceiling,
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnBoundary {
    pub kind: BoundaryKind,
    /// Latitude per column, radians.
    pub lat: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ColumnBoundary {
    /// Builds a boundary, checking lengths and the sign convention (ceilings
    /// above the horizon, floors below) on valid columns.
    pub fn new(kind: BoundaryKind, lat: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if lat.len() != valid.len() {
            return Err(Error::Shape(format!(
                "{} latitudes but {} validity flags",
                lat.len(),
                valid.len()
            )));
        }
        let b = Self { kind, lat, valid };
        b.check()?;
        Ok(b)
    }

    /// All columns valid.
    pub fn full(kind: BoundaryKind, lat: Vec<f64>) -> Result<Self> {
        let n = lat.len();
        Self::new(kind, lat, vec![true; n])
    }

    pub fn check(&self) -> Result<()> {
        for (column, (&lat, &ok)) in self.lat.iter().zip(&self.valid).enumerate() {
            if !ok {
                continue;
            }
            let good = match self.kind {
                BoundaryKind::Ceiling => lat > 0.0 && lat < FRAC_PI_2,
                BoundaryKind::Floor => lat < 0.0 && lat > -FRAC_PI_2,
            };
            if !good {
                return Err(Error::DegenerateBoundary { column, lat });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lat.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Circularly rotates columns so that `out[i] = self[i + k]`.
    pub fn rotate_columns(&self, k: usize) -> Self {
        let mut lat = self.lat.clone();
        let mut valid = self.valid.clone();
        if !lat.is_empty() {
            lat.rotate_left(k % self.len());
            valid.rotate_left(k % self.len());
        }
        Self {
            kind: self.kind,
            lat,
            valid,
        }
    }

    pub fn reversed(&self) -> Self {
        let mut lat = self.lat.clone();
        let mut valid = self.valid.clone();
        lat.reverse();
        valid.reverse();
        Self {
            kind: self.kind,
            lat,
            valid,
        }
    }

    /// Resamples a full-sphere boundary of `self.len()` columns onto `n`
    /// columns by linear interpolation in longitude. With `circular` the
    /// seam wraps; otherwise columns outside the source range are invalid.
    /// An output column is valid only if every source column it draws from is.
    pub fn resample(&self, n: usize, circular: bool) -> Self {
        let m = self.len();
        let mut lat = vec![0.0; n];
        let mut valid = vec![false; n];
        if m == 0 {
            return Self {
                kind: self.kind,
                lat,
                valid,
            };
        }
        for j in 0..n {
            let x = (j as f64 + 0.5) * m as f64 / n as f64 - 0.5;
            let x0 = x.floor();
            let f = x - x0;
            let i0 = x0 as i64;
            let fetch = |i: i64| -> Option<f64> {
                let idx = if circular {
                    i.rem_euclid(m as i64) as usize
                } else if (0..m as i64).contains(&i) {
                    i as usize
                } else {
                    return None;
                };
                self.valid[idx].then(|| self.lat[idx])
            };
            let a = if f < 1.0 - 1e-12 { fetch(i0) } else { Some(0.0) };
            let b = if f > 1e-12 { fetch(i0 + 1) } else { Some(0.0) };
            if let (Some(a), Some(b)) = (a, b) {
                lat[j] = if f <= 1e-12 {
                    a
                } else if f >= 1.0 - 1e-12 {
                    b
                } else {
                    a + (b - a) * f
                };
                valid[j] = true;
            }
        }
        Self {
            kind: self.kind,
            lat,
            valid,
        }
    }
}

impl VerticalShift for ColumnBoundary {
    fn vertical_shift_rows(&self, delta_lat: f64) -> Self {
        let mut out = self.clone();
        for (lat, ok) in out.lat.iter_mut().zip(out.valid.iter_mut()) {
            *lat += delta_lat;
            let in_kind = match self.kind {
                BoundaryKind::Ceiling => *lat > 0.0,
                BoundaryKind::Floor => *lat < 0.0,
            };
            if lat.abs() >= FRAC_PI_2 || !in_kind {
                *ok = false;
            }
        }
        out
    }
}

/// Per-column horizontal distance from the camera to the wall, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonDepth {
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl HorizonDepth {
    pub fn full(depth: Vec<f64>) -> Self {
        let n = depth.len();
        Self {
            depth,
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }
}

pub fn floor_boundary_to_depth(b: &ColumnBoundary, cam_h: f64) -> Result<HorizonDepth> {
    if b.kind != BoundaryKind::Floor {
        return Err(Error::Shape("horizon depth needs a floor boundary".into()));
    }
    let mut depth = vec![0.0; b.len()];
    for (column, (&lat, &ok)) in b.lat.iter().zip(&b.valid).enumerate() {
        if !ok {
            continue;
        }
        if !(lat < 0.0) {
            return Err(Error::DegenerateBoundary { column, lat });
        }
        depth[column] = cam_h / (-lat).tan();
    }
    Ok(HorizonDepth {
        depth,
        valid: b.valid.clone(),
    })
}

pub fn depth_to_floor_boundary(d: &HorizonDepth, cam_h: f64) -> Result<ColumnBoundary> {
    let mut lat = vec![0.0; d.len()];
    for (column, (&depth, &ok)) in d.depth.iter().zip(&d.valid).enumerate() {
        if !ok {
            continue;
        }
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth { column, depth });
        }
        lat[column] = -(cam_h / depth).atan();
    }
    Ok(ColumnBoundary {
        kind: BoundaryKind::Floor,
        lat,
        valid: d.valid.clone(),
    })
}

/// Mean ceiling height above the camera over columns valid in both inputs.
pub fn ceiling_height_from_boundaries(ceil: &ColumnBoundary, floor_depth: &HorizonDepth) -> Result<f64> {
    if ceil.len() != floor_depth.len() {
        return Err(Error::Shape("ceiling and depth column counts differ".into()));
    }
    let (sum, n) = ceil
        .lat
        .iter()
        .zip(&ceil.valid)
        .zip(floor_depth.depth.iter().zip(&floor_depth.valid))
        .filter(|((_, &a), (_, &b))| a && b)
        .fold((0.0, 0usize), |(s, n), ((&lat, _), (&d, _))| (s + d * lat.tan(), n + 1));
    if n == 0 {
        return Err(Error::NoValidColumns);
    }
    Ok(sum / n as f64)
}

/// Where a horizontal ray from the camera meets a wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallHit {
    pub distance: f64,
    /// Index of the edge starting at vertex `edge`.
    pub edge: usize,
    /// Distance along that edge from its start vertex, meters.
    pub along: f64,
}

/// Floor plan of a single room with the camera at the origin.
///
/// Points are `[x, z]` on the bird's-eye plane (`+z` forward, `+x` right).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomModel {
    pub floorplan: Vec<[f64; 2]>,
    pub cam_height: f64,
    pub ceil_height: f64,
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let o1 = cross(sub(b, a), sub(c, a));
    let o2 = cross(sub(b, a), sub(d, a));
    let o3 = cross(sub(d, c), sub(a, c));
    let o4 = cross(sub(d, c), sub(b, c));
    o1 * o2 <= 0.0 && o3 * o4 <= 0.0 && !(o1 == 0.0 && o2 == 0.0)
}

impl RoomModel {
    pub fn new(floorplan: Vec<[f64; 2]>, cam_height: f64, ceil_height: f64) -> Result<Self> {
        let room = Self {
            floorplan,
            cam_height,
            ceil_height,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.floorplan;
        let n = p.len();
        if n < 3 {
            return Err(Error::InvalidRoom("floor plan needs at least 3 vertices".into()));
        }
        if !(self.cam_height > 0.0 && self.cam_height < self.ceil_height) {
            return Err(Error::InvalidRoom(format!(
                "need 0 < camera height ({}) < ceiling height ({})",
                self.cam_height, self.ceil_height
            )));
        }
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRoom("non-finite vertex".into()));
        }
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_cross(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]) {
                    return Err(Error::InvalidRoom(format!("edges {i} and {j} intersect")));
                }
            }
        }
        // strict containment: origin inside and off every edge
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (p[i], p[(i + 1) % n]);
            if cross(a, b).abs() < 1e-12 && a[0] * b[0] + a[1] * b[1] <= 0.0 {
                return Err(Error::InvalidRoom("camera lies on a wall".into()));
            }
            if (a[1] > 0.0) != (b[1] > 0.0) && 0.0 < a[0] + (b[0] - a[0]) * (0.0 - a[1]) / (b[1] - a[1]) {
                inside = !inside;
            }
        }
        if !inside {
            return Err(Error::InvalidRoom("camera outside the floor plan".into()));
        }
        Ok(())
    }

    /// Distance to the nearest wall along bearing `phi` (0 = `+z`, growing
    /// toward `+x`).
    pub fn ray_distance(&self, phi: f64) -> Option<f64> {
        self.ray_hit(phi).map(|h| h.distance)
    }

    /// Nearest wall hit along bearing `phi`.
    pub fn ray_hit(&self, phi: f64) -> Option<WallHit> {
        let dir = [phi.sin(), phi.cos()];
        let n = self.floorplan.len();
        let mut best: Option<WallHit> = None;
        for i in 0..n {
            let a = self.floorplan[i];
            let e = sub(self.floorplan[(i + 1) % n], a);
            let denom = cross(dir, e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let t = cross(a, e) / denom;
            let s = cross(a, dir) / denom;
            if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) && best.is_none_or(|b| t < b.distance) {
                best = Some(WallHit {
                    distance: t,
                    edge: i,
                    along: s.clamp(0.0, 1.0) * e[0].hypot(e[1]),
                });
            }
        }
        best
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            floorplan: self.floorplan.iter().map(|p| [p[0] * s, p[1] * s]).collect(),
            cam_height: self.cam_height * s,
            ceil_height: self.ceil_height * s,
        }
    }

    /// Stretches the floor plan anisotropically (`x` by `kx`, `z` by `kz`).
    pub fn stretched(&self, kx: f64, kz: f64) -> Self {
        Self {
            floorplan: self.floorplan.iter().map(|p| [p[0] * kx, p[1] * kz]).collect(),
            ..self.clone()
        }
    }

    pub fn mirrored(&self) -> Self {
        let mut floorplan: Vec<[f64; 2]> = self.floorplan.iter().map(|p| [-p[0], p[1]]).collect();
        floorplan.reverse();
        Self {
            floorplan,
            ..self.clone()
        }
    }

    /// Rotates the room about the camera by `yaw` radians (bearing `phi`
    /// becomes `phi + yaw`).
    pub fn rotated(&self, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            floorplan: self
                .floorplan
                .iter()
                .map(|p| [p[0] * c + p[1] * s, -p[0] * s + p[1] * c])
                .collect(),
            ..self.clone()
        }
    }
}

/// Analytic ceiling and floor boundaries of a room seen from the origin.
/// Column `i` looks along bearing `column_lon(i) + yaw`.
pub fn room_to_boundaries(room: &RoomModel, spec: EquirectSpec, yaw: f64) -> Result<(ColumnBoundary, ColumnBoundary)> {
    room.validate()?;
    let w = spec.width;
    let up = room.ceil_height - room.cam_height;
    let mut ceil = Vec::with_capacity(w);
    let mut floor = Vec::with_capacity(w);
    for i in 0..w {
        let phi = spec.column_lon(i) + yaw;
        let d = room
            .ray_distance(phi)
            .ok_or_else(|| Error::InvalidRoom(format!("ray at column {i} escapes the floor plan")))?;
        ceil.push((up / d).atan());
        floor.push(-(room.cam_height / d).atan());
    }
    Ok((
        ColumnBoundary::full(BoundaryKind::Ceiling, ceil)?,
        ColumnBoundary::full(BoundaryKind::Floor, floor)?,
    ))
}

/// Corner-list annotation entry point; same as [`room_to_boundaries`] at yaw 0.
pub fn corners_to_boundary(
    floorplan: &[[f64; 2]],
    cam_h: f64,
    ceil_height: f64,
    spec: EquirectSpec,
) -> Result<(ColumnBoundary, ColumnBoundary)> {
    let room = RoomModel::new(floorplan.to_vec(), cam_h, ceil_height)?;
    room_to_boundaries(&room, spec, 0.0)
}

/// Bird's-eye points `d_i (sin phi_i, cos phi_i)` in column order.
pub fn boundaries_to_floorplan(d: &HorizonDepth) -> Result<Vec<[f64; 2]>> {
    if d.valid.iter().any(|&v| !v) {
        return Err(Error::NoValidColumns);
    }
    let n = d.len();
    Ok(d.depth
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let phi = column_lon(i, n);
            [r * phi.sin(), r * phi.cos()]
        })
        .collect())
}

/// Boundary annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum Annotation {
    /// Latitude arrays over `columns` full-sphere columns.
    Boundaries {
        columns: usize,
        ceiling: Option<ColumnBoundary>,
        floor: Option<ColumnBoundary>,
    },
    /// Room corners; boundaries are rendered analytically at any resolution.
    Corners {
        columns: usize,
        polygon: Vec<[f64; 2]>,
        cam_height: f64,
        ceil_height: f64,
    },
}

impl Annotation {
    pub fn columns(&self) -> usize {
        match self {
            Annotation::Boundaries { columns, .. } | Annotation::Corners { columns, .. } => *columns,
        }
    }

    pub fn room(&self) -> Option<RoomModel> {
        match self {
            Annotation::Corners {
                polygon,
                cam_height,
                ceil_height,
                ..
            } => Some(RoomModel {
                floorplan: polygon.clone(),
                cam_height: *cam_height,
                ceil_height: *ceil_height,
            }),
            Annotation::Boundaries { .. } => None,
        }
    }

    /// `(ceiling, floor)` at the annotation's own column count.
    pub fn boundaries(&self) -> Result<(Option<ColumnBoundary>, Option<ColumnBoundary>)> {
        match self {
            Annotation::Boundaries {
                columns,
                ceiling,
                floor,
            } => {
                for b in ceiling.iter().chain(floor) {
                    if b.len() != *columns {
                        return Err(Error::Data(format!(
                            "{:?} boundary has {} columns, annotation declares {columns}",
                            b.kind,
                            b.len()
                        )));
                    }
                    b.check()?;
                }
                Ok((ceiling.clone(), floor.clone()))
            }
            Annotation::Corners { columns, .. } => {
                let room = self.room().expect("corner annotation");
                let spec = EquirectSpec {
                    width: *columns,
                    height: columns / 2,
                };
                let (c, f) = room_to_boundaries(&room, spec, 0.0)?;
                Ok((Some(c), Some(f)))
            }
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
