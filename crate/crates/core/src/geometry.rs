//! Spherical coordinate conventions and perspective/equirectangular projection.
//!
//! Conventions used throughout the crate:
//!
//! * camera frame: `+z` forward, `+x` right, `+y` up;
//! * longitude `0` is forward and grows to the right, in `[-pi, pi)`;
//! * latitude `+pi/2` is the zenith;
//! * equirectangular `u = (lon / 2pi + 0.5) W`, `v = (0.5 - lat / pi) H`, so
//!   pixel `i` has its center at `i + 0.5` and the top row looks up.
//!
//! A perspective view is placed on the sphere either by a true extrinsic
//! rotation ([`ShiftMode::Rotate`]) or, by default, by projecting it level and
//! translating the result in latitude by the camera pitch
//! ([`ShiftMode::Translate`]).

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::raster::{self, RgbImage};

/// Wraps a longitude into `[-pi, pi)`.
pub fn wrap_lon(lon: f64) -> f64 {
    let t = (lon + PI).rem_euclid(TAU) - PI;
    if t >= PI {
        -PI
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !(lat.abs() <= FRAC_PI_2) || !lon.is_finite() {
            return Err(Error::LatitudeOutOfRange(lat));
        }
        Ok(Self {
            lon: wrap_lon(lon),
            lat,
        })
    }

    /// Direction of an arbitrary (not necessarily unit) vector.
    pub fn from_direction(d: [f64; 3]) -> Self {
        let lon = wrap_lon(d[0].atan2(d[2]));
        let lat = d[1].atan2(d[0].hypot(d[2]));
        Self { lon, lat }
    }

    pub fn direction(&self) -> [f64; 3] {
        let (sl, cl) = self.lat.sin_cos();
        let (so, co) = self.lon.sin_cos();
        [cl * so, sl, cl * co]
    }
}

/// Full-sphere equirectangular grid, `W = 2H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquirectSpec {
    pub width: usize,
    pub height: usize,
}

impl Default for EquirectSpec {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 512,
        }
    }
}

impl EquirectSpec {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || width != 2 * height {
            return Err(Error::Config(format!(
                "equirectangular grid must satisfy W = 2H > 0, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    /// Longitude of the center of column `i`.
    pub fn column_lon(&self, i: usize) -> f64 {
        ((i as f64 + 0.5) / self.width as f64 - 0.5) * TAU
    }

    /// Latitude of the center of row `j`.
    pub fn row_lat(&self, j: usize) -> f64 {
        (0.5 - (j as f64 + 0.5) / self.height as f64) * PI
    }
}

pub fn equirect_uv_from_lonlat(p: LonLat, spec: EquirectSpec) -> (f64, f64) {
    let w = spec.width as f64;
    let mut u = (p.lon / TAU + 0.5) * w;
    if u >= w {
        u -= w;
    }
    let v = (0.5 - p.lat / PI) * spec.height as f64;
    (u, v)
}

pub fn lonlat_from_equirect_uv(u: f64, v: f64, spec: EquirectSpec) -> Result<LonLat> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    if !(0.0..w).contains(&u) || !(0.0..=h).contains(&v) {
        return Err(Error::PixelOutOfRange {
            u,
            v,
            width: spec.width,
            height: spec.height,
        });
    }
    Ok(LonLat {
        lon: (u / w - 0.5) * TAU,
        lat: (0.5 - v / h) * PI,
    })
}

/// Pinhole camera with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeSpec {
    pub hfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeSpec {
    pub fn new(hfov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::Config(format!("hfov must lie in (0, 180), got {hfov_deg}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("pinhole image must be non-empty".into()));
        }
        Ok(Self {
            hfov_deg,
            width,
            height,
        })
    }

    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan()
    }

    /// Vertical field of view in radians.
    pub fn vfov(&self) -> f64 {
        2.0 * ((self.height as f64 / 2.0) / self.focal()).atan()
    }

    /// Continuous pixel coordinate of a camera-frame ray, if it points forward.
    pub fn pixel_from_ray(&self, d: [f64; 3]) -> Option<(f64, f64)> {
        if d[2] <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some((
            self.width as f64 / 2.0 + f * d[0] / d[2],
            self.height as f64 / 2.0 - f * d[1] / d[2],
        ))
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width as f64).contains(&u) && (0.0..=self.height as f64).contains(&v)
    }
}

/// Unit camera-frame ray through continuous pixel coordinate `(u, v)`.
pub fn ray_from_pinhole_pixel(u: f64, v: f64, pinhole: &PinholeSpec) -> [f64; 3] {
    let f = pinhole.focal();
    let x = (u - pinhole.width as f64 / 2.0) / f;
    let y = (pinhole.height as f64 / 2.0 - v) / f;
    let n = (x * x + y * y + 1.0).sqrt();
    [x / n, y / n, 1.0 / n]
}

/// Camera pitch in radians; positive tilts the camera up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pitch(pub f64);

impl Pitch {
    pub fn from_degrees(deg: f64) -> Self {
        Pitch(deg.to_radians())
    }

    /// Rotates a camera-frame direction into the level (gravity-aligned) frame.
    pub fn camera_to_level(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.0.sin_cos();
        [d[0], d[1] * c + d[2] * s, -d[1] * s + d[2] * c]
    }

    pub fn level_to_camera(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.0.sin_cos();
        [d[0], d[1] * c - d[2] * s, d[1] * s + d[2] * c]
    }

    /// Fails when the view would leave the grid under a latitude translation.
    pub fn check_translate(&self, pinhole: &PinholeSpec) -> Result<()> {
        let half = pinhole.vfov() / 2.0;
        if self.0.abs() + half < FRAC_PI_2 {
            Ok(())
        } else {
            Err(Error::PitchTooLarge {
                pitch_deg: self.0.to_degrees(),
                half_vfov_deg: half.to_degrees(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    #[default]
    Translate,
    Rotate,
}

/// Half-open column interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub lo: usize,
    pub hi: usize,
}

impl Span {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> usize {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, col: usize) -> bool {
        (self.lo..self.hi).contains(&col)
    }
}

/// Where a cropped patch sits inside its full equirectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropInfo {
    pub full_width: usize,
    pub offset: usize,
}

/// A (possibly partial) equirectangular image.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectPatch {
    /// The full-sphere grid the patch lives on.
    pub spec: EquirectSpec,
    pub image: RgbImage,
    pub mask: Vec<bool>,
    /// Informative columns, in the coordinates of `image`.
    pub span: Span,
    /// Set once the patch has been cropped to its span.
    pub crop: Option<CropInfo>,
    pub pitch: f64,
    pub hfov_deg: Option<f64>,
}

impl EquirectPatch {
    /// Wraps a full panorama: span covers every column and the mask is all-true.
    pub fn from_panorama(image: RgbImage) -> Result<Self> {
        let spec = EquirectSpec::new(image.width(), image.height())?;
        let n = image.width() * image.height();
        Ok(Self {
            spec,
            span: Span::new(0, image.width()),
            image,
            mask: vec![true; n],
            crop: None,
            pitch: 0.0,
            hfov_deg: None,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn mask_at(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width() + x]
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Column offset of `image` inside the full grid.
    pub fn column_offset(&self) -> usize {
        self.crop.map_or(0, |c| c.offset)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.image.save(dir.join("image.png"))?;
        raster::save_mask(&self.mask, self.width(), self.height(), dir.join("mask.png"))?;
        let sidecar = PatchSidecar {
            image: "image.png".into(),
            mask: "mask.png".into(),
            span: [self.span.lo, self.span.hi],
            height: self.spec.height,
            width: self.spec.width,
            pitch: self.pitch,
            hfov: self.hfov_deg,
            crop_offset: self.crop.map(|c| c.offset),
        };
        std::fs::write(dir.join("patch.json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar: PatchSidecar = serde_json::from_str(&std::fs::read_to_string(dir.join("patch.json"))?)?;
        let spec = EquirectSpec::new(sidecar.width, sidecar.height)?;
        let image = RgbImage::load(dir.join(&sidecar.image))?;
        let (mask, mw, mh) = raster::load_mask(dir.join(&sidecar.mask))?;
        if (mw, mh) != (image.width(), image.height()) || image.height() != spec.height {
            return Err(Error::Data(format!(
                "patch {} has inconsistent image/mask/sidecar sizes",
                dir.display()
            )));
        }
        let crop = sidecar.crop_offset.map(|offset| CropInfo {
            full_width: spec.width,
            offset,
        });
        if crop.is_none() && image.width() != spec.width {
            return Err(Error::Data("uncropped patch narrower than its grid".into()));
        }
        Ok(Self {
            spec,
            image,
            mask,
            span: Span::new(sidecar.span[0], sidecar.span[1]),
            crop,
            pitch: sidecar.pitch,
            hfov_deg: sidecar.hfov,
        })
    }
}

/// JSON sidecar stored next to a patch's image and mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub image: String,
    pub mask: String,
    pub span: [usize; 2],
    /// Full-sphere grid height.
    pub height: usize,
    /// Full-sphere grid width.
    pub width: usize,
    /// Pitch in radians.
    pub pitch: f64,
    pub hfov: Option<f64>,
    #[serde(default)]
    pub crop_offset: Option<usize>,
}

/// Columns covered by a view of the given horizontal FoV, centered on `W/2`.
pub fn informative_span_for_hfov(hfov_deg: f64, spec: EquirectSpec) -> Span {
    let w = spec.width;
    let width = ((w as f64 * hfov_deg / 360.0).round() as usize).min(w);
    let lo = (w - width) / 2;
    Span::new(lo, lo + width)
}

pub fn informative_span(pinhole: &PinholeSpec, spec: EquirectSpec) -> Span {
    informative_span_for_hfov(pinhole.hfov_deg, spec)
}

pub fn project_perspective_to_equirect(
    img: &RgbImage,
    pinhole: &PinholeSpec,
    pitch: Pitch,
    spec: EquirectSpec,
    mode: ShiftMode,
) -> Result<EquirectPatch> {
    if img.width() != pinhole.width || img.height() != pinhole.height {
        return Err(Error::Shape(format!(
            "image is {}x{}, pinhole expects {}x{}",
            img.width(),
            img.height(),
            pinhole.width,
            pinhole.height
        )));
    }
    match mode {
        ShiftMode::Translate => {
            pitch.check_translate(pinhole)?;
            let span = informative_span(pinhole, spec);
            let half = pinhole.vfov() / 2.0;
            let level = sample_onto_grid(img, pinhole, spec, span, (-half, half), |d| d);
            let mut patch = finish_patch(level, spec, span, pinhole)?;
            patch = vertical_shift_patch(&patch, pitch.0);
            patch.pitch = pitch.0;
            if patch.mask_count() == 0 {
                return Err(Error::EmptyProjection);
            }
            Ok(patch)
        }
        ShiftMode::Rotate => {
            let full = Span::new(0, spec.width);
            // top and bottom edge centers bound the latitudes of a pitched view
            let half = pinhole.vfov() / 2.0;
            let lats = ((pitch.0 - half).min(0.0), (pitch.0 + half).max(0.0));
            let (image, mask) = sample_onto_grid(img, pinhole, spec, full, lats, |d| pitch.level_to_camera(d));
            let cols: Vec<usize> = (0..spec.width)
                .filter(|&x| (0..spec.height).any(|y| mask[y * spec.width + x]))
                .collect();
            let span = match (cols.first(), cols.last()) {
                (Some(&lo), Some(&hi)) => Span::new(lo, hi + 1),
                _ => return Err(Error::EmptyProjection),
            };
            let mut patch = finish_patch((image, mask), spec, span, pinhole)?;
            patch.pitch = pitch.0;
            Ok(patch)
        }
    }
}

fn finish_patch(
    (image, mask): (RgbImage, Vec<bool>),
    spec: EquirectSpec,
    span: Span,
    pinhole: &PinholeSpec,
) -> Result<EquirectPatch> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyProjection);
    }
    Ok(EquirectPatch {
        spec,
        image,
        mask,
        span,
        crop: None,
        pitch: 0.0,
        hfov_deg: Some(pinhole.hfov_deg),
    })
}

/// Backward-maps every grid pixel in `span` through `to_camera` into the
/// pinhole image. Rows outside `lat_range` are known to miss the view.
fn sample_onto_grid(
    img: &RgbImage,
    pinhole: &PinholeSpec,
    spec: EquirectSpec,
    span: Span,
    lat_range: (f64, f64),
    to_camera: impl Fn([f64; 3]) -> [f64; 3] + Sync,
) -> (RgbImage, Vec<bool>) {
    let (w, h) = (spec.width, spec.height);
    let slack = PI / h as f64;
    let lon: Vec<(f64, f64)> = (0..w).map(|x| spec.column_lon(x).sin_cos()).collect();
    let f = pinhole.focal();
    let (cx, cy) = (pinhole.width as f64 / 2.0, pinhole.height as f64 / 2.0);
    let (pw, ph) = (pinhole.width as f64, pinhole.height as f64);
    let rows = par::map_range(Execution::Parallel, h, |y| {
        let lat = spec.row_lat(y);
        if lat < lat_range.0 - slack || lat > lat_range.1 + slack {
            return None;
        }
        let mut px = vec![0.0f32; w * 3];
        let mut m = vec![false; w];
        let (sl, cl) = lat.sin_cos();
        for x in span.lo..span.hi {
            let (so, co) = lon[x];
            let d = to_camera([cl * so, sl, cl * co]);
            if d[2] <= 0.0 {
                continue;
            }
            let (u, v) = (cx + f * d[0] / d[2], cy - f * d[1] / d[2]);
            if (0.0..=pw).contains(&u) && (0.0..=ph).contains(&v) {
                px[x * 3..x * 3 + 3].copy_from_slice(&img.sample_bilinear(u, v, false));
                m[x] = true;
            }
        }
        Some((px, m))
    });
    let mut data = Vec::with_capacity(w * h * 3);
    let mut mask = Vec::with_capacity(w * h);
    for row in rows {
        match row {
            Some((px, m)) => {
                data.extend_from_slice(&px);
                mask.extend_from_slice(&m);
            }
            None => {
                data.resize(data.len() + w * 3, 0.0);
                mask.resize(mask.len() + w, false);
            }
        }
    }
    (RgbImage::from_raw(w, h, data).expect("sized"), mask)
}

/// Types whose content can be translated in latitude.
pub trait VerticalShift: Sized {
    /// Moves content up by `delta_lat` radians (down when negative). Content
    /// pushed off the grid is dropped and marked invalid.
    fn vertical_shift_rows(&self, delta_lat: f64) -> Self;
}

impl VerticalShift for EquirectPatch {
    fn vertical_shift_rows(&self, delta_lat: f64) -> Self {
        vertical_shift_patch(self, delta_lat)
    }
}

fn vertical_shift_patch(patch: &EquirectPatch, delta_lat: f64) -> EquirectPatch {
    let (w, h) = (patch.width(), patch.height());
    // output row r reads source row r + s
    let s = delta_lat * patch.spec.height as f64 / PI;
    let mut base = s.floor();
    let mut frac = s - base;
    if frac < 1e-9 {
        frac = 0.0;
    } else if frac > 1.0 - 1e-9 {
        base += 1.0;
        frac = 0.0;
    }
    let base = base as i64;
    let frac32 = frac as f32;
    let mut out = RgbImage::new(w, h);
    let mut mask = vec![false; w * h];
    let mut any_col = vec![false; w];
    for r in 0..h as i64 {
        let r0 = r + base;
        let r1 = r0 + 1;
        let in_range = |q: i64| (0..h as i64).contains(&q);
        if !in_range(r0) || (frac > 0.0 && !in_range(r1)) {
            continue;
        }
        // informative pixels never lie outside the span
        for x in patch.span.lo..patch.span.hi {
            let m0 = patch.mask_at(x, r0 as usize);
            let ok = m0 && (frac == 0.0 || patch.mask_at(x, r1 as usize));
            if !ok {
                continue;
            }
            let p0 = patch.image.get(x, r0 as usize);
            let px = if frac == 0.0 {
                p0
            } else {
                let p1 = patch.image.get(x, r1 as usize);
                [
                    p0[0] + (p1[0] - p0[0]) * frac32,
                    p0[1] + (p1[1] - p0[1]) * frac32,
                    p0[2] + (p1[2] - p0[2]) * frac32,
                ]
            };
            out.set(x, r as usize, px);
            mask[r as usize * w + x] = true;
            any_col[x] = true;
        }
    }
    let mut shifted = EquirectPatch {
        spec: patch.spec,
        image: out,
        mask,
        span: patch.span,
        crop: patch.crop,
        pitch: patch.pitch + delta_lat,
        hfov_deg: patch.hfov_deg,
    };
    // the span is a column property; rows leaving the grid cannot widen it
    if !any_col[patch.span.lo..patch.span.hi].iter().any(|&a| a) {
        shifted.span = Span::new(patch.span.lo, patch.span.lo);
    }
    shifted
}

/// Samples a perspective view out of a patch (inverse of
/// [`project_perspective_to_equirect`] for the same `pitch` and `mode`).
pub fn reproject_equirect_to_perspective(
    patch: &EquirectPatch,
    pinhole: &PinholeSpec,
    pitch: Pitch,
    mode: ShiftMode,
) -> Result<RgbImage> {
    let spec = patch.spec;
    let offset = patch.column_offset() as f64;
    let full = patch.crop.is_none() && patch.span == Span::new(0, spec.width);
    let (lo, hi) = (patch.span.lo as f64, patch.span.hi as f64);
    let (pw, ph) = (pinhole.width, pinhole.height);
    let rows = par::map_range(Execution::Parallel, ph, |y| -> Result<Vec<f32>> {
        let mut row = vec![0.0f32; pw * 3];
        for x in 0..pw {
            let d = ray_from_pinhole_pixel(x as f64 + 0.5, y as f64 + 0.5, pinhole);
            let ll = match mode {
                ShiftMode::Translate => {
                    let mut ll = LonLat::from_direction(d);
                    ll.lat = (ll.lat + pitch.0).clamp(-FRAC_PI_2, FRAC_PI_2);
                    ll
                }
                ShiftMode::Rotate => LonLat::from_direction(pitch.camera_to_level(d)),
            };
            let (u, v) = equirect_uv_from_lonlat(ll, spec);
            let px = if full {
                patch.image.sample_bilinear(u, v, true)
            } else {
                let local = u - offset;
                // the span is rounded to whole columns, so allow one column of slack
                if local < lo - 1.0 || local > hi + 1.0 {
                    return Err(Error::FovNotCovered(format!(
                        "column {u:.2} outside span [{}, {})",
                        patch.span.lo + patch.column_offset(),
                        patch.span.hi + patch.column_offset()
                    )));
                }
                sample_within_span(patch, local, v)
            };
            row[x * 3..x * 3 + 3].copy_from_slice(&px);
        }
        Ok(row)
    });
    let mut data = Vec::with_capacity(pw * ph * 3);
    for r in rows {
        data.extend_from_slice(&r?);
    }
    RgbImage::from_raw(pw, ph, data)
}

fn sample_within_span(patch: &EquirectPatch, u: f64, v: f64) -> [f32; 3] {
    // clamp to the span so out-of-span (black) columns never bleed in
    let span = patch.span;
    let x = (u - 0.5).clamp(span.lo as f64, (span.hi - 1) as f64);
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let h = patch.height() as i64;
    let c0 = x0 as usize;
    let c1 = (c0 + 1).min(span.hi - 1);
    let r0 = (y0 as i64).clamp(0, h - 1) as usize;
    let r1 = (y0 as i64 + 1).clamp(0, h - 1) as usize;
    let img = &patch.image;
    let (p00, p10, p01, p11) = (img.get(c0, r0), img.get(c1, r0), img.get(c0, r1), img.get(c1, r1));
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let top = p00[k] + (p10[k] - p00[k]) * fx;
        let bottom = p01[k] + (p11[k] - p01[k]) * fx;
        out[k] = top + (bottom - top) * fy;
    }
    out
}

/// Keeps only the informative columns, re-basing column indices.
pub fn crop_to_span(patch: &EquirectPatch) -> Result<EquirectPatch> {
    if patch.span.is_empty() {
        return Err(Error::EmptySpan);
    }
    let Span { lo, hi } = patch.span;
    let w = patch.width();
    let image = patch.image.columns(lo, hi);
    let mask = (0..patch.height())
        .flat_map(|y| patch.mask[y * w + lo..y * w + hi].iter().copied())
        .collect();
    Ok(EquirectPatch {
        spec: patch.spec,
        image,
        mask,
        span: Span::new(0, hi - lo),
        crop: Some(CropInfo {
            full_width: patch.spec.width,
            offset: patch.column_offset() + lo,
        }),
        pitch: patch.pitch,
        hfov_deg: patch.hfov_deg,
    })
}

/// Places a cropped patch back on its full grid, zero-filling the rest.
pub fn uncrop(patch: &EquirectPatch) -> EquirectPatch {
    let Some(crop) = patch.crop else {
        return patch.clone();
    };
    let (w, h) = (crop.full_width, patch.height());
    let mut image = RgbImage::new(w, h);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..patch.width() {
            image.set(crop.offset + x, y, patch.image.get(x, y));
            mask[y * w + crop.offset + x] = patch.mask_at(x, y);
        }
    }
    EquirectPatch {
        spec: patch.spec,
        image,
        mask,
        span: Span::new(crop.offset + patch.span.lo, crop.offset + patch.span.hi),
        crop: None,
        pitch: patch.pitch,
        hfov_deg: patch.hfov_deg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uv_examples() {
        let spec = EquirectSpec::default();
        let uv = |lon, lat| equirect_uv_from_lonlat(LonLat::new(lon, lat).unwrap(), spec);
        assert_eq!(uv(0.0, 0.0), (512.0, 256.0));
        assert_eq!(uv(-PI, 0.0), (0.0, 256.0));
        assert_eq!(uv(0.0, FRAC_PI_2), (512.0, 0.0));

        let ll = lonlat_from_equirect_uv(512.0, 256.0, spec).unwrap();
        assert_eq!((ll.lon, ll.lat), (0.0, 0.0));
        let ll = lonlat_from_equirect_uv(0.0, 256.0, spec).unwrap();
        assert_eq!((ll.lon, ll.lat), (-PI, 0.0));
        assert!(lonlat_from_equirect_uv(1024.0, 10.0, spec).is_err());
        assert!(lonlat_from_equirect_uv(3.0, -0.1, spec).is_err());
    }

    #[test]
    fn lonlat_wraps_and_rejects_bad_latitude() {
        let p = LonLat::new(3.0 * PI / 2.0, 0.1).unwrap();
        assert!(close(p.lon, -FRAC_PI_2, 1e-12));
        assert_eq!(LonLat::new(PI, 0.0).unwrap().lon, -PI);
        assert!(LonLat::new(0.0, 1.6).is_err());
    }

    #[test]
    fn pinhole_rays() {
        let cam = PinholeSpec::new(90.0, 512, 512).unwrap();
        let c = ray_from_pinhole_pixel(256.0, 256.0, &cam);
        assert!(close(c[0], 0.0, 1e-15) && close(c[1], 0.0, 1e-15) && close(c[2], 1.0, 1e-15));

        let corner = LonLat::from_direction(ray_from_pinhole_pixel(512.0, 0.0, &cam));
        assert!(close(corner.lon.to_degrees(), 45.0, 1e-9));
        assert!(close(
            corner.lat.to_degrees(),
            (1.0 / 2f64.sqrt()).atan().to_degrees(),
            1e-9
        ));
        assert!(close(corner.lat.to_degrees(), 35.264, 1e-3));

        let edge = LonLat::from_direction(ray_from_pinhole_pixel(512.0, 256.0, &cam));
        assert!(close(edge.lon.to_degrees(), 45.0, 1e-9) && close(edge.lat, 0.0, 1e-12));

        let narrow = PinholeSpec::new(30.0, 64, 48).unwrap();
        let d = ray_from_pinhole_pixel(32.0, 24.0, &narrow);
        assert_eq!(d, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn spans() {
        let spec = EquirectSpec::default();
        assert_eq!(informative_span_for_hfov(90.0, spec), Span::new(384, 640));
        assert_eq!(informative_span_for_hfov(360.0, spec), Span::new(0, 1024));
        assert_eq!(informative_span_for_hfov(45.0, spec).width(), 128);
    }

    fn gradient(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.5])
    }

    #[test]
    fn level_projection_is_symmetric_with_quarter_span() {
        let cam = PinholeSpec::new(90.0, 128, 128).unwrap();
        let spec = EquirectSpec::new(256, 128).unwrap();
        let p =
            project_perspective_to_equirect(&gradient(128, 128), &cam, Pitch(0.0), spec, ShiftMode::Translate).unwrap();
        assert_eq!(p.span, Span::new(96, 160));
        for x in 0..spec.width {
            for y in 0..spec.height {
                assert_eq!(p.mask_at(x, y), p.mask_at(x, spec.height - 1 - y));
                if !p.span.contains(x) {
                    assert!(!p.mask_at(x, y));
                }
            }
        }
    }

    #[test]
    fn translate_rejects_large_pitch() {
        let cam = PinholeSpec::new(120.0, 64, 64).unwrap();
        let err = project_perspective_to_equirect(
            &gradient(64, 64),
            &cam,
            Pitch::from_degrees(30.0),
            EquirectSpec::new(256, 128).unwrap(),
            ShiftMode::Translate,
        );
        assert!(matches!(err, Err(Error::PitchTooLarge { .. })));
    }

    #[test]
    fn downward_pitch_translates_mask() {
        let cam = PinholeSpec::new(90.0, 128, 128).unwrap();
        let spec = EquirectSpec::default();
        let img = gradient(128, 128);
        let level = project_perspective_to_equirect(&img, &cam, Pitch(0.0), spec, ShiftMode::Translate).unwrap();
        let down = project_perspective_to_equirect(&img, &cam, Pitch::from_degrees(-30.0), spec, ShiftMode::Translate)
            .unwrap();
        let rows = |p: &EquirectPatch, x: usize| {
            let r: Vec<usize> = (0..spec.height).filter(|&y| p.mask_at(x, y)).collect();
            (r[0] as f64, *r.last().unwrap() as f64)
        };
        let shift = 512.0 * 30.0 / 180.0;
        for x in [384, 450, 512, 639] {
            let (a0, a1) = rows(&level, x);
            let (b0, b1) = rows(&down, x);
            assert!((b0 - a0 - shift).abs() <= 1.0, "{x}: {a0} {b0}");
            assert!((b1 - a1 - shift).abs() <= 1.0);
        }
    }

    #[test]
    fn integer_row_shift_round_trips() {
        let cam = PinholeSpec::new(60.0, 64, 64).unwrap();
        let spec = EquirectSpec::new(256, 128).unwrap();
        let p =
            project_perspective_to_equirect(&gradient(64, 64), &cam, Pitch(0.0), spec, ShiftMode::Translate).unwrap();
        let theta = 7.0 * PI / 128.0;
        let back = p.vertical_shift_rows(theta).vertical_shift_rows(-theta);
        assert_eq!(back.mask, p.mask);
        assert_eq!(back.image, p.image);
        assert_eq!(p.vertical_shift_rows(0.0), p);
    }

    #[test]
    fn constant_image_reprojects_exactly() {
        let cam = PinholeSpec::new(75.0, 96, 64).unwrap();
        let spec = EquirectSpec::new(512, 256).unwrap();
        let img = RgbImage::from_fn(96, 64, |_, _| [0.25, 0.5, 0.75]);
        for (pitch, mode) in [(0.0, ShiftMode::Translate), (20.0, ShiftMode::Rotate)] {
            let pitch = Pitch::from_degrees(pitch);
            let patch = project_perspective_to_equirect(&img, &cam, pitch, spec, mode).unwrap();
            let cropped = crop_to_span(&patch).unwrap();
            let back = reproject_equirect_to_perspective(&cropped, &cam, pitch, mode).unwrap();
            for y in 2..62 {
                for x in 2..94 {
                    assert_eq!(back.get(x, y), [0.25, 0.5, 0.75]);
                }
            }
        }
    }

    #[test]
    fn crop_and_uncrop() {
        let cam = PinholeSpec::new(90.0, 64, 64).unwrap();
        let spec = EquirectSpec::default();
        let p =
            project_perspective_to_equirect(&gradient(64, 64), &cam, Pitch(0.1), spec, ShiftMode::Translate).unwrap();
        let c = crop_to_span(&p).unwrap();
        assert_eq!(c.width(), 256);
        assert_eq!(c.mask_count(), p.mask_count());
        let u = uncrop(&c);
        assert_eq!(u.span, p.span);
        for i in 0..p.mask.len() {
            assert_eq!(u.mask[i], p.mask[i]);
        }
        assert_eq!(u.image, p.image);

        let pano = EquirectPatch::from_panorama(gradient(64, 32)).unwrap();
        let same = crop_to_span(&pano).unwrap();
        assert_eq!(same.image, pano.image);
        assert_eq!(same.mask, pano.mask);

        let mut empty = pano.clone();
        empty.span = Span::new(3, 3);
        assert!(matches!(crop_to_span(&empty), Err(Error::EmptySpan)));
    }

    #[test]
    fn reproject_rejects_uncovered_fov() {
        let narrow = PinholeSpec::new(45.0, 64, 64).unwrap();
        let wide = PinholeSpec::new(90.0, 64, 64).unwrap();
        let spec = EquirectSpec::new(512, 256).unwrap();
        let p = project_perspective_to_equirect(&gradient(64, 64), &narrow, Pitch(0.0), spec, ShiftMode::Translate)
            .unwrap();
        let c = crop_to_span(&p).unwrap();
        assert!(matches!(
            reproject_equirect_to_perspective(&c, &wide, Pitch(0.0), ShiftMode::Translate),
            Err(Error::FovNotCovered(_))
        ));
    }

    #[test]
    fn patch_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = PinholeSpec::new(90.0, 32, 32).unwrap();
        let p = project_perspective_to_equirect(
            &gradient(32, 32),
            &cam,
            Pitch(-0.2),
            EquirectSpec::new(128, 64).unwrap(),
            ShiftMode::Translate,
        )
        .unwrap();
        let c = crop_to_span(&p).unwrap();
        c.save(dir.path()).unwrap();
        let back = EquirectPatch::load(dir.path()).unwrap();
        assert_eq!(back.mask, c.mask);
        assert_eq!(back.span, c.span);
        assert_eq!(back.crop, c.crop);
        assert_eq!(back.pitch, c.pitch);
        assert_eq!(back.hfov_deg, Some(90.0));
    }
}
