//! Synthetic rooms: analytic geometry, shaded panoramas and perspective views
//! cut out of them, with exact ground truth.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    informative_span, reproject_equirect_to_perspective, EquirectPatch, EquirectSpec, LonLat, PinholeSpec, Pitch,
    ShiftMode,
};
use crate::layout::{room_to_boundaries, Annotation, BoundaryKind, ColumnBoundary, RoomModel};
use crate::model::Branch;
use crate::par::{self, Execution};
use crate::raster::RgbImage;

use super::manifest::{Manifest, SampleRecord, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomFamily {
    Rectangle,
    LShape,
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub rooms: usize,
    /// Families drawn uniformly per room.
    pub families: Vec<RoomFamily>,
    /// Range of room extents (side lengths or diameters), meters.
    pub size_range: [f64; 2],
    pub cam_height: [f64; 2],
    pub ceil_height: [f64; 2],
    /// Vertex count range of regular polygon rooms.
    pub polygon_sides: [usize; 2],
    pub pp_views_per_room: usize,
    pub hfov_deg: [f64; 2],
    pub pitch_deg: [f64; 2],
    /// Panorama width in pixels; height is half of it.
    pub pano_width: usize,
    /// Side of the square perspective images, pixels.
    pub pp_image_size: usize,
    /// Subsamples per pixel side when shading.
    pub supersample: usize,
    /// The last rooms are assigned to the test split, the ones before to val.
    pub val_rooms: usize,
    pub test_rooms: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rooms: 8,
            families: vec![RoomFamily::Rectangle, RoomFamily::LShape, RoomFamily::Polygon],
            size_range: [3.0, 7.0],
            cam_height: [1.4, 1.8],
            ceil_height: [2.6, 3.4],
            polygon_sides: [5, 8],
            pp_views_per_room: 1,
            hfov_deg: [90.0, 90.0],
            pitch_deg: [-20.0, 20.0],
            pano_width: 128,
            pp_image_size: 64,
            supersample: 2,
            val_rooms: 0,
            test_rooms: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.families.is_empty() {
            return bad("no room families");
        }
        for (name, r) in [
            ("size_range", self.size_range),
            ("cam_height", self.cam_height),
            ("ceil_height", self.ceil_height),
            ("hfov_deg", self.hfov_deg),
            ("pitch_deg", self.pitch_deg),
        ] {
            if !ordered(r) {
                return bad(&format!("{name} must be an ordered finite range"));
            }
        }
        if self.size_range[0] <= 0.0 || self.cam_height[0] <= 0.0 {
            return bad("sizes and camera heights must be positive");
        }
        if self.cam_height[1] >= self.ceil_height[0] {
            return bad("camera must stay below the ceiling");
        }
        if self.polygon_sides[0] < 3 || self.polygon_sides[0] > self.polygon_sides[1] {
            return bad("polygon_sides must be an ordered range starting at 3 or more");
        }
        if self.pano_width < 8 || !self.pano_width.is_multiple_of(2) || self.pp_image_size == 0 || self.supersample == 0
        {
            return bad("image sizes must be positive and the panorama width even");
        }
        if self.val_rooms + self.test_rooms > self.rooms {
            return bad("more held-out rooms than rooms");
        }
        if self.pp_views_per_room > 0 {
            for hfov in self.hfov_deg {
                let pin = PinholeSpec::new(hfov, self.pp_image_size, self.pp_image_size)?;
                for pitch in self.pitch_deg {
                    Pitch::from_degrees(pitch).check_translate(&pin)?;
                }
            }
        }
        Ok(())
    }
}

/// Surface colors of one room.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub walls: Vec<[f32; 3]>,
    pub floor: [f32; 3],
    pub ceiling: [f32; 3],
}

impl Style {
    pub fn random(rng: &mut impl Rng, walls: usize) -> Self {
        let mut color = |lo: f32, hi: f32| [0; 3].map(|_: i32| rng.random_range(lo..hi));
        let walls = (0..walls).map(|_| color(0.35, 0.75)).collect();
        Self {
            walls,
            floor: color(0.15, 0.35),
            ceiling: color(0.85, 0.97),
        }
    }
}

fn scale(c: [f32; 3], s: f64) -> [f32; 3] {
    c.map(|v| (v as f64 * s).clamp(0.0, 1.0) as f32)
}

/// Color seen along a level-frame direction.
pub fn shade(room: &RoomModel, style: &Style, ll: LonLat) -> [f32; 3] {
    let Some(hit) = room.ray_hit(ll.lon) else {
        return [0.0; 3];
    };
    let d = hit.distance;
    let up = room.ceil_height - room.cam_height;
    let ceil_lat = (up / d).atan();
    let floor_lat = -(room.cam_height / d).atan();
    if ll.lat > ceil_lat {
        let r = up / ll.lat.tan();
        scale(style.ceiling, 1.0 - 0.04 * r.min(5.0))
    } else if ll.lat < floor_lat {
        let r = room.cam_height / (-ll.lat).tan();
        let (x, z) = (r * ll.lon.sin(), r * ll.lon.cos());
        let checker = ((x / 0.6).floor() + (z / 0.6).floor()) as i64 % 2 == 0;
        scale(style.floor, if checker { 1.0 } else { 0.8 })
    } else {
        let y = room.cam_height + d * ll.lat.tan();
        let stripe = if (hit.along / 0.4).floor() as i64 % 2 == 0 {
            1.0
        } else {
            0.92
        };
        let band = 0.9 + 0.1 * (y / room.ceil_height);
        scale(style.walls[hit.edge % style.walls.len()], stripe * band)
    }
}

/// Shaded equirectangular panorama of a room, `width x width/2` pixels.
pub fn render_panorama(room: &RoomModel, style: &Style, width: usize, supersample: usize, exec: Execution) -> RgbImage {
    let spec = EquirectSpec {
        width,
        height: width / 2,
    };
    let ss = supersample.max(1);
    let rows = par::map_range(exec, spec.height, |y| {
        let mut row = Vec::with_capacity(width * 3);
        for x in 0..width {
            let mut acc = [0.0f64; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    let ll = LonLat {
                        lon: (u / spec.width as f64 - 0.5) * TAU,
                        lat: (0.5 - v / spec.height as f64) * std::f64::consts::PI,
                    };
                    let c = shade(room, style, ll);
                    for k in 0..3 {
                        acc[k] += c[k] as f64;
                    }
                }
            }
            let n = (ss * ss) as f64;
            row.extend(acc.map(|a| (a / n) as f32));
        }
        row
    });
    RgbImage::from_raw(width, spec.height, rows.concat()).expect("row sizes match")
}

/// Ceiling and floor latitudes of a pitched perspective view, expressed in
/// the camera's own (unshifted) equirectangular frame over `columns`
/// full-sphere columns. A column is valid where the boundary is visible in
/// the pinhole image.
pub fn perspective_boundaries(
    room: &RoomModel,
    pinhole: &PinholeSpec,
    pitch: Pitch,
    columns: usize,
) -> Result<(ColumnBoundary, ColumnBoundary)> {
    room.validate()?;
    let up = room.ceil_height - room.cam_height;
    let spec = EquirectSpec {
        width: columns,
        height: columns / 2,
    };
    // g(lat) > 0 above the boundary, < 0 below, along one camera meridian
    let g = |lon: f64, lat: f64, kind: BoundaryKind| -> f64 {
        let world = LonLat::from_direction(pitch.camera_to_level(LonLat { lon, lat }.direction()));
        let d = room.ray_distance(world.lon).unwrap_or(f64::INFINITY);
        let b = match kind {
            BoundaryKind::Ceiling => (up / d).atan(),
            BoundaryKind::Floor => -(room.cam_height / d).atan(),
        };
        world.lat - b
    };
    let steps = 720;
    let lim = FRAC_PI_2 - 1e-6;
    let mut out = Vec::new();
    for kind in [BoundaryKind::Ceiling, BoundaryKind::Floor] {
        let mut lat = vec![0.0; columns];
        let mut valid = vec![false; columns];
        for i in 0..columns {
            let lon = spec.column_lon(i);
            if lon.abs() >= FRAC_PI_2 {
                continue;
            }
            // scan from the pole toward the horizon side of the boundary
            let (start, end) = match kind {
                BoundaryKind::Ceiling => (lim, -lim),
                BoundaryKind::Floor => (-lim, lim),
            };
            let at = |t: f64| start + (end - start) * t;
            let outer = |v: f64| match kind {
                BoundaryKind::Ceiling => v > 0.0,
                BoundaryKind::Floor => v < 0.0,
            };
            let mut prev = at(0.0);
            let mut found = None;
            for s in 1..=steps {
                let cur = at(s as f64 / steps as f64);
                if outer(g(lon, prev, kind)) && !outer(g(lon, cur, kind)) {
                    found = Some((prev, cur));
                    break;
                }
                prev = cur;
            }
            let Some((mut a, mut b)) = found else { continue };
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                if outer(g(lon, m, kind)) {
                    a = m;
                } else {
                    b = m;
                }
            }
            let l = 0.5 * (a + b);
            let visible = pinhole
                .pixel_from_ray(LonLat { lon, lat: l }.direction())
                .is_some_and(|(u, v)| pinhole.contains(u, v));
            let in_kind = match kind {
                BoundaryKind::Ceiling => l > 0.0,
                BoundaryKind::Floor => l < 0.0,
            };
            if visible && in_kind {
                lat[i] = l;
                valid[i] = true;
            }
        }
        out.push(ColumnBoundary::new(kind, lat, valid)?);
    }
    let floor = out.pop().expect("two boundaries");
    let ceil = out.pop().expect("two boundaries");
    Ok((ceil, floor))
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Draws a valid room of the given family, rotated by a random yaw.
pub fn random_room(rng: &mut impl Rng, spec: &SynthSpec, family: RoomFamily) -> RoomModel {
    loop {
        let cam = uniform(rng, spec.cam_height);
        let ceil = uniform(rng, spec.ceil_height).max(cam + 0.3);
        let mut poly: Vec<[f64; 2]> = match family {
            RoomFamily::Rectangle => {
                let (a, b) = (uniform(rng, spec.size_range), uniform(rng, spec.size_range));
                let (cx, cz) = (rng.random_range(-0.3..0.3) * a, rng.random_range(-0.3..0.3) * b);
                vec![[0.0, 0.0], [a, 0.0], [a, b], [0.0, b]]
                    .into_iter()
                    .map(|p| [p[0] - a / 2.0 - cx, p[1] - b / 2.0 - cz])
                    .collect()
            }
            RoomFamily::LShape => {
                let (a, b) = (uniform(rng, spec.size_range), uniform(rng, spec.size_range));
                let a2 = a * rng.random_range(0.4..0.7);
                let b2 = b * rng.random_range(0.4..0.7);
                // camera inside the overlap of both arms sees every wall
                let cx = a2 * rng.random_range(0.2..0.8);
                let cz = b2 * rng.random_range(0.2..0.8);
                vec![[0.0, 0.0], [a, 0.0], [a, b2], [a2, b2], [a2, b], [0.0, b]]
                    .into_iter()
                    .map(|p| [p[0] - cx, p[1] - cz])
                    .collect()
            }
            RoomFamily::Polygon => {
                let n = rng.random_range(spec.polygon_sides[0]..=spec.polygon_sides[1]);
                let r = uniform(rng, spec.size_range) / 2.0;
                let (cx, cz) = (rng.random_range(-0.3..0.3) * r, rng.random_range(-0.3..0.3) * r);
                (0..n)
                    .map(|k| {
                        let t = TAU * k as f64 / n as f64;
                        [r * t.cos() - cx, r * t.sin() - cz]
                    })
                    .collect()
            }
        };
        // counter-clockwise orientation in (x, z)
        let area: f64 = (0..poly.len())
            .map(|i| {
                let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
                p[0] * q[1] - p[1] * q[0]
            })
            .sum();
        if area < 0.0 {
            poly.reverse();
        }
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let room = RoomModel {
            floorplan: poly,
            cam_height: cam,
            ceil_height: ceil,
        }
        .rotated(yaw);
        if room.validate().is_ok() {
            return room;
        }
    }
}

/// Seeds a generator from a global seed and a stream index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct RoomOutput {
    records: Vec<SampleRecord>,
    files: Vec<(String, Vec<u8>)>,
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn json_bytes(a: &Annotation) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(a)?)
}

const MAX_VIEW_ATTEMPTS: usize = 64;

fn generate_room(spec: &SynthSpec, index: usize) -> Result<RoomOutput> {
    let mut rng = stream_rng(spec.seed, index as u64);
    let family = spec.families[rng.random_range(0..spec.families.len())];
    let room = random_room(&mut rng, spec, family);
    let style = Style::random(&mut rng, room.floorplan.len());
    let split = if index >= spec.rooms - spec.test_rooms {
        Split::Test
    } else if index >= spec.rooms - spec.test_rooms - spec.val_rooms {
        Split::Val
    } else {
        Split::Train
    };
    let id = format!("room{index:03}");
    let mut records = Vec::new();
    let mut files = Vec::new();

    let pano = render_panorama(&room, &style, spec.pano_width, spec.supersample, Execution::Sequential);
    let image = format!("pano/{id}.png");
    let annotation = format!("pano/{id}.json");
    files.push((image.clone(), png_bytes(&pano)?));
    files.push((
        annotation.clone(),
        json_bytes(&Annotation::Corners {
            columns: spec.pano_width,
            polygon: room.floorplan.clone(),
            cam_height: room.cam_height,
            ceil_height: room.ceil_height,
        })?,
    ));
    records.push(SampleRecord {
        id: id.clone(),
        domain: Branch::Pano,
        image: image.into(),
        annotation: annotation.into(),
        pitch_deg: None,
        hfov_deg: None,
        split,
    });

    for v in 0..spec.pp_views_per_room {
        // redraw views that show too little of either boundary
        let mut attempt = 0;
        let (hfov, pitch, view_room, pin, ceil, floor) = loop {
            let hfov = uniform(&mut rng, spec.hfov_deg);
            let pitch = Pitch::from_degrees(uniform(&mut rng, spec.pitch_deg));
            let view_yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let view_room = room.rotated(-view_yaw);
            let pin = PinholeSpec::new(hfov, spec.pp_image_size, spec.pp_image_size)?;
            let (ceil, floor) = perspective_boundaries(&view_room, &pin, pitch, spec.pano_width)?;
            let span = informative_span(&pin, EquirectSpec::new(spec.pano_width, spec.pano_width / 2)?).width();
            attempt += 1;
            if 2 * ceil.valid_count().max(floor.valid_count()) >= span || attempt == MAX_VIEW_ATTEMPTS {
                break (hfov, pitch, view_room, pin, ceil, floor);
            }
        };
        // render the source panorama fine enough for the pinhole resolution
        let hi_width = ((spec.pp_image_size as f64 * 360.0 / hfov).ceil() as usize * 2).next_multiple_of(2);
        let hi = render_panorama(&view_room, &style, hi_width, spec.supersample, Execution::Sequential);
        let patch = EquirectPatch::from_panorama(hi)?;
        let img = reproject_equirect_to_perspective(&patch, &pin, pitch, ShiftMode::Rotate)?;
        let pid = format!("{id}_pp{v}");
        let image = format!("pp/{pid}.png");
        let annotation = format!("pp/{pid}.json");
        files.push((image.clone(), png_bytes(&img)?));
        files.push((
            annotation.clone(),
            json_bytes(&Annotation::Boundaries {
                columns: spec.pano_width,
                ceiling: Some(ceil),
                floor: Some(floor),
            })?,
        ));
        records.push(SampleRecord {
            id: pid,
            domain: Branch::Pp,
            image: image.into(),
            annotation: annotation.into(),
            pitch_deg: Some(pitch.0.to_degrees()),
            hfov_deg: Some(hfov),
            split,
        });
    }
    Ok(RoomOutput { records, files })
}

/// Writes images, annotations and `manifest.json` under `out`.
pub fn generate_synthetic(spec: &SynthSpec, out: impl AsRef<Path>, exec: Execution) -> Result<Manifest> {
    spec.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out.join("pano"))?;
    std::fs::create_dir_all(out.join("pp"))?;
    let rooms: Vec<Result<RoomOutput>> = par::map_range(exec, spec.rooms, |i| generate_room(spec, i));
    let mut records = Vec::new();
    for room in rooms {
        let room = room?;
        for (rel, bytes) in &room.files {
            std::fs::write(out.join(rel), bytes)?;
        }
        records.extend(room.records);
    }
    let manifest = Manifest::new(records, out)?;
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

/// Analytic panorama ground truth of a room at `columns` columns.
pub fn pano_ground_truth(room: &RoomModel, columns: usize) -> Result<(ColumnBoundary, ColumnBoundary)> {
    room_to_boundaries(
        room,
        EquirectSpec {
            width: columns,
            height: columns / 2,
        },
        0.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::informative_span_for_hfov;

    fn square() -> RoomModel {
        RoomModel::new(vec![[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]], 1.6, 3.0).unwrap()
    }

    #[test]
    fn level_view_restricts_pano_truth() {
        let room = square().rotated(0.3);
        let pin = PinholeSpec::new(90.0, 64, 64).unwrap();
        let (c, f) = perspective_boundaries(&room, &pin, Pitch(0.0), 1024).unwrap();
        let (pc, pf) = pano_ground_truth(&room, 1024).unwrap();
        let span = informative_span_for_hfov(90.0, EquirectSpec::default());
        for i in 0..1024 {
            if span.contains(i) {
                assert!(c.valid[i] && f.valid[i], "column {i}");
                assert!((c.lat[i] - pc.lat[i]).abs() < 1e-9);
                assert!((f.lat[i] - pf.lat[i]).abs() < 1e-9);
            } else {
                assert!(!c.valid[i] && !f.valid[i]);
            }
        }
    }

    #[test]
    fn pitched_view_boundary_lies_on_the_wall_edge() {
        let room = RoomModel::new(vec![[-4.0, -4.0], [4.0, -4.0], [4.0, 4.0], [-4.0, 4.0]], 1.6, 3.0).unwrap();
        let pin = PinholeSpec::new(90.0, 64, 64).unwrap();
        let pitch = Pitch::from_degrees(10.0);
        let (c, f) = perspective_boundaries(&room, &pin, pitch, 256).unwrap();
        assert!(c.valid_count() > 0 && f.valid_count() > 0);
        for (b, want) in [(&c, room.ceil_height), (&f, 0.0)] {
            for i in (0..256).filter(|&i| b.valid[i]) {
                let lon = crate::layout::column_lon(i, 256);
                let d = pitch.camera_to_level(LonLat { lon, lat: b.lat[i] }.direction());
                let w = LonLat::from_direction(d);
                let dist = room.ray_distance(w.lon).unwrap();
                let y = room.cam_height + dist * w.lat.tan();
                assert!((y - want).abs() < 1e-6, "{y} vs {want}");
            }
        }
    }

    #[test]
    fn rooms_are_valid_for_every_family() {
        let spec = SynthSpec::default();
        let mut rng = stream_rng(5, 0);
        for fam in [RoomFamily::Rectangle, RoomFamily::LShape, RoomFamily::Polygon] {
            for _ in 0..20 {
                random_room(&mut rng, &spec, fam).validate().unwrap();
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::default();
        s.validate().unwrap();
        s.pitch_deg = [-50.0, 0.0];
        assert!(matches!(s.validate(), Err(Error::PitchTooLarge { .. })));
        let s = SynthSpec {
            cam_height: [1.0, 3.0],
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn shading_separates_regions() {
        let room = square();
        let style = Style {
            walls: vec![[0.5, 0.5, 0.5]],
            floor: [0.2, 0.2, 0.2],
            ceiling: [0.9, 0.9, 0.9],
        };
        let img = render_panorama(&room, &style, 64, 1, Execution::Sequential);
        let top = img.get(10, 0);
        let bottom = img.get(10, 31);
        assert!(top[0] > 0.7 && bottom[0] < 0.25);
    }
}
