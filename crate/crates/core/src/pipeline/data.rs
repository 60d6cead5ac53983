//! Loading manifest records and turning them into network-ready samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{project_perspective_to_equirect, EquirectSpec, PinholeSpec, Pitch, ShiftMode, VerticalShift};
use crate::layout::{latitude_from_row, row_from_latitude, Annotation, ColumnBoundary};
use crate::losses::BoundaryTarget;
use crate::model::{image_tensor, Branch, ModelConfig, Tensor};
use crate::par::{self, Execution};
use crate::raster::RgbImage;

use super::manifest::{Manifest, SampleRecord, Split};

/// A record with its image and ground truth in memory.
///
/// Panorama boundaries follow the image columns. Perspective boundaries are
/// full-sphere arrays in the camera's own level-projected frame (before any
/// vertical shift); `image` is the pinhole image.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub domain: Branch,
    pub image: RgbImage,
    pub ceiling: Option<ColumnBoundary>,
    pub floor: Option<ColumnBoundary>,
    /// Radians, positive up.
    pub pitch: f64,
    pub hfov_deg: Option<f64>,
}

pub fn load_sample(manifest: &Manifest, record: &SampleRecord) -> Result<LoadedSample> {
    let image = RgbImage::load(manifest.resolve(&record.image))
        .map_err(|e| Error::Data(format!("{}: cannot load image: {e}", record.id)))?;
    let ann = Annotation::load(manifest.resolve(&record.annotation))
        .map_err(|e| Error::Data(format!("{}: cannot load annotation: {e}", record.id)))?;
    let (ceiling, floor) = ann.boundaries()?;
    if ceiling.is_none() && floor.is_none() {
        return Err(Error::Data(format!("{}: annotation has no boundary", record.id)));
    }
    if record.domain == Branch::Pano && (ceiling.is_none() || floor.is_none()) {
        return Err(Error::Data(format!("{}: panorama needs both boundaries", record.id)));
    }
    Ok(LoadedSample {
        id: record.id.clone(),
        domain: record.domain,
        image,
        ceiling,
        floor,
        pitch: record.pitch_deg.unwrap_or(0.0).to_radians(),
        hfov_deg: record.hfov_deg,
    })
}

/// Loads every record of `split`, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split, exec: Execution) -> Result<Vec<LoadedSample>> {
    let records = manifest.select(split, None);
    par::map(exec, &records, |r| load_sample(manifest, r))
        .into_iter()
        .collect()
}

/// Network input and target for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub domain: Branch,
    /// `[3, H, W_branch]`.
    pub input: Tensor,
    /// Targets on the `pano_feature_width` output columns.
    pub target: BoundaryTarget,
    /// Output columns that carry this sample's prediction.
    pub mask: Vec<bool>,
    /// Latitude shift applied to the input and target, radians.
    pub shift: f64,
    /// The equirectangular input image (perspective: canvas columns only).
    pub canvas: RgbImage,
}

fn resize_equirect(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let (sx, sy) = (img.width() as f64 / width as f64, img.height() as f64 / height as f64);
    RgbImage::from_fn(width, height, |x, y| {
        img.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, true)
    })
}

/// Column range of the perspective canvas on the panorama input grid.
pub fn canvas_columns(config: &ModelConfig) -> (usize, usize) {
    let w = config.pano_input[1];
    let lo = (w - config.pp_input_width) / 2;
    (lo, lo + config.pp_input_width)
}

/// Builds the network input and resampled target. With `vertical_shift` a
/// perspective view is moved in latitude by its pitch (image and target);
/// otherwise it stays in its level-projected frame.
pub fn prepare(sample: &LoadedSample, config: &ModelConfig, vertical_shift: bool) -> Result<PreparedSample> {
    let [h, w] = config.pano_input;
    let cols = config.pano_feature_width;
    match sample.domain {
        Branch::Pano => {
            let canvas = resize_equirect(&sample.image, w, h);
            let target = BoundaryTarget {
                ceiling: sample.ceiling.as_ref().map(|b| b.resample(cols, true)),
                floor: sample.floor.as_ref().map(|b| b.resample(cols, true)),
            };
            Ok(PreparedSample {
                id: sample.id.clone(),
                domain: Branch::Pano,
                input: image_tensor(&canvas),
                target,
                mask: vec![true; cols],
                shift: 0.0,
                canvas,
            })
        }
        Branch::Pp => {
            let hfov = sample
                .hfov_deg
                .ok_or_else(|| Error::Data(format!("{}: perspective sample without hfov", sample.id)))?;
            let pin = PinholeSpec::new(hfov, sample.image.width(), sample.image.height())?;
            let shift = if vertical_shift { sample.pitch } else { 0.0 };
            let spec = EquirectSpec { width: w, height: h };
            let patch = project_perspective_to_equirect(&sample.image, &pin, Pitch(shift), spec, ShiftMode::Translate)?;
            let (lo, hi) = canvas_columns(config);
            if patch.span.lo < lo || patch.span.hi > hi {
                return Err(Error::Config(format!(
                    "{}: {hfov} deg view spans columns [{}, {}) but the perspective canvas is [{lo}, {hi})",
                    sample.id, patch.span.lo, patch.span.hi
                )));
            }
            let canvas = patch.image.columns(lo, hi);
            let off = config.pp_offset();
            let mask: Vec<bool> = (0..cols)
                .map(|j| (off..off + config.pp_feature_width).contains(&j))
                .collect();
            let place = |b: &ColumnBoundary| {
                let mut r = b.vertical_shift_rows(shift).resample(cols, false);
                for (v, &m) in r.valid.iter_mut().zip(&mask) {
                    *v &= m;
                }
                r
            };
            let target = BoundaryTarget {
                ceiling: sample.ceiling.as_ref().map(place),
                floor: sample.floor.as_ref().map(place),
            };
            let any = target.ceiling.iter().chain(&target.floor).any(|b| b.valid_count() > 0);
            if !any {
                return Err(Error::Data(format!("{}: no visible boundary column", sample.id)));
            }
            Ok(PreparedSample {
                id: sample.id.clone(),
                domain: Branch::Pp,
                input: image_tensor(&canvas),
                target,
                mask,
                shift,
                canvas,
            })
        }
    }
}

/// Horizon row halfway between the lowest ceiling point and the highest floor
/// point, and the pitch whose vertical shift moves that row to `H/2`.
pub fn horizon_from_gt(
    ceiling: Option<&ColumnBoundary>,
    floor: Option<&ColumnBoundary>,
    height: usize,
) -> Result<(f64, f64)> {
    let (Some(c), Some(f)) = (ceiling, floor) else {
        return Err(Error::Data(
            "horizon estimation needs both ceiling and floor boundaries".into(),
        ));
    };
    let pick = |b: &ColumnBoundary, lowest: bool| -> Result<f64> {
        let lats = b.lat.iter().zip(&b.valid).filter(|(_, &v)| v).map(|(&l, _)| l);
        let lat = if lowest {
            lats.fold(f64::INFINITY, f64::min)
        } else {
            lats.fold(f64::NEG_INFINITY, f64::max)
        };
        if !lat.is_finite() {
            return Err(Error::NoValidColumns);
        }
        row_from_latitude(lat, height)
    };
    let row = 0.5 * (pick(c, true)? + pick(f, false)?);
    Ok((row, -latitude_from_row(row, height)?))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for one sample in one epoch, independent of processing order.
pub fn sample_rng(seed: u64, id: &str, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(id.as_bytes()).rotate_left(17));
    rng.set_stream(epoch);
    rng
}
