//! Evaluation: floor-plan and volume IoU for panoramas, per-boundary image
//! region IoU for perspective views.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VerticalShift;
use crate::layout::{
    boundaries_to_floorplan, ceiling_height_from_boundaries, floor_boundary_to_depth, BoundaryKind, ColumnBoundary,
};
use crate::losses::CAM_HEIGHT;
use crate::metrics::{image_region_iou, iou_3d, polygon_iou_2d, IoUReport};
use crate::model::{Branch, Model, Params};
use crate::par::{self, Execution};
use crate::raster::RgbImage;

use super::data::{canvas_columns, load_split, prepare, LoadedSample, PreparedSample};
use super::manifest::{Manifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Whether the model expects vertically shifted perspective inputs.
    pub vertical_shift: bool,
    pub cam_height: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            vertical_shift: true,
            cam_height: CAM_HEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub domain: Branch,
    pub report: IoUReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_pano: usize,
    pub n_pp: usize,
    /// Mean panorama 2D/3D IoU.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pano: Option<IoUReport>,
    /// Mean perspective ceiling/floor region IoU.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pp: Option<IoUReport>,
    pub samples: Vec<SampleEval>,
}

/// Predicted latitudes on the output columns, as boundaries valid on `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ceiling: ColumnBoundary,
    pub floor: ColumnBoundary,
}

impl Prediction {
    pub fn new(ceiling: Vec<f64>, floor: Vec<f64>, mask: &[bool]) -> Self {
        Self {
            ceiling: ColumnBoundary {
                kind: BoundaryKind::Ceiling,
                lat: ceiling,
                valid: mask.to_vec(),
            },
            floor: ColumnBoundary {
                kind: BoundaryKind::Floor,
                lat: floor,
                valid: mask.to_vec(),
            },
        }
    }
}

/// Floor polygon and room height from column boundaries.
fn room_shape(ceil: &ColumnBoundary, floor: &ColumnBoundary, cam_h: f64) -> Result<(Vec<[f64; 2]>, f64)> {
    let depth = floor_boundary_to_depth(floor, cam_h)?;
    let poly = boundaries_to_floorplan(&depth)?;
    let height = cam_h + ceiling_height_from_boundaries(ceil, &depth)?;
    Ok((poly, height))
}

/// Panorama scores: both layouts are column-sampled polygons at the same
/// resolution.
pub fn score_pano(
    pred: &Prediction,
    gt_ceil: &ColumnBoundary,
    gt_floor: &ColumnBoundary,
    cam_h: f64,
) -> Result<IoUReport> {
    let (pp, hp) = room_shape(&pred.ceiling, &pred.floor, cam_h)?;
    let (gp, hg) = room_shape(gt_ceil, gt_floor, cam_h)?;
    Ok(IoUReport {
        iou2d: Some(polygon_iou_2d(&pp, &gp)?),
        iou3d: Some(iou_3d(&pp, hp, &gp, hg)?),
        ceiling_iou: None,
        floor_iou: None,
    })
}

/// Perspective scores on an `height`-row grid; a boundary without visible
/// ground-truth columns is skipped.
pub fn score_pp(
    pred: &Prediction,
    gt_ceil: Option<&ColumnBoundary>,
    gt_floor: Option<&ColumnBoundary>,
    height: usize,
) -> Result<IoUReport> {
    let score = |kind, p: &ColumnBoundary, g: Option<&ColumnBoundary>| -> Result<Option<f64>> {
        match g {
            Some(g) if g.valid_count() > 0 => Ok(Some(image_region_iou(kind, p, g, height)?)),
            _ => Ok(None),
        }
    };
    Ok(IoUReport {
        iou2d: None,
        iou3d: None,
        ceiling_iou: score(BoundaryKind::Ceiling, &pred.ceiling, gt_ceil)?,
        floor_iou: score(BoundaryKind::Floor, &pred.floor, gt_floor)?,
    })
}

fn mean_report(reports: &[&IoUReport]) -> Option<IoUReport> {
    if reports.is_empty() {
        return None;
    }
    let mean = |f: fn(&IoUReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(IoUReport {
        iou2d: mean(|r| r.iou2d),
        iou3d: mean(|r| r.iou3d),
        ceiling_iou: mean(|r| r.ceiling_iou),
        floor_iou: mean(|r| r.floor_iou),
    })
}

pub fn aggregate(samples: Vec<SampleEval>) -> EvalReport {
    let pano: Vec<&IoUReport> = samples
        .iter()
        .filter(|s| s.domain == Branch::Pano)
        .map(|s| &s.report)
        .collect();
    let pp: Vec<&IoUReport> = samples
        .iter()
        .filter(|s| s.domain == Branch::Pp)
        .map(|s| &s.report)
        .collect();
    EvalReport {
        n_pano: pano.len(),
        n_pp: pp.len(),
        pano: mean_report(&pano),
        pp: mean_report(&pp),
        samples,
    }
}

/// Runs the model on one loaded sample and scores it. Perspective views are
/// always scored in shifted coordinates; a model trained without the shift
/// has its prediction moved by the pitch first.
pub fn evaluate_sample(
    model: &Model,
    params: &Params,
    sample: &LoadedSample,
    opts: &EvalOptions,
) -> Result<(SampleEval, PreparedSample, Prediction)> {
    let config = model.config();
    let input = prepare(sample, config, opts.vertical_shift)?;
    let (c, f) = model.predict(&input.input, sample.domain, params)?;
    let mut pred = Prediction::new(c, f, &input.mask);
    let report = match sample.domain {
        Branch::Pano => {
            let (Some(gc), Some(gf)) = (&input.target.ceiling, &input.target.floor) else {
                return Err(Error::Data(format!("{}: missing ground truth", sample.id)));
            };
            score_pano(&pred, gc, gf, opts.cam_height)?
        }
        Branch::Pp => {
            let reference = if opts.vertical_shift {
                input.clone()
            } else {
                pred = Prediction {
                    ceiling: pred.ceiling.vertical_shift_rows(sample.pitch),
                    floor: pred.floor.vertical_shift_rows(sample.pitch),
                };
                prepare(sample, config, true)?
            };
            score_pp(
                &pred,
                reference.target.ceiling.as_ref(),
                reference.target.floor.as_ref(),
                config.pano_input[0],
            )?
        }
    };
    Ok((
        SampleEval {
            id: sample.id.clone(),
            domain: sample.domain,
            report,
        },
        input,
        pred,
    ))
}

/// Evaluates every sample of a split; writes overlays into `overlay` if set.
pub fn evaluate(
    manifest: &Manifest,
    split: Split,
    model: &Model,
    params: &Params,
    opts: &EvalOptions,
    overlay: Option<&Path>,
    exec: Execution,
) -> Result<EvalReport> {
    let samples = load_split(manifest, split, exec)?;
    evaluate_samples(&samples, model, params, opts, overlay, exec)
}

pub fn evaluate_samples(
    samples: &[LoadedSample],
    model: &Model,
    params: &Params,
    opts: &EvalOptions,
    overlay: Option<&Path>,
    exec: Execution,
) -> Result<EvalReport> {
    if let Some(dir) = overlay {
        std::fs::create_dir_all(dir)?;
    }
    let results = par::map(exec, samples, |s| -> Result<SampleEval> {
        let (eval, input, pred) = evaluate_sample(model, params, s, opts)?;
        if let Some(dir) = overlay {
            draw_overlay(model, &input, &pred).save(dir.join(format!("{}.png", s.id)))?;
        }
        Ok(eval)
    });
    Ok(aggregate(results.into_iter().collect::<Result<_>>()?))
}

const GT_COLOR: [f32; 3] = [1.0, 0.0, 0.0];
const PRED_COLOR: [f32; 3] = [0.0, 1.0, 1.0];

/// Input image with ground truth (red) and prediction (cyan) drawn per column.
pub fn draw_overlay(model: &Model, input: &PreparedSample, pred: &Prediction) -> RgbImage {
    let config = model.config();
    let [h, w] = config.pano_input;
    let mut img = input.canvas.clone();
    let lo = match input.domain {
        Branch::Pano => 0,
        Branch::Pp => canvas_columns(config).0,
    };
    let mut draw = |b: &ColumnBoundary, color: [f32; 3]| {
        let dense = b.resample(w, input.domain == Branch::Pano);
        for x in 0..img.width() {
            let col = lo + x;
            if !dense.valid[col] {
                continue;
            }
            let row = ((0.5 - dense.lat[col] / std::f64::consts::PI) * h as f64).floor();
            if (0.0..h as f64).contains(&row) {
                img.set(x, row as usize, color);
            }
        }
    };
    for b in input.target.ceiling.iter().chain(&input.target.floor) {
        draw(b, GT_COLOR);
    }
    draw(&pred.ceiling, PRED_COLOR);
    draw(&pred.floor, PRED_COLOR);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boundaries(n: usize, r: f64) -> (ColumnBoundary, ColumnBoundary) {
        let depth: Vec<f64> = (0..n).map(|i| r + 0.3 * (i as f64 * 0.4).sin()).collect();
        let c = depth.iter().map(|d| (1.4 / d).atan()).collect();
        let f = depth.iter().map(|d| -(1.6 / d).atan()).collect();
        (
            ColumnBoundary::full(BoundaryKind::Ceiling, c).unwrap(),
            ColumnBoundary::full(BoundaryKind::Floor, f).unwrap(),
        )
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let (c, f) = boundaries(32, 3.0);
        let pred = Prediction::new(c.lat.clone(), f.lat.clone(), &[true; 32]);
        let r = score_pano(&pred, &c, &f, CAM_HEIGHT).unwrap();
        assert!((r.iou2d.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.iou3d.unwrap() - 1.0).abs() < 1e-12);
        let r = score_pp(&pred, Some(&c), Some(&f), 64).unwrap();
        assert_eq!((r.ceiling_iou, r.floor_iou), (Some(1.0), Some(1.0)));
        let r = score_pp(&pred, None, Some(&f), 64).unwrap();
        assert_eq!(r.ceiling_iou, None);
    }

    #[test]
    fn worse_prediction_scores_lower() {
        let (c, f) = boundaries(32, 3.0);
        let (c2, f2) = boundaries(32, 2.5);
        let pred = Prediction::new(c2.lat, f2.lat, &[true; 32]);
        let r = score_pano(&pred, &c, &f, CAM_HEIGHT).unwrap();
        assert!(r.iou2d.unwrap() < 0.9);
    }

    #[test]
    fn aggregation_means_per_domain() {
        let mk = |domain, a: f64| SampleEval {
            id: format!("{a}"),
            domain,
            report: match domain {
                Branch::Pano => IoUReport {
                    iou2d: Some(a),
                    iou3d: Some(a),
                    ..Default::default()
                },
                Branch::Pp => IoUReport {
                    floor_iou: Some(a),
                    ..Default::default()
                },
            },
        };
        let r = aggregate(vec![mk(Branch::Pano, 0.5), mk(Branch::Pano, 1.0), mk(Branch::Pp, 0.25)]);
        assert_eq!(r.pano.unwrap().iou2d, Some(0.75));
        assert_eq!(r.pp.unwrap().floor_iou, Some(0.25));
        assert_eq!(r.pp.unwrap().ceiling_iou, None);
        assert_eq!((r.n_pano, r.n_pp), (2, 1));
    }
}
