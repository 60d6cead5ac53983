//! Command line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use roomlayout::geometry::{
    crop_to_span, project_perspective_to_equirect, EquirectPatch, EquirectSpec, PinholeSpec, Pitch, ShiftMode,
    VerticalShift,
};
use roomlayout::layout::{Annotation, ColumnBoundary};
use roomlayout::losses::CAM_HEIGHT;
use roomlayout::metrics::IoUReport;
use roomlayout::model::checkpoint::Checkpoint;
use roomlayout::model::{count_flops, Branch, Model, ModelConfig};
use roomlayout::pipeline::eval::{score_pano, score_pp, Prediction};
use roomlayout::pipeline::{evaluate, generate_synthetic, train, EvalOptions, Manifest, Split, SynthSpec, TrainConfig};
use roomlayout::raster::RgbImage;
use roomlayout::{Error, Execution};

#[derive(Parser)]
#[command(
    name = "roomlayout",
    version,
    about = "Room layout estimation for panoramic and perspective images"
)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Translate,
    Rotate,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Pano,
    Pp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Tiny,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// Generator settings (JSON); defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the settings file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Project a perspective image onto the equirectangular grid.
    Project {
        #[arg(long)]
        img: PathBuf,
        /// Horizontal field of view in degrees.
        #[arg(long)]
        hfov: f64,
        /// Camera pitch in degrees, positive up.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long)]
        out: PathBuf,
        /// Panorama width in columns (height is half).
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long, value_enum, default_value_t = Mode::Translate)]
        mode: Mode,
        /// Keep only the informative columns.
        #[arg(long)]
        crop: bool,
    },
    /// Shift a saved patch in latitude.
    Shift {
        #[arg(long = "in")]
        input: PathBuf,
        /// Latitude offset, e.g. `-10deg`, `0.2rad` or `5` (degrees).
        #[arg(long, allow_hyphen_values = true)]
        delta_lat: String,
        /// Output directory; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training settings (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a manifest split, or score two boundary files.
    Eval {
        #[arg(long, conflicts_with_all = ["pred", "gt"], requires = "ckpt")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// The checkpoint was trained without the vertical shift.
        #[arg(long)]
        no_shift: bool,
        /// Predicted boundary annotation (JSON).
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Ground-truth boundary annotation (JSON).
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Metric family for file scoring.
        #[arg(long, value_enum, default_value_t = Domain::Pano)]
        domain: Domain,
        /// Image rows for perspective region IoU.
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = CAM_HEIGHT)]
        cam_height: f64,
        /// Equirectangular image to draw the file overlay on.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Directory (manifest mode) or PNG path (file mode) for overlays.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Count convolution FLOPs of both branches.
    Flops {
        /// Training settings or model config (JSON).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Reads a JSON settings file; any failure is a configuration error.
fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn parse_angle(text: &str) -> CliResult<f64> {
    let t = text.trim();
    let (num, radians) = if let Some(v) = t.strip_suffix("deg") {
        (v, false)
    } else if let Some(v) = t.strip_suffix("rad") {
        (v, true)
    } else {
        (t, false)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| config_error(format!("cannot parse angle {text:?}")))?;
    if !v.is_finite() {
        return Err(config_error(format!("angle {text:?} is not finite")));
    }
    Ok(if radians { v } else { v.to_radians() })
}

fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>, exec: Execution) -> CliResult {
    let mut spec: SynthSpec = match spec {
        Some(p) => read_config(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let manifest = generate_synthetic(&spec, out, exec)?;
    println!(
        "wrote {} samples to {}",
        manifest.records.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn project(img: &Path, hfov: f64, pitch: f64, out: &Path, width: usize, mode: Mode, crop: bool) -> CliResult {
    let image = RgbImage::load(img)?;
    let pin = PinholeSpec::new(hfov, image.width(), image.height())?;
    let spec = EquirectSpec::new(width, width / 2)?;
    let mode = match mode {
        Mode::Translate => ShiftMode::Translate,
        Mode::Rotate => ShiftMode::Rotate,
    };
    let mut patch = project_perspective_to_equirect(&image, &pin, Pitch::from_degrees(pitch), spec, mode)?;
    if crop {
        patch = crop_to_span(&patch)?;
    }
    patch.save(out)?;
    println!(
        "span [{}, {}) of {} columns, {} informative pixels",
        patch.span.lo + patch.column_offset(),
        patch.span.hi + patch.column_offset(),
        width,
        patch.mask_count()
    );
    Ok(())
}

fn shift(input: &Path, delta: &str, out: Option<&Path>) -> CliResult {
    let delta = parse_angle(delta)?;
    let patch = EquirectPatch::load(input)?;
    let shifted = patch.vertical_shift_rows(delta);
    shifted.save(out.unwrap_or(input))?;
    println!(
        "pitch {:.4} deg, {} informative pixels",
        shifted.pitch.to_degrees(),
        shifted.mask_count()
    );
    Ok(())
}

fn train_cmd(manifest: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>, exec: Execution) -> CliResult {
    let mut config: TrainConfig = match config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let manifest = Manifest::load(manifest)?;
    let outcome = train(&manifest, &config, Some(out), exec)?;
    match outcome.log.last() {
        Some(last) => println!("step {}: total loss {:.6}", last.step, last.l_total),
        None => println!("no optimizer step taken"),
    }
    println!("checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}

fn annotation_boundaries(path: &Path) -> CliResult<(Option<ColumnBoundary>, Option<ColumnBoundary>)> {
    let ann = Annotation::load(path)?;
    Ok(ann.boundaries()?)
}

struct FileEval<'a> {
    pred: &'a Path,
    gt: &'a Path,
    domain: Domain,
    height: usize,
    cam_height: f64,
    image: Option<&'a Path>,
    overlay: Option<&'a Path>,
}

fn eval_files(args: FileEval<'_>) -> CliResult<IoUReport> {
    let (pc, pf) = annotation_boundaries(args.pred)?;
    let (gc, gf) = annotation_boundaries(args.gt)?;
    let n = gc.as_ref().or(gf.as_ref()).map(ColumnBoundary::len).unwrap_or(0);
    let resize = |b: Option<ColumnBoundary>| b.map(|b| if b.len() == n { b } else { b.resample(n, true) });
    let (pc, pf) = (resize(pc), resize(pf));
    let missing = || Error::Data("prediction lacks a boundary present in the ground truth".into());
    let report = match args.domain {
        Domain::Pano => {
            let (Some(pc), Some(pf), Some(gc), Some(gf)) = (&pc, &pf, &gc, &gf) else {
                return Err(Error::Data("panorama scoring needs ceiling and floor in both files".into()).into());
            };
            let pred = Prediction {
                ceiling: pc.clone(),
                floor: pf.clone(),
            };
            score_pano(&pred, gc, gf, args.cam_height)?
        }
        Domain::Pp => {
            let template = gc.as_ref().or(gf.as_ref()).ok_or_else(missing)?;
            let fill = |b: Option<&ColumnBoundary>, g: Option<&ColumnBoundary>| -> CliResult<ColumnBoundary> {
                match (b, g) {
                    (Some(b), _) => Ok(b.clone()),
                    (None, None) => Ok(ColumnBoundary {
                        valid: vec![false; template.len()],
                        ..template.clone()
                    }),
                    (None, Some(_)) => Err(missing().into()),
                }
            };
            let pred = Prediction {
                ceiling: fill(pc.as_ref(), gc.as_ref())?,
                floor: fill(pf.as_ref(), gf.as_ref())?,
            };
            score_pp(&pred, gc.as_ref(), gf.as_ref(), args.height)?
        }
    };
    if let Some(path) = args.overlay {
        let base = match args.image {
            Some(p) => RgbImage::load(p)?,
            None => RgbImage::new(n.max(2), (n / 2).max(1)),
        };
        let mut img = base;
        for (b, color) in [
            (&gc, [1.0, 0.0, 0.0]),
            (&gf, [1.0, 0.0, 0.0]),
            (&pc, [0.0, 1.0, 1.0]),
            (&pf, [0.0, 1.0, 1.0]),
        ] {
            if let Some(b) = b {
                draw_boundary(&mut img, b, color);
            }
        }
        img.save(path)?;
    }
    Ok(report)
}

fn draw_boundary(img: &mut RgbImage, b: &ColumnBoundary, color: [f32; 3]) {
    let (w, h) = (img.width(), img.height());
    let dense = b.resample(w, true);
    for x in 0..w {
        if dense.valid[x] {
            let row = ((0.5 - dense.lat[x] / std::f64::consts::PI) * h as f64).floor();
            if (0.0..h as f64).contains(&row) {
                img.set(x, row as usize, color);
            }
        }
    }
}

fn eval_manifest(
    manifest: &Path,
    ckpt: &Path,
    split: SplitArg,
    no_shift: bool,
    cam_height: f64,
    overlay: Option<&Path>,
    exec: Execution,
) -> CliResult<roomlayout::pipeline::EvalReport> {
    let manifest = Manifest::load(manifest)?;
    let ck = Checkpoint::load(ckpt)?;
    let model = Model::new(ck.config.clone())?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let opts = EvalOptions {
        vertical_shift: !no_shift,
        cam_height,
    };
    Ok(evaluate(&manifest, split, &model, &ck.params, &opts, overlay, exec)?)
}

fn flops(config: Option<&Path>, preset: Option<Preset>) -> CliResult {
    let model = match (config, preset) {
        (Some(p), _) => {
            let value: serde_json::Value = read_config(p)?;
            // accept either a training config or a bare model config
            let inner = value.get("model").cloned().unwrap_or(value);
            serde_json::from_value::<ModelConfig>(inner).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        (None, Some(Preset::Tiny)) => ModelConfig::tiny(),
        (None, Some(Preset::Full)) => ModelConfig::full_scale(),
        (None, _) => ModelConfig::toy(),
    };
    model.validate()?;
    let pano = count_flops(&model, Branch::Pano);
    let pp = count_flops(&model, Branch::Pp);
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let out = serde_json::json!({
        "convention": "2 FLOPs per multiply-accumulate, convolutions only; activation bytes at 4 per element",
        "pano": pano,
        "pp": pp,
        "ratio": {
            "backbone": ratio(pp.backbone_flops, pano.backbone_flops),
            "conv1d": ratio(pp.conv1d_flops, pano.conv1d_flops),
        },
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed, exec),
        Command::Project {
            img,
            hfov,
            pitch,
            out,
            width,
            mode,
            crop,
        } => project(&img, hfov, pitch, &out, width, mode, crop),
        Command::Shift { input, delta_lat, out } => shift(&input, &delta_lat, out.as_deref()),
        Command::Train {
            manifest,
            config,
            out,
            seed,
        } => train_cmd(&manifest, config.as_deref(), &out, seed, exec),
        Command::Eval {
            manifest,
            ckpt,
            split,
            no_shift,
            pred,
            gt,
            domain,
            height,
            cam_height,
            image,
            report,
            overlay,
        } => {
            if let (Some(pred), Some(gt)) = (&pred, &gt) {
                let r = eval_files(FileEval {
                    pred,
                    gt,
                    domain,
                    height,
                    cam_height,
                    image: image.as_deref(),
                    overlay: overlay.as_deref(),
                })?;
                write_json(&report, &r)?;
                println!("{}", serde_json::to_string(&r).map_err(Error::from)?);
                Ok(())
            } else if let (Some(manifest), Some(ckpt)) = (&manifest, &ckpt) {
                let r = eval_manifest(manifest, ckpt, split, no_shift, cam_height, overlay.as_deref(), exec)?;
                write_json(&report, &r)?;
                println!(
                    "{} panoramas, {} perspective views; pano {} pp {}",
                    r.n_pano,
                    r.n_pp,
                    serde_json::to_string(&r.pano).map_err(Error::from)?,
                    serde_json::to_string(&r.pp).map_err(Error::from)?
                );
                Ok(())
            } else {
                Err(config_error("eval needs --manifest with --ckpt, or --pred with --gt"))
            }
        }
        Command::Flops { config, preset } => flops(config.as_deref(), preset),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
