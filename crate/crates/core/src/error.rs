use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("latitude {0} outside [-pi/2, pi/2]")]
    LatitudeOutOfRange(f64),

    #[error("pixel coordinate ({u}, {v}) outside the {width}x{height} grid")]
    PixelOutOfRange {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("pitch {pitch_deg:.3} deg too large for translate mode (vfov/2 = {half_vfov_deg:.3} deg)")]
    PitchTooLarge { pitch_deg: f64, half_vfov_deg: f64 },

    #[error("projection produced no informative pixels")]
    EmptyProjection,

    #[error("patch has an empty informative span")]
    EmptySpan,

    #[error("requested field of view is not covered by the patch: {0}")]
    FovNotCovered(String),

    #[error("degenerate boundary at column {column}: latitude {lat}")]
    DegenerateBoundary { column: usize, lat: f64 },

    #[error("non-positive depth {depth} at column {column}")]
    NonPositiveDepth { column: usize, depth: f64 },

    #[error("no column is valid in every input")]
    NoValidColumns,

    #[error("degenerate polygon (zero area)")]
    DegeneratePolygon,

    #[error("invalid room: {0}")]
    InvalidRoom(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::PitchTooLarge { .. } => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
