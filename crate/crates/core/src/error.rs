use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the toolkit. Each variant knows which module produced it
/// so the CLI can report `module: message` lines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the polytope (facet {facet} has distance {distance:e})")]
    PointOutside {
        point: Vec<f64>,
        facet: usize,
        distance: f64,
    },

    #[error("invalid polytope: {0}")]
    InvalidPolytope(String),

    #[error("grid too coarse: {0}")]
    TooCoarse(String),

    #[error("degenerate Hessian (det <= {floor:e}) at {} node(s), first {:?}", nodes.len(), &nodes[..nodes.len().min(8)])]
    DegenerateHessian { nodes: Vec<usize>, floor: f64 },

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("exponent schedule degenerate for n = {n}: no k with alpha_k < 1 - 1/n")]
    ScheduleDegenerate { n: usize },

    #[error("potential is not convex at {} node(s), first {:?}", nodes.len(), &nodes[..nodes.len().min(8)])]
    NotConvex { nodes: Vec<usize> },

    #[error("dual data unavailable: {0}")]
    DualUnavailable(String),

    #[error("dual box too small: argmax on the sample boundary at {count} interior dual node(s)")]
    DualBoxTooSmall { count: usize },

    #[error("L_A does not vanish on affine functions: |L_A(1)| = {:e}, defects {defects:?} exceed tolerance {tol:e}", defects[0])]
    RefusedAffineDefect { defects: Vec<f64>, tol: f64 },

    #[error("invalid configuration at `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::PointOutside { .. } | Error::InvalidPolytope(_) => "polytope",
            Error::TooCoarse(_) | Error::DegenerateHessian { .. } => "discretize",
            Error::OutOfRange(_) | Error::ScheduleDegenerate { .. } | Error::NotConvex { .. } => "potentials",
            Error::DualUnavailable(_) | Error::DualBoxTooSmall { .. } => "legendre",
            Error::RefusedAffineDefect { .. } => "functionals",
            Error::ConfigInvalid { .. } | Error::Io(_) | Error::Json(_) => "cli",
        }
    }

    /// Refusals caused by the input data rather than by a failure of the
    /// toolkit. The CLI maps these to exit status 2.
    pub fn is_refusal(&self) -> bool {
        matches!(self, Error::RefusedAffineDefect { .. } | Error::ConfigInvalid { .. })
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            message: message.into(),
        }
    }
}
