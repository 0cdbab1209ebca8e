use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("degenerate tetrahedron (volume {volume:e})")]
    DegenerateTetrahedron { volume: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insphere radius {radius:e} of tetrahedron {tet} below floor {floor:e} at t = {t}")]
    RegularityLost { tet: usize, t: f64, radius: f64, floor: f64 },

    #[error("deformation vanishes identically")]
    ZeroDeformation,

    #[error("fields do not partition the same domain: {0}")]
    DomainMismatch(String),

    #[error("deformation moves the outer boundary (|Phi.nu| = {normal_speed:e} on boundary facet of tetrahedron {tet})")]
    NonPreservingDeformation { tet: usize, normal_speed: f64 },

    #[error("mesh construction failed: {0}")]
    MeshFailure(String),

    #[error("singular or indefinite system: {0}")]
    SingularSystem(String),

    #[error("solver residual {residual:e} exceeds tolerance {tolerance:e}")]
    SolverResidual { residual: f64, tolerance: f64 },

    #[error("boundary pencil eigensolve failed: {0}")]
    EigFailure(String),

    #[error("operands live on different meshes")]
    MeshMismatch,

    #[error("frequency grid too coarse: spacing {spacing} > rho/8 = {limit}")]
    GridTooCoarse { spacing: f64, limit: f64 },

    #[error("ambiguous match for tetrahedron {tet}: candidates {candidates:?}")]
    AmbiguousMatch { tet: usize, candidates: Vec<usize> },

    #[error("inconsistent vertex correspondence at vertex {vertex}")]
    InconsistentCorrespondence { vertex: usize },

    #[error("line search stalled after {0} consecutive rejected steps")]
    Stalled(usize),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
