use thiserror::Error;

/// Errors reported by mesh construction, assembly and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("hole {hole} is not aligned with the coarse grid along axis {axis}")]
    MisalignedHole { hole: usize, axis: usize },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("degenerate cell with side lengths {0:?}")]
    DegenerateCell(Vec<f64>),

    #[error("region contains inactive cell {0}")]
    InactiveCell(usize),

    #[error("meshes are not nested: {0}")]
    NotNested(String),

    #[error("patch has no free fine degrees of freedom")]
    EmptyPatch,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is numerically singular (first unresolved unknown {pivot})")]
    Singular { pivot: usize },

    #[error(
        "corrector problem of cell {cell} is singular (unknown {pivot}); \
         use a smaller coarse mesh size or a finer fine mesh"
    )]
    SingularCorrector { cell: usize, pivot: usize },

    #[error(
        "coarse Petrov-Galerkin system is singular (unknown {pivot}); \
         increase the oversampling order or refine the coarse mesh"
    )]
    SingularCoarseSystem { pivot: usize },

    #[error("the exact solution has no gradient")]
    MissingGradient,

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("corrector cache file: {0}")]
    CacheFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
