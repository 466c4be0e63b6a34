use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("metric is not positive definite at node {node} (smallest eigenvalue {min_eig:e})")]
    MetricNotSpd { node: usize, min_eig: f64 },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("tensor field is not trace-free at node {node} (trace {trace:e})")]
    NotTraceFree { node: usize, trace: f64 },

    #[error("inadmissible potential: {0}")]
    InadmissiblePotential(String),

    #[error("{0} is not a zero of the potential")]
    NotAZero(f64),

    #[error("eigensolver did not converge: {0}")]
    EigenNonConvergence(String),

    #[error("eigenvalue {value} is not simple (multiplicity {multiplicity})")]
    NonSimpleEigenvalue { value: f64, multiplicity: usize },

    #[error("spectrum too short: need eigenvalues above {needed}, largest computed is {largest}")]
    SpectrumTooShort { needed: f64, largest: f64 },

    #[error("factorization broke down at pivot {pivot}")]
    FactorizationBreakdown { pivot: usize },

    #[error("newton failed: {0}")]
    NewtonFailed(String),

    #[error("nullity is zero, no kernel direction to switch along")]
    NoKernel,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("boundary operator does not square to zero in degree {degree}")]
    BoundarySquareNonZero { degree: usize },

    #[error("degenerate solution {id} (nullity {nullity}) cannot be a generator")]
    DegenerateGenerator { id: usize, nullity: usize },

    #[error("chain complex is incomplete or heuristic: {0}")]
    UnreliableComplex(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
