use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LieError {
    #[error("rotation angle {angle} too close to pi for the principal log branch")]
    AngleNearPi { angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("knot interval must be positive (dt = {dt})")]
    NonPositiveDt { dt: f64 },
    #[error("query time {tau} outside knot interval [{start}, {end}]")]
    TauOutOfRange { tau: f64, start: f64, end: f64 },
    #[error("extrapolation time {tau} precedes knot time {knot}")]
    TauBeforeKnot { tau: f64, knot: f64 },
    #[error(transparent)]
    Lie(#[from] LieError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    #[error("frame contains no points")]
    EmptyFrame,
    #[error("local map is empty")]
    EmptyMap,
    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(&'static str),
    #[error("grid size must be positive, got {0}")]
    InvalidGrid(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("point lies at the sensor origin")]
    ZeroRangePoint,
    #[error("point carries no doppler measurement")]
    MissingDoppler,
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("factor at t = {time} lies outside the window [{start}, {end}]")]
    FactorOutsideWindow { time: f64, start: f64, end: f64 },
    #[error("hessian stayed indefinite after damping")]
    IndefiniteHessian,
    #[error("solver diverged (step norm {step_norm})")]
    DivergenceDetected { step_norm: f64 },
    #[error("window has too few knots ({0})")]
    WindowTooSmall(usize),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

impl From<LieError> for SolverError {
    fn from(e: LieError) -> Self {
        SolverError::Gp(GpError::Lie(e))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed record in {path}: {reason}")]
    MalformedRecord { path: String, reason: String },
    #[error("point timestamp {t} outside frame [{start}, {end}] in {path}")]
    TimestampOutOfRange {
        path: String,
        t: f64,
        start: f64,
        end: f64,
    },
    #[error("frame {0} missing from manifest")]
    MissingFrame(usize),
    #[error("parse error at {path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("sequence too short for evaluation: {0}")]
    SequenceTooShort(String),
    #[error("no ground-truth pose within tolerance of estimate at t = {0}")]
    Unpaired(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("trajectory does not cover [{start}, {end}]")]
    NoTrajectoryCoverage { start: f64, end: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("reader error: {0}")]
    Reader(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reader yielded no frames")]
    NoFrames,
}
