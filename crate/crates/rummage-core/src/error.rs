//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum SceneError {
    #[error("object placement failed after {tries} rejection-sampling tries (scene too dense?)")]
    PlacementFailed { tries: u32 },
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
}

#[derive(Error, Debug)]
pub enum DecisionError {
    #[error("grasp scores report q_occlude >= tau2 but carry no best occluder")]
    InconsistentScores,
    #[error("next-best-view planning needs at least one candidate pose")]
    NoCandidates,
}

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("non-finite {what} encountered at iteration {iteration}; training aborted")]
    NonFinite { what: String, iteration: u64 },
    #[error("checkpoint does not match the requested policy head ({expected} vs {found})")]
    HeadMismatch { expected: String, found: String },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("unknown method '{0}' (expected xpg, fixed_threshold, flat_policy, or no_nbv)")]
    UnknownMethod(String),
    #[error("method '{0}' requires a trained checkpoint but none was supplied")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("override '{0}' is not of the form key.path=value")]
    MalformedOverride(String),
    #[error("override path '{0}' does not exist in the configuration")]
    UnknownKey(String),
}

#[derive(Error, Debug)]
pub enum ReplayError {
    #[error("episode index {index} out of range ({len} records)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("replay diverged at step {step}: recorded {recorded} but re-simulation chose {resimulated}")]
    TraceMismatch { step: usize, recorded: String, resimulated: String },
    #[error("replay diverged: recorded success={recorded} motions={recorded_motions}, re-simulated success={resimulated} motions={resimulated_motions}")]
    OutcomeMismatch {
        recorded: bool,
        recorded_motions: u32,
        resimulated: bool,
        resimulated_motions: u32,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("record parse: {0}")]
    Parse(#[from] serde_json::Error),
}
