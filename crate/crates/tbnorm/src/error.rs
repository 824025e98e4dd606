use thiserror::Error;

/// Errors produced by tensor operations, normalization layers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("split factor {r} does not divide batch count {batch}")]
    BatchNotDivisible { batch: usize, r: usize },

    #[error("split factor {r} does not divide channel count {channels}")]
    ChannelsNotDivisible { channels: usize, r: usize },

    #[error("group count {groups} does not divide channel count {channels}")]
    GroupsNotDivisible { groups: usize, channels: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("reduction over an empty domain (batch x spatial = 0)")]
    EmptyReduction,

    #[error("variance needs at least two elements per channel, got {count}")]
    DegenerateReduction { count: usize },

    #[error("adaptive split undefined: task {task} >= 2 with no exemplar rows")]
    MissingExemplarRows { task: usize },

    #[error("adaptive split {b_c}*({task}-1)/{b_p} is not an integer")]
    NonIntegralSplit { b_c: usize, b_p: usize, task: usize },

    #[error("mean-bias expectation needs at least two tasks, got {tasks}")]
    TooFewTasks { tasks: usize },

    #[error("task means must share one channel width, got {first} and {other}")]
    RaggedTaskMeans { first: usize, other: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("empty sample source: {what}")]
    EmptySource { what: String },

    #[error("prediction names unseen class {class} (only {seen} classes seen)")]
    UnseenClass { class: usize, seen: usize },

    #[error("invalid accuracy matrix: {reason}")]
    InvalidMatrix { reason: String },

    #[error("idx parse error: {reason}")]
    Idx { reason: String },

    #[error("checkpoint error: {reason}")]
    Checkpoint { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
