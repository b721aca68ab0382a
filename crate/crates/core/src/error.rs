use serde::{Deserialize, Serialize};

use crate::backends::Trait;

/// Errors surfaced to inferlets by the host API.
///
/// The same values travel over the backend boundary and the client wire
/// protocol, so the enum is serializable and cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum ApiError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid resource handle")]
    InvalidHandle,
    #[error("resource handle already freed")]
    DoubleFree,
    #[error("invalid command queue")]
    InvalidQueue,
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("resource pool exhausted")]
    PoolExhausted,
    #[error("target page is immutable")]
    ImmutableTarget,
    #[error("slot ranges do not match")]
    RangeMismatch,
    #[error("argument lengths do not match")]
    LengthMismatch,
    #[error("export name `{0}` is already taken")]
    NameTaken(String),
    #[error("export name `{0}` not found")]
    NameNotFound(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("embed is not filled")]
    UnfilledEmbed,
    #[error("output pages have too few free slots")]
    SlotOverflow,
    #[error("attention mask has the wrong shape")]
    MaskShapeMismatch,
    #[error("sequence positions out of order")]
    PositionOrder,
    #[error("model does not implement trait {0}")]
    MissingTrait(Trait),
    #[error("client disconnected")]
    ClientGone,
    #[error("request denied: {0}")]
    Denied(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("operation timed out")]
    Timeout,
    #[error("instance terminated: {0}")]
    Terminated(String),
    #[error("resource busy: {0}")]
    Busy(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

/// Stable numeric codes shared by the C ABI and the bytecode guest ABI.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Ok = 0,
    InvalidArgument = -1,
    InvalidHandle = -2,
    DoubleFree = -3,
    InvalidQueue = -4,
    UnknownModel = -5,
    PoolExhausted = -6,
    ImmutableTarget = -7,
    RangeMismatch = -8,
    LengthMismatch = -9,
    NameTaken = -10,
    NameNotFound = -11,
    UnknownTokenId = -12,
    UnfilledEmbed = -13,
    SlotOverflow = -14,
    MaskShapeMismatch = -15,
    PositionOrder = -16,
    MissingTrait = -17,
    ClientGone = -18,
    Denied = -19,
    Network = -20,
    Timeout = -21,
    Terminated = -22,
    Busy = -23,
    Backend = -24,
    BufferTooSmall = -25,
    UnknownProgram = -26,
    LoadFailure = -27,
    NotFound = -28,
    Internal = -99,
}

impl ApiError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ApiError::InvalidArgument(_) => ErrorCode::InvalidArgument,
            ApiError::InvalidHandle => ErrorCode::InvalidHandle,
            ApiError::DoubleFree => ErrorCode::DoubleFree,
            ApiError::InvalidQueue => ErrorCode::InvalidQueue,
            ApiError::UnknownModel(_) => ErrorCode::UnknownModel,
            ApiError::PoolExhausted => ErrorCode::PoolExhausted,
            ApiError::ImmutableTarget => ErrorCode::ImmutableTarget,
            ApiError::RangeMismatch => ErrorCode::RangeMismatch,
            ApiError::LengthMismatch => ErrorCode::LengthMismatch,
            ApiError::NameTaken(_) => ErrorCode::NameTaken,
            ApiError::NameNotFound(_) => ErrorCode::NameNotFound,
            ApiError::UnknownTokenId(_) => ErrorCode::UnknownTokenId,
            ApiError::UnfilledEmbed => ErrorCode::UnfilledEmbed,
            ApiError::SlotOverflow => ErrorCode::SlotOverflow,
            ApiError::MaskShapeMismatch => ErrorCode::MaskShapeMismatch,
            ApiError::PositionOrder => ErrorCode::PositionOrder,
            ApiError::MissingTrait(_) => ErrorCode::MissingTrait,
            ApiError::ClientGone => ErrorCode::ClientGone,
            ApiError::Denied(_) => ErrorCode::Denied,
            ApiError::Network(_) => ErrorCode::Network,
            ApiError::Timeout => ErrorCode::Timeout,
            ApiError::Terminated(_) => ErrorCode::Terminated,
            ApiError::Busy(_) => ErrorCode::Busy,
            ApiError::Backend(_) => ErrorCode::Backend,
        }
    }
}

/// Errors from the lifecycle manager (program loading and launching).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LaunchError {
    #[error("unknown program `{0}`")]
    UnknownProgram(String),
    #[error("failed to load program: {0}")]
    LoadFailure(String),
}

impl LaunchError {
    pub fn code(&self) -> ErrorCode {
        match self {
            LaunchError::UnknownProgram(_) => ErrorCode::UnknownProgram,
            LaunchError::LoadFailure(_) => ErrorCode::LoadFailure,
        }
    }
}

/// Why an inferlet stopped with an error.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InferletError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("{0}")]
    Message(String),
}

impl From<String> for InferletError {
    fn from(s: String) -> Self {
        InferletError::Message(s)
    }
}

impl From<&str> for InferletError {
    fn from(s: &str) -> Self {
        InferletError::Message(s.to_string())
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
