//! Messages crossing the control/inference boundary.
//!
//! A batch is a call-kind tag plus an array of calls whose resource
//! arguments are physical slot indices into the backend's arenas. The same
//! types are framed as JSON when the backend runs as a child process.

use serde::{Deserialize, Serialize};

use super::{Distribution, ModelDescriptor, ModelSpec};
use crate::error::ApiError;

/// Index into a physical KV-page or embed arena.
pub type PhysId = u32;

/// Batchable call categories. Declaration order is the tie-break order used
/// when two kinds have waited equally long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Forward,
    EmbedText,
    Sample,
    Alloc,
    Dealloc,
    Mask,
    Copy,
    Tokenize,
}

impl CallKind {
    pub const ALL: [CallKind; 8] = [
        CallKind::Forward,
        CallKind::EmbedText,
        CallKind::Sample,
        CallKind::Alloc,
        CallKind::Dealloc,
        CallKind::Mask,
        CallKind::Copy,
        CallKind::Tokenize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CallKind::Forward => "forward",
            CallKind::EmbedText => "embed_text",
            CallKind::Sample => "sample",
            CallKind::Alloc => "alloc",
            CallKind::Dealloc => "dealloc",
            CallKind::Mask => "mask",
            CallKind::Copy => "copy",
            CallKind::Tokenize => "tokenize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum Call {
    AllocKv { pages: Vec<PhysId> },
    AllocEmb { embeds: Vec<PhysId> },
    DeallocKv { pages: Vec<PhysId> },
    DeallocEmb { embeds: Vec<PhysId> },
    EmbedText { tokens: Vec<u32>, positions: Vec<u32>, embeds: Vec<PhysId> },
    Forward {
        ikv: Vec<PhysId>,
        iemb: Vec<PhysId>,
        okv: Vec<PhysId>,
        oemb: Vec<PhysId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<Vec<Vec<bool>>>,
    },
    NextDist { embed: PhysId, k: usize },
    Mask { page: PhysId, mask: Vec<bool> },
    Copy { src: PhysId, src_start: usize, dst: PhysId, dst_start: usize, len: usize },
    Tokenize { text: Vec<u8> },
    Detokenize { ids: Vec<u32> },
    Vocab,
}

impl Call {
    pub fn kind(&self) -> CallKind {
        match self {
            Call::AllocKv { .. } | Call::AllocEmb { .. } => CallKind::Alloc,
            Call::DeallocKv { .. } | Call::DeallocEmb { .. } => CallKind::Dealloc,
            Call::EmbedText { .. } => CallKind::EmbedText,
            Call::Forward { .. } => CallKind::Forward,
            Call::NextDist { .. } => CallKind::Sample,
            Call::Mask { .. } => CallKind::Mask,
            Call::Copy { .. } => CallKind::Copy,
            Call::Tokenize { .. } | Call::Detokenize { .. } | Call::Vocab => CallKind::Tokenize,
        }
    }

    /// Work units for batch sizing and the service-time model: input tokens
    /// for forward and embed calls, one otherwise.
    pub fn units(&self) -> usize {
        match self {
            Call::Forward { iemb, .. } => iemb.len().max(1),
            Call::EmbedText { tokens, .. } => tokens.len().max(1),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    /// Index of the model in the backend's model list.
    pub model: usize,
    pub kind: CallKind,
    pub calls: Vec<Call>,
    /// Vertical-fusion group of each call; consecutive equal ids came from
    /// the same command queue.
    pub groups: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "out", content = "value", rename_all = "snake_case")]
pub enum CallOutput {
    Unit,
    Tokens(Vec<u32>),
    Bytes(Vec<u8>),
    Vocab(Vec<Vec<u8>>),
    Dist(Distribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub results: Vec<Result<CallOutput, ApiError>>,
}

/// Arena sizes and models a backend is started with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInit {
    pub models: Vec<ModelSpec>,
    pub kv_pages: usize,
    pub embeds: usize,
    pub page_capacity: usize,
    pub max_batch_tokens: usize,
}

/// Control-to-backend message when the backend runs out of process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "snake_case")]
pub enum ToBackend {
    Init(BackendInit),
    Batch(BackendRequest),
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "snake_case")]
pub enum FromBackend {
    Ready { models: Vec<ModelDescriptor> },
    Done(BackendResponse),
    Failed { reason: String },
}
