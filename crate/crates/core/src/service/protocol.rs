//! Client wire protocol. Every frame is one JSON object tagged by `"op"`.
//! Requests carry a client-chosen `id` that the matching response echoes;
//! `message` and `exit` frames are server pushes and carry no id.

use serde::{Deserialize, Serialize};

use crate::backends::ModelDescriptor;
use crate::error::ErrorCode;
use crate::resources::InstanceId;
use crate::runtime::{InstanceInfo, InstanceStatus};

/// Binary payloads travel as standard base64 strings.
mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ClientFrame {
    UploadProgram {
        id: u64,
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    Launch {
        id: u64,
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Send {
        id: u64,
        instance: InstanceId,
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    /// Subscribes this connection to an instance's pushes.
    Stream { id: u64, instance: InstanceId },
    Terminate { id: u64, instance: InstanceId },
    QueryModels { id: u64 },
    QueryInstances { id: u64 },
}

impl ClientFrame {
    pub fn id(&self) -> u64 {
        match self {
            ClientFrame::UploadProgram { id, .. }
            | ClientFrame::Launch { id, .. }
            | ClientFrame::Send { id, .. }
            | ClientFrame::Stream { id, .. }
            | ClientFrame::Terminate { id, .. }
            | ClientFrame::QueryModels { id }
            | ClientFrame::QueryInstances { id } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ServerFrame {
    Uploaded {
        id: u64,
        program: String,
        /// The program was already stored.
        existed: bool,
    },
    Launched {
        id: u64,
        instance: InstanceId,
        program: String,
        cache_hit: bool,
        latency_us: u64,
    },
    Ack {
        id: u64,
    },
    Terminated {
        id: u64,
        instance: InstanceId,
        was_running: bool,
        status: InstanceStatus,
    },
    Models {
        id: u64,
        models: Vec<ModelDescriptor>,
    },
    Instances {
        id: u64,
        instances: Vec<InstanceInfo>,
    },
    Error {
        id: Option<u64>,
        code: i32,
        message: String,
    },
    Message {
        instance: InstanceId,
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    Exit {
        instance: InstanceId,
        status: InstanceStatus,
    },
}

impl ServerFrame {
    pub fn error(id: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        ServerFrame::Error { id, code: code as i32, message: message.into() }
    }

    /// Correlation id of a response; `None` for pushes.
    pub fn id(&self) -> Option<u64> {
        match self {
            ServerFrame::Uploaded { id, .. }
            | ServerFrame::Launched { id, .. }
            | ServerFrame::Ack { id }
            | ServerFrame::Terminated { id, .. }
            | ServerFrame::Models { id, .. }
            | ServerFrame::Instances { id, .. } => Some(*id),
            ServerFrame::Error { id, .. } => *id,
            ServerFrame::Message { .. } | ServerFrame::Exit { .. } => None,
        }
    }
}

/// A request body that could not be decoded, with whatever id it carried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub id: Option<u64>,
    pub message: String,
}

pub fn decode_client(body: &[u8]) -> Result<ClientFrame, DecodeError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| DecodeError { id: None, message: format!("malformed frame: {e}") })?;
    let id = value.get("id").and_then(|v| v.as_u64());
    serde_json::from_value(value).map_err(|e| DecodeError { id, message: format!("bad request: {e}") })
}
