use kmn_core::{FaultKind, PartyIndex, ProtocolError};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::store::{KeyState, StoreError};
use crate::wire::RpcError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoteErrorKind {
    NotFound,
    InvalidState,
    BadRequest,
    Protocol,
    Storage,
}

/// An error as it crosses a node RPC boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{kind:?}: {message}")]
pub struct RemoteError {
    pub kind: RemoteErrorKind,
    pub message: String,
    pub fault: Option<FaultKind>,
    #[serde(default)]
    pub culprits: Vec<PartyIndex>,
}

impl RemoteError {
    pub fn new(kind: RemoteErrorKind, message: impl Into<String>) -> Self {
        RemoteError {
            kind,
            message: message.into(),
            fault: None,
            culprits: Vec::new(),
        }
    }
}

impl From<ProtocolError> for RemoteError {
    fn from(e: ProtocolError) -> Self {
        RemoteError {
            kind: RemoteErrorKind::Protocol,
            fault: e.report().map(|r| r.kind),
            culprits: e.culprits(),
            message: e.to_string(),
        }
    }
}

impl From<StoreError> for RemoteError {
    fn from(e: StoreError) -> Self {
        let kind = match e {
            StoreError::UnknownKey(_) | StoreError::UnknownPresignature(_) => RemoteErrorKind::NotFound,
            StoreError::Transition { .. } | StoreError::Duplicate(_) => RemoteErrorKind::InvalidState,
            StoreError::Io(_) | StoreError::Corrupt(_) => RemoteErrorKind::Storage,
        };
        RemoteError::new(kind, e.to_string())
    }
}

/// Failure of a key-management operation, as seen by a KMN client.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KmnError {
    #[error("key {0} not found")]
    NotFound(Uuid),
    #[error("key {0} is {1:?}")]
    InvalidState(Uuid, KeyState),
    #[error("caller does not own key {0}")]
    Unauthorized(Uuid),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("session aborted: {message} (culprits {culprits:?})")]
    Aborted {
        message: String,
        fault: Option<FaultKind>,
        culprits: Vec<PartyIndex>,
    },
    #[error("node {party}: {error}")]
    Node { party: PartyIndex, error: RemoteError },
    #[error("service error: {0}")]
    Service(String),
    #[error("rpc: {0}")]
    Rpc(#[from] RpcError),
}

impl KmnError {
    /// Culprits named by an aborted session, if any.
    pub fn culprits(&self) -> &[PartyIndex] {
        match self {
            KmnError::Aborted { culprits, .. } => culprits,
            KmnError::Node { error, .. } => &error.culprits,
            _ => &[],
        }
    }
}
