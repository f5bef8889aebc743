//! The KMN node daemon: runs protocol sessions on request of the
//! coordinator and keeps its own shares in a [`NodeStore`].

use std::sync::Arc;

use kmn_core::ec::{Digest, EcdsaSignature, GroupPoint};
use kmn_core::protocol::keyops::{apply_increment, record_from_share};
use kmn_core::protocol::session;
use kmn_core::protocol::PartyContext;
use kmn_core::sharing::{FeldmanCommitment, ShamirShare};
use kmn_core::transport::RoomId;
use kmn_core::PartyIndex;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{RemoteError, RemoteErrorKind};
use crate::store::{KeyState, NodeStore, StoreCounts};
use crate::wire::{Caller, Handler};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeRequest {
    Keygen {
        room: RoomId,
        key_uuid: Uuid,
        parties: Vec<PartyIndex>,
        threshold: u16,
        background: bool,
    },
    Presign {
        room: RoomId,
        key_uuid: Uuid,
        signers: Vec<PartyIndex>,
        background: bool,
    },
    Sign {
        room: RoomId,
        key_uuid: Uuid,
        presig_id: RoomId,
        digest: [u8; 32],
    },
    SignInteractive {
        room: RoomId,
        key_uuid: Uuid,
        signers: Vec<PartyIndex>,
        digest: [u8; 32],
    },
    Allocate {
        key_uuid: Uuid,
    },
    /// Hands the share to the coordinator and retires the key.
    ExportShare {
        key_uuid: Uuid,
    },
    StoreShare {
        share: ShamirShare,
        parties: Vec<PartyIndex>,
        commitment: FeldmanCommitment,
    },
    /// Adds an increment share to `base`, stores the sum under the
    /// increment's uuid and retires `base`.
    AddShare {
        base: Uuid,
        share: ShamirShare,
        commitment: FeldmanCommitment,
    },
    Status,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum NodeResponse {
    Key { key_uuid: Uuid, public_key: GroupPoint },
    Presigned { presig_id: RoomId, big_r: GroupPoint },
    Signed { signature: String },
    Share { share: ShamirShare, commitment: FeldmanCommitment },
    Done,
    Status { counts: StoreCounts },
    Failed { error: RemoteError },
}

impl NodeResponse {
    pub fn signature(&self) -> Option<EcdsaSignature> {
        match self {
            NodeResponse::Signed { signature } => hex::decode(signature)
                .ok()
                .and_then(|b| EcdsaSignature::from_bytes(&b).ok()),
            _ => None,
        }
    }
}

/// Runs `f` on a fresh thread with a raised nice value so that pool
/// replenishment yields the CPU to foreground sessions.
fn at_background_priority<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    std::thread::scope(|s| {
        s.spawn(|| {
            // SAFETY: setpriority has no memory-safety preconditions; on Linux
            // PRIO_PROCESS with who = 0 targets the calling thread.
            unsafe {
                libc::setpriority(libc::PRIO_PROCESS as _, 0, 10);
            }
            f()
        })
        .join()
        .expect("background session panicked")
    })
}

pub struct KmnNode {
    ctx: PartyContext,
    store: Arc<NodeStore>,
}

impl KmnNode {
    pub fn new(ctx: PartyContext, store: Arc<NodeStore>) -> Self {
        KmnNode { ctx, store }
    }

    pub fn index(&self) -> PartyIndex {
        self.ctx.index()
    }

    pub fn store(&self) -> &Arc<NodeStore> {
        &self.store
    }

    pub fn context(&self) -> &PartyContext {
        &self.ctx
    }

    pub fn execute(&self, request: NodeRequest) -> NodeResponse {
        let background = matches!(
            request,
            NodeRequest::Keygen { background: true, .. } | NodeRequest::Presign { background: true, .. }
        );
        let result = if background {
            at_background_priority(|| self.dispatch(request))
        } else {
            self.dispatch(request)
        };
        result.unwrap_or_else(|error| NodeResponse::Failed { error })
    }

    fn dispatch(&self, request: NodeRequest) -> Result<NodeResponse, RemoteError> {
        let ctx = &self.ctx;
        match request {
            NodeRequest::Keygen {
                room,
                key_uuid,
                parties,
                threshold,
                ..
            } => {
                let record = session::keygen(ctx, room, &parties, threshold, key_uuid).result?;
                let public_key = record.public_key;
                self.store.insert_key(record, KeyState::Available)?;
                Ok(NodeResponse::Key { key_uuid, public_key })
            }
            NodeRequest::Presign {
                room,
                key_uuid,
                signers,
                ..
            } => {
                let key = self.store.live_key(key_uuid)?;
                let presig = session::presign(ctx, room, &key, &signers).result?;
                let (presig_id, big_r) = (presig.presig_id(), presig.public.big_r);
                self.store.insert_presig(presig)?;
                Ok(NodeResponse::Presigned { presig_id, big_r })
            }
            NodeRequest::Sign {
                room,
                key_uuid,
                presig_id,
                digest,
            } => {
                let key = self.store.live_key(key_uuid)?;
                match self.store.presig(presig_id) {
                    Some(p) if p.key_uuid == key_uuid => {}
                    _ => {
                        return Err(RemoteError::new(
                            RemoteErrorKind::NotFound,
                            format!("presignature {presig_id} for {key_uuid}"),
                        ))
                    }
                }
                let mut presig = self.store.take_presig(presig_id)?;
                let sig = session::sign(ctx, room, &mut presig, &key.public_key, &Digest(digest)).result?;
                Ok(NodeResponse::Signed {
                    signature: hex::encode(sig.to_bytes()),
                })
            }
            NodeRequest::SignInteractive {
                room,
                key_uuid,
                signers,
                digest,
            } => {
                let key = self.store.live_key(key_uuid)?;
                let sig = session::sign_interactive(ctx, room, &key, &signers, &Digest(digest)).result?;
                Ok(NodeResponse::Signed {
                    signature: hex::encode(sig.to_bytes()),
                })
            }
            NodeRequest::Allocate { key_uuid } => {
                self.store.transition(key_uuid, KeyState::Allocated)?;
                Ok(NodeResponse::Done)
            }
            NodeRequest::ExportShare { key_uuid } => {
                let record = self.store.retire(key_uuid)?;
                Ok(NodeResponse::Share {
                    share: record.shamir_share(),
                    commitment: record.commitment.clone(),
                })
            }
            NodeRequest::StoreShare {
                share,
                parties,
                commitment,
            } => {
                if share.party_index != self.index() {
                    return Err(RemoteError::new(RemoteErrorKind::BadRequest, "share for another party"));
                }
                let record = record_from_share(&share, &parties, &commitment)?;
                self.store.insert_key(record, KeyState::Allocated)?;
                Ok(NodeResponse::Done)
            }
            NodeRequest::AddShare {
                base,
                share,
                commitment,
            } => {
                let entry = self.store.key(base).ok_or_else(|| {
                    RemoteError::new(RemoteErrorKind::NotFound, format!("key {base}"))
                })?;
                if entry.state != KeyState::Allocated {
                    return Err(RemoteError::new(
                        RemoteErrorKind::InvalidState,
                        format!("key {base} is {:?}", entry.state),
                    ));
                }
                let old = self.store.live_key(base)?;
                let combined = apply_increment(&old, &share, &commitment)?;
                let public_key = combined.public_key;
                let key_uuid = combined.key_uuid;
                self.store.insert_key(combined, KeyState::Allocated)?;
                self.store.retire(base)?;
                Ok(NodeResponse::Key { key_uuid, public_key })
            }
            NodeRequest::Status => Ok(NodeResponse::Status {
                counts: self.store.counts(),
            }),
        }
    }
}

impl Handler for KmnNode {
    fn handle(&self, _caller: Caller, request: &[u8]) -> Vec<u8> {
        let response = match serde_json::from_slice::<NodeRequest>(request) {
            Ok(req) => self.execute(req),
            Err(e) => NodeResponse::Failed {
                error: RemoteError::new(RemoteErrorKind::BadRequest, e.to_string()),
            },
        };
        serde_json::to_vec(&response).expect("node responses serialize")
    }
}
