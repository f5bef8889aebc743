//! Services around the threshold signer: the KMN node and coordinator, the
//! note verifier and the payment processor, plus the wiring to run them in
//! one process or over TCP.

pub mod api;
pub mod coordinator;
pub mod deploy;
pub mod error;
pub mod fsp;
pub mod keys;
pub mod log;
pub mod node;
pub mod pp;
pub mod store;
pub mod verifier;
pub mod wire;

pub use api::{KmnReply, KmnRequest, SignPath};
pub use coordinator::{Coordinator, CoordinatorConfig, CoordinatorStats, PoolConfig};
pub use deploy::{Backend, KmnDeployment, KmnOptions};
pub use fsp::{FspNetwork, FspOptions, SignerKind};
pub use error::{KmnError, RemoteError, RemoteErrorKind};
pub use keys::{KeyService, KmnClient, SingleSigner};
pub use node::{KmnNode, NodeRequest, NodeResponse};
pub use store::{KeyState, NodeStore};
pub use wire::{Caller, Channel, Handler};
pub use verifier::{Command, CommandKind, NoteQuery, Output, Rejection, Totals, TransferReceipt, Verifier, VerifierClient, VerifierError};
pub use pp::{PaymentProcessor, PeerService, PpClient, PpClientError, PpConfig, PpError, TransferOutcome};
