//! In-process backend: every node's mailboxes live in one hub.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::RwLock;

use super::mailbox::{Envelope, Mailboxes};
use super::{Directory, Endpoint, Link, RoomMessage, StaticIdentity, TransportConfig, TransportError};
use crate::PartyIndex;

/// Observer called with every frame.
pub type Tap = Arc<dyn Fn(&RoomMessage) + Send + Sync>;

/// Shared in-process hub. Cloning yields another handle to the same hub.
#[derive(Clone, Default)]
pub struct InProcessNetwork {
    inner: Arc<Hub>,
}

#[derive(Default)]
struct Hub {
    boxes: RwLock<HashMap<PartyIndex, Arc<Mailboxes>>>,
    delay: RwLock<Option<Duration>>,
    /// Optional tap invoked with every frame, for eavesdropper harnesses.
    tap: RwLock<Option<Tap>>,
}

impl InProcessNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an artificial one-way delay to every message.
    pub fn set_delay(&self, delay: Option<Duration>) {
        *self.inner.delay.write() = delay;
    }

    pub fn set_tap(&self, tap: Option<Tap>) {
        *self.inner.tap.write() = tap;
    }

    pub fn mailboxes(&self, index: PartyIndex) -> Arc<Mailboxes> {
        self.inner
            .boxes
            .write()
            .entry(index)
            .or_insert_with(|| Arc::new(Mailboxes::new()))
            .clone()
    }

    pub fn endpoint(&self, identity: StaticIdentity, directory: Directory, config: TransportConfig) -> Endpoint {
        let mailboxes = self.mailboxes(identity.index());
        Endpoint::new(identity, directory, Arc::new(self.clone()), mailboxes, config)
    }
}

impl Link for InProcessNetwork {
    fn deliver(&self, to: PartyIndex, msg: RoomMessage) -> Result<(), TransportError> {
        if let Some(tap) = self.inner.tap.read().as_ref() {
            tap(&msg);
        }
        let target = self
            .inner
            .boxes
            .read()
            .get(&to)
            .cloned()
            .ok_or(TransportError::UnknownRecipient(to))?;
        let deliver_at = self.inner.delay.read().map(|d| Instant::now() + d);
        target.push(Envelope { msg, deliver_at });
        Ok(())
    }
}
