//! Static node identities. Broadcasts carry an ECDSA tag under the sender's
//! static signing key; unicasts are sealed with ChaCha20-Poly1305 under a
//! pairwise key from static Diffie-Hellman.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use parking_lot::Mutex;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PartyIndex;

pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;

/// A node's long-lived transport keys.
#[derive(Clone)]
pub struct StaticIdentity {
    index: PartyIndex,
    signing: SigningKey,
    agreement: p256::SecretKey,
}

impl fmt::Debug for StaticIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StaticIdentity").field("index", &self.index).finish_non_exhaustive()
    }
}

/// Hex-encoded secret material as it appears in deployment config files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct IdentitySecrets {
    pub signing_key: String,
    pub agreement_key: String,
}

/// Hex-encoded public material as it appears in deployment config files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PeerKeys {
    pub verifying_key: String,
    pub agreement_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("invalid key material: {0}")]
    Invalid(&'static str),
}

impl StaticIdentity {
    pub fn generate<R: RngCore + CryptoRng>(index: PartyIndex, rng: &mut R) -> Self {
        StaticIdentity {
            index,
            signing: SigningKey::random(&mut *rng),
            agreement: p256::SecretKey::random(rng),
        }
    }

    pub fn from_secrets(index: PartyIndex, secrets: &IdentitySecrets) -> Result<Self, KeyError> {
        let sk = hex::decode(&secrets.signing_key).map_err(|_| KeyError::Invalid("signing key hex"))?;
        let ak = hex::decode(&secrets.agreement_key).map_err(|_| KeyError::Invalid("agreement key hex"))?;
        Ok(StaticIdentity {
            index,
            signing: SigningKey::from_slice(&sk).map_err(|_| KeyError::Invalid("signing key"))?,
            agreement: p256::SecretKey::from_slice(&ak).map_err(|_| KeyError::Invalid("agreement key"))?,
        })
    }

    pub fn secrets(&self) -> IdentitySecrets {
        IdentitySecrets {
            signing_key: hex::encode(self.signing.to_bytes()),
            agreement_key: hex::encode(self.agreement.to_bytes()),
        }
    }

    pub fn index(&self) -> PartyIndex {
        self.index
    }

    pub fn public(&self) -> PeerPublic {
        PeerPublic {
            index: self.index,
            verifying: *self.signing.verifying_key(),
            agreement: self.agreement.public_key(),
        }
    }

    pub fn sign(&self, data: &[u8]) -> Vec<u8> {
        let sig: Signature = self.signing.sign(data);
        sig.to_bytes().to_vec()
    }

    /// Symmetric key shared with `peer`, bound to `label` and both identities.
    pub fn pair_key(&self, peer: &PeerPublic, label: &[u8]) -> [u8; 32] {
        let shared = p256::ecdh::diffie_hellman(self.agreement.to_nonzero_scalar(), peer.agreement.as_affine());
        let (lo, hi) = if self.index <= peer.index {
            (self.index, peer.index)
        } else {
            (peer.index, self.index)
        };
        let mut h = Sha256::new();
        h.update(b"kmn/pair-key/v1");
        h.update((label.len() as u32).to_be_bytes());
        h.update(label);
        h.update(shared.raw_secret_bytes());
        h.update(lo.to_be_bytes());
        h.update(hi.to_be_bytes());
        h.finalize().into()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PeerPublic {
    pub index: PartyIndex,
    pub verifying: VerifyingKey,
    pub agreement: p256::PublicKey,
}

impl fmt::Debug for PeerPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeerPublic({})", self.index)
    }
}

impl PeerPublic {
    pub fn verify(&self, data: &[u8], tag: &[u8]) -> bool {
        match Signature::from_slice(tag) {
            Ok(sig) => self.verifying.verify(data, &sig).is_ok(),
            Err(_) => false,
        }
    }

    pub fn keys(&self) -> PeerKeys {
        use p256::elliptic_curve::sec1::ToEncodedPoint;
        PeerKeys {
            verifying_key: hex::encode(self.verifying.to_encoded_point(true).as_bytes()),
            agreement_key: hex::encode(self.agreement.to_encoded_point(true).as_bytes()),
        }
    }

    pub fn from_keys(index: PartyIndex, keys: &PeerKeys) -> Result<Self, KeyError> {
        let vk = hex::decode(&keys.verifying_key).map_err(|_| KeyError::Invalid("verifying key hex"))?;
        let ak = hex::decode(&keys.agreement_key).map_err(|_| KeyError::Invalid("agreement key hex"))?;
        Ok(PeerPublic {
            index,
            verifying: VerifyingKey::from_sec1_bytes(&vk).map_err(|_| KeyError::Invalid("verifying key"))?,
            agreement: p256::PublicKey::from_sec1_bytes(&ak).map_err(|_| KeyError::Invalid("agreement key"))?,
        })
    }
}

/// Public keys of every node, provisioned at deployment.
#[derive(Clone, Debug, Default)]
pub struct Directory {
    peers: BTreeMap<PartyIndex, PeerPublic>,
}

impl Directory {
    pub fn new<I: IntoIterator<Item = PeerPublic>>(peers: I) -> Self {
        Directory {
            peers: peers.into_iter().map(|p| (p.index, p)).collect(),
        }
    }

    pub fn get(&self, index: PartyIndex) -> Option<&PeerPublic> {
        self.peers.get(&index)
    }

    pub fn contains(&self, index: PartyIndex) -> bool {
        self.peers.contains_key(&index)
    }

    pub fn indices(&self) -> impl Iterator<Item = PartyIndex> + '_ {
        self.peers.keys().copied()
    }
}

/// Seals and opens AEAD payloads with a fixed symmetric key.
#[derive(Clone)]
pub struct Sealer {
    cipher: ChaCha20Poly1305,
}

impl Sealer {
    pub fn new(key: &[u8; 32]) -> Self {
        Sealer {
            cipher: ChaCha20Poly1305::new(Key::from_slice(key)),
        }
    }

    /// Returns `(nonce ‖ ciphertext, tag)`.
    pub fn seal<R: RngCore>(&self, aad: &[u8], plaintext: &[u8], rng: &mut R) -> (Vec<u8>, Vec<u8>) {
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        self.seal_with_nonce(&nonce, aad, plaintext)
    }

    pub fn seal_with_nonce(&self, nonce: &[u8; AEAD_NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut ct = self
            .cipher
            .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let tag = ct.split_off(ct.len() - AEAD_TAG_LEN);
        let mut body = Vec::with_capacity(AEAD_NONCE_LEN + ct.len());
        body.extend_from_slice(nonce);
        body.extend_from_slice(&ct);
        (body, tag)
    }

    pub fn open(&self, aad: &[u8], body: &[u8], tag: &[u8]) -> Option<Vec<u8>> {
        if body.len() < AEAD_NONCE_LEN || tag.len() != AEAD_TAG_LEN {
            return None;
        }
        let (nonce, ct) = body.split_at(AEAD_NONCE_LEN);
        let mut joined = Vec::with_capacity(ct.len() + AEAD_TAG_LEN);
        joined.extend_from_slice(ct);
        joined.extend_from_slice(tag);
        self.cipher
            .decrypt(Nonce::from_slice(nonce), Payload { msg: &joined, aad })
            .ok()
    }
}

/// Per-node authentication state with a cache of pairwise sealers.
pub struct Authenticator {
    identity: StaticIdentity,
    directory: Directory,
    sealers: Mutex<HashMap<PartyIndex, Sealer>>,
}

impl Authenticator {
    pub fn new(identity: StaticIdentity, directory: Directory) -> Self {
        Authenticator {
            identity,
            directory,
            sealers: Mutex::new(HashMap::new()),
        }
    }

    pub fn identity(&self) -> &StaticIdentity {
        &self.identity
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn sealer(&self, peer: PartyIndex) -> Option<Sealer> {
        if let Some(s) = self.sealers.lock().get(&peer) {
            return Some(s.clone());
        }
        let public = self.directory.get(peer)?;
        let sealer = Sealer::new(&self.identity.pair_key(public, b"room-unicast"));
        self.sealers.lock().insert(peer, sealer.clone());
        Some(sealer)
    }
}
