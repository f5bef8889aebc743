//! Key custody as seen by a payment processor: either a KMN reached through
//! its coordinator, or a single in-process signer used as a baseline.

use std::collections::HashMap;
use std::sync::Arc;

use kmn_core::ec::{Digest, EcdsaSignature, GroupPoint, KeyPair, Scalar};
use parking_lot::Mutex;
use rand::rngs::OsRng;
use uuid::Uuid;

use crate::api::{decode_reply, KmnReply, KmnRequest, SignPath};
use crate::error::KmnError;
use crate::store::KeyState;
use crate::wire::Channel;

pub trait KeyService: Send + Sync {
    fn generate(&self) -> Result<(Uuid, GroupPoint), KmnError>;
    fn sign(&self, key: Uuid, digest: &Digest) -> Result<(EcdsaSignature, SignPath), KmnError>;
    fn export(&self, key: Uuid) -> Result<Scalar, KmnError>;
    fn import(&self, secret: Scalar) -> Result<(Uuid, GroupPoint), KmnError>;
    fn add(&self, key: Uuid, increment: Scalar) -> Result<(Uuid, GroupPoint), KmnError>;
}

/// Speaks the coordinator's client protocol over any channel.
pub struct KmnClient {
    channel: Arc<dyn Channel>,
}

impl KmnClient {
    pub fn new(channel: Arc<dyn Channel>) -> Self {
        KmnClient { channel }
    }

    fn call(&self, req: KmnRequest) -> Result<KmnReply, KmnError> {
        let mut bytes = req.encode();
        let verb = bytes[0];
        let out = self.channel.call(&bytes);
        zeroize::Zeroize::zeroize(&mut bytes);
        let mut resp = out?;
        let reply = decode_reply(verb, &resp);
        zeroize::Zeroize::zeroize(&mut resp);
        reply
    }

    fn key_reply(reply: KmnReply) -> Result<(Uuid, GroupPoint), KmnError> {
        match &reply {
            KmnReply::Key { key, public_key } => Ok((*key, *public_key)),
            _ => Err(KmnError::Service("unexpected reply".into())),
        }
    }
}

impl KeyService for KmnClient {
    fn generate(&self) -> Result<(Uuid, GroupPoint), KmnError> {
        Self::key_reply(self.call(KmnRequest::Gen)?)
    }

    fn sign(&self, key: Uuid, digest: &Digest) -> Result<(EcdsaSignature, SignPath), KmnError> {
        match &self.call(KmnRequest::Sign { key, digest: *digest })? {
            KmnReply::Signature { signature, path } => Ok((*signature, *path)),
            _ => Err(KmnError::Service("unexpected reply".into())),
        }
    }

    fn export(&self, key: Uuid) -> Result<Scalar, KmnError> {
        match &self.call(KmnRequest::Export { key })? {
            KmnReply::Secret(s) => Ok(*s),
            _ => Err(KmnError::Service("unexpected reply".into())),
        }
    }

    fn import(&self, secret: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        Self::key_reply(self.call(KmnRequest::Import { secret })?)
    }

    fn add(&self, key: Uuid, increment: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        Self::key_reply(self.call(KmnRequest::Add { key, increment })?)
    }
}

/// Non-threshold baseline: every key lives whole in this process.
#[derive(Default)]
pub struct SingleSigner {
    keys: Mutex<HashMap<Uuid, (KeyPair, KeyState)>>,
}

impl SingleSigner {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&self, pair: KeyPair) -> (Uuid, GroupPoint) {
        let uuid = Uuid::new_v4();
        let pk = pair.public();
        self.keys.lock().insert(uuid, (pair, KeyState::Allocated));
        (uuid, pk)
    }

    fn live(&self, key: Uuid) -> Result<KeyPair, KmnError> {
        match self.keys.lock().get(&key) {
            None => Err(KmnError::NotFound(key)),
            Some((_, KeyState::Retired)) => Err(KmnError::InvalidState(key, KeyState::Retired)),
            Some((pair, _)) => Ok(pair.clone()),
        }
    }

    fn retire(&self, key: Uuid) -> Result<KeyPair, KmnError> {
        let mut keys = self.keys.lock();
        match keys.get_mut(&key) {
            None => Err(KmnError::NotFound(key)),
            Some((_, KeyState::Retired)) => Err(KmnError::InvalidState(key, KeyState::Retired)),
            Some((pair, state)) => {
                *state = KeyState::Retired;
                Ok(pair.clone())
            }
        }
    }
}

impl KeyService for SingleSigner {
    fn generate(&self) -> Result<(Uuid, GroupPoint), KmnError> {
        Ok(self.insert(KeyPair::generate(&mut OsRng)))
    }

    fn sign(&self, key: Uuid, digest: &Digest) -> Result<(EcdsaSignature, SignPath), KmnError> {
        Ok((self.live(key)?.sign(digest, &mut OsRng), SignPath::Local))
    }

    fn export(&self, key: Uuid) -> Result<Scalar, KmnError> {
        Ok(*self.retire(key)?.secret())
    }

    fn import(&self, secret: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        let pair = KeyPair::from_secret(secret).map_err(|e| KmnError::BadRequest(e.to_string()))?;
        Ok(self.insert(pair))
    }

    fn add(&self, key: Uuid, increment: Scalar) -> Result<(Uuid, GroupPoint), KmnError> {
        let base = self.live(key)?;
        let pair = KeyPair::from_secret(*base.secret() + increment).map_err(|e| KmnError::BadRequest(e.to_string()))?;
        self.retire(key)?;
        Ok(self.insert(pair))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kmn_core::ec::ecdsa_verify;

    #[test]
    fn single_signer_follows_the_key_lifecycle() {
        let s = SingleSigner::new();
        let (a, pa) = s.generate().unwrap();
        let d = Digest([3; 32]);
        let (sig, path) = s.sign(a, &d).unwrap();
        assert!(ecdsa_verify(&pa, &d, &sig));
        assert_eq!(path, SignPath::Local);
        let inc = Scalar::from_u64(11);
        let (b, pb) = s.add(a, inc).unwrap();
        assert_eq!(pb, pa + GroupPoint::mul_base(&inc));
        assert_eq!(s.sign(a, &d), Err(KmnError::InvalidState(a, KeyState::Retired)));
        let secret = s.export(b).unwrap();
        assert_eq!(GroupPoint::mul_base(&secret), pb);
        assert!(s.export(b).is_err());
        assert_eq!(s.export(Uuid::nil()), Err(KmnError::NotFound(Uuid::nil())));
    }
}
