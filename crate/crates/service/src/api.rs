//! Client wire protocol of the KMN coordinator.
//!
//! Request: `verb u8 ‖ uuid (16, zero for GEN and IMPORT) ‖ payload`, where the
//! payload is a 32-byte digest for SIGN and a 32-byte scalar for IMPORT and
//! ADD. Response: `status u8 ‖ body`.

use kmn_core::ec::{Digest, EcdsaSignature, GroupPoint, Scalar, POINT_LEN};
use kmn_core::encoding::{DecodeError, Reader, Writer};
use kmn_core::FaultKind;
use serde::{Deserialize, Serialize};
use uuid::Uuid;
use zeroize::Zeroize;

use crate::error::KmnError;
use crate::store::KeyState;

pub const GEN: u8 = 0x01;
pub const SIGN: u8 = 0x02;
pub const EXPORT: u8 = 0x03;
pub const IMPORT: u8 = 0x04;
pub const ADD: u8 = 0x05;

pub const OK: u8 = 0x00;
pub const NOT_FOUND: u8 = 0x01;
pub const INVALID_STATE: u8 = 0x02;
pub const UNAUTHORIZED: u8 = 0x03;
pub const BAD_REQUEST: u8 = 0x04;
pub const SERVICE_ERROR: u8 = 0x05;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum KmnRequest {
    Gen,
    Sign { key: Uuid, digest: Digest },
    Export { key: Uuid },
    Import { secret: Scalar },
    Add { key: Uuid, increment: Scalar },
}

impl Drop for KmnRequest {
    fn drop(&mut self) {
        match self {
            KmnRequest::Import { secret } => secret.zeroize(),
            KmnRequest::Add { increment, .. } => increment.zeroize(),
            _ => {}
        }
    }
}

impl KmnRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(49);
        match self {
            KmnRequest::Gen => w.u8(GEN).uuid(&Uuid::nil()),
            KmnRequest::Sign { key, digest } => w.u8(SIGN).uuid(key).raw(&digest.0),
            KmnRequest::Export { key } => w.u8(EXPORT).uuid(key),
            KmnRequest::Import { secret } => w.u8(IMPORT).uuid(&Uuid::nil()).scalar(secret),
            KmnRequest::Add { key, increment } => w.u8(ADD).uuid(key).scalar(increment),
        };
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let verb = r.u8()?;
        let key = r.uuid()?;
        let req = match verb {
            GEN => KmnRequest::Gen,
            SIGN => KmnRequest::Sign {
                key,
                digest: Digest(r.array()?),
            },
            EXPORT => KmnRequest::Export { key },
            IMPORT => KmnRequest::Import { secret: r.scalar()? },
            ADD => KmnRequest::Add {
                key,
                increment: r.scalar()?,
            },
            _ => return Err(DecodeError::Invalid("verb")),
        };
        r.finish()?;
        if matches!(req, KmnRequest::Gen | KmnRequest::Import { .. }) && !key.is_nil() {
            return Err(DecodeError::Invalid("uuid must be zero"));
        }
        Ok(req)
    }
}

/// Which signing path served a SIGN request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum SignPath {
    /// One round from a pooled presignature.
    Online = 0,
    /// Presigning and signing in one four-round session.
    Interactive = 1,
    /// A non-threshold signer.
    Local = 2,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum KmnReply {
    Key { key: Uuid, public_key: GroupPoint },
    Signature { signature: EcdsaSignature, path: SignPath },
    Secret(Scalar),
}

impl Drop for KmnReply {
    fn drop(&mut self) {
        if let KmnReply::Secret(s) = self {
            s.zeroize();
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AbortBody {
    message: String,
    fault: Option<FaultKind>,
    culprits: Vec<u16>,
}

pub fn encode_reply(reply: &Result<KmnReply, KmnError>) -> Vec<u8> {
    let mut w = Writer::with_capacity(66);
    match reply {
        Ok(KmnReply::Key { key, public_key }) => {
            w.u8(OK).uuid(key).point(public_key);
        }
        Ok(KmnReply::Signature { signature, path }) => {
            w.u8(OK).raw(&signature.to_bytes()).u8(*path as u8);
        }
        Ok(KmnReply::Secret(s)) => {
            w.u8(OK).scalar(s);
        }
        Err(KmnError::NotFound(key)) => {
            w.u8(NOT_FOUND).uuid(key);
        }
        Err(KmnError::InvalidState(key, state)) => {
            w.u8(INVALID_STATE).uuid(key).u8(*state as u8);
        }
        Err(KmnError::Unauthorized(key)) => {
            w.u8(UNAUTHORIZED).uuid(key);
        }
        Err(KmnError::BadRequest(m)) => {
            w.u8(BAD_REQUEST).raw(m.as_bytes());
        }
        Err(KmnError::Aborted {
            message,
            fault,
            culprits,
        }) => {
            let body = AbortBody {
                message: message.clone(),
                fault: *fault,
                culprits: culprits.clone(),
            };
            w.u8(SERVICE_ERROR).raw(&serde_json::to_vec(&body).expect("abort body serializes"));
        }
        Err(other) => {
            let body = AbortBody {
                message: other.to_string(),
                fault: None,
                culprits: other.culprits().to_vec(),
            };
            w.u8(SERVICE_ERROR).raw(&serde_json::to_vec(&body).expect("abort body serializes"));
        }
    }
    w.finish()
}

/// Decodes a reply to `verb`.
pub fn decode_reply(verb: u8, bytes: &[u8]) -> Result<KmnReply, KmnError> {
    let malformed = |e: DecodeError| KmnError::Service(format!("malformed reply: {e}"));
    let mut r = Reader::new(bytes);
    let status = r.u8().map_err(malformed)?;
    let out = match status {
        OK => match verb {
            GEN | IMPORT | ADD => KmnReply::Key {
                key: r.uuid().map_err(malformed)?,
                public_key: GroupPoint::from_slice(r.raw(POINT_LEN).map_err(malformed)?)
                    .map_err(|e| KmnError::Service(e.to_string()))?,
            },
            SIGN => {
                let sig = EcdsaSignature::from_bytes(r.raw(64).map_err(malformed)?)
                    .map_err(|e| KmnError::Service(e.to_string()))?;
                let path = match r.u8().map_err(malformed)? {
                    0 => SignPath::Online,
                    1 => SignPath::Interactive,
                    _ => SignPath::Local,
                };
                KmnReply::Signature { signature: sig, path }
            }
            EXPORT => KmnReply::Secret(r.scalar().map_err(malformed)?),
            _ => return Err(KmnError::BadRequest(format!("unknown verb {verb}"))),
        },
        NOT_FOUND => return Err(KmnError::NotFound(r.uuid().map_err(malformed)?)),
        INVALID_STATE => {
            let key = r.uuid().map_err(malformed)?;
            let state = match r.u8().map_err(malformed)? {
                0 => KeyState::Available,
                1 => KeyState::Allocated,
                _ => KeyState::Retired,
            };
            return Err(KmnError::InvalidState(key, state));
        }
        UNAUTHORIZED => return Err(KmnError::Unauthorized(r.uuid().map_err(malformed)?)),
        BAD_REQUEST => return Err(KmnError::BadRequest(String::from_utf8_lossy(r.rest()).into_owned())),
        _ => {
            let body: AbortBody =
                serde_json::from_slice(r.rest()).map_err(|e| KmnError::Service(format!("malformed error body: {e}")))?;
            return Err(KmnError::Aborted {
                message: body.message,
                fault: body.fault,
                culprits: body.culprits,
            });
        }
    };
    r.finish().map_err(malformed)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::OsRng;

    #[test]
    fn request_layout_is_bit_exact() {
        let key = Uuid::from_bytes([0xAB; 16]);
        let sign = KmnRequest::Sign { key, digest: Digest([7; 32]) }.encode();
        assert_eq!(sign.len(), 1 + 16 + 32);
        assert_eq!(sign[0], 0x02);
        assert_eq!(&sign[1..17], &[0xAB; 16]);
        assert_eq!(&sign[17..], &[7; 32]);
        assert_eq!(KmnRequest::Gen.encode(), [&[0x01u8][..], &[0; 16]].concat());
        let s = Scalar::from_u64(5);
        let import = KmnRequest::Import { secret: s }.encode();
        assert_eq!(import.len(), 49);
        assert_eq!(&import[1..17], &[0; 16]);
        assert_eq!(&import[17..], &s.to_bytes());
        assert_eq!(KmnRequest::Export { key }.encode().len(), 17);
        assert_eq!(KmnRequest::Add { key, increment: s }.encode()[0], 0x05);
    }

    #[test]
    fn nonzero_uuid_on_gen_is_rejected() {
        let mut bytes = KmnRequest::Gen.encode();
        bytes[5] = 1;
        assert!(KmnRequest::decode(&bytes).is_err());
        assert!(KmnRequest::decode(&[0x09; 17]).is_err());
    }

    proptest! {
        #[test]
        fn requests_roundtrip(verb in 1u8..=5, key in any::<[u8; 16]>(), payload in any::<[u8; 32]>()) {
            let key = Uuid::from_bytes(key);
            let scalar = Scalar::from_bytes_reduced(&payload);
            let req = match verb {
                1 => KmnRequest::Gen,
                2 => KmnRequest::Sign { key, digest: Digest(payload) },
                3 => KmnRequest::Export { key },
                4 => KmnRequest::Import { secret: scalar },
                _ => KmnRequest::Add { key, increment: scalar },
            };
            prop_assert_eq!(KmnRequest::decode(&req.encode()).unwrap(), req);
        }
    }

    #[test]
    fn replies_roundtrip() {
        let key = Uuid::new_v4();
        let pk = GroupPoint::mul_base(&Scalar::random_nonzero(&mut OsRng));
        let ok = Ok(KmnReply::Key { key, public_key: pk });
        assert_eq!(decode_reply(GEN, &encode_reply(&ok)), ok);
        let sig = EcdsaSignature::new(Scalar::from_u64(3), Scalar::from_u64(4)).unwrap();
        let ok = Ok(KmnReply::Signature {
            signature: sig,
            path: SignPath::Interactive,
        });
        assert_eq!(decode_reply(SIGN, &encode_reply(&ok)), ok);
        for err in [
            KmnError::NotFound(key),
            KmnError::InvalidState(key, KeyState::Retired),
            KmnError::Unauthorized(key),
            KmnError::BadRequest("x".into()),
            KmnError::Aborted {
                message: "m".into(),
                fault: Some(FaultKind::Timeout),
                culprits: vec![2],
            },
        ] {
            assert_eq!(decode_reply(EXPORT, &encode_reply(&Err(err.clone()))), Err(err));
        }
    }
}
