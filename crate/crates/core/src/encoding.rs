//! Deterministic length-prefixed field encoding shared by wire messages and
//! persisted records. Integers are big-endian; variable-length fields carry a
//! u32 length prefix.

use thiserror::Error;
use uuid::Uuid;

use crate::ec::{GroupPoint, Scalar, POINT_LEN, SCALAR_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input while reading {0}")]
    Truncated(&'static str),
    #[error("invalid {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Default, Debug, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Writer { buf: Vec::with_capacity(n) }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    /// u32 length prefix followed by the bytes.
    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.u32(bytes.len() as u32);
        self.raw(bytes)
    }

    pub fn scalar(&mut self, s: &Scalar) -> &mut Self {
        self.raw(&s.to_bytes())
    }

    pub fn point(&mut self, p: &GroupPoint) -> &mut Self {
        self.raw(&p.to_bytes())
    }

    pub fn uuid(&mut self, id: &Uuid) -> &mut Self {
        self.raw(id.as_bytes())
    }

    pub fn points(&mut self, ps: &[GroupPoint]) -> &mut Self {
        self.u16(ps.len() as u16);
        for p in ps {
            self.point(p);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated(what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2, "u16")?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        self.take(n, "raw bytes")
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N, "fixed array")?.try_into().unwrap())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.u32()? as usize;
        self.take(n, "length-prefixed bytes")
    }

    pub fn scalar(&mut self) -> Result<Scalar, DecodeError> {
        Scalar::from_slice(self.take(SCALAR_LEN, "scalar")?).map_err(|_| DecodeError::Invalid("scalar"))
    }

    pub fn point(&mut self) -> Result<GroupPoint, DecodeError> {
        GroupPoint::from_slice(self.take(POINT_LEN, "point")?).map_err(|_| DecodeError::Invalid("point"))
    }

    pub fn uuid(&mut self) -> Result<Uuid, DecodeError> {
        Ok(Uuid::from_bytes(self.array::<16>()?))
    }

    pub fn points(&mut self) -> Result<Vec<GroupPoint>, DecodeError> {
        let n = self.u16()? as usize;
        (0..n).map(|_| self.point()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::Trailing(self.buf.len()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mixed_fields_roundtrip(a in any::<u8>(), b in any::<u16>(), c in any::<u64>(), body in proptest::collection::vec(any::<u8>(), 0..300), seed in any::<u64>()) {
            let s = Scalar::from_u64(seed);
            let p = crate::ec::GroupPoint::mul_base(&s);
            let mut w = Writer::new();
            w.u8(a).u16(b).u64(c).bytes(&body).scalar(&s).point(&p);
            let buf = w.finish();
            let mut r = Reader::new(&buf);
            prop_assert_eq!(r.u8().unwrap(), a);
            prop_assert_eq!(r.u16().unwrap(), b);
            prop_assert_eq!(r.u64().unwrap(), c);
            prop_assert_eq!(r.bytes().unwrap(), &body[..]);
            prop_assert_eq!(r.scalar().unwrap(), s);
            prop_assert_eq!(r.point().unwrap(), p);
            prop_assert!(r.finish().is_ok());
        }

        #[test]
        fn truncation_never_panics(body in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut r = Reader::new(&body);
            let _ = r.bytes();
            let _ = r.scalar();
            let _ = r.point();
        }
    }
}
