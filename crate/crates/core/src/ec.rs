//! P-256 scalars, points, message digests and the plain ECDSA verification
//! equation that every threshold signature has to satisfy.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use p256::elliptic_curve::group::GroupEncoding;
use p256::elliptic_curve::ops::Reduce;
use p256::elliptic_curve::point::AffineCoordinates;
use p256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use p256::elliptic_curve::scalar::IsHigh;
use p256::elliptic_curve::{Field, PrimeField};
use p256::{AffinePoint, EncodedPoint, FieldBytes, ProjectivePoint, U256};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

/// Length of a serialized scalar.
pub const SCALAR_LEN: usize = 32;
/// Length of a compressed SEC1 point. The identity is encoded as 33 zero bytes.
pub const POINT_LEN: usize = 33;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EcError {
    #[error("inversion of zero scalar")]
    ZeroInversion,
    #[error("scalar is not canonical (>= group order)")]
    NonCanonicalScalar,
    #[error("invalid point encoding")]
    InvalidPoint,
    #[error("invalid signature encoding")]
    InvalidSignature,
}

/// An integer modulo the P-256 group order q, always fully reduced.
#[derive(Clone, Copy, Default, PartialEq, Eq)]
pub struct Scalar(pub(crate) p256::Scalar);

impl Scalar {
    pub const ZERO: Scalar = Scalar(p256::Scalar::ZERO);
    pub const ONE: Scalar = Scalar(p256::Scalar::ONE);

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Scalar(p256::Scalar::random(rng))
    }

    /// Uniform nonzero scalar.
    pub fn random_nonzero<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let s = Self::random(rng);
            if !s.is_zero() {
                return s;
            }
        }
    }

    pub fn from_u64(v: u64) -> Self {
        Scalar(p256::Scalar::from(v))
    }

    /// Parses a canonical 32-byte big-endian encoding.
    pub fn from_bytes(bytes: &[u8; SCALAR_LEN]) -> Result<Self, EcError> {
        Option::<p256::Scalar>::from(p256::Scalar::from_repr(FieldBytes::clone_from_slice(bytes)))
            .map(Scalar)
            .ok_or(EcError::NonCanonicalScalar)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, EcError> {
        let arr: [u8; SCALAR_LEN] = bytes.try_into().map_err(|_| EcError::NonCanonicalScalar)?;
        Self::from_bytes(&arr)
    }

    /// Interprets 32 big-endian bytes as an integer and reduces it mod q.
    pub fn from_bytes_reduced(bytes: &[u8; SCALAR_LEN]) -> Self {
        Scalar(<p256::Scalar as Reduce<U256>>::reduce_bytes(FieldBytes::from_slice(bytes)))
    }

    pub fn to_bytes(&self) -> [u8; SCALAR_LEN] {
        self.0.to_repr().into()
    }

    pub fn is_zero(&self) -> bool {
        bool::from(self.0.is_zero())
    }

    /// True when the value is above (q-1)/2.
    pub fn is_high(&self) -> bool {
        bool::from(self.0.is_high())
    }

    pub fn invert(&self) -> Result<Self, EcError> {
        Option::<p256::Scalar>::from(self.0.invert())
            .map(Scalar)
            .ok_or(EcError::ZeroInversion)
    }

    pub fn square(&self) -> Self {
        Scalar(self.0.square())
    }

    pub fn pow_u64(&self, exp: u64) -> Self {
        Scalar(self.0.pow_vartime(&[exp]))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, EcError> {
        let bytes = hex::decode(s).map_err(|_| EcError::NonCanonicalScalar)?;
        Self::from_slice(&bytes)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar({})", self.to_hex())
    }
}

impl Zeroize for Scalar {
    fn zeroize(&mut self) {
        // SAFETY: writing a valid value through a valid &mut.
        unsafe { std::ptr::write_volatile(&mut self.0, p256::Scalar::ZERO) };
        std::sync::atomic::compiler_fence(std::sync::atomic::Ordering::SeqCst);
    }
}

impl Add for Scalar {
    type Output = Scalar;
    fn add(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 + rhs.0)
    }
}

impl AddAssign for Scalar {
    fn add_assign(&mut self, rhs: Scalar) {
        self.0 += rhs.0;
    }
}

impl Sub for Scalar {
    type Output = Scalar;
    fn sub(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 - rhs.0)
    }
}

impl Mul for Scalar {
    type Output = Scalar;
    fn mul(self, rhs: Scalar) -> Scalar {
        Scalar(self.0 * rhs.0)
    }
}

impl Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        Scalar(-self.0)
    }
}

impl Sum for Scalar {
    fn sum<I: Iterator<Item = Scalar>>(iter: I) -> Scalar {
        iter.fold(Scalar::ZERO, |a, b| a + b)
    }
}

impl<'a> Sum<&'a Scalar> for Scalar {
    fn sum<I: Iterator<Item = &'a Scalar>>(iter: I) -> Scalar {
        iter.fold(Scalar::ZERO, |a, b| a + *b)
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Scalar::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// An element of the P-256 group, possibly the identity.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupPoint(pub(crate) ProjectivePoint);

impl Default for GroupPoint {
    fn default() -> Self {
        Self::identity()
    }
}

impl GroupPoint {
    pub fn identity() -> Self {
        GroupPoint(ProjectivePoint::IDENTITY)
    }

    pub fn generator() -> Self {
        GroupPoint(ProjectivePoint::GENERATOR)
    }

    /// `k·G`
    pub fn mul_base(k: &Scalar) -> Self {
        GroupPoint(ProjectivePoint::GENERATOR * k.0)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == ProjectivePoint::IDENTITY
    }

    /// Affine x-coordinate reduced mod q; `None` for the identity.
    pub fn x_scalar(&self) -> Option<Scalar> {
        if self.is_identity() {
            return None;
        }
        let x = self.0.to_affine().x();
        Some(Scalar(<p256::Scalar as Reduce<U256>>::reduce_bytes(&x)))
    }

    pub fn to_bytes(&self) -> [u8; POINT_LEN] {
        let mut out = [0u8; POINT_LEN];
        if !self.is_identity() {
            out.copy_from_slice(self.0.to_affine().to_bytes().as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; POINT_LEN]) -> Result<Self, EcError> {
        if bytes.iter().all(|b| *b == 0) {
            return Ok(Self::identity());
        }
        if bytes[0] != 0x02 && bytes[0] != 0x03 {
            return Err(EcError::InvalidPoint);
        }
        let encoded = EncodedPoint::from_bytes(bytes).map_err(|_| EcError::InvalidPoint)?;
        Option::<AffinePoint>::from(AffinePoint::from_encoded_point(&encoded))
            .map(|p| GroupPoint(p.into()))
            .ok_or(EcError::InvalidPoint)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, EcError> {
        let arr: [u8; POINT_LEN] = bytes.try_into().map_err(|_| EcError::InvalidPoint)?;
        Self::from_bytes(&arr)
    }

    /// Uncompressed SEC1 encoding, used where interop with other ECDSA stacks is needed.
    pub fn to_uncompressed(&self) -> Vec<u8> {
        self.0.to_affine().to_encoded_point(false).as_bytes().to_vec()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, EcError> {
        let bytes = hex::decode(s).map_err(|_| EcError::InvalidPoint)?;
        Self::from_slice(&bytes)
    }
}

impl fmt::Debug for GroupPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupPoint({})", self.to_hex())
    }
}

impl std::hash::Hash for GroupPoint {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_bytes().hash(state)
    }
}

impl Add for GroupPoint {
    type Output = GroupPoint;
    fn add(self, rhs: GroupPoint) -> GroupPoint {
        GroupPoint(self.0 + rhs.0)
    }
}

impl AddAssign for GroupPoint {
    fn add_assign(&mut self, rhs: GroupPoint) {
        self.0 += rhs.0;
    }
}

impl Sub for GroupPoint {
    type Output = GroupPoint;
    fn sub(self, rhs: GroupPoint) -> GroupPoint {
        GroupPoint(self.0 - rhs.0)
    }
}

impl Mul<Scalar> for GroupPoint {
    type Output = GroupPoint;
    fn mul(self, rhs: Scalar) -> GroupPoint {
        GroupPoint(self.0 * rhs.0)
    }
}

impl Sum for GroupPoint {
    fn sum<I: Iterator<Item = GroupPoint>>(iter: I) -> GroupPoint {
        iter.fold(GroupPoint::identity(), |a, b| a + b)
    }
}

impl Serialize for GroupPoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for GroupPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        GroupPoint::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 output used as the message representative.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    /// The digest reduced mod q, i.e. `m` in the signing equation.
    pub fn to_scalar(&self) -> Scalar {
        Scalar::from_bytes_reduced(&self.0)
    }

    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        Digest(b)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(self.0))
    }
}

pub fn hash_message(message: &[u8]) -> Digest {
    Digest(Sha256::digest(message).into())
}

/// An ECDSA signature with nonzero `r` and a low-half `s`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct EcdsaSignature {
    r: Scalar,
    s: Scalar,
}

impl EcdsaSignature {
    /// Builds a signature, normalizing `s` into the low half.
    pub fn new(r: Scalar, s: Scalar) -> Result<Self, EcError> {
        if r.is_zero() || s.is_zero() {
            return Err(EcError::InvalidSignature);
        }
        let s = if s.is_high() { -s } else { s };
        Ok(EcdsaSignature { r, s })
    }

    pub fn r(&self) -> Scalar {
        self.r
    }

    pub fn s(&self) -> Scalar {
        self.s
    }

    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.r.to_bytes());
        out[32..].copy_from_slice(&self.s.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EcError> {
        if bytes.len() != 64 {
            return Err(EcError::InvalidSignature);
        }
        let r = Scalar::from_slice(&bytes[..32]).map_err(|_| EcError::InvalidSignature)?;
        let s = Scalar::from_slice(&bytes[32..]).map_err(|_| EcError::InvalidSignature)?;
        if s.is_high() {
            return Err(EcError::InvalidSignature);
        }
        Self::new(r, s)
    }
}

impl fmt::Debug for EcdsaSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EcdsaSignature(r={}, s={})", self.r.to_hex(), self.s.to_hex())
    }
}

/// Standard ECDSA verification: with `w = s⁻¹`, accept iff
/// `x(m·w·G + r·w·X) mod q == r`. Never panics; malformed input yields `false`.
pub fn ecdsa_verify(pubkey: &GroupPoint, digest: &Digest, sig: &EcdsaSignature) -> bool {
    verify_raw(pubkey, digest, &sig.r, &sig.s)
}

/// Verification over raw `(r, s)`; accepts either half for `s`.
pub fn verify_raw(pubkey: &GroupPoint, digest: &Digest, r: &Scalar, s: &Scalar) -> bool {
    if pubkey.is_identity() || r.is_zero() || s.is_zero() {
        return false;
    }
    let w = match s.invert() {
        Ok(w) => w,
        Err(_) => return false,
    };
    let u1 = digest.to_scalar() * w;
    let u2 = *r * w;
    let point = GroupPoint::mul_base(&u1) + *pubkey * u2;
    match point.x_scalar() {
        Some(x) => x == *r,
        None => false,
    }
}

/// Single-party signing with a fresh random nonce: `s = k⁻¹(m + r·x)`.
/// Used by the verifier, the central bank, and the non-threshold baseline.
pub fn sign_digest<R: RngCore + CryptoRng>(
    secret: &Scalar,
    digest: &Digest,
    rng: &mut R,
) -> EcdsaSignature {
    let m = digest.to_scalar();
    loop {
        let k = Scalar::random_nonzero(rng);
        let r = match GroupPoint::mul_base(&k).x_scalar() {
            Some(r) if !r.is_zero() => r,
            _ => continue,
        };
        let s = k.invert().expect("nonzero") * (m + r * *secret);
        if let Ok(sig) = EcdsaSignature::new(r, s) {
            return sig;
        }
    }
}

/// A single-party key pair.
#[derive(Clone)]
pub struct KeyPair {
    secret: Scalar,
    public: GroupPoint,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(Scalar::random_nonzero(rng)).expect("nonzero")
    }

    pub fn from_secret(secret: Scalar) -> Result<Self, EcError> {
        if secret.is_zero() {
            return Err(EcError::ZeroInversion);
        }
        Ok(KeyPair {
            secret,
            public: GroupPoint::mul_base(&secret),
        })
    }

    pub fn secret(&self) -> &Scalar {
        &self.secret
    }

    pub fn public(&self) -> GroupPoint {
        self.public
    }

    pub fn sign<R: RngCore + CryptoRng>(&self, digest: &Digest, rng: &mut R) -> EcdsaSignature {
        sign_digest(&self.secret, digest, rng)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl Drop for KeyPair {
    fn drop(&mut self) {
        self.secret.zeroize();
    }
}
