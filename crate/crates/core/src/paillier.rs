//! Paillier encryption with `g = N + 1`: the additively homomorphic scheme
//! behind multiplicative-to-additive conversion during presigning.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{DecodeError, Reader, Writer};
use crate::PartyIndex;

/// Miller-Rabin rounds used for prime generation.
pub const MILLER_RABIN_ROUNDS: usize = 64;

/// Modulus size used unless configured otherwise.
pub const DEFAULT_MODULUS_BITS: u64 = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PaillierError {
    #[error("unsupported modulus size {0} bits (expected 1024, 2048 or 3072)")]
    UnsupportedBits(u64),
    #[error("1024-bit moduli are only available with the unsafe fast-test profile")]
    UnsafeProfile,
    #[error("ciphertexts under different keys (owners {0} and {1})")]
    MixedKeys(PartyIndex, PartyIndex),
    #[error("plaintext does not fit below the modulus")]
    PlaintextTooLarge,
    #[error("ciphertext out of range or not a unit")]
    InvalidCiphertext,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Modulus profile. The 1024-bit profile keeps tests fast but is gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaillierProfile {
    pub bits: u64,
    #[serde(default)]
    pub allow_unsafe: bool,
}

impl Default for PaillierProfile {
    fn default() -> Self {
        PaillierProfile {
            bits: DEFAULT_MODULUS_BITS,
            allow_unsafe: false,
        }
    }
}

impl PaillierProfile {
    pub fn fast_test() -> Self {
        PaillierProfile {
            bits: 1024,
            allow_unsafe: true,
        }
    }

    pub fn validate(&self) -> Result<(), PaillierError> {
        match self.bits {
            2048 | 3072 => Ok(()),
            1024 if self.allow_unsafe => Ok(()),
            1024 => Err(PaillierError::UnsafeProfile),
            other => Err(PaillierError::UnsupportedBits(other)),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    owner: PartyIndex,
    n: BigUint,
    nn: BigUint,
}

impl fmt::Debug for PaillierPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PaillierPublicKey(owner={}, bits={})", self.owner, self.n.bits())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaillierCiphertext {
    value: BigUint,
    owner: PartyIndex,
}

impl PaillierCiphertext {
    pub fn owner(&self) -> PartyIndex {
        self.owner
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    /// u32 length prefix, big-endian magnitude.
    pub fn encode(&self, w: &mut Writer) {
        w.bytes(&self.value.to_bytes_be());
    }

    pub fn decode(r: &mut Reader<'_>, key: &PaillierPublicKey) -> Result<Self, PaillierError> {
        let value = BigUint::from_bytes_be(r.bytes()?);
        key.check_ciphertext_value(&value)?;
        Ok(PaillierCiphertext {
            value,
            owner: key.owner,
        })
    }
}

impl PaillierPublicKey {
    pub fn from_modulus(owner: PartyIndex, n: BigUint) -> Self {
        let nn = &n * &n;
        PaillierPublicKey { owner, n, nn }
    }

    pub fn owner(&self) -> PartyIndex {
        self.owner
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    fn check_ciphertext_value(&self, v: &BigUint) -> Result<(), PaillierError> {
        if v.is_zero() || v >= &self.nn || !v.gcd(&self.nn).is_one() {
            return Err(PaillierError::InvalidCiphertext);
        }
        Ok(())
    }

    fn check_owner(&self, ct: &PaillierCiphertext) -> Result<(), PaillierError> {
        if ct.owner != self.owner {
            return Err(PaillierError::MixedKeys(self.owner, ct.owner));
        }
        Ok(())
    }

    fn random_unit<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `(1 + m·N) · r^N mod N²`
    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        plaintext: &BigUint,
        rng: &mut R,
    ) -> Result<PaillierCiphertext, PaillierError> {
        if plaintext >= &self.n {
            return Err(PaillierError::PlaintextTooLarge);
        }
        let r = self.random_unit(rng);
        let gm = (BigUint::one() + plaintext * &self.n) % &self.nn;
        let value = (gm * r.modpow(&self.n, &self.nn)) % &self.nn;
        Ok(PaillierCiphertext {
            value,
            owner: self.owner,
        })
    }

    /// Homomorphic addition: decrypts to `a + b mod N`.
    pub fn add(
        &self,
        a: &PaillierCiphertext,
        b: &PaillierCiphertext,
    ) -> Result<PaillierCiphertext, PaillierError> {
        self.check_owner(a)?;
        self.check_owner(b)?;
        Ok(PaillierCiphertext {
            value: (&a.value * &b.value) % &self.nn,
            owner: self.owner,
        })
    }

    /// Homomorphic scalar multiplication: decrypts to `k·a mod N`.
    pub fn mul_plain(
        &self,
        ct: &PaillierCiphertext,
        k: &BigUint,
    ) -> Result<PaillierCiphertext, PaillierError> {
        self.check_owner(ct)?;
        Ok(PaillierCiphertext {
            value: ct.value.modpow(k, &self.nn),
            owner: self.owner,
        })
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u16(self.owner);
        w.bytes(&self.n.to_bytes_be());
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, PaillierError> {
        let owner = r.u16()?;
        let n = BigUint::from_bytes_be(r.bytes()?);
        if n.bits() < 512 || n.is_even() {
            return Err(DecodeError::Invalid("paillier modulus").into());
        }
        Ok(Self::from_modulus(owner, n))
    }
}

/// A Paillier key pair holding the factorization for CRT decryption.
#[derive(Clone)]
pub struct PaillierKeypair {
    public: PaillierPublicKey,
    p: BigUint,
    q: BigUint,
    pp: BigUint,
    qq: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl fmt::Debug for PaillierKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierKeypair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl PaillierKeypair {
    pub fn generate<R: RngCore + CryptoRng>(
        owner: PartyIndex,
        profile: PaillierProfile,
        rng: &mut R,
    ) -> Result<Self, PaillierError> {
        profile.validate()?;
        let half = profile.bits / 2;
        loop {
            let p = generate_prime(half, rng);
            let q = generate_prime(half, rng);
            if p == q {
                continue;
            }
            if let Some(kp) = Self::from_primes(owner, p, q) {
                if kp.public.bits() == profile.bits {
                    return Ok(kp);
                }
            }
        }
    }

    /// Returns `None` when `gcd(N, φ(N)) ≠ 1`.
    pub fn from_primes(owner: PartyIndex, p: BigUint, q: BigUint) -> Option<Self> {
        let one = BigUint::one();
        let n = &p * &q;
        let phi = (&p - &one) * (&q - &one);
        if !n.gcd(&phi).is_one() {
            return None;
        }
        let pp = &p * &p;
        let qq = &q * &q;
        let hp = h_factor(&p, &pp, &n)?;
        let hq = h_factor(&q, &qq, &n)?;
        let q_inv_p = q.modinv(&p)?;
        Some(PaillierKeypair {
            public: PaillierPublicKey::from_modulus(owner, n),
            p,
            q,
            pp,
            qq,
            hp,
            hq,
            q_inv_p,
        })
    }

    pub fn public(&self) -> &PaillierPublicKey {
        &self.public
    }

    pub fn owner(&self) -> PartyIndex {
        self.public.owner
    }

    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        plaintext: &BigUint,
        rng: &mut R,
    ) -> Result<PaillierCiphertext, PaillierError> {
        self.public.encrypt(plaintext, rng)
    }

    /// CRT decryption: `m_p = L_p(c^{p-1} mod p²)·h_p mod p`, likewise mod q, recombined.
    pub fn decrypt(&self, ct: &PaillierCiphertext) -> Result<BigUint, PaillierError> {
        self.public.check_owner(ct)?;
        self.public.check_ciphertext_value(&ct.value)?;
        let one = BigUint::one();
        let mp = {
            let u = ct.value.modpow(&(&self.p - &one), &self.pp);
            (l_function(&u, &self.p) * &self.hp) % &self.p
        };
        let mq = {
            let u = ct.value.modpow(&(&self.q - &one), &self.qq);
            (l_function(&u, &self.q) * &self.hq) % &self.q
        };
        // Garner: m = mq + q·((mp - mq)·q⁻¹ mod p)
        let diff = (&mp + &self.p - (&mq % &self.p)) % &self.p;
        let h = (diff * &self.q_inv_p) % &self.p;
        Ok(mq + &self.q * h)
    }

    pub fn encode_secret(&self, w: &mut Writer) {
        w.u16(self.owner());
        w.bytes(&self.p.to_bytes_be());
        w.bytes(&self.q.to_bytes_be());
    }

    pub fn decode_secret(r: &mut Reader<'_>) -> Result<Self, PaillierError> {
        let owner = r.u16()?;
        let p = BigUint::from_bytes_be(r.bytes()?);
        let q = BigUint::from_bytes_be(r.bytes()?);
        Self::from_primes(owner, p, q).ok_or(PaillierError::Decode(DecodeError::Invalid("paillier primes")))
    }
}

fn l_function(u: &BigUint, p: &BigUint) -> BigUint {
    (u - BigUint::one()) / p
}

fn h_factor(p: &BigUint, pp: &BigUint, n: &BigUint) -> Option<BigUint> {
    let one = BigUint::one();
    // g^{p-1} mod p² with g = N+1 equals 1 + (p-1)·N mod p².
    let g_pow = (&one + (p - &one) * n) % pp;
    l_function(&g_pow, p).modinv(p)
}

const SMALL_PRIME_LIMIT: u32 = 4096;

fn small_primes() -> &'static [u32] {
    static PRIMES: std::sync::OnceLock<Vec<u32>> = std::sync::OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = SMALL_PRIME_LIMIT as usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        let mut i = 2;
        while i * i < limit {
            if sieve[i] {
                let mut j = i * i;
                while j < limit {
                    sieve[j] = false;
                    j += i;
                }
            }
            i += 1;
        }
        (0..limit).filter(|&k| sieve[k]).map(|k| k as u32).collect()
    })
}

/// Miller-Rabin with `rounds` random bases, after trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in small_primes() {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let upper = n - &two;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
            if x == one {
                return false;
            }
        }
        return false;
    }
    true
}

/// Random prime of exactly `bits` bits with the top two bits set, so that the
/// product of two such primes has exactly `2·bits` bits.
pub fn generate_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    loop {
        let candidate = rng.gen_biguint(bits) | &top | BigUint::one();
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;
    use std::sync::OnceLock;

    fn fast_key() -> &'static PaillierKeypair {
        static KEY: OnceLock<PaillierKeypair> = OnceLock::new();
        KEY.get_or_init(|| PaillierKeypair::generate(1, PaillierProfile::fast_test(), &mut OsRng).unwrap())
    }

    #[test]
    fn profile_gating() {
        assert_eq!(
            PaillierProfile { bits: 1024, allow_unsafe: false }.validate(),
            Err(PaillierError::UnsafeProfile)
        );
        assert_eq!(
            PaillierProfile { bits: 1536, allow_unsafe: true }.validate(),
            Err(PaillierError::UnsupportedBits(1536))
        );
        assert!(PaillierProfile::default().validate().is_ok());
    }

    #[test]
    fn primality_matches_known_values() {
        let mut rng = OsRng;
        // 2^127 - 1 is a Mersenne prime, 2^128 + 1 is not prime.
        let m127 = (BigUint::one() << 127) - BigUint::one();
        assert!(is_probable_prime(&m127, 64, &mut rng));
        let f = (BigUint::one() << 128) + BigUint::one();
        assert!(!is_probable_prime(&f, 64, &mut rng));
        // Carmichael number 561.
        assert!(!is_probable_prime(&BigUint::from(561u32), 64, &mut rng));
        assert!(is_probable_prime(&BigUint::from(4099u32), 64, &mut rng));
    }

    #[test]
    fn fast_profile_roundtrip() {
        let key = fast_key();
        assert_eq!(key.public().bits(), 1024);
        for _ in 0..100 {
            let m = OsRng.gen_biguint_below(key.public().n());
            let ct = key.encrypt(&m, &mut OsRng).unwrap();
            assert_eq!(key.decrypt(&ct).unwrap(), m);
        }
    }

    #[test]
    fn production_profile_roundtrip() {
        let key = PaillierKeypair::generate(7, PaillierProfile::default(), &mut OsRng).unwrap();
        assert_eq!(key.public().bits(), 2048);
        for _ in 0..100 {
            let m = OsRng.gen_biguint_below(key.public().n());
            let ct = key.encrypt(&m, &mut OsRng).unwrap();
            assert_eq!(key.decrypt(&ct).unwrap(), m);
        }
    }

    #[test]
    fn successive_keys_differ() {
        let a = PaillierKeypair::generate(1, PaillierProfile::fast_test(), &mut OsRng).unwrap();
        let b = PaillierKeypair::generate(1, PaillierProfile::fast_test(), &mut OsRng).unwrap();
        assert_ne!(a.public().n(), b.public().n());
    }

    #[test]
    fn homomorphic_addition_and_identity() {
        let key = fast_key();
        let pk = key.public();
        let two = pk.encrypt(&BigUint::from(2u32), &mut OsRng).unwrap();
        let three = pk.encrypt(&BigUint::from(3u32), &mut OsRng).unwrap();
        assert_eq!(key.decrypt(&pk.add(&two, &three).unwrap()).unwrap(), BigUint::from(5u32));

        let m = OsRng.gen_biguint_below(pk.n());
        let zero = pk.encrypt(&BigUint::zero(), &mut OsRng).unwrap();
        let ct = pk.encrypt(&m, &mut OsRng).unwrap();
        assert_eq!(key.decrypt(&pk.add(&zero, &ct).unwrap()).unwrap(), m);
    }

    #[test]
    fn scalar_multiplication_matches_bigint_oracle() {
        let key = fast_key();
        let pk = key.public();
        for _ in 0..100 {
            let a = OsRng.gen_biguint_below(pk.n());
            let k = OsRng.gen_biguint(256);
            let ct = pk.mul_plain(&pk.encrypt(&a, &mut OsRng).unwrap(), &k).unwrap();
            assert_eq!(key.decrypt(&ct).unwrap(), (&a * &k) % pk.n());
        }
    }

    #[test]
    fn sums_below_half_modulus_do_not_wrap() {
        let key = fast_key();
        let pk = key.public();
        let half = pk.n() >> 1;
        for _ in 0..20 {
            let a = OsRng.gen_biguint_below(&half);
            let b = OsRng.gen_biguint_below(&half);
            let ct = pk
                .add(&pk.encrypt(&a, &mut OsRng).unwrap(), &pk.encrypt(&b, &mut OsRng).unwrap())
                .unwrap();
            assert_eq!(key.decrypt(&ct).unwrap(), &a + &b);
        }
    }

    #[test]
    fn encryption_is_randomized() {
        let pk = fast_key().public();
        let m = BigUint::from(42u32);
        assert_ne!(pk.encrypt(&m, &mut OsRng).unwrap(), pk.encrypt(&m, &mut OsRng).unwrap());
    }

    #[test]
    fn mixed_keys_rejected() {
        let a = fast_key();
        let other = PaillierPublicKey::from_modulus(2, a.public().n().clone());
        let ct_a = a.encrypt(&BigUint::one(), &mut OsRng).unwrap();
        let ct_b = other.encrypt(&BigUint::one(), &mut OsRng).unwrap();
        assert_eq!(a.public().add(&ct_a, &ct_b), Err(PaillierError::MixedKeys(1, 2)));
        assert_eq!(other.mul_plain(&ct_a, &BigUint::one()), Err(PaillierError::MixedKeys(2, 1)));
        assert!(a.decrypt(&ct_b).is_err());
    }

    #[test]
    fn wire_form_roundtrip() {
        let key = fast_key();
        let ct = key.encrypt(&BigUint::from(99u32), &mut OsRng).unwrap();
        let mut w = Writer::new();
        key.public().encode(&mut w);
        ct.encode(&mut w);
        key.encode_secret(&mut w);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        let pk = PaillierPublicKey::decode(&mut r).unwrap();
        assert_eq!(&pk, key.public());
        let back = PaillierCiphertext::decode(&mut r, &pk).unwrap();
        let sk = PaillierKeypair::decode_secret(&mut r).unwrap();
        assert_eq!(sk.decrypt(&back).unwrap(), BigUint::from(99u32));
    }
}
