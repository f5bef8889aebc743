//! Multiplicative-to-additive share conversion over Paillier.
//!
//! The initiator holds `a` and publishes `Enc_A(a)`. A responder holding `b`
//! returns `Enc_A(a·b + β′)` and keeps `β = −β′ mod q`. The initiator's
//! decryption `α` then satisfies `α + β ≡ a·b (mod q)`.

use std::sync::OnceLock;

use num_bigint::{BigUint, RandBigInt};
use num_traits::One;
use rand::{CryptoRng, RngCore};

use crate::ec::Scalar;
use crate::paillier::{PaillierCiphertext, PaillierError, PaillierKeypair, PaillierPublicKey};

/// Order of the P-256 group.
pub fn curve_order() -> &'static BigUint {
    static Q: OnceLock<BigUint> = OnceLock::new();
    Q.get_or_init(|| {
        BigUint::parse_bytes(b"ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551", 16)
            .expect("valid constant")
    })
}

pub fn scalar_to_big(s: &Scalar) -> BigUint {
    BigUint::from_bytes_be(&s.to_bytes())
}

pub fn big_to_scalar(v: &BigUint) -> Scalar {
    let reduced = v % curve_order();
    let bytes = reduced.to_bytes_be();
    let mut buf = [0u8; 32];
    buf[32 - bytes.len()..].copy_from_slice(&bytes);
    Scalar::from_bytes(&buf).expect("value reduced below the order")
}

/// Exclusive upper bound of the responder's additive mask.
///
/// `q⁵` when `N > q⁶`, which keeps `a·b + β′` below `N` with a wide statistical
/// margin. Smaller moduli fall back to `N/2`, which still cannot wrap.
pub fn mask_bound(n: &BigUint) -> BigUint {
    let q = curve_order();
    let q5 = q.pow(5);
    if n > &(&q5 * q) {
        q5
    } else {
        n >> 1
    }
}

pub struct MtaResponse {
    /// `Enc_A(a·b + β′)`, sent back to the initiator.
    pub ciphertext: PaillierCiphertext,
    /// Responder's additive share.
    pub beta: Scalar,
}

pub fn respond<R: RngCore + CryptoRng>(
    initiator: &PaillierPublicKey,
    enc_a: &PaillierCiphertext,
    b: &Scalar,
    rng: &mut R,
) -> Result<MtaResponse, PaillierError> {
    let beta_prime = rng.gen_biguint_below(&mask_bound(initiator.n()));
    let scaled = initiator.mul_plain(enc_a, &scalar_to_big(b))?;
    let masked = initiator.add(&scaled, &initiator.encrypt(&beta_prime, rng)?)?;
    Ok(MtaResponse {
        ciphertext: masked,
        beta: -big_to_scalar(&beta_prime),
    })
}

/// Initiator's additive share `α`.
pub fn finish(initiator: &PaillierKeypair, response: &PaillierCiphertext) -> Result<Scalar, PaillierError> {
    Ok(big_to_scalar(&initiator.decrypt(response)?))
}

/// True when the masked product can never wrap modulo `N`.
pub fn modulus_is_sufficient(n: &BigUint) -> bool {
    let q = curve_order();
    n > &(q * q + mask_bound(n) + BigUint::one())
}
