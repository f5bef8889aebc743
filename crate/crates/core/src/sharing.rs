//! Shamir sharing over the P-256 scalar field with Feldman commitments,
//! Lagrange reconstruction at zero, and conversion of a qualifying subset of
//! shares into additive shares.

use std::collections::BTreeSet;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;
use zeroize::Zeroize;

use crate::ec::{GroupPoint, Scalar};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::PartyIndex;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SharingError {
    #[error("invalid threshold parameters t={t}, n={n}")]
    Parameters { t: u16, n: u16 },
    #[error("need at least {needed} shares, got {got}")]
    InsufficientShares { needed: usize, got: usize },
    #[error("duplicate party index {0}")]
    DuplicateIndex(PartyIndex),
    #[error("party index {0} not in the subset")]
    NotInSubset(PartyIndex),
    #[error("party index 0 is reserved for the secret")]
    ZeroIndex,
    #[error("subset must contain at least two parties")]
    DegenerateSubset,
    #[error("shares belong to different sharings")]
    MixedSharings,
    #[error("share of party {0} does not match the commitment")]
    InvalidShare(PartyIndex),
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShamirShare {
    pub key_uuid: Uuid,
    pub party_index: PartyIndex,
    pub threshold: u16,
    pub value: Scalar,
}

impl std::fmt::Debug for ShamirShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShamirShare")
            .field("key_uuid", &self.key_uuid)
            .field("party_index", &self.party_index)
            .field("threshold", &self.threshold)
            .finish_non_exhaustive()
    }
}

impl Zeroize for ShamirShare {
    fn zeroize(&mut self) {
        self.value.zeroize();
    }
}

impl ShamirShare {
    /// `(key_uuid, party_index: u16, t: u16, scalar bytes)`
    pub fn encode(&self, w: &mut Writer) {
        w.uuid(&self.key_uuid).u16(self.party_index).u16(self.threshold).scalar(&self.value);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ShamirShare {
            key_uuid: r.uuid()?,
            party_index: r.u16()?,
            threshold: r.u16()?,
            value: r.scalar()?,
        })
    }
}

/// Feldman commitment `[a₀·G, …, a_{t−1}·G]` to a sharing polynomial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeldmanCommitment {
    pub coefficients: Vec<GroupPoint>,
}

impl FeldmanCommitment {
    pub fn threshold(&self) -> usize {
        self.coefficients.len()
    }

    /// The committed constant term `a₀·G`.
    pub fn public_key(&self) -> GroupPoint {
        self.coefficients.first().copied().unwrap_or_default()
    }

    /// `Σ_j i^j · C_j`, the commitment to `f(i)`.
    pub fn evaluate(&self, index: PartyIndex) -> GroupPoint {
        let x = Scalar::from_u64(index as u64);
        // Horner over points: ((C_{t-1}·x + C_{t-2})·x + …) + C_0
        self.coefficients
            .iter()
            .rev()
            .fold(GroupPoint::identity(), |acc, c| acc * x + *c)
    }

    pub fn verify(&self, index: PartyIndex, value: &Scalar) -> bool {
        GroupPoint::mul_base(value) == self.evaluate(index)
    }

    pub fn verify_share(&self, share: &ShamirShare) -> bool {
        self.verify(share.party_index, &share.value)
    }

    /// Pointwise sum; commits to the sum of the underlying polynomials.
    pub fn combine<'a, I: IntoIterator<Item = &'a FeldmanCommitment>>(commitments: I) -> FeldmanCommitment {
        let mut out: Vec<GroupPoint> = Vec::new();
        for c in commitments {
            if out.len() < c.coefficients.len() {
                out.resize(c.coefficients.len(), GroupPoint::identity());
            }
            for (acc, p) in out.iter_mut().zip(&c.coefficients) {
                *acc += *p;
            }
        }
        FeldmanCommitment { coefficients: out }
    }

    pub fn encode(&self, w: &mut Writer) {
        w.points(&self.coefficients);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(FeldmanCommitment {
            coefficients: r.points()?,
        })
    }
}

/// A random polynomial of degree `t − 1`.
pub struct Polynomial {
    coefficients: Vec<Scalar>,
}

impl Polynomial {
    pub fn random<R: RngCore + CryptoRng>(constant: Scalar, t: u16, rng: &mut R) -> Self {
        let mut coefficients = Vec::with_capacity(t as usize);
        coefficients.push(constant);
        coefficients.extend((1..t).map(|_| Scalar::random(rng)));
        Polynomial { coefficients }
    }

    pub fn evaluate(&self, index: PartyIndex) -> Scalar {
        let x = Scalar::from_u64(index as u64);
        self.coefficients.iter().rev().fold(Scalar::ZERO, |acc, c| acc * x + *c)
    }

    pub fn commit(&self) -> FeldmanCommitment {
        FeldmanCommitment {
            coefficients: self.coefficients.iter().map(GroupPoint::mul_base).collect(),
        }
    }

    pub fn constant(&self) -> Scalar {
        self.coefficients[0]
    }
}

impl Drop for Polynomial {
    fn drop(&mut self) {
        self.coefficients.zeroize();
    }
}

pub fn check_params(t: u16, n: u16) -> Result<(), SharingError> {
    if t < 2 || t > n {
        return Err(SharingError::Parameters { t, n });
    }
    Ok(())
}

/// Splits `secret` into `n` shares at indices `1..=n`, any `t` of which reconstruct it.
pub fn shamir_split<R: RngCore + CryptoRng>(
    secret: Scalar,
    t: u16,
    n: u16,
    key_uuid: Uuid,
    rng: &mut R,
) -> Result<(Vec<ShamirShare>, FeldmanCommitment), SharingError> {
    check_params(t, n)?;
    let poly = Polynomial::random(secret, t, rng);
    let shares = (1..=n)
        .map(|i| ShamirShare {
            key_uuid,
            party_index: i,
            threshold: t,
            value: poly.evaluate(i),
        })
        .collect();
    Ok((shares, poly.commit()))
}

fn distinct_indices(indices: &[PartyIndex]) -> Result<(), SharingError> {
    let mut seen = BTreeSet::new();
    for &i in indices {
        if i == 0 {
            return Err(SharingError::ZeroIndex);
        }
        if !seen.insert(i) {
            return Err(SharingError::DuplicateIndex(i));
        }
    }
    Ok(())
}

/// `λ_{S,i} = Π_{j∈S, j≠i} j / (j − i)`, the weight of `f(i)` in `f(0)`.
pub fn lagrange_coefficient(subset: &[PartyIndex], i: PartyIndex) -> Result<Scalar, SharingError> {
    distinct_indices(subset)?;
    if subset.len() < 2 {
        return Err(SharingError::DegenerateSubset);
    }
    if !subset.contains(&i) {
        return Err(SharingError::NotInSubset(i));
    }
    let xi = Scalar::from_u64(i as u64);
    let mut num = Scalar::ONE;
    let mut den = Scalar::ONE;
    for &j in subset.iter().filter(|&&j| j != i) {
        let xj = Scalar::from_u64(j as u64);
        num = num * xj;
        den = den * (xj - xi);
    }
    Ok(num * den.invert().expect("distinct indices give a nonzero denominator"))
}

/// Interpolates `f(0)` from at least `t` shares of one sharing.
pub fn shamir_reconstruct(shares: &[ShamirShare]) -> Result<Scalar, SharingError> {
    let first = shares.first().ok_or(SharingError::InsufficientShares { needed: 2, got: 0 })?;
    let t = first.threshold as usize;
    if shares.iter().any(|s| s.key_uuid != first.key_uuid || s.threshold != first.threshold) {
        return Err(SharingError::MixedSharings);
    }
    if shares.len() < t {
        return Err(SharingError::InsufficientShares {
            needed: t,
            got: shares.len(),
        });
    }
    let indices: Vec<PartyIndex> = shares.iter().map(|s| s.party_index).collect();
    distinct_indices(&indices)?;
    let mut acc = Scalar::ZERO;
    for s in shares {
        acc += lagrange_coefficient(&indices, s.party_index)? * s.value;
    }
    Ok(acc)
}

/// `w_i = λ_{S,i} · f(i)`; summing over `S` yields `f(0)`.
pub fn to_additive(share: &ShamirShare, subset: &[PartyIndex]) -> Result<Scalar, SharingError> {
    if subset.len() < share.threshold as usize {
        return Err(SharingError::InsufficientShares {
            needed: share.threshold as usize,
            got: subset.len(),
        });
    }
    Ok(lagrange_coefficient(subset, share.party_index)? * share.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools_free::combinations;
    use proptest::prelude::*;
    use rand::rngs::OsRng;

    /// Small local combination helper so the oracle does not depend on the code under test.
    mod itertools_free {
        pub fn combinations(n: u16, k: usize) -> Vec<Vec<u16>> {
            fn rec(start: u16, n: u16, k: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
                if cur.len() == k {
                    out.push(cur.clone());
                    return;
                }
                for i in start..=n {
                    cur.push(i);
                    rec(i + 1, n, k, cur, out);
                    cur.pop();
                }
            }
            let mut out = Vec::new();
            rec(1, n, k, &mut Vec::new(), &mut out);
            out
        }
    }

    fn pick(shares: &[ShamirShare], subset: &[u16]) -> Vec<ShamirShare> {
        subset.iter().map(|&i| shares[(i - 1) as usize].clone()).collect()
    }

    #[test]
    fn two_of_three_all_pairs() {
        let s = Scalar::random(&mut OsRng);
        let (shares, commitment) = shamir_split(s, 2, 3, Uuid::new_v4(), &mut OsRng).unwrap();
        for pair in combinations(3, 2) {
            assert_eq!(shamir_reconstruct(&pick(&shares, &pair)).unwrap(), s);
        }
        assert!(shares.iter().all(|sh| commitment.verify_share(sh)));
        assert_eq!(commitment.public_key(), GroupPoint::mul_base(&s));
    }

    #[test]
    fn two_of_two_needs_both() {
        let s = Scalar::random(&mut OsRng);
        let (shares, commitment) = shamir_split(s, 2, 2, Uuid::new_v4(), &mut OsRng).unwrap();
        assert_eq!(shamir_reconstruct(&shares).unwrap(), s);
        assert!(matches!(
            shamir_reconstruct(&shares[..1]),
            Err(SharingError::InsufficientShares { needed: 2, got: 1 })
        ));
        // A guessed second share does not pass verification.
        let mut guess = shares[1].clone();
        guess.value = Scalar::random(&mut OsRng);
        assert!(!commitment.verify_share(&guess));
    }

    #[test]
    fn three_of_five_every_subset() {
        let s = Scalar::random(&mut OsRng);
        let (shares, _) = shamir_split(s, 3, 5, Uuid::new_v4(), &mut OsRng).unwrap();
        let subsets = combinations(5, 3);
        assert_eq!(subsets.len(), 10);
        for subset in subsets {
            assert_eq!(shamir_reconstruct(&pick(&shares, &subset)).unwrap(), s);
        }
        assert_eq!(
            shamir_reconstruct(&pick(&shares, &[2, 4, 5])).unwrap(),
            shamir_reconstruct(&pick(&shares, &[1, 2, 3])).unwrap()
        );
    }

    #[test]
    fn zero_secret_reconstructs_zero() {
        let (shares, _) = shamir_split(Scalar::ZERO, 2, 3, Uuid::new_v4(), &mut OsRng).unwrap();
        assert_eq!(shamir_reconstruct(&shares[1..]).unwrap(), Scalar::ZERO);
        let subset = [1, 2, 3];
        let sum: Scalar = shares.iter().map(|s| to_additive(s, &subset).unwrap()).sum();
        assert_eq!(sum, Scalar::ZERO);
    }

    #[test]
    fn parameter_errors() {
        let id = Uuid::new_v4();
        assert!(matches!(shamir_split(Scalar::ONE, 4, 3, id, &mut OsRng), Err(SharingError::Parameters { .. })));
        assert!(matches!(shamir_split(Scalar::ONE, 1, 3, id, &mut OsRng), Err(SharingError::Parameters { .. })));
        let (shares, _) = shamir_split(Scalar::ONE, 2, 3, id, &mut OsRng).unwrap();
        let dup = vec![shares[0].clone(), shares[0].clone()];
        assert_eq!(shamir_reconstruct(&dup), Err(SharingError::DuplicateIndex(1)));
        assert_eq!(lagrange_coefficient(&[1], 1), Err(SharingError::DegenerateSubset));
        assert_eq!(lagrange_coefficient(&[1, 2], 3), Err(SharingError::NotInSubset(3)));
        assert_eq!(to_additive(&shares[2], &[1, 2]), Err(SharingError::NotInSubset(3)));
    }

    #[test]
    fn lagrange_one_two() {
        assert_eq!(lagrange_coefficient(&[1, 2], 1).unwrap(), Scalar::from_u64(2));
        assert_eq!(lagrange_coefficient(&[1, 2], 2).unwrap(), -Scalar::ONE);
    }

    #[test]
    fn lagrange_weights_recover_constant_term() {
        // Oracle: evaluate random polynomials directly at the subset indices.
        let subset = [1u16, 3, 4];
        for _ in 0..100 {
            let coeffs: Vec<Scalar> = (0..3).map(|_| Scalar::random(&mut OsRng)).collect();
            let eval = |x: u16| {
                let x = Scalar::from_u64(x as u64);
                coeffs[0] + coeffs[1] * x + coeffs[2] * x * x
            };
            let sum: Scalar = subset
                .iter()
                .map(|&i| lagrange_coefficient(&subset, i).unwrap() * eval(i))
                .sum();
            assert_eq!(sum, coeffs[0]);
        }
    }

    #[test]
    fn additive_shares_sum_to_secret_exhaustively() {
        for n in 2..=5u16 {
            for t in 2..=n {
                let s = Scalar::random(&mut OsRng);
                let (shares, _) = shamir_split(s, t, n, Uuid::new_v4(), &mut OsRng).unwrap();
                for k in t as usize..=n as usize {
                    for subset in combinations(n, k) {
                        let sum: Scalar = subset
                            .iter()
                            .map(|&i| to_additive(&shares[(i - 1) as usize], &subset).unwrap())
                            .sum();
                        assert_eq!(sum, s, "t={t} n={n} subset={subset:?}");
                        assert_eq!(shamir_reconstruct(&pick(&shares, &subset)).unwrap(), sum);
                    }
                }
            }
        }
    }

    #[test]
    fn tampered_share_detected() {
        let (mut shares, commitment) = shamir_split(Scalar::random(&mut OsRng), 3, 5, Uuid::new_v4(), &mut OsRng).unwrap();
        shares[3].value += Scalar::ONE;
        assert!(!commitment.verify_share(&shares[3]));
        assert!(commitment.verify_share(&shares[2]));
    }

    #[test]
    fn pointwise_addition_is_a_sharing_of_the_sum() {
        let id = Uuid::new_v4();
        let (r1, r2) = (Scalar::random(&mut OsRng), Scalar::random(&mut OsRng));
        let (a, ca) = shamir_split(r1, 2, 3, id, &mut OsRng).unwrap();
        let (b, cb) = shamir_split(r2, 2, 3, id, &mut OsRng).unwrap();
        let combined = FeldmanCommitment::combine([&ca, &cb]);
        let sum: Vec<ShamirShare> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| ShamirShare { value: x.value + y.value, ..x.clone() })
            .collect();
        assert!(sum.iter().all(|s| combined.verify_share(s)));
        assert_eq!(shamir_reconstruct(&sum[..2]).unwrap(), r1 + r2);
        assert_eq!(combined.public_key(), GroupPoint::mul_base(&(r1 + r2)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn every_share_verifies(t in 2u16..6, extra in 0u16..4, seed in any::<u64>()) {
            let n = t + extra;
            let s = Scalar::from_u64(seed);
            let (shares, commitment) = shamir_split(s, t, n, Uuid::new_v4(), &mut OsRng).unwrap();
            prop_assert_eq!(commitment.threshold(), t as usize);
            for sh in &shares {
                prop_assert!(commitment.verify_share(sh));
            }
            prop_assert_eq!(shamir_reconstruct(&shares[(n - t) as usize..]).unwrap(), s);
        }
    }
}
