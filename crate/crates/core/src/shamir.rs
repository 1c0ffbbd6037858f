//! (t, m) Shamir sharing of κ-bit secrets over GF(2^128).
//!
//! A 256-bit secret is shared as two independent 128-bit components; share
//! `y` values concatenate the component evaluations in the same order.

use std::collections::HashSet;

use rand::{CryptoRng, Rng, RngCore};

use crate::bits::{BitString, Kappa};
use crate::error::{Error, Result};
use crate::gf128::Gf128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Share {
    pub x: u32,
    pub y: BitString,
}

impl Share {
    pub fn encoded_len(kappa: Kappa) -> usize {
        4 + kappa.bytes()
    }

    /// `x` (u32 LE) ‖ `y` (big-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.y.len_bytes());
        out.extend_from_slice(&self.x.to_le_bytes());
        out.extend_from_slice(self.y.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], kappa: Kappa) -> Result<Self> {
        if bytes.len() != Self::encoded_len(kappa) {
            return Err(Error::protocol(format!(
                "share is {} bytes, expected {}",
                bytes.len(),
                Self::encoded_len(kappa)
            )));
        }
        let x = u32::from_le_bytes(bytes[..4].try_into().unwrap());
        if x == 0 {
            return Err(Error::protocol("share index 0 is reserved for the secret"));
        }
        Ok(Share {
            x,
            y: BitString::from_bytes(&bytes[4..])?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThresholdPolicy {
    t: u32,
    m: u32,
}

impl ThresholdPolicy {
    pub fn new(t: u32, m: u32) -> Result<Self> {
        if t == 0 || t > m {
            return Err(Error::usage(format!("threshold must satisfy 1 <= t <= m, got t={t}, m={m}")));
        }
        Ok(ThresholdPolicy { t, m })
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn m(&self) -> u32 {
        self.m
    }
}

fn components(secret: &BitString) -> Result<Vec<Gf128>> {
    Kappa::from_bits(secret.len_bits() as u32)?;
    Ok(secret
        .as_bytes()
        .chunks_exact(16)
        .map(|c| Gf128(u128::from_be_bytes(c.try_into().unwrap())))
        .collect())
}

fn from_components(parts: &[Gf128]) -> BitString {
    let bytes: Vec<u8> = parts.iter().flat_map(|p| p.0.to_be_bytes()).collect();
    BitString::from_bytes(&bytes).expect("one or two 128-bit components")
}

/// Shares of `secret` at x = 1..=m on a random polynomial of degree t−1.
pub fn split<R: RngCore + CryptoRng + ?Sized>(
    secret: &BitString,
    t: u32,
    m: u32,
    rng: &mut R,
) -> Result<Vec<Share>> {
    ThresholdPolicy::new(t, m)?;
    let secret_parts = components(secret)?;
    // coefficients[c] = [a_0 = secret component, a_1, .., a_{t-1}]
    let coefficients: Vec<Vec<Gf128>> = secret_parts
        .iter()
        .map(|&a0| {
            std::iter::once(a0)
                .chain((1..t).map(|_| Gf128(rng.gen())))
                .collect()
        })
        .collect();

    Ok((1..=m)
        .map(|x| {
            let xf = Gf128(x as u128);
            let ys: Vec<Gf128> = coefficients
                .iter()
                .map(|coeffs| {
                    coeffs
                        .iter()
                        .rev()
                        .fold(Gf128::ZERO, |acc, &c| acc * xf + c)
                })
                .collect();
            Share {
                x,
                y: from_components(&ys),
            }
        })
        .collect())
}

/// Lagrange interpolation at zero over the first `t` shares by `x`.
pub fn reconstruct(shares: &[Share], t: u32) -> Result<BitString> {
    if t == 0 {
        return Err(Error::usage("threshold must be at least 1"));
    }
    if shares.len() < t as usize {
        return Err(Error::InsufficientShares {
            needed: t as usize,
            got: shares.len(),
        });
    }
    let mut seen = HashSet::with_capacity(shares.len());
    for share in shares {
        if share.x == 0 {
            return Err(Error::usage("share index 0 is reserved for the secret"));
        }
        if !seen.insert(share.x) {
            return Err(Error::usage(format!("duplicate share index {}", share.x)));
        }
        if share.y.len_bytes() != shares[0].y.len_bytes() {
            return Err(Error::LengthMismatch {
                expected: shares[0].y.len_bits(),
                actual: share.y.len_bits(),
            });
        }
    }
    let mut chosen: Vec<&Share> = shares.iter().collect();
    chosen.sort_by_key(|s| s.x);
    chosen.truncate(t as usize);

    let xs: Vec<Gf128> = chosen.iter().map(|s| Gf128(s.x as u128)).collect();
    let ys: Vec<Vec<Gf128>> = chosen
        .iter()
        .map(|s| components(&s.y))
        .collect::<Result<_>>()?;
    let width = ys[0].len();
    let mut acc = vec![Gf128::ZERO; width];
    for (i, xi) in xs.iter().enumerate() {
        let mut num = Gf128::ONE;
        let mut den = Gf128::ONE;
        for (j, xj) in xs.iter().enumerate() {
            if i != j {
                num = num * *xj;
                den = den * (*xj + *xi);
            }
        }
        let basis = num * den.inv().expect("distinct indices give a nonzero denominator");
        for (a, y) in acc.iter_mut().zip(&ys[i]) {
            *a = *a + basis * *y;
        }
    }
    Ok(from_components(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::SessionRng;
    use rand::SeedableRng;

    fn subsets(m: u32, t: u32) -> Vec<Vec<u32>> {
        fn go(start: u32, m: u32, t: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if cur.len() == t as usize {
                out.push(cur.clone());
                return;
            }
            for x in start..=m {
                cur.push(x);
                go(x + 1, m, t, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        go(1, m, t, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn constant_polynomial_when_t_is_one() {
        let mut rng = SessionRng::seed_from_u64(1);
        let secret = BitString::random(&mut rng, 32).unwrap();
        for share in split(&secret, 1, 5, &mut rng).unwrap() {
            assert_eq!(share.y, secret);
        }
    }

    #[test]
    fn every_subset_of_eight_reconstructs() {
        let mut rng = SessionRng::seed_from_u64(2);
        let secret = BitString::random(&mut rng, 16).unwrap();
        let shares = split(&secret, 3, 8, &mut rng).unwrap();
        let all = subsets(8, 3);
        assert_eq!(all.len(), 56);
        for subset in all {
            let picked: Vec<Share> = subset.iter().map(|&x| shares[x as usize - 1]).collect();
            assert_eq!(reconstruct(&picked, 3).unwrap(), secret);
        }
    }

    #[test]
    fn exhaustive_small_round_trip() {
        let mut rng = SessionRng::seed_from_u64(3);
        for kappa in [Kappa::K128, Kappa::K256] {
            for m in 1..=6u32 {
                for t in 1..=m {
                    let secret = BitString::random(&mut rng, kappa.bytes()).unwrap();
                    let shares = split(&secret, t, m, &mut rng).unwrap();
                    for subset in subsets(m, t) {
                        let picked: Vec<Share> =
                            subset.iter().map(|&x| shares[x as usize - 1]).collect();
                        assert_eq!(reconstruct(&picked, t).unwrap(), secret);
                    }
                }
            }
        }
    }

    #[test]
    fn too_few_shares() {
        let mut rng = SessionRng::seed_from_u64(4);
        let secret = BitString::random(&mut rng, 16).unwrap();
        let shares = split(&secret, 4, 6, &mut rng).unwrap();
        assert!(matches!(
            reconstruct(&shares[..3], 4),
            Err(Error::InsufficientShares { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn duplicate_index_rejected() {
        let mut rng = SessionRng::seed_from_u64(5);
        let secret = BitString::random(&mut rng, 16).unwrap();
        let shares = split(&secret, 2, 3, &mut rng).unwrap();
        let dup = vec![shares[0], shares[0], shares[1]];
        assert!(matches!(reconstruct(&dup, 2), Err(Error::Usage(_))));
    }

    #[test]
    fn bad_policy() {
        let mut rng = SessionRng::seed_from_u64(6);
        let secret = BitString::random(&mut rng, 16).unwrap();
        assert!(split(&secret, 0, 3, &mut rng).is_err());
        assert!(split(&secret, 4, 3, &mut rng).is_err());
        assert!(ThresholdPolicy::new(3, 3).is_ok());
    }

    #[test]
    fn corrupted_share_changes_output() {
        let mut rng = SessionRng::seed_from_u64(7);
        for _ in 0..100 {
            let secret = BitString::random(&mut rng, 32).unwrap();
            let mut shares = split(&secret, 3, 5, &mut rng).unwrap();
            let victim = (rng.next_u32() % 3) as usize;
            let noise = BitString::random(&mut rng, 32).unwrap();
            shares[victim].y = shares[victim].y.xor(&noise).unwrap();
            assert_ne!(reconstruct(&shares[..3], 3).unwrap(), secret);
        }
    }

    #[test]
    fn uses_lowest_indices_only() {
        let mut rng = SessionRng::seed_from_u64(8);
        let secret = BitString::random(&mut rng, 16).unwrap();
        let mut shares = split(&secret, 2, 4, &mut rng).unwrap();
        // garbage in the highest share is ignored when t lower ones exist
        shares[3].y = BitString::random(&mut rng, 16).unwrap();
        shares.reverse();
        assert_eq!(reconstruct(&shares, 2).unwrap(), secret);
    }

    #[test]
    fn share_encoding_sizes() {
        let mut rng = SessionRng::seed_from_u64(9);
        for (kappa, size) in [(Kappa::K128, 20), (Kappa::K256, 36)] {
            let secret = BitString::random(&mut rng, kappa.bytes()).unwrap();
            let share = split(&secret, 2, 3, &mut rng).unwrap()[1];
            let bytes = share.to_bytes();
            assert_eq!(bytes.len(), size);
            assert_eq!(&bytes[..4], &2u32.to_le_bytes());
            assert_eq!(Share::from_bytes(&bytes, kappa).unwrap(), share);
        }
    }
}
