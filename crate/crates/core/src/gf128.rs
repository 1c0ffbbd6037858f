//! GF(2^128) modulo x^128 + x^7 + x^2 + x + 1.
//!
//! Elements are `u128` in polynomial basis: bit `i` is the coefficient of x^i.

use std::ops::{Add, Mul};

const REDUCTION: u128 = 0x87;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Gf128(pub u128);

impl Gf128 {
    pub const ZERO: Gf128 = Gf128(0);
    pub const ONE: Gf128 = Gf128(1);

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Multiplicative inverse as a^(2^128 - 2); `None` for zero.
    pub fn inv(self) -> Option<Gf128> {
        if self.is_zero() {
            return None;
        }
        let mut power = self;
        let mut acc = Gf128::ONE;
        for _ in 1..128 {
            power = power * power;
            acc = acc * power;
        }
        Some(acc)
    }
}

impl Add for Gf128 {
    type Output = Gf128;

    fn add(self, rhs: Gf128) -> Gf128 {
        Gf128(self.0 ^ rhs.0)
    }
}

impl Mul for Gf128 {
    type Output = Gf128;

    fn mul(self, rhs: Gf128) -> Gf128 {
        let (mut a, mut b) = (self.0, rhs.0);
        let mut acc = 0u128;
        while b != 0 {
            if b & 1 == 1 {
                acc ^= a;
            }
            b >>= 1;
            let carry = a >> 127;
            a <<= 1;
            if carry == 1 {
                a ^= REDUCTION;
            }
        }
        Gf128(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Schoolbook carry-less product into 256 bits, then long division by the
    /// field polynomial.
    fn reference_mul(a: u128, b: u128) -> u128 {
        let mut wide = [0u128; 2]; // [low, high]
        for i in 0..128 {
            if (b >> i) & 1 == 1 {
                wide[0] ^= a << i;
                if i > 0 {
                    wide[1] ^= a >> (128 - i);
                }
            }
        }
        for bit in (128..256).rev() {
            if (wide[1] >> (bit - 128)) & 1 == 1 {
                // subtract x^(bit-128) * (x^128 + x^7 + x^2 + x + 1)
                wide[1] ^= 1u128 << (bit - 128);
                for t in [7u32, 2, 1, 0] {
                    let pos = bit - 128 + t as usize;
                    if pos >= 128 {
                        wide[1] ^= 1u128 << (pos - 128);
                    } else {
                        wide[0] ^= 1u128 << pos;
                    }
                }
            }
        }
        wide[0]
    }

    #[test]
    fn multiplication_matches_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (a, b): (u128, u128) = (rng.gen(), rng.gen());
            assert_eq!((Gf128(a) * Gf128(b)).0, reference_mul(a, b));
        }
        // x^127 * x = x^128 = x^7 + x^2 + x + 1
        assert_eq!((Gf128(1 << 127) * Gf128(2)).0, 0x87);
    }

    #[test]
    fn field_axioms() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let (a, b, c) = (Gf128(rng.gen()), Gf128(rng.gen()), Gf128(rng.gen()));
            assert_eq!((a * b) * c, a * (b * c));
            assert_eq!(a * b, b * a);
            assert_eq!(a * (b + c), a * b + a * c);
            assert_eq!(a * Gf128::ONE, a);
        }
    }

    #[test]
    fn inverses() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        assert_eq!(Gf128::ZERO.inv(), None);
        assert_eq!(Gf128::ONE.inv(), Some(Gf128::ONE));
        for _ in 0..200 {
            let a = Gf128(rng.gen::<u128>() | 1);
            assert_eq!(a * a.inv().unwrap(), Gf128::ONE);
        }
    }
}
