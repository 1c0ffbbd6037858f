//! Fixed-length bit strings and the security parameters that size them.

use std::fmt;

use rand::{CryptoRng, RngCore};

use crate::error::{Error, Result};

const MAX_BYTES: usize = 64;

/// Computational security parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kappa {
    K128,
    K256,
}

impl Kappa {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            128 => Ok(Kappa::K128),
            256 => Ok(Kappa::K256),
            other => Err(Error::usage(format!("kappa must be 128 or 256, got {other}"))),
        }
    }

    pub const fn bits(self) -> usize {
        match self {
            Kappa::K128 => 128,
            Kappa::K256 => 256,
        }
    }

    pub const fn bytes(self) -> usize {
        self.bits() / 8
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Pair of computational (`kappa`) and statistical (`lambda`) security levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SecurityParams {
    pub kappa: Kappa,
    pub lambda: u32,
}

impl SecurityParams {
    pub const K128_L40: SecurityParams = SecurityParams {
        kappa: Kappa::K128,
        lambda: 40,
    };
    pub const K256_L80: SecurityParams = SecurityParams {
        kappa: Kappa::K256,
        lambda: 80,
    };

    pub fn new(kappa_bits: u32, lambda: u32) -> Result<Self> {
        match (kappa_bits, lambda) {
            (128, 40) => Ok(Self::K128_L40),
            (256, 80) => Ok(Self::K256_L80),
            _ => Err(Error::usage(format!(
                "unsupported security parameters (kappa={kappa_bits}, lambda={lambda}); \
                 expected (128, 40) or (256, 80)"
            ))),
        }
    }
}

/// A bit string of 128, 256 or 512 bits, stored big-endian.
///
/// Bytes past the logical length are always zero, so the derived equality and
/// hashing only ever see the meaningful prefix.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitString {
    len: u8,
    buf: [u8; MAX_BYTES],
}

impl BitString {
    fn check_len(len_bytes: usize) -> Result<()> {
        match len_bytes {
            16 | 32 | 64 => Ok(()),
            other => Err(Error::usage(format!(
                "bit strings are 128, 256 or 512 bits long, got {} bits",
                other * 8
            ))),
        }
    }

    pub fn zero(len_bytes: usize) -> Result<Self> {
        Self::check_len(len_bytes)?;
        Ok(BitString {
            len: len_bytes as u8,
            buf: [0; MAX_BYTES],
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut out = Self::zero(bytes.len())?;
        out.buf[..bytes.len()].copy_from_slice(bytes);
        Ok(out)
    }

    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, len_bytes: usize) -> Result<Self> {
        let mut out = Self::zero(len_bytes)?;
        rng.try_fill_bytes(&mut out.buf[..len_bytes])
            .map_err(|e| Error::Entropy(e.to_string()))?;
        Ok(out)
    }

    /// Uniform κ-bit string.
    pub(crate) fn random_kappa<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, kappa: Kappa) -> Self {
        let mut out = BitString {
            len: kappa.bytes() as u8,
            buf: [0; MAX_BYTES],
        };
        rng.fill_bytes(&mut out.buf[..kappa.bytes()]);
        out
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf[..self.len as usize]
    }

    pub(crate) fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.buf[..self.len as usize]
    }

    pub fn len_bytes(&self) -> usize {
        self.len as usize
    }

    pub fn len_bits(&self) -> usize {
        self.len as usize * 8
    }

    pub fn is_zero(&self) -> bool {
        self.as_bytes().iter().all(|&b| b == 0)
    }

    pub fn to_hex(&self) -> String {
        self.as_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn xor(&self, other: &BitString) -> Result<BitString> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                expected: self.len_bits(),
                actual: other.len_bits(),
            });
        }
        let mut out = *self;
        out.xor_in(other);
        Ok(out)
    }

    /// In-place XOR for callers that already guarantee equal lengths.
    pub(crate) fn xor_in(&mut self, other: &BitString) {
        assert_eq!(self.len, other.len, "xor of bit strings with different lengths");
        for (a, b) in self.buf[..self.len as usize].iter_mut().zip(other.as_bytes()) {
            *a ^= *b;
        }
    }

    /// `self ‖ other`.
    pub fn concat(&self, other: &BitString) -> Result<BitString> {
        let total = self.len_bytes() + other.len_bytes();
        let mut out = Self::zero(total)?;
        out.buf[..self.len_bytes()].copy_from_slice(self.as_bytes());
        out.buf[self.len_bytes()..total].copy_from_slice(other.as_bytes());
        Ok(out)
    }

    /// Splits a 2κ-bit string into its two κ-bit halves.
    pub fn split_halves(&self) -> Result<(BitString, BitString)> {
        let half = self.len_bytes() / 2;
        let hi = Self::from_bytes(&self.as_bytes()[..half])?;
        let lo = Self::from_bytes(&self.as_bytes()[half..])?;
        Ok((hi, lo))
    }
}

impl PartialOrd for BitString {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Shorter strings sort first; equal lengths compare as big-endian integers.
impl Ord for BitString {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.len
            .cmp(&other.len)
            .then_with(|| self.as_bytes().cmp(other.as_bytes()))
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({})", self.to_hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn bits(len: usize) -> impl Strategy<Value = BitString> {
        proptest::collection::vec(any::<u8>(), len).prop_map(|v| BitString::from_bytes(&v).unwrap())
    }

    #[test]
    fn xor_with_self_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = BitString::random(&mut rng, 16).unwrap();
        assert!(x.xor(&x).unwrap().is_zero());
        assert_eq!(x.xor(&BitString::zero(16).unwrap()).unwrap(), x);
    }

    #[test]
    fn xor_length_mismatch() {
        let a = BitString::zero(16).unwrap();
        let b = BitString::zero(32).unwrap();
        assert!(matches!(a.xor(&b), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rejects_odd_lengths() {
        assert!(BitString::from_bytes(&[0u8; 12]).is_err());
        assert!(BitString::zero(0).is_err());
    }

    #[test]
    fn fold_xor_matches_running_xor() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let shares: Vec<_> = (0..17).map(|_| BitString::random(&mut rng, 32).unwrap()).collect();
        let folded = shares
            .iter()
            .fold(BitString::zero(32).unwrap(), |acc, s| acc.xor(s).unwrap());
        let mut running = [0u8; 32];
        for s in &shares {
            for (r, b) in running.iter_mut().zip(s.as_bytes()) {
                *r ^= b;
            }
        }
        assert_eq!(folded.as_bytes(), &running);
    }

    #[test]
    fn concat_and_split() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = BitString::random(&mut rng, 32).unwrap();
        let b = BitString::random(&mut rng, 32).unwrap();
        let ab = a.concat(&b).unwrap();
        assert_eq!(ab.len_bits(), 512);
        assert_eq!(ab.split_halves().unwrap(), (a, b));
    }

    #[test]
    fn ordering_is_big_endian_numeric() {
        let mut lo = [0u8; 16];
        lo[15] = 0xff;
        let mut hi = [0u8; 16];
        hi[0] = 0x01;
        assert!(BitString::from_bytes(&lo).unwrap() < BitString::from_bytes(&hi).unwrap());
    }

    #[test]
    fn security_params_pairs() {
        assert!(SecurityParams::new(128, 40).is_ok());
        assert!(SecurityParams::new(256, 80).is_ok());
        assert!(SecurityParams::new(128, 80).is_err());
        assert!(Kappa::from_bits(192).is_err());
    }

    proptest! {
        #[test]
        fn xor_is_abelian_of_exponent_two(a in bits(32), b in bits(32), c in bits(32)) {
            prop_assert_eq!(a.xor(&b).unwrap(), b.xor(&a).unwrap());
            prop_assert_eq!(
                a.xor(&b).unwrap().xor(&c).unwrap(),
                a.xor(&b.xor(&c).unwrap()).unwrap()
            );
            prop_assert_eq!(a.xor(&b).unwrap().xor(&b).unwrap(), a);
        }
    }
}
