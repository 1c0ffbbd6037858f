//! Oblivious key-value store over GF(2) built from a random band matrix.
//!
//! Every key hashes to a row of the matrix: a start column and a `w`-bit band
//! pattern whose lowest bit is set. Encoding solves `M · table = values` by
//! on-the-fly banded elimination; columns left without a pivot are free and
//! are filled with uniform randomness, which is what makes decodes of absent
//! keys look uniform and hides the encoded key set when values are random.
//! Decoding XORs the table rows selected by the key's band.

use std::collections::HashSet;

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::bits::{BitString, Kappa, SecurityParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OKVS";
pub const VERSION: u8 = 1;
/// magic ‖ version ‖ kappa ‖ w ‖ m′
pub const HEADER_LEN: usize = 4 + 1 + 2 + 4 + 8;
pub const SEED_LEN: usize = 16;
/// Band patterns are held in a `u128`.
pub const MAX_BAND_WIDTH: u32 = 128;
pub const DEFAULT_MAX_RETRIES: u32 = 8;

/// Table expansion ε as a rational `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expansion {
    pub num: u64,
    pub den: u64,
}

/// ε = 0.1. At ε = 0.05 first-attempt failures reach ~4% at m = 2^12 and
/// most attempts fail from m = 2^16 on; at 0.1 none failed in 1000 trials at
/// m = 2^12 and the rate stays in the low percent up to m = 2^18.
pub const DEFAULT_EXPANSION: Expansion = Expansion { num: 1, den: 10 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OkvsParams {
    pub kappa: Kappa,
    /// Number of encoded pairs.
    pub m: usize,
    pub band_width: u32,
    /// Table length m′ = ⌈(1+ε)·m⌉ + w.
    pub table_rows: usize,
}

fn ceil_log2(m: usize) -> u32 {
    if m <= 1 {
        0
    } else {
        usize::BITS - (m - 1).leading_zeros()
    }
}

impl OkvsParams {
    pub fn new(m: usize, sec: SecurityParams) -> Result<Self> {
        Self::with_expansion(m, sec, DEFAULT_EXPANSION)
    }

    pub fn with_expansion(m: usize, sec: SecurityParams, eps: Expansion) -> Result<Self> {
        if eps.den == 0 || eps.num == 0 {
            return Err(Error::usage("OKVS expansion must be a positive rational"));
        }
        let band_width = sec.lambda + ceil_log2(m) + 8;
        if band_width > MAX_BAND_WIDTH {
            return Err(Error::usage(format!(
                "band width {band_width} exceeds the supported maximum of {MAX_BAND_WIDTH}"
            )));
        }
        let extra = (m as u128 * eps.num as u128).div_ceil(eps.den as u128) as usize;
        Ok(OkvsParams {
            kappa: sec.kappa,
            m,
            band_width,
            table_rows: m + extra + band_width as usize,
        })
    }

    pub fn value_bytes(&self) -> usize {
        2 * self.kappa.bytes()
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + SEED_LEN + self.table_rows * self.value_bytes()
    }
}

/// One row of the band matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BandRow {
    pub start: usize,
    /// Bit `j` selects column `start + j`; bit 0 is always set.
    pub pattern: u128,
}

fn band_row(seed: &[u8; SEED_LEN], key: &BitString, band_width: u32, table_rows: usize) -> BandRow {
    let digest = Sha256::new()
        .chain_update(seed)
        .chain_update(key.as_bytes())
        .finalize();
    let positions = (table_rows - band_width as usize + 1) as u64;
    let start = u64::from_le_bytes(digest[..8].try_into().unwrap()) % positions;
    let mask = if band_width == 128 {
        u128::MAX
    } else {
        (1u128 << band_width) - 1
    };
    let pattern = (u128::from_le_bytes(digest[8..24].try_into().unwrap()) & mask) | 1;
    BandRow {
        start: start as usize,
        pattern,
    }
}

/// Hash-to-band for `key` under the table seed.
pub fn band_map(seed: &[u8; SEED_LEN], key: &BitString, params: &OkvsParams) -> BandRow {
    band_row(seed, key, params.band_width, params.table_rows)
}

/// An encoded store: the seed that produced a solvable system plus the m′
/// solution rows.
#[derive(Clone, PartialEq, Eq)]
pub struct OkvsTable {
    kappa: Kappa,
    band_width: u32,
    seed: [u8; SEED_LEN],
    rows: Vec<BitString>,
}

impl std::fmt::Debug for OkvsTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OkvsTable")
            .field("kappa", &self.kappa)
            .field("band_width", &self.band_width)
            .field("rows", &self.rows.len())
            .finish()
    }
}

impl OkvsTable {
    pub fn kappa(&self) -> Kappa {
        self.kappa
    }

    pub fn band_width(&self) -> u32 {
        self.band_width
    }

    pub fn table_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn seed(&self) -> &[u8; SEED_LEN] {
        &self.seed
    }

    pub fn rows(&self) -> &[BitString] {
        &self.rows
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + SEED_LEN + self.rows.len() * 2 * self.kappa.bytes()
    }

    /// Decodes `key`. Keys that were never encoded yield pseudo-values.
    pub fn decode(&self, key: &BitString) -> Result<BitString> {
        if key.len_bits() != self.kappa.bits() {
            return Err(Error::LengthMismatch {
                expected: self.kappa.bits(),
                actual: key.len_bits(),
            });
        }
        let row = band_row(&self.seed, key, self.band_width, self.rows.len());
        let mut out = BitString::zero(2 * self.kappa.bytes())?;
        let mut pattern = row.pattern;
        while pattern != 0 {
            let j = pattern.trailing_zeros() as usize;
            out.xor_in(&self.rows[row.start + j]);
            pattern &= pattern - 1;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.kappa.bits() as u16).to_le_bytes());
        out.extend_from_slice(&self.band_width.to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed);
        for row in &self.rows {
            out.extend_from_slice(row.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + SEED_LEN {
            return Err(Error::protocol("OKVS table truncated"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::protocol("bad OKVS magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::protocol(format!("unsupported OKVS version {}", bytes[4])));
        }
        let kappa = Kappa::from_bits(u16::from_le_bytes([bytes[5], bytes[6]]) as u32)
            .map_err(|_| Error::protocol("bad OKVS kappa"))?;
        let band_width = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        let table_rows = u64::from_le_bytes(bytes[11..19].try_into().unwrap());
        if band_width == 0 || band_width > MAX_BAND_WIDTH || table_rows < band_width as u64 {
            return Err(Error::protocol(format!(
                "inconsistent OKVS shape: w={band_width}, rows={table_rows}"
            )));
        }
        let row_len = 2 * kappa.bytes();
        let expected = (table_rows as u128) * row_len as u128 + (HEADER_LEN + SEED_LEN) as u128;
        if bytes.len() as u128 != expected {
            return Err(Error::protocol(format!(
                "OKVS table is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let seed = bytes[19..35].try_into().unwrap();
        let rows = bytes[HEADER_LEN + SEED_LEN..]
            .chunks_exact(row_len)
            .map(BitString::from_bytes)
            .collect::<Result<Vec<_>>>()?;
        Ok(OkvsTable {
            kappa,
            band_width,
            seed,
            rows,
        })
    }
}

/// Encodes `pairs` (κ-bit keys, 2κ-bit values). A singular system is retried
/// under a fresh seed up to `max_retries` times before giving up.
pub fn encode<R: RngCore + CryptoRng + ?Sized>(
    pairs: &[(BitString, BitString)],
    params: &OkvsParams,
    max_retries: u32,
    rng: &mut R,
) -> Result<OkvsTable> {
    encode_counting(pairs, params, max_retries, rng).map(|(table, _)| table)
}

/// As [`encode`], also returning the number of attempts used.
pub fn encode_counting<R: RngCore + CryptoRng + ?Sized>(
    pairs: &[(BitString, BitString)],
    params: &OkvsParams,
    max_retries: u32,
    rng: &mut R,
) -> Result<(OkvsTable, u32)> {
    if pairs.len() != params.m {
        return Err(Error::usage(format!(
            "OKVS sized for {} pairs, got {}",
            params.m,
            pairs.len()
        )));
    }
    let mut seen = HashSet::with_capacity(pairs.len());
    for (key, value) in pairs {
        if key.len_bits() != params.kappa.bits() {
            return Err(Error::LengthMismatch {
                expected: params.kappa.bits(),
                actual: key.len_bits(),
            });
        }
        if value.len_bytes() != params.value_bytes() {
            return Err(Error::LengthMismatch {
                expected: params.value_bytes() * 8,
                actual: value.len_bits(),
            });
        }
        if !seen.insert(*key) {
            return Err(Error::usage("duplicate key in OKVS input"));
        }
    }

    let attempts = max_retries.max(1);
    for attempt in 1..=attempts {
        let mut seed = [0u8; SEED_LEN];
        rng.fill_bytes(&mut seed);
        if let Some(rows) = solve(&seed, pairs, params, rng) {
            let table = OkvsTable {
                kappa: params.kappa,
                band_width: params.band_width,
                seed,
                rows,
            };
            return Ok((table, attempt));
        }
        log::debug!("OKVS encode attempt {attempt} singular, reseeding");
    }
    Err(Error::EncodeFailure { attempts })
}

fn solve<R: RngCore + CryptoRng + ?Sized>(
    seed: &[u8; SEED_LEN],
    pairs: &[(BitString, BitString)],
    params: &OkvsParams,
    rng: &mut R,
) -> Option<Vec<BitString>> {
    let cols = params.table_rows;
    // pivot_pattern[c] == 0 means column c has no pivot row yet.
    let mut pivot_pattern = vec![0u128; cols];
    let mut pivot_rhs = vec![BitString::zero(params.value_bytes()).ok()?; cols];

    for (key, value) in pairs {
        let row = band_map(seed, key, params);
        let mut col = row.start;
        let mut pattern = row.pattern;
        let mut rhs = *value;
        loop {
            if pattern == 0 {
                if rhs.is_zero() {
                    break;
                }
                return None;
            }
            let tz = pattern.trailing_zeros();
            col += tz as usize;
            pattern >>= tz;
            if pivot_pattern[col] == 0 {
                pivot_pattern[col] = pattern;
                pivot_rhs[col] = rhs;
                break;
            }
            pattern ^= pivot_pattern[col];
            rhs.xor_in(&pivot_rhs[col]);
        }
    }

    let mut solution = vec![BitString::zero(params.value_bytes()).ok()?; cols];
    for col in (0..cols).rev() {
        let pattern = pivot_pattern[col];
        if pattern == 0 {
            solution[col] = BitString::random_kappa(rng, params.kappa)
                .concat(&BitString::random_kappa(rng, params.kappa))
                .ok()?;
            continue;
        }
        let mut value = pivot_rhs[col];
        let mut rest = pattern >> 1;
        while rest != 0 {
            let j = rest.trailing_zeros() as usize + 1;
            value.xor_in(&solution[col + j]);
            rest &= rest - 1;
        }
        solution[col] = value;
    }
    Some(solution)
}
