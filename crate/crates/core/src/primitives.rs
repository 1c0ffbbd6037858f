//! Symbol-level building blocks: the blinding PRP, identifier hashing, key
//! derivation, authenticated record encryption and randomness.

use std::fmt;
use std::str::FromStr;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::{Aes128, Aes256};
use aes_gcm::aead::AeadInPlace;
use aes_gcm::Aes256Gcm;
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::bits::{BitString, Kappa};
use crate::error::{Error, Result};

/// Generator used for all protocol randomness.
pub type SessionRng = ChaCha20Rng;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const MAX_PLAINTEXT_LEN: usize = 1 << 24;

/// Key of the blinding permutation, one per provider and session.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PrpKey(BitString);

impl PrpKey {
    pub fn random<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, kappa: Kappa) -> Self {
        PrpKey(BitString::random_kappa(rng, kappa))
    }

    pub fn from_bitstring(key: BitString) -> Result<Self> {
        Kappa::from_bits(key.len_bits() as u32)?;
        Ok(PrpKey(key))
    }

    pub fn as_bitstring(&self) -> &BitString {
        &self.0
    }

    pub fn kappa(&self) -> Kappa {
        Kappa::from_bits(self.0.len_bits() as u32).expect("validated at construction")
    }
}

impl fmt::Debug for PrpKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrpKey(..)")
    }
}

enum BlockCipher {
    Aes128(Aes128),
    Aes256(Aes256),
}

/// Keyed permutation on κ-bit blocks: AES-128 for κ=128, two-block AES-256
/// CBC with a zero IV for κ=256.
///
/// Holding the expanded key schedule lets the collector unblind many values
/// under one provider key without re-keying.
pub struct Prp {
    kappa: Kappa,
    cipher: BlockCipher,
}

impl Prp {
    pub fn new(key: &PrpKey) -> Self {
        let bytes = key.as_bitstring().as_bytes();
        let cipher = match key.kappa() {
            Kappa::K128 => BlockCipher::Aes128(Aes128::new(GenericArray::from_slice(bytes))),
            Kappa::K256 => BlockCipher::Aes256(Aes256::new(GenericArray::from_slice(bytes))),
        };
        Prp {
            kappa: key.kappa(),
            cipher,
        }
    }

    fn check(&self, block: &BitString) -> Result<()> {
        if block.len_bits() != self.kappa.bits() {
            return Err(Error::LengthMismatch {
                expected: self.kappa.bits(),
                actual: block.len_bits(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, block: &BitString) -> Result<BitString> {
        self.check(block)?;
        let mut out = *block;
        let bytes = out.as_bytes_mut();
        match &self.cipher {
            BlockCipher::Aes128(c) => c.encrypt_block(GenericArray::from_mut_slice(bytes)),
            BlockCipher::Aes256(c) => {
                let (first, second) = bytes.split_at_mut(16);
                c.encrypt_block(GenericArray::from_mut_slice(first));
                for (b, p) in second.iter_mut().zip(first.iter()) {
                    *b ^= *p;
                }
                c.encrypt_block(GenericArray::from_mut_slice(second));
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, block: &BitString) -> Result<BitString> {
        self.check(block)?;
        let mut out = *block;
        let bytes = out.as_bytes_mut();
        match &self.cipher {
            BlockCipher::Aes128(c) => c.decrypt_block(GenericArray::from_mut_slice(bytes)),
            BlockCipher::Aes256(c) => {
                let (first, second) = bytes.split_at_mut(16);
                c.decrypt_block(GenericArray::from_mut_slice(second));
                for (b, p) in second.iter_mut().zip(first.iter()) {
                    *b ^= *p;
                }
                c.decrypt_block(GenericArray::from_mut_slice(first));
            }
        }
        Ok(out)
    }
}

pub fn prp_forward(key: &PrpKey, block: &BitString) -> Result<BitString> {
    Prp::new(key).forward(block)
}

pub fn prp_inverse(key: &PrpKey, block: &BitString) -> Result<BitString> {
    Prp::new(key).inverse(block)
}

/// Trims surrounding whitespace. Case is preserved: matching is exact.
pub fn normalize_id(raw: &str) -> &str {
    raw.trim()
}

/// Maps an arbitrary identifier to a κ-bit id: SHA-256 truncated to κ bits.
/// Unsalted so every provider maps the same identifier to the same id.
pub fn hash_id(raw: &[u8], kappa: Kappa) -> Result<BitString> {
    if raw.is_empty() {
        return Err(Error::usage("identifier must not be empty"));
    }
    let digest = Sha256::new()
        .chain_update(b"sika-link/id/v1\0")
        .chain_update(raw)
        .finalize();
    BitString::from_bytes(&digest[..kappa.bytes()])
}

/// Domain-separation labels for [`derive_key`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeyLabel {
    Payload,
    Share,
    PsiId,
}

impl KeyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyLabel::Payload => "payload",
            KeyLabel::Share => "share",
            KeyLabel::PsiId => "psi-id",
        }
    }
}

impl FromStr for KeyLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "payload" => Ok(KeyLabel::Payload),
            "share" => Ok(KeyLabel::Share),
            "psi-id" => Ok(KeyLabel::PsiId),
            other => Err(Error::usage(format!("unknown key label {other:?}"))),
        }
    }
}

/// 256-bit symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; 32]);

impl SymKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

/// HKDF-SHA256 over the agreed secret key, with the label as `info`.
pub fn derive_key(sk: &BitString, label: KeyLabel) -> SymKey {
    let hk = Hkdf::<Sha256>::new(Some(b"sika-link/kdf/v1"), sk.as_bytes());
    let mut okm = [0u8; 32];
    hk.expand(label.as_str().as_bytes(), &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    SymKey(okm)
}

/// AES-256-GCM ciphertext.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Ciphertext {
    pub nonce: [u8; NONCE_LEN],
    pub body: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl Ciphertext {
    pub fn encoded_len(&self) -> usize {
        NONCE_LEN + self.body.len() + TAG_LEN
    }

    /// `nonce ‖ body ‖ tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(Error::protocol(format!(
                "ciphertext too short: {} bytes",
                bytes.len()
            )));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Ciphertext {
            nonce: nonce.try_into().expect("split at NONCE_LEN"),
            body: body.to_vec(),
            tag: tag.try_into().expect("split at TAG_LEN"),
        })
    }
}

pub fn sym_encrypt<R: RngCore + CryptoRng + ?Sized>(
    key: &SymKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Ciphertext> {
    if plaintext.len() > MAX_PLAINTEXT_LEN {
        return Err(Error::usage(format!(
            "plaintext of {} bytes exceeds the {MAX_PLAINTEXT_LEN} byte limit",
            plaintext.len()
        )));
    }
    let cipher = Aes256Gcm::new(GenericArray::from_slice(key.as_bytes()));
    let mut nonce = [0u8; NONCE_LEN];
    rng.try_fill_bytes(&mut nonce)
        .map_err(|e| Error::Entropy(e.to_string()))?;
    let mut body = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(GenericArray::from_slice(&nonce), b"", &mut body)
        .map_err(|_| Error::usage("plaintext too long for AES-GCM"))?;
    Ok(Ciphertext {
        nonce,
        body,
        tag: tag.into(),
    })
}

pub fn sym_decrypt(key: &SymKey, ct: &Ciphertext) -> Result<Vec<u8>> {
    let cipher = Aes256Gcm::new(GenericArray::from_slice(key.as_bytes()));
    let mut body = ct.body.clone();
    cipher
        .decrypt_in_place_detached(
            GenericArray::from_slice(&ct.nonce),
            b"",
            &mut body,
            GenericArray::from_slice(&ct.tag),
        )
        .map_err(|_| Error::AuthFailure)?;
    Ok(body)
}

/// `n_bits` uniform bits; `n_bits` must be a multiple of 8.
pub fn csprng_fill<R: RngCore + CryptoRng + ?Sized>(rng: &mut R, n_bits: usize) -> Result<Vec<u8>> {
    if n_bits % 8 != 0 {
        return Err(Error::usage(format!("{n_bits} is not a whole number of bytes")));
    }
    let mut out = vec![0u8; n_bits / 8];
    rng.try_fill_bytes(&mut out)
        .map_err(|e| Error::Entropy(e.to_string()))?;
    Ok(out)
}

/// Fresh generator seeded from the operating system.
pub fn os_seeded_rng() -> Result<SessionRng> {
    let mut seed = [0u8; 32];
    OsRng
        .try_fill_bytes(&mut seed)
        .map_err(|e| Error::Entropy(e.to_string()))?;
    Ok(SessionRng::from_seed(seed))
}

/// Deterministic generator for reproducible runs, one independent stream per
/// `(seed, label)` pair.
pub fn seeded_rng(seed: &[u8], label: &str) -> SessionRng {
    let digest = Sha256::new()
        .chain_update(b"sika-link/seed/v1\0")
        .chain_update((seed.len() as u64).to_le_bytes())
        .chain_update(seed)
        .chain_update(label.as_bytes())
        .finalize();
    SessionRng::from_seed(digest.into())
}

/// Child generator for work that runs off the parent's thread.
pub(crate) fn fork_rng<R: RngCore + ?Sized>(rng: &mut R) -> SessionRng {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    SessionRng::from_seed(seed)
}
