//! Signatures and sealed envelopes.
//!
//! Signatures are Ed25519. Sealing is a hybrid construction: an ephemeral
//! X25519 agreement with the recipient derives (HKDF-SHA256) a key-wrapping
//! key, which wraps a fresh ChaCha20-Poly1305 content key. When a signer is
//! supplied the signature is computed over the plaintext and travels inside
//! the ciphertext, so an observer of the envelope learns nothing about who
//! signed it.
//!
//! Every random draw comes from a caller-supplied generator; with a seeded
//! generator the same inputs produce byte-identical envelopes.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use crate::rng::seeded;

const SIGNATURE_LEN: usize = 64;
const KEY_LEN: usize = 32;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const WRAPPED_KEY_LEN: usize = KEY_LEN + KEY_LEN + TAG_LEN;
const ENVELOPE_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed signature encoding: {0}")]
    MalformedSignature(&'static str),
    #[error("malformed envelope encoding: {0}")]
    MalformedEnvelope(&'static str),
    #[error("malformed key material")]
    MalformedKey,
    #[error("envelope cannot be opened with this key")]
    OpenFailure,
    #[error("envelope ciphertext failed its integrity check")]
    IntegrityFailure,
    #[error("symmetric ciphertext failed its integrity check")]
    SymmetricFailure,
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let raw = hex::decode(text).map_err(serde::de::Error::custom)?;
        raw.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// Public half of a signing identity.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VerifyingKey(#[serde(with = "hex_array")] [u8; 32]);

impl VerifyingKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for VerifyingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyingKey({})", &hex::encode(self.0)[..16])
    }
}

impl fmt::Display for VerifyingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// A signing key pair. `owner_label` is simulation metadata and is never
/// written into anything this identity signs or seals.
#[derive(Clone)]
pub struct SigningIdentity {
    private_part: ed25519_dalek::SigningKey,
    owner_label: String,
}

impl SigningIdentity {
    pub fn from_rng<R: RngCore + CryptoRng>(rng: &mut R, owner_label: impl Into<String>) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::from_secret(secret, owner_label)
    }

    pub fn from_secret(secret: [u8; 32], owner_label: impl Into<String>) -> Self {
        Self {
            private_part: ed25519_dalek::SigningKey::from_bytes(&secret),
            owner_label: owner_label.into(),
        }
    }

    pub fn public(&self) -> VerifyingKey {
        VerifyingKey(self.private_part.verifying_key().to_bytes())
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.private_part.to_bytes()
    }

    pub fn owner_label(&self) -> &str {
        &self.owner_label
    }
}

impl fmt::Debug for SigningIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningIdentity")
            .field("public", &self.public())
            .field("owner_label", &self.owner_label)
            .finish()
    }
}

impl PartialEq for SigningIdentity {
    fn eq(&self, other: &Self) -> bool {
        self.secret_bytes() == other.secret_bytes() && self.owner_label == other.owner_label
    }
}

/// Fresh identity from an integer seed. Identical seeds give identical
/// identities.
pub fn generate_identity(seed: u64, owner_label: impl Into<String>) -> SigningIdentity {
    SigningIdentity::from_rng(&mut seeded(seed), owner_label)
}

/// Recomputes the verification key for a private signing secret.
pub fn derive_public(secret: &[u8; 32]) -> VerifyingKey {
    VerifyingKey(
        ed25519_dalek::SigningKey::from_bytes(secret)
            .verifying_key()
            .to_bytes(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    pub signer_public: VerifyingKey,
}

pub fn sign(payload: &[u8], identity: &SigningIdentity) -> Signature {
    Signature {
        bytes: identity.private_part.sign(payload).to_bytes().to_vec(),
        signer_public: identity.public(),
    }
}

/// `Ok(false)` for a well-formed signature that does not match; `Err` only
/// when the signature or key bytes cannot be decoded at all.
pub fn verify(payload: &[u8], sig: &Signature, public: &VerifyingKey) -> Result<bool, CryptoError> {
    if sig.bytes.len() != SIGNATURE_LEN {
        return Err(CryptoError::MalformedSignature("signature must be 64 bytes"));
    }
    let decoded = ed25519_dalek::Signature::from_slice(&sig.bytes)
        .map_err(|_| CryptoError::MalformedSignature("non-canonical signature"))?;
    let key = ed25519_dalek::VerifyingKey::from_bytes(public.as_bytes())
        .map_err(|_| CryptoError::MalformedKey)?;
    Ok(key.verify(payload, &decoded).is_ok())
}

/// Public encryption key (X25519).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EncryptionKey(#[serde(with = "hex_array")] [u8; 32]);

impl EncryptionKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncryptionKey({})", &hex::encode(self.0)[..16])
    }
}

impl fmt::Display for EncryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Private decryption key (X25519). The public half is computed once.
#[derive(Clone)]
pub struct DecryptionKey {
    secret: StaticSecret,
    public: [u8; 32],
}

impl DecryptionKey {
    pub fn from_rng<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::from_bytes(secret)
    }

    pub fn from_bytes(secret: [u8; 32]) -> Self {
        let secret = StaticSecret::from(secret);
        let public = X25519Public::from(&secret).to_bytes();
        Self { secret, public }
    }

    pub fn public(&self) -> EncryptionKey {
        EncryptionKey(self.public)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    /// Child key number `index` of this key. Children of one parent are
    /// mutually unlinkable to anyone without the parent secret.
    pub fn derive_child(&self, index: u32) -> DecryptionKey {
        let hk = Hkdf::<Sha256>::new(Some(b"dapriv/subkey/v1"), &self.secret.to_bytes());
        let mut okm = [0u8; 32];
        let mut info = *b"subkey:\0\0\0\0";
        info[7..].copy_from_slice(&index.to_be_bytes());
        hk.expand(&info, &mut okm)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        DecryptionKey::from_bytes(okm)
    }
}

impl fmt::Debug for DecryptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DecryptionKey(public={:?})", self.public())
    }
}

/// A decryption key together with its public half.
#[derive(Debug, Clone)]
pub struct EncryptionKeypair {
    pub secret: DecryptionKey,
    pub public: EncryptionKey,
}

impl EncryptionKeypair {
    pub fn from_rng<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(DecryptionKey::from_rng(rng))
    }

    pub fn from_secret(secret: DecryptionKey) -> Self {
        let public = secret.public();
        Self { secret, public }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymmetricKey(#[serde(with = "hex_array")] [u8; 32]);

impl SymmetricKey {
    pub fn from_rng<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Self(key)
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// `nonce || ciphertext+tag` under `key`.
pub fn symmetric_encrypt<R: RngCore + CryptoRng>(
    key: &SymmetricKey,
    plaintext: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    let body = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("in-memory AEAD encryption cannot fail");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&body);
    out
}

pub fn symmetric_decrypt(key: &SymmetricKey, data: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if data.len() < NONCE_LEN + TAG_LEN {
        return Err(CryptoError::SymmetricFailure);
    }
    let (nonce, body) = data.split_at(NONCE_LEN);
    ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()))
        .decrypt(Nonce::from_slice(nonce), body)
        .map_err(|_| CryptoError::SymmetricFailure)
}

/// Hybrid-encrypted payload addressed to one recipient key.
///
/// `wrapped_key` is `ephemeral_public || AEAD(kek, content_key)`;
/// `ciphertext` is `nonce || AEAD(content_key, inner)` with `wrapped_key`
/// as associated data. The inner plaintext optionally carries a signature
/// over the payload.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedEnvelope {
    #[serde(with = "hex_bytes")]
    pub wrapped_key: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub ciphertext: Vec<u8>,
}

impl fmt::Debug for SealedEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SealedEnvelope({} + {} bytes)",
            self.wrapped_key.len(),
            self.ciphertext.len()
        )
    }
}

impl SealedEnvelope {
    /// `version:u8 | wrapped_len:u16 | wrapped | ct_len:u32 | ct`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + self.wrapped_key.len() + self.ciphertext.len());
        out.push(ENVELOPE_VERSION);
        out.extend_from_slice(&(self.wrapped_key.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.wrapped_key);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut cursor = Cursor::new(bytes);
        if cursor.take(1)?[0] != ENVELOPE_VERSION {
            return Err(CryptoError::MalformedEnvelope("unsupported version"));
        }
        let wrapped_len = u16::from_be_bytes(cursor.array::<2>()?) as usize;
        let wrapped_key = cursor.take(wrapped_len)?.to_vec();
        let ct_len = u32::from_be_bytes(cursor.array::<4>()?) as usize;
        let ciphertext = cursor.take(ct_len)?.to_vec();
        if !cursor.is_empty() {
            return Err(CryptoError::MalformedEnvelope("trailing bytes"));
        }
        Ok(Self {
            wrapped_key,
            ciphertext,
        })
    }
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn new(rest: &'a [u8]) -> Self {
        Self { rest }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CryptoError> {
        if self.rest.len() < n {
            return Err(CryptoError::MalformedEnvelope("truncated"));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CryptoError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }
}

/// Outcome of checking the signature carried inside an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignerStatus {
    Absent,
    Verified(VerifyingKey),
    Invalid(VerifyingKey),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Opened {
    pub plaintext: Vec<u8>,
    pub signer: SignerStatus,
}

impl Opened {
    /// The signer, provided a signature is present and valid.
    pub fn verified_signer(&self) -> Option<VerifyingKey> {
        match self.signer {
            SignerStatus::Verified(key) => Some(key),
            _ => None,
        }
    }
}

fn key_wrapping_key(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut kek = [0u8; 32];
    hk.expand(b"dapriv/envelope/kek/v1", &mut kek)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    kek
}

fn encode_inner(payload: &[u8], signature: Option<&Signature>) -> Vec<u8> {
    match signature {
        None => {
            let mut out = Vec::with_capacity(payload.len() + 1);
            out.push(0);
            out.extend_from_slice(payload);
            out
        }
        Some(sig) => {
            let mut out = Vec::with_capacity(payload.len() + 35 + sig.bytes.len());
            out.push(1);
            out.extend_from_slice(sig.signer_public.as_bytes());
            out.extend_from_slice(&(sig.bytes.len() as u16).to_be_bytes());
            out.extend_from_slice(&sig.bytes);
            out.extend_from_slice(payload);
            out
        }
    }
}

fn decode_inner(inner: &[u8]) -> Result<(Vec<u8>, Option<Signature>), CryptoError> {
    let mut cursor = Cursor::new(inner);
    match cursor.take(1)?[0] {
        0 => Ok((cursor.rest.to_vec(), None)),
        1 => {
            let signer_public = VerifyingKey(cursor.array::<32>()?);
            let sig_len = u16::from_be_bytes(cursor.array::<2>()?) as usize;
            let bytes = cursor.take(sig_len)?.to_vec();
            Ok((
                cursor.rest.to_vec(),
                Some(Signature {
                    bytes,
                    signer_public,
                }),
            ))
        }
        _ => Err(CryptoError::MalformedEnvelope("unknown inner tag")),
    }
}

/// Seals `payload` so only the holder of `recipient`'s private key can open
/// it. With a signer, the envelope carries a signature over `payload`.
///
/// Whether `recipient` is still an active key is the caller's concern; the
/// key pool only hands out active keys.
pub fn seal<R: RngCore + CryptoRng>(
    payload: &[u8],
    recipient: &EncryptionKey,
    signer: Option<&SigningIdentity>,
    rng: &mut R,
) -> SealedEnvelope {
    let signature = signer.map(|id| sign(payload, id));
    seal_inner(&encode_inner(payload, signature.as_ref()), recipient, rng)
}

fn seal_inner<R: RngCore + CryptoRng>(
    inner: &[u8],
    recipient: &EncryptionKey,
    rng: &mut R,
) -> SealedEnvelope {
    let ephemeral = DecryptionKey::from_rng(rng);
    let ephemeral_public = ephemeral.public();
    let shared = ephemeral
        .secret
        .diffie_hellman(&X25519Public::from(*recipient.as_bytes()));
    let kek = key_wrapping_key(
        shared.as_bytes(),
        ephemeral_public.as_bytes(),
        recipient.as_bytes(),
    );
    let content_key = SymmetricKey::from_rng(rng);

    // The KEK is single-use, so a fixed nonce is sound here.
    let wrapped = ChaCha20Poly1305::new(Key::from_slice(&kek))
        .encrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), content_key.as_bytes().as_slice())
        .expect("in-memory AEAD encryption cannot fail");
    let mut wrapped_key = ephemeral_public.as_bytes().to_vec();
    wrapped_key.extend_from_slice(&wrapped);

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let body = ChaCha20Poly1305::new(Key::from_slice(content_key.as_bytes()))
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: inner,
                aad: &wrapped_key,
            },
        )
        .expect("in-memory AEAD encryption cannot fail");
    let mut ciphertext = nonce.to_vec();
    ciphertext.extend_from_slice(&body);
    SealedEnvelope {
        wrapped_key,
        ciphertext,
    }
}

/// Opens an envelope.
///
/// A key that cannot unwrap the content key yields [`CryptoError::OpenFailure`];
/// a ciphertext that fails authentication yields
/// [`CryptoError::IntegrityFailure`]. A present but bad signature is not an
/// error: the plaintext comes back with [`SignerStatus::Invalid`] and the
/// caller decides.
pub fn open(env: &SealedEnvelope, recipient: &DecryptionKey) -> Result<Opened, CryptoError> {
    if env.wrapped_key.len() != WRAPPED_KEY_LEN {
        return Err(CryptoError::MalformedEnvelope("wrapped key length"));
    }
    let mut ephemeral = [0u8; 32];
    ephemeral.copy_from_slice(&env.wrapped_key[..32]);
    let shared = recipient.secret.diffie_hellman(&X25519Public::from(ephemeral));
    if !shared.was_contributory() {
        return Err(CryptoError::OpenFailure);
    }
    let kek = key_wrapping_key(
        shared.as_bytes(),
        &ephemeral,
        recipient.public().as_bytes(),
    );
    let content_key = ChaCha20Poly1305::new(Key::from_slice(&kek))
        .decrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), &env.wrapped_key[32..])
        .map_err(|_| CryptoError::OpenFailure)?;

    if env.ciphertext.len() < NONCE_LEN + TAG_LEN {
        return Err(CryptoError::IntegrityFailure);
    }
    let (nonce, body) = env.ciphertext.split_at(NONCE_LEN);
    let inner = ChaCha20Poly1305::new(Key::from_slice(&content_key))
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: body,
                aad: &env.wrapped_key,
            },
        )
        .map_err(|_| CryptoError::IntegrityFailure)?;

    let (plaintext, signature) = decode_inner(&inner)?;
    let signer = match signature {
        None => SignerStatus::Absent,
        Some(sig) => match verify(&plaintext, &sig, &sig.signer_public) {
            Ok(true) => SignerStatus::Verified(sig.signer_public),
            _ => SignerStatus::Invalid(sig.signer_public),
        },
    };
    Ok(Opened { plaintext, signer })
}

/// Hex SHA-256, used for content addresses and log digests.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identical_seeds_give_identical_identities() {
        let a = generate_identity(42, "a");
        let b = generate_identity(42, "a");
        assert_eq!(a, b);
        assert_eq!(a.secret_bytes(), b.secret_bytes());
    }

    #[test]
    fn neighbouring_seeds_give_distinct_public_keys() {
        assert_ne!(generate_identity(42, "x").public(), generate_identity(43, "x").public());
    }

    #[test]
    fn public_part_is_derivable_from_private_part() {
        let id = generate_identity(7, "lab");
        assert_eq!(derive_public(&id.secret_bytes()), id.public());
    }

    #[test]
    fn sign_verify_roundtrip_and_tamper() {
        let id = generate_identity(1, "doc");
        let other = generate_identity(2, "other");
        let payload = b"tests=blood_panel".to_vec();
        let sig = sign(&payload, &id);
        assert_eq!(verify(&payload, &sig, &id.public()), Ok(true));

        let mut flipped = payload.clone();
        flipped[3] ^= 0x01;
        assert_eq!(verify(&flipped, &sig, &id.public()), Ok(false));
        assert_eq!(verify(&payload, &sig, &other.public()), Ok(false));
        assert_eq!(verify(b"something else", &sig, &id.public()), Ok(false));
    }

    #[test]
    fn empty_payload_signs() {
        let id = generate_identity(3, "x");
        let sig = sign(&[], &id);
        assert_eq!(verify(&[], &sig, &id.public()), Ok(true));
    }

    #[test]
    fn truncated_signature_is_a_decode_error() {
        let id = generate_identity(3, "x");
        let mut sig = sign(b"abc", &id);
        sig.bytes.truncate(40);
        assert!(matches!(
            verify(b"abc", &sig, &id.public()),
            Err(CryptoError::MalformedSignature(_))
        ));
    }

    #[test]
    fn seal_open_roundtrip() {
        let mut rng = seeded(5);
        let patient = EncryptionKeypair::from_rng(&mut rng);
        let env = seal(b"result pointer", &patient.public, None, &mut rng);
        let opened = open(&env, &patient.secret).unwrap();
        assert_eq!(opened.plaintext, b"result pointer");
        assert_eq!(opened.signer, SignerStatus::Absent);
    }

    #[test]
    fn wrong_recipient_cannot_open() {
        let mut rng = seeded(5);
        let p = EncryptionKeypair::from_rng(&mut rng);
        let q = EncryptionKeypair::from_rng(&mut rng);
        let env = seal(b"x", &p.public, None, &mut rng);
        assert_eq!(open(&env, &q.secret), Err(CryptoError::OpenFailure));
    }

    #[test]
    fn signed_seal_reports_signer() {
        let mut rng = seeded(6);
        let lab = generate_identity(11, "lab");
        let p = EncryptionKeypair::from_rng(&mut rng);
        let env = seal(b"x", &p.public, Some(&lab), &mut rng);
        let opened = open(&env, &p.secret).unwrap();
        assert_eq!(opened.plaintext, b"x");
        assert_eq!(opened.verified_signer(), Some(lab.public()));
    }

    #[test]
    fn inner_signature_over_other_bytes_is_flagged_invalid() {
        let mut rng = seeded(6);
        let lab = generate_identity(11, "lab");
        let p = EncryptionKeypair::from_rng(&mut rng);
        let forged = sign(b"different", &lab);
        let env = seal_inner(&encode_inner(b"payload", Some(&forged)), &p.public, &mut rng);
        let opened = open(&env, &p.secret).unwrap();
        assert_eq!(opened.plaintext, b"payload");
        assert_eq!(opened.signer, SignerStatus::Invalid(lab.public()));
    }

    #[test]
    fn tampered_ciphertext_fails_integrity() {
        let mut rng = seeded(8);
        let p = EncryptionKeypair::from_rng(&mut rng);
        let mut env = seal(b"hello", &p.public, None, &mut rng);
        let last = env.ciphertext.len() - 1;
        env.ciphertext[last] ^= 0x80;
        assert_eq!(open(&env, &p.secret), Err(CryptoError::IntegrityFailure));
    }

    #[test]
    fn tampered_wrapped_key_fails() {
        let mut rng = seeded(8);
        let p = EncryptionKeypair::from_rng(&mut rng);
        let mut env = seal(b"hello", &p.public, None, &mut rng);
        env.wrapped_key[40] ^= 0x01;
        assert!(open(&env, &p.secret).is_err());
    }

    #[test]
    fn envelopes_are_reproducible_from_seed() {
        let p = EncryptionKeypair::from_rng(&mut seeded(1));
        let lab = generate_identity(2, "lab");
        let a = seal(b"abc", &p.public, Some(&lab), &mut seeded(99));
        let b = seal(b"abc", &p.public, Some(&lab), &mut seeded(99));
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn envelope_encoding_roundtrips_and_rejects_truncation() {
        let mut rng = seeded(3);
        let p = EncryptionKeypair::from_rng(&mut rng);
        let env = seal(b"abc", &p.public, None, &mut rng);
        let bytes = env.to_bytes();
        assert_eq!(SealedEnvelope::from_bytes(&bytes).unwrap(), env);
        assert!(SealedEnvelope::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn child_keys_are_distinct_and_stable() {
        let parent = DecryptionKey::from_rng(&mut seeded(4));
        let a = parent.derive_child(0).public();
        let b = parent.derive_child(1).public();
        assert_ne!(a, b);
        assert_eq!(a, parent.derive_child(0).public());
        assert_ne!(a, parent.public());
    }

    #[test]
    fn symmetric_roundtrip_and_tamper() {
        let mut rng = seeded(12);
        let key = SymmetricKey::from_rng(&mut rng);
        let mut ct = symmetric_encrypt(&key, b"blob", &mut rng);
        assert_eq!(symmetric_decrypt(&key, &ct).unwrap(), b"blob");
        ct[15] ^= 1;
        assert_eq!(symmetric_decrypt(&key, &ct), Err(CryptoError::SymmetricFailure));
    }

    proptest::proptest! {
        #[test]
        fn seal_open_roundtrips_and_any_flipped_bit_is_caught(
            payload in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..256),
            seed in proptest::prelude::any::<u64>(),
            bit in proptest::prelude::any::<usize>(),
        ) {
            let mut rng = seeded(seed);
            let recipient = DecryptionKey::from_rng(&mut rng);
            let signer = generate_identity(seed, "signer");
            let env = seal(&payload, &recipient.public(), Some(&signer), &mut rng);
            let opened = open(&env, &recipient).unwrap();
            proptest::prop_assert_eq!(&opened.plaintext, &payload);
            proptest::prop_assert_eq!(opened.verified_signer(), Some(signer.public()));

            let mut bytes = env.to_bytes();
            let i = bit % (bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            if let Ok(bad) = SealedEnvelope::from_bytes(&bytes) {
                proptest::prop_assert!(open(&bad, &recipient).is_err());
            }
        }
    }
}
