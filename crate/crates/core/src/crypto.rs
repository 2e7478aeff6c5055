//! Per-hop key agreement and the symmetric layer machinery.
//!
//! Key agreement is an ephemeral-ephemeral Diffie-Hellman exchange over the
//! ristretto255 prime-order group. The relay signs both ephemeral elements with
//! its long-term identity key (a Schnorr signature over the same group), so the
//! client can check the handshake against the identity key published in the
//! directory.
//!
//! The shared secret is expanded with HKDF-SHA256 into two ChaCha20 keys (one
//! per direction) and two seeds for running SHA-256 digests. Everything that
//! touches a concrete primitive lives in this module.

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

use crate::cellwire::{
    decode_relay_payload, encode_relay_payload, RelayPayload, CELL_PAYLOAD_LEN, RELAY_DIGEST_OFFSET,
};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const CONFIRM_TAG_LEN: usize = 32;
pub const SYMMETRIC_KEY_LEN: usize = 32;
/// A CREATE payload is the client's serialized ephemeral element.
pub const CREATE_PAYLOAD_LEN: usize = PUBLIC_KEY_LEN;
/// relay ephemeral element | confirmation tag | signature
pub const CREATED_PAYLOAD_LEN: usize = PUBLIC_KEY_LEN + CONFIRM_TAG_LEN + SIGNATURE_LEN;

const HKDF_SALT: &[u8] = b"tomen-hop-keys-v1";
const LABEL_FWD_KEY: &[u8] = b"fwd-key";
const LABEL_BWD_KEY: &[u8] = b"bwd-key";
const LABEL_FWD_DIG: &[u8] = b"fwd-dig";
const LABEL_BWD_DIG: &[u8] = b"bwd-dig";
const CONFIRM_LABEL: &[u8] = b"tomen-key-confirm";
const TRANSCRIPT_LABEL: &[u8] = b"tomen-handshake-v1";
const SIG_NONCE_LABEL: &[u8] = b"tomen-sig-nonce";
const SIG_CHALLENGE_LABEL: &[u8] = b"tomen-sig-challenge";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("malformed group element")]
    MalformedElement,
    #[error("handshake payload has wrong length {0}")]
    BadLength(usize),
    #[error("relay signature does not match the expected identity")]
    IdentityMismatch,
    #[error("key confirmation tag mismatch")]
    KeyMismatch,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CipherError {
    #[error("layer cipher counter exhausted; circuit must be destroyed")]
    CounterExhausted,
}

/// A serialized group element. Construction through [`PublicKey::from_bytes`]
/// guarantees it decodes to a valid ristretto point.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HandshakeError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| HandshakeError::BadLength(bytes.len()))?;
        CompressedRistretto(arr)
            .decompress()
            .ok_or(HandshakeError::MalformedElement)?;
        Ok(PublicKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, HandshakeError> {
        let bytes = hex::decode(s).map_err(|_| HandshakeError::MalformedElement)?;
        PublicKey::from_bytes(&bytes)
    }

    fn point(&self) -> RistrettoPoint {
        // validated at construction
        CompressedRistretto(self.0).decompress().expect("validated element")
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..16])
    }
}

#[derive(Clone)]
pub struct KeyPair {
    private_scalar: Scalar,
    public_element: PublicKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut wide = [0u8; 64];
        rng.fill_bytes(&mut wide);
        let private_scalar = Scalar::from_bytes_mod_order_wide(&wide);
        let point = &private_scalar * RISTRETTO_BASEPOINT_TABLE;
        KeyPair {
            private_scalar,
            public_element: PublicKey(point.compress().to_bytes()),
        }
    }

    pub fn public(&self) -> PublicKey {
        self.public_element
    }

    /// Deterministic Schnorr signature; the nonce is derived from the secret and message.
    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        let nonce = hash_to_scalar(&[SIG_NONCE_LABEL, self.private_scalar.as_bytes(), msg]);
        let commitment = (&nonce * RISTRETTO_BASEPOINT_TABLE).compress();
        let challenge = hash_to_scalar(&[
            SIG_CHALLENGE_LABEL,
            commitment.as_bytes(),
            self.public_element.as_bytes(),
            msg,
        ]);
        let response = nonce + challenge * self.private_scalar;
        let mut sig = [0u8; SIGNATURE_LEN];
        sig[..32].copy_from_slice(commitment.as_bytes());
        sig[32..].copy_from_slice(response.as_bytes());
        sig
    }

    fn shared_secret(&self, peer: &PublicKey) -> Result<[u8; 32], HandshakeError> {
        let shared = self.private_scalar * peer.point();
        if shared == RistrettoPoint::identity() {
            return Err(HandshakeError::MalformedElement);
        }
        Ok(shared.compress().to_bytes())
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public_element)
            .finish_non_exhaustive()
    }
}

pub fn gen_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> KeyPair {
    KeyPair::generate(rng)
}

pub fn verify_signature(public: &PublicKey, msg: &[u8], sig: &[u8]) -> bool {
    if sig.len() != SIGNATURE_LEN {
        return false;
    }
    let Some(commitment) = CompressedRistretto::from_slice(&sig[..32])
        .ok()
        .and_then(|c| c.decompress())
    else {
        return false;
    };
    let response_bytes: [u8; 32] = sig[32..].try_into().expect("32 bytes");
    let Some(response) = Option::<Scalar>::from(Scalar::from_canonical_bytes(response_bytes)) else {
        return false;
    };
    let challenge = hash_to_scalar(&[SIG_CHALLENGE_LABEL, &sig[..32], public.as_bytes(), msg]);
    &response * RISTRETTO_BASEPOINT_TABLE == commitment + challenge * public.point()
}

fn hash_to_scalar(parts: &[&[u8]]) -> Scalar {
    let mut h = Sha512::new();
    for p in parts {
        h.update(p);
    }
    let out: [u8; 64] = h.finalize().into();
    Scalar::from_bytes_mod_order_wide(&out)
}

fn confirm_tag(shared: &[u8]) -> [u8; CONFIRM_TAG_LEN] {
    Sha256::new()
        .chain_update(CONFIRM_LABEL)
        .chain_update(shared)
        .finalize()
        .into()
}

fn transcript(client_eph: &PublicKey, relay_eph: &PublicKey) -> Vec<u8> {
    let mut msg = Vec::with_capacity(TRANSCRIPT_LABEL.len() + 2 * PUBLIC_KEY_LEN);
    msg.extend_from_slice(TRANSCRIPT_LABEL);
    msg.extend_from_slice(client_eph.as_bytes());
    msg.extend_from_slice(relay_eph.as_bytes());
    msg
}

pub fn client_create_payload(client_eph: &KeyPair) -> [u8; CREATE_PAYLOAD_LEN] {
    *client_eph.public().as_bytes()
}

pub fn relay_respond<R: RngCore + CryptoRng>(
    create_payload: &[u8],
    relay_identity: &KeyPair,
    rng: &mut R,
) -> Result<([u8; CREATED_PAYLOAD_LEN], HopKeys), HandshakeError> {
    let client_eph = PublicKey::from_bytes(create_payload)?;
    let relay_eph = KeyPair::generate(rng);
    let shared = relay_eph.shared_secret(&client_eph)?;
    let sig = relay_identity.sign(&transcript(&client_eph, &relay_eph.public()));

    let mut created = [0u8; CREATED_PAYLOAD_LEN];
    created[..32].copy_from_slice(relay_eph.public().as_bytes());
    created[32..64].copy_from_slice(&confirm_tag(&shared));
    created[64..].copy_from_slice(&sig);
    Ok((created, derive_hop_keys(&shared)))
}

pub fn client_finish(
    client_eph: &KeyPair,
    created_payload: &[u8],
    expected_identity: &PublicKey,
) -> Result<HopKeys, HandshakeError> {
    if created_payload.len() != CREATED_PAYLOAD_LEN {
        return Err(HandshakeError::BadLength(created_payload.len()));
    }
    let relay_eph = PublicKey::from_bytes(&created_payload[..32])?;
    let tag = &created_payload[32..64];
    let sig = &created_payload[64..];
    if !verify_signature(
        expected_identity,
        &transcript(&client_eph.public(), &relay_eph),
        sig,
    ) {
        return Err(HandshakeError::IdentityMismatch);
    }
    let shared = client_eph.shared_secret(&relay_eph)?;
    if confirm_tag(&shared) != tag {
        return Err(HandshakeError::KeyMismatch);
    }
    Ok(derive_hop_keys(&shared))
}

/// Directional keys and digest states for one hop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HopKeys {
    pub forward_key: [u8; SYMMETRIC_KEY_LEN],
    pub backward_key: [u8; SYMMETRIC_KEY_LEN],
    pub forward_digest: DigestState,
    pub backward_digest: DigestState,
}

impl HopKeys {
    pub fn forward_cipher(&self) -> LayerCipherState {
        LayerCipherState::new(self.forward_key)
    }

    pub fn backward_cipher(&self) -> LayerCipherState {
        LayerCipherState::new(self.backward_key)
    }
}

pub fn derive_hop_keys(shared_secret: &[u8]) -> HopKeys {
    let hk = Hkdf::<Sha256>::new(Some(HKDF_SALT), shared_secret);
    let expand = |label: &[u8]| {
        let mut okm = [0u8; 32];
        hk.expand(label, &mut okm).expect("32 bytes is a valid HKDF length");
        okm
    };
    HopKeys {
        forward_key: expand(LABEL_FWD_KEY),
        backward_key: expand(LABEL_BWD_KEY),
        forward_digest: DigestState::new(expand(LABEL_FWD_DIG)),
        backward_digest: DigestState::new(expand(LABEL_BWD_DIG)),
    }
}

/// ChaCha20 keystream per cell, nonce = cell counter. XOR makes add and peel the same operation.
#[derive(Clone)]
pub struct LayerCipherState {
    key: [u8; SYMMETRIC_KEY_LEN],
    counter: u64,
}

impl LayerCipherState {
    pub fn new(key: [u8; SYMMETRIC_KEY_LEN]) -> Self {
        LayerCipherState { key, counter: 0 }
    }

    pub fn with_counter(key: [u8; SYMMETRIC_KEY_LEN], counter: u64) -> Self {
        LayerCipherState { key, counter }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn apply_layer(&mut self, payload: &mut [u8; CELL_PAYLOAD_LEN]) -> Result<(), CipherError> {
        if self.counter == u64::MAX {
            return Err(CipherError::CounterExhausted);
        }
        let mut nonce = [0u8; 12];
        nonce[4..].copy_from_slice(&self.counter.to_be_bytes());
        let mut cipher = ChaCha20::new(&self.key.into(), &nonce.into());
        cipher.apply_keystream(payload);
        self.counter += 1;
        Ok(())
    }
}

impl std::fmt::Debug for LayerCipherState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerCipherState")
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

/// Running SHA-256 over every relay payload sent in one direction of one hop.
#[derive(Clone)]
pub struct DigestState {
    hasher: Sha256,
    absorbed: u64,
}

impl DigestState {
    pub fn new(seed: [u8; 32]) -> Self {
        DigestState {
            hasher: Sha256::new().chain_update(seed),
            absorbed: 0,
        }
    }

    /// Number of payloads absorbed so far.
    pub fn absorbed(&self) -> u64 {
        self.absorbed
    }

    fn absorb(&mut self, block: &[u8; CELL_PAYLOAD_LEN]) -> [u8; 4] {
        let mut zeroed = *block;
        zeroed[RELAY_DIGEST_OFFSET..RELAY_DIGEST_OFFSET + 4].fill(0);
        self.hasher.update(zeroed);
        self.absorbed += 1;
        let full = self.hasher.clone().finalize();
        [full[0], full[1], full[2], full[3]]
    }

    /// Absorbs an encoded relay payload and writes the truncated digest into it.
    pub fn seal_block(&mut self, block: &mut [u8; CELL_PAYLOAD_LEN]) {
        let d = self.absorb(block);
        block[RELAY_DIGEST_OFFSET..RELAY_DIGEST_OFFSET + 4].copy_from_slice(&d);
    }

    /// Absorbs an encoded relay payload and compares digests. Always advances.
    pub fn verify_block(&mut self, block: &[u8; CELL_PAYLOAD_LEN]) -> bool {
        let d = self.absorb(block);
        d == block[RELAY_DIGEST_OFFSET..RELAY_DIGEST_OFFSET + 4]
    }

    pub fn update_and_seal(&mut self, rp: &RelayPayload) -> RelayPayload {
        let mut block = encode_relay_payload(rp).expect("valid relay payload");
        self.seal_block(&mut block);
        decode_relay_payload(&block).expect("roundtrip")
    }

    pub fn verify(&mut self, rp: &RelayPayload) -> bool {
        match encode_relay_payload(rp) {
            Ok(block) => self.verify_block(&block),
            Err(_) => false,
        }
    }

    fn snapshot(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

impl PartialEq for DigestState {
    fn eq(&self, other: &Self) -> bool {
        self.absorbed == other.absorbed && self.snapshot() == other.snapshot()
    }
}

impl Eq for DigestState {}

impl std::fmt::Debug for DigestState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "DigestState({}, absorbed={})",
            &hex::encode(self.snapshot())[..16],
            self.absorbed
        )
    }
}

/// Hex digest of the running state; used by golden vectors.
pub fn digest_fingerprint(state: &DigestState) -> String {
    hex::encode(state.snapshot())
}
