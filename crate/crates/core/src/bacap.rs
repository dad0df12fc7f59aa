//! Blinded capability chains for anonymous storage.
//!
//! A 256-bit seed `H_0` together with a root keypair `(S_R, P_R)` defines an
//! unbounded sequence of storage boxes. Box `i` under context `ctx` has a
//! Box-ID `M = P_R · K_ctx` that doubles as the Ed25519 verification key for
//! the per-box signing secret `S_ctx = S_R · K_ctx mod ℓ`. Holding the write
//! capability `(S_R, H_0)` lets you sign boxes; holding the read capability
//! `(P_R, H_0)` lets you enumerate, verify and decrypt them.
//!
//! Records are sealed with AES-256-GCM-SIV and signed with a Schnorr
//! signature computed directly over the derived scalar, so stock Ed25519
//! verification under `M` accepts them.

use aes_gcm_siv::aead::{Aead, KeyInit};
use aes_gcm_siv::{Aes256GcmSiv, Nonce};
use curve25519_dalek::constants::ED25519_BASEPOINT_TABLE;
use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::scalar::Scalar;
use ed25519_dalek::{Signature, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};
use std::fmt;
use thiserror::Error;

/// Context string binding a chain to the input side of a job.
pub const CTX_IN: &[u8] = b"funion/ctx-in/v1";
/// Context string binding a chain to the output side of a job.
pub const CTX_OUT: &[u8] = b"funion/ctx-out/v1";

pub const BOX_ID_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
/// AES-GCM-SIV authentication tag length.
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
/// Largest plaintext a single box may carry.
pub const MAX_PLAINTEXT: usize = 30_000;
/// Bytes a record adds on the wire beyond its plaintext.
pub const RECORD_OVERHEAD: usize = 4 + BOX_ID_LEN + SIGNATURE_LEN + TAG_LEN;

const CHAIN_SALT: &[u8] = b"funion/bacap/chain/v1";
const CTX_SALT: &[u8] = b"funion/bacap/ctx/v1";
const ROOT_SALT: &[u8] = b"funion/bacap/root/v1";
const SIGN_NONCE_LABEL: &[u8] = b"funion/bacap/sign-nonce/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BacapError {
    #[error("box index must be >= 1")]
    ZeroIndex,
    #[error("context must be non-empty")]
    EmptyContext,
    #[error("plaintext of {len} bytes exceeds the {max}-byte box capacity")]
    Oversize { len: usize, max: usize },
    #[error("record Box-ID does not match the derived box")]
    WrongBox,
    #[error("record signature does not verify under its Box-ID")]
    BadSignature,
    #[error("authenticated decryption failed")]
    DecryptFailure,
    #[error("malformed record encoding: {0}")]
    Malformed(&'static str),
}

pub type BoxId = [u8; BOX_ID_LEN];

/// Private/public root of a capability chain.
#[derive(Clone, PartialEq, Eq)]
pub struct RootKeypair {
    secret: Scalar,
    public: EdwardsPoint,
}

impl RootKeypair {
    fn from_secret(secret: Scalar) -> Self {
        Self {
            public: &secret * ED25519_BASEPOINT_TABLE,
            secret,
        }
    }

    pub fn secret(&self) -> &Scalar {
        &self.secret
    }

    pub fn public(&self) -> &EdwardsPoint {
        &self.public
    }
}

impl fmt::Debug for RootKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RootKeypair")
            .field("public", &hex::encode(self.public.compress().as_bytes()))
            .finish_non_exhaustive()
    }
}

/// Authority to create boxes: `W = (S_R, H_0)`.
#[derive(Clone, PartialEq, Eq)]
pub struct WriteCapability {
    root: RootKeypair,
    seed: [u8; 32],
}

/// Authority to enumerate, verify and decrypt boxes: `R = (P_R, H_0)`.
#[derive(Clone, PartialEq, Eq)]
pub struct ReadCapability {
    root_public: EdwardsPoint,
    seed: [u8; 32],
}

impl fmt::Debug for WriteCapability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WriteCapability")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl fmt::Debug for ReadCapability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReadCapability")
            .field("root_public", &hex::encode(self.root_public_bytes()))
            .field("seed", &hex::encode(self.seed))
            .finish()
    }
}

impl WriteCapability {
    /// Deterministically expands 64 bytes of seed material into a root
    /// scalar and a chain seed.
    pub fn from_seed(material: &[u8; 64]) -> Self {
        let hk = Hkdf::<Sha512>::new(Some(ROOT_SALT), material);
        let mut retry = 0u8;
        let secret = loop {
            let mut wide = [0u8; 64];
            hk.expand_multi_info(&[b"S_R", &[retry]], &mut wide)
                .expect("64 bytes is a valid HKDF-SHA512 length");
            let s = Scalar::from_bytes_mod_order_wide(&wide);
            if s != Scalar::ZERO {
                break s;
            }
            retry = retry.wrapping_add(1);
        };
        let mut seed = [0u8; 32];
        hk.expand(b"H_0", &mut seed)
            .expect("32 bytes is a valid HKDF-SHA512 length");
        Self {
            root: RootKeypair::from_secret(secret),
            seed,
        }
    }

    pub fn root(&self) -> &RootKeypair {
        &self.root
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub fn read_capability(&self) -> ReadCapability {
        ReadCapability {
            root_public: self.root.public,
            seed: self.seed,
        }
    }

    /// Compressed `P_R`; used as the identity of this capability in
    /// freshness registries.
    pub fn root_public_bytes(&self) -> [u8; 32] {
        self.root.public.compress().to_bytes()
    }
}

impl ReadCapability {
    pub fn root_public(&self) -> &EdwardsPoint {
        &self.root_public
    }

    pub fn root_public_bytes(&self) -> [u8; 32] {
        self.root_public.compress().to_bytes()
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }
}

/// Generates a fresh write capability and its paired read capability from
/// 512 bits drawn from `rng`.
pub fn generate_capability<R: RngCore + CryptoRng>(
    rng: &mut R,
) -> (WriteCapability, ReadCapability) {
    let mut material = [0u8; 64];
    rng.fill_bytes(&mut material);
    let write = WriteCapability::from_seed(&material);
    let read = write.read_capability();
    (write, read)
}

/// Position in the one-way hash chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainState {
    hash: [u8; 32],
    index: u64,
}

/// Raw per-index outputs of one chain step, before context blinding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainOutput {
    pub index: u64,
    pub hash: [u8; 32],
    pub enc_key: [u8; 32],
    pub blinding: Scalar,
    pub nonce: [u8; NONCE_LEN],
}

impl ChainState {
    /// State at index 0, holding the seed `H_0`.
    pub fn new(seed: [u8; 32]) -> Self {
        Self {
            hash: seed,
            index: 0,
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    /// One step `H_i, E_i, K_i = KDF(H_{i-1}, i)`.
    pub fn advance(&self) -> (ChainState, ChainOutput) {
        let index = self.index + 1;
        let hk = Hkdf::<Sha512>::new(Some(CHAIN_SALT), &self.hash);
        let index_be = index.to_be_bytes();
        let mut retry = 0u8;
        let mut okm = [0u8; 32 + 32 + 64 + NONCE_LEN];
        let blinding = loop {
            hk.expand_multi_info(&[&index_be, &[retry]], &mut okm)
                .expect("140 bytes is a valid HKDF-SHA512 length");
            let wide: [u8; 64] = okm[64..128].try_into().unwrap();
            let k = Scalar::from_bytes_mod_order_wide(&wide);
            if k != Scalar::ZERO {
                break k;
            }
            retry = retry.wrapping_add(1);
        };
        let out = ChainOutput {
            index,
            hash: okm[..32].try_into().unwrap(),
            enc_key: okm[32..64].try_into().unwrap(),
            blinding,
            nonce: okm[128..].try_into().unwrap(),
        };
        (
            ChainState {
                hash: out.hash,
                index,
            },
            out,
        )
    }
}

/// Iterator over chain outputs for indices 1, 2, ...
pub struct Chain {
    state: ChainState,
}

impl Chain {
    pub fn new(seed: [u8; 32]) -> Self {
        Self {
            state: ChainState::new(seed),
        }
    }
}

impl Iterator for Chain {
    type Item = ChainOutput;

    fn next(&mut self) -> Option<ChainOutput> {
        let (next, out) = self.state.advance();
        self.state = next;
        Some(out)
    }
}

/// Runs the chain forward to `index`.
pub fn chain_output(seed: &[u8; 32], index: u64) -> Result<ChainOutput, BacapError> {
    if index == 0 {
        return Err(BacapError::ZeroIndex);
    }
    Ok(Chain::new(*seed)
        .nth((index - 1) as usize)
        .expect("chain is unbounded"))
}

/// Keys for one box under one context.
#[derive(Clone, PartialEq, Eq)]
pub struct BoxKeys {
    pub index: u64,
    pub blinding: Scalar,
    pub enc_key: [u8; 32],
    pub nonce: [u8; NONCE_LEN],
    pub box_id: BoxId,
    /// Only present when derived from a write capability.
    pub signing_secret: Option<Scalar>,
}

impl fmt::Debug for BoxKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoxKeys")
            .field("index", &self.index)
            .field("box_id", &hex::encode(self.box_id))
            .field("has_signing_secret", &self.signing_secret.is_some())
            .finish_non_exhaustive()
    }
}

/// Either kind of capability can derive box locations and keys.
pub trait Capability {
    fn seed(&self) -> &[u8; 32];
    fn root_public(&self) -> &EdwardsPoint;
    fn root_secret(&self) -> Option<&Scalar>;
}

impl Capability for WriteCapability {
    fn seed(&self) -> &[u8; 32] {
        &self.seed
    }
    fn root_public(&self) -> &EdwardsPoint {
        &self.root.public
    }
    fn root_secret(&self) -> Option<&Scalar> {
        Some(&self.root.secret)
    }
}

impl Capability for ReadCapability {
    fn seed(&self) -> &[u8; 32] {
        &self.seed
    }
    fn root_public(&self) -> &EdwardsPoint {
        &self.root_public
    }
    fn root_secret(&self) -> Option<&Scalar> {
        None
    }
}

fn ctx_expand(ikm: &[u8], label: &[u8], ctx: &[u8], retry: u8, out: &mut [u8]) {
    let hk = Hkdf::<Sha512>::new(Some(CTX_SALT), ikm);
    let ctx_len = (ctx.len() as u32).to_be_bytes();
    hk.expand_multi_info(&[label, &ctx_len, ctx, &[retry]], out)
        .expect("output length is within HKDF-SHA512 limits");
}

/// Blinds one chain output under `ctx`. Useful when walking a chain with
/// [`Chain`] instead of re-deriving from the seed per index.
pub fn derive_box_from_output<C: Capability + ?Sized>(
    cap: &C,
    out: &ChainOutput,
    ctx: &[u8],
) -> Result<BoxKeys, BacapError> {
    if ctx.is_empty() {
        return Err(BacapError::EmptyContext);
    }
    let k_bytes = out.blinding.to_bytes();
    let mut retry = 0u8;
    let blinding = loop {
        let mut wide = [0u8; 64];
        ctx_expand(&k_bytes, b"K", ctx, retry, &mut wide);
        let k = Scalar::from_bytes_mod_order_wide(&wide);
        if k != Scalar::ZERO {
            break k;
        }
        retry = retry.wrapping_add(1);
    };
    let mut enc_key = [0u8; 32];
    ctx_expand(&out.enc_key, b"E", ctx, 0, &mut enc_key);
    let mut nonce = [0u8; NONCE_LEN];
    ctx_expand(&out.nonce, b"N", ctx, 0, &mut nonce);

    let (box_point, signing_secret) = match cap.root_secret() {
        Some(secret) => {
            let s = secret * blinding;
            (&s * ED25519_BASEPOINT_TABLE, Some(s))
        }
        None => (cap.root_public() * blinding, None),
    };
    Ok(BoxKeys {
        index: out.index,
        blinding,
        enc_key,
        nonce,
        box_id: box_point.compress().to_bytes(),
        signing_secret,
    })
}

/// Derives the keys of box `index` under `ctx`.
pub fn derive_box<C: Capability + ?Sized>(
    cap: &C,
    index: u64,
    ctx: &[u8],
) -> Result<BoxKeys, BacapError> {
    if ctx.is_empty() {
        return Err(BacapError::EmptyContext);
    }
    let out = chain_output(cap.seed(), index)?;
    derive_box_from_output(cap, &out, ctx)
}

/// The stored unit `(M, c, s)`.
#[derive(Clone, PartialEq, Eq)]
pub struct BoxRecord {
    pub box_id: BoxId,
    pub ciphertext: Vec<u8>,
    pub signature: [u8; SIGNATURE_LEN],
}

impl fmt::Debug for BoxRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoxRecord")
            .field("box_id", &hex::encode(self.box_id))
            .field("ciphertext_len", &self.ciphertext.len())
            .finish_non_exhaustive()
    }
}

impl BoxRecord {
    /// `len(c) as u32 BE ‖ M ‖ s ‖ c`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.box_id);
        out.extend_from_slice(&self.signature);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BacapError> {
        let header = 4 + BOX_ID_LEN + SIGNATURE_LEN;
        if bytes.len() < header {
            return Err(BacapError::Malformed("truncated header"));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != header + len {
            return Err(BacapError::Malformed("ciphertext length mismatch"));
        }
        Ok(Self {
            box_id: bytes[4..36].try_into().unwrap(),
            signature: bytes[36..100].try_into().unwrap(),
            ciphertext: bytes[header..].to_vec(),
        })
    }

    pub fn wire_len(&self) -> usize {
        4 + BOX_ID_LEN + SIGNATURE_LEN + self.ciphertext.len()
    }
}

/// Schnorr signature over `msg` with a raw scalar secret; the verification
/// key is `secret · B`, encoded as `public`.
pub(crate) fn sign_with_scalar(secret: &Scalar, public: &BoxId, msg: &[u8]) -> [u8; 64] {
    let r = Scalar::from_hash(
        Sha512::new()
            .chain_update(SIGN_NONCE_LABEL)
            .chain_update(secret.as_bytes())
            .chain_update(msg),
    );
    let big_r = (&r * ED25519_BASEPOINT_TABLE).compress();
    let k = Scalar::from_hash(
        Sha512::new()
            .chain_update(big_r.as_bytes())
            .chain_update(public)
            .chain_update(msg),
    );
    let s = r + k * secret;
    let mut sig = [0u8; 64];
    sig[..32].copy_from_slice(big_r.as_bytes());
    sig[32..].copy_from_slice(s.as_bytes());
    sig
}

/// Seals `plaintext` into box `index` of the chain under `ctx`.
pub fn seal(
    write_cap: &WriteCapability,
    index: u64,
    ctx: &[u8],
    plaintext: &[u8],
) -> Result<BoxRecord, BacapError> {
    if index == 0 {
        return Err(BacapError::ZeroIndex);
    }
    let keys = derive_box(write_cap, index, ctx)?;
    seal_with_keys(&keys, plaintext)
}

/// Seals with already-derived keys (must carry a signing secret).
pub fn seal_with_keys(keys: &BoxKeys, plaintext: &[u8]) -> Result<BoxRecord, BacapError> {
    if plaintext.len() > MAX_PLAINTEXT {
        return Err(BacapError::Oversize {
            len: plaintext.len(),
            max: MAX_PLAINTEXT,
        });
    }
    let secret = keys
        .signing_secret
        .as_ref()
        .expect("sealing requires keys derived from a write capability");
    let cipher = Aes256GcmSiv::new((&keys.enc_key).into());
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&keys.nonce), plaintext)
        .expect("AES-GCM-SIV encryption of a bounded plaintext cannot fail");
    let signature = sign_with_scalar(secret, &keys.box_id, &ciphertext);
    Ok(BoxRecord {
        box_id: keys.box_id,
        ciphertext,
        signature,
    })
}

/// Replica-side check: does `s` verify over `c` under the key `M`?
///
/// Needs no capability. A malformed `M` yields `false`.
pub fn verify_record(record: &BoxRecord) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&record.box_id) else {
        return false;
    };
    let sig = Signature::from_bytes(&record.signature);
    key.verify_strict(&record.ciphertext, &sig).is_ok()
}

/// Opens a record as box `index` under `ctx`. Checks the Box-ID, then the
/// signature, then decrypts.
pub fn open<C: Capability + ?Sized>(
    cap: &C,
    index: u64,
    ctx: &[u8],
    record: &BoxRecord,
) -> Result<Vec<u8>, BacapError> {
    let keys = derive_box(cap, index, ctx)?;
    open_with_keys(&keys, record)
}

pub fn open_with_keys(keys: &BoxKeys, record: &BoxRecord) -> Result<Vec<u8>, BacapError> {
    if record.box_id != keys.box_id {
        return Err(BacapError::WrongBox);
    }
    if !verify_record(record) {
        return Err(BacapError::BadSignature);
    }
    let cipher = Aes256GcmSiv::new((&keys.enc_key).into());
    cipher
        .decrypt(Nonce::from_slice(&keys.nonce), record.ciphertext.as_slice())
        .map_err(|_| BacapError::DecryptFailure)
}

/// Decodes a compressed Box-ID; `None` when it is not a curve point.
pub fn decode_box_id(box_id: &BoxId) -> Option<EdwardsPoint> {
    CompressedEdwardsY(*box_id).decompress()
}
