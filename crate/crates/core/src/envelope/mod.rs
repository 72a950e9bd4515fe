//! Hybrid envelope encryption for offloaded invocations.
//!
//! Device data travels as `Enc[Enc(data)_KA]_K`: an inner public-key layer
//! under the app key, wrapped by an AEAD layer under a per-request data key
//! `K`. The data key itself travels as `Enc[Enc(K)_KA]_KM`, signed by the hub
//! with the app signing key, so that only the KMS can strip the outer layer
//! and only the holder of the app private key can open the inner one.
//!
//! Public-key layers are ECIES-style: an ephemeral X25519 exchange, HKDF-SHA256
//! key derivation and AES-256-GCM. Every symmetric layer is AES-256-GCM, so a
//! wrong key or a flipped bit always surfaces as an error.

pub mod b64;
mod keys;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signature, Signer, Verifier};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};
use zeroize::Zeroizing;

pub use keys::{
    generate_app_keypair, generate_data_key, AppId, AppKeyMaterial, AppKeyPair, AppPrivateKey,
    AppPublicKey, DataKey, KmsId, KmsKeyPair, KmsPublicKey, DATA_KEY_LEN,
};

/// Largest plaintext accepted by [`seal_data`].
pub const DEFAULT_MAX_PAYLOAD: usize = 5 * 1024 * 1024;

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;

const INFO_DATA_INNER: &[u8] = b"ssiot/data-inner/v1";
const INFO_KEY_INNER: &[u8] = b"ssiot/key-inner/v1";
const INFO_KEY_OUTER: &[u8] = b"ssiot/key-outer/v1";
const AAD_SEALED_DATA: &[u8] = b"ssiot/sealed-data/v1";
const AAD_RESULT: &[u8] = b"ssiot/result/v1";
const SIG_DOMAIN: &[u8] = b"ssiot/wrap/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("app id must be nonempty")]
    EmptyAppId,
    #[error("entropy source failure: {0}")]
    Entropy(String),
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("authentication failed on the data-key layer")]
    Authentication,
    #[error("outer (KMS) layer could not be decrypted")]
    OuterDecryptFailed,
    #[error("inner (app) layer could not be decrypted")]
    InnerDecryptFailed,
    #[error("hub signature did not verify")]
    SignatureInvalid,
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

/// `Enc[Enc(data)_KA]_K`, or for results just `Enc(result)_K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedData {
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub auth_tag: Vec<u8>,
}

/// `Enc[Enc(K)_KA]_KM` with the hub signature over the inner blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKey {
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
    pub signer_app_id: AppId,
    pub kms_id: KmsId,
}

impl SealedData {
    /// Canonical JSON encoding (fixed field order, base64 binary fields).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("SealedData serializes")
    }
}

impl WrappedKey {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("WrappedKey serializes")
    }
}

fn random_nonce() -> Result<[u8; NONCE_LEN], EnvelopeError> {
    let mut nonce = [0u8; NONCE_LEN];
    OsRng
        .try_fill_bytes(&mut nonce)
        .map_err(|e| EnvelopeError::Entropy(e.to_string()))?;
    Ok(nonce)
}

fn aead_seal(key: &[u8; 32], aad: &[u8], plaintext: &[u8]) -> Result<SealedData, EnvelopeError> {
    let cipher = Aes256Gcm::new(key.into());
    let nonce = random_nonce()?;
    let mut out = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .map_err(|_| EnvelopeError::Malformed("aead encryption failed".into()))?;
    let tag = out.split_off(out.len() - TAG_LEN);
    Ok(SealedData {
        ciphertext: out,
        nonce: nonce.to_vec(),
        auth_tag: tag,
    })
}

fn aead_open(key: &[u8; 32], aad: &[u8], sealed: &SealedData) -> Result<Vec<u8>, EnvelopeError> {
    if sealed.nonce.len() != NONCE_LEN || sealed.auth_tag.len() != TAG_LEN {
        return Err(EnvelopeError::Authentication);
    }
    let cipher = Aes256Gcm::new(key.into());
    let mut buf = Vec::with_capacity(sealed.ciphertext.len() + TAG_LEN);
    buf.extend_from_slice(&sealed.ciphertext);
    buf.extend_from_slice(&sealed.auth_tag);
    cipher
        .decrypt(
            Nonce::from_slice(&sealed.nonce),
            Payload {
                msg: &buf,
                aad,
            },
        )
        .map_err(|_| EnvelopeError::Authentication)
}

fn derive_box_key(
    shared: &[u8; 32],
    ephemeral: &[u8; 32],
    recipient: &[u8; 32],
    info: &[u8],
) -> Zeroizing<[u8; 32]> {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = Zeroizing::new([0u8; 32]);
    hk.expand(info, okm.as_mut()).expect("32 bytes is a valid HKDF length");
    okm
}

/// Public-key encryption to an X25519 recipient: `eph_pub || AES-GCM(ct || tag)`.
/// The derived key is single-use, so a fixed nonce is safe here.
fn box_seal(recipient: &X25519Public, plaintext: &[u8], info: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
    let mut seed = Zeroizing::new([0u8; 32]);
    OsRng
        .try_fill_bytes(seed.as_mut())
        .map_err(|e| EnvelopeError::Entropy(e.to_string()))?;
    let eph = StaticSecret::from(*seed);
    let eph_pub = X25519Public::from(&eph);
    let shared = eph.diffie_hellman(recipient);
    let key = derive_box_key(shared.as_bytes(), eph_pub.as_bytes(), recipient.as_bytes(), info);
    let cipher = Aes256Gcm::new(key.as_ref().into());
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&[0u8; NONCE_LEN]),
            Payload { msg: plaintext, aad: info },
        )
        .map_err(|_| EnvelopeError::Malformed("aead encryption failed".into()))?;
    let mut out = Vec::with_capacity(32 + ct.len());
    out.extend_from_slice(eph_pub.as_bytes());
    out.extend_from_slice(&ct);
    Ok(out)
}

fn box_open(secret: &StaticSecret, blob: &[u8], info: &[u8]) -> Option<Vec<u8>> {
    if blob.len() < 32 + TAG_LEN {
        return None;
    }
    let mut eph = [0u8; 32];
    eph.copy_from_slice(&blob[..32]);
    let eph_pub = X25519Public::from(eph);
    let shared = secret.diffie_hellman(&eph_pub);
    if !shared.was_contributory() {
        return None;
    }
    let recipient = X25519Public::from(secret);
    let key = derive_box_key(shared.as_bytes(), &eph, recipient.as_bytes(), info);
    let cipher = Aes256Gcm::new(key.as_ref().into());
    cipher
        .decrypt(
            Nonce::from_slice(&[0u8; NONCE_LEN]),
            Payload {
                msg: &blob[32..],
                aad: info,
            },
        )
        .ok()
}

/// Seals a payload for one request with the default 5 MiB limit.
pub fn seal_data(
    plaintext: &[u8],
    app_public: &AppPublicKey,
    data_key: &DataKey,
) -> Result<SealedData, EnvelopeError> {
    seal_data_limited(plaintext, app_public, data_key, DEFAULT_MAX_PAYLOAD)
}

pub fn seal_data_limited(
    plaintext: &[u8],
    app_public: &AppPublicKey,
    data_key: &DataKey,
    max_payload: usize,
) -> Result<SealedData, EnvelopeError> {
    if plaintext.len() > max_payload {
        return Err(EnvelopeError::PayloadTooLarge {
            size: plaintext.len(),
            max: max_payload,
        });
    }
    let inner = box_seal(&app_public.x25519(), plaintext, INFO_DATA_INNER)?;
    aead_seal(data_key.as_bytes(), AAD_SEALED_DATA, &inner)
}

/// Opens [`SealedData`]; needs both the data key and the app private key.
pub fn open_data(
    sealed: &SealedData,
    data_key: &DataKey,
    app_private: &AppPrivateKey,
) -> Result<Vec<u8>, EnvelopeError> {
    let inner = aead_open(data_key.as_bytes(), AAD_SEALED_DATA, sealed)?;
    box_open(app_private.decryption(), &inner, INFO_DATA_INNER).ok_or(EnvelopeError::InnerDecryptFailed)
}

fn signed_message(app_id: &AppId, kms_id: &KmsId, inner: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(SIG_DOMAIN.len() + 16 + inner.len() + 64);
    msg.extend_from_slice(SIG_DOMAIN);
    for part in [app_id.as_str().as_bytes(), kms_id.as_str().as_bytes(), inner] {
        msg.extend_from_slice(&(part.len() as u64).to_be_bytes());
        msg.extend_from_slice(part);
    }
    msg
}

/// Wraps the data key for the KMS, signing the app-layer blob with the
/// hub-held app signing key.
pub fn wrap_data_key(
    data_key: &DataKey,
    app_keypair: &AppKeyPair,
    kms_public: &KmsPublicKey,
) -> Result<WrappedKey, EnvelopeError> {
    let inner = box_seal(&app_keypair.public.x25519(), data_key.as_bytes(), INFO_KEY_INNER)?;
    let msg = signed_message(&app_keypair.app_id, &kms_public.kms_id, &inner);
    let signature = app_keypair.private.signing().sign(&msg);
    let outer = box_seal(&kms_public.x25519(), &inner, INFO_KEY_OUTER)?;
    Ok(WrappedKey {
        ciphertext: outer,
        signature: signature.to_bytes().to_vec(),
        signer_app_id: app_keypair.app_id.clone(),
        kms_id: kms_public.kms_id.clone(),
    })
}

/// KMS-side unwrap. Checks run outer layer, then signature, then inner layer,
/// and each failure is reported distinctly.
pub fn kms_unwrap(
    wrapped: &WrappedKey,
    kms: &KmsKeyPair,
    registered: &AppKeyMaterial,
) -> Result<DataKey, EnvelopeError> {
    let inner = Zeroizing::new(
        box_open(kms.secret(), &wrapped.ciphertext, INFO_KEY_OUTER).ok_or(EnvelopeError::OuterDecryptFailed)?,
    );
    let sig_bytes: [u8; 64] = wrapped
        .signature
        .as_slice()
        .try_into()
        .map_err(|_| EnvelopeError::SignatureInvalid)?;
    let signature = Signature::from_bytes(&sig_bytes);
    let msg = signed_message(&wrapped.signer_app_id, &wrapped.kms_id, &inner);
    registered
        .public
        .verifying_key()?
        .verify(&msg, &signature)
        .map_err(|_| EnvelopeError::SignatureInvalid)?;
    let key = Zeroizing::new(
        box_open(registered.private.decryption(), &inner, INFO_KEY_INNER)
            .ok_or(EnvelopeError::InnerDecryptFailed)?,
    );
    DataKey::from_bytes(&key).map_err(|_| EnvelopeError::InnerDecryptFailed)
}

/// Seals a function result under the request's data key only.
pub fn seal_result(result: &[u8], data_key: &DataKey) -> Result<SealedData, EnvelopeError> {
    aead_seal(data_key.as_bytes(), AAD_RESULT, result)
}

pub fn open_result(sealed: &SealedData, data_key: &DataKey) -> Result<Vec<u8>, EnvelopeError> {
    aead_open(data_key.as_bytes(), AAD_RESULT, sealed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn app(name: &str) -> AppKeyPair {
        generate_app_keypair(&AppId::new(name).unwrap()).unwrap()
    }

    #[test]
    fn keypairs_are_fresh_and_valid() {
        let id = AppId::new("doorbell").unwrap();
        let a = generate_app_keypair(&id).unwrap();
        let b = generate_app_keypair(&id).unwrap();
        assert_ne!(a.public, b.public);
        assert_ne!(a.private, b.private);

        let sig = a.private.signing().sign(b"msg");
        assert!(a.public.verifying_key().unwrap().verify(b"msg", &sig).is_ok());

        let blob = box_seal(&a.public.x25519(), b"msg", b"t").unwrap();
        assert_eq!(box_open(a.private.decryption(), &blob, b"t").unwrap(), b"msg");
    }

    #[test]
    fn empty_app_id_rejected() {
        assert_eq!(AppId::new("  ").unwrap_err(), EnvelopeError::EmptyAppId);
    }

    #[test]
    fn data_keys_are_32_bytes_and_distinct() {
        let keys: Vec<_> = (0..1000).map(|_| generate_data_key().unwrap()).collect();
        let set: std::collections::HashSet<_> = keys.iter().map(|k| *k.as_bytes()).collect();
        assert_eq!(set.len(), 1000);
        assert!(keys.iter().all(|k| k.as_bytes().len() == 32));
        for pos in 0..DATA_KEY_LEN {
            let first = keys[0].as_bytes()[pos];
            assert!(keys.iter().any(|k| k.as_bytes()[pos] != first), "byte {pos} constant");
        }
    }

    #[test]
    fn seal_open_roundtrip_and_wrong_keys() {
        let a = app("a");
        let b = app("b");
        let k = generate_data_key().unwrap();
        let sealed = seal_data(b"frame bytes", &a.public, &k).unwrap();
        assert_eq!(open_data(&sealed, &k, &a.private).unwrap(), b"frame bytes");

        let other = generate_data_key().unwrap();
        assert_eq!(open_data(&sealed, &other, &a.private), Err(EnvelopeError::Authentication));
        assert_eq!(open_data(&sealed, &k, &b.private), Err(EnvelopeError::InnerDecryptFailed));
    }

    #[test]
    fn oversize_payload_rejected() {
        let a = app("a");
        let k = generate_data_key().unwrap();
        let err = seal_data_limited(&[0u8; 11], &a.public, &k, 10).unwrap_err();
        assert_eq!(err, EnvelopeError::PayloadTooLarge { size: 11, max: 10 });
        assert!(seal_data_limited(&[0u8; 10], &a.public, &k, 10).is_ok());
    }

    #[test]
    fn wrap_unwrap_paths() {
        let a = app("a");
        let kms = KmsKeyPair::generate().unwrap();
        let k = generate_data_key().unwrap();
        let wrapped = wrap_data_key(&k, &a, kms.public()).unwrap();
        assert_eq!(kms_unwrap(&wrapped, &kms, &a.material()).unwrap(), k);

        let mut tampered = wrapped.clone();
        tampered.ciphertext[40] ^= 1;
        assert_eq!(kms_unwrap(&tampered, &kms, &a.material()), Err(EnvelopeError::OuterDecryptFailed));

        let other_kms = KmsKeyPair::generate().unwrap();
        assert_eq!(
            kms_unwrap(&wrapped, &other_kms, &a.material()),
            Err(EnvelopeError::OuterDecryptFailed)
        );

        let mut stripped = wrapped.clone();
        stripped.signature.clear();
        assert_eq!(kms_unwrap(&stripped, &kms, &a.material()), Err(EnvelopeError::SignatureInvalid));
    }

    #[test]
    fn forged_signature_fails_at_kms() {
        let a = app("a");
        let mallory = AppKeyPair {
            app_id: a.app_id.clone(),
            ..app("mallory")
        };
        let kms = KmsKeyPair::generate().unwrap();
        let k = generate_data_key().unwrap();
        let forged = wrap_data_key(&k, &mallory, kms.public()).unwrap();
        assert_eq!(kms_unwrap(&forged, &kms, &a.material()), Err(EnvelopeError::SignatureInvalid));
    }

    #[test]
    fn inner_layer_needs_registered_private_key() {
        let a = app("a");
        let kms = KmsKeyPair::generate().unwrap();
        let k = generate_data_key().unwrap();
        let wrapped = wrap_data_key(&k, &a, kms.public()).unwrap();
        // right verifying key, wrong decryption key
        let mut wrong = a.material();
        wrong.private = app("z").private;
        assert_eq!(kms_unwrap(&wrapped, &kms, &wrong), Err(EnvelopeError::InnerDecryptFailed));
    }

    #[test]
    fn results_are_confined_to_their_data_key() {
        let k1 = generate_data_key().unwrap();
        let k2 = generate_data_key().unwrap();
        let sealed = seal_result(b"{\"label\":\"person\"}", &k1).unwrap();
        assert_eq!(open_result(&sealed, &k1).unwrap(), b"{\"label\":\"person\"}");
        assert_eq!(open_result(&sealed, &k2), Err(EnvelopeError::Authentication));

        let empty = seal_result(b"", &k1).unwrap();
        assert_eq!(open_result(&empty, &k1).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn result_cannot_pass_as_data() {
        let a = app("a");
        let k = generate_data_key().unwrap();
        let sealed = seal_result(b"x", &k).unwrap();
        assert!(open_data(&sealed, &k, &a.private).is_err());
    }

    #[test]
    fn debug_output_redacts_secrets() {
        let a = app("a");
        let k = generate_data_key().unwrap();
        assert!(!format!("{:?}", a.private).contains(&hex::encode(&a.private.to_bytes()[..4])));
        assert_eq!(format!("{k:?}"), "DataKey(<redacted>)");
    }
}
