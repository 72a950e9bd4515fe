//! Key material for apps, the KMS and individual requests.
//!
//! A logical asymmetric key pair is made of two sub-keys: an X25519 key for
//! encryption and an Ed25519 key for signatures. Both halves are generated
//! together and always travel together.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use ed25519_dalek::{SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};
use zeroize::{Zeroize, Zeroizing};

use super::{b64, EnvelopeError};

pub const DATA_KEY_LEN: usize = 32;

/// Identifier of an application registered with the hub and the KMS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppId(String);

impl AppId {
    pub fn new(id: impl Into<String>) -> Result<Self, EnvelopeError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(EnvelopeError::EmptyAppId);
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of a KMS instance, derived from its public key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KmsId(String);

impl KmsId {
    pub fn from_public_key(public: &[u8; 32]) -> Self {
        let digest = Sha256::digest(public);
        Self(format!("kms-{}", hex::encode(&digest[..8])))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for KmsId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl fmt::Display for KmsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn random_32() -> Result<Zeroizing<[u8; 32]>, EnvelopeError> {
    let mut bytes = Zeroizing::new([0u8; 32]);
    OsRng
        .try_fill_bytes(bytes.as_mut())
        .map_err(|e| EnvelopeError::Entropy(e.to_string()))?;
    Ok(bytes)
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Public half of an app key pair (K_A).
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppPublicKey {
    #[serde(with = "b64::array32")]
    pub encryption: [u8; 32],
    #[serde(with = "b64::array32")]
    pub verifying: [u8; 32],
}

impl AppPublicKey {
    pub(crate) fn x25519(&self) -> X25519Public {
        X25519Public::from(self.encryption)
    }

    pub(crate) fn verifying_key(&self) -> Result<VerifyingKey, EnvelopeError> {
        VerifyingKey::from_bytes(&self.verifying).map_err(|_| EnvelopeError::SignatureInvalid)
    }
}

impl fmt::Debug for AppPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AppPublicKey")
            .field("encryption", &hex::encode(&self.encryption[..8]))
            .field("verifying", &hex::encode(&self.verifying[..8]))
            .finish()
    }
}

/// Private half of an app key pair (K_A^-1).
#[derive(Clone)]
pub struct AppPrivateKey {
    decryption: StaticSecret,
    signing: SigningKey,
}

impl AppPrivateKey {
    pub(crate) fn decryption(&self) -> &StaticSecret {
        &self.decryption
    }

    pub(crate) fn signing(&self) -> &SigningKey {
        &self.signing
    }

    pub fn public_key(&self) -> AppPublicKey {
        AppPublicKey {
            encryption: X25519Public::from(&self.decryption).to_bytes(),
            verifying: self.signing.verifying_key().to_bytes(),
        }
    }

    /// Raw secret bytes, decryption half followed by signing half.
    pub fn to_bytes(&self) -> Zeroizing<[u8; 64]> {
        let mut out = Zeroizing::new([0u8; 64]);
        out[..32].copy_from_slice(self.decryption.as_bytes());
        out[32..].copy_from_slice(&self.signing.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        if bytes.len() != 64 {
            return Err(EnvelopeError::Malformed("app private key must be 64 bytes".into()));
        }
        let mut dec = [0u8; 32];
        let mut sig = [0u8; 32];
        dec.copy_from_slice(&bytes[..32]);
        sig.copy_from_slice(&bytes[32..]);
        let key = Self {
            decryption: StaticSecret::from(dec),
            signing: SigningKey::from_bytes(&sig),
        };
        dec.zeroize();
        sig.zeroize();
        Ok(key)
    }
}

impl PartialEq for AppPrivateKey {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes()[..] == other.to_bytes()[..]
    }
}

impl fmt::Debug for AppPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AppPrivateKey(<redacted>)")
    }
}

impl Serialize for AppPrivateKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        b64::serialize(&self.to_bytes()[..], s)
    }
}

impl<'de> Deserialize<'de> for AppPrivateKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bytes = Zeroizing::new(b64::deserialize(d)?);
        Self::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// Complete key material for one app; this is what the KMS stores on
/// registration and what the hub keeps in its key store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppKeyMaterial {
    pub public: AppPublicKey,
    pub private: AppPrivateKey,
}

impl AppKeyMaterial {
    pub fn is_consistent(&self) -> bool {
        self.private.public_key() == self.public
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppKeyPair {
    pub app_id: AppId,
    pub public: AppPublicKey,
    pub private: AppPrivateKey,
}

impl AppKeyPair {
    pub fn material(&self) -> AppKeyMaterial {
        AppKeyMaterial {
            public: self.public.clone(),
            private: self.private.clone(),
        }
    }
}

/// Generates a fresh app key pair. Two calls never share key material.
pub fn generate_app_keypair(app_id: &AppId) -> Result<AppKeyPair, EnvelopeError> {
    if app_id.as_str().trim().is_empty() {
        return Err(EnvelopeError::EmptyAppId);
    }
    let dec = random_32()?;
    let sig = random_32()?;
    let private = AppPrivateKey {
        decryption: StaticSecret::from(*dec),
        signing: SigningKey::from_bytes(&sig),
    };
    Ok(AppKeyPair {
        app_id: app_id.clone(),
        public: private.public_key(),
        private,
    })
}

/// Public key of a KMS (K_M) together with its identity (M).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmsPublicKey {
    pub kms_id: KmsId,
    #[serde(with = "b64::array32")]
    pub public_key: [u8; 32],
}

impl KmsPublicKey {
    pub(crate) fn x25519(&self) -> X25519Public {
        X25519Public::from(self.public_key)
    }
}

#[derive(Clone)]
pub struct KmsKeyPair {
    public: KmsPublicKey,
    secret: StaticSecret,
}

impl KmsKeyPair {
    pub fn generate() -> Result<Self, EnvelopeError> {
        let seed = random_32()?;
        Ok(Self::from_secret_bytes(*seed))
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public_key = X25519Public::from(&secret).to_bytes();
        Self {
            public: KmsPublicKey {
                kms_id: KmsId::from_public_key(&public_key),
                public_key,
            },
            secret,
        }
    }

    pub fn secret_bytes(&self) -> Zeroizing<[u8; 32]> {
        Zeroizing::new(self.secret.to_bytes())
    }

    pub fn public(&self) -> &KmsPublicKey {
        &self.public
    }

    pub fn kms_id(&self) -> &KmsId {
        &self.public.kms_id
    }

    pub(crate) fn secret(&self) -> &StaticSecret {
        &self.secret
    }
}

impl fmt::Debug for KmsKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KmsKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Per-request symmetric data key (K).
#[derive(Clone)]
pub struct DataKey {
    bytes: Zeroizing<[u8; DATA_KEY_LEN]>,
    created_at: u64,
}

impl DataKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        if bytes.len() != DATA_KEY_LEN {
            return Err(EnvelopeError::Malformed(format!(
                "data key must be {DATA_KEY_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let mut arr = Zeroizing::new([0u8; DATA_KEY_LEN]);
        arr.copy_from_slice(bytes);
        Ok(Self {
            bytes: arr,
            created_at: unix_millis(),
        })
    }

    pub fn as_bytes(&self) -> &[u8; DATA_KEY_LEN] {
        &self.bytes
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }
}

impl PartialEq for DataKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes[..] == other.bytes[..]
    }
}

impl Eq for DataKey {}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DataKey(<redacted>)")
    }
}

/// Draws a fresh 256-bit data key from the operating system RNG.
pub fn generate_data_key() -> Result<DataKey, EnvelopeError> {
    let bytes = random_32()?;
    Ok(DataKey {
        bytes,
        created_at: unix_millis(),
    })
}
