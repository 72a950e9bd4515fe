//! Wire-format fixtures. Blobs sealed by an earlier build must keep opening
//! with the same keys; regenerate with `SSIOT_BLESS=1` only on a deliberate
//! format change.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use ssiot_core::envelope::{
    b64, kms_unwrap, open_data, open_result, seal_data, seal_result, wrap_data_key, AppId, AppKeyPair, AppPrivateKey,
    DataKey, EnvelopeError, KmsKeyPair, SealedData, WrappedKey,
};

#[derive(Serialize, Deserialize)]
struct Fixture {
    app_id: String,
    app_private: String,
    kms_secret: String,
    data_key: String,
    plaintext: String,
    result_plaintext: String,
    sealed: SealedData,
    wrapped: WrappedKey,
    sealed_result: SealedData,
}

fn path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/envelope_v1.json")
}

fn app_pair(f: &Fixture) -> AppKeyPair {
    let private = AppPrivateKey::from_bytes(&b64::decode(&f.app_private).unwrap()).unwrap();
    AppKeyPair {
        app_id: AppId::new(f.app_id.clone()).unwrap(),
        public: private.public_key(),
        private,
    }
}

fn kms(f: &Fixture) -> KmsKeyPair {
    KmsKeyPair::from_secret_bytes(b64::decode(&f.kms_secret).unwrap().try_into().unwrap())
}

fn bless() -> Fixture {
    let secret: Vec<u8> = (0u8..64).map(|i| i.wrapping_mul(37).wrapping_add(11)).collect();
    let private = AppPrivateKey::from_bytes(&secret).unwrap();
    let app = AppKeyPair {
        app_id: AppId::new("golden-app").unwrap(),
        public: private.public_key(),
        private,
    };
    let kms = KmsKeyPair::from_secret_bytes([0x5a; 32]);
    let key = DataKey::from_bytes(&[0xc3; 32]).unwrap();
    let plaintext = b"golden payload: motion at porch".to_vec();
    let result = br#"{"label":"person","score":0.91}"#.to_vec();
    Fixture {
        app_id: "golden-app".into(),
        app_private: b64::encode(&secret),
        kms_secret: b64::encode(&[0x5a; 32]),
        data_key: b64::encode(key.as_bytes()),
        plaintext: b64::encode(&plaintext),
        result_plaintext: b64::encode(&result),
        sealed: seal_data(&plaintext, &app.public, &key).unwrap(),
        wrapped: wrap_data_key(&key, &app, kms.public()).unwrap(),
        sealed_result: seal_result(&result, &key).unwrap(),
    }
}

fn load() -> Fixture {
    if std::env::var_os("SSIOT_BLESS").is_some() {
        let f = bless();
        std::fs::create_dir_all(path().parent().unwrap()).unwrap();
        std::fs::write(path(), serde_json::to_string_pretty(&f).unwrap() + "\n").unwrap();
    }
    serde_json::from_str(&std::fs::read_to_string(path()).expect("golden fixture present")).unwrap()
}

#[test]
fn golden_blobs_still_open() {
    let f = load();
    let app = app_pair(&f);
    let kms = kms(&f);
    let key = kms_unwrap(&f.wrapped, &kms, &app.material()).unwrap();
    assert_eq!(b64::encode(key.as_bytes()), f.data_key);
    assert_eq!(b64::encode(&open_data(&f.sealed, &key, &app.private).unwrap()), f.plaintext);
    assert_eq!(b64::encode(&open_result(&f.sealed_result, &key).unwrap()), f.result_plaintext);
    assert_eq!(f.wrapped.kms_id, *kms.kms_id());
}

#[test]
fn golden_blobs_reject_tampering() {
    let f = load();
    let app = app_pair(&f);
    let kms = kms(&f);
    let key = DataKey::from_bytes(&b64::decode(&f.data_key).unwrap()).unwrap();

    let mut sealed = f.sealed.clone();
    sealed.ciphertext[3] ^= 1;
    assert_eq!(open_data(&sealed, &key, &app.private), Err(EnvelopeError::Authentication));

    let mut wrapped = f.wrapped.clone();
    wrapped.signature[0] ^= 1;
    assert_eq!(kms_unwrap(&wrapped, &kms, &app.material()), Err(EnvelopeError::SignatureInvalid));

    let mut wrapped = f.wrapped.clone();
    let last = wrapped.ciphertext.len() - 1;
    wrapped.ciphertext[last] ^= 1;
    assert_eq!(kms_unwrap(&wrapped, &kms, &app.material()), Err(EnvelopeError::OuterDecryptFailed));
}

#[test]
fn canonical_encoding_field_order() {
    let f = load();
    let sealed = f.sealed.to_canonical_json();
    assert!(sealed.starts_with(r#"{"ciphertext":""#), "{sealed}");
    let (c, n, t) = (
        sealed.find("\"ciphertext\"").unwrap(),
        sealed.find("\"nonce\"").unwrap(),
        sealed.find("\"auth_tag\"").unwrap(),
    );
    assert!(c < n && n < t);
    let wrapped = f.wrapped.to_canonical_json();
    let keys: Vec<_> = ["ciphertext", "signature", "signer_app_id", "kms_id"]
        .iter()
        .map(|k| wrapped.find(&format!("\"{k}\"")).unwrap())
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    let back: WrappedKey = serde_json::from_str(&wrapped).unwrap();
    assert_eq!(back, f.wrapped);
}
