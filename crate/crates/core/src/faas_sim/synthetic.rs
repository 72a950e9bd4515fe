//! Synthetic camera frames carrying ground-truth inference results, so
//! profile-backed apps can return meaningful outputs without a model.

use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"SSFRAME1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub label: String,
    pub score: f64,
}

impl InferenceResult {
    pub fn new(label: impl Into<String>, score: f64) -> Self {
        Self {
            label: label.into(),
            score,
        }
    }

    pub fn none() -> Self {
        Self::new("none", 0.0)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plain struct serializes")
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// Encodes `truth` followed by pseudo-random filler up to `size` bytes.
/// The header alone is used when `size` is smaller than it.
pub fn encode_frame(truth: &InferenceResult, size: usize, seed: u64) -> Vec<u8> {
    let header = truth.to_json_bytes();
    let mut out = Vec::with_capacity(size.max(MAGIC.len() + 4 + header.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_be_bytes());
    out.extend_from_slice(&header);
    // xorshift64*; seed 0 is remapped since it is a fixed point.
    let mut x = seed | 1;
    while out.len() < size {
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        let v = x.wrapping_mul(0x2545_F491_4F6C_DD1D);
        let take = (size - out.len()).min(8);
        out.extend_from_slice(&v.to_le_bytes()[..take]);
    }
    out
}

pub fn decode_frame(frame: &[u8]) -> Option<InferenceResult> {
    let rest = frame.strip_prefix(MAGIC.as_slice())?;
    let len = u32::from_be_bytes(rest.get(..4)?.try_into().ok()?) as usize;
    InferenceResult::from_json_bytes(rest.get(4..4 + len)?)
}

/// Stand-in for model inference: the frame's ground truth, or `none`.
pub fn synthetic_inference(frame: &[u8]) -> InferenceResult {
    decode_frame(frame).unwrap_or_else(InferenceResult::none)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let t = InferenceResult::new("person", 0.9);
        let f = encode_frame(&t, 64 * 1024, 7);
        assert_eq!(f.len(), 64 * 1024);
        assert_eq!(decode_frame(&f), Some(t.clone()));
        assert_eq!(encode_frame(&t, 64 * 1024, 7), f);
        assert_ne!(encode_frame(&t, 64 * 1024, 8), f);
    }

    #[test]
    fn garbage_is_none() {
        assert_eq!(synthetic_inference(b"not a frame"), InferenceResult::none());
        assert_eq!(synthetic_inference(b"SSFRAME1\xff\xff\xff\xff"), InferenceResult::none());
    }
}
