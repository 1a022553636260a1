use bytes::Bytes;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    User,
    Item,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureKey {
    pub kind: KeyKind,
    pub id: u64,
}

impl FeatureKey {
    pub fn user(id: u64) -> Self {
        Self { kind: KeyKind::User, id }
    }

    pub fn item(id: u64) -> Self {
        Self { kind: KeyKind::Item, id }
    }

    /// Process-independent hash; picks the cache bucket.
    pub fn stable_hash(&self) -> u64 {
        let salt = match self.kind {
            KeyKind::User => 0x9e37_79b9_7f4a_7c15,
            KeyKind::Item => 0,
        };
        splitmix64(self.id ^ salt)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Serialized features. A zero-length value is the "nothing known" sentinel.
///
/// Item values start with the embedding as little-endian `f64`s; whatever
/// follows is opaque side information.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct FeatureValue(Bytes);

impl FeatureValue {
    pub fn empty() -> Self {
        Self(Bytes::new())
    }

    pub fn from_bytes(bytes: impl Into<Bytes>) -> Self {
        Self(bytes.into())
    }

    /// Embedding followed by zero padding up to `total_len` bytes.
    pub fn from_embedding(embedding: &[f64], total_len: usize) -> Self {
        let mut buf = Vec::with_capacity(total_len.max(embedding.len() * 8));
        for v in embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if buf.len() < total_len {
            buf.resize(total_len, 0);
        }
        Self(buf.into())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Decodes the leading embedding into `out`; `false` (and `out` zeroed)
    /// when the value is empty or too short.
    pub fn decode_embedding(&self, out: &mut [f64]) -> bool {
        if self.0.len() < out.len() * 8 || self.is_empty() {
            out.fill(0.0);
            return false;
        }
        for (o, chunk) in out.iter_mut().zip(self.0.chunks_exact(8)) {
            *o = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        true
    }
}
