//! Key–value store of (context vector → next token) pairs with exact and
//! inverted-file search under squared L2.
//!
//! File layout (little-endian), fixed stride so the key block can be mapped
//! directly:
//!
//! ```text
//! "KNDS" | version u32 | d u32 | N u64 | checkpoint hash [u8; 32]
//! keys   f32 × N·d   (row-major)
//! values u32 × N
//! ```

mod ivf;

pub use ivf::{ivf_build, IvfIndex, IvfSearcher, IVF_MAGIC, IVF_VERSION};

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use crate::corpus::EncodedSplit;
use crate::digest::{sha256, Digest};
use crate::error::{Error, Result};
use crate::model::{score_tokens, Checkpoint};

pub const DATASTORE_MAGIC: &[u8; 4] = b"KNDS";
pub const DATASTORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Squared L2 distance.
    pub distance: f64,
    pub value: u32,
}

/// Up to `k` neighbours sorted by `(distance, index)` ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.index).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.entries.iter().map(|n| n.distance).collect()
    }
}

/// Anything that answers k-nearest-neighbour queries against a datastore.
pub trait NeighborSearch: Sync {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet>;
    fn dim(&self) -> usize;
    /// Hash of the checkpoint whose representations populate the keys.
    fn checkpoint_hash(&self) -> Digest;
}

impl<T: NeighborSearch + ?Sized> NeighborSearch for &T {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        (**self).search(query, k)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn checkpoint_hash(&self) -> Digest {
        (**self).checkpoint_hash()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<u32>,
    checkpoint_hash: Digest,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl Datastore {
    pub fn new(dim: usize, keys: Vec<f32>, values: Vec<u32>, checkpoint_hash: Digest) -> Result<Self> {
        if dim == 0 || keys.len() != dim * values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} key scalars do not form {} rows of dimension {dim}",
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidArgument("datastore keys must be finite".into()));
        }
        Ok(Self {
            dim,
            keys,
            values,
            checkpoint_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn checkpoint_hash(&self) -> Digest {
        self.checkpoint_hash
    }

    pub fn sq_dist(&self, query: &[f32], i: usize) -> f64 {
        self.key(i)
            .iter()
            .zip(query)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum()
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "query dimension {} != datastore dimension {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Top-`k` by `(distance, index)` among `candidates`.
    pub(crate) fn select(
        &self,
        query: &[f32],
        k: usize,
        candidates: impl Iterator<Item = usize>,
    ) -> NeighborSet {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for i in candidates {
            let c = Candidate(self.sq_dist(query, i), i);
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().expect("non-empty heap") {
                heap.pop();
                heap.push(c);
            }
        }
        let entries = heap
            .into_sorted_vec()
            .into_iter()
            .map(|Candidate(distance, index)| Neighbor {
                index,
                distance,
                value: self.values[index],
            })
            .collect();
        NeighborSet { entries }
    }

    /// Exhaustive search; returns all `N` entries when `k > N`.
    pub fn exact_knn(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        self.check_query(query, k)?;
        Ok(self.select(query, k, 0..self.len()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.keys.len() * 4 + self.values.len() * 4);
        out.extend_from_slice(DATASTORE_MAGIC);
        out.extend_from_slice(&DATASTORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.checkpoint_hash);
        for k in &self.keys {
            out.extend_from_slice(&k.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt("truncated datastore header".into()));
        }
        if &bytes[..4] != DATASTORE_MAGIC {
            return Err(Error::Corrupt("not a datastore (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != DATASTORE_VERSION {
            return Err(Error::Corrupt(format!("unsupported datastore version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let checkpoint_hash: Digest = bytes[20..52].try_into().expect("32 bytes");
        let expected = n
            .checked_mul(dim)
            .and_then(|nd| nd.checked_add(n))
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::Corrupt(format!(
                "datastore body is {} bytes, header implies N={n}, d={dim}",
                bytes.len() - HEADER_LEN
            )));
        }
        let key_end = HEADER_LEN + n * dim * 4;
        let keys = bytes[HEADER_LEN..key_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let values = bytes[key_end..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dim, keys, values, checkpoint_hash)
            .map_err(|e| Error::Corrupt(format!("datastore contents: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<Digest> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(sha256(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn content_hash(&self) -> Digest {
        sha256(&self.to_bytes())
    }
}

impl NeighborSearch for Datastore {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        self.exact_knn(query, k)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn checkpoint_hash(&self) -> Digest {
        self.checkpoint_hash
    }
}

/// One key per predictable position of `train`, in corpus order: the
/// context vector at position `t` (from non-overlapping evaluation windows)
/// keyed to the token at `t + 1`.
pub fn build_datastore(checkpoint: &Checkpoint, train: &EncodedSplit) -> Result<Datastore> {
    if checkpoint.vocab_hash != train.vocab_hash {
        return Err(Error::HashMismatch(format!(
            "{} split and checkpoint were built from different vocabularies",
            train.name
        )));
    }
    let scores = score_tokens(&checkpoint.model, train)?;
    let dim = checkpoint.model.config.d_model;
    let mut keys = Vec::with_capacity(scores.len() * dim);
    let mut values = Vec::with_capacity(scores.len());
    for s in &scores {
        keys.extend(s.repr.iter().map(|&v| v as f32));
        values.push(s.target);
    }
    Datastore::new(dim, keys, values, checkpoint.content_hash()?)
}
