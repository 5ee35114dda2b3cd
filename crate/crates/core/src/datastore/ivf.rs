//! Inverted-file index: k-means cells over the datastore keys, queried by
//! scanning the `nprobe` cells whose centroids are nearest to the query.
//!
//! ```text
//! "KNIV" | version u32 | d u32 | C u32 | N u64 | nprobe u32 | datastore hash [u8; 32]
//! centroids f32 × C·d
//! list lengths u64 × C
//! key indices u32 × N   (lists concatenated in cell order)
//! ```

use std::path::Path;

use super::{Datastore, NeighborSearch, NeighborSet};
use crate::digest::{sha256, Digest};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, sq_dist};

pub const IVF_MAGIC: &[u8; 4] = b"KNIV";
pub const IVF_VERSION: u32 = 1;
const LLOYD_ITERS: usize = 25;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 4 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    /// Default probe count for [`IvfIndex::searcher`].
    pub nprobe: usize,
    store_hash: Digest,
}

/// Clusters the keys of `store` into `cells` cells (k-means++ start,
/// 25 Lloyd iterations) and builds posting lists.
pub fn ivf_build(store: &Datastore, cells: usize, seed: u64) -> Result<IvfIndex> {
    if cells == 0 || cells > store.len() {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= C <= N, got C={cells}, N={}",
            store.len()
        )));
    }
    let dim = store.dim();
    let km = kmeans(store.keys(), dim, cells, LLOYD_ITERS, seed);
    let centroids: Vec<f32> = km.centroids.iter().map(|&v| v as f32).collect();
    let mut lists = vec![Vec::new(); cells];
    for i in 0..store.len() {
        let c = nearest_cell(store.key(i), &centroids, dim);
        lists[c].push(i as u32);
    }
    Ok(IvfIndex {
        dim,
        centroids,
        lists,
        nprobe: cells.min(8),
        store_hash: store.content_hash(),
    })
}

fn nearest_cell(x: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

impl IvfIndex {
    pub fn cells(&self) -> usize {
        self.lists.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn store_hash(&self) -> Digest {
        self.store_hash
    }

    /// Cells ordered by centroid distance to `query` (ties: lower cell).
    fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut cells: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, cen)| (sq_dist(query, cen), c))
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cells.into_iter().map(|(_, c)| c).collect()
    }

    pub fn search(
        &self,
        store: &Datastore,
        query: &[f32],
        k: usize,
        nprobe: usize,
    ) -> Result<NeighborSet> {
        store.check_query(query, k)?;
        if nprobe == 0 || nprobe > self.cells() {
            return Err(Error::InvalidArgument(format!(
                "nprobe must lie in 1..={}, got {nprobe}",
                self.cells()
            )));
        }
        let order = self.probe_order(query);
        let candidates = order[..nprobe]
            .iter()
            .flat_map(|&c| self.lists[c].iter().map(|&i| i as usize));
        Ok(store.select(query, k, candidates))
    }

    /// Binds the index to its datastore, verifying the content hash.
    pub fn searcher<'a>(&'a self, store: &'a Datastore, nprobe: usize) -> Result<IvfSearcher<'a>> {
        if store.content_hash() != self.store_hash {
            return Err(Error::HashMismatch(
                "IVF index was built from a different datastore".into(),
            ));
        }
        if nprobe == 0 || nprobe > self.cells() {
            return Err(Error::InvalidArgument(format!(
                "nprobe must lie in 1..={}, got {nprobe}",
                self.cells()
            )));
        }
        Ok(IvfSearcher {
            index: self,
            store,
            nprobe,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.lists.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + self.centroids.len() * 4 + n * 4);
        out.extend_from_slice(IVF_MAGIC);
        out.extend_from_slice(&IVF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.cells() as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(self.nprobe as u32).to_le_bytes());
        out.extend_from_slice(&self.store_hash);
        for c in &self.centroids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for l in &self.lists {
            out.extend_from_slice(&(l.len() as u64).to_le_bytes());
        }
        for l in &self.lists {
            for i in l {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("ivf index: {m}"));
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..4] != IVF_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(4) != IVF_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let dim = u32_at(8) as usize;
        let cells = u32_at(12) as usize;
        let n = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let nprobe = u32_at(24) as usize;
        let store_hash: Digest = bytes[28..60].try_into().expect("32 bytes");
        let expected = HEADER_LEN as u128 + (cells as u128 * dim as u128) * 4 + cells as u128 * 8 + n as u128 * 4;
        if expected != bytes.len() as u128 || dim == 0 || cells == 0 {
            return Err(corrupt("size does not match header"));
        }
        let mut off = HEADER_LEN;
        let centroids: Vec<f32> = bytes[off..off + cells * dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        off += cells * dim * 4;
        let lens: Vec<usize> = bytes[off..off + cells * 8]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        off += cells * 8;
        if lens.iter().sum::<usize>() != n {
            return Err(corrupt("posting list lengths do not sum to N"));
        }
        let mut lists = Vec::with_capacity(cells);
        let mut seen = vec![false; n];
        for len in lens {
            let mut l = Vec::with_capacity(len);
            for c in bytes[off..off + len * 4].chunks_exact(4) {
                let i = u32::from_le_bytes(c.try_into().expect("4 bytes"));
                if i as usize >= n || std::mem::replace(&mut seen[i as usize], true) {
                    return Err(corrupt("posting lists do not partition 0..N"));
                }
                l.push(i);
            }
            off += len * 4;
            lists.push(l);
        }
        if nprobe == 0 || nprobe > cells || centroids.iter().any(|c| !c.is_finite()) {
            return Err(corrupt("invalid nprobe or centroids"));
        }
        Ok(Self {
            dim,
            centroids,
            lists,
            nprobe,
            store_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<Digest> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(sha256(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// An [`IvfIndex`] bound to its datastore with a fixed probe count.
#[derive(Debug, Clone, Copy)]
pub struct IvfSearcher<'a> {
    pub index: &'a IvfIndex,
    pub store: &'a Datastore,
    pub nprobe: usize,
}

impl NeighborSearch for IvfSearcher<'_> {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        self.index.search(self.store, query, k, self.nprobe)
    }

    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn checkpoint_hash(&self) -> Digest {
        self.store.checkpoint_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(n: usize, dim: usize, seed: u64) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values = (0..n as u32).collect();
        Datastore::new(dim, keys, values, [0; 32]).unwrap()
    }

    #[test]
    fn lists_partition_keys() {
        let s = random_store(300, 4, 1);
        let idx = ivf_build(&s, 10, 2).unwrap();
        let mut all: Vec<u32> = idx.lists().iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn single_cell_equals_exact() {
        let s = random_store(200, 3, 3);
        let idx = ivf_build(&s, 1, 0).unwrap();
        let q = [0.1f32, -0.2, 0.3];
        assert_eq!(idx.search(&s, &q, 7, 1).unwrap(), s.exact_knn(&q, 7).unwrap());
    }

    #[test]
    fn rejects_too_many_cells() {
        let s = random_store(5, 2, 0);
        assert!(ivf_build(&s, 6, 0).is_err());
        let idx = ivf_build(&s, 2, 0).unwrap();
        assert!(idx.search(&s, &[0.0, 0.0], 1, 3).is_err());
    }

    #[test]
    fn searcher_checks_store_hash() {
        let s = random_store(50, 2, 0);
        let other = random_store(50, 2, 1);
        let idx = ivf_build(&s, 4, 0).unwrap();
        assert!(idx.searcher(&s, 2).is_ok());
        assert!(matches!(idx.searcher(&other, 2), Err(Error::HashMismatch(_))));
    }

    #[test]
    fn roundtrip_and_corruption() {
        let s = random_store(100, 3, 4);
        let idx = ivf_build(&s, 5, 9).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(IvfIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(IvfIndex::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(IvfIndex::from_bytes(&bad).is_err());
        // duplicate an index inside the posting lists
        let mut bad = bytes.clone();
        let tail = bad.len() - 4;
        let first = bad.len() - 100 * 4;
        let dup: [u8; 4] = bad[first..first + 4].try_into().unwrap();
        bad[tail..].copy_from_slice(&dup);
        if dup != bytes[tail..] {
            assert!(IvfIndex::from_bytes(&bad).is_err());
        }
    }
}
