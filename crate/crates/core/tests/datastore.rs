mod common;

use common::*;
use knnlm::corpus::{batch_iter, SplitName, Vocab};
use knnlm::datastore::{build_datastore, ivf_build, Datastore, IvfIndex, NeighborSearch};
use knnlm::model::Checkpoint;
use knnlm::Error;
use proptest::prelude::*;

fn recall_at(store: &Datastore, index: &IvfIndex, queries: &[Vec<f32>], k: usize, nprobe: usize) -> f64 {
    let mut hits = 0;
    for q in queries {
        let exact = store.exact_knn(q, k).unwrap().indices();
        let approx = index.search(store, q, k, nprobe).unwrap().indices();
        hits += approx.iter().filter(|i| exact.contains(i)).count();
    }
    hits as f64 / (queries.len() * k) as f64
}

fn queries_from(keys: &[f32], dim: usize, n: usize, seed: u64) -> Vec<Vec<f32>> {
    let noise = uniform_keys(n, dim, seed);
    (0..n)
        .map(|q| {
            let row = (q * 7919) % (keys.len() / dim);
            keys[row * dim..(row + 1) * dim]
                .iter()
                .zip(&noise[q * dim..(q + 1) * dim])
                .map(|(k, e)| k + 0.05 * e)
                .collect()
        })
        .collect()
}

#[test]
fn exact_knn_matches_full_sort_oracle() {
    let dim = 6;
    // coarse grid values make exact distance ties common
    let keys: Vec<f32> = uniform_keys(1000, dim, 5).iter().map(|v| (v * 3.0).round()).collect();
    let store = Datastore::new(dim, keys.clone(), (0..1000).collect(), [0; 32]).unwrap();
    let queries: Vec<f32> = uniform_keys(50, dim, 6).iter().map(|v| (v * 3.0).round()).collect();
    for q in queries.chunks_exact(dim) {
        for k in [1, 10, 999, 1000, 1500] {
            let got = store.exact_knn(q, k).unwrap();
            let want = brute_force(&keys, dim, q, k);
            assert_eq!(got.indices(), want.iter().map(|p| p.0).collect::<Vec<_>>());
            assert_eq!(got.distances(), want.iter().map(|p| p.1).collect::<Vec<_>>());
        }
    }
}

#[test]
fn reported_distances_match_recomputation() {
    let dim = 12;
    let keys = uniform_keys(500, dim, 1);
    let store = Datastore::new(dim, keys.clone(), vec![0; 500], [0; 32]).unwrap();
    for q in uniform_keys(20, dim, 2).chunks_exact(dim) {
        for n in store.exact_knn(q, 25).unwrap().entries {
            let key = &keys[n.index * dim..(n.index + 1) * dim];
            let d: f64 = key.iter().zip(q).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            assert!((n.distance - d).abs() <= 1e-6 * d.max(f64::MIN_POSITIVE));
            assert!(n.distance >= 0.0);
        }
    }
}

#[test]
fn ivf_full_probe_and_single_cell_equal_exact() {
    let dim = 8;
    let keys = uniform_keys(2000, dim, 9);
    let store = Datastore::new(dim, keys, (0..2000).collect(), [0; 32]).unwrap();
    let index = ivf_build(&store, 32, 1).unwrap();
    let single = ivf_build(&store, 1, 1).unwrap();
    for q in uniform_keys(30, dim, 10).chunks_exact(dim) {
        let exact = store.exact_knn(q, 10).unwrap();
        assert_eq!(index.search(&store, q, 10, 32).unwrap(), exact);
        assert_eq!(single.search(&store, q, 10, 1).unwrap(), exact);
    }
}

#[test]
fn ivf_recall_on_clustered_keys() {
    let dim = 16;
    let keys = clustered_keys(10_000, dim, 100, 0.5, 3);
    let store = Datastore::new(dim, keys.clone(), vec![0; 10_000], [0; 32]).unwrap();
    let index = ivf_build(&store, 64, 0).unwrap();
    let queries = queries_from(&keys, dim, 200, 4);
    let r = recall_at(&store, &index, &queries, 10, 8);
    assert!(r >= 0.9, "recall@10 = {r}");
}

#[test]
fn ivf_recall_monotone_in_nprobe() {
    let dim = 8;
    let keys = uniform_keys(4000, dim, 21);
    let store = Datastore::new(dim, keys.clone(), vec![0; 4000], [0; 32]).unwrap();
    let index = ivf_build(&store, 32, 2).unwrap();
    let queries = queries_from(&keys, dim, 100, 22);
    let recalls: Vec<f64> = (1..=32).map(|p| recall_at(&store, &index, &queries, 10, p)).collect();
    for w in recalls.windows(2) {
        assert!(w[1] >= w[0], "{recalls:?}");
    }
    assert_eq!(*recalls.last().unwrap(), 1.0);
}

#[test]
fn ivf_rebuild_is_deterministic() {
    let keys = uniform_keys(3000, 4, 8);
    let store = Datastore::new(4, keys, vec![1; 3000], [0; 32]).unwrap();
    assert_eq!(
        ivf_build(&store, 16, 5).unwrap().to_bytes(),
        ivf_build(&store, 16, 5).unwrap().to_bytes()
    );
}

#[test]
fn ten_token_corpus_gives_eight_pairs() {
    let text = "a b c d e f g h i j";
    let (vocab, train, _) = splits_from_text(text, text);
    let mut cfg = toy_train_config(vocab.len(), 4);
    cfg.epochs = 1;
    cfg.batch_size = 1;
    let ckpt = common::train(&cfg, &vocab, &train);
    let store = build_datastore(&ckpt, &train).unwrap();
    assert_eq!(store.len(), 8);
    assert_eq!(store.values(), &train.ids[1..9]);
}

#[test]
fn store_matches_batch_iter_targets() {
    let (vocab, train, _) = synth_splits(1003, 10, 1);
    let cfg = small_train_config(vocab.len(), 1, 2);
    let ckpt = common::train(&cfg, &vocab, &train);
    let store = build_datastore(&ckpt, &train).unwrap();
    let stream: Vec<u32> = batch_iter(&train, 1, cfg.model.context_len)
        .unwrap()
        .flat_map(|b| b.targets)
        .collect();
    assert_eq!(store.values(), stream.as_slice());
    assert_eq!(store.len(), batch_iter(&train, 1, 16).unwrap().total_targets());
    assert_eq!(store.dim(), 32);
    assert_eq!(store.checkpoint_hash(), ckpt.content_hash().unwrap());
    assert!(store.values().iter().all(|&v| (v as usize) < vocab.len()));

    let again = build_datastore(&ckpt, &train).unwrap();
    assert_eq!(again.to_bytes(), store.to_bytes());
}

#[test]
fn build_rejects_foreign_vocab() {
    let (vocab, train, _) = synth_splits(400, 10, 1);
    let cfg = small_train_config(vocab.len(), 1, 2);
    let ckpt = common::train(&cfg, &vocab, &train);
    let other = Vocab::build("x y z", 1).unwrap();
    let foreign = other.encode_split(SplitName::Train, "x y z x y z");
    assert!(matches!(build_datastore(&ckpt, &foreign), Err(Error::HashMismatch(_))));
}

#[test]
fn save_load_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.knds");
    let store = Datastore::new(3, uniform_keys(3, 3, 0), vec![4, 5, 6], [7; 32]).unwrap();
    let h = store.save(&path).unwrap();
    let back = Datastore::load(&path).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.content_hash(), h);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Datastore::load(&path), Err(Error::Corrupt(_))));
}

#[test]
fn million_key_roundtrip_hash_equal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.knds");
    let n = 1_000_000;
    let keys: Vec<f32> = (0..n * 4).map(|i| ((i as u32).wrapping_mul(2_654_435_761) >> 8) as f32 * 1e-6).collect();
    let store = Datastore::new(4, keys, (0..n as u32).collect(), [3; 32]).unwrap();
    let h = store.save(&path).unwrap();
    let back = Datastore::load(&path).unwrap();
    assert_eq!(back.content_hash(), h);
    assert_eq!(back.len(), n);
}

#[test]
fn ivf_index_roundtrip_and_hash_binding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.kniv");
    let store = Datastore::new(4, uniform_keys(500, 4, 1), vec![0; 500], [0; 32]).unwrap();
    let index = ivf_build(&store, 8, 3).unwrap();
    index.save(&path).unwrap();
    let back = IvfIndex::load(&path).unwrap();
    assert_eq!(back, index);
    let searcher = back.searcher(&store, 8).unwrap();
    let q = [0.1f32, 0.2, -0.3, 0.0];
    assert_eq!(searcher.search(&q, 5).unwrap(), store.exact_knn(&q, 5).unwrap());
}

#[test]
fn checkpoint_hash_flows_into_store() {
    let (vocab, train, _) = synth_splits(300, 10, 4);
    let cfg = small_train_config(vocab.len(), 1, 1);
    let ckpt = common::train(&cfg, &vocab, &train);
    let store = build_datastore(&ckpt, &train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let h = ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().content_hash().unwrap(), h);
    assert_eq!(store.checkpoint_hash(), h);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighbor_sets_are_sorted_and_distinct(
        keys in proptest::collection::vec(-3i8..3, 3..120),
        q in proptest::collection::vec(-3i8..3, 3),
        k in 1usize..50,
    ) {
        let n = keys.len() / 3;
        let keys: Vec<f32> = keys[..n * 3].iter().map(|&v| v as f32).collect();
        let q: Vec<f32> = q.iter().map(|&v| v as f32).collect();
        let store = Datastore::new(3, keys.clone(), vec![0; n], [0; 32]).unwrap();
        let got = store.exact_knn(&q, k).unwrap();
        prop_assert_eq!(got.len(), k.min(n));
        let d = got.distances();
        prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        let mut idx = got.indices();
        let want: Vec<usize> = brute_force(&keys, 3, &q, k).into_iter().map(|p| p.0).collect();
        prop_assert_eq!(&idx, &want);
        idx.sort();
        idx.dedup();
        prop_assert_eq!(idx.len(), got.len());
    }

    #[test]
    fn ivf_lists_partition_keys(n in 10usize..300, cells in 1usize..10, seed in 0u64..1000) {
        let store = Datastore::new(2, uniform_keys(n, 2, seed), vec![0; n], [0; 32]).unwrap();
        let index = ivf_build(&store, cells, seed).unwrap();
        let mut all: Vec<u32> = index.lists().iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
    }
}
