//! Ingestion errors and client partitions.

mod common;

use std::collections::BTreeSet;
use std::fs;

use common::*;
use fairfl::data::*;
use fairfl::metrics::evaluate;
use fairfl::Error;

fn tiny_images() -> IdxImages {
    IdxImages {
        rows: 2,
        cols: 2,
        pixels: (0..12).collect(),
    }
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab");
    fs::write(&img, encode_idx_images(&tiny_images())).unwrap();
    fs::write(&lab, encode_idx_labels(&[3, 1, 9])).unwrap();
    assert_eq!(read_idx_images(&img).unwrap(), tiny_images());
    assert_eq!(read_idx_labels(&lab).unwrap(), vec![3, 1, 9]);
}

#[test]
fn idx_errors_name_file_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let check = |name: &str, bytes: Vec<u8>, images: bool, want_offset: u64, want_reason: &str| {
        let path = dir.path().join(name);
        fs::write(&path, bytes).unwrap();
        let err = if images {
            read_idx_images(&path).unwrap_err()
        } else {
            read_idx_labels(&path).unwrap_err()
        };
        match &err {
            Error::Ingestion { file, offset, reason } => {
                assert_eq!(file, &path, "{name}");
                assert_eq!(*offset, want_offset, "{name}: {reason}");
                assert!(reason.contains(want_reason), "{name}: {reason}");
            }
            other => panic!("{name}: expected ingestion error, got {other}"),
        }
        assert!(err.to_string().contains(name));
    };

    let good = encode_idx_images(&tiny_images());
    let mut bad_magic = good.clone();
    bad_magic[3] = 0x99;
    check("magic", bad_magic, true, 0, "magic");
    check("short-header", good[..10].to_vec(), true, 10, "header");
    check("short-payload", good[..good.len() - 1].to_vec(), true, 27, "payload");
    check("label-range", encode_idx_labels(&[1, 2, 10, 3]), false, 10, "out of range");
    check("wrong-kind", encode_idx_labels(&[1]), true, 0, "magic");

    let missing = dir.path().join("absent");
    assert!(matches!(read_idx_labels(&missing), Err(Error::Ingestion { offset: 0, .. })));
}

#[test]
fn corrupt_gzip_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.gz");
    fs::write(&path, [0x1f, 0x8b, 8, 0, 0, 0, 0, 0, 0, 3, 0xff, 0xff]).unwrap();
    assert!(matches!(read_idx_images(&path), Err(Error::Ingestion { .. })));
}

fn pool() -> Dataset {
    gen_synthetic_classification(600, 5, 3, 2.0, 17).unwrap()
}

fn part(alpha: f64, seed: u64) -> Vec<ClientShard> {
    dirichlet_partition(
        &pool(),
        &PartitionConfig {
            n_clients: 8,
            alpha,
            seed,
            split: SplitFractions::default(),
        },
    )
    .unwrap()
}

#[test]
fn partitions_cover_the_pool_disjointly() {
    for alpha in [0.05, 0.5, 100.0] {
        let shards = part(alpha, 3);
        let mut seen = BTreeSet::new();
        for s in &shards {
            assert!(s.len() >= MIN_CLIENT_EXAMPLES);
            assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
            assert_eq!(s.train.len(), s.train_idx.len());
            for i in s.all_indices() {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), 600);
        let ids: Vec<usize> = shards.iter().map(|s| s.client_id).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
    }
}

#[test]
fn partitions_are_deterministic_in_the_seed() {
    assert_eq!(part(0.3, 5), part(0.3, 5));
    assert_ne!(
        shard_manifests(&part(0.3, 5), 5),
        shard_manifests(&part(0.3, 6), 5)
    );
    let p = pool();
    assert_eq!(
        iid_partition(&p, 4, &SplitFractions::default(), 1).unwrap(),
        iid_partition(&p, 4, &SplitFractions::default(), 1).unwrap()
    );
}

/// Mean pairwise total-variation distance between client label
/// distributions.
fn pairwise_tv(shards: &[ClientShard], classes: usize) -> f64 {
    let dists: Vec<Vec<f64>> = client_label_distributions(shards, classes).into_values().collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            total += 0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[test]
fn heterogeneity_does_not_increase_with_alpha() {
    let alphas = [0.05, 0.1, 0.5, 5.0];
    let avg: Vec<f64> = alphas
        .iter()
        .map(|&a| (0..20).map(|s| pairwise_tv(&part(a, s), 5)).sum::<f64>() / 20.0)
        .collect();
    for w in avg.windows(2) {
        assert!(w[0] >= w[1], "pairwise TV increases with alpha: {avg:?}");
    }
    assert!(avg[0] > 0.5 && avg[3] < 0.3, "{avg:?}");
}

#[test]
fn huge_alpha_gives_near_uniform_histograms() {
    let pool = gen_synthetic_classification(800, 4, 2, 1.0, 3).unwrap();
    let cfg = PartitionConfig {
        n_clients: 4,
        alpha: 1e6,
        seed: 8,
        split: SplitFractions::default(),
    };
    for m in shard_manifests(&dirichlet_partition(&pool, &cfg).unwrap(), 4) {
        for c in m.label_histogram {
            assert!(c.abs_diff(50) <= 2, "client {}: {c}", m.client_id);
        }
    }
}

fn mean_entropy(alpha: f64) -> f64 {
    let pool = load_mnist(&MnistFiles::in_dir(&mnist_dir()), 1000, 0).unwrap();
    let mut total = 0.0;
    for seed in 0..20 {
        let cfg = PartitionConfig {
            n_clients: 10,
            alpha,
            seed,
            split: SplitFractions::default(),
        };
        let dists = client_label_distributions(&dirichlet_partition(&pool, &cfg).unwrap(), 10);
        let h: f64 = dists
            .values()
            .map(|d| -d.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum();
        total += h / dists.len() as f64;
    }
    total / 20.0
}

#[test]
fn mnist_label_entropy_is_lower_under_strong_skew() {
    let (strong, mild) = (mean_entropy(0.05), mean_entropy(0.5));
    assert!(strong < mild, "entropy {strong} at 0.05 vs {mild} at 0.5");
}

#[test]
fn identical_shards_hold_the_same_examples() {
    let shards = identical_shards(&pool(), 4, &SplitFractions::default(), 2).unwrap();
    for s in &shards[1..] {
        assert_eq!(s.train, shards[0].train);
        assert_eq!(s.val, shards[0].val);
        assert_eq!(s.test, shards[0].test);
    }
}

#[test]
fn manifests_round_trip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shards.json");
    let manifests = shard_manifests(&part(0.5, 1), 5);
    write_manifests(&path, &manifests).unwrap();
    let back: Vec<ShardManifest> = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert_eq!(back, manifests);
    let total: usize = back.iter().flat_map(|m| &m.label_histogram).sum();
    assert_eq!(total, 600);
}

#[test]
fn mnist_subset_is_stratified_and_scaled() {
    let files = MnistFiles::in_dir(&mnist_dir());
    let pool = load_mnist(&files, 1000, 4).unwrap();
    assert_eq!(pool.len(), 1000);
    assert_eq!(pool.num_classes, 10);
    let mut source = read_idx_labels(&files.train_labels).unwrap();
    source.extend(read_idx_labels(&files.test_labels).unwrap());
    let mut counts = [0usize; 10];
    for &l in &source {
        counts[l as usize] += 1;
    }
    for (c, &got) in pool.label_histogram().iter().enumerate() {
        let want = 1000.0 * counts[c] as f64 / source.len() as f64;
        assert!((got as f64 - want).abs() <= 1.0, "class {c}: {got} vs {want}");
    }
    for e in &pool.examples {
        assert_eq!(e.features.len(), 784);
        assert!(e.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert_eq!(pool, load_mnist(&MnistFiles::in_dir(&mnist_dir()), 1000, 4).unwrap());
}

#[test]
fn random_initialization_scores_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..20 {
        let fed = mnist_federation(1000, 10, 0.5, seed);
        let x = fed.spec.init_params(seed);
        accs.push(evaluate(&fed.snapshot(&x), Split::Test).unwrap().mean_acc);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((0.05..=0.15).contains(&mean), "{accs:?}");
}
