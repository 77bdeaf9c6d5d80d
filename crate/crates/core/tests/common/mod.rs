#![allow(dead_code)]

use std::path::PathBuf;

use fairfl::data::{
    dirichlet_partition, gen_synthetic_classification, iid_partition, load_mnist, MnistFiles, PartitionConfig,
    SplitFractions,
};
use fairfl::federation::Federation;
use fairfl::rng::{stream, Stream};
use fairfl::theory::QuadraticFederation;
use fairfl::{ModelSpec, ParamVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Logistic,
    Mlp,
    Quadratic,
}

pub const KINDS: [Kind; 3] = [Kind::Logistic, Kind::Mlp, Kind::Quadratic];

/// A few clients with a handful of examples each.
pub fn small_federation(kind: Kind, n: usize, seed: u64) -> Federation {
    let (c, d) = (3, 4);
    let spec = match kind {
        Kind::Quadratic => return QuadraticFederation::random(n, 5, seed).federation(),
        Kind::Logistic => ModelSpec::MultinomialLogistic {
            input_dim: d,
            num_classes: c,
        },
        Kind::Mlp => ModelSpec::Mlp {
            input_dim: d,
            hidden: 5,
            num_classes: c,
        },
    };
    let pool = gen_synthetic_classification(n * 10, c, d, 1.5, seed).unwrap();
    let shards = iid_partition(&pool, n, &SplitFractions::default(), seed).unwrap();
    Federation::new(spec, shards).unwrap()
}

pub fn gaussian(seed: u64, index: u64, d: usize, scale: f64) -> ParamVector {
    let mut rng = stream(seed, Stream::Theory, index);
    ParamVector((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&ParamVector) -> f64, x: &ParamVector, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[k] += h;
            down[k] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// `(g(x + h v) − g(x − h v)) / 2h` for a vector-valued `g`.
pub fn fd_directional(g: impl Fn(&ParamVector) -> Vec<f64>, x: &ParamVector, v: &[f64], h: f64) -> Vec<f64> {
    let mut up = x.clone();
    let mut down = x.clone();
    up.axpy(h, v);
    down.axpy(-h, v);
    g(&up).iter().zip(g(&down)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// MNIST subset, Dirichlet partition, softmax regression.
pub fn mnist_federation(subset: usize, n_clients: usize, alpha: f64, seed: u64) -> Federation {
    let pool = load_mnist(&MnistFiles::in_dir(&mnist_dir()), subset, seed).unwrap();
    let shards = dirichlet_partition(
        &pool,
        &PartitionConfig {
            n_clients,
            alpha,
            seed,
            split: SplitFractions::default(),
        },
    )
    .unwrap();
    Federation::new(
        ModelSpec::MultinomialLogistic {
            input_dim: 784,
            num_classes: 10,
        },
        shards,
    )
    .unwrap()
}
