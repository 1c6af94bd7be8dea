#![allow(dead_code)]

use std::cmp::Ordering;

use dicl::allocator::AllocatorModel;
use dicl::corpus::{Dataset, Example, LabelSpace};
use dicl::embed::EmbeddingStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random corpus with sparse ids. `discrete` draws small integer coordinates
/// so that exact distance ties are common.
pub fn random_corpus(n: usize, dim: usize, classes: usize, seed: u64, discrete: bool) -> (Dataset, EmbeddingStore) {
    let mut r = rng(seed);
    let mut examples = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for i in 0..n {
        let id = 3 * i as u64 + 7;
        let v: Vec<f64> = (0..dim)
            .map(|_| if discrete { r.random_range(-2..=2) as f64 } else { r.random_range(-1.0..1.0) })
            .collect();
        examples.push(Example {
            id,
            text: format!("doc {id}"),
            label: r.random_range(0..classes),
        });
        vectors.push((id, v));
    }
    let d = Dataset::new(examples, LabelSpace::numbered(classes).unwrap()).unwrap();
    (d, EmbeddingStore::from_entries(dim, vectors).unwrap())
}

pub fn random_query(dim: usize, r: &mut ChaCha8Rng, discrete: bool) -> Vec<f64> {
    (0..dim)
        .map(|_| if discrete { r.random_range(-2..=2) as f64 } else { r.random_range(-1.0..1.0) })
        .collect()
}

/// Full sort of every point by (distance, id).
pub fn brute_top_k(query: &[f64], k: usize, store: &EmbeddingStore) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = store
        .iter()
        .map(|(id, v)| {
            let d2: f64 = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (id, d2.sqrt())
        })
        .collect();
    all.sort_by(|a, b| match a.1.partial_cmp(&b.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    all.truncate(k);
    all
}

/// Assign every example to a uniformly random client.
pub fn random_partition(d: &Dataset, clients: usize, seed: u64) -> Vec<Dataset> {
    let mut r = rng(seed);
    let mut ids: Vec<Vec<u64>> = vec![Vec::new(); clients];
    for ex in d.examples() {
        ids[r.random_range(0..clients)].push(ex.id);
    }
    ids.iter().map(|s| d.subset(s).unwrap()).collect()
}

pub fn stores_for(shards: &[Dataset], store: &EmbeddingStore) -> Vec<EmbeddingStore> {
    shards.iter().map(|s| store.restrict_to(s).unwrap()).collect()
}

/// Central finite differences of the mean loss for every parameter.
pub fn numeric_gradient(m: &AllocatorModel, batch: &[(&[f64], usize)], h: f64) -> Vec<f64> {
    let mut probe = m.clone();
    (0..m.parameter_count())
        .map(|i| {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = probe.loss(batch).unwrap();
            probe.params_mut()[i] = orig - h;
            let down = probe.loss(batch).unwrap();
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative difference, falling back to absolute below 1e-7.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale < 1e-7 {
                (x - y).abs()
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
