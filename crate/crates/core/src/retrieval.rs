//! Exact top-k retrieval under Euclidean distance.
//!
//! Every ranking in the crate orders candidates by the composite key
//! `(distance, id)`, so ties between identical vectors always resolve to the
//! lower id and results never depend on input order.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
}

impl Neighbor {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

/// Neighbors sorted ascending by `(distance, id)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedSet {
    entries: Vec<Neighbor>,
}

impl RankedSet {
    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|n| n.id).collect()
    }

    pub fn id_set(&self) -> BTreeSet<u64> {
        self.entries.iter().map(|n| n.id).collect()
    }

    pub fn into_entries(self) -> Vec<Neighbor> {
        self.entries
    }

    /// Wrap entries already sorted by `(distance, id)`.
    pub(crate) fn from_ranked(entries: Vec<Neighbor>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].cmp_key(&w[1]).is_lt()));
        RankedSet { entries }
    }

    /// Keep the `k` best of `candidates`.
    fn select(mut candidates: Vec<Neighbor>, k: usize) -> Self {
        if k == 0 {
            return RankedSet::default();
        }
        if candidates.len() > k {
            candidates.select_nth_unstable_by(k - 1, Neighbor::cmp_key);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(Neighbor::cmp_key);
        RankedSet { entries: candidates }
    }
}

/// `‖a − b‖₂`, accumulated in double precision.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            id: None,
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(squared_distance(a, b).sqrt())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// An embedding store verified to hold exactly the ids of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct BoundCorpus<'a> {
    dataset: &'a Dataset,
    store: &'a EmbeddingStore,
}

impl<'a> BoundCorpus<'a> {
    pub fn bind(dataset: &'a Dataset, store: &'a EmbeddingStore) -> Result<Self> {
        store.check_bound(dataset)?;
        Ok(BoundCorpus { dataset, store })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn store(&self) -> &'a EmbeddingStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// The `k` examples closest to `query`; all of them when `k` exceeds the corpus.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<RankedSet> {
        if self.store.dim() != query.len() && !self.store.is_empty() {
            return Err(Error::DimensionMismatch {
                id: None,
                expected: self.store.dim(),
                found: query.len(),
            });
        }
        if k == 0 {
            return Ok(RankedSet::default());
        }
        let candidates = self
            .store
            .iter()
            .map(|(id, v)| Neighbor {
                id,
                distance: squared_distance(query, v).sqrt(),
            })
            .collect();
        Ok(RankedSet::select(candidates, k))
    }
}

/// Top-`k` of `d` for `query`. Binds (and checks) the store on every call;
/// use [`BoundCorpus`] to search one corpus repeatedly.
pub fn top_k(query: &[f64], k: usize, d: &Dataset, store: &EmbeddingStore) -> Result<RankedSet> {
    BoundCorpus::bind(d, store)?.top_k(query, k)
}

/// Server-side reorder: deduplicate candidate ids, recompute their distances
/// to `query` from `store` and keep the best `k`.
pub fn merge_rerank<I>(query: &[f64], k: usize, candidates: I, store: &EmbeddingStore) -> Result<RankedSet>
where
    I: IntoIterator<Item = u64>,
{
    let unique: BTreeSet<u64> = candidates.into_iter().collect();
    let scored = unique
        .into_iter()
        .map(|id| {
            let v = store.get(id).ok_or(Error::MissingId(id))?;
            Ok(Neighbor {
                id,
                distance: distance(query, v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedSet::select(scored, k))
}

/// Reorder over candidates that arrive with their own vectors (what a client
/// ships back to the server). Duplicate ids keep their first vector.
pub fn rerank_vectors<'v, I>(query: &[f64], k: usize, candidates: I) -> Result<RankedSet>
where
    I: IntoIterator<Item = (u64, &'v [f64])>,
{
    let mut seen = BTreeSet::new();
    let mut scored = Vec::new();
    for (id, v) in candidates {
        if seen.insert(id) {
            scored.push(Neighbor {
                id,
                distance: distance(query, v)?,
            });
        }
    }
    Ok(RankedSet::select(scored, k))
}

/// Union of already-ranked sets (computed against the same query), cut to `k`.
pub fn merge_ranked<'r, I>(k: usize, sets: I) -> RankedSet
where
    I: IntoIterator<Item = &'r RankedSet>,
{
    let mut seen = BTreeSet::new();
    let candidates = sets
        .into_iter()
        .flat_map(|s| s.entries.iter().copied())
        .filter(|n| seen.insert(n.id))
        .collect();
    RankedSet::select(candidates, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, LabelSpace};

    fn corpus(points: &[(u64, Vec<f64>)]) -> (Dataset, EmbeddingStore) {
        let mut ids: Vec<u64> = points.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        let examples = ids
            .iter()
            .map(|id| Example {
                id: *id,
                text: "x".into(),
                label: 0,
            })
            .collect();
        let d = Dataset::new(examples, LabelSpace::numbered(1).unwrap()).unwrap();
        let store = EmbeddingStore::from_entries(points[0].1.len(), points.to_vec()).unwrap();
        (d, store)
    }

    #[test]
    fn distance_basics() {
        assert_eq!(distance(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn top_k_small_example() {
        let (d, s) = corpus(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 2.0]), (2, vec![3.0, 0.0])]);
        let r = top_k(&[0.0, 0.0], 2, &d, &s).unwrap();
        assert_eq!(
            r.entries(),
            &[
                Neighbor { id: 0, distance: 1.0 },
                Neighbor { id: 1, distance: 2.0 }
            ]
        );
        assert!(top_k(&[0.0, 0.0], 0, &d, &s).unwrap().is_empty());
        assert_eq!(top_k(&[0.0, 0.0], 10, &d, &s).unwrap().len(), 3);
    }

    #[test]
    fn ties_resolve_by_id() {
        let (d, s) = corpus(&[(5, vec![1.0]), (2, vec![1.0]), (9, vec![1.0]), (1, vec![4.0])]);
        let r = top_k(&[0.0], 3, &d, &s).unwrap();
        assert_eq!(r.ids(), vec![2, 5, 9]);
    }

    #[test]
    fn unbound_store_is_an_error() {
        let (d, _) = corpus(&[(0, vec![1.0]), (1, vec![2.0])]);
        let (_, other) = corpus(&[(0, vec![1.0]), (7, vec![2.0])]);
        assert!(matches!(top_k(&[0.0], 1, &d, &other), Err(Error::Binding(_))));
    }

    #[test]
    fn merge_dedups_and_ranks() {
        let (_, s) = corpus(&[(0, vec![2.0]), (1, vec![1.0]), (2, vec![5.0])]);
        let r = merge_rerank(&[0.0], 2, [0, 1], &s).unwrap();
        assert_eq!(r.ids(), vec![1, 0]);
        let r = merge_rerank(&[0.0], 5, [0, 2, 0, 2], &s).unwrap();
        assert_eq!(r.ids(), vec![0, 2]);
        assert!(matches!(
            merge_rerank(&[0.0], 2, [3], &s),
            Err(Error::MissingId(3))
        ));
    }
}
