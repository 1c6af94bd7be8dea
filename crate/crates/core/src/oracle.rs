//! Oracle budgets and the allocator supervision set.
//!
//! For a query embedding, client `c`'s oracle budget is the number of its
//! local top-k examples that also belong to the global top-k. Counting these
//! over a proxy set and quantizing with bin width `δ` yields the
//! [`BudgetDataset`] the per-client allocators are trained on.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::error::{Error, Result};
use crate::retrieval::{merge_ranked, BoundCorpus, RankedSet};

/// `count div delta`.
pub fn quantize(count: usize, delta: usize) -> Result<usize> {
    if delta == 0 {
        return Err(Error::InvalidSpec("quantization delta must be >= 1".into()));
    }
    Ok(count / delta)
}

/// Lower edge of a quantization bin: `class × delta`.
pub fn dequantize(class: usize, delta: usize) -> usize {
    class * delta
}

/// Number of budget classes for server budget `k` and bin width `delta`.
pub fn num_budget_classes(k: usize, delta: usize) -> Result<usize> {
    Ok(quantize(k, delta)? + 1)
}

/// `|T(q, k | D_c) ∩ T(q, k | D)|` for every client `c`.
///
/// Shard ids are expected to be a subset of the global corpus.
pub fn oracle_budget(
    query: &[f64],
    k: usize,
    shards: &[BoundCorpus<'_>],
    global: &BoundCorpus<'_>,
) -> Result<Vec<usize>> {
    let global_top = global.top_k(query, k)?.id_set();
    shards
        .iter()
        .map(|shard| {
            let local = shard.top_k(query, k)?;
            Ok(local.entries().iter().filter(|n| global_top.contains(&n.id)).count())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub query_id: u64,
    pub vector: Embedding,
    pub raw_counts: Vec<usize>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetDataset {
    pub records: Vec<BudgetRecord>,
    pub num_clients: usize,
    pub k: usize,
    pub delta: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    #[serde(rename = "C")]
    num_clients: usize,
    k: usize,
    delta: usize,
}

impl BudgetDataset {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn num_classes(&self) -> usize {
        self.k / self.delta + 1
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(embedding, class)` training pairs for one client.
    pub fn client_view(&self, client: usize) -> Vec<(&[f64], usize)> {
        self.records
            .iter()
            .map(|r| (r.vector.as_slice(), r.classes[client]))
            .collect()
    }

    /// Check record shapes and the quantization relation.
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 || self.num_clients == 0 {
            return Err(Error::Validation("budget dataset needs delta >= 1 and C >= 1".into()));
        }
        let limit = self.num_classes();
        for r in &self.records {
            if r.raw_counts.len() != self.num_clients || r.classes.len() != self.num_clients {
                return Err(Error::Validation(format!(
                    "record {} has {} counts for {} clients",
                    r.query_id,
                    r.raw_counts.len(),
                    self.num_clients
                )));
            }
            for (&raw, &class) in r.raw_counts.iter().zip(&r.classes) {
                if class != raw / self.delta || class >= limit {
                    return Err(Error::Validation(format!(
                        "record {}: class {class} does not match count {raw} at delta {}",
                        r.query_id, self.delta
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            schema_version: Self::SCHEMA_VERSION,
            num_clients: self.num_clients,
            k: self.k,
            delta: self.delta,
        };
        let mut line = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
        line(serde_json::to_string(&header)?)?;
        for r in &self.records {
            line(serde_json::to_string(r)?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let parse = |line_no: usize, e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        };
        let (_, first) = lines.next().ok_or(Error::EmptyDataset)?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| parse(1, e))?;
        if header.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported budget dataset schema {}",
                header.schema_version
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| parse(i + 1, e))?);
        }
        let ds = BudgetDataset {
            records,
            num_clients: header.num_clients,
            k: header.k,
            delta: header.delta,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Build the supervision set: for every proxy example, gather each client's
/// top-k, rerank the union to the top-k, count how many of those each client
/// contributed, and quantize with `delta`.
///
/// Records follow proxy order regardless of how work is scheduled.
pub fn construct_budget_dataset(
    proxy: &BoundCorpus<'_>,
    shards: &[BoundCorpus<'_>],
    k: usize,
    delta: usize,
) -> Result<BudgetDataset> {
    quantize(0, delta)?;
    if shards.is_empty() {
        return Err(Error::InvalidSpec("at least one client shard is required".into()));
    }
    let records = proxy
        .dataset()
        .examples()
        .par_iter()
        .map(|ex| {
            let vector = proxy.store().embedding(ex.id)?;
            let raw_counts = budget_counts(vector.as_slice(), k, shards)?;
            let classes = raw_counts.iter().map(|&n| n / delta).collect();
            Ok(BudgetRecord {
                query_id: ex.id,
                vector,
                raw_counts,
                classes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BudgetDataset {
        records,
        num_clients: shards.len(),
        k,
        delta,
    })
}

/// Per-client membership counts in the reranked top-k of the union of local top-k sets.
pub fn budget_counts(query: &[f64], k: usize, shards: &[BoundCorpus<'_>]) -> Result<Vec<usize>> {
    let local: Vec<RankedSet> = shards
        .iter()
        .map(|s| s.top_k(query, k))
        .collect::<Result<_>>()?;
    let top = merge_ranked(k, &local).id_set();
    Ok(local
        .iter()
        .map(|s| s.ids().into_iter().filter(|id| top.contains(id)).count())
        .collect())
}
