//! Simulated client/server retrieval rounds.
//!
//! For each query the server decides how many examples to request from each
//! client ([`BudgetPolicy`]), clients answer with their local nearest
//! neighbours, and the server reranks the union down to `k` examples, builds
//! the prompt and asks its backend for a label. Every round is recorded in a
//! [`Transcript`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::allocator::{predict_budget, AllocatorModel};
use crate::corpus::{Dataset, Example, LabelSpace};
use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::inference::{build_prompt, Answer, Backend, PromptTemplate};
use crate::retrieval::{rerank_vectors, BoundCorpus, Neighbor, RankedSet};
use crate::seed;

/// How the server splits its example budget across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// Per-client allocator prediction plus the buffer.
    Learned,
    /// `⌈k/C⌉` to every client.
    Uniform,
    /// A uniformly random composition of `k` into `C` parts.
    Random { seed: u64 },
    /// All of `k` to one client.
    Singleton { client: usize },
    /// `⌈k/C⌉` from every client, then `k` drawn at random from the union.
    SocialLearning { seed: u64 },
    /// Every client sends its whole shard.
    Infinite,
    /// The server retrieves from its own proxy set.
    ProxyOnly,
    /// No examples at all.
    ZeroShot,
}

impl BudgetPolicy {
    pub fn name(&self) -> String {
        match self {
            BudgetPolicy::Learned => "learned".into(),
            BudgetPolicy::Uniform => "uniform".into(),
            BudgetPolicy::Random { .. } => "random".into(),
            BudgetPolicy::Singleton { client } => format!("singleton:{client}"),
            BudgetPolicy::SocialLearning { .. } => "social_learning".into(),
            BudgetPolicy::Infinite => "infinite".into(),
            BudgetPolicy::ProxyOnly => "proxy_only".into(),
            BudgetPolicy::ZeroShot => "zero_shot".into(),
        }
    }
}

/// A client holding one shard, with embeddings bound to it.
#[derive(Debug, Clone, Copy)]
pub struct ClientNode<'a> {
    pub id: usize,
    corpus: BoundCorpus<'a>,
}

impl<'a> ClientNode<'a> {
    pub fn new(id: usize, shard: &'a Dataset, store: &'a EmbeddingStore) -> Result<Self> {
        Ok(ClientNode {
            id,
            corpus: BoundCorpus::bind(shard, store)?,
        })
    }

    pub fn shard(&self) -> &'a Dataset {
        self.corpus.dataset()
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Local top-`budget`; the whole shard, ranked, when the budget exceeds it.
    pub fn retrieve(&self, query: &[f64], budget: usize) -> Result<RankedSet> {
        self.corpus.top_k(query, budget)
    }

    fn vector(&self, id: u64) -> Result<&'a [f64]> {
        self.corpus.store().get(id).ok_or(Error::MissingId(id))
    }
}

/// `⌈k/C⌉` for every client.
pub fn uniform_budgets(k: usize, num_clients: usize) -> Vec<usize> {
    vec![k.div_ceil(num_clients.max(1)); num_clients]
}

/// A composition of `k` into `num_clients` nonnegative parts, uniform over
/// all compositions (stars and bars: choose the bar positions).
pub fn random_budgets(k: usize, num_clients: usize, rng: &mut seed::Rng) -> Vec<usize> {
    if num_clients == 0 {
        return Vec::new();
    }
    let slots = k + num_clients - 1;
    let mut bars = index::sample(rng, slots, num_clients - 1).into_vec();
    bars.sort_unstable();
    let mut parts = Vec::with_capacity(num_clients);
    let mut prev = 0;
    for (i, b) in bars.iter().enumerate() {
        // Stars between consecutive bars, with bar `i` occupying slot `b`.
        parts.push(b - prev - if i == 0 { 0 } else { 1 });
        prev = *b;
    }
    let last = if bars.is_empty() { slots } else { slots - prev - 1 };
    parts.push(last);
    parts
}

pub fn singleton_budgets(k: usize, num_clients: usize, client: usize) -> Vec<usize> {
    let mut v = vec![0; num_clients];
    v[client] = k;
    v
}

/// One query as seen by the server.
#[derive(Debug, Clone, Copy)]
pub struct Query<'q> {
    pub id: u64,
    pub text: &'q str,
    pub embedding: &'q [f64],
    /// Known label, recorded in the transcript for scoring.
    pub gold: Option<usize>,
}

impl<'q> Query<'q> {
    pub fn from_example(ex: &'q Example, embedding: &'q [f64]) -> Self {
        Query {
            id: ex.id,
            text: &ex.text,
            embedding,
            gold: Some(ex.label),
        }
    }
}

/// Server state for one policy.
#[derive(Debug, Clone, Copy)]
pub struct ServerNode<'a> {
    pub k: usize,
    /// Extra examples requested per client under [`BudgetPolicy::Learned`].
    pub alpha: usize,
    /// Bin width the allocators were trained with.
    pub delta: usize,
    pub policy: BudgetPolicy,
    pub allocators: Option<&'a [AllocatorModel]>,
    pub proxy: Option<BoundCorpus<'a>>,
    pub backend: &'a Backend,
    pub template: &'a PromptTemplate,
    pub labels: &'a LabelSpace,
    pub prompt_char_cap: Option<usize>,
}

impl<'a> ServerNode<'a> {
    pub fn new(
        k: usize,
        policy: BudgetPolicy,
        backend: &'a Backend,
        template: &'a PromptTemplate,
        labels: &'a LabelSpace,
    ) -> Self {
        ServerNode {
            k,
            alpha: 0,
            delta: 1,
            policy,
            allocators: None,
            proxy: None,
            backend,
            template,
            labels,
            prompt_char_cap: None,
        }
    }

    pub fn with_policy(mut self, policy: BudgetPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Check that the state the policy needs is present.
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        match self.policy {
            BudgetPolicy::Learned => match self.allocators {
                Some(a) if a.len() == num_clients => {}
                Some(a) => {
                    return Err(Error::InvalidSpec(format!(
                        "{} allocators for {num_clients} clients",
                        a.len()
                    )))
                }
                None => return Err(Error::InvalidSpec("learned policy needs allocators".into())),
            },
            BudgetPolicy::Singleton { client } if client >= num_clients => {
                return Err(Error::InvalidSpec(format!(
                    "singleton client {client} outside {num_clients} clients"
                )))
            }
            BudgetPolicy::ProxyOnly if self.proxy.is_none() => {
                return Err(Error::InvalidSpec("proxy-only policy needs a proxy set".into()))
            }
            _ => {}
        }
        if self.delta == 0 {
            return Err(Error::InvalidSpec("delta must be >= 1".into()));
        }
        Ok(())
    }

    /// Budgets requested from each client for one query.
    pub fn allocate(&self, query: &Query<'_>, clients: &[ClientNode<'_>]) -> Result<Vec<usize>> {
        self.validate(clients.len())?;
        let c = clients.len();
        Ok(match self.policy {
            BudgetPolicy::Learned => {
                let models = self.allocators.expect("validated");
                models
                    .iter()
                    .map(|m| Ok(predict_budget(m, query.embedding, self.delta)? + self.alpha))
                    .collect::<Result<_>>()?
            }
            BudgetPolicy::Uniform | BudgetPolicy::SocialLearning { .. } => uniform_budgets(self.k, c),
            BudgetPolicy::Random { seed } => {
                let mut rng = seed::rng(seed::derive_indexed(seed, "random-budget", query.id));
                random_budgets(self.k, c, &mut rng)
            }
            BudgetPolicy::Singleton { client } => singleton_budgets(self.k, c, client),
            BudgetPolicy::Infinite => clients.iter().map(|cl| cl.len()).collect(),
            BudgetPolicy::ProxyOnly | BudgetPolicy::ZeroShot => vec![0; c],
        })
    }
}

/// Complete record of one retrieval round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema_version: u32,
    pub query_id: u64,
    pub policy: String,
    pub alpha: usize,
    pub budgets_sent: Vec<usize>,
    pub samples_returned: Vec<Vec<u64>>,
    /// Union of returned examples, ascending by `(distance, id)`.
    pub aggregated_ids: Vec<u64>,
    /// Examples in the order they appear in the prompt.
    pub final_ice_ids: Vec<u64>,
    pub prompt_text: String,
    pub prompt_chars: usize,
    pub answer_label: Option<usize>,
    pub gold_label: Option<usize>,
    pub raw_completion: Option<String>,
    pub zero_shot_fallback: bool,
    pub total_samples_communicated: usize,
}

impl Transcript {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn is_correct(&self) -> bool {
        self.answer_label.is_some() && self.answer_label == self.gold_label
    }
}

/// A backend failure, with everything recorded before it.
#[derive(Debug)]
pub struct InferError {
    pub transcript: Box<Transcript>,
    pub error: Error,
}

impl std::fmt::Display for InferError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "query {}: {}", self.transcript.query_id, self.error)
    }
}

impl std::error::Error for InferError {}

impl From<InferError> for Error {
    fn from(e: InferError) -> Self {
        e.error
    }
}

/// Retrieval side of a round, before prompting.
#[derive(Debug, Clone, PartialEq)]
pub struct Gathered {
    pub samples_returned: Vec<Vec<u64>>,
    pub aggregated: RankedSet,
    /// Selected examples, ascending by `(distance, id)`.
    pub selected: RankedSet,
}

/// Retrieve with the given budgets and aggregate according to the server policy.
pub fn gather(
    server: &ServerNode<'_>,
    clients: &[ClientNode<'_>],
    query: &Query<'_>,
    budgets: &[usize],
) -> Result<Gathered> {
    if budgets.len() != clients.len() {
        return Err(Error::InvalidSpec(format!(
            "{} budgets for {} clients",
            budgets.len(),
            clients.len()
        )));
    }
    if let BudgetPolicy::ProxyOnly = server.policy {
        let proxy = server
            .proxy
            .ok_or_else(|| Error::InvalidSpec("proxy-only policy needs a proxy set".into()))?;
        let selected = proxy.top_k(query.embedding, server.k)?;
        return Ok(Gathered {
            samples_returned: vec![Vec::new(); clients.len()],
            aggregated: selected.clone(),
            selected,
        });
    }

    let mut samples_returned = Vec::with_capacity(clients.len());
    let mut shipped: Vec<(u64, &[f64])> = Vec::new();
    for (client, &budget) in clients.iter().zip(budgets) {
        let local = if budget == 0 {
            RankedSet::default()
        } else {
            client.retrieve(query.embedding, budget)?
        };
        for n in local.entries() {
            shipped.push((n.id, client.vector(n.id)?));
        }
        samples_returned.push(local.ids());
    }
    let aggregated = rerank_vectors(query.embedding, usize::MAX, shipped)?;
    let selected = match server.policy {
        BudgetPolicy::SocialLearning { seed } => {
            let pool = aggregated.entries();
            let take = server.k.min(pool.len());
            let mut rng = seed::rng(seed::derive_indexed(seed, "social-select", query.id));
            let picked: BTreeSet<usize> = index::sample(&mut rng, pool.len(), take).into_iter().collect();
            rank_subset(pool, &picked)
        }
        _ => rank_prefix(&aggregated, server.k),
    };
    Ok(Gathered {
        samples_returned,
        aggregated,
        selected,
    })
}

fn rank_prefix(r: &RankedSet, k: usize) -> RankedSet {
    let keep: BTreeSet<usize> = (0..k.min(r.len())).collect();
    rank_subset(r.entries(), &keep)
}

fn rank_subset(pool: &[Neighbor], picked: &BTreeSet<usize>) -> RankedSet {
    // `pool` is already ranked, so keeping positions in order preserves it.
    let ids: Vec<(u64, f64)> = picked.iter().map(|&i| (pool[i].id, pool[i].distance)).collect();
    RankedSet::from_ranked(ids.into_iter().map(|(id, distance)| Neighbor { id, distance }).collect())
}

/// Run one round: allocate, retrieve, aggregate, prompt, answer.
pub fn distributed_infer(
    server: &ServerNode<'_>,
    clients: &[ClientNode<'_>],
    query: &Query<'_>,
) -> std::result::Result<Transcript, InferError> {
    let fail = |error: Error, t: Transcript| InferError {
        transcript: Box::new(t),
        error,
    };
    let mut t = Transcript {
        schema_version: Transcript::SCHEMA_VERSION,
        query_id: query.id,
        policy: server.policy.name(),
        alpha: if server.policy == BudgetPolicy::Learned { server.alpha } else { 0 },
        budgets_sent: Vec::new(),
        samples_returned: Vec::new(),
        aggregated_ids: Vec::new(),
        final_ice_ids: Vec::new(),
        prompt_text: String::new(),
        prompt_chars: 0,
        answer_label: None,
        gold_label: query.gold,
        raw_completion: None,
        zero_shot_fallback: false,
        total_samples_communicated: 0,
    };

    let budgets = match server.allocate(query, clients) {
        Ok(b) => b,
        Err(e) => return Err(fail(e, t)),
    };
    t.budgets_sent = budgets.clone();
    let gathered = match gather(server, clients, query, &budgets) {
        Ok(g) => g,
        Err(e) => return Err(fail(e, t)),
    };
    t.total_samples_communicated = gathered.samples_returned.iter().map(Vec::len).sum();
    t.samples_returned = gathered.samples_returned;
    t.aggregated_ids = gathered.aggregated.ids();
    t.zero_shot_fallback = server.policy != BudgetPolicy::ZeroShot && gathered.selected.is_empty();

    let ordered = server.template.ice_order.arrange(&gathered.selected);
    t.final_ice_ids = ordered.iter().map(|n| n.id).collect();

    let mut ices: Vec<(&str, usize)> = Vec::with_capacity(ordered.len());
    let mut votes: Vec<(usize, f64)> = Vec::with_capacity(ordered.len());
    let sources = example_sources(server, clients);
    for n in &ordered {
        match sources.get(&n.id) {
            Some(ex) => {
                ices.push((&ex.text, ex.label));
                votes.push((ex.label, n.distance));
            }
            None => return Err(fail(Error::MissingId(n.id), t)),
        }
    }

    let prompt = match build_prompt(&ices, query.text, server.template, server.labels) {
        Ok(p) => p,
        Err(e) => return Err(fail(e, t)),
    };
    t.prompt_chars = prompt.chars().count();
    t.prompt_text = prompt;
    if let Some(cap) = server.prompt_char_cap {
        if t.prompt_chars > cap {
            let e = Error::PromptTooLong {
                chars: t.prompt_chars,
                cap,
            };
            return Err(fail(e, t));
        }
    }

    match server.backend.answer(&t.prompt_text, &votes, server.labels) {
        Ok(Answer { label, raw_completion }) => {
            t.answer_label = label;
            t.raw_completion = raw_completion;
            Ok(t)
        }
        Err(e) => Err(fail(e, t)),
    }
}

/// Social-learning baseline: [`distributed_infer`] with random selection from
/// the union of every client's top `⌈k/C⌉`.
pub fn social_learning_infer(
    server: &ServerNode<'_>,
    clients: &[ClientNode<'_>],
    query: &Query<'_>,
    seed: u64,
) -> std::result::Result<Transcript, InferError> {
    distributed_infer(&server.with_policy(BudgetPolicy::SocialLearning { seed }), clients, query)
}

/// Re-run retrieval with a transcript's recorded budgets and check that the
/// same samples and final examples come back.
pub fn replay(
    transcript: &Transcript,
    server: &ServerNode<'_>,
    clients: &[ClientNode<'_>],
    query: &Query<'_>,
) -> Result<bool> {
    let g = gather(server, clients, query, &transcript.budgets_sent)?;
    let order: Vec<u64> = server.template.ice_order.arrange(&g.selected).iter().map(|n| n.id).collect();
    Ok(g.samples_returned == transcript.samples_returned && order == transcript.final_ice_ids)
}

fn example_sources<'a>(server: &ServerNode<'a>, clients: &[ClientNode<'a>]) -> ExampleIndex<'a> {
    let mut datasets: Vec<&'a Dataset> = clients.iter().map(|c| c.shard()).collect();
    if let Some(p) = server.proxy {
        datasets.push(p.dataset());
    }
    ExampleIndex { datasets }
}

/// Looks example ids up across client shards and the proxy set.
struct ExampleIndex<'a> {
    datasets: Vec<&'a Dataset>,
}

impl<'a> ExampleIndex<'a> {
    fn get(&self, id: &u64) -> Option<&'a Example> {
        self.datasets.iter().find_map(|d| d.get(*id))
    }
}

/// Sum of `total_samples_communicated` over transcripts.
pub fn total_communicated(transcripts: &[Transcript]) -> usize {
    transcripts.iter().map(|t| t.total_samples_communicated).sum()
}

/// Count of each budget value per client, after removing the buffer.
pub fn budget_histogram(transcripts: &[Transcript], num_clients: usize) -> Vec<BTreeMap<usize, usize>> {
    let mut hist = vec![BTreeMap::new(); num_clients];
    for t in transcripts {
        for (c, b) in t.budgets_sent.iter().enumerate().take(num_clients) {
            *hist[c].entry(b.saturating_sub(t.alpha)).or_insert(0) += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rounds_up() {
        assert_eq!(uniform_budgets(32, 4), vec![8, 8, 8, 8]);
        assert_eq!(uniform_budgets(4, 3), vec![2, 2, 2]);
    }

    #[test]
    fn random_is_a_composition() {
        let mut rng = seed::rng(3);
        for _ in 0..200 {
            let b = random_budgets(4, 2, &mut rng);
            assert_eq!(b.len(), 2);
            assert_eq!(b.iter().sum::<usize>(), 4);
        }
        assert_eq!(random_budgets(5, 1, &mut rng), vec![5]);
        assert_eq!(random_budgets(0, 3, &mut rng), vec![0, 0, 0]);
    }

    #[test]
    fn random_covers_all_compositions_evenly() {
        // k=2, C=3 has 6 compositions.
        let mut rng = seed::rng(11);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let n = 60_000;
        for _ in 0..n {
            *counts.entry(random_budgets(2, 3, &mut rng)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        for v in counts.values() {
            assert!((*v as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn singleton() {
        assert_eq!(singleton_budgets(5, 3, 1), vec![0, 5, 0]);
    }

    #[test]
    fn histogram_strips_buffer() {
        let t = Transcript {
            schema_version: 1,
            query_id: 0,
            policy: "learned".into(),
            alpha: 1,
            budgets_sent: vec![3, 1],
            samples_returned: vec![vec![], vec![]],
            aggregated_ids: vec![],
            final_ice_ids: vec![],
            prompt_text: String::new(),
            prompt_chars: 0,
            answer_label: None,
            gold_label: None,
            raw_completion: None,
            zero_shot_fallback: false,
            total_samples_communicated: 0,
        };
        let h = budget_histogram(&[t.clone(), t], 2);
        assert_eq!(h[0].get(&2), Some(&2));
        assert_eq!(h[1].get(&0), Some(&2));
    }
}
