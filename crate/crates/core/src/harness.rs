//! End-to-end experiment runs.
//!
//! A run goes through these stages, each cached under
//! `<output_dir>/cache/<stage>-<key>/` where the key hashes every input that
//! can change the artifact:
//!
//! 1. `embed`: embeddings for the client corpus and the evaluation pool.
//! 2. `split` (per replicate): proxy/test split of the evaluation pool and client shards.
//! 3. `budget` (per replicate): the allocator supervision set.
//! 4. `allocators` (per replicate): one trained model per client.
//!
//! Evaluation is always recomputed. It writes transcripts to
//! `<output_dir>/replicate-<r>/transcripts/<policy>.jsonl`, then
//! `report.json` and `budget_histogram.csv` at the top of the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{self, AllocatorModel};
use crate::config::{DataConfig, EmbeddingConfig, ExperimentConfig, PartitionScheme, PolicyName};
use crate::corpus::{load_dataset, partition_iid, partition_noniid, sample_proxy, synth_clusters, Dataset, PartitionSpec, SynthSpec};
use crate::embed::{encode_dataset, load_embeddings, EmbeddingStore, HashEncoder};
use crate::error::{Error, Result};
use crate::federation::{budget_histogram, distributed_infer, BudgetPolicy, ClientNode, Query, ServerNode, Transcript};
use crate::inference::{Backend, PromptTemplate};
use crate::oracle::{construct_budget_dataset, BudgetDataset};
use crate::retrieval::BoundCorpus;
use crate::seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fraction of answers equal to their gold label; unanswered counts as wrong.
pub fn evaluate_accuracy(answers: &[(Option<usize>, usize)]) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::Validation("no answers to score".into()));
    }
    let hits = answers.iter().filter(|(p, g)| *p == Some(*g)).count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fingerprint(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

const COMPLETE_MARKER: &str = "complete";

/// A cache directory for one stage; artifacts count only once the marker exists.
struct StageDir {
    path: PathBuf,
}

impl StageDir {
    fn new(out: &Path, stage: &str, key: &str) -> Self {
        StageDir {
            path: out.join("cache").join(format!("{stage}-{key}")),
        }
    }

    fn is_complete(&self) -> bool {
        self.path.join(COMPLETE_MARKER).exists()
    }

    fn begin(&self) -> Result<()> {
        if self.path.exists() {
            fs::remove_dir_all(&self.path).map_err(|e| Error::io(&self.path, e))?;
        }
        create_dir(&self.path)
    }

    fn finish(&self) -> Result<()> {
        let p = self.path.join(COMPLETE_MARKER);
        fs::write(&p, "").map_err(|e| Error::io(&p, e))
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Client corpus and evaluation pool with their embeddings. Evaluation ids
/// start after the last client-corpus id.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: Dataset,
    pub train_store: EmbeddingStore,
    pub eval: Dataset,
    pub eval_store: EmbeddingStore,
}

/// One replicate's proxy set, test queries and client shards.
#[derive(Debug, Clone)]
pub struct Split {
    pub proxy: Dataset,
    pub test: Dataset,
    pub shards: Vec<Dataset>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    schema_version: u32,
    proxy: Vec<u64>,
    test: Vec<u64>,
    clients: Vec<Vec<u64>>,
}

/// A configured experiment with its corpora loaded.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub corpora: Corpora,
    pub out: PathBuf,
    pub template: PromptTemplate,
    pub backend: Backend,
    data_key: String,
}

impl Experiment {
    /// Load data and embeddings (the `embed` stage).
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        create_dir(&out)?;
        let template = cfg.prompt_template()?;
        template.validate()?;
        let backend = Backend::from_config(&cfg.backend)?;
        let (corpora, data_key) = load_corpora(&cfg, &out).map_err(Error::in_stage("embed"))?;
        Ok(Experiment {
            cfg,
            corpora,
            out,
            template,
            backend,
            data_key,
        })
    }

    pub fn replicate_seed(&self, index: usize) -> u64 {
        seed::derive_indexed(self.cfg.seed, "replicate", index as u64)
    }

    /// Proxy/test split and client shards for replicate `index` (the `split` stage).
    pub fn replicate(&self, index: usize) -> Result<Replicate> {
        let seed = self.replicate_seed(index);
        let (split, key) = self.split(seed).map_err(Error::in_stage("split"))?;
        let shard_stores = split
            .shards
            .iter()
            .map(|s| self.corpora.train_store.restrict_to(s))
            .collect::<Result<_>>()?;
        let proxy_store = self.corpora.eval_store.restrict_to(&split.proxy)?;
        Ok(Replicate {
            index,
            seed,
            split,
            shard_stores,
            proxy_store,
            key,
            budget: None,
            allocators: None,
        })
    }

    fn split(&self, seed: u64) -> Result<(Split, String)> {
        let cfg = &self.cfg;
        let key = fingerprint(&[
            &self.data_key,
            &json(&cfg.partition),
            &cfg.proxy_size.to_string(),
            &json(&cfg.max_eval_queries),
            &seed.to_string(),
        ]);
        let dir = StageDir::new(&self.out, "split", &key);
        let manifest_path = dir.file("split.json");
        let (train, eval) = (&self.corpora.train, &self.corpora.eval);

        if dir.is_complete() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let m: SplitManifest = serde_json::from_str(&text)?;
            let split = Split {
                proxy: eval.subset(&m.proxy)?,
                test: eval.subset(&m.test)?,
                shards: m.clients.iter().map(|ids| train.subset(ids)).collect::<Result<_>>()?,
            };
            return Ok((split, key));
        }

        if cfg.proxy_size >= eval.len() {
            return Err(Error::Config(format!(
                "proxy_size {} must be smaller than the evaluation pool ({})",
                cfg.proxy_size,
                eval.len()
            )));
        }
        let (proxy, mut test) = sample_proxy(eval, cfg.proxy_size, seed::derive(seed, "proxy"))?;
        if let Some(n) = cfg.max_eval_queries {
            test = test.truncate(n);
        }
        let partition_seed = seed::derive(seed, "partition");
        let shards = match cfg.partition.scheme {
            PartitionScheme::Iid => partition_iid(train, cfg.partition.clients, partition_seed)?,
            PartitionScheme::Noniid => partition_noniid(
                train,
                &PartitionSpec {
                    num_clients: cfg.partition.clients,
                    labels_per_client: cfg.partition.labels_per_client.unwrap_or(1),
                    seed: partition_seed,
                },
            )?,
        };
        dir.begin()?;
        let m = SplitManifest {
            schema_version: 1,
            proxy: proxy.ids().collect(),
            test: test.ids().collect(),
            clients: shards.iter().map(|s| s.ids().collect()).collect(),
        };
        fs::write(&manifest_path, serde_json::to_string(&m)?).map_err(|e| Error::io(&manifest_path, e))?;
        dir.finish()?;
        Ok((Split { proxy, test, shards }, key))
    }
}

fn load_corpora(cfg: &ExperimentConfig, out: &Path) -> Result<(Corpora, String)> {
    let (train, eval, generated) = match &cfg.data {
        DataConfig::Synthetic {
            num_classes,
            train_per_class,
            eval_per_class,
            dim,
            spread,
            label_noise,
        } => {
            let base = SynthSpec {
                num_classes: *num_classes,
                per_class: *train_per_class,
                dim: *dim,
                spread: *spread,
                label_noise: *label_noise,
                first_id: 0,
                seed: seed::derive(cfg.seed, "data"),
            };
            let (train, train_store) = synth_clusters(&base)?;
            let (eval, eval_store) = synth_clusters(&SynthSpec {
                per_class: *eval_per_class,
                label_noise: 0.0,
                first_id: train.len() as u64,
                ..base
            })?;
            (train, eval, Some((train_store, eval_store)))
        }
        DataConfig::Files { train, eval } => {
            let train = load_dataset(&cfg.resolve_path(train))?;
            let offset = train.len() as u64;
            let eval = load_dataset(&cfg.resolve_path(eval))?.with_id_offset(offset)?;
            (train, eval, None)
        }
    };
    if train.labels() != eval.labels() {
        return Err(Error::Validation("client corpus and evaluation pool use different label spaces".into()));
    }

    let embedding = cfg.embedding();
    let data_identity = match &cfg.data {
        DataConfig::Synthetic { .. } => format!("{}|{}", json(&cfg.data), cfg.seed),
        DataConfig::Files { train, eval } => format!(
            "{}|{}",
            file_digest(&cfg.resolve_path(train))?,
            file_digest(&cfg.resolve_path(eval))?
        ),
    };
    let embedding_identity = match &embedding {
        EmbeddingConfig::Files { train, eval } => format!(
            "{}|{}",
            file_digest(&cfg.resolve_path(train))?,
            file_digest(&cfg.resolve_path(eval))?
        ),
        other => json(other),
    };
    let key = fingerprint(&[&data_identity, &embedding_identity]);

    let (train_store, eval_store) = match (embedding, generated) {
        (EmbeddingConfig::Synthetic, Some(stores)) => stores,
        (EmbeddingConfig::Synthetic, None) => {
            return Err(Error::Config("synthetic embeddings need synthetic data".into()))
        }
        (other, _) => {
            let dir = StageDir::new(out, "embed", &key);
            let (tp, ep) = (dir.file("train_store.jsonl"), dir.file("eval_store.jsonl"));
            if dir.is_complete() {
                (load_embeddings(&tp)?, load_embeddings(&ep)?)
            } else {
                let stores = match other {
                    EmbeddingConfig::Hash { dim, seed } => {
                        let enc = HashEncoder::new(dim, seed)?;
                        (encode_dataset(&train, &enc)?, encode_dataset(&eval, &enc)?)
                    }
                    EmbeddingConfig::Files { train: t, eval: e } => (
                        load_embeddings(&cfg.resolve_path(&t))?,
                        load_embeddings(&cfg.resolve_path(&e))?.with_id_offset(train.len() as u64)?,
                    ),
                    EmbeddingConfig::Synthetic => unreachable!(),
                };
                dir.begin()?;
                stores.0.save_jsonl(&tp)?;
                stores.1.save_jsonl(&ep)?;
                dir.finish()?;
                stores
            }
        }
    };
    train_store.check_bound(&train)?;
    eval_store.check_bound(&eval)?;
    if train_store.dim() != eval_store.dim() {
        return Err(Error::DimensionMismatch {
            id: None,
            expected: train_store.dim(),
            found: eval_store.dim(),
        });
    }
    Ok((
        Corpora {
            train,
            train_store,
            eval,
            eval_store,
        },
        key,
    ))
}

/// Per-replicate state: split, bound stores and (lazily) the learned allocators.
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub shard_stores: Vec<EmbeddingStore>,
    pub proxy_store: EmbeddingStore,
    key: String,
    budget: Option<(BudgetDataset, String)>,
    allocators: Option<Vec<AllocatorModel>>,
}

/// Transcripts of one configured policy (several runs for the singleton baseline).
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub policy: PolicyName,
    pub runs: Vec<(BudgetPolicy, Vec<Transcript>)>,
}

impl PolicyRun {
    /// Accuracy, averaged over runs (clients, for the singleton baseline).
    pub fn accuracy(&self) -> Result<f64> {
        let mut accs = Vec::with_capacity(self.runs.len());
        for (_, ts) in &self.runs {
            let answers: Vec<(Option<usize>, usize)> = ts
                .iter()
                .map(|t| (t.answer_label, t.gold_label.unwrap_or(usize::MAX)))
                .collect();
            accs.push(evaluate_accuracy(&answers)?);
        }
        Ok(mean_std(&accs).0)
    }

    pub fn samples_communicated(&self) -> usize {
        self.runs.iter().flat_map(|(_, ts)| ts).map(|t| t.total_samples_communicated).sum()
    }

    pub fn transcripts(&self) -> impl Iterator<Item = &Transcript> {
        self.runs.iter().flat_map(|(_, ts)| ts)
    }
}

impl Replicate {
    pub fn clients(&self) -> Result<Vec<ClientNode<'_>>> {
        self.split
            .shards
            .iter()
            .zip(&self.shard_stores)
            .enumerate()
            .map(|(c, (d, s))| ClientNode::new(c, d, s))
            .collect()
    }

    pub fn proxy(&self) -> Result<BoundCorpus<'_>> {
        BoundCorpus::bind(&self.split.proxy, &self.proxy_store)
    }

    /// The allocator supervision set (the `budget` stage).
    pub fn budget_dataset(&mut self, exp: &Experiment) -> Result<&BudgetDataset> {
        if self.budget.is_none() {
            let built = self.build_budget(exp).map_err(Error::in_stage("budget"))?;
            self.budget = Some(built);
        }
        Ok(&self.budget.as_ref().expect("just built").0)
    }

    fn build_budget(&self, exp: &Experiment) -> Result<(BudgetDataset, String)> {
        let key = fingerprint(&[&self.key, &exp.cfg.k.to_string(), &exp.cfg.delta.to_string()]);
        let dir = StageDir::new(&exp.out, "budget", &key);
        let path = dir.file("budget_dataset.jsonl");
        if dir.is_complete() {
            return Ok((BudgetDataset::load_jsonl(&path)?, key));
        }
        let proxy = self.proxy()?;
        let shards: Vec<BoundCorpus<'_>> = self
            .split
            .shards
            .iter()
            .zip(&self.shard_stores)
            .map(|(d, s)| BoundCorpus::bind(d, s))
            .collect::<Result<_>>()?;
        let ds = construct_budget_dataset(&proxy, &shards, exp.cfg.k, exp.cfg.delta)?;
        dir.begin()?;
        ds.save_jsonl(&path)?;
        dir.finish()?;
        Ok((ds, key))
    }

    /// Trained per-client allocators (the `allocators` stage).
    pub fn allocators(&mut self, exp: &Experiment) -> Result<&[AllocatorModel]> {
        if self.allocators.is_none() {
            self.budget_dataset(exp)?;
            let models = self.train_allocators(exp).map_err(Error::in_stage("allocators"))?;
            self.allocators = Some(models);
        }
        Ok(self.allocators.as_deref().expect("just trained"))
    }

    fn train_allocators(&self, exp: &Experiment) -> Result<Vec<AllocatorModel>> {
        let (budget, budget_key) = self.budget.as_ref().expect("budget stage ran first");
        let train_cfg = exp.cfg.allocator.train_config(seed::derive(self.seed, "allocator"));
        let key = fingerprint(&[budget_key, &json(&exp.cfg.allocator), &train_cfg.seed.to_string()]);
        let dir = StageDir::new(&exp.out, "allocators", &key);
        let base = |c: usize| dir.file(&format!("client_{c}"));
        let clients = budget.num_clients;
        if dir.is_complete() {
            return (0..clients).map(|c| Ok(AllocatorModel::load(&base(c))?.0)).collect();
        }
        let models = (0..clients)
            .into_par_iter()
            .map(|c| Ok(allocator::train(c, budget, exp.cfg.allocator.width, &train_cfg)?.model))
            .collect::<Result<Vec<_>>>()?;
        dir.begin()?;
        for (c, m) in models.iter().enumerate() {
            m.save(&base(c), exp.cfg.delta, &train_cfg)?;
        }
        dir.finish()?;
        Ok(models)
    }

    /// Concrete policies a configured policy name expands to.
    pub fn expand(&self, name: PolicyName) -> Vec<BudgetPolicy> {
        match name {
            PolicyName::Learned => vec![BudgetPolicy::Learned],
            PolicyName::Uniform => vec![BudgetPolicy::Uniform],
            PolicyName::Random => vec![BudgetPolicy::Random {
                seed: seed::derive(self.seed, "policy-random"),
            }],
            PolicyName::Singleton => (0..self.split.shards.len())
                .map(|client| BudgetPolicy::Singleton { client })
                .collect(),
            PolicyName::SocialLearning => vec![BudgetPolicy::SocialLearning {
                seed: seed::derive(self.seed, "social-learning"),
            }],
            PolicyName::Infinite => vec![BudgetPolicy::Infinite],
            PolicyName::ProxyOnly => vec![BudgetPolicy::ProxyOnly],
            PolicyName::ZeroShot => vec![BudgetPolicy::ZeroShot],
        }
    }

    /// Answer every test query under `name`. Queries run in parallel; the
    /// transcripts come back in query order.
    pub fn evaluate(&mut self, exp: &Experiment, name: PolicyName) -> Result<PolicyRun> {
        if name == PolicyName::Learned {
            self.allocators(exp)?;
        }
        let this = &*self;
        let clients = this.clients()?;
        let proxy = this.proxy()?;
        let labels = this.split.test.labels();
        let mut runs = Vec::new();
        for policy in this.expand(name) {
            let server = ServerNode {
                k: exp.cfg.k,
                alpha: exp.cfg.alpha,
                delta: exp.cfg.delta,
                policy,
                allocators: this.allocators.as_deref(),
                proxy: Some(proxy),
                backend: &exp.backend,
                template: &exp.template,
                labels,
                prompt_char_cap: exp.cfg.prompt_char_cap,
            };
            server.validate(clients.len())?;
            let transcripts = this
                .split
                .test
                .examples()
                .par_iter()
                .map(|ex| {
                    let v = exp.corpora.eval_store.get(ex.id).ok_or(Error::MissingId(ex.id))?;
                    distributed_infer(&server, &clients, &Query::from_example(ex, v)).map_err(Error::from)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(Error::in_stage("evaluate"))?;
            runs.push((policy, transcripts));
        }
        Ok(PolicyRun { policy: name, runs })
    }

    pub fn transcript_dir(&self, exp: &Experiment) -> PathBuf {
        exp.out.join(format!("replicate-{}", self.index)).join("transcripts")
    }
}

pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in transcripts {
        writeln!(w, "{}", serde_json::to_string(t)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transcript = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if t.schema_version != Transcript::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "{}: line {}: unsupported transcript schema {}",
                path.display(),
                i + 1,
                t.schema_version
            )));
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: PolicyName,
    pub accuracy_mean: f64,
    /// Population standard deviation over replicates.
    pub accuracy_std: f64,
    pub accuracy_per_seed: Vec<f64>,
    pub samples_communicated_per_seed: Vec<usize>,
    pub unanswered: usize,
    pub zero_shot_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateHistogram {
    pub replicate: usize,
    /// Per client: allocator budget (buffer excluded) → number of queries.
    pub clients: Vec<BTreeMap<usize, usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    /// Resolved config, without the output directory.
    pub config: serde_json::Value,
    pub replicate_seeds: Vec<u64>,
    pub test_queries_per_seed: Vec<usize>,
    pub policies: Vec<PolicyReport>,
    /// From the learned policy; empty when it was not evaluated.
    pub budget_histograms: Vec<ReplicateHistogram>,
}

impl Report {
    pub fn policy(&self, name: PolicyName) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("replicate,client,budget_value,count\n");
        for h in &self.budget_histograms {
            for (c, counts) in h.clients.iter().enumerate() {
                for (b, n) in counts {
                    s.push_str(&format!("{},{c},{b},{n}\n", h.replicate));
                }
            }
        }
        s
    }
}

/// Everything a run produced, for callers that want more than the report.
pub struct RunOutput {
    pub report: Report,
    /// Per replicate, per configured policy.
    pub policy_runs: Vec<Vec<PolicyRun>>,
}

fn config_echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("output_dir");
    }
    Ok(v)
}

/// Run every stage and evaluate every configured policy on every replicate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    Ok(run_experiment_full(cfg)?.report)
}

pub fn run_experiment_full(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let exp = Experiment::prepare(cfg.clone())?;
    let mut all_runs = Vec::with_capacity(cfg.num_seeds);
    let mut histograms = Vec::new();
    let mut seeds = Vec::new();
    let mut test_sizes = Vec::new();
    for r in 0..cfg.num_seeds {
        let mut rep = exp.replicate(r)?;
        seeds.push(rep.seed);
        test_sizes.push(rep.split.test.len());
        let mut runs = Vec::with_capacity(cfg.policies.len());
        for &name in &cfg.policies {
            let run = rep.evaluate(&exp, name)?;
            for (policy, ts) in &run.runs {
                let file = format!("{}.jsonl", policy.name().replace(':', "-"));
                write_transcripts(&rep.transcript_dir(&exp).join(file), ts).map_err(Error::in_stage("report"))?;
            }
            if name == PolicyName::Learned {
                let ts: Vec<Transcript> = run.transcripts().cloned().collect();
                histograms.push(ReplicateHistogram {
                    replicate: r,
                    clients: budget_histogram(&ts, rep.split.shards.len()),
                });
            }
            runs.push(run);
        }
        all_runs.push(runs);
    }

    let mut policies = Vec::with_capacity(cfg.policies.len());
    for (i, &name) in cfg.policies.iter().enumerate() {
        let per_seed: Vec<&PolicyRun> = all_runs.iter().map(|runs| &runs[i]).collect();
        let accuracy_per_seed = per_seed.iter().map(|r| r.accuracy()).collect::<Result<Vec<_>>>()?;
        let (accuracy_mean, accuracy_std) = mean_std(&accuracy_per_seed);
        policies.push(PolicyReport {
            policy: name,
            accuracy_mean,
            accuracy_std,
            accuracy_per_seed,
            samples_communicated_per_seed: per_seed.iter().map(|r| r.samples_communicated()).collect(),
            unanswered: per_seed
                .iter()
                .flat_map(|r| r.transcripts())
                .filter(|t| t.answer_label.is_none())
                .count(),
            zero_shot_fallbacks: per_seed
                .iter()
                .flat_map(|r| r.transcripts())
                .filter(|t| t.zero_shot_fallback)
                .count(),
        });
    }

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        config: config_echo(cfg)?,
        replicate_seeds: seeds,
        test_queries_per_seed: test_sizes,
        policies,
        budget_histograms: histograms,
    };
    let write = |name: &str, body: &str| {
        let p = exp.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("report.json", &report.to_json()?).map_err(Error::in_stage("report"))?;
    write("budget_histogram.csv", &report.histogram_csv()).map_err(Error::in_stage("report"))?;
    Ok(RunOutput {
        report,
        policy_runs: all_runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTable {
    pub multipliers: Vec<f64>,
    pub mean_recall: Vec<f64>,
    /// Mean examples requested per query at each multiplier.
    pub mean_samples: Vec<f64>,
    /// `recall[q][m]` for transcript `q` and multiplier `m`.
    pub recall: Vec<Vec<f64>>,
}

/// Scale each transcript's per-client budgets by every multiplier (rounding
/// up; an infinite multiplier requests whole shards), redo retrieval and
/// measure what fraction of the centralized top-k the union contains.
pub fn budget_efficiency_curve(
    transcripts: &[Transcript],
    clients: &[ClientNode<'_>],
    global: &BoundCorpus<'_>,
    queries: &EmbeddingStore,
    k: usize,
    multipliers: &[f64],
) -> Result<EfficiencyTable> {
    if let Some(m) = multipliers.iter().find(|m| !(**m >= 0.0)) {
        return Err(Error::Validation(format!("multiplier {m} must be >= 0")));
    }
    let rows = transcripts
        .par_iter()
        .map(|t| {
            let q = queries.get(t.query_id).ok_or(Error::MissingId(t.query_id))?;
            if t.budgets_sent.len() != clients.len() {
                return Err(Error::Validation(format!(
                    "transcript {} has {} budgets for {} clients",
                    t.query_id,
                    t.budgets_sent.len(),
                    clients.len()
                )));
            }
            let target = global.top_k(q, k)?.id_set();
            let mut recall = Vec::with_capacity(multipliers.len());
            let mut sent = Vec::with_capacity(multipliers.len());
            for &m in multipliers {
                let mut hit = 0usize;
                let mut total = 0usize;
                for (client, &b) in clients.iter().zip(&t.budgets_sent) {
                    let budget = if m.is_infinite() {
                        client.len()
                    } else {
                        (m * b as f64).ceil() as usize
                    };
                    let got = client.retrieve(q, budget)?;
                    total += got.len();
                    hit += got.entries().iter().filter(|n| target.contains(&n.id)).count();
                }
                recall.push(if target.is_empty() { 1.0 } else { hit as f64 / target.len() as f64 });
                sent.push(total as f64);
            }
            Ok((recall, sent))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let column_mean = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, j: usize| {
        rows.iter().map(|r| pick(r)[j]).sum::<f64>() / n
    };
    Ok(EfficiencyTable {
        multipliers: multipliers.to_vec(),
        mean_recall: (0..multipliers.len()).map(|j| column_mean(&|r| &r.0, j)).collect(),
        mean_samples: (0..multipliers.len()).map(|j| column_mean(&|r| &r.1, j)).collect(),
        recall: rows.into_iter().map(|r| r.0).collect(),
    })
}

impl EfficiencyTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("multiplier\tmean_recall\tmean_samples\n");
        for ((m, r), n) in self.multipliers.iter().zip(&self.mean_recall).zip(&self.mean_samples) {
            s.push_str(&format!("{m}\t{r:.4}\t{n:.2}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(evaluate_accuracy(&[(Some(1), 1), (Some(0), 0)]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&[(Some(1), 1), (Some(1), 0)]).unwrap(), 0.5);
        assert_eq!(evaluate_accuracy(&[(None, 0)]).unwrap(), 0.0);
        assert!(evaluate_accuracy(&[]).is_err());
    }

    #[test]
    fn mean_and_population_std() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-12);
        let expected = ((0.04 + 0.0 + 0.04) / 3.0f64).sqrt();
        assert!((s - expected).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn fingerprint_separates_parts() {
        assert_ne!(fingerprint(&["ab", "c"]), fingerprint(&["a", "bc"]));
        assert_eq!(fingerprint(&["x"]).len(), 16);
    }
}
