//! Experiment configuration and dataset presets.
//!
//! Configs are TOML. A `preset = "<name>"` key fills in the per-dataset
//! hyper-parameters (k, clients, labels per client, proxy size, δ, α); any
//! key written in the file overrides the preset. The fully resolved config is
//! embedded in every report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{TrainConfig, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::inference::{BackendConfig, PromptTemplate};

/// Per-dataset hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub k: usize,
    pub clients: usize,
    pub labels_per_client: usize,
    pub proxy_size: usize,
    pub delta: usize,
    pub alpha: usize,
    /// Recorded for completeness; no stage reads it.
    pub quant_ratio: f64,
}

const fn preset(
    name: &'static str,
    k: usize,
    clients: usize,
    labels_per_client: usize,
    proxy_size: usize,
    delta: usize,
    alpha: usize,
    quant_ratio: f64,
) -> Preset {
    Preset {
        name,
        k,
        clients,
        labels_per_client,
        proxy_size,
        delta,
        alpha,
        quant_ratio,
    }
}

pub const PRESETS: &[Preset] = &[
    preset("sst5", 32, 4, 2, 500, 3, 0, 0.5),
    preset("amazon", 8, 2, 3, 750, 2, 0, 0.5),
    preset("yelp", 4, 2, 3, 750, 2, 2, 0.5),
    preset("mr", 32, 4, 1, 500, 3, 0, 0.5),
    preset("yahoo", 4, 2, 5, 750, 2, 2, 0.5),
    preset("agnews", 4, 2, 2, 750, 2, 2, 0.5),
    preset("subj", 32, 4, 1, 500, 3, 0, 0.3),
    // Paraphrased / generated query and training samples.
    preset("sst5-generated", 32, 4, 2, 500, 3, 4, 0.5),
    preset("yelp-generated", 4, 2, 3, 750, 3, 0, 0.5),
    preset("subj-generated", 32, 4, 1, 500, 3, 0, 0.3),
    // Subj with other answering models.
    preset("subj-gpt-neo-1.3b", 32, 4, 1, 500, 3, 0, 0.3),
    preset("subj-gpt-neo-2.7b", 32, 4, 1, 500, 3, 0, 0.3),
    preset("subj-llama-2-7b", 32, 4, 1, 500, 3, 0, 0.3),
];

pub fn find_preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl Preset {
    fn to_table(self) -> toml::Table {
        let mut partition = toml::Table::new();
        partition.insert("scheme".into(), "noniid".into());
        partition.insert("clients".into(), (self.clients as i64).into());
        partition.insert("labels_per_client".into(), (self.labels_per_client as i64).into());
        let mut t = toml::Table::new();
        t.insert("k".into(), (self.k as i64).into());
        t.insert("delta".into(), (self.delta as i64).into());
        t.insert("alpha".into(), (self.alpha as i64).into());
        t.insert("proxy_size".into(), (self.proxy_size as i64).into());
        t.insert("quant_ratio".into(), self.quant_ratio.into());
        t.insert("partition".into(), partition.into());
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian class clusters with built-in embeddings. Label noise applies
    /// to the client corpus only; the evaluation pool is clean.
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        eval_per_class: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        label_noise: f64,
    },
    /// JSONL datasets. Clients are drawn from `train`, the proxy set and
    /// test queries from `eval`.
    Files { train: PathBuf, eval: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbeddingConfig {
    /// Vectors produced by the synthetic generator.
    Synthetic,
    /// Character n-gram feature hashing.
    Hash {
        #[serde(default = "default_embedding_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Precomputed embeddings, ids matching record order of each dataset file.
    Files { train: PathBuf, eval: PathBuf },
}

fn default_embedding_dim() -> usize {
    768
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub clients: usize,
    /// Classes per client under the non-IID scheme.
    #[serde(default)]
    pub labels_per_client: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    Learned,
    Uniform,
    Random,
    Singleton,
    SocialLearning,
    Infinite,
    ProxyOnly,
    ZeroShot,
}

impl PolicyName {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Learned => "learned",
            PolicyName::Uniform => "uniform",
            PolicyName::Random => "random",
            PolicyName::Singleton => "singleton",
            PolicyName::SocialLearning => "social_learning",
            PolicyName::Infinite => "infinite",
            PolicyName::ProxyOnly => "proxy_only",
            PolicyName::ZeroShot => "zero_shot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocatorConfig {
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        AllocatorConfig {
            width: DEFAULT_WIDTH,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
        }
    }
}

impl AllocatorConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub preset: Option<String>,
    /// Master seed; every stage seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Independent replicates (partition, proxy, training) per run.
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub embedding: Option<EmbeddingConfig>,
    pub partition: PartitionConfig,
    pub k: usize,
    pub delta: usize,
    #[serde(default)]
    pub alpha: usize,
    pub proxy_size: usize,
    #[serde(default)]
    pub quant_ratio: Option<f64>,
    /// Cap on test queries per replicate (lowest ids first).
    #[serde(default)]
    pub max_eval_queries: Option<usize>,
    pub policies: Vec<PolicyName>,
    #[serde(default)]
    pub allocator: AllocatorConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub prompt: Option<PromptTemplate>,
    /// TOML file holding a prompt template; relative to the config file.
    #[serde(default)]
    pub prompt_file: Option<PathBuf>,
    #[serde(default)]
    pub prompt_char_cap: Option<usize>,
    /// Directory relative paths in the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_num_seeds() -> usize {
    3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = match file.get("preset").and_then(|v| v.as_str()) {
            Some(name) => find_preset(name)
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?
                .to_table(),
            None => toml::Table::new(),
        };
        merge(&mut table, file);
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        match (&self.embedding, &self.data) {
            (Some(e), _) => e.clone(),
            (None, DataConfig::Synthetic { .. }) => EmbeddingConfig::Synthetic,
            (None, DataConfig::Files { .. }) => EmbeddingConfig::Hash {
                dim: default_embedding_dim(),
                seed: 0,
            },
        }
    }

    pub fn prompt_template(&self) -> Result<PromptTemplate> {
        match (&self.prompt, &self.prompt_file) {
            (Some(_), Some(_)) => Err(Error::Config("set either prompt or prompt_file, not both".into())),
            (Some(t), None) => Ok(t.clone()),
            (None, Some(p)) => {
                let path = self.resolve_path(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            }
            (None, None) => Ok(PromptTemplate::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.delta == 0 {
            return bad("delta must be >= 1");
        }
        if self.proxy_size == 0 {
            return bad("proxy_size must be >= 1");
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be >= 1");
        }
        if self.policies.is_empty() {
            return bad("at least one policy is required");
        }
        if self.partition.clients == 0 {
            return bad("partition.clients must be >= 1");
        }
        if self.partition.scheme == PartitionScheme::Noniid
            && self.partition.labels_per_client.is_none_or(|g| g == 0)
        {
            return bad("non-IID partition needs labels_per_client >= 1");
        }
        if self.allocator.width == 0 {
            return bad("allocator.width must be >= 1");
        }
        self.allocator
            .train_config(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.allocator.learning_rate <= 0.0 {
            return bad("allocator.learning_rate must be > 0");
        }
        if let (EmbeddingConfig::Synthetic, DataConfig::Files { .. }) = (self.embedding(), &self.data) {
            return bad("synthetic embeddings need synthetic data");
        }
        if let EmbeddingConfig::Hash { dim, .. } = self.embedding() {
            if dim < 2 {
                return bad("hash embedding dim must be >= 2");
            }
        }
        if let BackendConfig::Http(h) = &self.backend {
            h.validate()?;
        }
        if let Some(t) = &self.prompt {
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}
