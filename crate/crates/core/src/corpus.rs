//! Labeled datasets, ingestion and client partitioning.
//!
//! A [`Dataset`] is an immutable, id-ordered list of [`Example`]s together
//! with its [`LabelSpace`]. Partitioners split a dataset into client shards;
//! every shard is itself a `Dataset` whose ids are a subset of the parent's.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::seed;

/// Retries allowed when drawing a class assignment that covers every class.
pub const MAX_ASSIGNMENT_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub text: String,
    pub label: usize,
}

/// The class set of a task, with the verbalizer an LLM emits for each class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    verbalizers: Vec<String>,
}

impl LabelSpace {
    pub fn new(verbalizers: Vec<String>) -> Result<Self> {
        if verbalizers.is_empty() {
            return Err(Error::Validation("label space needs at least one class".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &verbalizers {
            if !seen.insert(v.as_str()) {
                return Err(Error::Validation(format!("duplicate verbalizer {v:?}")));
            }
        }
        Ok(LabelSpace { verbalizers })
    }

    /// Label space whose verbalizers are the class indices themselves.
    pub fn numbered(count: usize) -> Result<Self> {
        LabelSpace::new((0..count).map(|c| c.to_string()).collect())
    }

    pub fn count(&self) -> usize {
        self.verbalizers.len()
    }

    pub fn verbalizers(&self) -> &[String] {
        &self.verbalizers
    }

    pub fn verbalizer(&self, label: usize) -> Option<&str> {
        self.verbalizers.get(label).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelSpace::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(l: LabelSpace) -> Self {
        l.verbalizers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    labels: LabelSpace,
}

impl Dataset {
    /// Validates ids (strictly increasing), labels (inside the label space)
    /// and texts (non-empty).
    pub fn new(examples: Vec<Example>, labels: LabelSpace) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= labels.count() {
                return Err(Error::Validation(format!(
                    "example {} has label {} outside label space of {}",
                    ex.id,
                    ex.label,
                    labels.count()
                )));
            }
            if ex.text.is_empty() {
                return Err(Error::Validation(format!("example {} has empty text", ex.id)));
            }
            if i > 0 && examples[i - 1].id >= ex.id {
                return Err(Error::Validation(format!(
                    "ids must be strictly increasing, found {} after {}",
                    ex.id,
                    examples[i - 1].id
                )));
            }
        }
        Ok(Dataset { examples, labels })
    }

    pub fn empty(labels: LabelSpace) -> Self {
        Dataset {
            examples: Vec::new(),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.examples.iter().map(|e| e.id)
    }

    pub fn get(&self, id: u64) -> Option<&Example> {
        self.examples
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.examples[i])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.get(id).is_some()
    }

    /// Sub-dataset with the given ids. Unknown ids are an error.
    pub fn subset(&self, ids: &[u64]) -> Result<Dataset> {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let examples = sorted
            .into_iter()
            .map(|id| self.get(id).cloned().ok_or(Error::MissingId(id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            examples,
            labels: self.labels.clone(),
        })
    }

    /// Every example whose id is not in `other`.
    pub fn difference(&self, other: &Dataset) -> Dataset {
        Dataset {
            examples: self
                .examples
                .iter()
                .filter(|e| !other.contains(e.id))
                .cloned()
                .collect(),
            labels: self.labels.clone(),
        }
    }

    /// First `n` examples in id order.
    pub fn truncate(&self, n: usize) -> Dataset {
        Dataset {
            examples: self.examples.iter().take(n).cloned().collect(),
            labels: self.labels.clone(),
        }
    }

    /// Shift every id by `offset`, e.g. to keep a second file's ids apart from the first.
    pub fn with_id_offset(mut self, offset: u64) -> Result<Dataset> {
        for ex in &mut self.examples {
            ex.id = ex
                .id
                .checked_add(offset)
                .ok_or_else(|| Error::Validation(format!("id {} + {offset} overflows", ex.id)))?;
        }
        Ok(self)
    }

    pub fn distinct_labels(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Write as JSONL with a label-space header line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = serde_json::json!({ "label_space": self.labels.verbalizers() });
        let write = |w: &mut BufWriter<fs::File>, line: String| {
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))
        };
        write(&mut w, header.to_string())?;
        for ex in &self.examples {
            write(
                &mut w,
                serde_json::json!({ "text": ex.text, "label": ex.label }).to_string(),
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    label_space: Vec<String>,
}

#[derive(Deserialize)]
struct RecordLine {
    text: String,
    label: u64,
}

/// Load a JSONL dataset. Ids follow record order, starting at 0.
///
/// An optional first line `{"label_space": [...]}` supplies verbalizers;
/// without it the class count is inferred as `max(label) + 1`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header: Option<LabelSpace> = None;
    // (file line, record)
    let mut records: Vec<(usize, RecordLine)> = Vec::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if records.is_empty() && header.is_none() {
            if let Ok(h) = serde_json::from_str::<HeaderLine>(&line) {
                header = Some(LabelSpace::new(h.label_space).map_err(|e| parse_err(e.to_string()))?);
                continue;
            }
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.text.is_empty() {
            return Err(parse_err("empty text".into()));
        }
        records.push((line_no, rec));
    }

    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let labels = match header {
        Some(l) => l,
        None => {
            let max = records.iter().map(|(_, r)| r.label).max().unwrap_or(0);
            LabelSpace::numbered(max as usize + 1)?
        }
    };

    let mut examples = Vec::with_capacity(records.len());
    for (id, (line_no, rec)) in records.into_iter().enumerate() {
        if rec.label >= labels.count() as u64 {
            return Err(Error::Validation(format!(
                "{}: line {line_no}: label {} outside label space of {}",
                path.display(),
                rec.label,
                labels.count()
            )));
        }
        examples.push(Example {
            id: id as u64,
            text: rec.text,
            label: rec.label as usize,
        });
    }
    Dataset::new(examples, labels)
}

/// Parameters of the class-count (`noniid-#label=γ`) partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub labels_per_client: usize,
    pub seed: u64,
}

/// Draw `labels_per_client` classes for every client, retrying the whole
/// draw until each class is held by at least one client.
fn assign_classes(num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let mut rng = seed::rng(spec.seed);
    for _ in 0..MAX_ASSIGNMENT_RETRIES {
        let assignment: Vec<Vec<usize>> = (0..spec.num_clients)
            .map(|_| {
                let mut picked = index::sample(&mut rng, num_classes, spec.labels_per_client).into_vec();
                picked.sort_unstable();
                picked
            })
            .collect();
        let covered: BTreeSet<usize> = assignment.iter().flatten().copied().collect();
        if covered.len() == num_classes {
            return Ok(assignment);
        }
    }
    Err(Error::InvalidSpec(format!(
        "no class assignment covering all {num_classes} classes found in {MAX_ASSIGNMENT_RETRIES} draws \
         ({} clients x {} labels)",
        spec.num_clients, spec.labels_per_client
    )))
}

/// Non-IID partition: each client receives `γ` random classes, and every
/// class is split into near-equal contiguous parts among the clients holding
/// it (the first `n mod C₁` parts take one extra sample).
pub fn partition_noniid(d: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let num_classes = d.labels().count();
    if spec.num_clients == 0 {
        return Err(Error::InvalidSpec("num_clients must be >= 1".into()));
    }
    if spec.labels_per_client == 0 || spec.labels_per_client > num_classes {
        return Err(Error::InvalidSpec(format!(
            "labels_per_client must be in 1..={num_classes}, got {}",
            spec.labels_per_client
        )));
    }
    let assignment = assign_classes(num_classes, spec)?;

    let mut shard_ids: Vec<Vec<u64>> = vec![Vec::new(); spec.num_clients];
    for class in 0..num_classes {
        let holders: Vec<usize> = (0..spec.num_clients)
            .filter(|&c| assignment[c].contains(&class))
            .collect();
        let members: Vec<u64> = d
            .examples()
            .iter()
            .filter(|e| e.label == class)
            .map(|e| e.id)
            .collect();
        let base = members.len() / holders.len();
        let extra = members.len() % holders.len();
        let mut start = 0;
        for (part, &client) in holders.iter().enumerate() {
            let size = base + usize::from(part < extra);
            shard_ids[client].extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    shard_ids.iter().map(|ids| d.subset(ids)).collect()
}

/// IID partition: seeded shuffle, then round-robin assignment.
pub fn partition_iid(d: &Dataset, num_clients: usize, seed: u64) -> Result<Vec<Dataset>> {
    if num_clients == 0 {
        return Err(Error::InvalidSpec("num_clients must be >= 1".into()));
    }
    let mut ids: Vec<u64> = d.ids().collect();
    ids.shuffle(&mut seed::rng(seed));
    let mut shard_ids: Vec<Vec<u64>> = vec![Vec::new(); num_clients];
    for (i, id) in ids.into_iter().enumerate() {
        shard_ids[i % num_clients].push(id);
    }
    shard_ids.iter().map(|ids| d.subset(ids)).collect()
}

/// Split `n` random examples off as the server's proxy set.
///
/// Returns `(proxy, remainder)`.
pub fn sample_proxy(d: &Dataset, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n == 0 || n >= d.len() {
        return Err(Error::InvalidSpec(format!(
            "proxy size must be in 1..{}, got {n}",
            d.len()
        )));
    }
    let picked: Vec<u64> = index::sample(&mut seed::rng(seed), d.len(), n)
        .into_iter()
        .map(|i| d.examples()[i].id)
        .collect();
    let proxy = d.subset(&picked)?;
    let remainder = d.difference(&proxy);
    Ok((proxy, remainder))
}

/// Member ids of every client shard, as written next to experiment outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub schema_version: u32,
    pub clients: Vec<Vec<u64>>,
}

impl ShardManifest {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn from_shards(shards: &[Dataset]) -> Self {
        ShardManifest {
            schema_version: Self::SCHEMA_VERSION,
            clients: shards.iter().map(|s| s.ids().collect()).collect(),
        }
    }

    pub fn to_shards(&self, d: &Dataset) -> Result<Vec<Dataset>> {
        self.clients.iter().map(|ids| d.subset(ids)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: ShardManifest = serde_json::from_str(&text)?;
        if manifest.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported shard manifest schema {}",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }
}

/// Gaussian class clusters with known embeddings, for self-contained runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Per-component standard deviation around the class mean.
    pub spread: f64,
    /// Fraction of examples whose point is drawn around another class's mean
    /// while keeping their own label.
    #[serde(default)]
    pub label_noise: f64,
    /// Id of the first generated example.
    #[serde(default)]
    pub first_id: u64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Self {
        SynthSpec {
            num_classes,
            per_class,
            dim,
            spread,
            label_noise: 0.0,
            first_id: 0,
            seed,
        }
    }

    /// Class means. Orthogonal unit vectors while classes fit in `dim`,
    /// seeded random unit vectors beyond that.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed::derive(self.seed, "class-means"));
        (0..self.num_classes)
            .map(|g| {
                let mut mean = vec![0.0; self.dim];
                if self.num_classes <= self.dim {
                    mean[g] = 1.0;
                } else {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    for m in mean.iter_mut() {
                        *m = normal.sample(&mut rng);
                    }
                    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
                    mean.iter_mut().for_each(|x| *x /= norm);
                }
                mean
            })
            .collect()
    }
}

/// Generate clustered examples and their embeddings.
pub fn synth_clusters(spec: &SynthSpec) -> Result<(Dataset, EmbeddingStore)> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::InvalidSpec(
            "num_classes, per_class and dim must be positive".into(),
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::InvalidSpec(format!("spread must be >= 0, got {}", spec.spread)));
    }
    if !(0.0..1.0).contains(&spec.label_noise) || (spec.label_noise > 0.0 && spec.num_classes < 2) {
        return Err(Error::InvalidSpec(format!(
            "label_noise must be in [0, 1) and needs >= 2 classes, got {}",
            spec.label_noise
        )));
    }

    let means = spec.class_means();
    let normal = Normal::new(0.0, spec.spread)
        .map_err(|e| Error::InvalidSpec(format!("spread: {e}")))?;
    let mut rng = seed::rng(seed::derive_indexed(spec.seed, "points", spec.first_id));
    let labels = LabelSpace::new((0..spec.num_classes).map(|c| format!("class_{c}")).collect())?;

    let mut examples = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut vectors = Vec::with_capacity(examples.capacity());
    let mut id = spec.first_id;
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            let source = if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                let other = rng.random_range(0..spec.num_classes - 1);
                if other >= class {
                    other + 1
                } else {
                    other
                }
            } else {
                class
            };
            let v: Vec<f64> = means[source]
                .iter()
                .map(|m| m + normal.sample(&mut rng))
                .collect();
            examples.push(Example {
                id,
                text: format!("synthetic example {id} of class {class}"),
                label: class,
            });
            vectors.push((id, v));
            id += 1;
        }
    }
    let store = EmbeddingStore::from_entries(spec.dim, vectors)?;
    Ok((Dataset::new(examples, labels)?, store))
}
