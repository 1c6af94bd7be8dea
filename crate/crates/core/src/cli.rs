//! Command-line interface.
//!
//! Exit status: 0 on success, 1 for usage or input errors, 2 when a stage
//! fails at runtime.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ExperimentConfig, PolicyName};
use crate::corpus::load_dataset;
use crate::embed::{encode_dataset, HashEncoder};
use crate::error::{Error, Result};
use crate::federation::{budget_histogram, distributed_infer, Query};
use crate::harness::{budget_efficiency_curve, read_transcripts, run_experiment, write_transcripts, Experiment, Report};
use crate::inference::{paraphrase, Backend, BackendConfig, PARAPHRASE_TEMPLATE};
use crate::retrieval::BoundCorpus;

#[derive(Debug, Parser)]
#[command(name = "dicl", version, about = "Budgeted in-context example retrieval across non-IID clients")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StoreFormat {
    Jsonl,
    Binary,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the evaluation pool and partition the client corpus.
    Partition,
    /// Compute embeddings: the configured stage, or a standalone file with --input.
    Encode {
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        hash_seed: u64,
        #[arg(long, value_enum, default_value_t = StoreFormat::Jsonl)]
        format: StoreFormat,
    },
    /// Build the allocator supervision set for every replicate.
    BuildBudgetDataset,
    /// Train the per-client allocators for every replicate.
    TrainAllocator,
    /// Answer the test queries (or one --text query) and write transcripts.
    Infer {
        /// Policies to evaluate instead of the configured ones.
        #[arg(long = "policy")]
        policies: Vec<String>,
        /// Answer a single query text on replicate 0 and print its transcript.
        #[arg(long)]
        text: Option<String>,
    },
    /// Run every stage and write the report.
    Run,
    /// Summarize a report or a transcript file, optionally with a budget-efficiency table.
    Report {
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Comma-separated budget multipliers, e.g. 0.5,1.0,1.25,inf.
        #[arg(long, value_delimiter = ',')]
        curve: Option<Vec<String>>,
        /// Replicate the transcripts came from.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Paraphrase a text (or every text of a dataset) with the configured backend.
    Paraphrase {
        #[arg(long, conflicts_with = "input")]
        text: Option<String>,
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Parse `args` and run the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config <path>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Partition => partition(cli),
        Command::Encode {
            input: Some(input),
            output,
            dim,
            hash_seed,
            format,
        } => encode_file(input, output.as_deref().expect("clap requires output"), *dim, *hash_seed, *format),
        Command::Encode { input: None, .. } => {
            let exp = Experiment::prepare(load_config(cli)?)?;
            let c = &exp.corpora;
            Ok(format!(
                "client corpus: {} vectors, evaluation pool: {} vectors, dim {}\n",
                c.train_store.len(),
                c.eval_store.len(),
                c.train_store.dim()
            ))
        }
        Command::BuildBudgetDataset => build_budget(cli),
        Command::TrainAllocator => train(cli),
        Command::Infer { policies, text } => infer(cli, policies, text.as_deref()),
        Command::Run => {
            let cfg = load_config(cli)?;
            let report = run_experiment(&cfg)?;
            Ok(summarize_report(&report) + &format!("report: {}\n", cfg.output_dir.join("report.json").display()))
        }
        Command::Report {
            transcripts,
            curve,
            replicate,
        } => report(cli, transcripts.as_deref(), curve.as_deref(), *replicate),
        Command::Paraphrase { text, input, output } => paraphrase_cmd(cli, text.as_deref(), input.as_deref(), output.as_deref()),
    }
}

fn partition(cli: &Cli) -> Result<String> {
    let exp = Experiment::prepare(load_config(cli)?)?;
    let mut out = String::new();
    for r in 0..exp.cfg.num_seeds {
        let rep = exp.replicate(r)?;
        let _ = writeln!(
            out,
            "replicate {r}: proxy {} test {}",
            rep.split.proxy.len(),
            rep.split.test.len()
        );
        for (c, shard) in rep.split.shards.iter().enumerate() {
            let labels: Vec<String> = shard.distinct_labels().iter().map(|l| l.to_string()).collect();
            let _ = writeln!(out, "  client {c}: {} examples, labels [{}]", shard.len(), labels.join(", "));
        }
    }
    Ok(out)
}

fn encode_file(input: &Path, output: &Path, dim: usize, seed: u64, format: StoreFormat) -> Result<String> {
    let d = load_dataset(input)?;
    let store = encode_dataset(&d, &HashEncoder::new(dim, seed)?)?;
    match format {
        StoreFormat::Jsonl => store.save_jsonl(output)?,
        StoreFormat::Binary => store.save_binary(output)?,
    }
    Ok(format!("{} vectors of dim {dim} -> {}\n", store.len(), output.display()))
}

fn build_budget(cli: &Cli) -> Result<String> {
    let exp = Experiment::prepare(load_config(cli)?)?;
    let mut out = String::new();
    for r in 0..exp.cfg.num_seeds {
        let mut rep = exp.replicate(r)?;
        let ds = rep.budget_dataset(&exp)?;
        let _ = writeln!(
            out,
            "replicate {r}: {} records, {} clients, {} classes",
            ds.len(),
            ds.num_clients,
            ds.num_classes()
        );
        for c in 0..ds.num_clients {
            let mut counts = vec![0usize; ds.num_classes()];
            for (_, class) in ds.client_view(c) {
                counts[class] += 1;
            }
            let _ = writeln!(out, "  client {c} class counts {counts:?}");
        }
    }
    Ok(out)
}

fn train(cli: &Cli) -> Result<String> {
    let exp = Experiment::prepare(load_config(cli)?)?;
    let mut out = String::new();
    for r in 0..exp.cfg.num_seeds {
        let mut rep = exp.replicate(r)?;
        let ds = rep.budget_dataset(&exp)?.clone();
        let models = rep.allocators(&exp)?;
        for (c, m) in models.iter().enumerate() {
            let acc = crate::allocator::accuracy(m, &ds.client_view(c))?;
            let _ = writeln!(out, "replicate {r} client {c}: accuracy on supervision set {acc:.4}");
        }
    }
    Ok(out)
}

fn infer(cli: &Cli, policies: &[String], text: Option<&str>) -> Result<String> {
    let mut cfg = load_config(cli)?;
    if !policies.is_empty() {
        cfg.policies = policies.iter().map(|p| PolicyName::parse(p)).collect::<Result<_>>()?;
    }
    let exp = Experiment::prepare(cfg)?;
    let mut out = String::new();

    if let Some(text) = text {
        let mut rep = exp.replicate(0)?;
        let name = exp.cfg.policies[0];
        let policy = rep.expand(name)[0];
        let embedding = match exp.cfg.embedding() {
            crate::config::EmbeddingConfig::Hash { dim, seed } => crate::embed::hash_encode(text, dim, seed)?,
            _ => return Err(Error::Config("--text needs hash embeddings".into())),
        };
        let allocators = if name == PolicyName::Learned { Some(rep.allocators(&exp)?.to_vec()) } else { None };
        let clients = rep.clients()?;
        let server = crate::federation::ServerNode {
            k: exp.cfg.k,
            alpha: exp.cfg.alpha,
            delta: exp.cfg.delta,
            policy,
            allocators: allocators.as_deref(),
            proxy: Some(rep.proxy()?),
            backend: &exp.backend,
            template: &exp.template,
            labels: rep.split.test.labels(),
            prompt_char_cap: exp.cfg.prompt_char_cap,
        };
        let q = Query {
            id: u64::MAX,
            text,
            embedding: embedding.as_slice(),
            gold: None,
        };
        let t = distributed_infer(&server, &clients, &q)?;
        return Ok(serde_json::to_string_pretty(&t)? + "\n");
    }

    for r in 0..exp.cfg.num_seeds {
        let mut rep = exp.replicate(r)?;
        for &name in &exp.cfg.policies.clone() {
            let run = rep.evaluate(&exp, name)?;
            for (policy, ts) in &run.runs {
                let path = rep.transcript_dir(&exp).join(format!("{}.jsonl", policy.name().replace(':', "-")));
                write_transcripts(&path, ts)?;
            }
            let _ = writeln!(
                out,
                "replicate {r} {:<16} accuracy {:.4}  samples {}",
                name.as_str(),
                run.accuracy()?,
                run.samples_communicated()
            );
        }
    }
    Ok(out)
}

fn summarize_report(report: &Report) -> String {
    let mut s = String::from("policy            accuracy (mean ± std)   samples/seed\n");
    for p in &report.policies {
        let samples = p.samples_communicated_per_seed.iter().sum::<usize>() as f64
            / p.samples_communicated_per_seed.len().max(1) as f64;
        let _ = writeln!(
            s,
            "{:<17} {:.4} ± {:.4}         {samples:.0}",
            p.policy.as_str(),
            p.accuracy_mean,
            p.accuracy_std
        );
    }
    s
}

fn parse_multiplier(s: &str) -> Result<f64> {
    let t = s.trim();
    if matches!(t, "inf" | "infinity" | "∞") {
        return Ok(f64::INFINITY);
    }
    t.parse::<f64>()
        .ok()
        .filter(|m| *m >= 0.0)
        .ok_or_else(|| Error::Validation(format!("bad multiplier {s:?}")))
}

fn report(cli: &Cli, transcripts: Option<&Path>, curve: Option<&[String]>, replicate: usize) -> Result<String> {
    let Some(path) = transcripts else {
        if curve.is_some() {
            return Err(Error::Validation("--curve needs --transcripts".into()));
        }
        let cfg = load_config(cli)?;
        let p = cfg.output_dir.join("report.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let report: Report = serde_json::from_str(&text)?;
        return Ok(summarize_report(&report));
    };

    let ts = read_transcripts(path)?;
    if ts.is_empty() {
        return Err(Error::Validation(format!("{}: no transcripts", path.display())));
    }
    let mut out = String::new();
    let answered: Vec<(Option<usize>, usize)> = ts
        .iter()
        .filter_map(|t| t.gold_label.map(|g| (t.answer_label, g)))
        .collect();
    let _ = writeln!(out, "transcripts: {}", ts.len());
    if !answered.is_empty() {
        let _ = writeln!(out, "accuracy: {:.4}", crate::harness::evaluate_accuracy(&answered)?);
    }
    let _ = writeln!(
        out,
        "samples communicated: {}",
        crate::federation::total_communicated(&ts)
    );
    let clients = ts[0].budgets_sent.len();
    for (c, h) in budget_histogram(&ts, clients).iter().enumerate() {
        let cells: Vec<String> = h.iter().map(|(b, n)| format!("{b}:{n}")).collect();
        let _ = writeln!(out, "client {c} budgets {}", cells.join(" "));
    }

    if let Some(curve) = curve {
        let multipliers = curve.iter().map(|s| parse_multiplier(s)).collect::<Result<Vec<_>>>()?;
        let exp = Experiment::prepare(load_config(cli)?)?;
        let rep = exp.replicate(replicate)?;
        let clients = rep.clients()?;
        let global = BoundCorpus::bind(&exp.corpora.train, &exp.corpora.train_store)?;
        let table = budget_efficiency_curve(&ts, &clients, &global, &exp.corpora.eval_store, exp.cfg.k, &multipliers)?;
        out.push_str(&table.to_text());
    }
    Ok(out)
}

fn paraphrase_cmd(cli: &Cli, text: Option<&str>, input: Option<&Path>, output: Option<&Path>) -> Result<String> {
    let backend_cfg = match &cli.config {
        Some(_) => load_config(cli)?.backend,
        None => BackendConfig::Mock,
    };
    let backend = Backend::from_config(&backend_cfg)?;
    match (text, input) {
        (Some(t), _) => Ok(paraphrase(t, &backend, PARAPHRASE_TEMPLATE)? + "\n"),
        (None, Some(input)) => {
            let d = load_dataset(input)?;
            let mut examples = d.examples().to_vec();
            for ex in &mut examples {
                ex.text = paraphrase(&ex.text, &backend, PARAPHRASE_TEMPLATE)?;
            }
            let out = crate::corpus::Dataset::new(examples, d.labels().clone())?;
            let path = output.expect("clap requires output");
            out.save_jsonl(path)?;
            Ok(format!("{} texts paraphrased -> {}\n", out.len(), path.display()))
        }
        (None, None) => Err(Error::Validation("paraphrase needs --text or --input".into())),
    }
}
