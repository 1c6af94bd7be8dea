//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Run with `cargo test -p dicl --test acceptance`. The HTTP smoke test runs
//! only when `DICL_HTTP_ENDPOINT` is set (see `criterion_10`).

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{brute_top_k, max_relative_error, numeric_gradient, random_corpus, random_partition, random_query, rng, stores_for};
use dicl::allocator::init_model;
use dicl::config::{ExperimentConfig, PartitionScheme, PolicyName};
use dicl::corpus::{Dataset, Example, LabelSpace};
use dicl::embed::{encode_dataset, hash_encode, EmbeddingStore, HashEncoder};
use dicl::federation::{distributed_infer, gather, BudgetPolicy, ClientNode, Query, ServerNode};
use dicl::harness::{budget_efficiency_curve, read_transcripts, run_experiment, Experiment, Report};
use dicl::inference::{Backend, BackendConfig, HttpConfig, PromptTemplate};
use dicl::oracle::oracle_budget;
use dicl::retrieval::{top_k, BoundCorpus};
use rand::Rng;

// Pinned tolerances.
const RETRIEVAL_TIME_LIMIT_S: f64 = 5.0;
const BUDGET_TIME_LIMIT_S: f64 = 5.0;
const GRADIENT_TIME_LIMIT_S: f64 = 10.0;
const GRADIENT_MAX_REL_ERR: f64 = 1e-4;
const CENTRALIZED_MIN_ACC: f64 = 0.95;
const IID_GAP_MAX: f64 = 0.02;
const NONIID_GAP_MIN: f64 = 0.10;
const LEARNED_OVER_UNIFORM_MIN: f64 = 0.05;
const LEARNED_TO_INFINITE_MAX: f64 = 0.03;
const RECALL_AT_125_MIN: f64 = 0.90;
const HTTP_MIN_DECODED: usize = 8;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    for i in 0..1000u64 {
        let mut r = rng(i);
        let n = r.random_range(1..=500);
        let dim = r.random_range(1..=32);
        let k = r.random_range(0..=50);
        let discrete = i % 2 == 0;
        let (d, store) = random_corpus(n, dim, 4, i, discrete);
        let q = random_query(dim, &mut r, discrete);
        let got: Vec<(u64, f64)> = top_k(&q, k, &d, &store)
            .map_err(|e| e.to_string())?
            .entries()
            .iter()
            .map(|n| (n.id, n.distance))
            .collect();
        if got != brute_top_k(&q, k, &store) {
            return Err(format!("instance {i} (n={n}, dim={dim}, k={k}) differs from full sort"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < RETRIEVAL_TIME_LIMIT_S,
        format!("1000/1000 instances exact in {secs:.2}s (limit {RETRIEVAL_TIME_LIMIT_S}s)"),
    )
}

struct Instance {
    global: Dataset,
    store: EmbeddingStore,
    shards: Vec<Dataset>,
    stores: Vec<EmbeddingStore>,
    k: usize,
    dim: usize,
}

fn full_partition(i: u64) -> Instance {
    let mut r = rng(10_000 + i);
    let clients = 2 + (i % 5) as usize;
    let n = r.random_range(60..=300);
    let dim = r.random_range(2..=16);
    let k = r.random_range(1..=50);
    let (global, store) = random_corpus(n, dim, 4, 10_000 + i, i % 3 == 0);
    let shards = random_partition(&global, clients, i);
    let stores = stores_for(&shards, &store);
    Instance {
        global,
        store,
        shards,
        stores,
        k,
        dim,
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut queries = 0;
    for i in 0..200u64 {
        let inst = full_partition(i);
        let global = BoundCorpus::bind(&inst.global, &inst.store).map_err(|e| e.to_string())?;
        let shards: Vec<BoundCorpus> = inst
            .shards
            .iter()
            .zip(&inst.stores)
            .map(|(d, s)| BoundCorpus::bind(d, s))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mut r = rng(20_000 + i);
        for _ in 0..5 {
            let q = random_query(inst.dim, &mut r, i % 3 == 0);
            let b = oracle_budget(&q, inst.k, &shards, &global).map_err(|e| e.to_string())?;
            if b.iter().sum::<usize>() != inst.k {
                return Err(format!("instance {i}: budgets {b:?} do not sum to k={}", inst.k));
            }
            queries += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < BUDGET_TIME_LIMIT_S,
        format!("200 partitions, {queries} queries, all sums exact in {secs:.2}s (limit {BUDGET_TIME_LIMIT_S}s)"),
    )
}

fn criterion_3() -> Outcome {
    let backend = Backend::Mock;
    let template = PromptTemplate::default();
    for i in 0..200u64 {
        let inst = full_partition(i);
        let clients: Vec<ClientNode> = inst
            .shards
            .iter()
            .zip(&inst.stores)
            .enumerate()
            .map(|(c, (d, s))| ClientNode::new(c, d, s))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let labels = inst.global.labels().clone();
        let server = ServerNode::new(inst.k, BudgetPolicy::Uniform, &backend, &template, &labels);
        let q = random_query(inst.dim, &mut rng(30_000 + i), i % 3 == 0);
        let query = Query {
            id: i,
            text: "q",
            embedding: &q,
            gold: None,
        };
        let g = gather(&server, &clients, &query, &vec![inst.k; clients.len()]).map_err(|e| e.to_string())?;
        let want: Vec<u64> = brute_top_k(&q, inst.k, &inst.store).into_iter().map(|p| p.0).collect();
        if g.selected.ids() != want {
            return Err(format!("instance {i}: distributed selection differs from centralized top-k"));
        }
    }
    Ok("200/200 instances recover the centralized top-k exactly".into())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for point in 0..20u64 {
        let mut m = init_model(8, 6, 3, 100 + point).map_err(|e| e.to_string())?;
        let mut r = rng(point);
        for p in m.params_mut() {
            *p += r.random_range(-0.5..0.5);
        }
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
        let (_, analytic) = m.loss_and_gradient(&batch).map_err(|e| e.to_string())?;
        worst = worst.max(max_relative_error(&analytic, &numeric_gradient(&m, &batch, 1e-4)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < GRADIENT_MAX_REL_ERR && secs < GRADIENT_TIME_LIMIT_S,
        format!("max relative error {worst:.2e} (limit {GRADIENT_MAX_REL_ERR:.0e}) in {secs:.2}s"),
    )
}

fn synthetic_config(out: &Path) -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

/// Two `dicl run` invocations of the synthetic config into separate directories.
struct Runs {
    _tmp: tempfile::TempDir,
    first: PathBuf,
    second: PathBuf,
    report: Report,
    run_secs: f64,
}

fn cli_runs() -> Result<Runs, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let mut run_secs = 0.0;
    let mut dirs = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let start = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_dicl"))
            .arg("run")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        run_secs = start.elapsed().as_secs_f64();
        if !o.status.success() {
            return Err(format!("dicl run failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        dirs.push(out);
    }
    let text = fs::read_to_string(dirs[0].join("report.json")).map_err(|e| e.to_string())?;
    let report: Report = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let second = dirs.pop().unwrap();
    let first = dirs.pop().unwrap();
    Ok(Runs {
        _tmp: tmp,
        first,
        second,
        report,
        run_secs,
    })
}

fn acc(report: &Report, p: PolicyName) -> Result<f64, String> {
    report
        .policy(p)
        .map(|r| r.accuracy_mean)
        .ok_or_else(|| format!("report has no {} entry", p.as_str()))
}

fn criterion_5(runs: &Runs) -> Outcome {
    let central = acc(&runs.report, PolicyName::Infinite)?;
    let noniid_uniform = acc(&runs.report, PolicyName::Uniform)?;
    if central < CENTRALIZED_MIN_ACC {
        return Err(format!(
            "centralized accuracy {central:.4} below the {CENTRALIZED_MIN_ACC} precondition"
        ));
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = synthetic_config(tmp.path())?;
    cfg.partition.scheme = PartitionScheme::Iid;
    cfg.partition.labels_per_client = None;
    cfg.policies = vec![PolicyName::Uniform];
    let iid = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let iid_uniform = acc(&iid, PolicyName::Uniform)?;
    let queries = runs.report.test_queries_per_seed.clone();
    check(
        (central - iid_uniform).abs() <= IID_GAP_MAX && central - noniid_uniform >= NONIID_GAP_MIN,
        format!(
            "centralized {central:.4}, iid uniform {iid_uniform:.4} (gap limit {IID_GAP_MAX}), \
             non-iid uniform {noniid_uniform:.4} (needs >= {NONIID_GAP_MIN} below); test queries {queries:?}"
        ),
    )
}

fn criterion_6(runs: &Runs) -> Outcome {
    let learned = acc(&runs.report, PolicyName::Learned)?;
    let uniform = acc(&runs.report, PolicyName::Uniform)?;
    let infinite = acc(&runs.report, PolicyName::Infinite)?;
    check(
        learned >= uniform + LEARNED_OVER_UNIFORM_MIN && (learned - infinite).abs() <= LEARNED_TO_INFINITE_MAX,
        format!(
            "learned {learned:.4}, uniform {uniform:.4} (needs +{LEARNED_OVER_UNIFORM_MIN}), \
             infinite {infinite:.4} (within {LEARNED_TO_INFINITE_MAX})"
        ),
    )
}

fn criterion_7(runs: &Runs) -> Outcome {
    let multipliers = [0.5, 1.0, 1.25, 2.0];
    let cfg = synthetic_config(&runs.first)?;
    let seeds = cfg.num_seeds;
    let k = cfg.k;
    let exp = Experiment::prepare(cfg).map_err(|e| e.to_string())?;
    let global = BoundCorpus::bind(&exp.corpora.train, &exp.corpora.train_store).map_err(|e| e.to_string())?;
    let mut mean = vec![0.0; multipliers.len()];
    for r in 0..seeds {
        let rep = exp.replicate(r).map_err(|e| e.to_string())?;
        let clients = rep.clients().map_err(|e| e.to_string())?;
        let path = runs.first.join(format!("replicate-{r}/transcripts/learned.jsonl"));
        let ts = read_transcripts(&path).map_err(|e| e.to_string())?;
        let table = budget_efficiency_curve(&ts, &clients, &global, &exp.corpora.eval_store, k, &multipliers)
            .map_err(|e| e.to_string())?;
        if let Some(row) = table.recall.iter().find(|row| row.windows(2).any(|w| w[1] < w[0])) {
            return Err(format!("replicate {r}: per-query recall not monotone: {row:?}"));
        }
        for (m, v) in mean.iter_mut().zip(&table.mean_recall) {
            *m += v / seeds as f64;
        }
    }
    let monotone = mean.windows(2).all(|w| w[0] <= w[1]);
    let cells: Vec<String> = multipliers.iter().zip(&mean).map(|(m, r)| format!("{m}x:{r:.4}")).collect();
    check(
        monotone && mean[2] >= RECALL_AT_125_MIN,
        format!("mean recall {} (1.25x needs >= {RECALL_AT_125_MIN}, monotone {monotone})", cells.join(" ")),
    )
}

fn output_files(root: &Path) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from("report.json"), PathBuf::from("budget_histogram.csv")];
    let mut r = 0;
    while let Ok(entries) = fs::read_dir(root.join(format!("replicate-{r}/transcripts"))) {
        let mut names: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| PathBuf::from(format!("replicate-{r}/transcripts")).join(e.file_name()))
            .collect();
        names.sort();
        files.extend(names);
        r += 1;
    }
    files
}

fn criterion_8(runs: &Runs) -> Outcome {
    let a = output_files(&runs.first);
    let b = output_files(&runs.second);
    if a != b {
        return Err(format!("different file sets: {} vs {}", a.len(), b.len()));
    }
    for rel in &a {
        let x = fs::read(runs.first.join(rel)).map_err(|e| e.to_string())?;
        let y = fs::read(runs.second.join(rel)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} differs between runs", rel.display()));
        }
    }
    Ok(format!("{} files byte-identical across two runs ({:.1}s per run)", a.len(), runs.run_secs))
}

fn criterion_9() -> Outcome {
    let backend = Backend::Mock;
    let template = PromptTemplate::default();
    let (global, store) = random_corpus(240, 4, 3, 77, false);
    let labels = global.labels().clone();
    let q = random_query(4, &mut rng(5), false);

    for c in 1..=8 {
        let shards = random_partition(&global, c, c as u64);
        let stores = stores_for(&shards, &store);
        let clients: Vec<ClientNode> = shards
            .iter()
            .zip(&stores)
            .enumerate()
            .map(|(i, (d, s))| ClientNode::new(i, d, s).unwrap())
            .collect();
        for k in 1..=40 {
            for (id, policy) in [BudgetPolicy::Uniform, BudgetPolicy::SocialLearning { seed: k as u64 }]
                .into_iter()
                .enumerate()
            {
                let server = ServerNode::new(k, policy, &backend, &template, &labels);
                let query = Query {
                    id: id as u64,
                    text: "q",
                    embedding: &q,
                    gold: None,
                };
                let t = distributed_infer(&server, &clients, &query).map_err(|e| e.to_string())?;
                if t.budgets_sent != vec![k.div_ceil(c); c] {
                    return Err(format!("{} C={c} k={k}: budgets {:?}", policy.name(), t.budgets_sent));
                }
                let want = k.min(t.aggregated_ids.len());
                if t.final_ice_ids.len() != want {
                    return Err(format!("{} C={c} k={k}: selected {} of {want}", policy.name(), t.final_ice_ids.len()));
                }
            }
        }
    }

    // Tiny shards: the union is smaller than k and is used whole.
    let (small, small_store) = random_corpus(9, 4, 3, 8, false);
    let shards = random_partition(&small, 4, 1);
    let stores = stores_for(&shards, &small_store);
    let clients: Vec<ClientNode> = shards
        .iter()
        .zip(&stores)
        .enumerate()
        .map(|(i, (d, s))| ClientNode::new(i, d, s).unwrap())
        .collect();
    let server = ServerNode::new(20, BudgetPolicy::SocialLearning { seed: 1 }, &backend, &template, &labels);
    let query = Query {
        id: 0,
        text: "q",
        embedding: &q,
        gold: None,
    };
    let t = distributed_infer(&server, &clients, &query).map_err(|e| e.to_string())?;
    if t.final_ice_ids.len() != 9 {
        return Err(format!("union of 9 gave {} examples", t.final_ice_ids.len()));
    }

    let shards = random_partition(&global, 5, 3);
    let stores = stores_for(&shards, &store);
    let clients: Vec<ClientNode> = shards
        .iter()
        .zip(&stores)
        .enumerate()
        .map(|(i, (d, s))| ClientNode::new(i, d, s).unwrap())
        .collect();
    for draw in 0..10_000u64 {
        let k = (draw % 41) as usize;
        let server = ServerNode::new(k, BudgetPolicy::Random { seed: 9 }, &backend, &template, &labels);
        let query = Query {
            id: draw,
            text: "q",
            embedding: &q,
            gold: None,
        };
        let b = server.allocate(&query, &clients).map_err(|e| e.to_string())?;
        if b.iter().sum::<usize>() != k {
            return Err(format!("random draw {draw}: {b:?} does not sum to {k}"));
        }
    }
    Ok("uniform and social budgets ceil(k/C) for C 1..8, k 1..40; social selects min(k, union); 10000 random draws sum to k".into())
}

const TOY_POSITIVE: [&str; 10] = [
    "a wonderful, heartfelt film",
    "I loved every minute of it",
    "brilliant acting and a great story",
    "delightful and funny from start to finish",
    "an excellent, moving experience",
    "the best meal I have had in years",
    "friendly staff and fantastic service",
    "beautifully shot and deeply touching",
    "great value, would happily return",
    "a joyful, charming little movie",
];
const TOY_NEGATIVE: [&str; 10] = [
    "a dull, lifeless film",
    "I hated every minute of it",
    "terrible acting and a boring story",
    "tedious and unfunny from start to finish",
    "an awful, painful experience",
    "the worst meal I have had in years",
    "rude staff and slow service",
    "ugly to look at and emotionally empty",
    "overpriced, never going back",
    "a grim, irritating little movie",
];

/// Runs only when `DICL_HTTP_ENDPOINT` names an OpenAI-compatible base URL.
/// `DICL_HTTP_MODEL` picks the model; `DICL_HTTP_API_KEY_ENV` names the
/// variable holding the bearer token.
fn criterion_10() -> Option<Outcome> {
    let endpoint = std::env::var("DICL_HTTP_ENDPOINT").ok()?;
    Some((|| {
        let mut http = HttpConfig::new(endpoint, std::env::var("DICL_HTTP_MODEL").unwrap_or_else(|_| "default".into()));
        http.api_key_env = std::env::var("DICL_HTTP_API_KEY_ENV").ok();
        let backend = Backend::from_config(&BackendConfig::Http(http)).map_err(|e| e.to_string())?;
        let labels = LabelSpace::new(vec!["negative".into(), "positive".into()]).map_err(|e| e.to_string())?;
        let mut examples = Vec::new();
        for i in 0..5 {
            examples.push(Example { id: examples.len() as u64, text: TOY_POSITIVE[i].into(), label: 1 });
            examples.push(Example { id: examples.len() as u64, text: TOY_NEGATIVE[i].into(), label: 0 });
        }
        let pool = Dataset::new(examples, labels.clone()).map_err(|e| e.to_string())?;
        let encoder = HashEncoder::new(256, 0).map_err(|e| e.to_string())?;
        let store = encode_dataset(&pool, &encoder).map_err(|e| e.to_string())?;
        let halves = [pool.subset(&[0, 2, 4, 6, 8]), pool.subset(&[1, 3, 5, 7, 9])];
        let shards: Vec<Dataset> = halves.into_iter().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let stores = stores_for(&shards, &store);
        let clients: Vec<ClientNode> = shards
            .iter()
            .zip(&stores)
            .enumerate()
            .map(|(i, (d, s))| ClientNode::new(i, d, s))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let template = PromptTemplate {
            instruction: "Classify the sentiment of each review as {labels}.".into(),
            ..PromptTemplate::default()
        };
        let server = ServerNode::new(4, BudgetPolicy::Uniform, &backend, &template, &labels);
        let mut decoded = 0;
        let mut correct = 0;
        for i in 5..10 {
            for (text, gold) in [(TOY_POSITIVE[i], 1), (TOY_NEGATIVE[i], 0)] {
                let v = hash_encode(text, 256, 0).map_err(|e| e.to_string())?;
                let q = Query { id: 100 + i as u64 * 2 + gold as u64, text, embedding: v.as_slice(), gold: Some(gold) };
                let t = distributed_infer(&server, &clients, &q).map_err(|e| e.to_string())?;
                decoded += usize::from(t.answer_label.is_some());
                correct += usize::from(t.is_correct());
            }
        }
        check(
            decoded >= HTTP_MIN_DECODED,
            format!("10 queries completed, {decoded} decoded (needs >= {HTTP_MIN_DECODED}), {correct} correct"),
        )
    })())
}

fn print_line(n: usize, name: &str, secs: f64, outcome: Option<&Outcome>) -> bool {
    let (status, detail, ok) = match outcome {
        Some(Ok(d)) => ("PASS", d.as_str(), true),
        Some(Err(d)) => ("FAIL", d.as_str(), false),
        None => ("SKIP", "set DICL_HTTP_ENDPOINT to run", true),
    };
    println!("criterion {n:>2} {status} [{name}] {detail} ({secs:.1}s)");
    ok
}

fn main() {
    let mut ok = true;
    let timed = |f: &dyn Fn() -> Outcome| {
        let s = Instant::now();
        let o = f();
        (o, s.elapsed().as_secs_f64())
    };

    let (o, t) = timed(&criterion_1);
    ok &= print_line(1, "retrieval oracle equivalence", t, Some(&o));
    let (o, t) = timed(&criterion_2);
    ok &= print_line(2, "oracle budget conservation", t, Some(&o));
    let (o, t) = timed(&criterion_3);
    ok &= print_line(3, "reorder recovery", t, Some(&o));
    let (o, t) = timed(&criterion_4);
    ok &= print_line(4, "allocator gradient check", t, Some(&o));

    let start = Instant::now();
    let runs = cli_runs();
    let setup = start.elapsed().as_secs_f64();
    match &runs {
        Ok(runs) => {
            let (o, t) = timed(&|| criterion_5(runs));
            ok &= print_line(5, "non-iid gap", t + setup, Some(&o));
            let (o, t) = timed(&|| criterion_6(runs));
            ok &= print_line(6, "learned allocator benefit", t, Some(&o));
            let (o, t) = timed(&|| criterion_7(runs));
            ok &= print_line(7, "budget efficiency", t, Some(&o));
            let (o, t) = timed(&|| criterion_8(runs));
            ok &= print_line(8, "determinism", t, Some(&o));
        }
        Err(e) => {
            for (n, name) in [(5, "non-iid gap"), (6, "learned allocator benefit"), (7, "budget efficiency"), (8, "determinism")] {
                ok &= print_line(n, name, setup, Some(&Err(e.clone())));
            }
        }
    }

    let (o, t) = timed(&criterion_9);
    ok &= print_line(9, "baseline arithmetic", t, Some(&o));
    let s = Instant::now();
    let o = criterion_10();
    ok &= print_line(10, "http smoke", s.elapsed().as_secs_f64(), o.as_ref());

    if !ok {
        std::process::exit(1);
    }
}
