use std::fs;
use std::path::Path;

use dicl::config::{ExperimentConfig, PolicyName};
use dicl::federation::total_communicated;
use dicl::harness::{budget_efficiency_curve, read_transcripts, run_experiment, run_experiment_full, Experiment};
use dicl::retrieval::BoundCorpus;

const SMALL: &str = r#"
name = "small"
seed = 3
num_seeds = 2
k = 4
delta = 1
alpha = 1
proxy_size = 40
policies = ["uniform", "learned", "infinite", "random", "singleton", "social_learning", "proxy_only", "zero_shot"]

[data]
kind = "synthetic"
num_classes = 3
train_per_class = 60
eval_per_class = 40
dim = 8
spread = 0.3
label_noise = 0.1

[partition]
scheme = "noniid"
clients = 3
labels_per_client = 1

[allocator]
width = 16
epochs = 20
"#;

fn small(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(SMALL, Path::new(".")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn report_accounts_for_every_query() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = run_experiment_full(&cfg).unwrap();
    let report = &out.report;
    assert_eq!(report.test_queries_per_seed, vec![80, 80]);
    assert_eq!(report.policies.len(), 8);
    assert!(report.config.get("output_dir").is_none());

    let zs = report.policy(PolicyName::ZeroShot).unwrap();
    assert_eq!(zs.samples_communicated_per_seed, vec![0, 0]);
    let uniform = report.policy(PolicyName::Uniform).unwrap();
    assert_eq!(uniform.samples_communicated_per_seed, vec![80 * 3 * 2, 80 * 3 * 2]);
    let infinite = report.policy(PolicyName::Infinite).unwrap();
    assert_eq!(infinite.samples_communicated_per_seed, vec![80 * 180, 80 * 180]);

    // Singleton is averaged over each client choice.
    let singleton = &out.policy_runs[0][4];
    assert_eq!(singleton.runs.len(), 3);
    let per_client: Vec<f64> = singleton
        .runs
        .iter()
        .map(|(_, ts)| ts.iter().filter(|t| t.is_correct()).count() as f64 / ts.len() as f64)
        .collect();
    let mean = per_client.iter().sum::<f64>() / 3.0;
    assert!((report.policy(PolicyName::Singleton).unwrap().accuracy_per_seed[0] - mean).abs() < 1e-12);

    // One histogram per replicate, one map per client, one count per query.
    assert_eq!(report.budget_histograms.len(), 2);
    for h in &report.budget_histograms {
        assert_eq!(h.clients.len(), 3);
        for c in &h.clients {
            assert_eq!(c.values().sum::<usize>(), 80);
        }
    }
    let csv = fs::read_to_string(dir.path().join("budget_histogram.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    // Transcripts on disk match what was evaluated.
    let learned = read_transcripts(&dir.path().join("replicate-1/transcripts/learned.jsonl")).unwrap();
    let in_memory: Vec<_> = out.policy_runs[1][1].transcripts().cloned().collect();
    assert_eq!(learned, in_memory);
    assert_eq!(
        total_communicated(&learned),
        report.policy(PolicyName::Learned).unwrap().samples_communicated_per_seed[1]
    );
    for t in &learned {
        assert!(t.budgets_sent.iter().all(|&b| b >= 1));
    }
    assert!(dir.path().join("replicate-0/transcripts/singleton-2.jsonl").exists());
}

#[test]
fn reruns_are_byte_identical_and_cache_is_reused() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&small(a.path())).unwrap();
    run_experiment(&small(b.path())).unwrap();
    assert_eq!(read(a.path().join("report.json")), read(b.path().join("report.json")));
    for policy in ["learned", "random", "social_learning", "singleton-0"] {
        let rel = format!("replicate-0/transcripts/{policy}.jsonl");
        assert_eq!(read(a.path().join(&rel)), read(b.path().join(&rel)), "{rel}");
    }

    // A warm cache gives the same bytes.
    run_experiment(&small(a.path())).unwrap();
    assert_eq!(read(a.path().join("report.json")), read(b.path().join("report.json")));

    // A different seed changes the outcome.
    let c = tempfile::tempdir().unwrap();
    let mut cfg = small(c.path());
    cfg.seed = 4;
    run_experiment(&cfg).unwrap();
    assert_ne!(read(a.path().join("report.json")), read(c.path().join("report.json")));
}

#[test]
fn efficiency_curve_brackets_and_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = run_experiment_full(&cfg).unwrap();
    let exp = Experiment::prepare(cfg).unwrap();
    let rep = exp.replicate(0).unwrap();
    let clients = rep.clients().unwrap();
    let global = BoundCorpus::bind(&exp.corpora.train, &exp.corpora.train_store).unwrap();
    let ts: Vec<_> = out.policy_runs[0][1].transcripts().cloned().collect();
    let m = [0.0, 0.5, 1.0, 1.25, 2.0, f64::INFINITY];
    let table = budget_efficiency_curve(&ts, &clients, &global, &exp.corpora.eval_store, 4, &m).unwrap();
    assert_eq!(table.mean_recall[0], 0.0);
    assert_eq!(table.mean_recall[5], 1.0);
    assert_eq!(table.mean_samples[5], 180.0);
    for row in &table.recall {
        assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
    }
    assert!(budget_efficiency_curve(&ts, &clients, &global, &exp.corpora.eval_store, 4, &[-1.0]).is_err());
}
