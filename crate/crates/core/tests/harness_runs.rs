use std::path::Path;

use idmlab::harness::{
    aggregate, read_csv, run_experiment, write_outputs, ExperimentConfig, ExperimentKind, Method, MethodSpec, RunOptions,
};
use idmlab::models::ArchKind;

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/")).unwrap();
            assert_eq!(again.methods, cfg.methods);
            n += 1;
        }
    }
    assert!(n >= 8);
}

#[test]
fn smoke_run_writes_readable_outputs() {
    let mut cfg = ExperimentConfig::load(&configs_dir().join("smoke.toml")).unwrap();
    cfg.training.max_epochs = Some(50);
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    // per cell: accuracy, nll, entropy and best-epoch accuracy, held-out accuracy below
    // split 1.0, idm_accuracy for VM-IDM; 2 methods x 2 splits x 2 seeds
    assert_eq!(out.rows.len(), 2 * (5 + 4) + 2 * (6 + 5));
    assert!(out.rows.iter().all(|r| r.metric != "heldout_accuracy" || r.split_fraction < 1.0));
    let dir = tempfile::tempdir().unwrap();
    let csv = write_outputs(&out, dir.path()).unwrap();
    let back = read_csv(std::fs::File::open(csv).unwrap()).unwrap();
    assert_eq!(back, out.rows);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), aggregate(&out.rows).len() + 1);
}

#[test]
fn seed_offset_shifts_every_seed() {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::ComplexityPos,
        vec![MethodSpec::new(Method::Bc, ArchKind::Lc)],
        vec![0, 1],
    );
    cfg.splits = vec![1.0];
    cfg.training.max_epochs = Some(5);
    let out = run_experiment(&cfg, &RunOptions { jobs: 1, seed_offset: 100 }).unwrap();
    let mut seeds: Vec<u64> = out.rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(seeds, vec![100, 101]);
}

#[test]
fn entropy_gap_emits_exact_rows() {
    let mut cfg = ExperimentConfig::new(
        ExperimentKind::EntropyGap,
        vec![MethodSpec::new(Method::Idm, ArchKind::Mlp5)],
        vec![0],
    );
    cfg.splits = vec![1.0];
    cfg.env.p_right = vec![0.5];
    cfg.training.max_epochs = Some(5);
    let rows = run_experiment(&cfg, &RunOptions::default()).unwrap().rows;
    let exact = |m: &str| rows.iter().find(|r| r.method == m && r.arch == "table").unwrap().value;
    assert!(exact("expert_idm").abs() < 1e-12);
    assert!(exact("expert") > 0.5);
}

#[test]
fn verify_rows_carry_a_report() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::VerifyTabular, Vec::new(), vec![0]);
    cfg.verify.trials = 7;
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(out.rows.iter().filter(|r| r.metric == "passed").count(), 7);
    assert!(out.rows.iter().filter(|r| r.metric == "passed").all(|r| r.value == 1.0));
    assert_eq!(out.artifacts[0].0, "verify_report.txt");
}

#[test]
fn invalid_configs_are_rejected() {
    let base = Path::new("/tmp");
    let cases = [
        "schema = 2\nexperiment = \"goal\"\nseeds = [0]\n[[methods]]\nmethod = \"bc\"\narch = \"mlp5\"\n",
        "schema = 1\nexperiment = \"goal\"\nseeds = []\n[[methods]]\nmethod = \"bc\"\narch = \"mlp5\"\n",
        "schema = 1\nexperiment = \"goal\"\nseeds = [0]\n[[methods]]\nmethod = \"lapo\"\n",
        "schema = 1\nexperiment = \"complexity_pos\"\nseeds = [0]\n[[methods]]\nmethod = \"bc\"\narch = \"cnn5\"\n",
        "schema = 1\nexperiment = \"complexity_pos\"\nseeds = [0]\nsplits = [0.0]\n[[methods]]\nmethod = \"bc\"\narch = \"lc\"\n",
        "schema = 1\nexperiment = \"complexity_pos\"\nseeds = [0]\ncolour = 3\n",
        "schema = 1\nexperiment = \"stochasticity\"\nseeds = [0]\n[env]\np_right = [1.5]\n[[methods]]\nmethod = \"bc\"\narch = \"mlp5\"\n",
    ];
    for text in cases {
        assert!(ExperimentConfig::from_toml(text, base).is_err(), "accepted:\n{text}");
    }
}
