use std::path::Path;
use std::process::{Command, Output};

const QUICK: &[&str] = &[
    "--set",
    "train.epochs_source=3",
    "--set",
    "train.epochs_instance=2",
    "--set",
    "train.epochs_adapt=3",
    "--set",
    "train.epochs_finetune=2",
];

fn wran(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wran"))
        .env("WRAN_OUT_DIR", out_dir)
        .env_remove("WRAN_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out_dir: &Path, args: &[&str]) {
    let o = wran(out_dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(out_dir: &Path, mode: &str, adapt_flags: &[&str]) {
    let with = |cmd: &str, extra: &[&str]| {
        let mut a = vec!["--seed", "3", "--mode", mode, cmd];
        a.extend_from_slice(QUICK);
        a.extend_from_slice(extra);
        ok(out_dir, &a);
    };
    with("gen", &[]);
    with("pretrain", &[]);
    with("weights", &[]);
    with("adapt", adapt_flags);
    with("eval", &[]);
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn relation_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "re", &["--no-gate", "--fixed-alpha", "0.5"]);
    pipeline(b.path(), "re", &["--no-gate", "--fixed-alpha", "0.5"]);
    let ma = std::fs::read(a.path().join("eval/metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("eval/metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    let text = String::from_utf8(ma).unwrap();
    assert!(text.starts_with("metric,name,value\n"));
    assert!(text.contains("f1,micro,"));
    assert!(a.path().join("eval/pr_curve.csv").exists());
    for stage in ["data", "pretrain", "weights", "adapt", "eval"] {
        assert!(a.path().join(stage).join("manifest.kv").exists(), "{stage}");
    }
    let adapt = read(&a.path().join("adapt/manifest.kv"));
    assert!(adapt.contains("train.weight_mode=fixed:0.5"), "{adapt}");
    assert!(adapt.contains("train.epochs_adapt=3"));
}

#[test]
fn ablation_flags_reach_the_stored_config() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path(), "re", &["--no-relation-weights", "--no-instance-weights"]);
    assert!(read(&d.path().join("adapt/train.kv")).contains("weight_mode=uniform"));
    ok(d.path(), &["--seed", "3", "adapt", "--no-relation-weights", "--sm-coeff", "0.1"]);
    let kv = read(&d.path().join("adapt/train.kv"));
    assert!(kv.contains("weight_mode=no_relation") && kv.contains("sm_coeff=0.1"), "{kv}");
}

#[test]
fn knowledge_graph_pipeline_reports_rankings() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path(), "kgc", &[]);
    let m = read(&d.path().join("eval/metrics.csv"));
    for key in ["triple_accuracy,test,", "mrr,filtered,", "hits@10,raw,", "mr,raw,"] {
        assert!(m.contains(key), "{key} missing from {m}");
    }
    let adapt = read(&d.path().join("adapt/manifest.kv"));
    assert!(!adapt.contains("metric.fine_tune_instances=0.0"), "{adapt}");
}

#[test]
fn seed_is_required_and_env_seed_is_used() {
    let d = tempfile::tempdir().unwrap();
    let o = wran(d.path(), &["--mode", "re", "gen"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    let o = Command::new(env!("CARGO_BIN_EXE_wran"))
        .env("WRAN_OUT_DIR", d.path())
        .env("WRAN_SEED", "9")
        .args(["--mode", "re", "gen"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(read(&d.path().join("data/data.kv")).contains("corpus.seed=9"));
}

#[test]
fn stage_order_and_mode_errors_are_reported() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["--seed", "1", "--mode", "re"];
    args.extend_from_slice(QUICK);
    ok(d.path(), &[&args[..], &["gen"]].concat());
    ok(d.path(), &[&args[..], &["pretrain"]].concat());
    let pre = d.path().join("pretrain");
    let o = wran(d.path(), &["--seed", "1", "adapt", "--checkpoint", pre.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage"), "{}", String::from_utf8_lossy(&o.stderr));

    let o = wran(d.path(), &["--seed", "1", "--mode", "kgc", "pretrain"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode kgc"));

    let o = wran(d.path(), &["--seed", "1", "--set", "train.nonsense=1", "pretrain"]);
    assert!(!o.status.success());

    let o = wran(d.path(), &["--seed", "1", "weights", "--checkpoint", "/nonexistent/ckpt"]);
    assert!(!o.status.success());
}

#[test]
fn config_file_sections_apply_and_flags_win() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.kv");
    std::fs::write(
        &cfg,
        "seed = 4\nmode = re\n\n[corpus]\nnum_relations = 4\noutlier_relations = 4\nsource_per_relation = 20\n",
    )
    .unwrap();
    ok(d.path(), &["--config", cfg.to_str().unwrap(), "gen"]);
    let info = read(&d.path().join("data/data.kv"));
    assert!(info.contains("corpus.num_relations=4") && info.contains("corpus.seed=4"), "{info}");
    ok(d.path(), &["--config", cfg.to_str().unwrap(), "--seed", "6", "gen"]);
    assert!(read(&d.path().join("data/data.kv")).contains("corpus.seed=6"));
}

#[test]
fn theory_writes_identity_table() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["--seed", "0", "--set", "theory.epochs=20", "theory"]);
    let m = read(&d.path().join("theory/metrics.csv"));
    assert!(m.contains("minimax,equal,-1.38629436"));
    assert!(read(&d.path().join("theory/discriminator.csv")).starts_with("x,d_trained,d_star\n"));
}
