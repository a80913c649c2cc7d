use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fastff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastff"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const SMALL: &[&str] = &[
    "--set", "task=checkerboard",
    "--set", "block=fff",
    "--set", "steps=40",
    "--set", "eval_every=20",
    "--set", "batch_size=32",
    "--set", "eval_samples=500",
];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    fastff(&args, dir)
}

#[test]
fn zero_steps_writes_init_checkpoint_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), "r", &["--set", "steps=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = dir.path().join("r");
    assert_eq!(
        fs::read_to_string(r.join("metrics.csv")).unwrap(),
        "step,split,loss,acc,ppl,max_path_share,dead_leaf_frac\n"
    );
    for f in ["resolved.json", "checkpoint.fff", "utilization.json", "report.json"] {
        assert!(r.join(f).exists(), "missing {f}");
    }
    let ckpt = fs::read(r.join("checkpoint.fff")).unwrap();
    assert_eq!(&ckpt[..4], b"FFFC");
}

#[test]
fn default_out_dir_uses_run_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--set", "steps=0", "--set", "name=demo"];
    args.extend_from_slice(SMALL);
    let o = fastff(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/demo/resolved.json").exists());
}

fn last_eval_loss(metrics: &str) -> f64 {
    metrics
        .lines()
        .filter(|l| l.contains(",eval,"))
        .last()
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn eval_reproduces_final_logged_loss() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [&["--set", "block=fff"][..], &["--set", "block=moe"][..]] {
        let o = train_small(dir.path(), "r", extra);
        assert!(o.status.success(), "{}", stderr(&o));
        let logged = last_eval_loss(&fs::read_to_string(dir.path().join("r/metrics.csv")).unwrap());
        let o = fastff(&["eval", "--out", "r"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let e: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("r/eval.json")).unwrap()).unwrap();
        assert!((e["loss"].as_f64().unwrap() - logged).abs() <= 1e-9);
    }
}

#[test]
fn analyze_fresh_lm_forest_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let o = fastff(
        &[
            "analyze", "--out", "a",
            "--set", "task=lm",
            "--set", "block=fff",
            "--set", "depth=5",
            "--set", "analyze_source=uniform",
            "--set", "analyze_samples=100000",
            "--set", "corpus_chars=5000",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let u: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/utilization.json")).unwrap()).unwrap();
    assert_eq!(u["depth"], 5);
    assert_eq!(u["total"], 100000);
    let max = u["leaf_counts"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|t| t.as_array().unwrap().iter().map(|c| c.as_u64().unwrap()))
        .max()
        .unwrap() as f64
        / 1e5;
    assert!(max < 3.0 / 32.0, "max share {max}");
    assert!(dir.path().join("a/utilization_hist.csv").exists());
    assert!(dir.path().join("a/analyze.json").exists());
}

#[test]
fn config_errors_exit_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let o = fastff(&["train", "--set", "depht=3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"depht\"") && stderr(&o).contains("\"depth\""), "{}", stderr(&o));

    let o = fastff(&["train", "--set", "block=fff"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing required field \"task\""), "{}", stderr(&o));

    let o = fastff(&["train", "--set", "task=checkerboard", "--set", "block=fff", "--set", "depth=\"deep\""], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = fastff(&["eval", "--out", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = fastff(&["train", "--config", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = fastff(&["retrain"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_two_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(
        dir.path(),
        "d",
        &["--set", "lr=1e6", "--set", "clip_norm=null", "--set", "steps=200", "--set", "optimizer=sgd"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("at step "), "{}", stderr(&o));
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), "r", &["--set", "steps=0"]).status.success());
    let p = dir.path().join("r/checkpoint.fff");
    let mut bytes = fs::read(&p).unwrap();
    bytes[4] = 99;
    fs::write(&p, bytes).unwrap();
    let o = fastff(&["eval", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn resolved_config_regenerates_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), "a", &["--seed", "9"]).status.success());
    let o = fastff(&["train", "--config", "a/resolved.json", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["resolved.json", "checkpoint.fff", "metrics.csv", "utilization.json", "report.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_shortcut_wins_over_set() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), "r", &["--set", "steps=0", "--set", "seed=3", "--seed", "7"]).status.success());
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/resolved.json")).unwrap()).unwrap();
    assert_eq!(r["seed"], 7);
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"task": "checkerboard", "block": "fff", "steps": 20, "eval_samples": 300}"#).unwrap();
    let o = fastff(&["train", "--config", "cfg.json", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let before = (fs::read(&cfg).unwrap(), fs::read(dir.path().join("r/checkpoint.fff")).unwrap());
    for verb in ["eval", "analyze", "prune", "export-boundaries"] {
        let o = fastff(
            &[verb, "--config", "cfg.json", "--out", "r", "--set", "analyze_samples=2000", "--set", "resolution=16"],
            dir.path(),
        );
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    let after = (fs::read(&cfg).unwrap(), fs::read(dir.path().join("r/checkpoint.fff")).unwrap());
    assert_eq!(before, after);
}

#[test]
fn prune_and_export_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_small(dir.path(), "r", &[]).status.success());
    let o = fastff(&["prune", "--out", "r", "--set", "analyze_samples=2000"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("r/prune.csv")).unwrap();
    assert!(csv.starts_with("fraction,mode,loss,acc,ppl,disabled_leaves\n"));
    assert_eq!(csv.lines().count(), 7);

    let o = fastff(&["export-boundaries", "--out", "r", "--set", "resolution=20"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let b = fs::read_to_string(dir.path().join("r/boundaries.csv")).unwrap();
    assert!(b.starts_with("tree,level,slot,w1,w2,b,clip_poly\n"));
    // Only nodes reachable inside the unit square are listed; every root is.
    let rows: Vec<&str> = b.lines().skip(1).collect();
    assert!(rows.len() <= 4 * 15);
    for t in 0..4 {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{t},0,0,"))));
    }
    let pgm = fs::read(dir.path().join("r/boundaries_t0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n20 20\n"));
    assert!(dir.path().join("r/boundaries_palette.json").exists());

    let o = fastff(&["export-boundaries", "--out", "lm", "--set", "task=lm", "--set", "block=fff", "--set", "corpus_chars=3000"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_sweep_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = fastff(
        &[
            "bench", "--out", "b",
            "--set", "bench_width=64",
            "--set", "bench_dim=8",
            "--set", "bench_depths=[0,2,4]",
            "--set", "bench_batch=16",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert!(csv.starts_with("depth,sparsity,rel_flops,mean_ms,std_ms,speedup\n"));
    assert_eq!(csv.lines().count(), 4);
    let j: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b/bench.json")).unwrap()).unwrap();
    for r in j["results"].as_array().unwrap() {
        assert_eq!(r["executed_flops"], r["analytic_flops"]);
    }
}

#[test]
fn shipped_configs_parse() {
    for name in ["checkerboard.json", "checkerboard_post.json", "lm.json", "bench.json"] {
        fastff::config::parse_config(Some(&configs().join(name)), &[]).unwrap();
    }
}
