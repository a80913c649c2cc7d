//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! straight to stdout so the summary survives the harness's capture, then
//! asserts the same condition. Tests share a lock so timings do not overlap.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use fastff::baselines::{match_sparsity, moe_sparsity, DenseFF, MoE, MOE_PRESETS};
use fastff::block::BlockSpec;
use fastff::cli::{analyze_ledgers, layer_analysis, prune_sweep};
use fastff::config::{parse_config, Config};
use fastff::forest::{
    backward, forward_masked, forward_sequential, init_forest, mlp_block_sparsity, ForestParams,
    InitScheme, Variant,
};
use fastff::numeric::sample_uniform;
use fastff::prune::{attention_flops, bench_layer, trees_for_width, BenchConfig, REFERENCE_SPEEDUPS};
use fastff::routing::{build_tree_prior, pareto_target, LeafOrder};
use fastff::tasks::{cross_entropy, perplexity, LmConfig, TinyLM};
use fastff::train::{drift_experiment, run_training};
use fastff::{Matrix, Params, Rng};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|p| p.into_inner())
}

/// Prints the summary line and returns whether both the check and the time
/// limit held.
fn verdict(id: u32, what: &str, ok: bool, detail: &str, elapsed: Duration, limit: Option<Duration>) -> bool {
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let pass = ok && in_time;
    let limit_s = limit.map_or(String::from("-"), |l| format!("{}s", l.as_secs()));
    let line = format!(
        "AC{id:<2} {} {what}: {detail} [{:.1}s / {limit_s}]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cfg_from(file: &str, overrides: &[&str]) -> Config {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    parse_config(Some(&config(file)), &ov).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

const SECS: fn(u64) -> Duration = Duration::from_secs;

#[test]
fn ac01_masked_and_sequential_forward_agree() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    let mut masks_equal = true;
    let mut configs = 0;
    for _ in 0..100 {
        let (p, d) = (1 + rng.below(4), rng.below(8));
        let (d_in, d_out, b) = (1 + rng.below(64), 1 + rng.below(64), 1 + rng.below(32));
        for v in [Variant::PreGelu, Variant::PostGelu] {
            let f = init_forest(&mut rng, p, d, d_in, d_out, v, InitScheme::Scaled).unwrap();
            let x = sample_uniform(&mut rng, b, d_in, -2.0, 2.0);
            let (ym, cm) = forward_masked(&f, &x).unwrap();
            let (ys, cs) = forward_sequential(&f, &x).unwrap();
            worst = worst.max(ym.max_abs_diff(&ys));
            masks_equal &= cm.mask.raw_paths() == cs.mask.raw_paths();
            configs += 1;
        }
    }
    let ok = worst <= 1e-12 && masks_equal;
    let pass = verdict(
        1,
        "forward equivalence",
        ok,
        &format!("{configs} configs, max |masked - sequential| = {worst:.2e}, masks equal = {masks_equal}"),
        t.elapsed(),
        Some(SECS(30)),
    );
    assert!(pass);
}

/// Parameter set backed by one flat vector, for checking input gradients.
#[derive(Clone)]
struct Flat(Vec<f64>);

impl Params for Flat {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.0]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }
}

/// Central differences of `loss` over every coordinate of `at`. `loss`
/// returns `None` when the perturbation changed a discrete choice (a route
/// or an expert selection); those coordinates are skipped. Returns the
/// norm-relative error over the kept coordinates and the skip count.
fn fd_check<M: Params + Clone>(at: &M, analytic: &[f64], loss: impl Fn(&M) -> Option<f64>) -> (f64, usize) {
    const EPS: f64 = 1e-6;
    let base = at.flatten();
    assert_eq!(base.len(), analytic.len());
    let mut probe = at.clone();
    let (mut diff, mut na, mut nn, mut skipped) = (0.0, 0.0, 0.0, 0);
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + EPS;
        probe.load_flat(&v).unwrap();
        let plus = loss(&probe);
        v[i] = base[i] - EPS;
        probe.load_flat(&v).unwrap();
        let minus = loss(&probe);
        let (Some(lp), Some(lm)) = (plus, minus) else {
            skipped += 1;
            continue;
        };
        let num = (lp - lm) / (2.0 * EPS);
        diff += (num - analytic[i]).powi(2);
        na += analytic[i].powi(2);
        nn += num * num;
    }
    let scale = na.sqrt().max(nn.sqrt()).max(1e-300);
    (diff.sqrt() / scale, skipped)
}

fn weighted_sum(y: &Matrix, r: &Matrix) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn forest_grad_errors(seed: u64, variant: Variant) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let f = init_forest(&mut rng, 2, 3, 5, 4, variant, InitScheme::Scaled).unwrap();
    let x = sample_uniform(&mut rng, 6, 5, -1.0, 1.0);
    let r = sample_uniform(&mut rng, 6, 4, -1.0, 1.0);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for masked in [false, true] {
        let (_, cache) = if masked { forward_masked(&f, &x) } else { forward_sequential(&f, &x) }.unwrap();
        let g = backward(&f, &cache, &r).unwrap();
        let paths = cache.mask.raw_paths().to_vec();
        let (e, s) = fd_check(&f, &g.flatten(), |p: &ForestParams| {
            let (y, c) = forward_sequential(p, &x).unwrap();
            (c.mask.raw_paths() == paths.as_slice()).then(|| weighted_sum(&y, &r))
        });
        worst = worst.max(e);
        skipped += s;
        let (e, s) = fd_check(&Flat(x.data().to_vec()), g.g_x.data(), |xf: &Flat| {
            let xm = Matrix::from_vec(6, 5, xf.0.clone()).unwrap();
            let (y, c) = forward_sequential(&f, &xm).unwrap();
            (c.mask.raw_paths() == paths.as_slice()).then(|| weighted_sum(&y, &r))
        });
        worst = worst.max(e);
        skipped += s;
    }
    (worst, skipped)
}

fn dense_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let m = DenseFF::init(&mut rng, 5, 7, 4).unwrap();
    let x = sample_uniform(&mut rng, 6, 5, -1.0, 1.0);
    let r = sample_uniform(&mut rng, 6, 4, -1.0, 1.0);
    let (_, cache) = m.forward(&x).unwrap();
    let (g, gx) = m.backward(&cache, &r).unwrap();
    let (e1, _) = fd_check(&m, &g.flatten(), |p: &DenseFF| Some(weighted_sum(&p.forward(&x).unwrap().0, &r)));
    let (e2, _) = fd_check(&Flat(x.data().to_vec()), gx.data(), |xf: &Flat| {
        let xm = Matrix::from_vec(6, 5, xf.0.clone()).unwrap();
        Some(weighted_sum(&m.forward(&xm).unwrap().0, &r))
    });
    e1.max(e2)
}

fn moe_grad_errors(seed: u64) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let m = MoE::init(&mut rng, 5, 3, 4, 4, 2).unwrap();
    let x = sample_uniform(&mut rng, 6, 5, -1.0, 1.0);
    let r = sample_uniform(&mut rng, 6, 4, -1.0, 1.0);
    let (_, cache) = m.forward(&x).unwrap();
    let (g, gx) = m.backward(&cache, &r).unwrap();
    let sel = cache.selected.clone();
    let (e1, s1) = fd_check(&m, &g.flatten(), |p: &MoE| {
        let (y, c) = p.forward(&x).unwrap();
        (c.selected == sel).then(|| weighted_sum(&y, &r))
    });
    let (e2, s2) = fd_check(&Flat(x.data().to_vec()), gx.data(), |xf: &Flat| {
        let xm = Matrix::from_vec(6, 5, xf.0.clone()).unwrap();
        let (y, c) = m.forward(&xm).unwrap();
        (c.selected == sel).then(|| weighted_sum(&y, &r))
    });
    (e1.max(e2), s1 + s2)
}

fn lm_grad_errors(seed: u64, ff: BlockSpec, tied: bool) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let cfg = LmConfig { vocab: 7, context: 6, d_model: 8, layers: 2, tied, ff };
    let m = TinyLM::init(&mut rng, cfg).unwrap();
    let windows: Vec<Vec<usize>> = (0..3).map(|_| (0..7).map(|_| rng.below(7)).collect()).collect();
    let (inputs, targets) = TinyLM::split_windows(&windows);
    let (logits, cache) = m.forward(&inputs).unwrap();
    let (_, gl) = cross_entropy(&logits, &targets).unwrap();
    let g = m.backward(&cache, &gl).unwrap();
    let routes: Vec<Option<Vec<u32>>> = cache
        .route_masks()
        .iter()
        .map(|r| r.map(|m| m.raw_paths().to_vec()))
        .collect();
    fd_check(&m, &g.flatten(), |p: &TinyLM| {
        let (lg, c) = p.forward(&inputs).unwrap();
        let now: Vec<Option<Vec<u32>>> = c.route_masks().iter().map(|r| r.map(|m| m.raw_paths().to_vec())).collect();
        (now == routes).then(|| cross_entropy(&lg, &targets).unwrap().0)
    })
}

#[test]
fn ac02_analytic_gradients_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let mut layer = 0.0f64;
    let mut skipped = 0;
    for seed in 1..=3 {
        for v in [Variant::PreGelu, Variant::PostGelu] {
            let (e, s) = forest_grad_errors(seed, v);
            layer = layer.max(e);
            skipped += s;
        }
        layer = layer.max(dense_grad_error(seed));
        let (e, s) = moe_grad_errors(seed);
        layer = layer.max(e);
        skipped += s;
    }
    let mut model = 0.0f64;
    let specs = [
        BlockSpec::Forest { trees: 2, depth: 2, variant: Variant::PreGelu },
        BlockSpec::Forest { trees: 2, depth: 2, variant: Variant::PostGelu },
        BlockSpec::Dense { hidden: 12 },
        BlockSpec::Moe { experts: 4, top_k: 2, expert_hidden: Some(3), dense_hidden: 12 },
    ];
    for (i, spec) in specs.into_iter().enumerate() {
        let (e, s) = lm_grad_errors(10 + i as u64, spec, i % 2 == 0);
        model = model.max(e);
        skipped += s;
    }
    let ok = layer <= 1e-5 && model <= 1e-4;
    let pass = verdict(
        2,
        "gradient check",
        ok,
        &format!("layers max rel {layer:.2e} (<= 1e-5), TinyLM max rel {model:.2e} (<= 1e-4), {skipped} coordinates skipped at route flips"),
        t.elapsed(),
        Some(SECS(120)),
    );
    assert!(pass);
}

#[test]
fn ac03_block_sparsity_matches_reported_percentages() {
    let _g = serial();
    let t = Instant::now();
    // Depth and the percentage quoted for it.
    let reported = [(3, 75.0), (4, 83.0), (5, 90.0), (6, 94.0), (7, 97.0), (13, 99.0)];
    let mut parts = Vec::new();
    let mut ok = true;
    for (d, pct) in reported {
        let got = 100.0 * mlp_block_sparsity(d);
        let hit = (got - pct).abs() <= 1.0;
        ok &= hit;
        parts.push(format!("D={d} {got:.2}% vs {pct}%{}", if hit { "" } else { " (off)" }));
    }
    let pass = verdict(3, "block sparsity", ok, &parts.join(", "), t.elapsed(), None);
    assert!(pass);
}

#[test]
fn ac04_moe_sparsity_matches_presets() {
    let _g = serial();
    let t = Instant::now();
    let s8 = 100.0 * moe_sparsity(8, 2);
    let s21 = 100.0 * moe_sparsity(21, 2);
    let s106 = 100.0 * moe_sparsity(106, 2);
    let presets_ok = MOE_PRESETS == [(3, 8), (5, 21), (7, 106)];
    let matched: Vec<usize> = [3, 5]
        .iter()
        .map(|&d| match_sparsity(mlp_block_sparsity(d), 2).unwrap())
        .collect();
    let ok = (s8 - 75.0).abs() <= 1.5
        && (s21 - 90.0).abs() <= 1.5
        && (s106 - 98.1).abs() < 0.05
        && presets_ok
        && matched == [8, 21];
    let pass = verdict(
        4,
        "MoE sparsity",
        ok,
        &format!("E=8 {s8:.2}%, E=21 {s21:.2}%, E=106 {s106:.2}% (documented 98.1%), matched experts for D=3,5 {matched:?}"),
        t.elapsed(),
        None,
    );
    assert!(pass);
}

#[test]
fn ac05_checkerboard_forest_matches_dense() {
    let _g = serial();
    let t = Instant::now();
    let acc = |block: &str, seed: u64| {
        let cfg = cfg_from("checkerboard.json", &[&format!("block={block}"), &format!("seed={seed}")]);
        assert_eq!((cfg.trees, cfg.depth, cfg.steps), (4, 3, 2000));
        run_training(&cfg).unwrap().final_eval.accuracy.unwrap()
    };
    let fff: Vec<f64> = (1..=3).map(|s| acc("fff", s)).collect();
    let dense: Vec<f64> = (1..=3).map(|s| acc("dense", s)).collect();
    let (mf, md) = (median(fff.clone()), median(dense.clone()));
    let ok = md >= 0.95 && mf >= md - 0.02;
    let pass = verdict(
        5,
        "checkerboard parity",
        ok,
        &format!("median acc forest {mf:.4} {fff:.4?}, dense {md:.4} {dense:.4?}, gap {:.2} points", 100.0 * (md - mf)),
        t.elapsed(),
        Some(SECS(120)),
    );
    assert!(pass);
}

fn lm_max_share(block: &str, seed: u64) -> f64 {
    let cfg = cfg_from("lm.json", &[&format!("block={block}"), &format!("seed={seed}")]);
    run_training(&cfg).unwrap().final_eval.max_path_share().unwrap()
}

#[test]
fn ac06_post_gelu_balances_routing() {
    let _g = serial();
    let t = Instant::now();
    let depth = cfg_from("lm.json", &[]).depth;
    assert_eq!(depth, 5);
    let threshold = 3.0 * 0.5f64.powi(depth as i32);
    let mut parts = Vec::new();
    let (mut pre_all, mut wins) = (true, 0);
    for seed in 1..=3 {
        let pre = lm_max_share("fff", seed);
        let post = lm_max_share("fff_post", seed);
        pre_all &= pre > threshold;
        wins += usize::from(post < pre);
        parts.push(format!("seed {seed}: pre {pre:.3} post {post:.3}"));
    }
    let ok = pre_all && wins >= 2;
    let pass = verdict(
        6,
        "routing imbalance",
        ok,
        &format!("{}; pre > {threshold:.4} in all seeds = {pre_all}, post < pre in {wins}/3", parts.join(", ")),
        t.elapsed(),
        Some(SECS(300)),
    );
    assert!(pass);
}

#[test]
fn ac07_drift_identity_and_sign() {
    let _g = serial();
    let t = Instant::now();
    let cfg = cfg_from(
        "checkerboard.json",
        &["block=fff", "optimizer=sgd", "batch_size=10000", "steps=100", "lr=0.05"],
    );
    let recs = drift_experiment(&cfg, 0, 0).unwrap();
    let worst = recs.iter().map(|r| r.identity_residual).fold(0.0, f64::max);
    let agree = recs
        .iter()
        .filter(|r| r.predicted.signum() == r.observed.signum())
        .count();
    let ok = recs.len() == 100 && worst <= 1e-12 && agree >= 90;
    let pass = verdict(
        7,
        "drift sign",
        ok,
        &format!("max identity residual {worst:.2e}, sign agreement {agree}/{}", recs.len()),
        t.elapsed(),
        Some(SECS(120)),
    );
    assert!(pass);
}

#[test]
fn ac08_pruning_plateau_then_drop() {
    let _g = serial();
    let t = Instant::now();
    let cfg = cfg_from("checkerboard.json", &["block=fff", "prune_fractions=[0.0,0.25,0.9]"]);
    let out = run_training(&cfg).unwrap();
    let ledgers = analyze_ledgers(&cfg, &out.model, &out.data).unwrap();
    let rows = prune_sweep(&cfg, &out.model, &out.data, &ledgers).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy.unwrap()).collect();
    let (d25, d90) = (100.0 * (acc[0] - acc[1]), 100.0 * (acc[0] - acc[2]));
    let ok = d25.abs() < 2.0 && d90 > 5.0;
    let pass = verdict(
        8,
        "prune plateau",
        ok,
        &format!("acc {:.4} unpruned, {:.4} at 25% ({d25:+.2} pts), {:.4} at 90% ({d90:+.2} pts)", acc[0], acc[1], acc[2]),
        t.elapsed(),
        Some(SECS(60)),
    );
    assert!(pass);
}

#[test]
fn ac09_prior_roundtrip_and_trained_ledger_fit() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = Rng::new(9);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let d = i % 9;
        let n = 1usize << d;
        let mut target: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        if i % 3 == 0 && n > 1 {
            target[rng.below(n)] = 0.0;
        }
        let s: f64 = target.iter().sum();
        target.iter_mut().for_each(|v| *v /= s);
        let back = build_tree_prior(&target).unwrap().leaf_distribution();
        worst = back.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    for order in [LeafOrder::DepthFirst, LeafOrder::BreadthFirst] {
        let p = pareto_target(5, 2.0, order);
        let back = build_tree_prior(&p).unwrap().leaf_distribution();
        worst = back.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let cfg = cfg_from("lm.json", &["block=fff", "seed=1"]);
    let out = run_training(&cfg).unwrap();
    let (b, ledger) = &out.final_eval.ledgers[0];
    let a = layer_analysis(*b, ledger, cfg.dead_threshold).unwrap();
    let ok = worst <= 1e-12 && a.tv_pareto < a.tv_uniform;
    let pass = verdict(
        9,
        "tree prior",
        ok,
        &format!("roundtrip max err {worst:.2e}, trained ledger TV to Pareto(2) {:.4} vs uniform {:.4}", a.tv_pareto, a.tv_uniform),
        t.elapsed(),
        Some(SECS(60)),
    );
    assert!(pass);
}

#[test]
fn ac10_perplexity_identities() {
    let _g = serial();
    let t = Instant::now();
    let vocab = 13;
    let cfg = LmConfig {
        vocab,
        context: 8,
        d_model: 12,
        layers: 1,
        tied: false,
        ff: BlockSpec::Forest { trees: 2, depth: 3, variant: Variant::PreGelu },
    };
    let mut rng = Rng::new(10);
    let mut m = TinyLM::init(&mut rng, cfg).unwrap();
    m.load_flat(&vec![0.0; m.num_params()]).unwrap();
    let windows: Vec<Vec<usize>> = (0..4).map(|_| (0..9).map(|_| rng.below(vocab)).collect()).collect();
    let (inputs, targets) = TinyLM::split_windows(&windows);
    let (logits, _) = m.forward(&inputs).unwrap();
    let (loss, _) = cross_entropy(&logits, &targets).unwrap();
    let ppl = perplexity(loss * targets.len() as f64, targets.len()).unwrap();
    let rel = (ppl - vocab as f64).abs() / vocab as f64;

    let z = sample_uniform(&mut rng, 20, vocab, -5.0, 5.0);
    let tg: Vec<usize> = (0..20).map(|_| rng.below(vocab)).collect();
    let mut shifted = z.clone();
    for r in 0..20 {
        let c = rng.uniform_range(-50.0, 50.0);
        shifted.row_mut(r).iter_mut().for_each(|v| *v += c);
    }
    let (l0, g0) = cross_entropy(&z, &tg).unwrap();
    let (l1, g1) = cross_entropy(&shifted, &tg).unwrap();
    let shift = (l0 - l1).abs().max(g0.max_abs_diff(&g1));
    let ok = rel <= 1e-9 && shift <= 1e-10;
    let pass = verdict(
        10,
        "perplexity identities",
        ok,
        &format!("uniform model PPL {ppl:.12} vs V={vocab} (rel {rel:.1e}), shift invariance {shift:.1e}"),
        t.elapsed(),
        None,
    );
    assert!(pass);
}

#[test]
fn ac11_sparse_layer_beats_dense_at_depth_six() {
    let _g = serial();
    let t = Instant::now();
    let (width, depth, d_model) = (2048, 6, 128);
    let trees = trees_for_width(width, depth);
    let cfg = BenchConfig { trees, depth, d_model, batch: 256, warmup: 2, repeats: 5, threads: 1 };
    let r = bench_layer(&mut Rng::new(11), cfg, attention_flops(d_model, 32)).unwrap();
    let speedup = r.report.speedup.unwrap();
    let reference: Vec<String> = REFERENCE_SPEEDUPS.iter().map(|(d, s)| format!("D={d}: {s}x")).collect();
    let ok = r.report.d_ff_dense >= width && speedup > 1.0 && r.executed_flops == r.analytic_flops;
    let pass = verdict(
        11,
        "benchmark shape",
        ok,
        &format!(
            "P={trees} D={depth} width {} speedup {speedup:.2}x, executed {} vs analytic {} FLOPs (reference, not asserted: {})",
            r.report.d_ff_dense,
            r.executed_flops,
            r.analytic_flops,
            reference.join(", ")
        ),
        t.elapsed(),
        Some(SECS(120)),
    );
    assert!(pass);
}

fn fastff(args: &[&str], cwd: &Path) -> Duration {
    let t = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_fastff")).args(args).current_dir(cwd).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    t.elapsed()
}

fn same_files(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut differ = Vec::new();
    for n in &names {
        if std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() {
            differ.push(n.to_string_lossy().into_owned());
        }
    }
    (names.len(), differ)
}

#[test]
fn ac12_runs_regenerate_bitwise() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let cb = config("checkerboard.json");
    let lm = config("lm.json");
    let (cb, lm) = (cb.to_str().unwrap(), lm.to_str().unwrap());
    let mut original = Duration::ZERO;
    let mut regen = Duration::ZERO;
    let mut files = 0;
    let mut differ = Vec::new();
    for (name, file) in [("cb", cb), ("lm", lm)] {
        let (a, b) = (format!("{name}_a"), format!("{name}_b"));
        original += fastff(&["train", "--config", file, "--out", &a, "--set", "bench_threads=1"], cwd);
        original += fastff(&["analyze", "--out", &a], cwd);
        original += fastff(&["prune", "--out", &a], cwd);
        regen += fastff(&["train", "--config", &format!("{a}/resolved.json"), "--out", &b], cwd);
        regen += fastff(&["analyze", "--config", &format!("{a}/resolved_analyze.json"), "--out", &b], cwd);
        regen += fastff(&["prune", "--config", &format!("{a}/resolved_prune.json"), "--out", &b], cwd);
        let (n, d) = same_files(&cwd.join(&a), &cwd.join(&b));
        files += n;
        differ.extend(d.into_iter().map(|f| format!("{name}/{f}")));
    }
    // Timing jitter allowance on top of the original run time.
    let in_time = regen <= original.mul_f64(1.5) + SECS(1);
    let ok = differ.is_empty() && in_time;
    let pass = verdict(
        12,
        "bitwise regeneration",
        ok,
        &format!(
            "{files} files compared, {} differ {differ:?}; original {:.1}s, regenerated {:.1}s",
            differ.len(),
            original.as_secs_f64(),
            regen.as_secs_f64()
        ),
        t.elapsed(),
        None,
    );
    assert!(pass);
}
