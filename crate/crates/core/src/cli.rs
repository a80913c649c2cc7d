//! Command-line front end: config resolution, experiment runners and every
//! on-disk artifact.
//!
//! Exit codes: 0 on success, 1 for config, I/O or format errors, 2 for
//! numerical failure (the diagnostic names the failing step).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::block::{Block, BlockCache};
use crate::config::{config_from_value, parse_config, AnalyzeSource, Config, PruneMode, Task, Verb};
use crate::error::{Error, Result};
use crate::forest::{forward_sequential, ForestParams};
use crate::numeric::{sample_uniform, Matrix, Rng};
use crate::params::Params;
use crate::prune::{
    attention_flops, bench_layer, build_prune_mask, forward_pruned, sparsity_report, sweep_csv,
    trees_for_width, BenchConfig, BenchResult, EfficiencyReport, PruneMask, PrunedRouting,
    REFERENCE_SPEEDUPS,
};
use crate::routing::{
    build_tree_prior, pareto_target, rank_aligned_distance, LeafOrder, TreePrior, UtilizationLedger,
};
use crate::tasks::{export_boundaries, gen_checkerboard, Domain, INPUT_SCALE, INPUT_SHIFT};
use crate::train::{
    evaluate, evaluate_with, forward_batch, load_task_data, metrics_csv, natural_forward,
    read_checkpoint, build_model, run_training, write_checkpoint, Batch, EvalResult, Model,
    TaskData, ANALYZE_STREAM,
};

#[derive(Debug, Parser)]
#[command(name = "fastff", version, about = "Fast feed-forward layer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and utilization.
    Train(RunArgs),
    /// Evaluate a checkpoint on its evaluation split.
    Eval(RunArgs),
    /// Leaf-path utilization of a checkpoint (or a fresh model).
    Analyze(RunArgs),
    /// Accuracy of a checkpoint after pruning rarely used leaves.
    Prune(RunArgs),
    /// Wall-clock and FLOP comparison of forest and dense layers.
    Bench(RunArgs),
    /// Routing lines and leaf raster of a two-input forest.
    ExportBoundaries(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `run/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model checkpoint to read; defaults to `<out>/checkpoint.fff`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (Verb, &RunArgs) {
        match self {
            Command::Train(a) => (Verb::Train, a),
            Command::Eval(a) => (Verb::Eval, a),
            Command::Analyze(a) => (Verb::Analyze, a),
            Command::Prune(a) => (Verb::Prune, a),
            Command::Bench(a) => (Verb::Bench, a),
            Command::ExportBoundaries(a) => (Verb::ExportBoundaries, a),
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn overrides(args: &RunArgs) -> Vec<String> {
    let mut o = args.set.clone();
    if let Some(s) = args.seed {
        o.push(format!("seed={s}"));
    }
    o
}

fn out_dir(args: &RunArgs, cfg: &Config) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| Path::new("run").join(&cfg.name))
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_context(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

/// A checkpointed model with the config it was resolved under.
pub struct Loaded {
    pub cfg: Config,
    pub data: TaskData,
    pub model: Model,
}

/// Loads a checkpoint; keys from `file` and `overrides` are layered over the
/// stored config before the model is rebuilt.
pub fn load_with_overrides(checkpoint: &Path, file: Option<&Path>, overrides: &[String]) -> Result<Loaded> {
    let f = fs::File::open(checkpoint).map_err(|e| io_context(checkpoint, e))?;
    let (stored, flat) = read_checkpoint(std::io::BufReader::new(f))?;
    let mut doc = serde_json::to_value(&stored).expect("config serializes");
    if let Some(p) = file {
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        let extra: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", p.display())))?;
        let Value::Object(extra) = extra else {
            return Err(Error::Config(format!("{} must hold a JSON object", p.display())));
        };
        let Value::Object(base) = &mut doc else { unreachable!("config is an object") };
        base.extend(extra);
    }
    let cfg = config_from_value(doc, overrides)?;
    let data = load_task_data(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    if model.num_params() != flat.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, the resolved config describes {}",
            flat.len(),
            model.num_params()
        )));
    }
    model.load_flat(&flat)?;
    Ok(Loaded { cfg, data, model })
}

fn fresh(cfg: Config) -> Result<Loaded> {
    let data = load_task_data(&cfg)?;
    let model = build_model(&cfg, &data)?;
    Ok(Loaded { cfg, data, model })
}

pub fn execute(cmd: &Command) -> Result<()> {
    let (verb, args) = cmd.parts();
    let ov = overrides(args);
    let base = parse_config(args.config.as_deref(), &ov)?;
    let out = out_dir(args, &base);
    fs::create_dir_all(&out).map_err(|e| io_context(&out, e))?;
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.fff"));

    match verb {
        Verb::Train => cmd_train(base, &out),
        Verb::Bench => cmd_bench(base, &out),
        _ => {
            let loaded = if checkpoint.exists() {
                load_with_overrides(&checkpoint, args.config.as_deref(), &ov)?
            } else if matches!(verb, Verb::Analyze | Verb::ExportBoundaries) {
                base.require(verb)?;
                eprintln!("no checkpoint at {}; using a freshly initialized model", checkpoint.display());
                fresh(base)?
            } else {
                return Err(Error::Config(format!("checkpoint {} not found", checkpoint.display())));
            };
            loaded.cfg.require(verb)?;
            match verb {
                Verb::Eval => cmd_eval(&loaded, &out),
                Verb::Analyze => cmd_analyze(&loaded, &out),
                Verb::Prune => cmd_prune(&loaded, &out),
                Verb::ExportBoundaries => cmd_export(&loaded, &out),
                Verb::Train | Verb::Bench => unreachable!("handled above"),
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    pub max_path_share: Option<f64>,
    pub dead_leaf_frac: Option<f64>,
}

impl EvalSummary {
    fn new(e: &EvalResult, threshold: u64) -> Self {
        Self {
            loss: e.loss,
            accuracy: e.accuracy,
            perplexity: e.perplexity,
            max_path_share: e.max_path_share(),
            dead_leaf_frac: e.dead_leaf_frac(threshold),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct TrainReport {
    name: String,
    steps: usize,
    total_params: usize,
    active_params: usize,
    final_eval: EvalSummary,
    /// One entry per forest block.
    efficiency: Vec<EfficiencyReport>,
}

fn model_width(model: &Model) -> usize {
    match model {
        Model::Classifier(_) => 2,
        Model::Lm(m) => m.config().d_model,
    }
}

/// Analytic accounting of each forest block against a dense block with
/// the same number of hidden units.
pub fn model_efficiency(cfg: &Config, model: &Model) -> Result<Vec<EfficiencyReport>> {
    let attn = match (cfg.attention_flops, model) {
        (Some(a), _) => a,
        (None, Model::Lm(m)) => attention_flops(m.config().d_model, m.config().context),
        (None, Model::Classifier(_)) => 0.0,
    };
    model
        .forests()
        .into_iter()
        .map(|(_, f)| sparsity_report(f.trees(), f.depth(), model_width(model), f.total_nodes(), attn))
        .collect()
}

/// Writes `utilization.json` for the first forest block and
/// `utilization_l{i}.json` for block `i` of any further ones.
fn write_ledgers(out: &Path, ledgers: &[(usize, UtilizationLedger)], with_csv: bool) -> Result<()> {
    for (k, (block, ledger)) in ledgers.iter().enumerate() {
        let suffix = if k == 0 { String::new() } else { format!("_l{block}") };
        write_file(&out.join(format!("utilization{suffix}.json")), ledger.to_json())?;
        if with_csv {
            write_file(&out.join(format!("utilization_hist{suffix}.csv")), ledger.histogram_csv())?;
        }
    }
    Ok(())
}

fn cmd_train(cfg: Config, out: &Path) -> Result<()> {
    cfg.require(Verb::Train)?;
    write_file(&out.join("resolved.json"), cfg.to_json())?;
    let outcome = run_training(&cfg)?;
    let ckpt = out.join("checkpoint.fff");
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &cfg, &outcome.model)?;
    write_file(&ckpt, buf)?;
    write_file(&out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    write_ledgers(out, &outcome.final_eval.ledgers, false)?;
    let report = TrainReport {
        name: cfg.name.clone(),
        steps: cfg.steps,
        total_params: outcome.model.num_params(),
        active_params: outcome.model.active_param_count(),
        final_eval: EvalSummary::new(&outcome.final_eval, cfg.dead_threshold),
        efficiency: model_efficiency(&cfg, &outcome.model)?,
    };
    write_file(&out.join("report.json"), to_json(&report))?;
    println!(
        "trained {} steps: eval loss {}{}",
        cfg.steps,
        report.final_eval.loss,
        report
            .final_eval
            .accuracy
            .map(|a| format!(", accuracy {a:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_eval(l: &Loaded, out: &Path) -> Result<()> {
    write_file(&out.join("resolved_eval.json"), l.cfg.to_json())?;
    let e = evaluate(&l.model, &l.data)?;
    let s = EvalSummary::new(&e, l.cfg.dead_threshold);
    write_file(&out.join("eval.json"), to_json(&s))?;
    println!("eval loss {}", s.loss);
    Ok(())
}

const ANALYZE_CHUNK: usize = 2000;

/// Routing ledgers for every forest block over `analyze_samples` inputs
/// from the configured source.
pub fn analyze_ledgers(cfg: &Config, model: &Model, data: &TaskData) -> Result<Vec<(usize, UtilizationLedger)>> {
    let forests = model.forests();
    if forests.is_empty() {
        return Err(Error::Config("the model has no forest block to analyze".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork(ANALYZE_STREAM);
    let mut ledgers: Vec<(usize, UtilizationLedger)> = forests
        .iter()
        .map(|(i, f)| (*i, UtilizationLedger::for_layer(f)))
        .collect();
    match cfg.analyze_source {
        AnalyzeSource::Uniform => {
            for ((_, f), (_, ledger)) in forests.iter().zip(ledgers.iter_mut()) {
                let mut left = cfg.analyze_samples;
                while left > 0 {
                    let n = left.min(ANALYZE_CHUNK);
                    let x = sample_uniform(&mut rng, n, f.d_in(), -1.0, 1.0);
                    ledger.record_batch(&forward_sequential(f, &x)?.1.mask)?;
                    left -= n;
                }
            }
        }
        AnalyzeSource::Data => {
            let mut left = cfg.analyze_samples;
            while left > 0 {
                let (batch, n) = match data {
                    TaskData::Checkerboard { spec, .. } => {
                        let n = left.min(ANALYZE_CHUNK);
                        (Batch::Points(gen_checkerboard(&mut rng, n, *spec)?), n)
                    }
                    TaskData::Lm { corpus, .. } => {
                        let ctx = cfg.context;
                        let windows = left.div_ceil(ctx).min(ANALYZE_CHUNK / ctx).max(1);
                        let w = corpus.sample_windows(&mut rng, windows, ctx)?;
                        (Batch::Windows(w), windows * ctx)
                    }
                };
                let out = forward_batch(model, &batch, &natural_forward)?;
                for (block, ledger) in ledgers.iter_mut() {
                    if let Some(m) = out.route_mask(*block) {
                        ledger.record_batch(m)?;
                    }
                }
                left = left.saturating_sub(n);
            }
        }
    }
    Ok(ledgers)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerAnalysis {
    pub block: usize,
    pub trees: usize,
    pub depth: usize,
    pub samples: u64,
    pub max_path_share: f64,
    /// Share of a single path under perfectly uniform routing.
    pub uniform_share: f64,
    pub dead_leaf_fraction: f64,
    /// Rank-aligned total variation to the uniform and Pareto(2) path priors.
    pub tv_uniform: f64,
    pub tv_pareto: f64,
}

pub fn layer_analysis(block: usize, ledger: &UtilizationLedger, dead_threshold: u64) -> Result<LayerAnalysis> {
    let d = ledger.depth;
    let pareto = build_tree_prior(&pareto_target(d, 2.0, LeafOrder::DepthFirst))?;
    Ok(LayerAnalysis {
        block,
        trees: ledger.trees,
        depth: d,
        samples: ledger.total,
        max_path_share: ledger.max_path_share()?,
        uniform_share: 0.5f64.powi(d as i32),
        dead_leaf_fraction: ledger.dead_leaf_fraction(dead_threshold)?,
        tv_uniform: rank_aligned_distance(ledger, &TreePrior::uniform(d))?,
        tv_pareto: rank_aligned_distance(ledger, &pareto)?,
    })
}

fn cmd_analyze(l: &Loaded, out: &Path) -> Result<()> {
    write_file(&out.join("resolved_analyze.json"), l.cfg.to_json())?;
    let ledgers = analyze_ledgers(&l.cfg, &l.model, &l.data)?;
    write_ledgers(out, &ledgers, true)?;
    let rows = ledgers
        .iter()
        .map(|(b, led)| layer_analysis(*b, led, l.cfg.dead_threshold))
        .collect::<Result<Vec<_>>>()?;
    write_file(&out.join("analyze.json"), to_json(&rows))?;
    for r in &rows {
        println!(
            "block {}: max path share {:.4} (uniform {:.4}), dead leaves {:.3}",
            r.block, r.max_path_share, r.uniform_share, r.dead_leaf_fraction
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneRow {
    pub fraction: f64,
    pub mode: PruneMode,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    /// Disabled leaves summed over trees and blocks.
    pub disabled_leaves: usize,
}

fn routing_mode(m: PruneMode) -> PrunedRouting {
    match m {
        PruneMode::Reroute => PrunedRouting::Reroute,
        PruneMode::Zero => PrunedRouting::ZeroContribution,
    }
}

/// Evaluates the model with each block's masks applied.
pub fn evaluate_pruned(
    model: &Model,
    data: &TaskData,
    masks: &[(usize, PruneMask)],
    mode: PrunedRouting,
) -> Result<EvalResult> {
    let ff = |i: usize, block: &Block, x: &Matrix| -> Result<(Matrix, BlockCache)> {
        match (block, masks.iter().find(|(b, _)| *b == i)) {
            (Block::Forest(p), Some((_, m))) => {
                let (y, c) = forward_pruned(p, x, m, mode)?;
                Ok((y, BlockCache::Forest(c)))
            }
            _ => block.forward(x),
        }
    };
    evaluate_with(model, data, &ff)
}

/// Builds masks from `ledgers` at each fraction in the config and evaluates.
pub fn prune_sweep(
    cfg: &Config,
    model: &Model,
    data: &TaskData,
    ledgers: &[(usize, UtilizationLedger)],
) -> Result<Vec<PruneRow>> {
    let mode = routing_mode(cfg.prune_mode);
    cfg.prune_fractions
        .iter()
        .map(|&f| {
            let masks = ledgers
                .iter()
                .map(|(b, led)| Ok((*b, build_prune_mask(led, f)?)))
                .collect::<Result<Vec<_>>>()?;
            let e = evaluate_pruned(model, data, &masks, mode)?;
            let disabled = masks
                .iter()
                .map(|(_, m)| (0..m.trees).map(|t| m.disabled_leaves(t).len()).sum::<usize>())
                .sum();
            Ok(PruneRow {
                fraction: f,
                mode: cfg.prune_mode,
                loss: e.loss,
                accuracy: e.accuracy,
                perplexity: e.perplexity,
                disabled_leaves: disabled,
            })
        })
        .collect()
}

pub const PRUNE_HEADER: &str = "fraction,mode,loss,acc,ppl,disabled_leaves";

pub fn prune_csv(rows: &[PruneRow]) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{PRUNE_HEADER}\n");
    for r in rows {
        let mode = match r.mode {
            PruneMode::Reroute => "reroute",
            PruneMode::Zero => "zero",
        };
        s.push_str(&format!(
            "{},{mode},{},{},{},{}\n",
            r.fraction,
            r.loss,
            o(r.accuracy),
            o(r.perplexity),
            r.disabled_leaves
        ));
    }
    s
}

fn cmd_prune(l: &Loaded, out: &Path) -> Result<()> {
    write_file(&out.join("resolved_prune.json"), l.cfg.to_json())?;
    let ledgers = analyze_ledgers(&l.cfg, &l.model, &l.data)?;
    let rows = prune_sweep(&l.cfg, &l.model, &l.data, &ledgers)?;
    write_file(&out.join("prune.csv"), prune_csv(&rows))?;
    write_file(&out.join("prune.json"), to_json(&rows))?;
    for r in &rows {
        println!(
            "pruned {:.2}: loss {:.5}{}",
            r.fraction,
            r.loss,
            r.accuracy.map(|a| format!(", accuracy {a:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct BenchReport {
    width: usize,
    results: Vec<BenchResult>,
    /// Published GPU layer speedups, for comparison only.
    reference_speedups: Vec<(usize, f64)>,
}

/// Depth sweep at a fixed total node count.
pub fn bench_sweep(cfg: &Config) -> Result<Vec<BenchResult>> {
    let attn = cfg
        .attention_flops
        .unwrap_or_else(|| attention_flops(cfg.bench_dim, cfg.context));
    let mut rng = Rng::new(cfg.seed).fork(ANALYZE_STREAM);
    cfg.bench_depths
        .iter()
        .map(|&depth| {
            let bc = BenchConfig {
                trees: trees_for_width(cfg.bench_width, depth),
                depth,
                d_model: cfg.bench_dim,
                batch: cfg.bench_batch,
                warmup: cfg.bench_warmup,
                repeats: cfg.bench_repeats,
                threads: cfg.bench_threads,
            };
            bench_layer(&mut rng, bc, attn)
        })
        .collect()
}

fn cmd_bench(cfg: Config, out: &Path) -> Result<()> {
    write_file(&out.join("resolved_bench.json"), cfg.to_json())?;
    let results = bench_sweep(&cfg)?;
    write_file(&out.join("bench.csv"), sweep_csv(&results))?;
    for r in &results {
        println!(
            "depth {:2}: trees {:4}, sparsity {:.4}, speedup {:.2}",
            r.report.depth,
            r.report.trees,
            r.report.mlp_block_sparsity,
            r.report.speedup.unwrap_or(f64::NAN)
        );
    }
    let report = BenchReport {
        width: cfg.bench_width,
        results,
        reference_speedups: REFERENCE_SPEEDUPS.to_vec(),
    };
    write_file(&out.join("bench.json"), to_json(&report))?;
    Ok(())
}

/// The classifier routes on `s·x + c`; folding that map into the node
/// vectors gives lines in the original `[0,1)²` coordinates.
pub fn fold_centering(f: &ForestParams) -> ForestParams {
    let mut g = f.clone();
    for r in 0..g.total_nodes() {
        let w = g.w_in.row(r).to_vec();
        g.b_in[r] += INPUT_SHIFT * w.iter().sum::<f64>();
        g.w_in.row_mut(r).iter_mut().for_each(|v| *v *= INPUT_SCALE);
    }
    g
}

fn cmd_export(l: &Loaded, out: &Path) -> Result<()> {
    if l.cfg.task()? != Task::Checkerboard {
        return Err(Error::Config("boundary export needs the checkerboard task".into()));
    }
    let Some((_, forest)) = l.model.forests().into_iter().next() else {
        return Err(Error::Config("boundary export needs a forest block".into()));
    };
    write_file(&out.join("resolved_export.json"), l.cfg.to_json())?;
    let ex = export_boundaries(&fold_centering(forest), Domain::unit(), l.cfg.resolution)?;
    write_file(&out.join("boundaries.csv"), ex.csv())?;
    write_file(&out.join("boundaries_palette.json"), ex.palette_json())?;
    for t in 0..ex.trees {
        write_file(&out.join(format!("boundaries_t{t}.pgm")), ex.pgm(t))?;
    }
    println!("exported {} node lines for {} trees", ex.segments.len(), ex.trees);
    Ok(())
}
