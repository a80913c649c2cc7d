//! Optimizers, clipping, schedules, the seeded training loop, model
//! checkpoints and the SGD mean-logit drift experiment.

use std::io::{Read, Write};

use crate::block::{Block, BlockCache, BlockGrads};
use crate::config::{Config, OptimizerKind, ScheduleKind, Task, Verb};
use crate::error::{shape_err, Error, Result};
use crate::forest::{ForestParams, RouteMask};
use crate::io::{read_bytes, read_f64s, read_magic, read_u32, read_u64, write_f64s, write_u32, write_u64};
use crate::numeric::{dot, Matrix, Rng};
use crate::params::{same_layout, Params};
use crate::routing::{observed_drift, DriftProbe, UtilizationLedger};
use crate::tasks::{
    accuracy, cross_entropy, gen_checkerboard, nested_paren_corpus, CheckerboardSpec, Classifier,
    Corpus, Dataset, FfForward, LmCache, LmConfig, LmGrads, TinyLM,
};

/// Stream tags forked from the run seed.
pub const INIT_STREAM: u64 = 1;
pub const DATA_STREAM: u64 = 2;
pub const EVAL_STREAM: u64 = 3;
pub const ANALYZE_STREAM: u64 = 4;

const EVAL_CHUNK_POINTS: usize = 1000;
const EVAL_CHUNK_WINDOWS: usize = 16;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn adamw(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adamw, lr, beta1, beta2, eps, weight_decay)
    }

    fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, wd: f64) -> Self {
        Self {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay: wd,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::sgd(cfg.lr),
            OptimizerKind::Adamw => {
                Self::adamw(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            }
        }
    }

    pub fn step(&mut self, params: &mut dyn Params, grads: &dyn Params) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grads, self.lr)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::Adamw => adamw_step(params, grads, self),
        }
    }
}

fn check_layout(params: &dyn Params, grads: &dyn Params) -> Result<()> {
    if !same_layout(params, grads) {
        return shape_err("gradient layout does not match parameters");
    }
    Ok(())
}

/// `w ← w − lr·g`.
pub fn sgd_step(params: &mut dyn Params, grads: &dyn Params, lr: f64) -> Result<()> {
    check_layout(params, grads)?;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (w, d) in p.iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Adam with bias correction and decoupled weight decay.
pub fn adamw_step(params: &mut dyn Params, grads: &dyn Params, state: &mut OptimizerState) -> Result<()> {
    check_layout(params, grads)?;
    let sizes: Vec<usize> = grads.tensors().iter().map(|t| t.len()).collect();
    if state.m.is_empty() {
        state.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
        state.v = state.m.clone();
    } else if state.m.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return shape_err("optimizer moments do not match parameters");
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps, wd) = (state.lr, state.eps, state.weight_decay);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * wd * p[i];
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut dyn Params, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// Learning rate for 0-based `step`.
pub fn lr_at(cfg: &Config, step: usize) -> f64 {
    match cfg.schedule {
        ScheduleKind::Constant => cfg.lr,
        ScheduleKind::Cosine => {
            if step < cfg.warmup_steps {
                return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
            }
            let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
            let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
            cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Data for one task: the evaluation split is fixed by the seed.
#[derive(Debug, Clone)]
pub enum TaskData {
    Checkerboard { spec: CheckerboardSpec, eval: Dataset },
    Lm { corpus: Corpus, eval: Vec<Vec<usize>> },
}

pub fn load_task_data(cfg: &Config) -> Result<TaskData> {
    match cfg.task()? {
        Task::Checkerboard => {
            let spec = CheckerboardSpec::new(cfg.grid)?;
            let mut rng = Rng::new(cfg.seed).fork(EVAL_STREAM);
            Ok(TaskData::Checkerboard {
                spec,
                eval: gen_checkerboard(&mut rng, cfg.eval_samples, spec)?,
            })
        }
        Task::Lm => {
            let text = match &cfg.corpus_path {
                Some(p) => std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read corpus {p}: {e}")))?,
                None => nested_paren_corpus(cfg.corpus_seed, cfg.corpus_chars),
            };
            let corpus = Corpus::from_text(&text, cfg.valid_fraction)?;
            let eval = corpus.valid_windows(cfg.context, cfg.eval_samples)?;
            Ok(TaskData::Lm { corpus, eval })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Classifier(Classifier),
    Lm(TinyLM),
}

#[derive(Debug, Clone)]
pub enum ModelGrads {
    Classifier(BlockGrads),
    Lm(LmGrads),
}

pub fn build_model(cfg: &Config, data: &TaskData) -> Result<Model> {
    let mut rng = Rng::new(cfg.seed).fork(INIT_STREAM);
    let spec = cfg.block_spec()?;
    Ok(match data {
        TaskData::Checkerboard { .. } => Model::Classifier(Classifier::init(&mut rng, spec)?),
        TaskData::Lm { corpus, .. } => Model::Lm(TinyLM::init(
            &mut rng,
            LmConfig {
                vocab: corpus.vocab.len(),
                context: cfg.context,
                d_model: cfg.d_model,
                layers: cfg.layers,
                tied: cfg.tied,
                ff: spec,
            },
        )?),
    })
}

impl Model {
    pub fn blocks(&self) -> Vec<&Block> {
        match self {
            Model::Classifier(c) => vec![&c.block],
            Model::Lm(m) => m.layers.iter().map(|l| &l.ff).collect(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Block> {
        match self {
            Model::Classifier(c) => vec![&mut c.block],
            Model::Lm(m) => m.layers.iter_mut().map(|l| &mut l.ff).collect(),
        }
    }

    /// Forest layers with their block index.
    pub fn forests(&self) -> Vec<(usize, &ForestParams)> {
        self.blocks()
            .into_iter()
            .enumerate()
            .filter_map(|(i, b)| b.forest().map(|f| (i, f)))
            .collect()
    }

    pub fn active_param_count(&self) -> usize {
        match self {
            Model::Classifier(c) => c.block.active_param_count(),
            Model::Lm(m) => m.active_param_count(),
        }
    }
}

impl Params for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Model::Classifier(c) => c.tensors(),
            Model::Lm(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Classifier(c) => c.tensors_mut(),
            Model::Lm(m) => m.tensors_mut(),
        }
    }
}

impl Params for ModelGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            ModelGrads::Classifier(g) => g.tensors(),
            ModelGrads::Lm(g) => g.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ModelGrads::Classifier(g) => g.tensors_mut(),
            ModelGrads::Lm(g) => g.tensors_mut(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Batch {
    Points(Dataset),
    Windows(Vec<Vec<usize>>),
}

pub fn sample_batch(data: &TaskData, batch: usize, rng: &mut Rng) -> Result<Batch> {
    match data {
        TaskData::Checkerboard { spec, .. } => Ok(Batch::Points(gen_checkerboard(rng, batch, *spec)?)),
        TaskData::Lm { corpus, eval } => {
            let len = eval.first().map(|w| w.len() - 1).unwrap_or(0);
            Ok(Batch::Windows(corpus.sample_windows(rng, batch, len)?))
        }
    }
}

/// Loss, accuracy (classification only), routing masks per block and the
/// inputs each block saw.
pub struct ForwardOutput {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub rows: usize,
    g_logits: Matrix,
    caches: OutputCache,
}

enum OutputCache {
    Classifier(BlockCache),
    Lm(LmCache),
}

impl ForwardOutput {
    pub fn block_cache(&self, block: usize) -> Option<&BlockCache> {
        match &self.caches {
            OutputCache::Classifier(c) => (block == 0).then_some(c),
            OutputCache::Lm(c) => c.block_cache(block),
        }
    }

    pub fn route_mask(&self, block: usize) -> Option<&RouteMask> {
        self.block_cache(block)?.route_mask()
    }
}

/// Forward used by training and plain evaluation.
pub fn natural_forward(_: usize, block: &Block, x: &Matrix) -> Result<(Matrix, BlockCache)> {
    block.forward(x)
}

pub fn forward_batch(model: &Model, batch: &Batch, ff: &FfForward) -> Result<ForwardOutput> {
    match (model, batch) {
        (Model::Classifier(c), Batch::Points(d)) => {
            let (logits, cache) = c.forward_with(&d.x, ff)?;
            let (loss, g) = cross_entropy(&logits, &d.labels)?;
            Ok(ForwardOutput {
                loss,
                accuracy: Some(accuracy(&logits, &d.labels)),
                rows: d.len(),
                g_logits: g,
                caches: OutputCache::Classifier(cache),
            })
        }
        (Model::Lm(m), Batch::Windows(w)) => {
            let (inp, tgt) = TinyLM::split_windows(w);
            let (logits, cache) = m.forward_with(&inp, ff)?;
            let (loss, g) = cross_entropy(&logits, &tgt)?;
            Ok(ForwardOutput {
                loss,
                accuracy: None,
                rows: tgt.len(),
                g_logits: g,
                caches: OutputCache::Lm(cache),
            })
        }
        _ => Err(Error::InvalidArgument("batch does not match the model's task".into())),
    }
}

pub fn backward_batch(model: &Model, out: &ForwardOutput) -> Result<ModelGrads> {
    match (model, &out.caches) {
        (Model::Classifier(c), OutputCache::Classifier(cache)) => {
            Ok(ModelGrads::Classifier(c.backward(cache, &out.g_logits)?))
        }
        (Model::Lm(m), OutputCache::Lm(cache)) => Ok(ModelGrads::Lm(m.backward(cache, &out.g_logits)?)),
        _ => Err(Error::StaleCache("forward output belongs to another model".into())),
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    /// One ledger per forest block, in block order.
    pub ledgers: Vec<(usize, UtilizationLedger)>,
}

impl EvalResult {
    pub fn max_path_share(&self) -> Option<f64> {
        self.ledgers
            .iter()
            .filter_map(|(_, l)| l.max_path_share().ok())
            .reduce(f64::max)
    }

    pub fn dead_leaf_frac(&self, threshold: u64) -> Option<f64> {
        let v: Vec<f64> = self
            .ledgers
            .iter()
            .filter_map(|(_, l)| l.dead_leaf_fraction(threshold).ok())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn evaluate(model: &Model, data: &TaskData) -> Result<EvalResult> {
    evaluate_with(model, data, &natural_forward)
}

/// Evaluates on the fixed split in chunks, recording routing for every
/// forest block.
pub fn evaluate_with(model: &Model, data: &TaskData, ff: &FfForward) -> Result<EvalResult> {
    let mut ledgers: Vec<(usize, UtilizationLedger)> = model
        .forests()
        .into_iter()
        .map(|(i, f)| (i, UtilizationLedger::for_layer(f)))
        .collect();
    let batches: Vec<Batch> = match data {
        TaskData::Checkerboard { eval, .. } => (0..eval.len())
            .step_by(EVAL_CHUNK_POINTS)
            .map(|s| {
                let idx: Vec<usize> = (s..(s + EVAL_CHUNK_POINTS).min(eval.len())).collect();
                Batch::Points(Dataset {
                    x: eval.x.gather_rows(&idx),
                    labels: idx.iter().map(|&i| eval.labels[i]).collect(),
                })
            })
            .collect(),
        TaskData::Lm { eval, .. } => eval
            .chunks(EVAL_CHUNK_WINDOWS)
            .map(|c| Batch::Windows(c.to_vec()))
            .collect(),
    };
    let (mut nll, mut hits, mut rows) = (0.0, 0.0, 0usize);
    for b in &batches {
        let out = forward_batch(model, b, ff)?;
        nll += out.loss * out.rows as f64;
        if let Some(a) = out.accuracy {
            hits += a * out.rows as f64;
        }
        rows += out.rows;
        for (block, ledger) in ledgers.iter_mut() {
            if let Some(m) = out.route_mask(*block) {
                ledger.record_batch(m)?;
            }
        }
    }
    let loss = nll / rows as f64;
    let (accuracy, perplexity) = match data {
        TaskData::Checkerboard { .. } => (Some(hits / rows as f64), None),
        TaskData::Lm { .. } => (None, Some(crate::tasks::perplexity(nll, rows)?)),
    };
    Ok(EvalResult {
        loss,
        accuracy,
        perplexity,
        ledgers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub acc: Option<f64>,
    pub ppl: Option<f64>,
    pub max_path_share: Option<f64>,
    pub dead_leaf_frac: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,loss,acc,ppl,max_path_share,dead_leaf_frac";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.split,
            r.loss,
            opt(r.acc),
            opt(r.ppl),
            opt(r.max_path_share),
            opt(r.dead_leaf_frac)
        ));
    }
    s
}

fn eval_row(step: usize, e: &EvalResult, threshold: u64) -> MetricRow {
    MetricRow {
        step,
        split: "eval",
        loss: e.loss,
        acc: e.accuracy,
        ppl: e.perplexity,
        max_path_share: e.max_path_share(),
        dead_leaf_frac: e.dead_leaf_frac(threshold),
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub data: TaskData,
    pub metrics: Vec<MetricRow>,
    /// Evaluation of the returned model.
    pub final_eval: EvalResult,
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Trains from the config's seed; identical configs give identical results.
pub fn run_training(cfg: &Config) -> Result<TrainOutcome> {
    cfg.require(Verb::Train)?;
    let data = load_task_data(cfg)?;
    let mut model = build_model(cfg, &data)?;
    let mut opt = OptimizerState::from_config(cfg);
    let mut rng = Rng::new(cfg.seed).fork(DATA_STREAM);
    let mut metrics = Vec::new();
    let mut last_eval = None;
    for step in 1..=cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, &mut rng)?;
        let out = forward_batch(&model, &batch, &natural_forward).map_err(|e| at_step(e, step))?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        let mut grads = backward_batch(&model, &out).map_err(|e| at_step(e, step))?;
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut grads, c)?;
        }
        opt.lr = lr_at(cfg, step - 1);
        opt.step(&mut model, &grads)?;
        if !model.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        metrics.push(MetricRow {
            step,
            split: "train",
            loss: out.loss,
            acc: out.accuracy,
            ppl: matches!(model, Model::Lm(_)).then(|| out.loss.exp()),
            max_path_share: None,
            dead_leaf_frac: None,
        });
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let e = evaluate(&model, &data).map_err(|e| at_step(e, step))?;
            metrics.push(eval_row(step, &e, cfg.dead_threshold));
            last_eval = Some(e);
        }
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&model, &data)?,
    };
    Ok(TrainOutcome {
        model,
        data,
        metrics,
        final_eval,
    })
}

pub const MODEL_MAGIC: &[u8; 4] = b"FFFC";
pub const MODEL_VERSION: u32 = 1;

/// Container: magic, version, resolved config JSON, flat parameters.
pub fn write_checkpoint<W: Write>(mut w: W, cfg: &Config, model: &Model) -> Result<()> {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let flat = model.flatten();
    w.write_all(MODEL_MAGIC)?;
    write_u32(&mut w, MODEL_VERSION)?;
    write_u64(&mut w, json.len() as u64)?;
    w.write_all(&json)?;
    write_u64(&mut w, flat.len() as u64)?;
    write_f64s(&mut w, &flat)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Config, Vec<f64>)> {
    read_magic(&mut r, MODEL_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {MODEL_VERSION}"
        )));
    }
    let n = read_u64(&mut r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Format("config section too large".into()));
    }
    let json = read_bytes(&mut r, n)?;
    let doc: serde_json::Value = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("checkpoint config is not JSON: {e}")))?;
    let cfg = crate::config::config_from_value(doc, &[])?;
    let count = read_u64(&mut r)? as usize;
    if count > 1 << 34 {
        return Err(Error::Format("parameter count too large".into()));
    }
    let mut flat = vec![0.0; count];
    read_f64s(&mut r, &mut flat)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok((cfg, flat))
}

/// Rebuilds the model described by a checkpoint.
pub fn load_model<R: Read>(r: R) -> Result<(Config, TaskData, Model)> {
    let (cfg, flat) = read_checkpoint(r)?;
    let data = load_task_data(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    if flat.len() != model.num_params() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, config describes {}",
            flat.len(),
            model.num_params()
        )));
    }
    model.load_flat(&flat)?;
    Ok((cfg, data, model))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftRecord {
    pub step: usize,
    pub loss: f64,
    /// `predict_drift` from this step's batch.
    pub predicted: f64,
    /// Change of the node's mean logit over the evaluation inputs.
    pub observed: f64,
    /// `|observed − (−η(mᵀg_w + g_b))|` with the same probe mean `m`.
    pub identity_residual: f64,
    pub logit_mean: f64,
    pub logit_std: f64,
}

/// Plain-SGD training of a checkerboard forest, probing node `(tree, node)`
/// each step.
pub fn drift_experiment(cfg: &Config, tree: usize, node: usize) -> Result<Vec<DriftRecord>> {
    cfg.require(Verb::Train)?;
    if cfg.optimizer != OptimizerKind::Sgd {
        return Err(Error::Config("drift experiment needs \"optimizer\": \"sgd\"".into()));
    }
    let data = load_task_data(cfg)?;
    let TaskData::Checkerboard { eval, .. } = &data else {
        return Err(Error::Config("drift experiment runs on the checkerboard task".into()));
    };
    let mut model = build_model(cfg, &data)?;
    if model.forests().is_empty() {
        return Err(Error::Config("drift experiment needs a forest block".into()));
    }
    let centered = Classifier::center(&eval.x)?;
    let m_eval: Vec<f64> = centered
        .column_sums()
        .iter()
        .map(|s| s / centered.rows() as f64)
        .collect();
    let mut rng = Rng::new(cfg.seed).fork(DATA_STREAM);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, &mut rng)?;
        let out = forward_batch(&model, &batch, &natural_forward).map_err(|e| at_step(e, step))?;
        let grads = backward_batch(&model, &out)?;
        let (ModelGrads::Classifier(BlockGrads::Forest(g)), BlockCache::Forest(fc)) =
            (&grads, out.block_cache(0).expect("one block"))
        else {
            unreachable!("checkerboard forest model");
        };
        let before = model.forests()[0].1.clone();
        let mut probe = DriftProbe::new(tree, node, before.d_in());
        probe.record(&before, &fc.input, &fc.mask, g)?;
        let predicted = probe.predict_drift(cfg.lr)?;
        let r = before.row_of(tree, node);
        let rhs = -cfg.lr * (dot(&m_eval, g.g_w_in.row(r)) + g.g_b_in[r]);
        sgd_step(&mut model, &grads, cfg.lr)?;
        let after = model.forests()[0].1;
        let observed = observed_drift(&before, after, tree, node, &m_eval);
        records.push(DriftRecord {
            step,
            loss: out.loss,
            predicted,
            observed,
            identity_residual: (observed - rhs).abs(),
            logit_mean: probe.logit_mean(),
            logit_std: probe.logit_std(),
        });
    }
    Ok(records)
}
