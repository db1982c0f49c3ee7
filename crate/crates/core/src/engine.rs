//! Training and evaluation engine: run configuration, the minibatch loop with
//! warmup and KL annealing, checkpoints, and metric reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DataError, LoadedDataset, SyntheticSample};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::metrics::{self, CalibrationCurve, EvalRecord, MetricsError, MetricsReport};
use crate::model::{InputDims, Model, ModelConfig, ModelError, Sampling, ScorePrediction, StepDescriptor};
use crate::numerics::{AdamWConfig, NumericsError, OptimizerState, ParamGroup, Tensor};
use crate::rubric::{build_dag, RubricDag, RubricError, RubricSpec};
use crate::stochastic::{self, mix, NoiseKey};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RACK";
pub const CHECKPOINT_VERSION: u32 = 1;

const TRAIN_NOISE_TAG: u64 = 0x7a11;
const EVAL_NOISE_TAG: u64 = 0xe7a1;
const SHUFFLE_TAG: u64 = 0x5f1e;
const INIT_TAG: u64 = 0x1417;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("numerical fault in {component}: {detail}")]
    Numerical { component: String, detail: String },
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl EngineError {
    /// Process exit code: 2 config, 3 data or format, 4 numerical fault.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::UnsupportedMode(_) => 2,
            EngineError::Data(DataError::Config(_)) | EngineError::Data(DataError::Rubric(RubricError::Config(_))) => 2,
            EngineError::Data(_) | EngineError::Format { .. } | EngineError::Io { .. } => 3,
            EngineError::Numerical { .. } => 4,
        }
    }

    fn numerical(component: &str, e: impl std::fmt::Display) -> Self {
        EngineError::Numerical { component: component.to_string(), detail: e.to_string() }
    }
}

impl From<RubricError> for EngineError {
    fn from(e: RubricError) -> Self {
        EngineError::Data(DataError::Rubric(e))
    }
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => EngineError::numerical("model forward", n),
            other => EngineError::Config(other.to_string()),
        }
    }
}

impl From<MetricsError> for EngineError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Undefined(m) => EngineError::numerical("metrics", m),
            other => EngineError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stochastic,
    /// Gaussian means fed straight to the DAG; no KL and no uncertainty.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_encoder: f64,
    pub lr_transformer: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_encoder: 3e-4,
            lr_transformer: 1e-3,
            lr_head: 3e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 5,
            epochs: 200,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Transformer => self.lr_transformer,
            ParamGroup::Head => self.lr_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Overrides the manifest's rubric spec when set.
    pub rubric_spec: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimConfig,
    pub mode: Mode,
    pub n_inference_samples: usize,
    /// Width of the step descriptors fed to the step MLP.
    pub d_text: usize,
    pub seed: u64,
    /// Write `epoch-NNNN.rack` every this many epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("data/manifest.json"),
            rubric_spec: None,
            output_dir: PathBuf::from("run"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimConfig::default(),
            mode: Mode::Stochastic,
            n_inference_samples: 20,
            d_text: 16,
            seed: 0,
            checkpoint_every: 0,
            resume: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let o = &self.optimizer;
        self.loss.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(EngineError::Config("batch_size and epochs must be positive".into()));
        }
        if [o.lr_encoder, o.lr_transformer, o.lr_head].iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(EngineError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.n_inference_samples == 0 {
            return Err(EngineError::Config("n_inference_samples must be positive".into()));
        }
        if self.d_text < 2 {
            return Err(EngineError::Config("d_text must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = fs::read_to_string(path).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            EngineError::Config(m) => EngineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn sampling(&self) -> Sampling {
        match self.mode {
            Mode::Stochastic => Sampling::Stochastic(self.n_inference_samples),
            Mode::Deterministic => Sampling::Deterministic,
        }
    }
}

/// A sample with its step descriptors and rubric DAG resolved.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: SyntheticSample,
    pub steps: Vec<StepDescriptor>,
    pub dag: RubricDag,
}

/// Resolve descriptors and DAGs for a split; unknown step types are config errors.
pub fn prepare(
    samples: &[SyntheticSample],
    spec: &RubricSpec,
    d_text: usize,
    descriptor_seed: u64,
) -> Result<Vec<Prepared>, EngineError> {
    let catalog = spec.step_types.iter().map(|s| s.id as usize + 1).max().unwrap_or(0);
    let table = data::step_descriptors(catalog, d_text, descriptor_seed);
    samples
        .iter()
        .map(|s| {
            let dag = build_dag(spec, &s.step_types)?;
            let steps = s
                .step_types
                .iter()
                .map(|&t| StepDescriptor { step_type: t, descriptor: table[t as usize].clone() })
                .collect();
            Ok(Prepared { sample: s.clone(), steps, dag })
        })
        .collect()
}

/// Dataset as seen by the engine.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub rubric: RubricSpec,
    pub seed: u64,
    pub label_min: f64,
    pub label_max: f64,
    pub train: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

impl Corpus {
    pub fn from_parts(
        rubric: RubricSpec,
        seed: u64,
        (label_min, label_max): (f64, f64),
        train: &[SyntheticSample],
        test: &[SyntheticSample],
        d_text: usize,
    ) -> Result<Self, EngineError> {
        Ok(Corpus {
            train: prepare(train, &rubric, d_text, seed)?,
            test: prepare(test, &rubric, d_text, seed)?,
            rubric,
            seed,
            label_min,
            label_max,
        })
    }

    pub fn from_generated(ds: &data::GeneratedDataset, d_text: usize) -> Result<Self, EngineError> {
        Self::from_parts(ds.rubric.clone(), ds.seed, (ds.label_min, ds.label_max), &ds.train, &ds.test, d_text)
    }

    pub fn load(cfg: &RunConfig) -> Result<Self, EngineError> {
        let ds = LoadedDataset::load(&cfg.manifest)?;
        let rubric = match &cfg.rubric_spec {
            Some(p) => RubricSpec::load(p)?,
            None => ds.rubric.clone(),
        };
        let m = &ds.manifest;
        Self::from_parts(rubric, m.seed, (m.label_min, m.label_max), &ds.train, &ds.test, cfg.d_text)
    }

    pub fn split(&self, name: &str) -> Result<&[Prepared], EngineError> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(EngineError::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn input_dims(&self) -> Result<InputDims, EngineError> {
        let first = self
            .train
            .first()
            .or(self.test.first())
            .ok_or_else(|| EngineError::Config("dataset is empty".into()))?;
        let max_len = self.train.iter().chain(&self.test).map(|p| p.sample.features.t).max().unwrap_or(1);
        Ok(InputDims { d_feat: first.sample.features.d_feat, d_text: first.steps[0].descriptor.len(), max_len })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr_scale: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: RunConfig,
    dims: InputDims,
    rubric: RubricSpec,
    descriptor_seed: u64,
    label_min: f64,
    label_max: f64,
    epoch: usize,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
}

/// Model, optimizer state and position in the schedule.
pub struct Trainer {
    config: RunConfig,
    model: Model<f32>,
    optimizer: OptimizerState<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    rubric: RubricSpec,
    descriptor_seed: u64,
    label_range: (f64, f64),
}

impl Trainer {
    pub fn new(config: RunConfig, corpus: &Corpus) -> Result<Self, EngineError> {
        config.validate()?;
        let dims = corpus.input_dims()?;
        let model = Model::<f32>::new(config.model.clone(), dims, mix(config.seed, INIT_TAG))?;
        let shapes: Vec<Vec<usize>> = model.params().entries().iter().map(|e| e.value.shape().to_vec()).collect();
        let optimizer = OptimizerState::new(config.optimizer.adamw(), shapes.iter().map(|s| s.as_slice()));
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(mix(config.seed, SHUFFLE_TAG)),
            config,
            model,
            optimizer,
            epoch: 0,
            step: 0,
            rubric: corpus.rubric.clone(),
            descriptor_seed: corpus.seed,
            label_range: (corpus.label_min, corpus.label_max),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.optimizer.batch_size) as u64
    }

    /// Linear warmup from 0 at the first step to 1 after `warmup_epochs`.
    pub fn lr_scale(&self, n_train: usize) -> f64 {
        let warm = self.config.optimizer.warmup_epochs as u64 * self.steps_per_epoch(n_train);
        if warm == 0 {
            1.0
        } else {
            (self.step as f64 / warm as f64).min(1.0)
        }
    }

    /// Loss and gradients of one sample; every term is pre-divided by the batch size.
    fn sample_gradients(
        &self,
        p: &Prepared,
        index: usize,
        beta: f64,
        batch: usize,
    ) -> Result<(Vec<Option<Tensor<f32>>>, LossBreakdown), EngineError> {
        let cfg = &self.config;
        let inv_b = 1.0 / batch as f64;
        let mut s = self.model.session(true);
        let e = self.model.embed(&mut s, &p.sample.features, &p.steps).map_err(|e| match e {
            ModelError::Numerics(n) => EngineError::numerical("embedding", n),
            other => other.into(),
        })?;
        let (k, d) = (p.steps.len(), cfg.model.d_model);

        let leaves = match cfg.mode {
            Mode::Deterministic => e.mu,
            Mode::Stochastic => {
                let key = NoiseKey(mix(mix(cfg.seed, TRAIN_NOISE_TAG), self.step));
                let noise: Vec<f32> =
                    (0..k).flat_map(|leaf| key.draws(index as u64, leaf as u64, d)).map(|v| v as f32).collect();
                let noise = s.graph.constant(Tensor::new(vec![k, d], noise).map_err(|e| EngineError::numerical("reparameterized sample", e))?);
                stochastic::sample_var(&mut s.graph, e.mu, e.sigma, noise)
                    .map_err(|e| EngineError::numerical("reparameterized sample", e))?
            }
        };
        let root = self.model.propagate_scores(&mut s, &p.dag, leaves).map_err(|e| match e {
            ModelError::Numerics(n) => EngineError::numerical("DAG propagation", n),
            other => other.into(),
        })?;
        let y = self.model.decode_score(&mut s, root)?;

        let mse_var = (|| {
            let diff = s.graph.offset(y, -(p.sample.label as f32))?;
            let sq = s.graph.square(diff)?;
            let sq = s.graph.sum(sq)?;
            s.graph.scale(sq, (1.0 / cfg.loss.output_sigma.powi(2)) as f32)
        })()
        .map_err(|e| EngineError::numerical("mse loss", e))?;
        let mut total = s.graph.scale(mse_var, inv_b as f32).map_err(|e| EngineError::numerical("mse loss", e))?;

        let mut kl = None;
        if cfg.mode == Mode::Stochastic {
            let kl_var = stochastic::kl_var(&mut s.graph, e.mu, e.logvar).map_err(|e| EngineError::numerical("kl", e))?;
            kl = Some(s.graph.value(kl_var).item() as f64);
            let w = s.graph.scale(kl_var, (beta * inv_b) as f32).map_err(|e| EngineError::numerical("kl", e))?;
            total = s.graph.add(total, w).map_err(|e| EngineError::numerical("kl", e))?;
        }

        let (mut sparsity, mut ranking) = (0.0, 0.0);
        if cfg.loss.gamma > 0.0 && self.rubric.ordered {
            let t = p.sample.features.t;
            let (sp, rk) = (|| {
                let c = losses::centers_var(&mut s.graph, e.attention)?;
                let sp = losses::sparsity_var(&mut s.graph, e.attention, c)?;
                let rk = losses::ranking_var(&mut s.graph, c, t, cfg.loss.margin)?;
                Ok::<_, NumericsError>((sp, rk))
            })()
            .map_err(|e| EngineError::numerical("attention losses", e))?;
            sparsity = s.graph.value(sp).item() as f64;
            ranking = s.graph.value(rk).item() as f64;
            let aux = (|| {
                let both = s.graph.add(sp, rk)?;
                let w = s.graph.scale(both, (cfg.loss.gamma * inv_b) as f32)?;
                s.graph.add(total, w)
            })()
            .map_err(|e| EngineError::numerical("attention losses", e))?;
            total = aux;
        }

        let mse = s.graph.value(mse_var).item() as f64;
        let grads = s.graph.backward(total).map_err(|e| EngineError::numerical("backward pass", e))?;
        let beta_used = if kl.is_some() { beta } else { 0.0 };
        let mut lb = LossBreakdown { mse, kl, sparsity, ranking, total: 0.0, beta_used };
        lb.total = lb.recompose(cfg.loss.gamma);
        Ok((s.param_grads(grads), lb))
    }

    /// One optimizer step on a minibatch of training indices.
    pub fn train_batch(&mut self, train: &[Prepared], batch: &[usize]) -> Result<LossBreakdown, EngineError> {
        let total_steps = self.config.optimizer.epochs as u64 * self.steps_per_epoch(train.len());
        let beta = losses::beta_schedule(self.step.min(total_steps), total_steps, &self.config.loss)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.model.params().len()];
        let mut sum = LossBreakdown::default();
        let mut kl_weighted = 0.0;
        for &i in batch {
            let (grads, lb) = self.sample_gradients(&train[i], i, beta, batch.len())?;
            for (a, g) in acc.iter_mut().zip(grads) {
                match (a.as_mut(), g) {
                    (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y),
                    (None, Some(g)) => *a = Some(g),
                    _ => {}
                }
            }
            sum.mse += lb.mse;
            sum.sparsity += lb.sparsity;
            sum.ranking += lb.ranking;
            if let Some(kl) = lb.kl {
                *sum.kl.get_or_insert(0.0) += kl;
                kl_weighted += lb.beta_used * kl;
            }
        }
        let n = batch.len() as f64;
        let mut out = LossBreakdown {
            mse: sum.mse / n,
            kl: sum.kl.map(|k| k / n),
            sparsity: sum.sparsity / n,
            ranking: sum.ranking / n,
            total: 0.0,
            beta_used: match sum.kl {
                Some(k) if k != 0.0 => kl_weighted / k,
                Some(_) => beta,
                None => 0.0,
            },
        };
        out.total = out.recompose(self.config.loss.gamma);
        if !out.total.is_finite() {
            let component = if !out.mse.is_finite() {
                "mse loss"
            } else if out.kl.is_some_and(|k| !k.is_finite()) {
                "kl"
            } else {
                "attention losses"
            };
            return Err(EngineError::numerical(component, format!("loss became {}", out.total)));
        }

        let scale = self.lr_scale(train.len());
        let lrs: Vec<f64> =
            self.model.params().entries().iter().map(|e| self.config.optimizer.lr(e.group) * scale).collect();
        self.optimizer
            .step(self.model.params_mut().tensors_mut(), &acc, &lrs)
            .map_err(|e| EngineError::numerical("optimizer", e))?;
        self.step += 1;
        Ok(out)
    }

    /// One pass over the training split in a freshly shuffled order.
    pub fn train_epoch(&mut self, train: &[Prepared]) -> Result<EpochLog, EngineError> {
        if train.is_empty() {
            return Err(EngineError::Config("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let lr_scale = self.lr_scale(train.len());
        let mut sum = LossBreakdown::default();
        let mut kl_weighted = 0.0;
        let mut batches = 0.0;
        for batch in order.chunks(self.config.optimizer.batch_size) {
            let lb = self.train_batch(train, batch)?;
            sum.mse += lb.mse;
            sum.sparsity += lb.sparsity;
            sum.ranking += lb.ranking;
            if let Some(kl) = lb.kl {
                *sum.kl.get_or_insert(0.0) += kl;
                kl_weighted += lb.beta_used * kl;
            }
            batches += 1.0;
        }
        let mut loss = LossBreakdown {
            mse: sum.mse / batches,
            kl: sum.kl.map(|k| k / batches),
            sparsity: sum.sparsity / batches,
            ranking: sum.ranking / batches,
            total: 0.0,
            beta_used: match sum.kl {
                Some(k) if k != 0.0 => kl_weighted / k,
                _ => 0.0,
            },
        };
        loss.total = loss.recompose(self.config.loss.gamma);
        self.epoch += 1;
        Ok(EpochLog { epoch: self.epoch, steps: self.step, lr_scale, loss })
    }

    /// Train until the configured epoch count, calling `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        train: &[Prepared],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<(), EngineError>,
    ) -> Result<Vec<EpochLog>, EngineError> {
        let mut logs = Vec::new();
        while self.epoch < self.config.optimizer.epochs {
            let log = self.train_epoch(train)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn predictor(&self) -> Predictor {
        Predictor {
            config: self.config.clone(),
            model: self.model.clone(),
            rubric: self.rubric.clone(),
            descriptor_seed: self.descriptor_seed,
            label_range: self.label_range,
        }
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: RunConfig { resume: None, ..self.config.clone() },
            dims: self.model.dims(),
            rubric: self.rubric.clone(),
            descriptor_seed: self.descriptor_seed,
            label_min: self.label_range.0,
            label_max: self.label_range.1,
            epoch: self.epoch,
            step: self.step,
            optimizer_step: self.optimizer.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for e in self.model.params().entries() {
            tensors.push((e.name.clone(), &e.value));
        }
        for (e, m) in self.model.params().entries().iter().zip(&self.optimizer.first) {
            tensors.push((format!("adam.m.{}", e.name), m));
        }
        for (e, v) in self.model.params().entries().iter().zip(&self.optimizer.second) {
            tensors.push((format!("adam.v.{}", e.name), v));
        }
        encode_checkpoint(&self.header(), &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.checkpoint_bytes()).map_err(io_err(path))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self, EngineError> {
        let (header, tensors) = decode_checkpoint(bytes, path)?;
        let fmt = |reason: String| EngineError::Format { path: path.to_path_buf(), reason };
        let mut model = Model::<f32>::new(header.config.model.clone(), header.dims, mix(header.config.seed, INIT_TAG))?;
        let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut take = |name: &str| by_name.remove(name).ok_or_else(|| fmt(format!("missing tensor {name:?}")));
        let names: Vec<String> = model.params().entries().iter().map(|e| e.name.clone()).collect();
        let values = names.iter().map(|n| take(n)).collect::<Result<Vec<_>, _>>()?;
        let first = names.iter().map(|n| take(&format!("adam.m.{n}"))).collect::<Result<Vec<_>, _>>()?;
        let second = names.iter().map(|n| take(&format!("adam.v.{n}"))).collect::<Result<Vec<_>, _>>()?;
        model.params_mut().assign(values).map_err(|e| fmt(e.to_string()))?;
        for (m, e) in first.iter().chain(&second).zip(model.params().entries().iter().cycle()) {
            if m.shape() != e.value.shape() {
                return Err(fmt(format!("optimizer moment for {} has shape {:?}", e.name, m.shape())));
            }
        }
        let optimizer = OptimizerState {
            config: header.config.optimizer.adamw(),
            step: header.optimizer_step,
            first,
            second,
        };
        Ok(Trainer {
            rng: header.rng.restore(),
            epoch: header.epoch,
            step: header.step,
            rubric: header.rubric,
            descriptor_seed: header.descriptor_seed,
            label_range: (header.label_min, header.label_max),
            config: header.config,
            model,
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }

    /// Replace the schedule length, e.g. to continue a finished run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.optimizer.epochs = epochs;
    }
}

fn encode_checkpoint(header: &CheckpointHeader, tensors: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

type TensorList = Vec<(String, Tensor<f32>)>;

fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, TensorList), EngineError> {
    let fmt = |reason: String| EngineError::Format { path: path.to_path_buf(), reason };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], EngineError> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt(format!("truncated at byte {pos}")))?;
        let out = &bytes[pos..end];
        pos = end;
        Ok(out)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version} (reader supports {CHECKPOINT_VERSION})")));
    }
    let len = u32_at(take(4)?) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(len)?).map_err(|e| fmt(format!("bad config blob: {e}")))?;
    let count = u32_at(take(4)?) as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let rank = u32_at(take(4)?) as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(u32_at(take(4)?) as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fmt("tensor too large".into()))?;
        let raw = take(n.checked_mul(4).ok_or_else(|| fmt("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| fmt(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((header, tensors))
}

/// Frozen model plus what is needed to score samples from its dataset.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub rubric: RubricSpec,
    pub descriptor_seed: u64,
    pub label_range: (f64, f64),
}

impl Predictor {
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        Ok(Trainer::load(path)?.predictor())
    }

    /// Noise key for the sample at `index` of an evaluation pass.
    pub fn eval_key(&self, index: usize) -> NoiseKey {
        NoiseKey(mix(self.config.seed, EVAL_NOISE_TAG)).derive(index as u64)
    }

    pub fn predict(&self, p: &Prepared, sampling: Sampling, key: NoiseKey) -> Result<ScorePrediction, EngineError> {
        Ok(self.model.forward(&p.sample.features, &p.steps, &p.dag, sampling, key)?)
    }

    /// Resolve a loose sample against this checkpoint's rubric.
    pub fn prepare(&self, sample: &SyntheticSample) -> Result<Prepared, EngineError> {
        for &t in &sample.step_types {
            if !self.rubric.contains(t) {
                return Err(EngineError::Config(format!("step type {t} is not in the rubric spec")));
            }
        }
        Ok(prepare(std::slice::from_ref(sample), &self.rubric, self.model.dims().d_text, self.descriptor_seed)?
            .pop()
            .expect("one sample"))
    }

    pub fn records(&self, split: &[Prepared]) -> Result<Vec<EvalRecord>, EngineError> {
        let sampling = self.config.sampling();
        split
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let out = self.predict(p, sampling, self.eval_key(i))?;
                Ok(EvalRecord {
                    sample_id: p.sample.id().to_string(),
                    predicted: out.score,
                    truth: p.sample.label,
                    uncertainty: out.uncertainty,
                    peaks: Some(out.attention.peaks()),
                    intervals: Some(p.sample.intervals_usize()),
                    clips: p.sample.features.t,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, split: &[Prepared]) -> Result<(MetricsReport, Vec<EvalRecord>), EngineError> {
        let records = self.records(split)?;
        let report = metrics::report(&records, 0.0, 1.0)?;
        Ok((report, records))
    }

    pub fn calibration(&self, split: &[Prepared]) -> Result<CalibrationCurve, EngineError> {
        if self.config.mode == Mode::Deterministic {
            return Err(EngineError::UnsupportedMode("deterministic checkpoints carry no uncertainty".into()));
        }
        Ok(metrics::calibration_curve(&self.records(split)?)?)
    }

    /// Check that a dataset's rubric matches the one the checkpoint was trained on.
    pub fn check_rubric(&self, rubric: &RubricSpec) -> Result<(), EngineError> {
        if *rubric != self.rubric {
            return Err(EngineError::Config("rubric spec differs from the one the checkpoint was trained with".into()));
        }
        Ok(())
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * (self.label_range.1 - self.label_range.0) + self.label_range.0
    }
}

/// Per-sample evaluation CSV.
pub fn write_records_csv(out: impl Write, records: &[EvalRecord]) -> Result<(), EngineError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let err = |e: csv::Error| EngineError::Config(e.to_string());
    w.write_record(["sample_id", "predicted", "truth", "uncertainty", "peaks", "intervals"]).map_err(err)?;
    for r in records {
        let peaks = r.peaks.as_ref().map(|p| p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "));
        let ivs = r
            .intervals
            .as_ref()
            .map(|v| v.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>().join(" "));
        w.write_record([
            r.sample_id.clone(),
            r.predicted.to_string(),
            r.truth.to_string(),
            r.uncertainty.map(|u| u.to_string()).unwrap_or_default(),
            peaks.unwrap_or_default(),
            ivs.unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| EngineError::Config(e.to_string()))
}

/// Per-epoch log CSV.
pub fn write_log_csv(out: impl Write, logs: &[EpochLog]) -> Result<(), EngineError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let err = |e: csv::Error| EngineError::Config(e.to_string());
    w.write_record(["epoch", "steps", "lr_scale", "mse", "kl", "sparsity", "ranking", "beta", "total"]).map_err(err)?;
    for l in logs {
        w.write_record([
            l.epoch.to_string(),
            l.steps.to_string(),
            l.lr_scale.to_string(),
            l.loss.mse.to_string(),
            l.loss.kl.map(|k| k.to_string()).unwrap_or_default(),
            l.loss.sparsity.to_string(),
            l.loss.ranking.to_string(),
            l.loss.beta_used.to_string(),
            l.loss.total.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| EngineError::Config(e.to_string()))
}

/// Full training run from a config file's settings: loads (or resumes),
/// trains, writes periodic and final checkpoints plus `train_log.csv`.
pub fn train(cfg: &RunConfig) -> Result<(PathBuf, Vec<EpochLog>), EngineError> {
    cfg.validate()?;
    let corpus = Corpus::load(cfg)?;
    let mut trainer = match &cfg.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            if t.rubric != corpus.rubric {
                return Err(EngineError::Config("resume checkpoint was trained on a different rubric".into()));
            }
            t.set_epochs(cfg.optimizer.epochs);
            t
        }
        None => Trainer::new(cfg.clone(), &corpus)?,
    };
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let every = cfg.checkpoint_every;
    let logs = trainer.run(&corpus.train, |t, log| {
        if every > 0 && log.epoch % every == 0 {
            t.save(&out.join(format!("epoch-{:04}.rack", log.epoch)))?;
        }
        Ok(())
    })?;
    let final_path = out.join("final.rack");
    trainer.save(&final_path)?;
    let log_path = out.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    write_log_csv(file, &logs)?;
    Ok((final_path, logs))
}

/// Load the manifest a checkpoint's config points at and check its rubric.
pub fn corpus_for(predictor: &Predictor) -> Result<Corpus, EngineError> {
    let corpus = Corpus::load(&predictor.config)?;
    predictor.check_rubric(&corpus.rubric)?;
    Ok(corpus)
}
