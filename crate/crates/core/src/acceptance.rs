//! Acceptance harness: every criterion as a scripted, seeded check with its
//! measured value, threshold and wall-clock time.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, GeneratorConfig};
use crate::engine::{Corpus, EngineError, Mode, Predictor, RunConfig, Trainer};
use crate::losses;
use crate::metrics::{self, MetricsReport};
use crate::model::{AttentionMap, FeatureSequence, InputDims, Model, ModelConfig, Sampling, StepDescriptor};
use crate::numerics::{finite_difference_gradient, relative_error_norm, Graph, NumericsError, Tensor, Var};
use crate::rubric::{build_dag, RubricSpec, Stage, StepType};
use crate::stochastic::{self, GaussianEmbedding, NoiseKey};

pub const THRESHOLDS_JSON: &str = include_str!("../fixtures/thresholds.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientCheck {
    pub trials: usize,
    pub primitive_max_rel_err: f64,
    pub end_to_end_max_rel_err: f64,
    pub end_to_end_clips: usize,
    pub end_to_end_d_model: usize,
    pub end_to_end_steps: usize,
    pub max_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedForm {
    pub tolerance: f64,
    pub kl_mc_samples: usize,
    pub kl_mc_rel_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOracles {
    pub vectors: usize,
    pub max_len: usize,
    pub tau_denominator: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagDeterminism {
    pub topologies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overfit {
    pub samples: usize,
    pub epochs: usize,
    pub max_train_mse: f64,
    pub srcc: f64,
    pub max_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRecovery {
    pub n_train: usize,
    pub n_test: usize,
    pub clips: usize,
    pub d_feat: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub data_seed: u64,
    pub run_seeds: Vec<u64>,
    pub min_srcc: f64,
    pub min_tau: f64,
    pub max_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeterministicTradeoff {
    pub max_rl2_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceAveraging {
    pub keys: usize,
    pub samples: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Localization {
    pub gamma: f64,
    pub min_margin_over_chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reproducibility {
    pub epochs: usize,
    pub resume_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub gradient_check: GradientCheck,
    pub closed_form: ClosedForm,
    pub metric_oracles: MetricOracles,
    pub dag_determinism: DagDeterminism,
    pub overfit: Overfit,
    pub synthetic_recovery: SyntheticRecovery,
    pub deterministic_tradeoff: DeterministicTradeoff,
    pub inference_averaging: InferenceAveraging,
    pub localization: Localization,
    pub reproducibility: Reproducibility,
}

impl Thresholds {
    pub fn builtin() -> Self {
        serde_json::from_str(THRESHOLDS_JSON).expect("threshold fixture parses")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Oracles and invariants.
    Fast,
    /// Adds the synthetic-training criteria.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub measured: f64,
    pub threshold: String,
    pub pass: bool,
    pub seconds: f64,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {}: measured {} (threshold {}) in {:.1}s; {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            fmt_value(self.measured),
            self.threshold,
            self.seconds,
            self.detail
        )
    }
}

fn fmt_value(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub suite: Suite,
    pub criteria: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }
}

/// What a criterion body reports back.
pub struct Outcome {
    pub measured: f64,
    pub pass: bool,
    pub detail: String,
}

fn outcome(measured: f64, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { measured, pass, detail: detail.into() }
}

type Body<'a> = Box<dyn FnOnce() -> Result<Outcome, String> + 'a>;

/// Run a criterion body, turning errors and panics into failures.
fn run_criterion(id: u32, name: &str, threshold: String, max_seconds: Option<f64>, body: Body<'_>) -> CriterionResult {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let seconds = start.elapsed().as_secs_f64();
    let (measured, mut pass, mut detail) = match result {
        Ok(Ok(o)) => (o.measured, o.pass, o.detail),
        Ok(Err(e)) => (f64::NAN, false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            (f64::NAN, false, format!("panicked: {msg}"))
        }
    };
    if let Some(limit) = max_seconds {
        if seconds > limit {
            pass = false;
            detail = format!("{detail}; runtime {seconds:.1}s exceeds {limit}s");
        }
    }
    CriterionResult { id, name: name.to_string(), measured, threshold, pass, seconds, detail }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from the kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>;

/// Worst norm-wise relative error between autodiff and central differences
/// of `Σ w ∘ op(inputs)` with random weights `w`.
fn check_primitive(rng: &mut ChaCha8Rng, inputs: &[Tensor], build: &Build) -> Result<f64, String> {
    let forward = |xs: &[Tensor], w: Option<&Tensor>| -> Result<(Graph<f64>, Vec<Var>, Var, Tensor), NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = match w {
            Some(w) => w.clone(),
            None => Tensor::new(g.shape(out).to_vec(), (0..g.value(out).numel()).map(|i| 0.5 + (i % 7) as f64 * 0.25).collect())?,
        };
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod)?;
        Ok((g, vars, loss, w))
    };
    let (_, _, _, w0) = forward(inputs, None).map_err(err)?;
    let w = {
        let data = w0.data().iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(w0.shape().to_vec(), data).map_err(err)?
    };
    let (g, vars, loss, _) = forward(inputs, Some(&w)).map_err(err)?;
    let grads = g.backward(loss).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let auto = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let fd = finite_difference_gradient(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                let (g, _, loss, _) = forward(&xs, Some(&w)).expect("perturbed forward");
                g.value(loss).item()
            },
            &inputs[i],
            1e-6,
        );
        worst = worst.max(relative_error_norm(&auto, &fd, 1e-8));
    }
    Ok(worst)
}

/// Every differentiable primitive, with input generators that keep away from kinks.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Box<Build>)> {
    let (r, c, m) = (rng.gen_range(1..=4), rng.gen_range(2..=4), rng.gen_range(1..=4));
    let mut u = |shape: &[usize]| random_tensor(rng, shape, -1.0, 1.0);
    let a = u(&[r, c]);
    let b = u(&[r, c]);
    let mm = u(&[c, m]);
    let row = u(&[1, c]);
    let other_rows = u(&[m, c]);
    let other_cols = u(&[r, m]);
    let scale = rng.gen_range(-2.0..2.0);
    let shift = rng.gen_range(-2.0..2.0);
    let positive = random_tensor(rng, &[r, c], 0.5, 2.0);
    let kinked = away_from_zero(rng, &[r, c]);
    let clampable = {
        let data = (0..r * c)
            .map(|_| loop {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if (v.abs() - 0.5).abs() > 0.05 {
                    break v;
                }
            })
            .collect();
        Tensor::new(vec![r, c], data).unwrap()
    };
    let (r0, r1) = { let s = rng.gen_range(0..r); (s, rng.gen_range(s + 1..=r)) };
    let (c0, c1) = { let s = rng.gen_range(0..c); (s, rng.gen_range(s + 1..=c)) };

    vec![
        ("matmul", vec![a.clone(), mm], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mul(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add_row(v[0], v[1]))),
        ("mul_row", vec![a.clone(), row], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mul_row(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.scale(v[0], scale))),
        ("offset", vec![a.clone()], Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.offset(v[0], shift))),
        ("neg", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.neg(v[0]))),
        ("sum", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mean(v[0]))),
        ("mean_rows", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mean_rows(v[0]))),
        ("exp", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.exp(v[0]))),
        ("log", vec![positive], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.log(v[0]))),
        ("square", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.square(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.gelu(v[0]))),
        ("relu", vec![kinked.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.relu(v[0]))),
        ("abs", vec![kinked], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.abs(v[0]))),
        ("clamp", vec![clampable], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.clamp(v[0], -0.5, 0.5))),
        ("softmax_rows", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.softmax_rows(v[0]))),
        ("layer_norm_rows", vec![a.clone()], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.layer_norm_rows(v[0], 1e-5))),
        ("concat_rows", vec![a.clone(), other_rows], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![a.clone(), other_cols], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![a.clone()], Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.slice_rows(v[0], r0, r1))),
        ("slice_cols", vec![a.clone()], Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.slice_cols(v[0], c0, c1))),
        ("transpose", vec![a], Box::new(|g: &mut Graph<f64>, v: &[Var]| g.transpose(v[0]))),
    ]
}

/// Small fixture for end-to-end checks: a model, one video, its steps and DAG.
pub struct TinyCase {
    pub model: Model<f64>,
    pub video: FeatureSequence,
    pub steps: Vec<StepDescriptor>,
    pub dag: crate::rubric::RubricDag,
}

pub fn tiny_case(seed: u64, clips: usize, d_model: usize, k: usize) -> TinyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_feat, d_text) = (6, 5);
    let config = ModelConfig { d_model, heads: 2, ..ModelConfig::default() };
    let model = Model::<f64>::new(config, InputDims { d_feat, d_text, max_len: clips }, seed).unwrap();
    let values = (0..clips * d_feat).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v as f32).collect();
    let video = FeatureSequence::new("tiny", clips, d_feat, values).unwrap();
    let steps = (0..k)
        .map(|i| StepDescriptor {
            step_type: i as u32,
            descriptor: (0..d_text).map(|_| StandardNormal.sample(&mut rng)).collect(),
        })
        .collect();
    let spec = RubricSpec {
        step_types: (0..k as u32).map(|id| StepType { id, name: format!("s{id}") }).collect(),
        stages: (0..k as u32).map(|id| Stage { id, members: vec![id] }).collect(),
        difficulty_multiplier: false,
        ordered: true,
    };
    let dag = build_dag(&spec, &(0..k as u32).collect::<Vec<_>>()).unwrap();
    TinyCase { model, video, steps, dag }
}

/// Norm-wise relative error of the deterministic score gradient over a random
/// subset of parameter coordinates.
pub fn end_to_end_gradient_error(case: &mut TinyCase, coords: usize, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let grads = {
        let mut s = case.model.session(true);
        let e = case.model.embed(&mut s, &case.video, &case.steps).map_err(err)?;
        let root = case.model.propagate_scores(&mut s, &case.dag, e.mu).map_err(err)?;
        let y = case.model.decode_score(&mut s, root).map_err(err)?;
        let y = s.graph.sum(y).map_err(err)?;
        let g = s.graph.backward(y).map_err(err)?;
        s.param_grads(g)
    };
    let sizes: Vec<usize> = case.model.params().entries().iter().map(|e| e.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut auto = Vec::with_capacity(coords);
    let mut fd = Vec::with_capacity(coords);
    let eps = 1e-5;
    for flat in rand::seq::index::sample(rng, total, coords.min(total)) {
        let (mut p, mut off) = (0, flat);
        while off >= sizes[p] {
            off -= sizes[p];
            p += 1;
        }
        auto.push(grads[p].as_ref().map_or(0.0, |g| g.data()[off]));
        let mut score_at = |delta: f64| -> Result<f64, String> {
            let t = case.model.params_mut().tensors_mut().nth(p).expect("param index");
            let orig = t.data()[off];
            t.data_mut()[off] = orig + delta;
            let out = case.model.forward(&case.video, &case.steps, &case.dag, Sampling::Deterministic, NoiseKey(0));
            case.model.params_mut().tensors_mut().nth(p).expect("param index").data_mut()[off] = orig;
            Ok(out.map_err(err)?.score)
        };
        fd.push((score_at(eps)? - score_at(-eps)?) / (2.0 * eps));
    }
    let n = auto.len();
    Ok(relative_error_norm(&Tensor::new(vec![n], auto).map_err(err)?, &Tensor::new(vec![n], fd).map_err(err)?, 1e-8))
}

fn criterion_gradients(t: &GradientCheck) -> Result<Outcome, String> {
    let mut worst_primitive: (f64, &str) = (0.0, "");
    let mut worst_e2e: f64 = 0.0;
    for trial in 0..t.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
        for (name, inputs, build) in primitive_cases(&mut rng) {
            let e = check_primitive(&mut rng, &inputs, build.as_ref())?;
            if e > worst_primitive.0 || !e.is_finite() {
                worst_primitive = (e, name);
            }
        }
        let mut case = tiny_case(trial as u64, t.end_to_end_clips, t.end_to_end_d_model, t.end_to_end_steps);
        worst_e2e = worst_e2e.max(end_to_end_gradient_error(&mut case, 64, &mut rng)?);
    }
    let pass = worst_primitive.0 < t.primitive_max_rel_err && worst_e2e < t.end_to_end_max_rel_err;
    Ok(outcome(
        worst_e2e.max(worst_primitive.0),
        pass,
        format!(
            "worst primitive {:.2e} ({}), worst end-to-end {:.2e}, {} trials",
            worst_primitive.0, worst_primitive.1, worst_e2e, t.trials
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn amap(rows: &[&[f64]]) -> AttentionMap {
    AttentionMap { k: rows.len(), t: rows[0].len(), values: rows.concat() }
}

/// Monte-Carlo `E_q[log q(z) − log p(z)]`.
pub fn kl_monte_carlo(g: &GaussianEmbedding, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for (m, s) in g.mu.iter().zip(&g.sigma) {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = m + s * e;
            // log q − log p; the 2π terms cancel
            log_ratio += -0.5 * e * e - s.ln() + 0.5 * z * z;
        }
        total += log_ratio;
    }
    total / samples as f64
}

fn criterion_closed_form(t: &ClosedForm) -> Result<Outcome, String> {
    let e = std::f64::consts::E;
    let g = |mu: Vec<f64>, sigma: Vec<f64>| GaussianEmbedding::new(mu, sigma).unwrap();
    let mut one_hot5 = vec![0.0; 8];
    one_hot5[4] = 1.0;
    let cases: Vec<(&str, f64, f64)> = vec![
        ("kl prior", stochastic::kl_standard_normal(&g(vec![0.0; 5], vec![1.0; 5])).map_err(err)?, 0.0),
        ("kl shifted mean", stochastic::kl_standard_normal(&g(vec![1.0], vec![1.0])).map_err(err)?, 0.5),
        ("kl wide", stochastic::kl_standard_normal(&g(vec![0.0], vec![e.sqrt()])).map_err(err)?, (e - 2.0) / 2.0),
        ("uncertainty equal sigmas", stochastic::uncertainty(&[vec![0.5, 0.5]]).map_err(err)?, 0.5),
        ("uncertainty harmonic", stochastic::uncertainty(&[vec![1.0, 0.5]]).map_err(err)?, 2.0 / 3.0),
        ("uncertainty two steps", stochastic::uncertainty(&[vec![0.5; 4], vec![0.5; 4]]).map_err(err)?, 1.0),
        ("center one-hot", losses::attention_centers(&amap(&[&one_hot5]))[0], 5.0),
        ("center uniform", losses::attention_centers(&amap(&[&[0.25; 4]]))[0], 2.5),
        ("center split", losses::attention_centers(&amap(&[&[0.5, 0.0, 0.5]]))[0], 2.0),
        ("sparsity one-hot", losses::sparsity_loss(&amap(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]])), 0.0),
        ("sparsity uniform", losses::sparsity_loss(&amap(&[&[0.5, 0.5]])), 0.5),
        ("ranking ordered", losses::ranking_loss(&[2.0, 5.0, 8.0], 10, 1.0).map_err(err)?, 0.0),
        ("ranking swapped", losses::ranking_loss(&[5.0, 2.0], 10, 1.0).map_err(err)?, 4.0),
        ("ranking single", losses::ranking_loss(&[5.0], 10, 1.0).map_err(err)?, 0.0),
        ("mse equal", losses::mse_loss(&[0.3, 0.7], &[0.3, 0.7], 1.0).map_err(err)?, 0.0),
        ("mse single", losses::mse_loss(&[3.0], &[1.0], 1.0).map_err(err)?, 4.0),
        ("mse sigma 2", losses::mse_loss(&[1.0, 3.0], &[0.0, 0.0], 2.0).map_err(err)?, 1.25),
    ];
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (name, got, want) in &cases {
        let d = (got - want).abs();
        worst = worst.max(d);
        if !(d <= t.tolerance) {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    }
    let q = g(vec![0.3, -0.8, 1.2, 0.0], vec![0.5, 1.5, 0.9, 2.0]);
    let exact = stochastic::kl_standard_normal(&q).map_err(err)?;
    let mc = kl_monte_carlo(&q, t.kl_mc_samples, 11);
    let mc_rel = (mc - exact).abs() / exact;
    if !(mc_rel < t.kl_mc_rel_tol) {
        failures.push(format!("Monte-Carlo KL {mc} vs {exact}"));
    }
    Ok(outcome(
        worst,
        failures.is_empty(),
        format!(
            "{} closed-form cases, Monte-Carlo KL off by {:.2}%{}",
            cases.len(),
            100.0 * mc_rel,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 3

/// Average ranks by pair counting.
pub fn brute_force_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let below = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Spearman correlation from pair-counted ranks, Pearson written out directly.
pub fn brute_force_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (brute_force_ranks(x), brute_force_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Concordant minus discordant pairs, counted over all pairs.
pub fn brute_force_kendall_numerator(x: &[f64], y: &[f64]) -> i64 {
    let sign = |v: f64| (v > 0.0) as i64 - (v < 0.0) as i64;
    let mut s = 0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            s += sign(x[i] - x[j]) * sign(y[i] - y[j]);
        }
    }
    s
}

fn criterion_metric_oracles(t: &MetricOracles) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_srcc, mut kendall_mismatches, mut undefined) = (0.0f64, 0usize, 0usize);
    for v in 0..t.vectors {
        let n = rng.gen_range(2..=t.max_len);
        // alternate coarse integer grids (many ties) with continuous values
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if v % 2 == 0 { rng.gen_range(0..6) as f64 } else { rng.gen::<f64>() }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        match (metrics::spearman_srcc(&x, &y), brute_force_spearman(&x, &y)) {
            (Ok(a), Some(b)) => worst_srcc = worst_srcc.max((a - b).abs()),
            (Err(metrics::MetricsError::Undefined(_)), None) => undefined += 1,
            (a, b) => return Err(format!("spearman disagreement on vector {v}: {a:?} vs {b:?}")),
        }
        if metrics::kendall_numerator(&x, &y) != brute_force_kendall_numerator(&x, &y) {
            kendall_mismatches += 1;
        }
    }
    let mut off_grid = 0usize;
    let denom = t.tau_denominator as f64;
    for _ in 0..t.vectors {
        let bins: Vec<f64> = (0..metrics::CALIBRATION_BINS).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let tau = metrics::kendall_tau(&bins).map_err(err)?;
        if (tau * denom - (tau * denom).round()).abs() > 1e-9 {
            off_grid += 1;
        }
    }
    let pass = worst_srcc <= 1e-12 && kendall_mismatches == 0 && off_grid == 0;
    Ok(outcome(
        worst_srcc,
        pass,
        format!(
            "{} vectors ({} constant); Kendall mismatches {}; τ values off the 1/{} grid {}",
            t.vectors, undefined, kendall_mismatches, t.tau_denominator, off_grid
        ),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_dag_determinism(t: &DagDeterminism) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 8;
    let model = Model::<f64>::new(
        ModelConfig { d_model: d, heads: 2, ..ModelConfig::default() },
        InputDims { d_feat: 4, d_text: 4, max_len: 4 },
        44,
    )
    .map_err(err)?;
    let mut shapes = std::collections::BTreeSet::new();
    let mut mismatches = 0usize;
    for _ in 0..t.topologies {
        let catalog = rng.gen_range(1..=8u32);
        let n_stages = rng.gen_range(0..=catalog);
        let mut stages: Vec<Stage> = (0..n_stages).map(|id| Stage { id: 100 + id, members: vec![] }).collect();
        for ty in 0..catalog {
            // roughly one type in four sits directly under the root
            if n_stages > 0 && rng.gen_range(0..4) > 0 {
                let s = rng.gen_range(0..n_stages) as usize;
                stages[s].members.push(ty);
            }
        }
        stages.retain(|s| !s.members.is_empty());
        let spec = RubricSpec {
            step_types: (0..catalog).map(|id| StepType { id, name: format!("t{id}") }).collect(),
            stages,
            difficulty_multiplier: false,
            ordered: rng.gen(),
        };
        spec.validate().map_err(err)?;
        let k = rng.gen_range(1..=6);
        let steps: Vec<u32> = (0..k).map(|_| rng.gen_range(0..catalog)).collect();
        let dag = build_dag(&spec, &steps).map_err(err)?;
        dag.validate().map_err(|v| format!("invalid DAG: {v:?}"))?;
        shapes.insert((dag.node_count(), dag.edge_count()));

        let leaves: Vec<f64> = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let run = || -> Result<Vec<u64>, String> {
            let mut s = model.session(false);
            let z = s.graph.constant(Tensor::new(vec![k, d], leaves.clone()).map_err(err)?);
            let root = model.propagate_scores(&mut s, &dag, z).map_err(err)?;
            let y = model.decode_score(&mut s, root).map_err(err)?;
            let mut bits: Vec<u64> = s.graph.value(root).data().iter().map(|v| v.to_bits()).collect();
            bits.push(s.graph.value(y).item().to_bits());
            Ok(bits)
        };
        let first = run()?;
        for _ in 0..3 {
            if run()? != first {
                mismatches += 1;
            }
        }
    }
    Ok(outcome(
        mismatches as f64,
        mismatches == 0,
        format!("{} topologies ({} distinct node/edge counts), 4 evaluations each", t.topologies, shapes.len()),
    ))
}

// ---------------------------------------------------------------- training criteria

/// Run configuration shared by the training criteria: defaults, in-memory data.
pub fn default_run(mode: Mode, seed: u64) -> RunConfig {
    RunConfig { mode, seed, ..RunConfig::default() }
}

pub fn train_in_memory(cfg: &RunConfig, corpus: &Corpus) -> Result<Trainer, EngineError> {
    let mut trainer = Trainer::new(cfg.clone(), corpus)?;
    trainer.run(&corpus.train, |_, _| Ok(()))?;
    Ok(trainer)
}

fn criterion_overfit(t: &Overfit) -> Result<Outcome, String> {
    let gen = GeneratorConfig { n_train: t.samples, n_test: 0, seed: 5, ..GeneratorConfig::default() };
    let ds = data::generate(&gen).map_err(err)?;
    let mut cfg = default_run(Mode::Deterministic, 0);
    cfg.optimizer.epochs = t.epochs;
    let corpus = Corpus::from_generated(&ds, cfg.d_text).map_err(err)?;
    let trainer = train_in_memory(&cfg, &corpus).map_err(err)?;
    let (report, records) = trainer.predictor().evaluate(&corpus.train).map_err(err)?;
    let mse = records.iter().map(|r| (r.predicted - r.truth).powi(2)).sum::<f64>() / records.len() as f64;
    Ok(outcome(
        mse,
        mse < t.max_train_mse && report.srcc >= t.srcc,
        format!("train MSE {mse:.2e}, SRCC {:.4} after {} epochs", report.srcc, t.epochs),
    ))
}

/// Models and reports from the synthetic-recovery runs, shared by later criteria.
pub struct RecoveryRuns {
    pub corpus: Corpus,
    pub stochastic: Vec<(Predictor, MetricsReport)>,
    pub deterministic: Vec<(Predictor, MetricsReport)>,
    /// Slowest single training run; the time limit applies per run.
    pub seconds: f64,
}

pub fn recovery_generator(t: &SyntheticRecovery) -> GeneratorConfig {
    GeneratorConfig {
        n_train: t.n_train,
        n_test: t.n_test,
        t: t.clips,
        d_feat: t.d_feat,
        k_min: t.k_min,
        k_max: t.k_max,
        eta_min: t.eta_min,
        eta_max: t.eta_max,
        seed: t.data_seed,
        ..GeneratorConfig::default()
    }
}

fn recovery_runs(t: &SyntheticRecovery, log: &mut dyn FnMut(&str)) -> Result<RecoveryRuns, String> {
    let ds = data::generate(&recovery_generator(t)).map_err(err)?;
    let corpus = Corpus::from_generated(&ds, RunConfig::default().d_text).map_err(err)?;
    let mut stochastic = Vec::new();
    let mut slowest: f64 = 0.0;
    for &seed in &t.run_seeds {
        let start = Instant::now();
        let trainer = train_in_memory(&default_run(Mode::Stochastic, seed), &corpus).map_err(err)?;
        let p = trainer.predictor();
        let (report, _) = p.evaluate(&corpus.test).map_err(err)?;
        log(&format!(
            "stochastic seed {seed}: SRCC {:.4}, Rl2 {:.4}, tau {:?}, pointing {:?} ({:.0}s)",
            report.srcc,
            report.r_l2,
            report.kendall_tau,
            report.pointing_accuracy,
            start.elapsed().as_secs_f64()
        ));
        slowest = slowest.max(start.elapsed().as_secs_f64());
        stochastic.push((p, report));
    }
    Ok(RecoveryRuns { corpus, stochastic, deterministic: Vec::new(), seconds: slowest })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn criterion_recovery(t: &SyntheticRecovery, runs: &RecoveryRuns) -> Result<Outcome, String> {
    let srcc = median(runs.stochastic.iter().map(|(_, r)| r.srcc).collect());
    let taus: Vec<f64> = runs
        .stochastic
        .iter()
        .map(|(_, r)| r.kendall_tau.ok_or("stochastic run produced no calibration"))
        .collect::<Result<_, _>>()?;
    let tau = median(taus.clone());
    let pass = srcc >= t.min_srcc && tau >= t.min_tau && runs.seconds <= t.max_seconds;
    Ok(outcome(
        srcc,
        pass,
        format!(
            "median test SRCC {srcc:.4} (runs {:?}), median τ {tau:.4} (runs {:?}), slowest run {:.0}s",
            runs.stochastic.iter().map(|(_, r)| (r.srcc * 1e4).round() / 1e4).collect::<Vec<_>>(),
            taus.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            runs.seconds
        ),
    ))
}

fn criterion_tradeoff(t: &DeterministicTradeoff, runs: &mut RecoveryRuns, seeds: &[u64]) -> Result<Outcome, String> {
    // same seeds and the same median as the stochastic side
    let mut contract = runs.stochastic.iter().all(|(_, r)| r.kendall_tau.is_some());
    for &seed in seeds {
        let trainer = train_in_memory(&default_run(Mode::Deterministic, seed), &runs.corpus).map_err(err)?;
        let p = trainer.predictor();
        let (report, _) = p.evaluate(&runs.corpus.test).map_err(err)?;
        contract &= report.kendall_tau.is_none()
            && matches!(p.calibration(&runs.corpus.test), Err(EngineError::UnsupportedMode(_)));
        runs.deterministic.push((p, report));
    }
    let det_rl2: Vec<f64> = runs.deterministic.iter().map(|(_, r)| r.r_l2).collect();
    let det = median(det_rl2.clone());
    let stoch_rl2 = median(runs.stochastic.iter().map(|(_, r)| r.r_l2).collect());
    let ratio = det / stoch_rl2;
    Ok(outcome(
        ratio,
        ratio <= t.max_rl2_ratio && contract,
        format!(
            "median deterministic Rl2 {det:.4} {:.4?} vs median stochastic {stoch_rl2:.4}; mode contract {}",
            det_rl2,
            if contract { "holds" } else { "violated" }
        ),
    ))
}

/// Standard deviation across keys of the averaged score for `n` draws.
pub fn score_spread(p: &Predictor, sample: &crate::engine::Prepared, keys: usize, n: usize) -> Result<f64, String> {
    let scores: Vec<f64> = (0..keys)
        .map(|k| p.predict(sample, Sampling::Stochastic(n), NoiseKey(0xa11 + k as u64)).map(|o| o.score).map_err(err))
        .collect::<Result<_, _>>()?;
    let m = scores.iter().sum::<f64>() / keys as f64;
    Ok((scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (keys - 1) as f64).sqrt())
}

fn criterion_averaging(t: &InferenceAveraging, runs: &RecoveryRuns) -> Result<Outcome, String> {
    let (p, _) = runs.stochastic.first().ok_or("no stochastic model")?;
    let sample = runs.corpus.test.first().ok_or("empty test split")?;
    let single = score_spread(p, sample, t.keys, 1)?;
    let averaged = score_spread(p, sample, t.keys, t.samples)?;
    let ratio = single / averaged;
    Ok(outcome(
        ratio,
        ratio >= t.min_ratio && ratio <= t.max_ratio,
        format!(
            "score stddev {single:.3e} at n=1, {averaged:.3e} at n={} over {} keys (√{} = {:.3})",
            t.samples,
            t.keys,
            t.samples,
            (t.samples as f64).sqrt()
        ),
    ))
}

fn criterion_localization(t: &Localization, runs: &RecoveryRuns) -> Result<Outcome, String> {
    if runs.stochastic.iter().any(|(p, _)| p.config.loss.gamma != t.gamma) {
        return Err("recovery runs did not use the required γ".into());
    }
    let acc = median(runs.stochastic.iter().map(|(_, r)| r.pointing_accuracy.unwrap_or(f64::NAN)).collect());
    let chance = runs.stochastic[0].1.pointing_chance.ok_or("no chance level")?;
    let margin = acc - chance;
    Ok(outcome(
        margin,
        margin >= t.min_margin_over_chance,
        format!("median pointing accuracy {:.1}% vs chance {:.1}%", 100.0 * acc, 100.0 * chance),
    ))
}

fn criterion_reproducibility(t: &Reproducibility) -> Result<Outcome, String> {
    let gen = GeneratorConfig { n_train: 24, n_test: 4, t: 10, d_feat: 12, seed: 10, ..GeneratorConfig::default() };
    let ds = data::generate(&gen).map_err(err)?;
    let mut cfg = default_run(Mode::Stochastic, 3);
    cfg.model.d_model = 16;
    cfg.optimizer.epochs = t.epochs;
    let corpus = Corpus::from_generated(&ds, cfg.d_text).map_err(err)?;

    let a = train_in_memory(&cfg, &corpus).map_err(err)?.checkpoint_bytes();
    let b = train_in_memory(&cfg, &corpus).map_err(err)?.checkpoint_bytes();

    let mut first = Trainer::new(cfg.clone(), &corpus).map_err(err)?;
    for _ in 0..t.resume_after {
        first.train_epoch(&corpus.train).map_err(err)?;
    }
    let saved = first.checkpoint_bytes();
    let mut resumed = Trainer::from_checkpoint_bytes(&saved, std::path::Path::new("<memory>")).map_err(err)?;
    let round_trip = resumed.checkpoint_bytes() == saved;
    resumed.run(&corpus.train, |_, _| Ok(())).map_err(err)?;
    let resumed_bytes = resumed.checkpoint_bytes();

    let identical = a == b;
    let resume_exact = resumed_bytes == a;
    let checks = [identical, round_trip, resume_exact];
    Ok(outcome(
        checks.iter().filter(|c| !**c).count() as f64,
        checks.iter().all(|c| *c),
        format!(
            "repeat run identical: {identical}; save/load/save identical: {round_trip}; resume after epoch {} matches: {resume_exact} ({} bytes)",
            t.resume_after,
            a.len()
        ),
    ))
}

/// Run a suite, reporting each criterion through `on_result` as it finishes.
pub fn run_acceptance(
    suite: Suite,
    thresholds: &Thresholds,
    mut on_result: impl FnMut(&CriterionResult),
    mut log: impl FnMut(&str),
) -> AcceptanceReport {
    let th = thresholds;
    let mut results = Vec::new();
    let mut push = |r: CriterionResult, results: &mut Vec<CriterionResult>| {
        on_result(&r);
        results.push(r);
    };
    let g = &th.gradient_check;
    push(
        run_criterion(
            1,
            "gradient correctness",
            format!("primitives < {:e}, end-to-end < {:e}", g.primitive_max_rel_err, g.end_to_end_max_rel_err),
            Some(g.max_seconds),
            Box::new(|| criterion_gradients(g)),
        ),
        &mut results,
    );
    let c = &th.closed_form;
    push(
        run_criterion(
            2,
            "closed-form oracles",
            format!("|error| <= {:e}, Monte-Carlo KL within {}%", c.tolerance, 100.0 * c.kl_mc_rel_tol),
            None,
            Box::new(|| criterion_closed_form(c)),
        ),
        &mut results,
    );
    let m = &th.metric_oracles;
    push(
        run_criterion(
            3,
            "metric oracles",
            "SRCC |error| <= 1e-12, Kendall exact, τ on the 1/45 grid".into(),
            None,
            Box::new(|| criterion_metric_oracles(m)),
        ),
        &mut results,
    );
    let d = &th.dag_determinism;
    push(
        run_criterion(4, "DAG determinism", "0 mismatches".into(), None, Box::new(|| criterion_dag_determinism(d))),
        &mut results,
    );

    if suite == Suite::Full {
        let o = &th.overfit;
        push(
            run_criterion(
                5,
                "overfit sanity",
                format!("train MSE < {:e} and SRCC = {}", o.max_train_mse, o.srcc),
                Some(o.max_seconds),
                Box::new(|| criterion_overfit(o)),
            ),
            &mut results,
        );

        let r = &th.synthetic_recovery;
        let runs = catch_unwind(AssertUnwindSafe(|| recovery_runs(r, &mut log)))
            .unwrap_or_else(|_| Err("recovery training panicked".into()));
        let mut runs = match runs {
            Ok(runs) => Some(runs),
            Err(e) => {
                log(&format!("recovery runs failed: {e}"));
                None
            }
        };
        let missing = || -> Result<Outcome, String> { Err("recovery runs unavailable".into()) };
        push(
            run_criterion(
                6,
                "synthetic recovery",
                format!("median SRCC >= {}, median τ >= {}, <= {}s per run", r.min_srcc, r.min_tau, r.max_seconds),
                None,
                match &runs {
                    Some(runs) => Box::new(move || criterion_recovery(r, runs)),
                    None => Box::new(missing),
                },
            ),
            &mut results,
        );
        let tr = &th.deterministic_tradeoff;
        push(
            run_criterion(
                7,
                "deterministic vs stochastic",
                format!("Rl2 ratio <= {} and only stochastic emits calibration", tr.max_rl2_ratio),
                None,
                match runs.as_mut() {
                    Some(runs) => Box::new(move || criterion_tradeoff(tr, runs, &r.run_seeds)),
                    None => Box::new(missing),
                },
            ),
            &mut results,
        );
        let a = &th.inference_averaging;
        push(
            run_criterion(
                8,
                "inference averaging",
                format!("stddev ratio in [{}, {}]", a.min_ratio, a.max_ratio),
                None,
                match &runs {
                    Some(runs) => Box::new(move || criterion_averaging(a, runs)),
                    None => Box::new(missing),
                },
            ),
            &mut results,
        );
        let l = &th.localization;
        push(
            run_criterion(
                9,
                "auxiliary-loss localization",
                format!("accuracy − chance >= {}", l.min_margin_over_chance),
                None,
                match &runs {
                    Some(runs) => Box::new(move || criterion_localization(l, runs)),
                    None => Box::new(missing),
                },
            ),
            &mut results,
        );
    }

    let rp = &th.reproducibility;
    push(
        run_criterion(
            10,
            "reproducibility",
            "identical bytes on repeat, round trip and resume".into(),
            None,
            Box::new(|| criterion_reproducibility(rp)),
        ),
        &mut results,
    );
    AcceptanceReport { suite, criteria: results }
}
