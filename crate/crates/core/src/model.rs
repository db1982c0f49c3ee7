//! Embedding function (video self-attention, step MLP, stacked cross-attention,
//! Gaussian heads) and DAG scoring function (leaf sampling, per-kind aggregator
//! MLPs, score decoder).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::numerics::{gelu, NumericsError, ParamGroup, ParamId, ParamStore, Real, Session, Tensor, Var};
use crate::rubric::{NodeKind, RubricDag};
use crate::stochastic::{self, GaussianEmbedding, NoiseKey};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// How a non-leaf node combines its predecessors before its aggregator MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent width D.
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub self_attn_blocks: usize,
    pub cross_attn_blocks: usize,
    pub position_encoding: bool,
    pub aggregation: Aggregation,
    /// Initial bias of the log-variance head.
    pub logvar_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            ffn_mult: 2,
            self_attn_blocks: 1,
            cross_attn_blocks: 1,
            position_encoding: true,
            aggregation: Aggregation::Sum,
            logvar_init: -4.0,
        }
    }
}

/// Input widths fixed by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub d_feat: usize,
    pub d_text: usize,
    /// Longest supported clip sequence (size of the position table).
    pub max_len: usize,
}

/// Pooled clip features of one video, T rows of `d_feat` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub t: usize,
    pub d_feat: usize,
    pub values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, t: usize, d_feat: usize, values: Vec<f32>) -> Result<Self, ModelError> {
        if t == 0 || values.len() != t * d_feat {
            return Err(ModelError::Dimension(format!("{} values for {t}×{d_feat} features", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Contract("non-finite feature value".into()));
        }
        Ok(FeatureSequence { id: id.into(), t, d_feat, values })
    }

    pub fn tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(vec![self.t, self.d_feat], self.values.iter().map(|&v| F::from_f64(v as f64)).collect())
            .expect("validated at construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDescriptor {
    pub step_type: u32,
    pub descriptor: Vec<f64>,
}

/// Row-stochastic K×T attention of step queries over clips.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub k: usize,
    pub t: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.t..(s + 1) * self.t]
    }

    /// 1-indexed clip with the highest weight for step `s` (first on ties).
    pub fn peak(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn peaks(&self) -> Vec<usize> {
        (0..self.k).map(|s| self.peak(s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorePrediction {
    pub score: f64,
    /// Present only for stochastic inference.
    pub uncertainty: Option<f64>,
    pub attention: AttentionMap,
    pub per_step: Vec<GaussianEmbedding>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Stochastic(usize),
    Deterministic,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    norm_q: Norm,
    norm_kv: Option<Norm>,
    attn: Attention,
    norm_ff: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    video_in: Linear,
    pos: Option<ParamId>,
    video_blocks: Vec<Block>,
    video_norm: Norm,
    step_mlp: Mlp,
    step_norm: Norm,
    cross_blocks: Vec<Block>,
    cross_norm: Norm,
    mu_head: Linear,
    logvar_head: Linear,
    agg_intermediate: Mlp,
    agg_root: Mlp,
    decoder: Mlp,
}

struct Init<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Init<'_, F> {
    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| F::from_f64(self.rng.gen_range(-a..a))).collect();
        Linear {
            w: self.store.insert(&format!("{name}.w"), group, Tensor::new(vec![fan_in, fan_out], w).unwrap()),
            b: self.store.insert(&format!("{name}.b"), group, Tensor::zeros(&[1, fan_out])),
        }
    }

    fn norm(&mut self, name: &str, group: ParamGroup, d: usize) -> Norm {
        Norm {
            g: self.store.insert(&format!("{name}.g"), group, Tensor::full(&[1, d], F::one())),
            b: self.store.insert(&format!("{name}.b"), group, Tensor::zeros(&[1, d])),
        }
    }

    fn block(&mut self, name: &str, group: ParamGroup, d: usize, hidden: usize, cross: bool) -> Block {
        Block {
            norm_q: self.norm(&format!("{name}.norm_q"), group, d),
            norm_kv: cross.then(|| self.norm(&format!("{name}.norm_kv"), group, d)),
            attn: Attention {
                q: self.linear(&format!("{name}.attn.q"), group, d, d),
                k: self.linear(&format!("{name}.attn.k"), group, d, d),
                v: self.linear(&format!("{name}.attn.v"), group, d, d),
                o: self.linear(&format!("{name}.attn.o"), group, d, d),
            },
            norm_ff: self.norm(&format!("{name}.norm_ff"), group, d),
            ff1: self.linear(&format!("{name}.ff1"), group, d, hidden),
            ff2: self.linear(&format!("{name}.ff2"), group, hidden, d),
        }
    }

    fn mlp(&mut self, name: &str, group: ParamGroup, d_in: usize, hidden: usize, d_out: usize) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.0"), group, d_in, hidden),
            l2: self.linear(&format!("{name}.1"), group, hidden, d_out),
        }
    }
}

/// Embedding-function outputs for one video.
pub struct Embedded {
    /// K×D means.
    pub mu: Var,
    /// K×D clamped log-variances.
    pub logvar: Var,
    /// K×D standard deviations.
    pub sigma: Var,
    /// K×T head-averaged attention of the last cross-attention block.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Model<F: Real = f64> {
    config: ModelConfig,
    dims: InputDims,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, dims: InputDims, seed: u64) -> Result<Self, ModelError> {
        let d = config.d_model;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(ModelError::Dimension(format!("d_model {d} not divisible by {} heads", config.heads)));
        }
        if config.cross_attn_blocks == 0 {
            return Err(ModelError::Dimension("at least one cross-attention block is required".into()));
        }
        let hidden = d * config.ffn_mult.max(1);
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        use ParamGroup::*;

        let video_in = init.linear("video.in", Encoder, dims.d_feat, d);
        let pos = config.position_encoding.then(|| {
            let normal = Normal::new(0.0, 0.02).unwrap();
            let data = (0..dims.max_len * d).map(|_| F::from_f64(init.rng.sample(normal))).collect();
            init.store.insert("video.pos", Encoder, Tensor::new(vec![dims.max_len, d], data).unwrap())
        });
        let video_blocks = (0..config.self_attn_blocks)
            .map(|i| init.block(&format!("video.block{i}"), Encoder, d, hidden, false))
            .collect();
        let video_norm = init.norm("video.norm", Encoder, d);
        let step_mlp = init.mlp("steps.mlp", Transformer, dims.d_text, d, d);
        let step_norm = init.norm("steps.norm", Transformer, d);
        let cross_blocks = (0..config.cross_attn_blocks)
            .map(|i| init.block(&format!("cross.block{i}"), Transformer, d, hidden, true))
            .collect();
        let cross_norm = init.norm("cross.norm", Transformer, d);
        let mu_head = init.linear("head.mu", Transformer, d, d);
        let logvar_head = init.linear("head.logvar", Transformer, d, d);
        let agg_intermediate = init.mlp("dag.intermediate", Head, d, d, d);
        let agg_root = init.mlp("dag.root", Head, d, d, d);
        let decoder = init.mlp("dag.decoder", Head, d, d, 1);

        let lv = F::from_f64(config.logvar_init);
        store.get_mut(logvar_head.b).data_mut().iter_mut().for_each(|b| *b = lv);

        Ok(Model {
            config,
            dims,
            params: store,
            layout: Layout {
                video_in,
                pos,
                video_blocks,
                video_norm,
                step_mlp,
                step_norm,
                cross_blocks,
                cross_norm,
                mu_head,
                logvar_head,
                agg_intermediate,
                agg_root,
                decoder,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn session(&self, trainable: bool) -> Session<'_, F> {
        Session::new(&self.params, trainable)
    }

    fn linear(&self, s: &mut Session<F>, l: Linear, x: Var) -> Result<Var, NumericsError> {
        let w = s.param(l.w);
        let b = s.param(l.b);
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row(y, b)
    }

    fn norm(&self, s: &mut Session<F>, n: Norm, x: Var) -> Result<Var, NumericsError> {
        let g = s.param(n.g);
        let b = s.param(n.b);
        let y = s.graph.layer_norm_rows(x, F::from_f64(NORM_EPS))?;
        let y = s.graph.mul_row(y, g)?;
        s.graph.add_row(y, b)
    }

    fn mlp(&self, s: &mut Session<F>, m: Mlp, x: Var) -> Result<Var, NumericsError> {
        let h = self.linear(s, m.l1, x)?;
        let h = s.graph.gelu(h)?;
        self.linear(s, m.l2, h)
    }

    /// Multi-head attention of `queries` over `memory`; returns the output and
    /// the head-averaged attention weights.
    fn attention(&self, s: &mut Session<F>, a: Attention, queries: Var, memory: Var) -> Result<(Var, Var), NumericsError> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = self.linear(s, a.q, queries)?;
        let k = self.linear(s, a.k, memory)?;
        let v = self.linear(s, a.v, memory)?;
        let kt = s.graph.transpose(k)?;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut weights: Option<Var> = None;
        for h in 0..heads {
            let qh = s.graph.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = s.graph.slice_rows(kt, h * dh, (h + 1) * dh)?;
            let vh = s.graph.slice_cols(v, h * dh, (h + 1) * dh)?;
            let logits = s.graph.matmul(qh, kh)?;
            let logits = s.graph.scale(logits, scale)?;
            let w = s.graph.softmax_rows(logits)?;
            outs.push(s.graph.matmul(w, vh)?);
            weights = Some(match weights {
                Some(acc) => s.graph.add(acc, w)?,
                None => w,
            });
        }
        let mixed = if heads == 1 { outs[0] } else { s.graph.concat_cols(&outs)? };
        let out = self.linear(s, a.o, mixed)?;
        let weights = s.graph.scale(weights.expect("at least one head"), F::from_f64(1.0 / heads as f64))?;
        Ok((out, weights))
    }

    fn block(&self, s: &mut Session<F>, b: Block, x: Var, memory: Option<Var>) -> Result<(Var, Var), NumericsError> {
        let xn = self.norm(s, b.norm_q, x)?;
        let mem = match (memory, b.norm_kv) {
            (Some(m), Some(n)) => self.norm(s, n, m)?,
            (Some(m), None) => m,
            (None, _) => xn,
        };
        let (att, weights) = self.attention(s, b.attn, xn, mem)?;
        let x = s.graph.add(x, att)?;
        let xn = self.norm(s, b.norm_ff, x)?;
        let h = self.linear(s, b.ff1, xn)?;
        let h = s.graph.gelu(h)?;
        let h = self.linear(s, b.ff2, h)?;
        Ok((s.graph.add(x, h)?, weights))
    }

    /// T×D video tokens.
    pub fn encode_video(&self, s: &mut Session<F>, x: &FeatureSequence) -> Result<Var, ModelError> {
        if x.d_feat != self.dims.d_feat {
            return Err(ModelError::Dimension(format!("features have width {}, model expects {}", x.d_feat, self.dims.d_feat)));
        }
        if x.t > self.dims.max_len && self.layout.pos.is_some() {
            return Err(ModelError::Dimension(format!("{} clips exceed the position table ({})", x.t, self.dims.max_len)));
        }
        let input = s.graph.constant(x.tensor());
        let mut h = self.linear(s, self.layout.video_in, input)?;
        if let Some(pos) = self.layout.pos {
            let table = s.param(pos);
            let p = s.graph.slice_rows(table, 0, x.t)?;
            h = s.graph.add(h, p)?;
        }
        for b in &self.layout.video_blocks {
            h = self.block(s, *b, h, None)?.0;
        }
        Ok(self.norm(s, self.layout.video_norm, h)?)
    }

    /// K×D step queries, the step MLP applied row by row.
    pub fn encode_steps(&self, s: &mut Session<F>, steps: &[StepDescriptor]) -> Result<Var, ModelError> {
        if steps.is_empty() {
            return Err(ModelError::Contract("at least one step is required".into()));
        }
        let rows: Vec<Vec<F>> = steps
            .iter()
            .map(|st| {
                if st.descriptor.len() != self.dims.d_text {
                    return Err(ModelError::Dimension(format!(
                        "descriptor width {} vs {}",
                        st.descriptor.len(),
                        self.dims.d_text
                    )));
                }
                Ok(st.descriptor.iter().map(|&v| F::from_f64(v)).collect())
            })
            .collect::<Result<_, _>>()?;
        let input = s.graph.constant(Tensor::from_rows(&rows)?);
        let q = self.mlp(s, self.layout.step_mlp, input)?;
        // Normalized so step identity is not drowned by the attended video
        // content in the residual stream of later cross blocks.
        Ok(self.norm(s, self.layout.step_norm, q)?)
    }

    /// Stacked cross-attention; returns K×D step states and the last block's K×T attention.
    pub fn cross_attend(&self, s: &mut Session<F>, queries: Var, tokens: Var) -> Result<(Var, Var), ModelError> {
        if s.graph.shape(queries)[1] != s.graph.shape(tokens)[1] {
            return Err(ModelError::Dimension("queries and tokens differ in width".into()));
        }
        let mut q = queries;
        let mut attention = None;
        for b in &self.layout.cross_blocks {
            let (next, w) = self.block(s, *b, q, Some(tokens))?;
            q = next;
            attention = Some(w);
        }
        let states = self.norm(s, self.layout.cross_norm, q)?;
        Ok((states, attention.expect("at least one cross block")))
    }

    /// Gaussian heads: mean, clamped log-variance and sigma, each K×D.
    pub fn gaussian_heads(&self, s: &mut Session<F>, states: Var) -> Result<(Var, Var, Var), ModelError> {
        let mu = self.linear(s, self.layout.mu_head, states)?;
        let raw = self.linear(s, self.layout.logvar_head, states)?;
        let (lo, hi) = stochastic::logvar_bounds();
        let logvar = s.graph.clamp(raw, F::from_f64(lo), F::from_f64(hi))?;
        let half = s.graph.scale(logvar, F::from_f64(0.5))?;
        let sigma = s.graph.exp(half)?;
        Ok((mu, logvar, sigma))
    }

    /// Full embedding function for one video.
    pub fn embed(&self, s: &mut Session<F>, x: &FeatureSequence, steps: &[StepDescriptor]) -> Result<Embedded, ModelError> {
        let tokens = self.encode_video(s, x)?;
        let queries = self.encode_steps(s, steps)?;
        let (states, attention) = self.cross_attend(s, queries, tokens)?;
        let (mu, logvar, sigma) = self.gaussian_heads(s, states)?;
        Ok(Embedded { mu, logvar, sigma, attention })
    }

    /// Per-kind aggregator MLP G.
    pub fn aggregate(&self, s: &mut Session<F>, kind: NodeKind, x: Var) -> Result<Var, NumericsError> {
        let mlp = match kind {
            NodeKind::Root => self.layout.agg_root,
            _ => self.layout.agg_intermediate,
        };
        self.mlp(s, mlp, x)
    }

    /// Root embedding for K×D leaf embeddings (rows ordered as the DAG's leaves).
    pub fn propagate_scores(&self, s: &mut Session<F>, dag: &RubricDag, leaves: Var) -> Result<Var, ModelError> {
        let aggregation = self.config.aggregation;
        propagate(s, dag, leaves, aggregation, |s, kind, x| self.aggregate(s, kind, x))
    }

    /// Scalar score from the root embedding.
    pub fn decode_score(&self, s: &mut Session<F>, root: Var) -> Result<Var, ModelError> {
        Ok(self.mlp(s, self.layout.decoder, root)?)
    }

    /// Inference for one video.
    pub fn forward(
        &self,
        x: &FeatureSequence,
        steps: &[StepDescriptor],
        dag: &RubricDag,
        sampling: Sampling,
        key: NoiseKey,
    ) -> Result<ScorePrediction, ModelError> {
        if dag.leaf_count() != steps.len() {
            return Err(ModelError::Dimension(format!("{} DAG leaves for {} steps", dag.leaf_count(), steps.len())));
        }
        let mut s = self.session(false);
        let e = self.embed(&mut s, x, steps)?;
        let (k, d) = (steps.len(), self.config.d_model);

        let mu = s.graph.value(e.mu).to_f64_vec();
        let sigma = s.graph.value(e.sigma).to_f64_vec();
        let per_step = (0..k)
            .map(|i| GaussianEmbedding::new(mu[i * d..(i + 1) * d].to_vec(), sigma[i * d..(i + 1) * d].to_vec()))
            .collect::<Result<Vec<_>, _>>()?;

        let (score, uncertainty) = match sampling {
            Sampling::Deterministic => {
                let root = self.propagate_scores(&mut s, dag, e.mu)?;
                let y = self.decode_score(&mut s, root)?;
                (s.graph.value(y).item().as_f64(), None)
            }
            Sampling::Stochastic(n) => {
                if n == 0 {
                    return Err(ModelError::Contract("stochastic inference needs at least one sample".into()));
                }
                let mut total = 0.0;
                for draw in 0..n {
                    let noise: Vec<F> = (0..k)
                        .flat_map(|leaf| key.draws(draw as u64, leaf as u64, d))
                        .map(F::from_f64)
                        .collect();
                    let noise = s.graph.constant(Tensor::new(vec![k, d], noise)?);
                    let z = stochastic::sample_var(&mut s.graph, e.mu, e.sigma, noise)?;
                    let root = self.propagate_scores(&mut s, dag, z)?;
                    let y = self.decode_score(&mut s, root)?;
                    total += s.graph.value(y).item().as_f64();
                }
                let sigmas: Vec<Vec<f64>> = per_step.iter().map(|g| g.sigma.clone()).collect();
                (total / n as f64, Some(stochastic::uncertainty(&sigmas)?))
            }
        };

        let a = s.graph.value(e.attention);
        let attention = AttentionMap { k, t: x.t, values: a.to_f64_vec() };
        Ok(ScorePrediction { score, uncertainty, attention, per_step })
    }

    /// Plain-value decoder evaluation, used to check the graph path.
    pub fn decode_score_value(&self, z_root: &[f64]) -> f64 {
        let p = &self.params;
        let dec = self.layout.decoder;
        let dense = |x: &[f64], l: Linear| -> Vec<f64> {
            let w = p.get(l.w);
            let b = p.get(l.b);
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..cols)
                .map(|j| b.data()[j].as_f64() + (0..rows).map(|i| x[i] * w.data()[i * cols + j].as_f64()).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = dense(z_root, dec.l1).into_iter().map(gelu).collect();
        dense(&h, dec.l2)[0]
    }
}

/// Push leaf embeddings up the DAG in topological order. Each non-leaf node
/// applies `transform` to the mean (or sum) of its predecessors, visited in
/// ascending id order. Returns the root embedding as a 1×D row.
pub fn propagate<F: Real, T>(
    s: &mut Session<F>,
    dag: &RubricDag,
    leaves: Var,
    aggregation: Aggregation,
    mut transform: T,
) -> Result<Var, ModelError>
where
    T: FnMut(&mut Session<F>, NodeKind, Var) -> Result<Var, NumericsError>,
{
    let k = s.graph.shape(leaves)[0];
    if k != dag.leaf_count() {
        return Err(ModelError::Dimension(format!("{k} leaf embeddings for {} leaves", dag.leaf_count())));
    }
    let root = dag.root().ok_or_else(|| ModelError::Contract("DAG has no root".into()))?;
    if dag.topo().len() != dag.node_count() {
        return Err(ModelError::Contract("DAG is cyclic".into()));
    }
    let mut emb: Vec<Option<Var>> = vec![None; dag.node_count()];
    for &node in dag.topo() {
        let kind = dag.nodes()[node].kind;
        if kind == NodeKind::Leaf {
            emb[node] = Some(s.graph.slice_rows(leaves, node, node + 1)?);
            continue;
        }
        let preds: Vec<Var> = dag
            .predecessors(node)
            .iter()
            .map(|&p| emb[p].ok_or_else(|| ModelError::Contract(format!("node {p} not computed before {node}"))))
            .collect::<Result<_, _>>()?;
        if preds.is_empty() {
            return Err(ModelError::Contract(format!("non-leaf node {node} has no predecessors")));
        }
        let pooled = match aggregation {
            Aggregation::Mean if preds.len() == 1 => preds[0],
            Aggregation::Mean => {
                let stacked = s.graph.concat_rows(&preds)?;
                s.graph.mean_rows(stacked)?
            }
            Aggregation::Sum => {
                let mut acc = preds[0];
                for &p in &preds[1..] {
                    acc = s.graph.add(acc, p)?;
                }
                acc
            }
        };
        emb[node] = Some(transform(s, kind, pooled)?);
    }
    emb[root].ok_or_else(|| ModelError::Contract("root not reached".into()))
}

