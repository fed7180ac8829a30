//! Sequence models over (RTG, state, action) windows.
//!
//! [`Variant::ClbDt`] keeps three parallel streams of length `M`. Each block
//! updates a stream with two cross-attention paths whose queries come from
//! the other two streams and whose keys and values come from the stream
//! itself, then applies layer norm and a feed-forward map:
//!
//! ```text
//! A_attn = A + Attn(LN(S) -> Q, LN(A) -> K, V) + Attn(LN(R) -> Q, LN(A) -> K, V)
//! A'     = FF(LN(A_attn))
//! ```
//!
//! [`Variant::VanillaDt`] interleaves the three streams into one `3M` token
//! sequence `r0 s0 a0 r1 s1 a1 ..` with causal self-attention.
//!
//! At window position `t` the CLB action stream carries the previous action
//! `a_{t-1}`, so both variants predict `a_t` from `(r_<=t, s_<=t, a_<t)`. The
//! RTG head regresses the reward still to come after step `t`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::auction::{compute_state_features, BidPolicy, CampaignConfig, EpisodeLog, STATE_DIM};
use crate::checkpoint::Container;
use crate::dataset::{NormStats, TrainingSegment};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{action_loss, rtg_loss, total_loss, LossConfig, LossKind};
use crate::params::{Bindings, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    ClbDt,
    VanillaDt,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ClbDt => "clb_dt",
            Variant::VanillaDt => "vanilla_dt",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clb_dt" => Ok(Variant::ClbDt),
            "vanilla_dt" => Ok(Variant::VanillaDt),
            other => Err(Error::Config(format!("unknown variant {other:?}, expected clb_dt or vanilla_dt"))),
        }
    }
}

/// Stream the CLB prediction heads read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStream {
    #[default]
    State,
    Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    /// Attention width; `None` means `d_h`.
    pub d_k: Option<usize>,
    /// Feed-forward width; `None` means `4 * d_h`.
    pub d_ff: Option<usize>,
    pub num_blocks: usize,
    /// Window length `M`.
    pub window: usize,
    pub dropout_rate: f64,
    pub mask_fill: f64,
    pub layer_norm_eps: f64,
    pub variant: Variant,
    pub head_stream: HeadStream,
    /// Size of the timestep embedding table.
    pub horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            d_k: None,
            d_ff: None,
            num_blocks: 3,
            window: 20,
            dropout_rate: 0.1,
            mask_fill: -1e4,
            layer_norm_eps: 1e-5,
            variant: Variant::ClbDt,
            head_stream: HeadStream::State,
            horizon: 48,
        }
    }
}

impl ModelConfig {
    /// Small model that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            d_h: 16,
            num_blocks: 2,
            window: 10,
            ..Self::default()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.d_h)
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_h)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [("d_h", self.d_h), ("d_k", self.d_k()), ("d_ff", self.d_ff())];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_k() != self.d_h {
            return Err(Error::Config(format!(
                "attention output is added to a d_h = {} residual, so d_k must equal d_h (got {})",
                self.d_h,
                self.d_k()
            )));
        }
        if self.num_blocks == 0 || self.window == 0 || self.horizon == 0 {
            return Err(Error::Config("num_blocks, window and horizon must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if !(self.mask_fill < -1e3) || !self.mask_fill.is_finite() {
            return Err(Error::Config(format!("mask_fill must be finite and below -1e3, got {}", self.mask_fill)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Segments stacked into flat row-major `[batch, M, ..]` buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub window: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub prev_actions: Vec<f64>,
    pub rtg: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
    pub target_actions: Vec<f64>,
    pub target_rtg: Vec<f64>,
    /// Trajectory penalty repeated at every position.
    pub penalties: Vec<f64>,
}

impl Batch {
    pub fn new(segments: &[&TrainingSegment]) -> Result<Self> {
        let first = segments.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let window = first.window();
        let mut b = Batch {
            size: segments.len(),
            window,
            states: Vec::with_capacity(segments.len() * window * STATE_DIM),
            actions: Vec::new(),
            prev_actions: Vec::new(),
            rtg: Vec::new(),
            timesteps: Vec::new(),
            valid: Vec::new(),
            target_actions: Vec::new(),
            target_rtg: Vec::new(),
            penalties: Vec::new(),
        };
        for seg in segments {
            if seg.window() != window {
                return Err(Error::dim("batch", format!("window {} vs {window}", seg.window())));
            }
            b.states.extend(seg.states.iter().flatten());
            b.actions.extend(&seg.actions);
            b.prev_actions.extend(&seg.prev_actions);
            b.rtg.extend(&seg.rtg);
            b.timesteps.extend(&seg.timesteps);
            b.valid.extend(&seg.valid);
            b.target_actions.extend(&seg.target_actions);
            b.target_rtg.extend(&seg.target_rtg);
            b.penalties.extend(std::iter::repeat_n(seg.penalty, window));
        }
        Ok(b)
    }

    fn positions(&self) -> usize {
        self.size * self.window
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, M, 1]`
    pub action: Var,
    /// `[batch, M, 1]`
    pub rtg: Var,
    /// Hidden states after the first block: the S, A, R streams for CLB-DT,
    /// the single token stream for vanilla DT.
    pub block1: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub action: f64,
    pub rtg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const STREAMS: [&str; 3] = ["s", "a", "r"];

struct Masks {
    additive: Var,
    query_keep: Var,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init distribution: {e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

impl Model {
    /// Builds a freshly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let mut p = ParamStore::new();
        let (d, dk, dff) = (config.d_h, config.d_k(), config.d_ff());
        let linear = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64| -> Result<()> {
            let std = gain / (fan_in as f64).sqrt();
            p.insert(format!("{name}.weight"), gaussian(rng, &[fan_in, fan_out], std)?)?;
            p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))
        };
        let norm = |p: &mut ParamStore, name: &str| -> Result<()> {
            p.insert(format!("{name}.gamma"), Tensor::filled(&[d], 1.0))?;
            p.insert(format!("{name}.beta"), Tensor::zeros(&[d]))
        };
        let attention = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| -> Result<()> {
            let std = 1.0 / (d as f64).sqrt();
            for m in ["q", "k", "v"] {
                p.insert(format!("{name}.w_{m}"), gaussian(rng, &[d, dk], std)?)?;
                p.insert(format!("{name}.b_{m}"), Tensor::zeros(&[dk]))?;
            }
            Ok(())
        };

        p.insert("encoder.time.table", gaussian(&mut rng, &[config.horizon, d], 1.0 / (d as f64).sqrt())?)?;
        linear(&mut p, &mut rng, "encoder.state", STATE_DIM, d, 1.0)?;
        linear(&mut p, &mut rng, "encoder.action", 1, d, 1.0)?;
        linear(&mut p, &mut rng, "encoder.rtg", 1, d, 1.0)?;
        for b in 0..config.num_blocks {
            match config.variant {
                Variant::ClbDt => {
                    for (i, s) in STREAMS.iter().enumerate() {
                        let pre = format!("block{b}.{s}");
                        norm(&mut p, &format!("{pre}.ln_attn"))?;
                        for (j, other) in STREAMS.iter().enumerate() {
                            if j != i {
                                attention(&mut p, &mut rng, &format!("{pre}.attn_from_{other}"))?;
                            }
                        }
                        norm(&mut p, &format!("{pre}.ln_ff"))?;
                        linear(&mut p, &mut rng, &format!("{pre}.ff.lin1"), d, dff, 1.0)?;
                        linear(&mut p, &mut rng, &format!("{pre}.ff.lin2"), dff, d, 1.0)?;
                    }
                }
                Variant::VanillaDt => {
                    let pre = format!("block{b}");
                    norm(&mut p, &format!("{pre}.ln_attn"))?;
                    attention(&mut p, &mut rng, &format!("{pre}.attn"))?;
                    norm(&mut p, &format!("{pre}.ln_ff"))?;
                    linear(&mut p, &mut rng, &format!("{pre}.ff.lin1"), d, dff, 1.0)?;
                    linear(&mut p, &mut rng, &format!("{pre}.ff.lin2"), dff, d, 1.0)?;
                }
            }
        }
        linear(&mut p, &mut rng, "head.action", d, 1, 0.1)?;
        linear(&mut p, &mut rng, "head.rtg", d, 1, 0.1)?;
        Ok(Self { config, params: p })
    }

    /// Wraps an existing parameter store, checking that it matches the
    /// parameter layout of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, e)| (n, e.tensor.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, e)| (n, e.tensor.shape())).collect();
        if expected != got {
            return Err(Error::Compatibility(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn masks(&self, g: &mut Graph, batch: &Batch, tokens_per_step: usize) -> Result<Masks> {
        let (bs, m) = (batch.size, batch.window);
        let len = m * tokens_per_step;
        let dk = self.config.d_k();
        let fill = self.config.mask_fill;
        let mut additive = vec![0.0; bs * len * len];
        let mut keep = vec![0.0; bs * len * dk];
        for b in 0..bs {
            let valid = |tok: usize| batch.valid[b * m + tok / tokens_per_step];
            for i in 0..len {
                if valid(i) {
                    keep[(b * len + i) * dk..(b * len + i + 1) * dk].fill(1.0);
                }
                for j in 0..len {
                    if !(j <= i && valid(i) && valid(j)) {
                        additive[(b * len + i) * len + j] = fill;
                    }
                }
            }
        }
        Ok(Masks {
            additive: g.constant(Tensor::new(vec![bs, len, len], additive)?),
            query_keep: g.constant(Tensor::new(vec![bs, len, dk], keep)?),
        })
    }

    /// `softmax(Q K^T / sqrt(d_k) + mask) V` with `Q` from `q_src` and `K`,
    /// `V` from `kv_src`. Rows of padded queries are zeroed.
    fn attention(&self, g: &mut Graph, p: &Bindings, name: &str, q_src: Var, kv_src: Var, masks: &Masks) -> Result<Var> {
        let proj = |g: &mut Graph, m: &str, x: Var| -> Result<Var> {
            let w = p.get(&format!("{name}.w_{m}"))?;
            let b = p.get(&format!("{name}.b_{m}"))?;
            g.linear(x, w, b)
        };
        let q = proj(g, "q", q_src)?;
        let k = proj(g, "k", kv_src)?;
        let v = proj(g, "v", kv_src)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.config.d_k() as f64).sqrt())?;
        let scores = g.add(scores, masks.additive)?;
        let weights = g.softmax_last(scores)?;
        let out = g.matmul(weights, v)?;
        g.mul(out, masks.query_keep)
    }

    fn norm(&self, g: &mut Graph, p: &Bindings, name: &str, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{name}.gamma"))?;
        let beta = p.get(&format!("{name}.beta"))?;
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    #[allow(clippy::too_many_arguments)]
    fn feed_forward(&self, g: &mut Graph, p: &Bindings, name: &str, x: Var, training: bool, seed: u64) -> Result<Var> {
        let h = g.linear(x, p.get(&format!("{name}.lin1.weight"))?, p.get(&format!("{name}.lin1.bias"))?)?;
        let h = g.relu(h)?;
        let h = g.linear(h, p.get(&format!("{name}.lin2.weight"))?, p.get(&format!("{name}.lin2.bias"))?)?;
        g.dropout(h, self.config.dropout_rate, training, seed)
    }

    fn clb_block(&self, g: &mut Graph, p: &Bindings, b: usize, x: [Var; 3], masks: &Masks, training: bool, seed: u64) -> Result<[Var; 3]> {
        let mut ln = [x[0]; 3];
        for (i, s) in STREAMS.iter().enumerate() {
            ln[i] = self.norm(g, p, &format!("block{b}.{s}.ln_attn"), x[i])?;
        }
        let mut out = x;
        for (i, s) in STREAMS.iter().enumerate() {
            let mut acc = x[i];
            for (j, other) in STREAMS.iter().enumerate() {
                if j == i {
                    continue;
                }
                let y = self.attention(g, p, &format!("block{b}.{s}.attn_from_{other}"), ln[j], ln[i], masks)?;
                acc = g.add(acc, y)?;
            }
            let h = self.norm(g, p, &format!("block{b}.{s}.ln_ff"), acc)?;
            out[i] = self.feed_forward(g, p, &format!("block{b}.{s}.ff"), h, training, derive_seed(seed, &[b as u64, i as u64]))?;
        }
        Ok(out)
    }

    fn self_attention_block(&self, g: &mut Graph, p: &Bindings, b: usize, x: Var, masks: &Masks, training: bool, seed: u64) -> Result<Var> {
        let ln = self.norm(g, p, &format!("block{b}.ln_attn"), x)?;
        let y = self.attention(g, p, &format!("block{b}.attn"), ln, ln, masks)?;
        let acc = g.add(x, y)?;
        let h = self.norm(g, p, &format!("block{b}.ln_ff"), acc)?;
        self.feed_forward(g, p, &format!("block{b}.ff"), h, training, derive_seed(seed, &[b as u64, 0]))
    }

    /// Encodes the three input streams, each `[batch, M, d_h]`, with the
    /// timestep embedding added to every stream.
    pub fn encode_inputs(&self, g: &mut Graph, p: &Bindings, batch: &Batch) -> Result<[Var; 3]> {
        let (bs, m) = (batch.size, batch.window);
        if let Some(&bad) = batch.timesteps.iter().find(|&&t| t >= self.config.horizon) {
            return Err(Error::Index { index: bad, bound: self.config.horizon });
        }
        let time = g.embedding(p.get("encoder.time.table")?, &batch.timesteps, &[bs, m])?;
        let action_inputs = match self.config.variant {
            Variant::ClbDt => &batch.prev_actions,
            Variant::VanillaDt => &batch.actions,
        };
        let inputs = [
            ("encoder.state", Tensor::new(vec![bs, m, STATE_DIM], batch.states.clone())?),
            ("encoder.action", Tensor::new(vec![bs, m, 1], action_inputs.clone())?),
            ("encoder.rtg", Tensor::new(vec![bs, m, 1], batch.rtg.clone())?),
        ];
        let mut out = [time; 3];
        for (slot, (name, t)) in out.iter_mut().zip(inputs) {
            let x = g.constant(t);
            let h = g.linear(x, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?)?;
            *slot = g.add(h, time)?;
        }
        Ok(out)
    }

    fn head(&self, g: &mut Graph, p: &Bindings, name: &str, x: Var) -> Result<Var> {
        g.linear(x, p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?)
    }

    /// Full forward pass. `seed` drives dropout and matters only when
    /// `training` is set.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, batch: &Batch, training: bool, seed: u64) -> Result<ForwardOutput> {
        if batch.window != self.config.window {
            return Err(Error::dim("model_forward", format!("window {} for a model with M = {}", batch.window, self.config.window)));
        }
        let [s, a, r] = self.encode_inputs(g, p, batch)?;
        match self.config.variant {
            Variant::ClbDt => {
                let masks = self.masks(g, batch, 1)?;
                let mut x = [s, a, r];
                let mut block1 = Vec::new();
                for b in 0..self.config.num_blocks {
                    x = self.clb_block(g, p, b, x, &masks, training, seed)?;
                    if b == 0 {
                        block1 = x.to_vec();
                    }
                }
                let src = match self.config.head_stream {
                    HeadStream::State => x[0],
                    HeadStream::Action => x[1],
                };
                Ok(ForwardOutput {
                    action: self.head(g, p, "head.action", src)?,
                    rtg: self.head(g, p, "head.rtg", src)?,
                    block1,
                })
            }
            Variant::VanillaDt => {
                let masks = self.masks(g, batch, 3)?;
                let mut x = g.interleave(&[r, s, a])?;
                let mut block1 = Vec::new();
                for b in 0..self.config.num_blocks {
                    x = self.self_attention_block(g, p, b, x, &masks, training, seed)?;
                    if b == 0 {
                        block1 = vec![x];
                    }
                }
                let m = batch.window;
                let s_tokens: Vec<usize> = (0..m).map(|t| 3 * t + 1).collect();
                let a_tokens: Vec<usize> = (0..m).map(|t| 3 * t + 2).collect();
                let hs = g.select_rows(x, &s_tokens)?;
                let ha = g.select_rows(x, &a_tokens)?;
                Ok(ForwardOutput {
                    action: self.head(g, p, "head.action", hs)?,
                    rtg: self.head(g, p, "head.rtg", ha)?,
                    block1,
                })
            }
        }
    }

    /// Training objective `L_a + lambda * L_r` on a batch.
    pub fn loss(&self, g: &mut Graph, p: &Bindings, batch: &Batch, kind: LossKind, cfg: &LossConfig, training: bool, seed: u64) -> Result<(Var, LossParts)> {
        let out = self.forward(g, p, batch, training, seed)?;
        let ones;
        let penalties = match kind {
            LossKind::ConstraintAware => &batch.penalties,
            LossKind::PlainMse => {
                ones = vec![1.0; batch.positions()];
                &ones
            }
        };
        let la = action_loss(g, out.action, &batch.target_actions, penalties, &batch.valid)?;
        let lr = rtg_loss(g, out.rtg, &batch.target_rtg, penalties, &batch.valid)?;
        let total = total_loss(g, la, lr, cfg)?;
        let parts = LossParts {
            action: g.value(la).values()[0],
            rtg: g.value(lr).values()[0],
            total: g.value(total).values()[0],
        };
        Ok((total, parts))
    }

    /// Evaluation-mode predictions `(a_hat, r_hat)`, each `batch * M` long.
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, batch, false, 0)?;
        Ok((g.value(out.action).values().to_vec(), g.value(out.rtg).values().to_vec()))
    }

    /// Final-position hidden state after the first block: the S, A, R rows
    /// concatenated (`3 d_h`) for CLB-DT, the last token's row (`d_h`) for
    /// vanilla DT.
    pub fn extract_block1_embedding(&self, segment: &TrainingSegment) -> Result<Vec<f64>> {
        let batch = Batch::new(&[segment])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, &batch, false, 0)?;
        let d = self.config.d_h;
        let mut emb = Vec::with_capacity(out.block1.len() * d);
        for v in out.block1 {
            let vals = g.value(v).values();
            emb.extend_from_slice(&vals[vals.len() - d..]);
        }
        Ok(emb)
    }
}

/// A model plus everything needed to run it on raw environment data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub norm: NormStats,
    /// Largest episode return in the training split; rollouts condition on
    /// this value scaled by the budget ratio.
    pub max_return: f64,
    /// Free-form provenance: config and dataset fingerprints, loss kind, ..
    pub info: serde_json::Value,
}

const NORM_KEY: &str = "norm.stats";

impl TrainedModel {
    pub fn to_container(&self) -> Container {
        let mut aux = indexmap::IndexMap::new();
        let flat = self.norm.to_flat();
        aux.insert(
            NORM_KEY.to_string(),
            Tensor::new(vec![flat.len()], flat).expect("normalisation stats are finite"),
        );
        Container {
            params: self.model.params.clone(),
            aux,
            metadata: serde_json::json!({
                "model_config": self.model.config,
                "max_return": self.max_return,
                "info": self.info,
            }),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta = &c.metadata;
        let config: ModelConfig = serde_json::from_value(meta["model_config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model_config: {e}")))?;
        let max_return = meta["max_return"]
            .as_f64()
            .ok_or_else(|| Error::Format("checkpoint lacks max_return".into()))?;
        let norm = c
            .aux
            .get(NORM_KEY)
            .ok_or_else(|| Error::Format("checkpoint lacks normalisation statistics".into()))?;
        let norm = NormStats::from_flat(norm.values())?;
        Ok(Self {
            model: Model::from_params(config, c.params)?,
            norm,
            max_return,
            info: meta["info"].clone(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Autoregressive episode rollout conditioned on `target_rtg`.
    pub fn rollout(&self, cfg: &CampaignConfig, target_rtg: f64) -> Result<EpisodeLog> {
        let mut policy = RolloutPolicy::new(self, target_rtg)?;
        crate::auction::simulate_episode(&mut policy, cfg)
    }
}

/// [`BidPolicy`] that queries a trained model at every step.
#[derive(Debug)]
pub struct RolloutPolicy<'a> {
    trained: &'a TrainedModel,
    target_rtg: f64,
    /// RTG conditioning value used at each step so far.
    pub conditioning: Vec<f64>,
}

impl<'a> RolloutPolicy<'a> {
    pub fn new(trained: &'a TrainedModel, target_rtg: f64) -> Result<Self> {
        if !(target_rtg.is_finite() && target_rtg >= 0.0) {
            return Err(Error::Domain(format!("target_rtg must be finite and >= 0, got {target_rtg}")));
        }
        Ok(Self { trained, target_rtg, conditioning: Vec::new() })
    }

    /// Window of the last `M` steps ending at `t`, normalised, with the
    /// unknown action at `t` left as zero.
    pub fn segment_at(&self, t: usize, log: &EpisodeLog) -> Result<TrainingSegment> {
        let m = self.trained.model.config.window;
        let norm = &self.trained.norm;
        let mut seg = TrainingSegment {
            episode_id: 0,
            end_step: t,
            rtg: vec![0.0; m],
            states: vec![[0.0; STATE_DIM]; m],
            actions: vec![0.0; m],
            prev_actions: vec![0.0; m],
            timesteps: vec![0; m],
            valid: vec![false; m],
            target_actions: vec![0.0; m],
            target_rtg: vec![0.0; m],
            penalty: 1.0,
            valid_len: 0,
        };
        let mut realized = 0.0;
        let mut rtg_at = Vec::with_capacity(t + 1);
        for k in 0..=t {
            rtg_at.push((self.target_rtg - realized).max(0.0));
            if k < t {
                realized += log.steps[k].reward;
            }
        }
        for pos in 0..m {
            let Some(step) = t.checked_sub(m - 1 - pos) else { continue };
            seg.rtg[pos] = norm.rtg.apply(rtg_at[step]);
            seg.states[pos] = norm.normalize_state(&compute_state_features(log, step)?);
            seg.actions[pos] = if step < t { log.steps[step].action } else { 0.0 };
            seg.prev_actions[pos] = if step > 0 { log.steps[step - 1].action } else { 0.0 };
            seg.timesteps[pos] = step;
            seg.valid[pos] = true;
            seg.valid_len += 1;
        }
        Ok(seg)
    }
}

impl BidPolicy for RolloutPolicy<'_> {
    fn act(&mut self, t: usize, log: &EpisodeLog) -> Result<f64> {
        let seg = self.segment_at(t, log)?;
        let realized = log.steps[..t].iter().fold(0.0, |acc, s| acc + s.reward);
        self.conditioning.push((self.target_rtg - realized).max(0.0));
        let (actions, _) = self.trained.model.predict(&Batch::new(&[&seg])?)?;
        let a = *actions.last().expect("window >= 1");
        if !a.is_finite() {
            return Err(Error::Inference(t));
        }
        Ok(a.max(0.0))
    }
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Checks the gradient of the evaluation-mode batch loss for every scalar
/// parameter. The relative error is `|g - n| / max(|g|, |n|, floor)`.
pub fn gradient_check(model: &Model, batch: &Batch, kind: LossKind, cfg: &LossConfig, step: f64, floor: f64) -> Result<GradCheckReport> {
    let loss_at = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        Ok(m.loss(&mut g, &p, batch, kind, cfg, false, 0)?.1.total)
    };
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (loss, _) = model.loss(&mut g, &p, batch, kind, cfg, false, 0)?;
    g.backward(loss)?;

    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let n = model.params.get(&name).expect("listed").numel();
        let zeros = vec![0.0; n];
        let analytic = g.grad(p.get(&name)?).unwrap_or(&zeros).to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params.get(&name).expect("listed").values()[i];
            probe.params.get_mut(&name).expect("listed").values_mut()[i] = orig + step;
            let up = loss_at(&probe)?;
            probe.params.get_mut(&name).expect("listed").values_mut()[i] = orig - step;
            let down = loss_at(&probe)?;
            probe.params.get_mut(&name).expect("listed").values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}
