//! Sequence-to-sequence gaze predictor.
//!
//! Forward pipeline per input window: per-channel standardization over time,
//! token/position/time embedding, a learned linear extension of the time
//! axis from `T` to `T + horizon`, a stack of residual frequency-decomposition
//! blocks (dominant periods found by DFT, each period folded into a 2D grid
//! and passed through multi-kernel convolutions, branches aggregated by
//! amplitude softmax), and a fused attention/linear projection back to the
//! input channels. Outputs are destandardized with the input statistics and
//! the last `horizon` steps form the forecast.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{amplitude_spectrum, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Fused,
    MhaOnly,
    LinearOnly,
}

impl std::str::FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Projection::Fused),
            "mha" | "mha_only" => Ok(Projection::MhaOnly),
            "linear" | "linear_only" => Ok(Projection::LinearOnly),
            other => Err(Error::Config(format!("unknown projection '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels: pos_x, pos_y, lin_speed, ang_speed.
    pub c_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub top_k_periods: usize,
    pub inception_kernels: Vec<usize>,
    /// Model input window length T.
    pub hist_len: usize,
    /// Prediction horizon tau.
    pub horizon: usize,
    pub alpha_init: f64,
    pub std_epsilon: f64,
    pub projection: Projection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_in: 4,
            d_model: 16,
            n_heads: 8,
            n_blocks: 2,
            top_k_periods: 2,
            inception_kernels: vec![1, 3, 5],
            hist_len: 64,
            horizon: 64,
            alpha_init: 0.5,
            std_epsilon: 1e-5,
            projection: Projection::Fused,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.horizon < 1 || self.hist_len < 4 {
            return Err(Error::Config("hist_len must be >= 4 and horizon >= 1".into()));
        }
        if self.inception_kernels.is_empty() || self.inception_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("inception kernels must be odd".into()));
        }
        if self.top_k_periods < 1 || self.n_blocks < 1 || self.c_in < 1 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_init) || self.std_epsilon <= 0.0 {
            return Err(Error::Config("alpha_init in [0,1], std_epsilon > 0".into()));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.hist_len + self.horizon
    }
}

/// A batch of input windows: features `[B, T, C]` plus per-step relative
/// timestamps `[B, T]` kept out of the standardized feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBatch {
    pub data: Tensor,
    pub times: Tensor,
}

impl TensorBatch {
    pub fn new(data: Tensor, times: Tensor) -> Result<Self> {
        if data.shape().len() != 3 || times.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "expected data [B,T,C] and times [B,T], got {:?} and {:?}",
                data.shape(),
                times.shape()
            )));
        }
        if data.shape()[0] != times.shape()[0] || data.shape()[1] != times.shape()[1] {
            return Err(Error::Shape("data/times batch or time mismatch".into()));
        }
        if !data.is_finite() || !times.is_finite() {
            return Err(Error::Domain("tensor batch contains non-finite values".into()));
        }
        Ok(TensorBatch { data, times })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn time_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Copies one item out as `[T, C]`.
    pub fn item(&self, b: usize) -> Tensor {
        let (t, c) = (self.time_len(), self.channels());
        let data = self.data.data()[b * t * c..(b + 1) * t * c].to_vec();
        Tensor::new(vec![t, c], data)
    }

    pub fn item_times(&self, b: usize) -> Tensor {
        let t = self.time_len();
        Tensor::new(vec![t], self.times.data()[b * t..(b + 1) * t].to_vec())
    }
}

/// Per-(batch, channel) standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// `[B, C]`
    pub mu: Tensor,
    /// `[B, C]`, clamped below by the epsilon used.
    pub sigma: Tensor,
}

/// Per-channel standardization along the temporal dimension with population
/// variance; sigma is clamped below by `eps`.
pub fn standardize(x: &TensorBatch, eps: f64) -> Result<(TensorBatch, NormStats)> {
    let (b, t, c) = (x.batch(), x.time_len(), x.channels());
    if t < 2 {
        return Err(Error::InsufficientData(
            "standardize needs at least 2 time steps".into(),
        ));
    }
    let mut mu = vec![0.0; b * c];
    let mut sigma = vec![0.0; b * c];
    let mut out = vec![0.0; b * t * c];
    for bi in 0..b {
        for ci in 0..c {
            let mut m = 0.0;
            for ti in 0..t {
                m += x.data.data()[(bi * t + ti) * c + ci];
            }
            m /= t as f64;
            let mut v = 0.0;
            for ti in 0..t {
                let d = x.data.data()[(bi * t + ti) * c + ci] - m;
                v += d * d;
            }
            let s = (v / t as f64).sqrt().max(eps);
            mu[bi * c + ci] = m;
            sigma[bi * c + ci] = s;
            for ti in 0..t {
                out[(bi * t + ti) * c + ci] = (x.data.data()[(bi * t + ti) * c + ci] - m) / s;
            }
        }
    }
    let data = Tensor::new(vec![b, t, c], out);
    Ok((
        TensorBatch { data, times: x.times.clone() },
        NormStats {
            mu: Tensor::new(vec![b, c], mu),
            sigma: Tensor::new(vec![b, c], sigma),
        },
    ))
}

/// Inverse of [`standardize`] for any `[B, L, C]` tensor sharing the batch
/// and channel layout of the stats.
pub fn destandardize(x: &Tensor, stats: &NormStats) -> Tensor {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for li in 0..l {
            for ci in 0..c {
                let v = x.data()[(bi * l + li) * c + ci];
                out.push(v * stats.sigma.at2(bi, ci) + stats.mu.at2(bi, ci));
            }
        }
    }
    Tensor::new(vec![b, l, c], out)
}

/// Sinusoidal positional encoding with 1-based positions:
/// `PE(t, 2i) = sin(t / 10000^(2i/d))`, `PE(t, 2i+1) = cos(...)`.
pub fn positional_encoding(t_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d];
    for ti in 0..t_len {
        let pos = (ti + 1) as f64;
        for i in 0..d.div_ceil(2) {
            let freq = pos / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[ti * d + 2 * i] = freq.sin();
            if 2 * i + 1 < d {
                data[ti * d + 2 * i + 1] = freq.cos();
            }
        }
    }
    Tensor::new(vec![t_len, d], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    /// One `[k, k, d, d]` kernel per inception branch.
    pub kernels: Vec<Tensor>,
    /// `[d]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub stage1: ConvStage,
    pub stage2: ConvStage,
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[3, c_in, d]`
    pub token_w: Tensor,
    /// `[1, d]`
    pub time_w: Tensor,
    /// `[T, T+tau]`, applied along the time axis.
    pub predict_w: Tensor,
    pub blocks: Vec<BlockParams>,
    /// `[d, d]` each.
    pub mha_wq: Tensor,
    pub mha_wk: Tensor,
    pub mha_wv: Tensor,
    pub mha_wo: Tensor,
    /// `[d, c_in]`: attention branch output map.
    pub attn_out_w: Tensor,
    /// `[d, c_in]` + `[c_in]`: linear branch.
    pub linear_w: Tensor,
    pub linear_b: Tensor,
    /// `[1]`, mapped to [0,1] by a sigmoid.
    pub raw_alpha: Tensor,
}

fn randn(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * normal.sample(rng)).collect();
    Tensor::new(shape, data)
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, t, total) = (cfg.c_in, cfg.d_model, cfg.hist_len, cfg.total_len());

        // Identity on the history prefix, repeat-last on the horizon, plus a
        // small perturbation.
        let mut predict_w = randn(vec![t, total], 0.002, &mut rng);
        for ti in 0..t {
            for s in 0..total {
                if s == ti || (s >= t && ti == t - 1) {
                    predict_w.data_mut()[ti * total + s] += 1.0;
                }
            }
        }

        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                let stage = |rng: &mut ChaCha8Rng| ConvStage {
                    kernels: cfg
                        .inception_kernels
                        .iter()
                        .map(|&k| randn(vec![k, k, d, d], (2.0 / (k * k * d) as f64).sqrt(), rng))
                        .collect(),
                    bias: Tensor::zeros(vec![d]),
                };
                BlockParams { stage1: stage(&mut rng), stage2: stage(&mut rng) }
            })
            .collect();

        let a = cfg.alpha_init.clamp(1e-6, 1.0 - 1e-6);
        let mut params = ModelParams {
            token_w: randn(vec![3, c, d], (2.0 / (3 * c) as f64).sqrt(), &mut rng),
            time_w: randn(vec![1, d], 0.1, &mut rng),
            predict_w,
            blocks,
            mha_wq: randn(vec![d, d], (1.0 / d as f64).sqrt(), &mut rng),
            mha_wk: randn(vec![d, d], (1.0 / d as f64).sqrt(), &mut rng),
            mha_wv: randn(vec![d, d], (1.0 / d as f64).sqrt(), &mut rng),
            mha_wo: randn(vec![d, d], (1.0 / d as f64).sqrt(), &mut rng),
            attn_out_w: randn(vec![d, c], (1.0 / d as f64).sqrt(), &mut rng),
            linear_w: randn(vec![d, c], (1.0 / d as f64).sqrt(), &mut rng),
            linear_b: Tensor::zeros(vec![c]),
            raw_alpha: Tensor::scalar((a / (1.0 - a)).ln()),
        };
        // Keep every parameter f32-representable so checkpoints round-trip
        // bit-exactly through the 32-bit payload.
        for (_, t) in params.named_tensors_mut() {
            t.round_to_f32();
        }
        Ok(params)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("token_w".into(), &self.token_w),
            ("time_w".into(), &self.time_w),
            ("predict_w".into(), &self.predict_w),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (s, stage) in [(1, &b.stage1), (2, &b.stage2)] {
                for (j, k) in stage.kernels.iter().enumerate() {
                    out.push((format!("block{i}.stage{s}.conv{j}"), k));
                }
                out.push((format!("block{i}.stage{s}.bias"), &stage.bias));
            }
        }
        out.push(("mha_wq".into(), &self.mha_wq));
        out.push(("mha_wk".into(), &self.mha_wk));
        out.push(("mha_wv".into(), &self.mha_wv));
        out.push(("mha_wo".into(), &self.mha_wo));
        out.push(("attn_out_w".into(), &self.attn_out_w));
        out.push(("linear_w".into(), &self.linear_w));
        out.push(("linear_b".into(), &self.linear_b));
        out.push(("raw_alpha".into(), &self.raw_alpha));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("token_w".into(), &mut self.token_w),
            ("time_w".into(), &mut self.time_w),
            ("predict_w".into(), &mut self.predict_w),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (s, stage) in [(1, &mut b.stage1), (2, &mut b.stage2)] {
                for (j, k) in stage.kernels.iter_mut().enumerate() {
                    out.push((format!("block{i}.stage{s}.conv{j}"), k));
                }
                out.push((format!("block{i}.stage{s}.bias"), &mut stage.bias));
            }
        }
        out.push(("mha_wq".into(), &mut self.mha_wq));
        out.push(("mha_wk".into(), &mut self.mha_wk));
        out.push(("mha_wv".into(), &mut self.mha_wv));
        out.push(("mha_wo".into(), &mut self.mha_wo));
        out.push(("attn_out_w".into(), &mut self.attn_out_w));
        out.push(("linear_w".into(), &mut self.linear_w));
        out.push(("linear_b".into(), &mut self.linear_b));
        out.push(("raw_alpha".into(), &mut self.raw_alpha));
        out
    }

    /// Weight matrices participating in L2 regularization: biases and the
    /// alpha blend parameter are excluded.
    pub fn is_weight(name: &str) -> bool {
        !(name.ends_with("bias") || name == "linear_b" || name == "raw_alpha")
    }

    /// Parameter group labels for gradient-check reports.
    pub fn group_of(name: &str) -> &'static str {
        if name == "token_w" {
            "token_conv"
        } else if name == "time_w" {
            "time_embed"
        } else if name == "predict_w" {
            "predict_linear"
        } else if name.starts_with("block") {
            "backbone_conv"
        } else if name.starts_with("mha_") {
            "mha"
        } else if name == "attn_out_w" || name == "linear_w" || name == "linear_b" {
            "projection"
        } else {
            "alpha"
        }
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape node ids for one registration of the parameters.
pub struct ParamNodes {
    pub token_w: NodeId,
    pub time_w: NodeId,
    pub predict_w: NodeId,
    pub blocks: Vec<(Vec<NodeId>, NodeId, Vec<NodeId>, NodeId)>,
    pub mha_wq: NodeId,
    pub mha_wk: NodeId,
    pub mha_wv: NodeId,
    pub mha_wo: NodeId,
    pub attn_out_w: NodeId,
    pub linear_w: NodeId,
    pub linear_b: NodeId,
    pub raw_alpha: NodeId,
}

impl ParamNodes {
    /// Registration order matches [`ModelParams::named_tensors`].
    pub fn register(params: &ModelParams, tape: &mut Tape) -> Self {
        let token_w = tape.leaf(params.token_w.clone(), true);
        let time_w = tape.leaf(params.time_w.clone(), true);
        let predict_w = tape.leaf(params.predict_w.clone(), true);
        let blocks = params
            .blocks
            .iter()
            .map(|b| {
                let k1: Vec<NodeId> = b.stage1.kernels.iter().map(|k| tape.leaf(k.clone(), true)).collect();
                let b1 = tape.leaf(b.stage1.bias.clone(), true);
                let k2: Vec<NodeId> = b.stage2.kernels.iter().map(|k| tape.leaf(k.clone(), true)).collect();
                let b2 = tape.leaf(b.stage2.bias.clone(), true);
                (k1, b1, k2, b2)
            })
            .collect();
        ParamNodes {
            token_w,
            time_w,
            predict_w,
            blocks,
            mha_wq: tape.leaf(params.mha_wq.clone(), true),
            mha_wk: tape.leaf(params.mha_wk.clone(), true),
            mha_wv: tape.leaf(params.mha_wv.clone(), true),
            mha_wo: tape.leaf(params.mha_wo.clone(), true),
            attn_out_w: tape.leaf(params.attn_out_w.clone(), true),
            linear_w: tape.leaf(params.linear_w.clone(), true),
            linear_b: tape.leaf(params.linear_b.clone(), true),
            raw_alpha: tape.leaf(params.raw_alpha.clone(), true),
        }
    }

    /// Leaf ids in [`ModelParams::named_tensors`] order.
    pub fn ordered_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.token_w, self.time_w, self.predict_w];
        for (k1, b1, k2, b2) in &self.blocks {
            out.extend(k1.iter().copied());
            out.push(*b1);
            out.extend(k2.iter().copied());
            out.push(*b2);
        }
        out.extend([
            self.mha_wq,
            self.mha_wk,
            self.mha_wv,
            self.mha_wo,
            self.attn_out_w,
            self.linear_w,
            self.linear_b,
            self.raw_alpha,
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    /// Blend weight after the sigmoid map, always within [0, 1].
    pub fn alpha(&self) -> f64 {
        1.0 / (1.0 + (-self.params.raw_alpha.item()).exp())
    }

    /// Standardize -> embed -> extend -> backbone -> project ->
    /// destandardize; returns the last `horizon` steps, `[B, tau, C]`.
    pub fn forward(&self, x: &TensorBatch) -> Result<Tensor> {
        self.check_input(x)?;
        let b = x.batch();
        let items: Vec<Tensor> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let mut tape = Tape::new();
                let pn = ParamNodes::register(&self.params, &mut tape);
                let item = tape.leaf(x.item(bi), false);
                let pred = forward_item(&mut tape, &self.cfg, &pn, item, &x.item_times(bi));
                tape.value(pred).clone()
            })
            .collect();
        Ok(stack_items(&items))
    }

    fn check_input(&self, x: &TensorBatch) -> Result<()> {
        if x.time_len() != self.cfg.hist_len {
            return Err(Error::Shape(format!(
                "input time length {} != hist_len {}",
                x.time_len(),
                self.cfg.hist_len
            )));
        }
        if x.channels() != self.cfg.c_in {
            return Err(Error::Shape(format!(
                "input channels {} != c_in {}",
                x.channels(),
                self.cfg.c_in
            )));
        }
        Ok(())
    }

    /// Embedding stage on an already-standardized batch: `[B,T,C] -> [B,T,d]`.
    pub fn embed(&self, x_std: &TensorBatch) -> Result<Tensor> {
        self.check_input(x_std)?;
        self.map_items(&x_std.data, |tape, pn, item, bi| {
            embed_item(tape, &self.cfg, pn, item, &x_std.item_times(bi))
        })
    }

    /// Horizon extension: `[B,T,d] -> [B,T+tau,d]`.
    pub fn extend_horizon(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != [z.shape()[0], self.cfg.hist_len, self.cfg.d_model] {
            return Err(Error::Shape(format!(
                "extend_horizon expects [B,{},{}], got {:?}",
                self.cfg.hist_len,
                self.cfg.d_model,
                z.shape()
            )));
        }
        self.map_items(z, |tape, pn, item, _| extend_item(tape, pn, item))
    }

    /// Residual frequency-decomposition blocks: shape-preserving.
    pub fn temporal_backbone(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 3 || z.shape()[2] != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "temporal_backbone expects [B,L,{}], got {:?}",
                self.cfg.d_model,
                z.shape()
            )));
        }
        if z.shape()[1] < 4 {
            return Err(Error::Shape("backbone needs time length >= 4".into()));
        }
        self.map_items(z, |tape, pn, item, _| backbone_item(tape, &self.cfg, pn, item))
    }

    /// Fused attention/linear projection: `[B,L,d] -> [B,L,C]`.
    pub fn project(&self, y: &Tensor) -> Result<Tensor> {
        self.cfg.validate()?;
        if y.shape().len() != 3 || y.shape()[2] != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "project expects [B,L,{}], got {:?}",
                self.cfg.d_model,
                y.shape()
            )));
        }
        self.map_items(y, |tape, pn, item, _| project_item(tape, &self.cfg, pn, item))
    }

    fn map_items(
        &self,
        x: &Tensor,
        f: impl Fn(&mut Tape, &ParamNodes, NodeId, usize) -> NodeId + Sync,
    ) -> Result<Tensor> {
        let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let items: Vec<Tensor> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let mut tape = Tape::new();
                let pn = ParamNodes::register(&self.params, &mut tape);
                let data = x.data()[bi * l * c..(bi + 1) * l * c].to_vec();
                let item = tape.leaf(Tensor::new(vec![l, c], data), false);
                let out = f(&mut tape, &pn, item, bi);
                tape.value(out).clone()
            })
            .collect();
        Ok(stack_items(&items))
    }
}

pub fn stack_items(items: &[Tensor]) -> Tensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for it in items {
        data.extend_from_slice(it.data());
    }
    Tensor::new(shape, data)
}

/// Standardization on tape: returns (standardized, mu, clamped sigma).
pub fn standardize_item(tape: &mut Tape, x: NodeId, eps: f64) -> (NodeId, NodeId, NodeId) {
    let mu = tape.mean_over_rows(x);
    let xc = tape.broadcast_sub_row(x, mu);
    let sq = tape.square(xc);
    let var = tape.mean_over_rows(sq);
    let sigma = tape.sqrt(var);
    let sc = tape.clamp_min(sigma, eps);
    let xs = tape.broadcast_div_row(xc, sc);
    (xs, mu, sc)
}

/// Token conv + positional encoding + time projection, `[T,C] -> [T,d]`.
pub fn embed_item(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pn: &ParamNodes,
    x_std: NodeId,
    times: &Tensor,
) -> NodeId {
    let t_len = tape.value(x_std).shape()[0];
    let tok = tape.conv1d_same(x_std, pn.token_w);
    let pe = tape.constant(positional_encoding(t_len, cfg.d_model));
    let times_col = tape.constant(times.reshaped(vec![t_len, 1]));
    let tim = tape.matmul(times_col, pn.time_w);
    let a = tape.add(tok, pe);
    tape.add(a, tim)
}

/// Learned linear map along the time axis, `[T,d] -> [T+tau,d]`.
pub fn extend_item(tape: &mut Tape, pn: &ParamNodes, z: NodeId) -> NodeId {
    let wt = tape.transpose(pn.predict_w);
    tape.matmul(wt, z)
}

fn conv_stage(tape: &mut Tape, kernels: &[NodeId], bias: NodeId, x: NodeId) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &k in kernels {
        let y = tape.conv2d_same(x, k);
        acc = Some(match acc {
            Some(a) => tape.add(a, y),
            None => y,
        });
    }
    let mean = tape.scale(acc.unwrap(), 1.0 / kernels.len() as f64);
    tape.add_bias(mean, bias)
}

/// One residual frequency block: DFT period selection, per-period fold +
/// inception convolutions, amplitude-softmax aggregation, residual add.
fn frequency_block(
    tape: &mut Tape,
    cfg: &ModelConfig,
    block: &(Vec<NodeId>, NodeId, Vec<NodeId>, NodeId),
    x: NodeId,
) -> NodeId {
    let l = tape.value(x).shape()[0];
    let d = cfg.d_model;
    let spectrum = amplitude_spectrum(tape.value(x));
    let mut order: Vec<usize> = (0..spectrum.len()).collect();
    order.sort_by(|&a, &b| {
        spectrum[b]
            .partial_cmp(&spectrum[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let k = cfg.top_k_periods.min(order.len());
    let freqs: Vec<usize> = order[..k].iter().map(|&i| i + 1).collect();

    let amps = tape.dft_amps(x, &freqs);
    let amps_row = tape.reshape(amps, vec![1, k]);
    let sm = tape.softmax_rows(amps_row);
    let weights = tape.reshape(sm, vec![k]);

    let (k1, b1, k2, b2) = block;
    let mut branches = Vec::with_capacity(k);
    for &f in &freqs {
        let period = l.div_ceil(f);
        let cycles = l.div_ceil(period);
        let padded = tape.pad_rows(x, cycles * period);
        let grid = tape.reshape(padded, vec![cycles, period, d]);
        let h = conv_stage(tape, k1, *b1, grid);
        let h = tape.gelu(h);
        let h = conv_stage(tape, k2, *b2, h);
        let flat = tape.reshape(h, vec![cycles * period, d]);
        branches.push(tape.row_slice(flat, 0, l));
    }
    let agg = tape.weighted_sum(&branches, weights);
    tape.add(agg, x)
}

pub fn backbone_item(tape: &mut Tape, cfg: &ModelConfig, pn: &ParamNodes, z: NodeId) -> NodeId {
    let mut cur = z;
    for block in &pn.blocks {
        cur = frequency_block(tape, cfg, block, cur);
    }
    cur
}

fn mha_item(tape: &mut Tape, cfg: &ModelConfig, pn: &ParamNodes, y: NodeId) -> NodeId {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let q = tape.matmul(y, pn.mha_wq);
    let k = tape.matmul(y, pn.mha_wk);
    let v = tape.matmul(y, pn.mha_wv);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.col_slice(q, from, to);
        let kh = tape.col_slice(k, from, to);
        let vh = tape.col_slice(v, from, to);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&heads);
    tape.matmul(cat, pn.mha_wo)
}

/// Fused projection: `alpha * MHA-branch + (1 - alpha) * linear branch`,
/// `[L,d] -> [L,C]`.
pub fn project_item(tape: &mut Tape, cfg: &ModelConfig, pn: &ParamNodes, y: NodeId) -> NodeId {
    let linear = |tape: &mut Tape| {
        let l = tape.matmul(y, pn.linear_w);
        tape.add_bias(l, pn.linear_b)
    };
    match cfg.projection {
        Projection::LinearOnly => linear(tape),
        Projection::MhaOnly => {
            let a = mha_item(tape, cfg, pn, y);
            tape.matmul(a, pn.attn_out_w)
        }
        Projection::Fused => {
            let a = mha_item(tape, cfg, pn, y);
            let attn_c = tape.matmul(a, pn.attn_out_w);
            let lin = linear(tape);
            let alpha = tape.sigmoid(pn.raw_alpha);
            let one = tape.constant(Tensor::scalar(1.0));
            let rest = tape.sub(one, alpha);
            let wa = tape.mul_scalar(attn_c, alpha);
            let wl = tape.mul_scalar(lin, rest);
            tape.add(wa, wl)
        }
    }
}

/// Full forward for one window on an existing tape; `x` is `[T,C]`, output
/// is the destandardized forecast `[tau, C]`.
pub fn forward_item(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pn: &ParamNodes,
    x: NodeId,
    times: &Tensor,
) -> NodeId {
    let (xs, mu, sc) = standardize_item(tape, x, cfg.std_epsilon);
    let z = embed_item(tape, cfg, pn, xs, times);
    let zp = extend_item(tape, pn, z);
    let y = backbone_item(tape, cfg, pn, zp);
    let proj = project_item(tape, cfg, pn, y);
    let scaled = tape.broadcast_mul_row(proj, sc);
    let dest = tape.broadcast_add_row(scaled, mu);
    tape.row_slice(dest, cfg.hist_len, cfg.total_len())
}
