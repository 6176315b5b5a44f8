//! Composite loss, optimizer schedule, sliding-window rollout and training
//! loop, plus finite-difference gradient verification.
//!
//! The point loss combines per-point MSE with center-distance and
//! dispersion-consistency penalties; the sequence loss adds the MSE between
//! finite-difference velocities. Training consumes the model's own
//! predictions within each rollout (the window slides by `l_w` points per
//! step) with gradients flowing through the entire rollout unless
//! `detach_windows` is set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::Trial;
use crate::model::{forward_item, Model, ModelConfig, ModelParams, ParamNodes};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Center-distance weight.
    pub lambda_c: f64,
    /// Dispersion-consistency weight.
    pub lambda_v: f64,
    /// Blend between the combined point loss and the velocity loss.
    pub lambda: f64,
    pub weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_c: 0.001, lambda_v: 0.05, lambda: 0.9, weight_decay: 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_c < 0.0 || self.lambda_v < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Sliding-window stride l_w.
    pub window: usize,
    /// History buffer length fed into each rollout.
    pub hist_buffer: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Stop gradients at window boundaries instead of propagating through
    /// the whole rollout.
    pub detach_windows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            epochs: 50,
            patience: 20,
            batch_size: 64,
            window: 16,
            hist_buffer: 96,
            seed: 42,
            val_fraction: 0.2,
            detach_windows: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.patience < 1 || self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs, patience, batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Point and sequence losses
// ---------------------------------------------------------------------------

fn check_points(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "point sets differ in size: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("point sets must be nonempty".into()));
    }
    Ok(())
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let mut c = [0.0, 0.0];
    for p in points {
        c[0] += p[0] / n;
        c[1] += p[1] / n;
    }
    c
}

fn variance(points: &[[f64; 2]]) -> [f64; 2] {
    let c = centroid(points);
    let n = points.len() as f64;
    let mut v = [0.0, 0.0];
    for p in points {
        v[0] += (p[0] - c[0]).powi(2) / n;
        v[1] += (p[1] - c[1]).powi(2) / n;
    }
    v
}

/// MSE, center-distance and dispersion terms of the combined point loss.
pub fn loss_comb_parts(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<(f64, f64, f64)> {
    check_points(pred, truth)?;
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum::<f64>()
        / n;
    let (cp, ct) = (centroid(pred), centroid(truth));
    let center = (cp[0] - ct[0]).powi(2) + (cp[1] - ct[1]).powi(2);
    let (vp, vt) = (variance(pred), variance(truth));
    let dispersion = (vp[0] - vt[0]).abs() + (vp[1] - vt[1]).abs();
    Ok((mse, center, dispersion))
}

/// Combined fixation-point loss:
/// `MSE + lambda_c * ||mu(P^) - mu(P)||^2 + lambda_v * ||var(P^) - var(P)||_1`.
pub fn loss_comb(pred: &[[f64; 2]], truth: &[[f64; 2]], lambda_c: f64, lambda_v: f64) -> Result<f64> {
    let (mse, center, dispersion) = loss_comb_parts(pred, truth)?;
    Ok(mse + lambda_c * center + lambda_v * dispersion)
}

/// MSE between finite-difference velocity sequences, velocities in m/s at
/// the given sampling rate.
pub fn loss_velocity(pred: &[[f64; 2]], truth: &[[f64; 2]], sample_rate: f64) -> Result<f64> {
    check_points(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::InsufficientData(
            "velocity loss needs at least 2 points".into(),
        ));
    }
    let n = pred.len();
    let mut acc = 0.0;
    for i in 1..n {
        let vp = [
            (pred[i][0] - pred[i - 1][0]) * sample_rate,
            (pred[i][1] - pred[i - 1][1]) * sample_rate,
        ];
        let vt = [
            (truth[i][0] - truth[i - 1][0]) * sample_rate,
            (truth[i][1] - truth[i - 1][1]) * sample_rate,
        ];
        acc += (vp[0] - vt[0]).powi(2) + (vp[1] - vt[1]).powi(2);
    }
    Ok(acc / (n - 1) as f64)
}

/// Weight-decay term: `weight_decay * sum ||W||^2` over weight matrices
/// (biases and the alpha parameter excluded).
pub fn l2_term(params: &ModelParams, weight_decay: f64) -> f64 {
    if weight_decay == 0.0 {
        return 0.0;
    }
    weight_decay
        * params
            .named_tensors()
            .iter()
            .filter(|(name, _)| ModelParams::is_weight(name))
            .map(|(_, t)| t.sq_norm())
            .sum::<f64>()
}

/// Total training loss:
/// `lambda * L_comb + (1 - lambda) * L_velocity + L2_reg`.
pub fn total_loss(
    pred: &[[f64; 2]],
    truth: &[[f64; 2]],
    cfg: &LossConfig,
    params: &ModelParams,
    sample_rate: f64,
) -> Result<f64> {
    cfg.validate()?;
    let comb = loss_comb(pred, truth, cfg.lambda_c, cfg.lambda_v)?;
    let vel = if cfg.lambda < 1.0 {
        loss_velocity(pred, truth, sample_rate)?
    } else {
        0.0
    };
    Ok(cfg.lambda * comb + (1.0 - cfg.lambda) * vel + l2_term(params, cfg.weight_decay))
}

/// Tape version of [`loss_comb`]; `pred` and `truth` are `[n, 2]` nodes.
pub fn loss_comb_on_tape(
    tape: &mut Tape,
    pred: NodeId,
    truth: NodeId,
    lambda_c: f64,
    lambda_v: f64,
) -> NodeId {
    let d = tape.sub(pred, truth);
    let sq = tape.square(d);
    let mean = tape.mean_all(sq);
    let mse = tape.scale(mean, 2.0); // mean over points of squared 2-norm

    let mu_p = tape.mean_over_rows(pred);
    let mu_t = tape.mean_over_rows(truth);
    let dc = tape.sub(mu_p, mu_t);
    let dc2 = tape.square(dc);
    let center = tape.sum_all(dc2);

    let var = |tape: &mut Tape, x: NodeId, mu: NodeId| {
        let xc = tape.broadcast_sub_row(x, mu);
        let sq = tape.square(xc);
        tape.mean_over_rows(sq)
    };
    let vp = var(tape, pred, mu_p);
    let vt = var(tape, truth, mu_t);
    let dv = tape.sub(vp, vt);
    let av = tape.abs(dv);
    let disp = tape.sum_all(av);

    let c_term = tape.scale(center, lambda_c);
    let v_term = tape.scale(disp, lambda_v);
    let a = tape.add(mse, c_term);
    tape.add(a, v_term)
}

/// Tape version of [`loss_velocity`].
pub fn loss_velocity_on_tape(tape: &mut Tape, pred: NodeId, truth: NodeId, sample_rate: f64) -> NodeId {
    let dp = tape.row_diff(pred);
    let vp = tape.scale(dp, sample_rate);
    let dt = tape.row_diff(truth);
    let vt = tape.scale(dt, sample_rate);
    let d = tape.sub(vp, vt);
    let sq = tape.square(d);
    let mean = tape.mean_all(sq);
    tape.scale(mean, 2.0)
}

// ---------------------------------------------------------------------------
// Schedules and optimizer
// ---------------------------------------------------------------------------

/// Cosine annealing: `lr0/2 * (1 + cos(pi * epoch / total))`, 1-based epoch.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    lr0 / 2.0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

/// Adam with canonical defaults; L2 regularization is part of the loss, not
/// a decoupled decay.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Adam { m: shapes.clone(), v: shapes, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update; `grads` follow [`ModelParams::named_tensors`] order.
    /// Parameters are re-quantized to f32 so checkpoints stay bit-exact.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        for (i, ((_, param), grad)) in params.named_tensors_mut().into_iter().zip(grads).enumerate()
        {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for j in 0..grad.len() {
                let g = grad.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                param.data_mut()[j] -= lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
            }
            param.round_to_f32();
        }
    }
}

// ---------------------------------------------------------------------------
// Sliding-window rollout (inference)
// ---------------------------------------------------------------------------

/// Anything that can forecast `horizon` steps from a `hist_len` window.
pub trait StepPredictor {
    fn hist_len(&self) -> usize;
    fn horizon(&self) -> usize;
    /// `window` is `[T, C]`, `times` is `[T]`; returns `[horizon, C]`.
    fn predict(&self, window: &Tensor, times: &Tensor) -> Result<Tensor>;
}

impl StepPredictor for Model {
    fn hist_len(&self) -> usize {
        self.cfg.hist_len
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn predict(&self, window: &Tensor, times: &Tensor) -> Result<Tensor> {
        if window.shape() != [self.cfg.hist_len, self.cfg.c_in] {
            return Err(Error::Shape(format!(
                "predict window {:?}, expected [{}, {}]",
                window.shape(),
                self.cfg.hist_len,
                self.cfg.c_in
            )));
        }
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&self.params, &mut tape);
        let x = tape.leaf(window.clone(), false);
        let out = forward_item(&mut tape, &self.cfg, &pn, x, times);
        Ok(tape.value(out).clone())
    }
}

/// Iterative rollout: forecast, keep the first `l_w` points, slide the
/// window, repeat until `tau` points exist. Returns `[tau, C]`.
pub fn sliding_rollout(
    model: &impl StepPredictor,
    history: &Tensor,
    times: &[f64],
    l_w: usize,
    tau: usize,
) -> Result<Tensor> {
    let t_len = model.hist_len();
    if l_w < 1 || l_w > model.horizon() {
        return Err(Error::Config(format!(
            "l_w must be in 1..={}, got {l_w}",
            model.horizon()
        )));
    }
    if history.shape().len() != 2 || history.shape()[0] < t_len {
        return Err(Error::InsufficientData(format!(
            "history {:?} shorter than window {t_len}",
            history.shape()
        )));
    }
    if times.len() != history.shape()[0] {
        return Err(Error::Shape("times length must match history".into()));
    }
    let c = history.shape()[1];
    let dt = mean_spacing(times);

    let mut buf = history.data().to_vec();
    let mut buf_times = times.to_vec();
    let mut out: Vec<f64> = Vec::with_capacity(tau * c);
    while out.len() < tau * c {
        let rows = buf.len() / c;
        let win = Tensor::new(vec![t_len, c], buf[(rows - t_len) * c..].to_vec());
        let wt0 = buf_times[rows - t_len];
        let wt = Tensor::new(
            vec![t_len],
            buf_times[rows - t_len..].iter().map(|t| t - wt0).collect(),
        );
        let pred = model.predict(&win, &wt)?;
        let remaining = tau - out.len() / c;
        let take = l_w.min(remaining);
        out.extend_from_slice(&pred.data()[..take * c]);
        buf.extend_from_slice(&pred.data()[..take * c]);
        let last_t = *buf_times.last().unwrap();
        buf_times.extend((1..=take).map(|i| last_t + i as f64 * dt));
    }
    Ok(Tensor::new(vec![tau, c], out))
}

pub fn mean_spacing(times: &[f64]) -> f64 {
    if times.len() < 2 {
        return 1.0 / DEFAULT_SAMPLE_RATE;
    }
    (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
}

// ---------------------------------------------------------------------------
// Training samples
// ---------------------------------------------------------------------------

/// One trial turned into a rollout task: the pre-onset history buffer and
/// the first `horizon` fixation-phase target positions.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub trial_id: String,
    /// `[H, 4]` with channels pos_x, pos_y, lin_speed, ang_speed;
    /// `hist_len <= H <= hist_buffer`.
    pub history: Tensor,
    /// Raw timestamps of the history rows.
    pub times: Vec<f64>,
    pub sample_rate: f64,
    /// `[horizon, 2]` fixation positions.
    pub target: Tensor,
}

fn sample_row(s: &crate::gaze::GazeSample) -> [f64; 4] {
    [s.pos[0], s.pos[1], s.lin_speed, s.ang_speed]
}

/// Builds rollout samples from segmented trials. Trials whose onset leaves
/// less than a full model window of history, or whose fixation phase is
/// shorter than the horizon, are reported as skipped.
pub fn assemble_samples(
    trials: &[Trial],
    mcfg: &ModelConfig,
    hist_buffer: usize,
) -> Result<(Vec<TrainSample>, Vec<(String, String)>)> {
    if mcfg.c_in != 4 {
        return Err(Error::Config(
            "trial featurization provides 4 channels; set model.c_in = 4".into(),
        ));
    }
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for trial in trials {
        let onset = match trial.fixation_onset {
            Some(o) => o,
            None => {
                skipped.push((trial.id.clone(), "no fixation onset".into()));
                continue;
            }
        };
        if onset < mcfg.hist_len {
            skipped.push((
                trial.id.clone(),
                format!("history {} shorter than window {}", onset, mcfg.hist_len),
            ));
            continue;
        }
        if trial.samples.len() - onset < mcfg.horizon {
            skipped.push((
                trial.id.clone(),
                format!(
                    "fixation phase {} shorter than horizon {}",
                    trial.samples.len() - onset,
                    mcfg.horizon
                ),
            ));
            continue;
        }
        let from = onset - hist_buffer.min(onset).max(mcfg.hist_len);
        let hist = &trial.samples[from..onset];
        let mut data = Vec::with_capacity(hist.len() * 4);
        for s in hist {
            data.extend_from_slice(&sample_row(s));
        }
        let times: Vec<f64> = hist.iter().map(|s| s.t).collect();
        let rate = 1.0 / mean_spacing(&times);
        let mut target = Vec::with_capacity(mcfg.horizon * 2);
        for s in &trial.samples[onset..onset + mcfg.horizon] {
            target.extend_from_slice(&s.pos);
        }
        samples.push(TrainSample {
            trial_id: trial.id.clone(),
            history: Tensor::new(vec![hist.len(), 4], data),
            times,
            sample_rate: rate,
            target: Tensor::new(vec![mcfg.horizon, 2], target),
        });
    }
    Ok((samples, skipped))
}

/// Training rollout on tape: identical window mechanics to
/// [`sliding_rollout`], but every window's forward lives on one tape so
/// gradients can flow through the whole rollout. Returns the `[tau, C]`
/// prediction node.
fn rollout_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pn: &ParamNodes,
    sample: &TrainSample,
    l_w: usize,
    detach_windows: bool,
) -> NodeId {
    let (t_len, tau) = (cfg.hist_len, cfg.horizon);
    let dt = mean_spacing(&sample.times);
    let hist = tape.leaf(sample.history.clone(), false);
    let mut buffer = vec![hist];
    let mut buf_times = sample.times.clone();
    let mut chunks: Vec<NodeId> = Vec::new();
    let mut produced = 0;
    while produced < tau {
        let joined = if buffer.len() == 1 { buffer[0] } else { tape.concat_rows(&buffer) };
        let rows = tape.value(joined).shape()[0];
        let win = tape.row_slice(joined, rows - t_len, rows);
        let wt0 = buf_times[rows - t_len];
        let wt = Tensor::new(
            vec![t_len],
            buf_times[rows - t_len..].iter().map(|t| t - wt0).collect(),
        );
        let pred = forward_item(tape, cfg, pn, win, &wt);
        let take = l_w.min(tau - produced);
        let chunk = tape.row_slice(pred, 0, take);
        chunks.push(chunk);
        let feedback = if detach_windows {
            let frozen = tape.value(chunk).clone();
            tape.constant(frozen)
        } else {
            chunk
        };
        buffer.push(feedback);
        let last_t = *buf_times.last().unwrap();
        buf_times.extend((1..=take).map(|i| last_t + i as f64 * dt));
        produced += take;
    }
    if chunks.len() == 1 {
        chunks[0]
    } else {
        tape.concat_rows(&chunks)
    }
}

/// Data term of the training loss for one sample (weight decay excluded).
fn item_loss_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pn: &ParamNodes,
    sample: &TrainSample,
    lcfg: &LossConfig,
    l_w: usize,
    detach_windows: bool,
) -> NodeId {
    let pred = rollout_on_tape(tape, cfg, pn, sample, l_w, detach_windows);
    let pos = tape.col_slice(pred, 0, 2);
    let truth = tape.constant(sample.target.clone());
    let comb = loss_comb_on_tape(tape, pos, truth, lcfg.lambda_c, lcfg.lambda_v);
    let vel = loss_velocity_on_tape(tape, pos, truth, sample.sample_rate);
    let a = tape.scale(comb, lcfg.lambda);
    let b = tape.scale(vel, 1.0 - lcfg.lambda);
    tape.add(a, b)
}

/// Mean data loss plus per-parameter gradients over a batch of samples.
/// Items run in parallel; the reduction order is fixed, so results do not
/// depend on the thread count.
fn batch_loss_and_grads(
    model: &Model,
    samples: &[&TrainSample],
    lcfg: &LossConfig,
    l_w: usize,
    detach_windows: bool,
) -> (f64, Vec<Tensor>) {
    let results: Vec<(f64, Vec<Tensor>)> = samples
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&model.params, &mut tape);
            let loss = item_loss_on_tape(&mut tape, &model.cfg, &pn, sample, lcfg, l_w, detach_windows);
            let value = tape.value(loss).item();
            let mut grads = tape.backward(loss);
            let per_param: Vec<Tensor> = pn
                .ordered_ids()
                .iter()
                .map(|id| {
                    grads[id.0]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape().to_vec()))
                })
                .collect();
            (value, per_param)
        })
        .collect();

    let n = samples.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = model
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for (value, grads) in results {
        total += value / n;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                *av += gv / n;
            }
        }
    }
    // L2 term and its exact gradient.
    if lcfg.weight_decay > 0.0 {
        total += l2_term(&model.params, lcfg.weight_decay);
        for ((name, t), a) in model.params.named_tensors().iter().zip(acc.iter_mut()) {
            if ModelParams::is_weight(name) {
                for (av, pv) in a.data_mut().iter_mut().zip(t.data()) {
                    *av += 2.0 * lcfg.weight_decay * pv;
                }
            }
        }
    }
    (total, acc)
}

/// Mean data loss over samples (values only), plus weight decay.
fn dataset_loss(
    model: &Model,
    samples: &[&TrainSample],
    lcfg: &LossConfig,
    l_w: usize,
) -> f64 {
    let data: f64 = samples
        .par_iter()
        .map(|sample| {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&model.params, &mut tape);
            let loss = item_loss_on_tape(&mut tape, &model.cfg, &pn, sample, lcfg, l_w, false);
            tape.value(loss).item()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        / samples.len() as f64;
    data + l2_term(&model.params, lcfg.weight_decay)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub skipped: Vec<(String, String)>,
}

impl TrainLog {
    /// `epoch,train_loss,val_loss,lr,alpha`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,alpha\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.alpha
            ));
        }
        out
    }
}

/// Trains on segmented (and optionally blended) trials: Adam with cosine
/// annealing, sliding-window rollouts, early stopping on held-out loss.
/// Returns the best-validation model and the per-epoch log.
///
/// RNG streams from `tcfg.seed`: 0 initializes parameters, 1 splits
/// train/validation, 2 shuffles batches each epoch.
pub fn train(
    corpus: &[Trial],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<(Model, TrainLog)> {
    mcfg.validate()?;
    tcfg.validate()?;
    lcfg.validate()?;
    let (samples, skipped) = assemble_samples(corpus, mcfg, tcfg.hist_buffer)?;
    if samples.len() < tcfg.batch_size {
        return Err(Error::Domain(format!(
            "corpus yields {} usable samples, smaller than one batch ({})",
            samples.len(),
            tcfg.batch_size
        )));
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    split_rng.set_stream(1);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    indices.shuffle(&mut split_rng);
    let n_val = ((samples.len() as f64 * tcfg.val_fraction).round() as usize).min(samples.len() - 1);
    let (val_idx, train_idx) = indices.split_at(n_val);
    let train_set: Vec<&TrainSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&TrainSample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let mut model = Model::init(mcfg.clone(), stream_seed(tcfg.seed, 0))?;
    let mut adam = Adam::new(&model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    shuffle_rng.set_stream(2);

    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        n_train: train_set.len(),
        n_val: val_set.len(),
        skipped,
    };
    let mut best_params = model.params.clone();
    let mut stale = 0usize;

    for epoch in 1..=tcfg.epochs {
        let lr = cosine_lr(tcfg.lr0, epoch, tcfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        let mut n_batches = 0;
        for batch_idx in order.chunks(tcfg.batch_size) {
            let batch: Vec<&TrainSample> = batch_idx.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) =
                batch_loss_and_grads(&model, &batch, lcfg, tcfg.window, tcfg.detach_windows);
            adam.step(&mut model.params, &grads, lr);
            train_loss += loss;
            n_batches += 1;
        }
        train_loss /= n_batches as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            dataset_loss(&model, &val_set, lcfg, tcfg.window)
        };
        log.epochs.push(EpochLog { epoch, train_loss, val_loss, lr, alpha: model.alpha() });

        if val_loss < log.best_val {
            log.best_val = val_loss;
            log.best_epoch = epoch;
            best_params = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok((model, log))
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(stream)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GroupStats {
    pub group: String,
    pub coords: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub coords_checked: usize,
    pub groups: Vec<GroupStats>,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Central finite differences (step 1e-4, f64 accumulation) against the
/// analytic gradients of the total loss on `samples`. At least
/// `min_coords` coordinates are drawn, spanning every parameter group.
pub fn grad_check(
    model: &Model,
    samples: &[TrainSample],
    lcfg: &LossConfig,
    tolerance: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    lcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("grad_check needs at least one sample".into()));
    }
    let refs: Vec<&TrainSample> = samples.iter().collect();
    // Single-window rollout: the checked quantity is exactly
    // total_loss(forward(x), truth).
    let l_w = model.cfg.horizon;
    let (_, analytic) = batch_loss_and_grads(model, &refs, lcfg, l_w, false);

    let names: Vec<String> = model.params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut group_names: Vec<&'static str> = names.iter().map(|n| ModelParams::group_of(n)).collect();
    group_names.dedup();
    let groups: Vec<&'static str> = {
        let mut seen = Vec::new();
        for g in group_names.drain(..) {
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
        seen
    };
    let per_group = min_coords.div_ceil(groups.len());

    let sizes: Vec<usize> = model.params.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::new(); // (tensor index, coord)
    let mut seen = std::collections::HashSet::new();
    let mut draw_from = |members: &[(usize, usize)], want: usize,
                         rng: &mut ChaCha8Rng,
                         picks: &mut Vec<(usize, usize)>,
                         seen: &mut std::collections::HashSet<(usize, usize)>| {
        let total: usize = members.iter().map(|(_, l)| l).sum();
        let want = want.min(total);
        let mut drawn = 0;
        let mut attempts = 0usize;
        while drawn < want && attempts < want.saturating_mul(1000) + 1000 {
            attempts += 1;
            let mut flat = rng.gen_range(0..total);
            for &(ti, len) in members {
                if flat < len {
                    if seen.insert((ti, flat)) {
                        picks.push((ti, flat));
                        drawn += 1;
                    }
                    break;
                }
                flat -= len;
            }
        }
    };
    let all_members: Vec<(usize, usize)> = sizes.iter().copied().enumerate().collect();
    for group in &groups {
        let members: Vec<(usize, usize)> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| ModelParams::group_of(n) == *group)
            .map(|(i, _)| (i, sizes[i]))
            .collect();
        draw_from(&members, per_group, &mut rng, &mut picks, &mut seen);
    }
    // Small groups cap at their size; top the sample back up from all params.
    if picks.len() < min_coords {
        let deficit = min_coords - picks.len();
        draw_from(&all_members, deficit, &mut rng, &mut picks, &mut seen);
    }

    let h = 1e-4;
    let evals: Vec<(usize, usize, f64)> = picks
        .par_iter()
        .map(|&(ti, coord)| {
            let eval = |delta: f64| -> f64 {
                let mut m = model.clone();
                m.params.named_tensors_mut()[ti].1.data_mut()[coord] += delta;
                let refs: Vec<&TrainSample> = samples.iter().collect();
                let data: f64 = refs
                    .iter()
                    .map(|s| {
                        let mut tape = Tape::new();
                        let pn = ParamNodes::register(&m.params, &mut tape);
                        let loss = item_loss_on_tape(&mut tape, &m.cfg, &pn, s, lcfg, l_w, false);
                        tape.value(loss).item()
                    })
                    .sum::<f64>()
                    / refs.len() as f64;
                data + l2_term(&m.params, lcfg.weight_decay)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            (ti, coord, numeric)
        })
        .collect();

    let mut stats: Vec<(String, usize, f64, f64)> =
        groups.iter().map(|g| (g.to_string(), 0, 0.0, 0.0)).collect();
    let mut failures = Vec::new();
    for (ti, coord, numeric) in evals {
        let a = analytic[ti].data()[coord];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        let gi = groups
            .iter()
            .position(|g| *g == ModelParams::group_of(&names[ti]))
            .unwrap();
        stats[gi].1 += 1;
        stats[gi].2 = stats[gi].2.max(rel);
        stats[gi].3 += rel;
        if rel >= tolerance {
            failures.push(GradFailure {
                param: names[ti].clone(),
                index: coord,
                analytic: a,
                numeric,
                rel,
            });
        }
    }
    let coords_checked = stats.iter().map(|s| s.1).sum();
    Ok(GradCheckReport {
        tolerance,
        coords_checked,
        groups: stats
            .into_iter()
            .map(|(group, coords, max_rel, sum)| GroupStats {
                group,
                coords,
                max_rel,
                mean_rel: if coords > 0 { sum / coords as f64 } else { 0.0 },
            })
            .collect(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::GazeSample;
    use crate::model::Projection;
    use proptest::prelude::*;
    use std::cell::Cell;

    #[test]
    fn loss_comb_zero_at_identity() {
        let pts = vec![[0.1, 0.2], [0.3, -0.1], [0.0, 0.0]];
        assert_eq!(loss_comb(&pts, &pts, 0.001, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn loss_comb_translation_example() {
        let truth = vec![[0.0, 0.0], [0.2, 0.1], [-0.1, 0.3]];
        let pred: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 0.1, p[1]]).collect();
        let (mse, center, disp) = loss_comb_parts(&pred, &truth).unwrap();
        assert!((mse - 0.01).abs() < 1e-12);
        assert!((center - 0.01).abs() < 1e-12);
        assert!(disp.abs() < 1e-12);
        let total = loss_comb(&pred, &truth, 0.001, 0.05).unwrap();
        assert!((total - (0.01 + 0.001 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn loss_comb_dispersion_example() {
        let truth = vec![[1.0, 0.0], [-1.0, 0.0]];
        let pred = vec![[2.0, 0.0], [-2.0, 0.0]];
        let (mse, center, disp) = loss_comb_parts(&pred, &truth).unwrap();
        assert!((mse - 1.0).abs() < 1e-12);
        assert!(center.abs() < 1e-12);
        assert!((disp - 3.0).abs() < 1e-12);
        let total = loss_comb(&pred, &truth, 0.001, 0.05).unwrap();
        assert!((total - (1.0 + 0.05 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_comb_rejects_mismatch() {
        let a = vec![[0.0, 0.0]];
        let b = vec![[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(loss_comb(&a, &b, 0.0, 0.0), Err(Error::Shape(_))));
        assert!(loss_comb(&[], &[], 0.0, 0.0).is_err());
    }

    #[test]
    fn loss_velocity_examples() {
        let truth = vec![[0.0, 0.0], [0.1, 0.0], [0.2, 0.1]];
        assert_eq!(loss_velocity(&truth, &truth, 60.0).unwrap(), 0.0);
        let shifted: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 5.0, p[1] - 2.0]).collect();
        assert!(loss_velocity(&shifted, &truth, 60.0).unwrap() < 1e-20);
        // velocities uniformly 1 m/s above truth on each axis
        let k = 5;
        let dt = 1.0 / 60.0;
        let truth: Vec<[f64; 2]> = (0..k).map(|i| [0.01 * i as f64, 0.0]).collect();
        let pred: Vec<[f64; 2]> = (0..k)
            .map(|i| [0.01 * i as f64 + dt * i as f64, dt * i as f64])
            .collect();
        let v = loss_velocity(&pred, &truth, 60.0).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn loss_velocity_needs_two_points() {
        let one = vec![[0.0, 0.0]];
        assert!(matches!(
            loss_velocity(&one, &one, 60.0),
            Err(Error::InsufficientData(_))
        ));
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            c_in: 4,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            top_k_periods: 2,
            inception_kernels: vec![1, 3],
            hist_len: 16,
            horizon: 8,
            ..Default::default()
        };
        Model::init(cfg, 17).unwrap()
    }

    #[test]
    fn total_loss_endpoints() {
        let model = tiny_model();
        let truth = vec![[0.0, 0.0], [0.1, 0.05], [0.15, 0.2]];
        let pred = vec![[0.02, 0.01], [0.12, 0.0], [0.1, 0.24]];
        let comb_only = LossConfig { lambda: 1.0, weight_decay: 0.0, ..Default::default() };
        let got = total_loss(&pred, &truth, &comb_only, &model.params, 60.0).unwrap();
        let want = loss_comb(&pred, &truth, comb_only.lambda_c, comb_only.lambda_v).unwrap();
        assert_eq!(got, want);
        let vel_only = LossConfig { lambda: 0.0, weight_decay: 0.0, ..Default::default() };
        let got = total_loss(&pred, &truth, &vel_only, &model.params, 60.0).unwrap();
        assert_eq!(got, loss_velocity(&pred, &truth, 60.0).unwrap());
    }

    #[test]
    fn default_lambda_matches_adopted_setting() {
        assert_eq!(LossConfig::default().lambda, 0.9);
        assert_eq!(LossConfig::default().lambda_c, 0.001);
        assert_eq!(LossConfig::default().lambda_v, 0.05);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let e = 40;
        assert!(cosine_lr(0.001, e, e).abs() < 1e-18);
        assert!((cosine_lr(0.001, e / 2, e) - 0.0005).abs() < 1e-12);
        assert!(cosine_lr(0.001, 1, e) < 0.001);
    }

    #[test]
    fn tape_losses_match_plain() {
        let truth = vec![[0.0, 0.0], [0.2, 0.1], [-0.1, 0.3], [0.4, -0.2]];
        let pred = vec![[0.05, -0.02], [0.18, 0.12], [-0.2, 0.25], [0.35, -0.1]];
        let to_tensor = |pts: &Vec<[f64; 2]>| {
            Tensor::new(vec![pts.len(), 2], pts.iter().flatten().copied().collect())
        };
        let mut tape = Tape::new();
        let p = tape.constant(to_tensor(&pred));
        let t = tape.constant(to_tensor(&truth));
        let comb = loss_comb_on_tape(&mut tape, p, t, 0.001, 0.05);
        let vel = loss_velocity_on_tape(&mut tape, p, t, 60.0);
        assert!(
            (tape.value(comb).item() - loss_comb(&pred, &truth, 0.001, 0.05).unwrap()).abs() < 1e-12
        );
        assert!(
            (tape.value(vel).item() - loss_velocity(&pred, &truth, 60.0).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn comb_gradient_vanishes_at_identity() {
        let pts = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.05]);
        let mut tape = Tape::new();
        let p = tape.leaf(pts.clone(), true);
        let t = tape.constant(pts);
        let loss = loss_comb_on_tape(&mut tape, p, t, 0.001, 0.05);
        let grads = tape.backward(loss);
        let g = grads[p.0].as_ref().unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn comb_nonnegative_and_zero_iff_equal(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..20),
            deltas in proptest::collection::vec((-0.1f64..0.1, -0.1f64..0.1), 2..20),
        ) {
            let n = pts.len().min(deltas.len());
            let truth: Vec<[f64; 2]> = pts[..n].iter().map(|&(x, y)| [x, y]).collect();
            let pred: Vec<[f64; 2]> = truth
                .iter()
                .zip(&deltas[..n])
                .map(|(p, &(dx, dy))| [p[0] + dx, p[1] + dy])
                .collect();
            let l = loss_comb(&pred, &truth, 0.001, 0.05).unwrap();
            prop_assert!(l >= 0.0);
            let all_equal = pred.iter().zip(&truth).all(|(a, b)| a == b);
            prop_assert_eq!(l == 0.0, all_equal);
        }

        #[test]
        fn center_and_dispersion_invariant_under_pred_permutation(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3..12),
            rot in 1usize..11,
        ) {
            let truth: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let pred: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] * 1.1 + 0.02, p[1] - 0.01]).collect();
            let mut rotated = pred.clone();
            rotated.rotate_left(rot % pred.len());
            let (_, c1, d1) = loss_comb_parts(&pred, &truth).unwrap();
            let (_, c2, d2) = loss_comb_parts(&rotated, &truth).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-12);
            prop_assert!((d1 - d2).abs() < 1e-12);
        }
    }

    struct Echo {
        t: usize,
        tau: usize,
    }

    impl StepPredictor for Echo {
        fn hist_len(&self) -> usize {
            self.t
        }
        fn horizon(&self) -> usize {
            self.tau
        }
        fn predict(&self, window: &Tensor, _times: &Tensor) -> Result<Tensor> {
            let c = window.shape()[1];
            let last = &window.data()[(self.t - 1) * c..];
            let mut data = Vec::with_capacity(self.tau * c);
            for _ in 0..self.tau {
                data.extend_from_slice(last);
            }
            Ok(Tensor::new(vec![self.tau, c], data))
        }
    }

    struct Counting<'a, M: StepPredictor> {
        inner: &'a M,
        calls: Cell<usize>,
    }

    impl<M: StepPredictor> StepPredictor for Counting<'_, M> {
        fn hist_len(&self) -> usize {
            self.inner.hist_len()
        }
        fn horizon(&self) -> usize {
            self.inner.horizon()
        }
        fn predict(&self, window: &Tensor, times: &Tensor) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            self.inner.predict(window, times)
        }
    }

    fn ramp_history(rows: usize, c: usize) -> (Tensor, Vec<f64>) {
        let data = (0..rows * c).map(|i| i as f64 * 0.01).collect();
        let times = (0..rows).map(|i| i as f64 / 60.0).collect();
        (Tensor::new(vec![rows, c], data), times)
    }

    #[test]
    fn rollout_echo_produces_constant_sequence() {
        let echo = Echo { t: 6, tau: 5 };
        let (hist, times) = ramp_history(10, 3);
        let out = sliding_rollout(&echo, &hist, &times, 2, 5).unwrap();
        let last = &hist.data()[9 * 3..];
        for row in out.data().chunks_exact(3) {
            assert_eq!(row, last);
        }
    }

    #[test]
    fn rollout_call_counts_and_truncation() {
        let echo = Echo { t: 6, tau: 8 };
        let (hist, times) = ramp_history(10, 2);
        let counting = Counting { inner: &echo, calls: Cell::new(0) };
        let out = sliding_rollout(&counting, &hist, &times, 3, 8).unwrap();
        assert_eq!(out.shape(), &[8, 2]);
        assert_eq!(counting.calls.get(), 3); // ceil(8/3)
        let counting = Counting { inner: &echo, calls: Cell::new(0) };
        sliding_rollout(&counting, &hist, &times, 8, 8).unwrap();
        assert_eq!(counting.calls.get(), 1);
    }

    #[test]
    fn rollout_rejects_bad_args() {
        let echo = Echo { t: 6, tau: 4 };
        let (hist, times) = ramp_history(10, 2);
        assert!(matches!(
            sliding_rollout(&echo, &hist, &times, 0, 4),
            Err(Error::Config(_))
        ));
        let (short, st) = ramp_history(4, 2);
        assert!(sliding_rollout(&echo, &short, &st, 2, 4).is_err());
    }

    fn make_trial(id: &str, onset: usize, len: usize, target: [f64; 2], phase: f64) -> Trial {
        let samples: Vec<GazeSample> = (0..len)
            .map(|i| {
                let mut s = GazeSample::new(i as f64 / 60.0, [0.0, 0.0]);
                if i < onset {
                    let u = i as f64 / onset as f64;
                    s.pos = [
                        -0.7 + u * (target[0] + 0.7) + 0.01 * (phase + i as f64).sin(),
                        0.5 + u * (target[1] - 0.5),
                    ];
                } else {
                    let w = (phase + i as f64 * 0.7).sin() * 0.02;
                    s.pos = [target[0] + w, target[1] - 0.5 * w];
                }
                s.lin_speed = 0.5;
                s.ang_speed = 5.0;
                s
            })
            .collect();
        let mut t = Trial::new(id, target, samples);
        t.fixation_onset = Some(onset);
        t
    }

    fn tiny_corpus(n: usize) -> Vec<Trial> {
        (0..n)
            .map(|i| {
                make_trial(
                    &format!("t{i}"),
                    20 + i % 5,
                    48,
                    [0.3 - 0.02 * (i % 7) as f64, -0.2 + 0.015 * (i % 5) as f64],
                    i as f64,
                )
            })
            .collect()
    }

    #[test]
    fn assemble_skips_short_histories() {
        let mcfg = tiny_model().cfg;
        let mut trials = tiny_corpus(4);
        trials[1].fixation_onset = Some(8); // < hist_len 16
        trials[2].fixation_onset = None;
        let (samples, skipped) = assemble_samples(&trials, &mcfg, 24).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(skipped.len(), 2);
    }

    #[test]
    fn tape_rollout_matches_public_rollout() {
        let model = tiny_model();
        let trials = tiny_corpus(1);
        let (samples, _) = assemble_samples(&trials, &model.cfg, 24).unwrap();
        let s = &samples[0];
        for l_w in [3, 4, 8] {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&model.params, &mut tape);
            let node = rollout_on_tape(&mut tape, &model.cfg, &pn, s, l_w, false);
            let on_tape = tape.value(node).clone();
            let public = sliding_rollout(&model, &s.history, &s.times, l_w, model.cfg.horizon).unwrap();
            assert_eq!(on_tape.shape(), public.shape());
            for (a, b) in on_tape.data().iter().zip(public.data()) {
                assert!((a - b).abs() < 1e-12, "l_w {l_w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn grad_check_passes_on_small_config() {
        let model = tiny_model();
        let trials = tiny_corpus(3);
        let (samples, _) = assemble_samples(&trials, &model.cfg, 24).unwrap();
        let report = grad_check(&model, &samples[..2], &LossConfig::default(), 1e-4, 70, 5).unwrap();
        assert!(
            report.passed(),
            "failures: {:?}",
            &report.failures[..report.failures.len().min(5)]
        );
        assert!(report.coords_checked >= 70);
        assert_eq!(report.groups.len(), 7, "every parameter group sampled");
    }

    #[test]
    fn alpha_gradient_matches_branch_contraction() {
        let model = tiny_model();
        let l_len = model.cfg.total_len();
        let d = model.cfg.d_model;
        let c = model.cfg.c_in;
        let y_data: Vec<f64> = (0..l_len * d).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect();
        let y = Tensor::new(vec![l_len, d], y_data);
        let target: Vec<f64> = (0..l_len * c).map(|i| ((i * 13 % 89) as f64 / 89.0) - 0.5).collect();

        // frozen branch outputs
        let branch = |proj: Projection| {
            let mut m = model.clone();
            m.cfg.projection = proj;
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&m.params, &mut tape);
            let yn = tape.constant(y.clone());
            let out = crate::model::project_item(&mut tape, &m.cfg, &pn, yn);
            tape.value(out).clone()
        };
        let a = branch(Projection::MhaOnly);
        let l = branch(Projection::LinearOnly);

        // tape gradient of mean squared error w.r.t. raw_alpha
        let mut tape = Tape::new();
        let pn = ParamNodes::register(&model.params, &mut tape);
        let yn = tape.constant(y.clone());
        let fused = crate::model::project_item(&mut tape, &model.cfg, &pn, yn);
        let tgt = tape.constant(Tensor::new(vec![l_len, c], target.clone()));
        let diff = tape.sub(fused, tgt);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let d_raw = grads[pn.raw_alpha.0].as_ref().unwrap().item();

        // analytic: dL/dalpha = sum (A - L) .* 2(Yhat - target)/n
        let alpha = model.alpha();
        let n = (l_len * c) as f64;
        let mut d_alpha = 0.0;
        for i in 0..l_len * c {
            let fused_v = alpha * a.data()[i] + (1.0 - alpha) * l.data()[i];
            d_alpha += (a.data()[i] - l.data()[i]) * 2.0 * (fused_v - target[i]) / n;
        }
        let want = d_alpha * alpha * (1.0 - alpha); // chain through sigmoid
        assert!(
            (d_raw - want).abs() / want.abs().max(1e-12) < 1e-9,
            "tape {d_raw} vs contraction {want}"
        );
        assert_eq!(d_raw.signum(), want.signum());
    }

    fn fast_tcfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            patience: 2,
            batch_size: 4,
            window: 4,
            hist_buffer: 24,
            val_fraction: 0.25,
            ..Default::default()
        }
    }

    #[test]
    fn train_is_deterministic() {
        let corpus = tiny_corpus(8);
        let mcfg = tiny_model().cfg;
        let (m1, log1) = train(&corpus, &mcfg, &fast_tcfg(), &LossConfig::default()).unwrap();
        let (m2, log2) = train(&corpus, &mcfg, &fast_tcfg(), &LossConfig::default()).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn train_rejects_sub_batch_corpus() {
        let corpus = tiny_corpus(2);
        let mcfg = tiny_model().cfg;
        let tcfg = TrainConfig { batch_size: 16, ..fast_tcfg() };
        assert!(matches!(
            train(&corpus, &mcfg, &tcfg, &LossConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn early_stopping_returns_best_checkpoint() {
        let corpus = tiny_corpus(10);
        let mcfg = tiny_model().cfg;
        let tcfg = TrainConfig { epochs: 6, patience: 2, ..fast_tcfg() };
        let lcfg = LossConfig::default();
        let (model, log) = train(&corpus, &mcfg, &tcfg, &lcfg).unwrap();
        let min_val = log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_val, min_val);
        // the returned parameters reproduce the logged best validation loss
        let (samples, _) = assemble_samples(&corpus, &mcfg, tcfg.hist_buffer).unwrap();
        let mut split_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        split_rng.set_stream(1);
        let mut indices: Vec<usize> = (0..samples.len()).collect();
        indices.shuffle(&mut split_rng);
        let n_val = ((samples.len() as f64 * tcfg.val_fraction).round() as usize).min(samples.len() - 1);
        let val: Vec<&TrainSample> = indices[..n_val].iter().map(|&i| &samples[i]).collect();
        let recomputed = dataset_loss(&model, &val, &lcfg, tcfg.window);
        assert!((recomputed - log.best_val).abs() < 1e-12);
    }

    #[test]
    fn train_log_csv_format() {
        let corpus = tiny_corpus(8);
        let mcfg = tiny_model().cfg;
        let (_, log) = train(&corpus, &mcfg, &fast_tcfg(), &LossConfig::default()).unwrap();
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss,lr,alpha");
        assert_eq!(csv.lines().count(), log.epochs.len() + 1);
    }
}
