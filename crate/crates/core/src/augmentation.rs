//! Synthetic fixation sequences and corpus blending.
//!
//! A synthetic trial copies the search phase unchanged and contracts every
//! fixation-phase point toward the target: `p' = g + beta * (p - g)`.
//! Linear speeds are recomputed from the contracted positions at the 60 Hz
//! sampling interval; angular speeds are rebuilt from gaze rays when the
//! trial carries gaze origins, otherwise scaled by `beta` as a first-order
//! approximation (the method used is recorded in the trial's metadata).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gaze::Trial;

pub const SAMPLE_RATE: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Contraction strength, open interval (0, 1). Smaller values converge
    /// harder toward the target.
    pub beta: f64,
    /// Fraction of the blended corpus that is synthetic, in [0, 1).
    pub blend_ratio: f64,
    pub rng_seed: u64,
    /// Apply the contraction as `g + beta * p` instead of the
    /// target-relative `g + beta * (p - g)`. Audit switch only.
    pub literal_formula: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            beta: 0.5,
            blend_ratio: 0.5,
            rng_seed: 42,
            literal_formula: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Domain(format!(
                "beta must be in (0, 1), got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.blend_ratio) {
            return Err(Error::Domain(format!(
                "blend_ratio must be in [0, 1], got {}",
                self.blend_ratio
            )));
        }
        Ok(())
    }
}

fn ray_dir(origin: [f64; 3], plane_point: [f64; 2], plane_distance: f64) -> [f64; 3] {
    let v = [
        plane_point[0] - origin[0],
        plane_point[1] - origin[1],
        plane_distance - origin[2],
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Contracts the fixation phase of `trial` toward its target.
pub fn synthesize_trial(trial: &Trial, beta: f64) -> Result<Trial> {
    synthesize_trial_with(trial, beta, false)
}

pub fn synthesize_trial_with(trial: &Trial, beta: f64, literal_formula: bool) -> Result<Trial> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta must be in (0, 1), got {beta}")));
    }
    let onset = trial.fixation_onset.ok_or_else(|| {
        Error::State(format!(
            "trial '{}' must be segmented before synthesis",
            trial.id
        ))
    })?;
    let g = trial.target;
    let mut out = trial.clone();
    out.id = format!("{}-syn", trial.id);
    out.synthetic = Some(true);
    out.beta = Some(beta);

    for s in &mut out.samples[onset..] {
        let p = s.pos;
        s.pos = if literal_formula {
            [g[0] + beta * p[0], g[1] + beta * p[1]]
        } else {
            [g[0] + beta * (p[0] - g[0]), g[1] + beta * (p[1] - g[1])]
        };
    }

    let dt = 1.0 / SAMPLE_RATE;
    let rays_available = trial
        .samples
        .iter()
        .skip(onset.saturating_sub(1))
        .all(|s| s.gaze_origin.is_some());
    for i in onset..out.samples.len() {
        if i == 0 {
            continue; // backfilled below
        }
        let prev = out.samples[i - 1].pos;
        let cur = out.samples[i].pos;
        let dx = cur[0] - prev[0];
        let dy = cur[1] - prev[1];
        out.samples[i].lin_speed = (dx * dx + dy * dy).sqrt() / dt;
        if rays_available {
            let d0 = ray_dir(out.samples[i - 1].gaze_origin.unwrap(), prev, out.plane_distance);
            let d1 = ray_dir(out.samples[i].gaze_origin.unwrap(), cur, out.plane_distance);
            out.samples[i].ang_speed = angle_deg(d0, d1) / dt;
        } else {
            out.samples[i].ang_speed *= beta;
        }
    }
    if onset == 0 && out.samples.len() > 1 {
        out.samples[0].lin_speed = out.samples[1].lin_speed;
        out.samples[0].ang_speed = out.samples[1].ang_speed;
    }
    out.extra.insert(
        "ang_speed_method".into(),
        Value::String(if rays_available { "ray" } else { "scaled" }.into()),
    );
    Ok(out)
}

/// Blends real trials with seeded synthetic counterparts so the synthetic
/// fraction approximates `blend_ratio`, then shuffles. All real trials are
/// always retained.
pub fn blend_corpus(real: &[Trial], cfg: &AugmentConfig) -> Result<Vec<Trial>> {
    if real.is_empty() {
        return Err(Error::Domain("blend_corpus requires a nonempty corpus".into()));
    }
    cfg.validate()?;
    if cfg.blend_ratio >= 1.0 {
        return Err(Error::Domain(
            "blend_ratio = 1 is unreachable: real trials are always retained".into(),
        ));
    }
    if let Some(t) = real.iter().find(|t| t.fixation_onset.is_none()) {
        return Err(Error::State(format!(
            "trial '{}' has no fixation onset; segment the corpus first",
            t.id
        )));
    }
    let n = real.len();
    // s / (s + n) = ratio  =>  s = n * ratio / (1 - ratio)
    let synth_count = (n as f64 * cfg.blend_ratio / (1.0 - cfg.blend_ratio)).round() as usize;

    // Stream 0 picks sources, stream 1 shuffles the blended corpus.
    let mut pick_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    pick_rng.set_stream(0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut pick_rng);

    let mut out: Vec<Trial> = real.to_vec();
    let mut uses = vec![0usize; n];
    for k in 0..synth_count {
        let src = order[k % n];
        uses[src] += 1;
        let mut syn = synthesize_trial_with(&real[src], cfg.beta, cfg.literal_formula)?;
        if uses[src] > 1 {
            syn.id = format!("{}{}", syn.id, uses[src]);
        }
        out.push(syn);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    shuffle_rng.set_stream(1);
    out.shuffle(&mut shuffle_rng);
    Ok(out)
}
