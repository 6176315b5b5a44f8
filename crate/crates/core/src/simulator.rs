//! Desk-scale trial generator.
//!
//! Each trial is a dwell on a start marker, a minimum-jerk movement toward
//! the target (landing at the target plus a per-trial bias), and a noisy
//! fixation. Fixation noise is AR(1) per axis so its marginal standard
//! deviation equals `fixation_noise_sigma` while frame-to-frame jumps stay
//! small enough that angular speeds sit well below the 20 deg/s onset
//! threshold, as in the logged data this mimics.
//!
//! Every emitted trial passes the default cleaning rules: candidates that
//! would be excluded are redrawn from a fresh, index-derived RNG stream, so
//! corpora stay deterministic under a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gaze::{angular_speed_from_plane, derive_velocities, FixationConfig, GazeSample, Trial};
use crate::segmentation::{clean_corpus, CleaningRules};

/// Smoothness of fixation noise: AR(1) coefficient.
const NOISE_RHO: f64 = 0.95;
/// Start/target inset from the plane edge, meters.
const EDGE_MARGIN: f64 = 0.15;
/// Minimum start-to-target separation, meters.
const MIN_SEPARATION: f64 = 0.5;
const MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_trials: usize,
    pub sample_rate: f64,
    pub trial_len: usize,
    pub plane_extent: f64,
    /// Peak linear speed of the minimum-jerk movement, m/s.
    pub saccade_peak_speed: f64,
    /// Marginal std of per-sample fixation noise, meters.
    pub fixation_noise_sigma: f64,
    /// Std of the per-trial constant offset from the target, meters.
    pub fixation_bias_sigma: f64,
    /// Inclusive sample-index interval for the nominal fixation onset.
    pub onset_range: [usize; 2],
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_trials: 200,
            sample_rate: 60.0,
            trial_len: 300,
            plane_extent: 2.0,
            saccade_peak_speed: 6.0,
            fixation_noise_sigma: 0.02,
            fixation_bias_sigma: 0.015,
            onset_range: [60, 120],
            rng_seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trial_len <= self.onset_range[1] {
            return Err(Error::Config(format!(
                "trial_len ({}) must exceed max onset ({})",
                self.trial_len, self.onset_range[1]
            )));
        }
        if self.onset_range[0] > self.onset_range[1] {
            return Err(Error::Config("onset_range must be ordered".into()));
        }
        if self.fixation_noise_sigma < 0.0 || self.fixation_bias_sigma < 0.0 {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        if self.sample_rate <= 0.0 || self.plane_extent <= 0.0 || self.saccade_peak_speed <= 0.0 {
            return Err(Error::Config(
                "sample_rate, plane_extent and saccade_peak_speed must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Minimum-jerk progress profile: smooth 0 -> 1 with zero endpoint velocity.
fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

struct Ar1 {
    state: [f64; 2],
    innovation: f64,
}

impl Ar1 {
    fn new(sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        // Start from the stationary distribution.
        let state = [sigma * normal.sample(rng), sigma * normal.sample(rng)];
        Ar1 {
            state,
            innovation: sigma * (1.0 - NOISE_RHO * NOISE_RHO).sqrt(),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let normal = Normal::new(0.0, 1.0).unwrap();
        for v in &mut self.state {
            *v = NOISE_RHO * *v + self.innovation * normal.sample(rng);
        }
        self.state
    }
}

/// Draws one trial. Velocities are filled, fixation onset is not: that is
/// the segmentation stage's job.
pub fn simulate_trial(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Trial> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let half = cfg.plane_extent / 2.0 - EDGE_MARGIN;
    let (start, target) = loop {
        let s = [rng.gen_range(-half..half), rng.gen_range(-half..half)];
        let g = [rng.gen_range(-half..half), rng.gen_range(-half..half)];
        let d = ((s[0] - g[0]).powi(2) + (s[1] - g[1]).powi(2)).sqrt();
        if d >= MIN_SEPARATION {
            break (s, g);
        }
    };
    let onset = rng.gen_range(cfg.onset_range[0]..=cfg.onset_range[1]);
    let bias = [
        cfg.fixation_bias_sigma * normal.sample(rng),
        cfg.fixation_bias_sigma * normal.sample(rng),
    ];
    let landing = [target[0] + bias[0], target[1] + bias[1]];

    let dist = ((landing[0] - start[0]).powi(2) + (landing[1] - start[1]).powi(2)).sqrt();
    // Minimum-jerk peak speed is 1.875 * distance / duration.
    let move_samples = ((1.875 * dist / cfg.saccade_peak_speed) * cfg.sample_rate)
        .round()
        .max(6.0) as usize;
    let move_samples = move_samples.min(onset.max(6));
    let move_start = onset - move_samples.min(onset);

    let mut dwell_noise = Ar1::new(cfg.fixation_noise_sigma, rng);
    let mut fix_noise = Ar1::new(cfg.fixation_noise_sigma, rng);
    let u_sigma = if cfg.fixation_noise_sigma > 0.0 { 0.01 } else { 0.0 };

    let mut samples = Vec::with_capacity(cfg.trial_len);
    for i in 0..cfg.trial_len {
        let pos = if i < move_start {
            let n = dwell_noise.step(rng);
            [start[0] + n[0], start[1] + n[1]]
        } else if i < onset {
            let u = (i - move_start) as f64 / move_samples as f64;
            let u = (u + u_sigma * normal.sample(rng)).clamp(0.0, 1.0);
            let p = min_jerk(u);
            [
                start[0] + p * (landing[0] - start[0]),
                start[1] + p * (landing[1] - start[1]),
            ]
        } else {
            let n = fix_noise.step(rng);
            [landing[0] + n[0], landing[1] + n[1]]
        };
        samples.push(GazeSample::new(i as f64 / cfg.sample_rate, pos));
    }

    derive_velocities(&mut samples, cfg.sample_rate)?;
    angular_speed_from_plane(&mut samples, cfg.sample_rate, 3.0)?;

    let mut trial = Trial::new("sim", target, samples);
    trial.plane_extent = cfg.plane_extent;
    trial.extra.insert("sim_nominal_onset".into(), json!(onset));
    trial.extra.insert("sim_move_start".into(), json!(move_start));
    trial.extra.insert("sim_landing".into(), json!([landing[0], landing[1]]));
    Ok(trial)
}

fn passes_cleaning(trial: &Trial, cfg: &SimConfig) -> bool {
    let rules = CleaningRules {
        plane_extent: cfg.plane_extent,
        ..CleaningRules::default()
    };
    match clean_corpus(std::slice::from_ref(trial), &rules, &FixationConfig::default()) {
        Ok((kept, _)) => !kept.is_empty(),
        Err(_) => false,
    }
}

/// Generates `n_trials` independent trials from index-derived RNG streams.
pub fn simulate_corpus(cfg: &SimConfig) -> Result<Vec<Trial>> {
    cfg.validate()?;
    (0..cfg.n_trials)
        .into_par_iter()
        .map(|i| {
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
                rng.set_stream(i as u64 * MAX_ATTEMPTS + attempt);
                let mut trial = simulate_trial(cfg, &mut rng)?;
                trial.id = format!("sim{i:04}");
                if passes_cleaning(&trial, cfg) {
                    return Ok(trial);
                }
            }
            Err(Error::Domain(format!(
                "trial {i}: no cleaning-rule-compatible draw in {MAX_ATTEMPTS} attempts"
            )))
        })
        .collect()
}
