//! Stabilization metrics and corpus evaluation.
//!
//! CI is the ratio of raw to predicted root-mean-square distance to the
//! target, AI the ratio of mean distances, AD the mean predicted distance in
//! meters. Both ratios read raw-over-predicted, so values above 1 mean the
//! prediction improved on the raw gaze.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::Trial;
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::training::{assemble_samples, sliding_rollout, StepPredictor, TrainSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Denominator guard for the improvement ratios.
    pub epsilon: f64,
    /// Sliding-window stride used for rollouts.
    pub window: usize,
    pub hist_buffer: usize,
    /// Wall-clock the rollouts (serial pass). Disable for byte-stable
    /// reports.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { epsilon: 1e-9, window: 16, hist_buffer: 96, timing: true }
    }
}

fn dists(points: &[[f64; 2]], target: [f64; 2]) -> Vec<f64> {
    points
        .iter()
        .map(|p| ((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2)).sqrt())
        .collect()
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn nonempty(name: &str, a: &[[f64; 2]]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Domain(format!("{name}: point set is empty")));
    }
    Ok(())
}

/// Ratio of raw to predicted RMS distance-to-target.
pub fn concentration_improvement(
    raw: &[[f64; 2]],
    pred: &[[f64; 2]],
    target: [f64; 2],
    eps: f64,
) -> Result<f64> {
    nonempty("concentration_improvement", raw)?;
    nonempty("concentration_improvement", pred)?;
    Ok(rms(&dists(raw, target)) / (rms(&dists(pred, target)) + eps))
}

/// Ratio of raw to predicted mean distance-to-target.
pub fn accuracy_improvement(
    raw: &[[f64; 2]],
    pred: &[[f64; 2]],
    target: [f64; 2],
    eps: f64,
) -> Result<f64> {
    nonempty("accuracy_improvement", raw)?;
    nonempty("accuracy_improvement", pred)?;
    Ok(mean(&dists(raw, target)) / (mean(&dists(pred, target)) + eps))
}

/// Mean Euclidean distance of the predicted points to the target, meters.
pub fn average_distance(pred: &[[f64; 2]], target: [f64; 2]) -> Result<f64> {
    nonempty("average_distance", pred)?;
    Ok(mean(&dists(pred, target)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial_id: String,
    pub ci: f64,
    pub ai: f64,
    pub ad_pred: f64,
    pub ad_raw: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Aggregate { mean: m, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub ci: Aggregate,
    pub ai: Aggregate,
    pub ad_pred: Aggregate,
    pub ad_raw: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_trial: Vec<TrialMetrics>,
    pub aggregate: AggregateMetrics,
    /// Seconds per rollout; absent when timing is disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Aggregate>,
    pub epsilon: f64,
    pub skipped: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text for humans.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
            "trial", "CI", "AI", "AD_pred", "AD_raw", "n"
        ));
        for t in &self.per_trial {
            out.push_str(&format!(
                "{:<16} {:>10.4} {:>10.4} {:>10.5} {:>10.5} {:>8}\n",
                t.trial_id, t.ci, t.ai, t.ad_pred, t.ad_raw, t.n_points
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "aggregate CI   {:.4} +/- {:.4}\naggregate AI   {:.4} +/- {:.4}\naggregate AD   {:.5} +/- {:.5}\nraw AD         {:.5} +/- {:.5}\n",
            a.ci.mean, a.ci.std, a.ai.mean, a.ai.std, a.ad_pred.mean, a.ad_pred.std, a.ad_raw.mean, a.ad_raw.std
        ));
        if let Some(t) = &self.timing {
            out.push_str(&format!("rollout time   {:.6} +/- {:.6} s\n", t.mean, t.std));
        }
        if !self.skipped.is_empty() {
            out.push_str(&format!("skipped        {} trial(s)\n", self.skipped.len()));
        }
        out
    }

    /// `trial_id,ci,ai,ad_pred,ad_raw,n_points,rollout_seconds`
    pub fn to_csv(&self, rollout_seconds: Option<&[f64]>) -> String {
        let mut out = String::from("trial_id,ci,ai,ad_pred,ad_raw,n_points,rollout_seconds\n");
        for (i, t) in self.per_trial.iter().enumerate() {
            let secs = rollout_seconds
                .and_then(|s| s.get(i))
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.trial_id, t.ci, t.ai, t.ad_pred, t.ad_raw, t.n_points, secs
            ));
        }
        out
    }
}

fn tensor_points(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks_exact(t.shape()[1]).map(|r| [r[0], r[1]]).collect()
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    /// Per-trial rollout seconds, aligned with `report.per_trial`; empty
    /// when timing is disabled.
    pub rollout_seconds: Vec<f64>,
}

/// Rolls out the model on every usable trial, compares against the raw
/// fixation points, and aggregates CI/AI/AD. Trials without enough history
/// or fixation samples are skipped with a reason.
pub fn evaluate_corpus(
    model: &(impl StepPredictor + Sync),
    trials: &[Trial],
    mcfg: &ModelConfig,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    if trials.is_empty() {
        return Err(Error::Domain("evaluate_corpus requires trials".into()));
    }
    let (samples, skipped) = assemble_samples(trials, mcfg, cfg.hist_buffer)?;
    if samples.is_empty() {
        return Err(Error::Domain(
            "no evaluable trials (all skipped); see segmentation/evaluation requirements".into(),
        ));
    }
    let tau = model.horizon();

    let predictions: Vec<Tensor> = if cfg.timing {
        // Serial pass so wall-clock numbers do not include scheduler
        // contention.
        samples
            .iter()
            .map(|s| sliding_rollout(model, &s.history, &s.times, cfg.window, tau))
            .collect::<Result<_>>()?
    } else {
        samples
            .par_iter()
            .map(|s| sliding_rollout(model, &s.history, &s.times, cfg.window, tau))
            .collect::<Result<_>>()?
    };
    let rollout_seconds: Vec<f64> = if cfg.timing {
        samples
            .iter()
            .map(|s| {
                let start = Instant::now();
                let _ = sliding_rollout(model, &s.history, &s.times, cfg.window, tau)?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut per_trial = Vec::with_capacity(samples.len());
    for (s, pred) in samples.iter().zip(&predictions) {
        let raw = tensor_points(&s.target);
        let predicted = tensor_points(pred);
        let target = trial_target(trials, &s.trial_id)?;
        per_trial.push(TrialMetrics {
            trial_id: s.trial_id.clone(),
            ci: concentration_improvement(&raw, &predicted, target, cfg.epsilon)?,
            ai: accuracy_improvement(&raw, &predicted, target, cfg.epsilon)?,
            ad_pred: average_distance(&predicted, target)?,
            ad_raw: average_distance(&raw, target)?,
            n_points: tau,
        });
    }

    let agg = AggregateMetrics {
        ci: aggregate(&per_trial.iter().map(|t| t.ci).collect::<Vec<_>>()),
        ai: aggregate(&per_trial.iter().map(|t| t.ai).collect::<Vec<_>>()),
        ad_pred: aggregate(&per_trial.iter().map(|t| t.ad_pred).collect::<Vec<_>>()),
        ad_raw: aggregate(&per_trial.iter().map(|t| t.ad_raw).collect::<Vec<_>>()),
    };
    let timing = if cfg.timing { Some(aggregate(&rollout_seconds)) } else { None };
    Ok(EvalOutcome {
        report: MetricsReport {
            per_trial,
            aggregate: agg,
            timing,
            epsilon: cfg.epsilon,
            skipped,
        },
        rollout_seconds,
    })
}

fn trial_target(trials: &[Trial], id: &str) -> Result<[f64; 2]> {
    trials
        .iter()
        .find(|t| t.id == id)
        .map(|t| t.target)
        .ok_or_else(|| Error::State(format!("trial '{id}' vanished during evaluation")))
}

/// Reference naive metric implementations, kept separate from the formulas
/// above so the acceptance suite can cross-check the two routes.
pub mod oracle {
    /// CI via an explicit loop over squared distances.
    pub fn ci(raw: &[[f64; 2]], pred: &[[f64; 2]], g: [f64; 2], eps: f64) -> f64 {
        let mut num = 0.0;
        for p in raw {
            num += (p[0] - g[0]) * (p[0] - g[0]) + (p[1] - g[1]) * (p[1] - g[1]);
        }
        num = (num / raw.len() as f64).sqrt();
        let mut den = 0.0;
        for p in pred {
            den += (p[0] - g[0]) * (p[0] - g[0]) + (p[1] - g[1]) * (p[1] - g[1]);
        }
        den = (den / pred.len() as f64).sqrt();
        num / (den + eps)
    }

    pub fn ai(raw: &[[f64; 2]], pred: &[[f64; 2]], g: [f64; 2], eps: f64) -> f64 {
        let md = |pts: &[[f64; 2]]| {
            let mut acc = 0.0;
            for p in pts {
                acc += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
            }
            acc / pts.len() as f64
        };
        md(raw) / (md(pred) + eps)
    }

    pub fn ad(pred: &[[f64; 2]], g: [f64; 2]) -> f64 {
        let mut acc = 0.0;
        for p in pred {
            acc += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        }
        acc / pred.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::GazeSample;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_prediction_scores_one() {
        let pts = vec![[0.1, 0.0], [0.0, 0.1], [-0.1, -0.05]];
        let ci = concentration_improvement(&pts, &pts, [0.0, 0.0], 1e-9).unwrap();
        let ai = accuracy_improvement(&pts, &pts, [0.0, 0.0], 1e-9).unwrap();
        assert!((ci - 1.0).abs() < 1e-7);
        assert!((ai - 1.0).abs() < 1e-7);
    }

    #[test]
    fn perfect_prediction_bounded_by_eps() {
        let raw = vec![[0.1, 0.0], [-0.1, 0.0]];
        let pred = vec![[0.0, 0.0], [0.0, 0.0]];
        let eps = 1e-9;
        let ci = concentration_improvement(&raw, &pred, [0.0, 0.0], eps).unwrap();
        assert!(ci.is_finite());
        assert!((ci - 0.1 / eps).abs() / (0.1 / eps) < 1e-9);
        let ai = accuracy_improvement(&raw, &pred, [0.0, 0.0], eps).unwrap();
        assert!((ai - 0.1 / eps).abs() / (0.1 / eps) < 1e-9);
    }

    #[test]
    fn ci_rms_example() {
        let raw = vec![[0.1, 0.0], [-0.1, 0.0]];
        let pred = vec![[0.05, 0.0], [-0.05, 0.0]];
        let ci = concentration_improvement(&raw, &pred, [0.0, 0.0], 0.0).unwrap();
        assert!((ci - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ai_mean_distance_example() {
        let raw = vec![[0.08, 0.0], [0.0, 0.08]];
        let pred = vec![[0.04, 0.0], [0.0, 0.04]];
        let ai = accuracy_improvement(&raw, &pred, [0.0, 0.0], 0.0).unwrap();
        assert!((ai - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ad_examples() {
        assert_eq!(average_distance(&[[0.5, 0.5]], [0.5, 0.5]).unwrap(), 0.0);
        let ad = average_distance(&[[0.03, 0.04]], [0.0, 0.0]).unwrap();
        assert!((ad - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_error() {
        assert!(average_distance(&[], [0.0, 0.0]).is_err());
        assert!(concentration_improvement(&[], &[[0.0, 0.0]], [0.0, 0.0], 1e-9).is_err());
        assert!(accuracy_improvement(&[[0.0, 0.0]], &[], [0.0, 0.0], 1e-9).is_err());
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn metrics_match_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let n = rng.gen_range(1..=64);
            let raw = random_points(&mut rng, n);
            let pred = random_points(&mut rng, n);
            let g = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let eps = 1e-9;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            assert!(rel(
                concentration_improvement(&raw, &pred, g, eps).unwrap(),
                oracle::ci(&raw, &pred, g, eps)
            ) < 1e-9);
            assert!(rel(
                accuracy_improvement(&raw, &pred, g, eps).unwrap(),
                oracle::ai(&raw, &pred, g, eps)
            ) < 1e-9);
            assert!(rel(average_distance(&pred, g).unwrap(), oracle::ad(&pred, g)) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn scale_covariance_about_target(
            seed in 0u64..1000,
            s in 0.1f64..10.0,
            gx in -0.5f64..0.5,
            gy in -0.5f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = [gx, gy];
            let raw = random_points(&mut rng, 8);
            let pred = random_points(&mut rng, 8);
            let scale = |pts: &[[f64; 2]]| -> Vec<[f64; 2]> {
                pts.iter().map(|p| [g[0] + s * (p[0] - g[0]), g[1] + s * (p[1] - g[1])]).collect()
            };
            let (raw_s, pred_s) = (scale(&raw), scale(&pred));
            let ci = concentration_improvement(&raw, &pred, g, 0.0).unwrap();
            let ci_s = concentration_improvement(&raw_s, &pred_s, g, 0.0).unwrap();
            prop_assert!((ci - ci_s).abs() / ci.max(1e-12) < 1e-9);
            let ai = accuracy_improvement(&raw, &pred, g, 0.0).unwrap();
            let ai_s = accuracy_improvement(&raw_s, &pred_s, g, 0.0).unwrap();
            prop_assert!((ai - ai_s).abs() / ai.max(1e-12) < 1e-9);
            let ad = average_distance(&pred, g).unwrap();
            let ad_s = average_distance(&pred_s, g).unwrap();
            prop_assert!((ad_s - s * ad).abs() / (s * ad).max(1e-12) < 1e-9);
        }

        #[test]
        fn translation_invariance(
            seed in 0u64..1000,
            dx in -3.0f64..3.0,
            dy in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = [0.1, -0.2];
            let raw = random_points(&mut rng, 6);
            let pred = random_points(&mut rng, 6);
            let shift = |pts: &[[f64; 2]]| -> Vec<[f64; 2]> {
                pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()
            };
            let g2 = [g[0] + dx, g[1] + dy];
            let ci = concentration_improvement(&raw, &pred, g, 0.0).unwrap();
            let ci_t = concentration_improvement(&shift(&raw), &shift(&pred), g2, 0.0).unwrap();
            prop_assert!((ci - ci_t).abs() / ci.max(1e-12) < 1e-6);
            let ai = accuracy_improvement(&raw, &pred, g, 0.0).unwrap();
            let ai_t = accuracy_improvement(&shift(&raw), &shift(&pred), g2, 0.0).unwrap();
            prop_assert!((ai - ai_t).abs() / ai.max(1e-12) < 1e-6);
        }

        #[test]
        fn pointwise_closer_implies_ai_above_one(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = [0.0, 0.0];
            let raw: Vec<[f64; 2]> = (0..8)
                .map(|_| {
                    let r = rng.gen_range(0.05..0.5);
                    let th = rng.gen_range(0.0..std::f64::consts::TAU);
                    [r * th.cos(), r * th.sin()]
                })
                .collect();
            let pred: Vec<[f64; 2]> = raw.iter().map(|p| [p[0] * 0.7, p[1] * 0.7]).collect();
            prop_assert!(accuracy_improvement(&raw, &pred, g, 1e-9).unwrap() > 1.0);
        }
    }

    struct EchoTarget {
        t: usize,
        tau: usize,
    }

    impl StepPredictor for EchoTarget {
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

    fn noiseless_trial(id: &str, target: [f64; 2]) -> Trial {
        let onset = 20;
        let samples: Vec<GazeSample> = (0..48)
            .map(|i| {
                let mut s = GazeSample::new(i as f64 / 60.0, target);
                if i < onset {
                    // approach reaches the target exactly at onset - 1
                    let u = i as f64 / (onset - 1) as f64;
                    s.pos = [target[0] - 0.5 * (1.0 - u), target[1] + 0.3 * (1.0 - u)];
                }
                s
            })
            .collect();
        let mut t = Trial::new(id, target, samples);
        t.fixation_onset = Some(onset);
        t
    }

    fn eval_cfg() -> EvalConfig {
        EvalConfig { window: 4, hist_buffer: 24, timing: false, ..Default::default() }
    }

    fn tiny_mcfg() -> ModelConfig {
        ModelConfig { hist_len: 16, horizon: 8, ..Default::default() }
    }

    #[test]
    fn echo_on_noiseless_corpus_gives_zero_ad() {
        let trials: Vec<Trial> = (0..3)
            .map(|i| noiseless_trial(&format!("t{i}"), [0.2 * i as f64 - 0.2, 0.1]))
            .collect();
        let echo = EchoTarget { t: 16, tau: 8 };
        let out = evaluate_corpus(&echo, &trials, &tiny_mcfg(), &eval_cfg()).unwrap();
        for t in &out.report.per_trial {
            assert!(t.ad_pred < 1e-12, "trial {} AD {}", t.trial_id, t.ad_pred);
        }
        assert_eq!(out.report.per_trial.len(), 3);
    }

    #[test]
    fn evaluation_is_deterministic_and_reports_skips() {
        let mut trials: Vec<Trial> = (0..3)
            .map(|i| noiseless_trial(&format!("t{i}"), [0.1 * i as f64, -0.1]))
            .collect();
        trials[2].fixation_onset = Some(4); // too little history
        let echo = EchoTarget { t: 16, tau: 8 };
        let a = evaluate_corpus(&echo, &trials, &tiny_mcfg(), &eval_cfg()).unwrap();
        let b = evaluate_corpus(&echo, &trials, &tiny_mcfg(), &eval_cfg()).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.skipped.len(), 1);
        assert_eq!(a.report.per_trial.len(), 2);
    }

    #[test]
    fn report_formats_are_consistent() {
        let trials: Vec<Trial> =
            (0..2).map(|i| noiseless_trial(&format!("t{i}"), [0.1, 0.1 * i as f64])).collect();
        let echo = EchoTarget { t: 16, tau: 8 };
        let out = evaluate_corpus(&echo, &trials, &tiny_mcfg(), &eval_cfg()).unwrap();
        let json = out.report.to_json();
        let parsed: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, out.report);
        let csv = out.report.to_csv(None);
        assert_eq!(csv.lines().count(), out.report.per_trial.len() + 1);
        assert!(out.report.to_text().contains("aggregate AI"));
    }
}
