//! Fixation-onset detection and corpus cleaning.
//!
//! A trial's fixation onset is the first window of `window_samples`
//! consecutive samples that all lie within `region_radius` of the target and
//! whose mean angular speed is below `ang_vel_threshold`. Cleaning applies
//! three exclusion rules in a fixed order; the first match wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::{FixationConfig, GazeSample, Trial};

/// Trial-exclusion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningRules {
    /// Seconds of uninterrupted on-target fixation required.
    pub min_uninterrupted_fixation: f64,
    /// Seconds from trial start in which the fixation run must occur.
    pub eval_window: f64,
    /// Consecutive off-target samples that count as fixation loss.
    pub max_consecutive_outside: usize,
    /// Meters.
    pub outside_radius: f64,
    /// Meters, full side length of the square gaze area.
    pub plane_extent: f64,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            min_uninterrupted_fixation: 2.5,
            eval_window: 5.0,
            max_consecutive_outside: 24,
            outside_radius: 0.1,
            plane_extent: 2.0,
        }
    }
}

impl CleaningRules {
    pub fn validate(&self) -> Result<()> {
        if self.min_uninterrupted_fixation <= 0.0
            || self.eval_window <= 0.0
            || self.outside_radius <= 0.0
            || self.plane_extent <= 0.0
        {
            return Err(Error::Config(
                "cleaning rule values must be strictly positive".into(),
            ));
        }
        if self.max_consecutive_outside < 1 {
            return Err(Error::Config("max_consecutive_outside must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    None,
    ShortFixation,
    OutOfBounds,
    FixationLoss,
}

impl ExclusionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExclusionReason::None => "none",
            ExclusionReason::ShortFixation => "short_fixation",
            ExclusionReason::OutOfBounds => "out_of_bounds",
            ExclusionReason::FixationLoss => "fixation_loss",
        }
    }
}

/// Per-trial segmentation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub trial_id: String,
    pub onset_index: Option<usize>,
    pub search_len: usize,
    pub fixation_len: usize,
    pub excluded: bool,
    pub exclusion_reason: ExclusionReason,
}

/// First index `i` such that samples `i..i+window` all lie within
/// `region_radius` of the target and their mean `ang_speed` is below
/// `ang_vel_threshold`. `None` when no window qualifies.
pub fn fixation_onset(trial: &Trial, cfg: &FixationConfig) -> Result<Option<usize>> {
    cfg.validate()?;
    let w = cfg.window_samples;
    let n = trial.samples.len();
    if n < w {
        return Err(Error::InsufficientData(format!(
            "trial '{}' has {n} samples, window needs {w}",
            trial.id
        )));
    }
    let in_region: Vec<bool> = trial
        .samples
        .iter()
        .map(|s| s.dist_to(trial.target) <= cfg.region_radius)
        .collect();
    // Running window: count of in-region samples and sum of angular speeds.
    let mut inside = 0usize;
    let mut ang_sum = 0.0;
    for i in 0..n {
        inside += in_region[i] as usize;
        ang_sum += trial.samples[i].ang_speed;
        if i >= w {
            inside -= in_region[i - w] as usize;
            ang_sum -= trial.samples[i - w].ang_speed;
        }
        if i + 1 >= w && inside == w && ang_sum / (w as f64) < cfg.ang_vel_threshold {
            return Ok(Some(i + 1 - w));
        }
    }
    Ok(None)
}

fn within_bounds(s: &GazeSample, half_extent: f64) -> bool {
    s.pos[0].abs() <= half_extent && s.pos[1].abs() <= half_extent
}

/// Longest on-target run, in seconds, among samples inside the first
/// `eval_window` seconds of the trial.
fn longest_fixation_run(trial: &Trial, rules: &CleaningRules) -> f64 {
    let t0 = trial.samples[0].t;
    let mut best = 0.0f64;
    let mut run_start: Option<f64> = None;
    for s in &trial.samples {
        if s.t - t0 > rules.eval_window {
            break;
        }
        if s.dist_to(trial.target) <= rules.outside_radius {
            let start = *run_start.get_or_insert(s.t);
            best = best.max(s.t - start);
        } else {
            run_start = None;
        }
    }
    best
}

fn classify(trial: &Trial, rules: &CleaningRules, cfg: &FixationConfig) -> (Option<usize>, ExclusionReason) {
    // Rule 1: uninterrupted fixation of at least min_uninterrupted seconds
    // within the first eval_window seconds.
    if longest_fixation_run(trial, rules) < rules.min_uninterrupted_fixation {
        return (None, ExclusionReason::ShortFixation);
    }
    // Rule 2: gaze must stay inside the virtual area. NaN positions fail the
    // bounds test and are excluded here rather than panicking downstream.
    let half = rules.plane_extent / 2.0;
    if trial.samples.iter().any(|s| !within_bounds(s, half)) {
        return (None, ExclusionReason::OutOfBounds);
    }
    // Rule 3: loss of fixation during the sustained fixation phase. A trial
    // where the onset criterion never fires counts as fixation loss too.
    let onset = match fixation_onset(trial, cfg) {
        Ok(Some(i)) => i,
        Ok(None) | Err(_) => return (None, ExclusionReason::FixationLoss),
    };
    let mut outside_run = 0usize;
    for s in &trial.samples[onset..] {
        if s.dist_to(trial.target) > rules.outside_radius {
            outside_run += 1;
            if outside_run >= rules.max_consecutive_outside {
                return (None, ExclusionReason::FixationLoss);
            }
        } else {
            outside_run = 0;
        }
    }
    (Some(onset), ExclusionReason::None)
}

/// Classifies every trial, filling `fixation_onset` on the kept ones.
/// Order-preserving; |kept| + |excluded| = |input|.
pub fn clean_corpus(
    trials: &[Trial],
    rules: &CleaningRules,
    cfg: &FixationConfig,
) -> Result<(Vec<Trial>, Vec<SegmentationResult>)> {
    if trials.is_empty() {
        return Err(Error::Domain("clean_corpus requires a nonempty corpus".into()));
    }
    rules.validate()?;
    cfg.validate()?;
    let outcomes: Vec<(Option<Trial>, SegmentationResult)> = trials
        .par_iter()
        .map(|trial| {
            let (onset, reason) = classify(trial, rules, cfg);
            let n = trial.samples.len();
            match onset {
                Some(i) => {
                    let mut kept = trial.clone();
                    kept.fixation_onset = Some(i);
                    let result = SegmentationResult {
                        trial_id: trial.id.clone(),
                        onset_index: Some(i),
                        search_len: i,
                        fixation_len: n - i,
                        excluded: false,
                        exclusion_reason: ExclusionReason::None,
                    };
                    (Some(kept), result)
                }
                None => {
                    let result = SegmentationResult {
                        trial_id: trial.id.clone(),
                        onset_index: None,
                        search_len: n,
                        fixation_len: 0,
                        excluded: true,
                        exclusion_reason: reason,
                    };
                    (None, result)
                }
            }
        })
        .collect();
    let mut kept = Vec::new();
    let mut report = Vec::with_capacity(outcomes.len());
    for (trial, result) in outcomes {
        if let Some(t) = trial {
            kept.push(t);
        }
        report.push(result);
    }
    Ok((kept, report))
}

/// Splits a segmented trial into its search and fixation phases.
pub fn split_phases(trial: &Trial) -> Result<(&[GazeSample], &[GazeSample])> {
    let onset = trial.fixation_onset.ok_or_else(|| {
        Error::State(format!("trial '{}' has no fixation onset set", trial.id))
    })?;
    if onset > trial.samples.len() {
        return Err(Error::State(format!(
            "trial '{}' onset {onset} exceeds length {}",
            trial.id,
            trial.samples.len()
        )));
    }
    Ok(trial.samples.split_at(onset))
}

/// Cleaning report CSV: `trial_id,onset_index,excluded,reason`.
pub fn report_to_csv(report: &[SegmentationResult]) -> String {
    let mut out = String::from("trial_id,onset_index,excluded,reason\n");
    for r in report {
        let onset = r
            .onset_index
            .map(|i| i.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.trial_id,
            onset,
            r.excluded,
            r.exclusion_reason.as_str()
        ));
    }
    out
}
