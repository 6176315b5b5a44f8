//! Domain types and plane geometry shared by the whole pipeline.
//!
//! Gaze positions live in target-plane coordinates: meters, origin at the
//! plane center, the plane itself at `plane_distance` meters in front of the
//! viewer. Optional 3D fields (head pose, gaze rays) are pass-through storage
//! for real-data ingestion; the simulator emits plane coordinates directly.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One timestamped gaze measurement on the target plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    /// Seconds, monotone within a trial.
    pub t: f64,
    /// Meters on the target plane, `[x, y]`.
    pub pos: [f64; 2],
    /// Meters/second.
    #[serde(default)]
    pub lin_speed: f64,
    /// Degrees/second.
    #[serde(default)]
    pub ang_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_pos: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_origin: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_dir: Option<[f64; 3]>,
    /// Unknown fields are carried through round-trips untouched.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

impl GazeSample {
    pub fn new(t: f64, pos: [f64; 2]) -> Self {
        GazeSample {
            t,
            pos,
            lin_speed: 0.0,
            ang_speed: 0.0,
            head_pos: None,
            gaze_origin: None,
            gaze_dir: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn dist_to(&self, point: [f64; 2]) -> f64 {
        let dx = self.pos[0] - point[0];
        let dy = self.pos[1] - point[1];
        (dx * dx + dy * dy).sqrt()
    }
}

fn default_plane_distance() -> f64 {
    3.0
}

fn default_plane_extent() -> f64 {
    2.0
}

fn is_default_extent(v: &f64) -> bool {
    *v == 2.0
}

/// One saccade-then-fixation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: String,
    /// Target position in plane coordinates, meters.
    pub target: [f64; 2],
    #[serde(default = "default_plane_distance")]
    pub plane_distance: f64,
    #[serde(default = "default_plane_extent", skip_serializing_if = "is_default_extent")]
    pub plane_extent: f64,
    /// Filled by segmentation; index of the first fixation-phase sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixation_onset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub samples: Vec<GazeSample>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

impl Trial {
    pub fn new(id: impl Into<String>, target: [f64; 2], samples: Vec<GazeSample>) -> Self {
        Trial {
            id: id.into(),
            target,
            plane_distance: default_plane_distance(),
            plane_extent: default_plane_extent(),
            fixation_onset: None,
            synthetic: None,
            beta: None,
            samples,
            extra: serde_json::Map::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_synthetic(&self) -> bool {
        self.synthetic == Some(true)
    }
}

/// Fixation-detection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationConfig {
    /// Meters around the target.
    pub region_radius: f64,
    /// Degrees/second.
    pub ang_vel_threshold: f64,
    /// Window length in samples (200 ms at 60 Hz).
    pub window_samples: usize,
    /// Hz.
    pub sample_rate: f64,
}

impl Default for FixationConfig {
    fn default() -> Self {
        FixationConfig {
            region_radius: 0.1,
            ang_vel_threshold: 20.0,
            window_samples: 12,
            sample_rate: 60.0,
        }
    }
}

impl FixationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.region_radius <= 0.0 || self.ang_vel_threshold <= 0.0 || self.sample_rate <= 0.0 {
            return Err(Error::Config(
                "fixation config values must be strictly positive".into(),
            ));
        }
        if self.window_samples < 2 {
            return Err(Error::Config("window_samples must be >= 2".into()));
        }
        Ok(())
    }
}

/// Visual angle in degrees subtended by an object of `object_diameter` meters
/// at `distance` meters: `2 * atan(H / 2D)`.
pub fn visual_angle(object_diameter: f64, distance: f64) -> Result<f64> {
    if distance <= 0.0 {
        return Err(Error::Domain(format!(
            "visual_angle requires distance > 0, got {distance}"
        )));
    }
    if object_diameter < 0.0 {
        return Err(Error::Domain(format!(
            "visual_angle requires object_diameter >= 0, got {object_diameter}"
        )));
    }
    Ok((2.0 * (object_diameter / (2.0 * distance)).atan()).to_degrees())
}

/// Intersects the gaze ray with the target plane (normal +z, at z =
/// `plane_distance`) and returns plane-local coordinates.
pub fn project_to_plane(
    origin: [f64; 3],
    direction: [f64; 3],
    plane_distance: f64,
) -> Result<[f64; 2]> {
    let dz = direction[2];
    if dz.abs() < 1e-12 {
        return Err(Error::NoIntersection("ray parallel to target plane".into()));
    }
    let t = (plane_distance - origin[2]) / dz;
    if t <= 0.0 {
        return Err(Error::NoIntersection(
            "ray points away from target plane".into(),
        ));
    }
    Ok([origin[0] + t * direction[0], origin[1] + t * direction[1]])
}

fn angle_between_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // Clamp to survive rounding at near-parallel directions.
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Fills `lin_speed` (always) and `ang_speed` (when gaze directions are
/// present) by backward finite differences at the fixed sampling interval.
/// Index 0 copies index 1 so sequence lengths stay stable.
pub fn derive_velocities(samples: &mut [GazeSample], sample_rate: f64) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(
            "derive_velocities needs at least 2 samples".into(),
        ));
    }
    let dt = 1.0 / sample_rate;
    for i in 1..samples.len() {
        let dx = samples[i].pos[0] - samples[i - 1].pos[0];
        let dy = samples[i].pos[1] - samples[i - 1].pos[1];
        samples[i].lin_speed = (dx * dx + dy * dy).sqrt() / dt;
        if let (Some(d0), Some(d1)) = (samples[i - 1].gaze_dir, samples[i].gaze_dir) {
            samples[i].ang_speed = angle_between_deg(d0, d1) / dt;
        }
    }
    samples[0].lin_speed = samples[1].lin_speed;
    samples[0].ang_speed = samples[1].ang_speed;
    Ok(())
}

/// Angular speeds implied by plane displacements seen from `plane_distance`
/// meters (small-angle chord relation). Used when no 3D gaze rays exist.
pub fn angular_speed_from_plane(samples: &mut [GazeSample], sample_rate: f64, plane_distance: f64) -> Result<()> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(
            "angular_speed_from_plane needs at least 2 samples".into(),
        ));
    }
    if plane_distance <= 0.0 {
        return Err(Error::Domain("plane_distance must be > 0".into()));
    }
    let dt = 1.0 / sample_rate;
    for i in 1..samples.len() {
        let dx = samples[i].pos[0] - samples[i - 1].pos[0];
        let dy = samples[i].pos[1] - samples[i - 1].pos[1];
        let chord = (dx * dx + dy * dy).sqrt();
        samples[i].ang_speed = (chord / plane_distance).atan().to_degrees() / dt;
    }
    samples[0].ang_speed = samples[1].ang_speed;
    Ok(())
}
