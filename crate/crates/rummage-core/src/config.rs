//! Keyed-text run configuration: one TOML tree with per-subsystem sections,
//! dotted-path overrides, and a content hash recorded in every output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;

fn d_workspace() -> f64 {
    0.5
}
fn d_max_objects() -> u32 {
    24
}
fn d_n_objects() -> u32 {
    10
}
fn d_size_range() -> [f64; 2] {
    [0.05, 0.14]
}
fn d_height_range() -> [f64; 2] {
    [0.05, 0.20]
}
fn d_tries() -> u32 {
    1000
}
fn d_render_res() -> u32 {
    64
}
fn d_focal() -> f64 {
    64.0
}
fn d_cam_radius() -> f64 {
    0.6
}
fn d_cam_elevation() -> f64 {
    30.0
}
fn d_cam_azimuth() -> f64 {
    180.0
}

/// Scene generation and rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Side length of the square workspace, meters.
    pub workspace_size: f64,
    /// Hard cap on objects per scene.
    pub max_objects: u32,
    /// Object count used by `gen-scenes` and as the single-count default.
    pub n_objects: u32,
    /// Footprint side length range [min, max], meters.
    pub size_range: [f64; 2],
    /// Object height range [min, max], meters.
    pub height_range: [f64; 2],
    /// Allowed fraction of a new footprint overlapping already-placed ones.
    pub overlap_tolerance: f64,
    pub max_rejection_tries: u32,
    /// Scenario family: place a tall wide occluder so the target starts
    /// fully hidden from the spawn viewpoint.
    pub occluded_target: bool,
    pub render_width: u32,
    pub render_height: u32,
    pub focal_px: f64,
    /// Spawn camera placement on a sphere around the workspace center.
    pub camera_radius: f64,
    pub camera_elevation_deg: f64,
    pub camera_azimuth_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            workspace_size: d_workspace(),
            max_objects: d_max_objects(),
            n_objects: d_n_objects(),
            size_range: d_size_range(),
            height_range: d_height_range(),
            overlap_tolerance: 0.0,
            max_rejection_tries: d_tries(),
            occluded_target: false,
            render_width: d_render_res(),
            render_height: d_render_res(),
            focal_px: d_focal(),
            camera_radius: d_cam_radius(),
            camera_elevation_deg: d_cam_elevation(),
            camera_azimuth_deg: d_cam_azimuth(),
        }
    }
}

/// Action execution parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Motion budget per episode.
    pub max_motions: u32,
    /// Shift nearby objects toward the grasp point when a grasp fails.
    pub perturb_on_failure: bool,
    /// Max translation applied by a failure perturbation, meters.
    pub perturb_radius: f64,
    /// Difficulty discount for occluder removal relative to target
    /// extraction: dropping an occluder anywhere is easier than lifting the
    /// target cleanly. 1.0 makes both equally hard.
    pub removal_ease: f64,
    /// How much harder a failed low-quality grasp shakes the pile: the
    /// perturbation radius scales by 1 + severity * (1 - quality).
    pub failure_severity: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            max_motions: 10,
            perturb_on_failure: true,
            perturb_radius: 0.015,
            removal_ease: 0.7,
            failure_severity: 3.0,
        }
    }
}

/// Grasp-quality oracle parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Exponent on the visibility fraction.
    pub alpha: f64,
    /// Exponent on lateral clearance.
    pub beta: f64,
    /// Restrict occluder candidates to objects that actually block target rays.
    pub strict_occluders: bool,
    /// Width of the free-space ring inspected around each footprint, meters.
    pub clearance_radius: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.5, strict_occluders: true, clearance_radius: 0.065 }
    }
}

/// Next-best-view planner and TSDF fusion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NbvConfig {
    /// Radius of the candidate viewpoint ring, meters.
    pub ring_radius: f64,
    /// Candidate elevations above the table plane, degrees.
    pub elevations_deg: Vec<f64>,
    /// Number of evenly spaced azimuths per elevation.
    pub azimuth_count: u32,
    /// TSDF voxel edge length, meters.
    pub voxel_size: f64,
    /// Truncation distance as a multiple of the voxel size.
    pub truncation_mult: f64,
    /// Fusion weight cap per voxel.
    pub weight_cap: f64,
    /// Ray-march step as a fraction of the voxel size.
    pub march_step_frac: f64,
    /// |tsdf| band (in voxels) within which a voxel counts as surface.
    pub surface_band: f64,
    /// Height of the fused volume above the table, meters.
    pub volume_height: f64,
}

impl Default for NbvConfig {
    fn default() -> Self {
        Self {
            ring_radius: 0.6,
            elevations_deg: vec![30.0, 55.0],
            azimuth_count: 8,
            voxel_size: 0.02,
            truncation_mult: 4.0,
            weight_cap: 64.0,
            march_step_frac: 0.5,
            surface_band: 1.0,
            volume_height: 0.32,
        }
    }
}

/// PPO training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Environment steps to collect in total.
    pub total_steps: u64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip: f64,
    pub normalize_obs: bool,
    pub normalize_reward: bool,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: usize,
    /// Object counts sampled per training episode.
    pub train_object_counts: Vec<u32>,
    /// Fraction of training episodes drawn from the occluded-target family.
    pub train_occluded_fraction: f64,
    /// Feed the raw quality scores to the policy network. Off by default:
    /// scores act on the decision gates, the network sees scene context only.
    pub policy_sees_scores: bool,
    /// Side length of the coarse mask/ODM patch grids appended to the policy
    /// input (0 disables the image channels).
    pub policy_patch_grid: u32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            total_steps: 10_000,
            learning_rate: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            batch_size: 64,
            minibatch_size: 32,
            epochs: 4,
            clip: 0.2,
            normalize_obs: true,
            normalize_reward: true,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: 64,
            train_object_counts: vec![5, 10, 15, 20],
            train_occluded_fraction: 0.1,
            policy_sees_scores: false,
            policy_patch_grid: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.minibatch_size == 0 || self.batch_size % self.minibatch_size != 0 {
            return Err(ConfigError::Parse(format!(
                "minibatch_size {} must divide batch_size {}",
                self.minibatch_size, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Evaluation batch parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Scenes per (method, object count) cell.
    pub n_scenes: u32,
    pub object_counts: Vec<u32>,
    /// Average motions over all episodes (true) or successes only (false).
    pub include_failures: bool,
    /// Method whose efficiency normalizes relative efficiency.
    pub reference_method: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            object_counts: vec![5, 10, 15, 20],
            include_failures: true,
            reference_method: "fixed_threshold".to_string(),
        }
    }
}

/// The full merged configuration tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub dynamics: DynamicsConfig,
    pub oracle: OracleConfig,
    pub nbv: NbvConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            scene: SceneConfig::default(),
            dynamics: DynamicsConfig::default(),
            oracle: OracleConfig::default(),
            nbv: NbvConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.ppo.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Apply a dotted-path override such as `ppo.total_steps=2000`.
    ///
    /// The value side is parsed as a TOML literal, falling back to a bare
    /// string. The patched tree is re-deserialized, so type errors and unknown
    /// keys are rejected.
    pub fn apply_override(&mut self, expr: &str) -> Result<(), ConfigError> {
        let (path, raw) = expr
            .split_once('=')
            .ok_or_else(|| ConfigError::MalformedOverride(expr.to_string()))?;
        let path = path.trim();
        let raw = raw.trim();
        if path.is_empty() {
            return Err(ConfigError::MalformedOverride(expr.to_string()));
        }

        let value: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
            Ok(toml::Value::Table(t)) => t["v"].clone(),
            _ => toml::Value::String(raw.to_string()),
        };

        let mut tree = toml::Value::try_from(self.clone())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments.split_last().expect("path is non-empty");
        let mut node = &mut tree;
        for seg in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*seg))
                .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
        }
        let table =
            node.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
        if !table.contains_key(*last) {
            return Err(ConfigError::UnknownKey(path.to_string()));
        }
        table.insert(last.to_string(), value);

        let patched: RunConfig =
            tree.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        patched.ppo.validate()?;
        *self = patched;
        Ok(())
    }

    /// Short content hash over the canonical TOML serialization of the
    /// parameter tree. The seed is excluded: it is provenance, recorded next
    /// to the hash in every output, not part of the configuration identity.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.seed = 0;
        let text = toml::to_string(&keyed).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.ppo.total_steps, 10_000);
        assert_eq!(cfg.ppo.learning_rate, 3e-4);
        assert_eq!(cfg.ppo.gamma, 0.99);
        assert_eq!(cfg.ppo.gae_lambda, 0.95);
        assert_eq!(cfg.ppo.batch_size, 64);
        assert_eq!(cfg.ppo.minibatch_size, 32);
        assert_eq!(cfg.ppo.epochs, 4);
        assert_eq!(cfg.ppo.clip, 0.2);
        assert!(cfg.ppo.normalize_obs);
        assert!(cfg.ppo.normalize_reward);
        assert_eq!(cfg.scene.workspace_size, 0.5);
        assert_eq!(cfg.dynamics.max_motions, 10);
    }

    #[test]
    fn override_scalar_and_nested() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("ppo.total_steps=0").unwrap();
        assert_eq!(cfg.ppo.total_steps, 0);
        cfg.apply_override("scene.n_objects = 17").unwrap();
        assert_eq!(cfg.scene.n_objects, 17);
        cfg.apply_override("eval.reference_method=xpg").unwrap();
        assert_eq!(cfg.eval.reference_method, "xpg");
        cfg.apply_override("nbv.elevations_deg=[20.0, 40.0]").unwrap();
        assert_eq!(cfg.nbv.elevations_deg, vec![20.0, 40.0]);
    }

    #[test]
    fn override_rejects_unknown_key() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply_override("ppo.nonsense=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            cfg.apply_override("not_a_section.x=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            cfg.apply_override("just-a-key"),
            Err(ConfigError::MalformedOverride(_))
        ));
    }

    #[test]
    fn override_rejects_type_error() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("ppo.total_steps=banana").is_err());
    }

    #[test]
    fn unknown_toml_key_rejected() {
        let err = RunConfig::from_toml_str("[ppo]\nmystery = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn hash_tracks_parameters_not_seed() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.apply_override("ppo.gamma=0.9").unwrap();
        assert_ne!(a.hash(), b.hash());

        let mut c = RunConfig::default();
        c.apply_override("seed=99").unwrap();
        assert_eq!(a.hash(), c.hash(), "seed is provenance, not configuration");
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn minibatch_must_divide_batch() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("ppo.minibatch_size=48").is_err());
    }
}
