//! Episode machinery: one mechanical-search episode as an RL environment.
//!
//! Each step renders the scene, scores grasps, resolves the chosen action
//! (threshold cascade or flat index), executes it, and rebuilds the
//! observation. Depth views are fused into a pair of TSDF grids lazily, only
//! when the view planner is actually consulted.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decision::decide;
#[cfg(test)]
use crate::decision::Thresholds;
use crate::error::{EvalError, SceneError};
use crate::geom::CameraPose;
use crate::nbv::{candidate_ring, plan_nbv};
use crate::oracle::{score_scene, GraspScores};
use crate::perception::{
    build_observation, build_target_mask, policy_feature_dim, policy_features, ObsNorm,
    Observation,
};
use crate::ppo::{reward, EnvAction, EnvStep, PolicyHead, RolloutEnv};
use crate::scene::{
    execute, generate_scene, render_info, ActionPrimitive, RenderInfo, SceneState,
    TransitionOutcome,
};
use crate::tsdf::TsdfGrid;

/// The four evaluable methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Xpg,
    FixedThreshold,
    FlatPolicy,
    NoNbv,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        match s {
            "xpg" => Ok(Method::Xpg),
            "fixed_threshold" => Ok(Method::FixedThreshold),
            "flat_policy" => Ok(Method::FlatPolicy),
            "no_nbv" => Ok(Method::NoNbv),
            other => Err(EvalError::UnknownMethod(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Xpg => "xpg",
            Method::FixedThreshold => "fixed_threshold",
            Method::FlatPolicy => "flat_policy",
            Method::NoNbv => "no_nbv",
        }
    }

    pub fn requires_checkpoint(&self) -> bool {
        !matches!(self, Method::FixedThreshold)
    }

    /// Policy head this method is trained with, if any.
    pub fn head(&self) -> Option<PolicyHead> {
        match self {
            Method::Xpg | Method::NoNbv => Some(PolicyHead::Thresholds),
            Method::FlatPolicy => Some(PolicyHead::Flat),
            Method::FixedThreshold => None,
        }
    }

    /// Whether the view-move primitive is available to this method.
    pub fn nbv_enabled(&self) -> bool {
        !matches!(self, Method::NoNbv)
    }
}

/// Everything recorded about one step, including dead-end terminations where
/// no action was executed (the no-NBV variant's failure mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub q_target: f64,
    pub q_occlude: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub action: Option<ActionPrimitive>,
    pub outcome: Option<TransitionOutcome>,
    /// Predicted target quality of the selected view when the planner ran.
    pub nbv_predicted: Option<f64>,
}

struct EpisodeState {
    scene: SceneState,
    info: RenderInfo,
    scores: GraspScores,
    observation: Observation,
    scene_tsdf: TsdfGrid,
    target_tsdf: TsdfGrid,
    /// Views observed but not yet fused; drained when the planner runs.
    pending_views: Vec<(RenderInfo, CameraPose)>,
    trace: Vec<StepTrace>,
    done: bool,
    success: bool,
}

/// One mechanical-search episode environment.
pub struct SearchEnv {
    config: RunConfig,
    obs_norm: ObsNorm,
    candidates: Vec<CameraPose>,
    /// Object counts sampled uniformly per episode; a single entry pins the
    /// count (evaluation batches do this).
    episode_counts: Vec<u32>,
    nbv_enabled: bool,
    sees_scores: bool,
    patch_grid: u32,
    occluded_fraction: f64,
    state: Option<EpisodeState>,
    last_nbv_predicted: Option<f64>,
}

impl SearchEnv {
    pub fn new(config: &RunConfig, episode_counts: Vec<u32>, nbv_enabled: bool) -> Self {
        assert!(!episode_counts.is_empty(), "episode_counts must not be empty");
        let intrinsics = crate::geom::Intrinsics {
            focal_px: config.scene.focal_px,
            width: config.scene.render_width,
            height: config.scene.render_height,
        };
        let candidates = candidate_ring(&config.nbv, intrinsics);
        assert!(!candidates.is_empty(), "nbv config yields an empty candidate ring");
        let obs_norm = ObsNorm {
            depth_norm: 2.0 * config.scene.camera_radius.max(config.nbv.ring_radius),
            max_objects: config.scene.max_objects as f64,
            max_motions: config.dynamics.max_motions as f64,
        };
        Self {
            sees_scores: config.ppo.policy_sees_scores,
            patch_grid: config.ppo.policy_patch_grid,
            config: config.clone(),
            obs_norm,
            candidates,
            episode_counts,
            nbv_enabled,
            occluded_fraction: 0.0,
            state: None,
            last_nbv_predicted: None,
        }
    }

    /// Features of the current observation as the policy network sees them.
    pub fn policy_features_now(&self) -> Vec<f64> {
        policy_features(self.observation(), self.sees_scores, self.patch_grid)
    }

    /// Share of episodes drawn from the occluded-target family. Zero for
    /// evaluation envs, whose scene family is fixed by the config.
    pub fn set_occluded_fraction(&mut self, fraction: f64) {
        self.occluded_fraction = fraction.clamp(0.0, 1.0);
    }

    pub fn try_reset(&mut self, episode_seed: u64) -> Result<&Observation, SceneError> {
        let mut pick_rng = ChaCha8Rng::seed_from_u64(episode_seed ^ 0x00C0_FFEE_BAAD_F00D);
        let n = self.episode_counts[pick_rng.gen_range(0..self.episode_counts.len())];
        let mut scene_cfg = self.config.scene.clone();
        if self.occluded_fraction > 0.0 && n >= 2 {
            let draw: f64 = pick_rng.gen_range(0.0..1.0);
            scene_cfg.occluded_target = draw < self.occluded_fraction;
        }
        let scene = generate_scene(n, episode_seed, &scene_cfg)?;
        let info = render_info(&scene, &scene.camera);
        let scores = score_scene(&scene, &info, &self.config.oracle);
        let observation =
            build_observation(&info.render, scene.target_id(), &scores, 0, &self.obs_norm);
        let scene_tsdf = TsdfGrid::for_workspace(scene.workspace, &self.config.nbv);
        let target_tsdf = TsdfGrid::for_workspace(scene.workspace, &self.config.nbv);
        let camera = scene.camera;
        self.state = Some(EpisodeState {
            scene,
            pending_views: vec![(info.clone(), camera)],
            info,
            scores,
            observation,
            scene_tsdf,
            target_tsdf,
            trace: Vec::new(),
            done: false,
            success: false,
        });
        Ok(&self.state.as_ref().unwrap().observation)
    }

    pub fn observation(&self) -> &Observation {
        &self.state.as_ref().expect("reset first").observation
    }

    pub fn scores(&self) -> &GraspScores {
        &self.state.as_ref().expect("reset first").scores
    }

    pub fn scene(&self) -> &SceneState {
        &self.state.as_ref().expect("reset first").scene
    }

    pub fn trace(&self) -> &[StepTrace] {
        &self.state.as_ref().expect("reset first").trace
    }

    pub fn done(&self) -> bool {
        self.state.as_ref().map(|s| s.done).unwrap_or(true)
    }

    pub fn success(&self) -> bool {
        self.state.as_ref().map(|s| s.success).unwrap_or(false)
    }

    pub fn candidates(&self) -> &[CameraPose] {
        &self.candidates
    }

    /// The fused scene and target-belief grids. Call [`Self::plan_view`]
    /// first when pending observations should be folded in.
    pub fn grids(&self) -> (&TsdfGrid, &TsdfGrid) {
        let state = self.state.as_ref().expect("reset first");
        (&state.scene_tsdf, &state.target_tsdf)
    }

    /// Fuse all pending views and plan the next best view.
    pub fn plan_view(&mut self) -> CameraPose {
        let state = self.state.as_mut().expect("reset first");
        for (info, camera) in state.pending_views.drain(..) {
            let target_id = state.scene.target_id();
            let mask = build_target_mask(&info.render, target_id);
            state.scene_tsdf.integrate(&info.render, &camera, None);
            state.target_tsdf.integrate(&info.render, &camera, Some(&mask));
        }
        let pick = plan_nbv(
            &state.scene_tsdf,
            &state.target_tsdf,
            &self.candidates,
            &self.config.nbv,
            &self.config.oracle,
        )
        .expect("candidate ring verified non-empty at construction");
        self.last_nbv_predicted = Some(pick.predicted_q_target);
        pick.pose
    }

    /// Resolve the incoming action, execute it, and advance the episode.
    pub fn step_env(&mut self, action: &EnvAction) -> EnvStep {
        assert!(!self.done(), "step on a finished episode");
        self.last_nbv_predicted = None;

        let scores = self.state.as_ref().unwrap().scores.clone();
        let (tau1, tau2, primitive) = match action {
            EnvAction::Thresholds(tau) => {
                if !self.nbv_enabled && scores.q_target < tau.tau1 && scores.q_occlude < tau.tau2 {
                    // Dead end: with the view move disabled, failing both
                    // gates ends the trial as a failure without a motion.
                    let state = self.state.as_mut().unwrap();
                    state.trace.push(StepTrace {
                        q_target: scores.q_target,
                        q_occlude: scores.q_occlude,
                        tau1: tau.tau1,
                        tau2: tau.tau2,
                        action: None,
                        outcome: None,
                        nbv_predicted: None,
                    });
                    state.done = true;
                    return EnvStep {
                        features: state.observation.features.clone(),
                        reward: -1.0,
                        done: true,
                        success: false,
                    };
                }
                let primitive = decide(*tau, &scores, || self.plan_view())
                    .expect("oracle invariant: q_occlude implies a best occluder");
                (tau.tau1, tau.tau2, primitive)
            }
            EnvAction::Flat(index) => {
                let primitive = match index {
                    0 => ActionPrimitive::GraspTarget,
                    1 => ActionPrimitive::RemoveOccluder {
                        id: scores.best_occluder.unwrap_or(0),
                    },
                    _ => ActionPrimitive::MoveView { pose: self.plan_view() },
                };
                (0.0, 0.0, primitive)
            }
        };

        let state_ref = self.state.as_ref().unwrap();
        let (next_scene, outcome) =
            execute(&state_ref.scene, &primitive, &scores, &self.config.dynamics);
        let r = reward(&outcome);
        let success = outcome == TransitionOutcome::TargetExtracted;
        let done = success || next_scene.step_count >= self.config.dynamics.max_motions;

        let info = render_info(&next_scene, &next_scene.camera);
        let new_scores = score_scene(&next_scene, &info, &self.config.oracle);
        let observation = build_observation(
            &info.render,
            next_scene.target_id(),
            &new_scores,
            next_scene.step_count,
            &self.obs_norm,
        );

        let state = self.state.as_mut().unwrap();
        state.trace.push(StepTrace {
            q_target: scores.q_target,
            q_occlude: scores.q_occlude,
            tau1,
            tau2,
            action: Some(primitive),
            outcome: Some(outcome),
            nbv_predicted: self.last_nbv_predicted,
        });
        state.scene = next_scene;
        state.pending_views.push((info.clone(), state.scene.camera));
        state.info = info;
        state.scores = new_scores;
        state.observation = observation;
        state.done = done;
        state.success = success;

        EnvStep {
            features: state.observation.features.clone(),
            reward: r,
            done,
            success,
        }
    }
}

impl RolloutEnv for SearchEnv {
    fn reset(&mut self, episode_seed: u64) -> Vec<f64> {
        // Scene generation is total for sane configs; over-dense configs
        // surface early through try_reset in the harness paths.
        self.try_reset(episode_seed)
            .expect("scene generation failed; check scene config density");
        self.policy_features_now()
    }

    fn step(&mut self, action: &EnvAction) -> EnvStep {
        let mut step = self.step_env(action);
        step.features = self.policy_features_now();
        step
    }

    fn feature_dim(&self) -> usize {
        policy_feature_dim(self.sees_scores, self.patch_grid)
    }
}
