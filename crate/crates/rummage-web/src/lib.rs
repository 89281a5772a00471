//! Browser demo: drive a mechanical-search episode interactively — explore
//! generated clutter scenes through the agent's mask/ODM/depth views, step
//! the threshold-gated decision cascade, and inspect the view planner's
//! candidate scores.

use wasm_bindgen::prelude::*;

use rummage_core::config::RunConfig;
use rummage_core::decision::Thresholds;
use rummage_core::env::SearchEnv;
use rummage_core::ppo::EnvAction;
use rummage_core::scene::ActionPrimitive;

#[wasm_bindgen]
pub struct Session {
    config: RunConfig,
    env: SearchEnv,
    total_reward: f64,
}

fn rgba_from_gray(values: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&[v, v, v, 255]);
    }
    out
}

#[wasm_bindgen]
impl Session {
    /// Start a session with a fresh scene.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, n_objects: u32, occluded: bool) -> Result<Session, JsError> {
        let mut config = RunConfig::default();
        config.scene.occluded_target = occluded;
        let n = n_objects.clamp(1, config.scene.max_objects);
        let mut env = SearchEnv::new(&config, vec![n], true);
        env.try_reset(seed).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Session { config, env, total_reward: 0.0 })
    }

    pub fn reset(&mut self, seed: u64, n_objects: u32, occluded: bool) -> Result<(), JsError> {
        let mut config = self.config.clone();
        config.scene.occluded_target = occluded;
        let n = n_objects.clamp(1, config.scene.max_objects);
        let mut env = SearchEnv::new(&config, vec![n], true);
        env.try_reset(seed).map_err(|e| JsError::new(&e.to_string()))?;
        self.config = config;
        self.env = env;
        self.total_reward = 0.0;
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.config.scene.render_width
    }

    pub fn height(&self) -> u32 {
        self.config.scene.render_height
    }

    /// Target mask as RGBA (white on black).
    pub fn mask_rgba(&self) -> Vec<u8> {
        let mask = &self.env.observation().target_mask;
        rgba_from_gray(mask.mask.iter().map(|&m| m * 255))
    }

    /// Object depth map as RGBA grayscale with the target tinted orange.
    pub fn odm_rgba(&self) -> Vec<u8> {
        let obs = self.env.observation();
        let mut out = Vec::with_capacity(obs.odm.shades.len() * 4);
        for (i, s) in obs.odm.shades.iter().enumerate() {
            let v = (s * 255.0).round() as u8;
            if obs.target_mask.mask[i] == 1 {
                out.extend_from_slice(&[255, (0.6 * v as f64) as u8 + 80, 40, 255]);
            } else {
                out.extend_from_slice(&[v, v, v, 255]);
            }
        }
        out
    }

    /// Raw depth normalized over the frame, RGBA grayscale (nearer = lighter).
    pub fn depth_rgba(&self) -> Vec<u8> {
        let scene = self.env.scene();
        let render = rummage_core::scene::render(scene, &scene.camera);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &d in &render.depth {
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let span = (hi - lo).max(1e-9);
        rgba_from_gray(
            render
                .depth
                .iter()
                .map(|d| (255.0 * (1.0 - (d - lo) / span)).round() as u8),
        )
    }

    pub fn q_target(&self) -> f64 {
        self.env.scores().q_target
    }

    pub fn q_occlude(&self) -> f64 {
        self.env.scores().q_occlude
    }

    pub fn step_count(&self) -> u32 {
        self.env.scene().step_count
    }

    pub fn max_motions(&self) -> u32 {
        self.config.dynamics.max_motions
    }

    pub fn done(&self) -> bool {
        self.env.done()
    }

    pub fn success(&self) -> bool {
        self.env.success()
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    pub fn objects_remaining(&self) -> u32 {
        self.env.scene().remaining() as u32
    }

    /// Which primitive the cascade would pick for these thresholds, without
    /// executing anything.
    pub fn preview(&self, tau1: f64, tau2: f64) -> String {
        let scores = self.env.scores();
        let t = Thresholds::new(tau1, tau2);
        if scores.q_target >= t.tau1 {
            "grasp_target".to_string()
        } else if scores.q_occlude >= t.tau2 {
            format!("remove_occluder #{}", scores.best_occluder.unwrap_or(0))
        } else {
            "move_view (next-best-view)".to_string()
        }
    }

    /// Execute one cascade step with the given thresholds. Returns a JSON
    /// summary of what happened.
    pub fn step(&mut self, tau1: f64, tau2: f64) -> Result<String, JsError> {
        if self.env.done() {
            return Err(JsError::new("episode finished; reset to continue"));
        }
        let step = self
            .env
            .step_env(&EnvAction::Thresholds(Thresholds::new(tau1, tau2)));
        self.total_reward += step.reward;
        Ok(self.last_step_json(step.reward))
    }

    /// Execute one primitive directly: 0 grasp, 1 remove best occluder,
    /// 2 move to the planned next-best view.
    pub fn step_manual(&mut self, action_index: u32) -> Result<String, JsError> {
        if self.env.done() {
            return Err(JsError::new("episode finished; reset to continue"));
        }
        let step = self.env.step_env(&EnvAction::Flat(action_index.min(2) as usize));
        self.total_reward += step.reward;
        Ok(self.last_step_json(step.reward))
    }

    fn last_step_json(&self, reward: f64) -> String {
        let trace = self.env.trace().last().cloned();
        let (action, outcome, nbv_q) = match trace {
            Some(t) => (
                t.action.map(describe_action).unwrap_or_else(|| "none".to_string()),
                t.outcome
                    .map(|o| serde_json::to_value(o).unwrap()["kind"].as_str().unwrap().to_string())
                    .unwrap_or_else(|| "dead_end".to_string()),
                t.nbv_predicted,
            ),
            None => ("none".to_string(), "none".to_string(), None),
        };
        serde_json::json!({
            "action": action,
            "outcome": outcome,
            "reward": reward,
            "nbv_predicted": nbv_q,
            "step": self.env.scene().step_count,
            "done": self.env.done(),
            "success": self.env.success(),
        })
        .to_string()
    }

    /// Predicted target quality per candidate viewpoint, in ring order.
    /// Fuses any pending observations first.
    pub fn nbv_scores(&mut self) -> Vec<f64> {
        use rummage_core::nbv::plan_nbv;
        let candidates = self.env.candidates().to_vec();
        let _ = self.env.plan_view();
        let (scene_grid, target_grid) = self.env.grids();
        candidates
            .iter()
            .map(|pose| {
                plan_nbv(
                    scene_grid,
                    target_grid,
                    std::slice::from_ref(pose),
                    &self.config.nbv,
                    &self.config.oracle,
                )
                .map(|c| c.predicted_q_target)
                .unwrap_or(0.0)
            })
            .collect()
    }

    /// Candidate viewpoint azimuths in degrees, ring order.
    pub fn candidate_azimuths(&self) -> Vec<f64> {
        self.env
            .candidates()
            .iter()
            .map(|c| c.position.y.atan2(c.position.x).to_degrees())
            .collect()
    }

    /// Per-object summary for the side panel, as JSON.
    pub fn objects_json(&self) -> String {
        let scene = self.env.scene();
        let scores = self.env.scores();
        let items: Vec<_> = scene
            .objects
            .iter()
            .map(|o| {
                serde_json::json!({
                    "id": o.id,
                    "target": o.is_target,
                    "removed": o.removed,
                    "height": o.height,
                    "quality": scores.per_object.get(&o.id),
                })
            })
            .collect();
        serde_json::json!(items).to_string()
    }
}

fn describe_action(action: ActionPrimitive) -> String {
    match action {
        ActionPrimitive::GraspTarget => "grasp_target".to_string(),
        ActionPrimitive::RemoveOccluder { id } => format!("remove_occluder #{id}"),
        ActionPrimitive::MoveView { .. } => "move_view".to_string(),
    }
}
