//! Priority-guided action selection: two learned thresholds gate a fixed
//! cascade over the three primitives, with the view move evaluated lazily
//! only when both gates fail.

use serde::{Deserialize, Serialize};

use crate::error::DecisionError;
use crate::geom::CameraPose;
use crate::oracle::GraspScores;
use crate::scene::ActionPrimitive;

/// The policy's action output: both values clamped into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
}

impl Thresholds {
    pub fn new(tau1: f64, tau2: f64) -> Self {
        Self { tau1: tau1.clamp(0.0, 1.0), tau2: tau2.clamp(0.0, 1.0) }
    }
}

/// The two-gate cascade. Comparisons use >= so that a score exactly at its
/// threshold fires the gate.
///
/// `nbv_pose` is only invoked when both gates fail, keeping view planning off
/// the hot path.
pub fn decide(
    thresholds: Thresholds,
    scores: &GraspScores,
    nbv_pose: impl FnOnce() -> CameraPose,
) -> Result<ActionPrimitive, DecisionError> {
    if scores.q_target >= thresholds.tau1 {
        return Ok(ActionPrimitive::GraspTarget);
    }
    if scores.q_occlude >= thresholds.tau2 {
        let id = scores.best_occluder.ok_or(DecisionError::InconsistentScores)?;
        return Ok(ActionPrimitive::RemoveOccluder { id });
    }
    Ok(ActionPrimitive::MoveView { pose: nbv_pose() })
}

/// Flat ablation: argmax over {grasp, remove, move} with no gating. Picking
/// remove with no eligible occluder yields an action the simulator classifies
/// as infeasible (id 0 never names an object).
pub fn decide_flat(
    action_logits: [f64; 3],
    scores: &GraspScores,
    nbv_pose: impl FnOnce() -> CameraPose,
) -> ActionPrimitive {
    let mut best = 0;
    for i in 1..3 {
        if action_logits[i] > action_logits[best] {
            best = i;
        }
    }
    match best {
        0 => ActionPrimitive::GraspTarget,
        1 => ActionPrimitive::RemoveOccluder { id: scores.best_occluder.unwrap_or(0) },
        _ => ActionPrimitive::MoveView { pose: nbv_pose() },
    }
}
