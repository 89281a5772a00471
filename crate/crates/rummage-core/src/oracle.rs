//! Deterministic grasp-quality oracle: per-object scores from visibility and
//! lateral clearance, yielding the target score and the best-occluder score
//! that gate the decision cascade.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::OracleConfig;
use crate::scene::{RenderInfo, SceneState};

/// Per-object grasp quality plus the two aggregates the policy consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspScores {
    /// Quality in [0, 1] per non-removed object id.
    pub per_object: BTreeMap<u32, f64>,
    pub q_target: f64,
    /// Max quality over eligible occluders; 0 when there are none.
    pub q_occlude: f64,
    pub best_occluder: Option<u32>,
}

/// The scoring formula: visibility^alpha * clearance^beta, clamped to [0, 1].
pub fn quality(visibility: f64, clearance: f64, alpha: f64, beta: f64) -> f64 {
    let v = visibility.clamp(0.0, 1.0);
    let c = clearance.clamp(0.0, 1.0);
    (v.powf(alpha) * c.powf(beta)).clamp(0.0, 1.0)
}

/// Score every non-removed object in the scene.
///
/// Visibility is the fraction of the object's unoccluded pixel projection
/// that survives occlusion in the actual render; clearance measures how much
/// of a ring around the footprint is free of other objects. Scores double as
/// grasp success probabilities for the simulator's Bernoulli execution.
pub fn score_scene(scene: &SceneState, info: &RenderInfo, config: &OracleConfig) -> GraspScores {
    let visible = info.render.visible_pixels();
    let target_id = scene.target_id();

    let mut per_object = BTreeMap::new();
    for obj in scene.objects.iter().filter(|o| !o.removed) {
        let solo = info.solo_pixels.get(&obj.id).copied().unwrap_or(0);
        let vis_px = visible.get(&obj.id).copied().unwrap_or(0);
        let visibility = if solo == 0 { 0.0 } else { vis_px as f64 / solo as f64 };
        let clr = clearance(scene, obj.id, config.clearance_radius);
        per_object.insert(obj.id, quality(visibility, clr, config.alpha, config.beta));
    }

    let q_target = per_object.get(&target_id).copied().unwrap_or(0.0);

    // Occluder candidates must actually stand in the way of the target:
    // blocking its sight lines or crowding the gripper ring around it. The
    // relaxed mode admits any visible non-target object instead.
    let target_ring = scene
        .object(target_id)
        .map(|t| t.footprint.inflated(config.clearance_radius));
    let mut q_occlude = 0.0;
    let mut best_occluder = None;
    for (&id, &q) in &per_object {
        if id == target_id {
            continue;
        }
        if visible.get(&id).copied().unwrap_or(0) == 0 {
            continue;
        }
        let eligible = if config.strict_occluders {
            let blocks = info.target_blockers.contains(&id);
            let crowds = match (&target_ring, scene.object(id)) {
                (Some(ring), Some(obj)) => ring.intersection_area(&obj.footprint) > 0.0,
                _ => false,
            };
            blocks || crowds
        } else {
            true
        };
        if !eligible {
            continue;
        }
        // Strictly-greater keeps the lowest eligible id on ties.
        if best_occluder.is_none() || q > q_occlude {
            q_occlude = q;
            best_occluder = Some(id);
        }
    }

    GraspScores { per_object, q_target, q_occlude, best_occluder }
}

/// Free approach space around the object's footprint, in [0, 1].
///
/// Neighbors inside the gripper ring block in proportion to their overlap,
/// weighted by relative height: an equal-or-taller neighbor blocks its full
/// overlap, a half-height one blocks half. Tall peripheral objects therefore
/// stay easy to grasp while a short target hemmed in by taller clutter stays
/// hard until its neighbors are removed.
fn clearance(scene: &SceneState, id: u32, radius: f64) -> f64 {
    let obj = scene.object(id).expect("object exists");
    let own = obj.footprint;
    let ring_outer = own.inflated(radius);
    let ring_area = ring_outer.area() - own.area();
    if ring_area <= 0.0 {
        return 1.0;
    }
    let mut blocked = 0.0;
    for other in scene.objects.iter().filter(|o| !o.removed && o.id != id) {
        let overlap = ring_outer.intersection_area(&other.footprint)
            - own.intersection_area(&other.footprint);
        let height_weight = (other.height / obj.height).min(1.0);
        blocked += overlap * height_weight;
    }
    (1.0 - blocked / ring_area).clamp(0.0, 1.0)
}
