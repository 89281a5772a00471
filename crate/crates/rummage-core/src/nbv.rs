//! Next-best-view planning: rank a fixed ring of candidate poses by how much
//! of the believed target surface each one can see through the fused scene
//! geometry, and return the argmax.

use serde::{Deserialize, Serialize};

use crate::config::{NbvConfig, OracleConfig};
use crate::error::DecisionError;
use crate::geom::{CameraPose, Intrinsics, Vec3};
use crate::oracle;
use crate::tsdf::TsdfGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewCandidate {
    pub pose: CameraPose,
    pub predicted_q_target: f64,
}

/// The candidate ring around the workspace center: `azimuth_count` evenly
/// spaced azimuths at each configured elevation, in config order. Ties in
/// scoring resolve to the earliest pose in this list.
pub fn candidate_ring(config: &NbvConfig, intrinsics: Intrinsics) -> Vec<CameraPose> {
    let center = Vec3::new(0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(config.elevations_deg.len() * config.azimuth_count as usize);
    for &elevation in &config.elevations_deg {
        for i in 0..config.azimuth_count {
            let azimuth = 360.0 * i as f64 / config.azimuth_count as f64;
            out.push(CameraPose::on_ring(center, config.ring_radius, elevation, azimuth, intrinsics));
        }
    }
    out
}

/// Score one candidate: the fraction of believed target-surface voxels whose
/// line of sight from the pose is not interrupted by a fused scene surface,
/// pushed through the oracle's quality curve (clearance is unknowable from a
/// TSDF and enters as 1).
pub fn predicted_quality(
    scene_grid: &TsdfGrid,
    target_surface: &[Vec3],
    pose: &CameraPose,
    nbv_config: &NbvConfig,
    oracle_config: &OracleConfig,
) -> f64 {
    if target_surface.is_empty() {
        return 0.0;
    }
    let step = scene_grid.voxel_size * nbv_config.march_step_frac;
    let margin = 1.5 * scene_grid.voxel_size;
    let mut visible = 0usize;
    for &v in target_surface {
        let to_voxel = v - pose.position;
        let dist = to_voxel.norm();
        if dist <= margin {
            visible += 1;
            continue;
        }
        let dir = to_voxel * (1.0 / dist);
        match scene_grid.march_ray(pose.position, dir, dist - margin, step) {
            Some(_) => {}
            None => visible += 1,
        }
    }
    let fraction = visible as f64 / target_surface.len() as f64;
    oracle::quality(fraction, 1.0, oracle_config.alpha, oracle_config.beta)
}

/// Pick the candidate with the highest predicted target quality.
///
/// `scene_grid` fuses all depth observed so far; `target_grid` fuses only
/// target-mask pixels and encodes where the target is believed to be. With an
/// empty belief every candidate scores zero and the first one wins.
pub fn plan_nbv(
    scene_grid: &TsdfGrid,
    target_grid: &TsdfGrid,
    candidates: &[CameraPose],
    nbv_config: &NbvConfig,
    oracle_config: &OracleConfig,
) -> Result<ViewCandidate, DecisionError> {
    if candidates.is_empty() {
        return Err(DecisionError::NoCandidates);
    }
    let target_surface = target_grid.surface_voxels(nbv_config.surface_band);

    let mut best = ViewCandidate { pose: candidates[0], predicted_q_target: f64::NEG_INFINITY };
    for pose in candidates {
        let q = predicted_quality(scene_grid, &target_surface, pose, nbv_config, oracle_config);
        if q > best.predicted_q_target {
            best = ViewCandidate { pose: *pose, predicted_q_target: q };
        }
    }
    best.predicted_q_target = best.predicted_q_target.max(0.0);
    Ok(best)
}
