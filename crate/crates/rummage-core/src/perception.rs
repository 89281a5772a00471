//! Agent-side view of a render: target mask, object depth mapping (ODM), and
//! the compact feature vector the policy consumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::oracle::GraspScores;
use crate::scene::DepthRender;

/// Number of entries in [`Observation::features`].
pub const FEATURE_DIM: usize = 8;

pub const FEAT_Q_TARGET: usize = 5;
pub const FEAT_Q_OCCLUDE: usize = 6;

/// Block means of an image grid on a coarse `patch x patch` raster.
fn patch_means(values: &[f64], width: u32, height: u32, patch: u32) -> Vec<f64> {
    let mut sums = vec![0.0; (patch * patch) as usize];
    let mut counts = vec![0u32; (patch * patch) as usize];
    for row in 0..height {
        for col in 0..width {
            let pr = (row * patch / height).min(patch - 1);
            let pc = (col * patch / width).min(patch - 1);
            let i = (pr * patch + pc) as usize;
            sums[i] += values[(row * width + col) as usize];
            counts[i] += 1;
        }
    }
    sums.iter().zip(counts.iter()).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// The policy network's input built from an observation: the scalar context
/// features (minus the raw quality scores unless `sees_scores`), plus coarse
/// mask and ODM patch grids when `patch_grid > 0`. Both policy heads consume
/// the same representation; only the action structure differs.
pub fn policy_features(obs: &Observation, sees_scores: bool, patch_grid: u32) -> Vec<f64> {
    let mut out: Vec<f64> = if sees_scores {
        obs.features.clone()
    } else {
        obs.features
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != FEAT_Q_TARGET && *i != FEAT_Q_OCCLUDE)
            .map(|(_, v)| *v)
            .collect()
    };
    if patch_grid > 0 {
        let mask_f: Vec<f64> = obs.target_mask.mask.iter().map(|&m| m as f64).collect();
        out.extend(patch_means(&mask_f, obs.target_mask.width, obs.target_mask.height, patch_grid));
        out.extend(patch_means(&obs.odm.shades, obs.odm.width, obs.odm.height, patch_grid));
    }
    out
}

pub fn policy_feature_dim(sees_scores: bool, patch_grid: u32) -> usize {
    let base = if sees_scores { FEATURE_DIM } else { FEATURE_DIM - 2 };
    base + 2 * (patch_grid * patch_grid) as usize
}

/// Binary target-visibility mask, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMask {
    pub width: u32,
    pub height: u32,
    pub mask: Vec<u8>,
}

impl TargetMask {
    pub fn count(&self) -> u32 {
        self.mask.iter().map(|&m| m as u32).sum()
    }
}

/// Object-level depth map: each visible object painted in one shade by rank
/// of its mean depth, nearer objects lighter. Background is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdmMap {
    pub width: u32,
    pub height: u32,
    pub shades: Vec<f64>,
    /// (object id, mean visible depth), sorted farthest to nearest with ties
    /// broken by ascending id.
    pub object_order: Vec<(u32, f64)>,
}

impl OdmMap {
    pub fn shade_of(&self, id: u32) -> Option<f64> {
        let n = self.object_order.len() as f64;
        self.object_order
            .iter()
            .position(|&(oid, _)| oid == id)
            .map(|i| (i as f64 + 1.0) / n)
    }
}

/// Normalization constants for the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsNorm {
    /// Depth value mapped to 1.0, meters.
    pub depth_norm: f64,
    pub max_objects: f64,
    pub max_motions: f64,
}

impl Default for ObsNorm {
    fn default() -> Self {
        Self { depth_norm: 2.0, max_objects: 24.0, max_motions: 10.0 }
    }
}

/// The full observation: image-shaped mask and ODM plus the compact features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub target_mask: TargetMask,
    pub odm: OdmMap,
    /// [visible fraction, target mean depth, visible count, mean occluder
    /// shade, max occluder shade, q_target, q_occlude, progress], all in [0,1].
    pub features: Vec<f64>,
}

pub fn build_target_mask(render: &DepthRender, target_id: u32) -> TargetMask {
    TargetMask {
        width: render.width,
        height: render.height,
        mask: render.instance.iter().map(|&id| (id == target_id) as u8).collect(),
    }
}

pub fn build_odm(render: &DepthRender) -> OdmMap {
    let mut sums: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
    for (i, &id) in render.instance.iter().enumerate() {
        if id != 0 {
            let entry = sums.entry(id).or_insert((0.0, 0));
            entry.0 += render.depth[i];
            entry.1 += 1;
        }
    }

    let mut object_order: Vec<(u32, f64)> =
        sums.iter().map(|(&id, &(sum, n))| (id, sum / n as f64)).collect();
    // Farthest first; equal means fall back to ascending id.
    object_order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let n = object_order.len() as f64;
    let mut shade_by_id: BTreeMap<u32, f64> = BTreeMap::new();
    for (rank, &(id, _)) in object_order.iter().enumerate() {
        shade_by_id.insert(id, (rank as f64 + 1.0) / n);
    }

    let shades = render
        .instance
        .iter()
        .map(|id| if *id == 0 { 0.0 } else { shade_by_id[id] })
        .collect();

    OdmMap { width: render.width, height: render.height, shades, object_order }
}

/// Assemble the observation for one step. Pure function of its inputs.
pub fn build_observation(
    render: &DepthRender,
    target_id: u32,
    scores: &GraspScores,
    step_count: u32,
    norm: &ObsNorm,
) -> Observation {
    let target_mask = build_target_mask(render, target_id);
    let odm = build_odm(render);

    let total_px = (render.width * render.height) as f64;
    let visible_frac = target_mask.count() as f64 / total_px;

    let target_mean_depth = odm
        .object_order
        .iter()
        .find(|&&(id, _)| id == target_id)
        .map(|&(_, d)| (d / norm.depth_norm).clamp(0.0, 1.0))
        .unwrap_or(0.0);

    let visible_count = odm.object_order.len() as f64 / norm.max_objects;

    let occluder_shades: Vec<f64> = odm
        .object_order
        .iter()
        .filter(|&&(id, _)| id != target_id)
        .filter_map(|&(id, _)| odm.shade_of(id))
        .collect();
    let (mean_shade, max_shade) = if occluder_shades.is_empty() {
        (0.0, 0.0)
    } else {
        (
            occluder_shades.iter().sum::<f64>() / occluder_shades.len() as f64,
            occluder_shades.iter().cloned().fold(0.0, f64::max),
        )
    };

    let features = vec![
        visible_frac,
        target_mean_depth,
        visible_count.clamp(0.0, 1.0),
        mean_shade,
        max_shade,
        scores.q_target,
        scores.q_occlude,
        (step_count as f64 / norm.max_motions).clamp(0.0, 1.0),
    ];
    debug_assert_eq!(features.len(), FEATURE_DIM);

    Observation { target_mask, odm, features }
}

/// Write the ODM as an 8-bit grayscale PNG.
pub fn save_odm_png(odm: &OdmMap, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
    let pixels: Vec<u8> = odm.shades.iter().map(|s| (s * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(odm.width, odm.height, pixels)
        .expect("buffer matches dimensions");
    img.save(path).map_err(std::io::Error::other)
}

/// Write the target mask as an 8-bit grayscale PNG.
pub fn save_mask_png(mask: &TargetMask, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
    let pixels: Vec<u8> = mask.mask.iter().map(|&m| m * 255).collect();
    let img = image::GrayImage::from_raw(mask.width, mask.height, pixels)
        .expect("buffer matches dimensions");
    img.save(path).map_err(std::io::Error::other)
}
