//! Deterministic 2.5-D tabletop world: scene generation, occlusion-aware
//! depth/instance rendering, and execution of the three action primitives.
//!
//! Objects are axis-aligned boxes standing on the table plane. Rendering is
//! exact per-pixel ray casting; the nearest non-removed box along each ray
//! wins, and background pixels carry the ray's distance to the table plane.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DynamicsConfig, SceneConfig};
use crate::error::SceneError;
use crate::geom::{CameraPose, Intrinsics, Rect, TableBox, Vec3};
use crate::oracle::GraspScores;

/// Depth assigned to rays that hit neither an object nor the table plane.
pub const FAR_DEPTH: f64 = 10.0;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: u32,
    pub footprint: Rect,
    pub height: f64,
    pub is_target: bool,
    pub removed: bool,
}

impl ObjectInstance {
    pub fn table_box(&self) -> TableBox {
        TableBox { footprint: self.footprint, height: self.height }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub objects: Vec<ObjectInstance>,
    /// Side length of the square workspace, meters.
    pub workspace: f64,
    pub camera: CameraPose,
    pub step_count: u32,
    pub rng_seed: u64,
}

impl SceneState {
    pub fn target(&self) -> &ObjectInstance {
        self.objects.iter().find(|o| o.is_target).expect("scene has a target")
    }

    pub fn target_id(&self) -> u32 {
        self.target().id
    }

    pub fn object(&self, id: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn remaining(&self) -> usize {
        self.objects.iter().filter(|o| !o.removed).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionPrimitive {
    GraspTarget,
    RemoveOccluder { id: u32 },
    MoveView { pose: CameraPose },
}

impl ActionPrimitive {
    pub fn tag(&self) -> &'static str {
        match self {
            ActionPrimitive::GraspTarget => "grasp_target",
            ActionPrimitive::RemoveOccluder { .. } => "remove_occluder",
            ActionPrimitive::MoveView { .. } => "move_view",
        }
    }
}

/// Classified result of executing one primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionOutcome {
    /// The target was grasped and lifted clear; the episode is a success.
    TargetExtracted,
    /// A grasp on the target failed; geometry unchanged unless perturbation is on.
    GraspFailed,
    OccluderRemoved { id: u32 },
    OccluderGraspFailed { id: u32 },
    ViewMoved,
    /// The requested action referenced a removed/absent object.
    Infeasible,
}

/// Per-pixel depth and instance-id grids, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRender {
    pub width: u32,
    pub height: u32,
    /// Ray distance to the nearest surface, meters; table depth for background.
    pub depth: Vec<f64>,
    /// Object id per pixel; 0 is background.
    pub instance: Vec<u32>,
}

impl DepthRender {
    pub fn idx(&self, row: u32, col: u32) -> usize {
        (row * self.width + col) as usize
    }

    pub fn depth_at(&self, row: u32, col: u32) -> f64 {
        self.depth[self.idx(row, col)]
    }

    pub fn instance_at(&self, row: u32, col: u32) -> u32 {
        self.instance[self.idx(row, col)]
    }

    /// Pixel count per visible object id.
    pub fn visible_pixels(&self) -> BTreeMap<u32, u32> {
        let mut counts = BTreeMap::new();
        for &id in &self.instance {
            if id != 0 {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// A render plus the per-object statistics the grasp oracle needs: how many
/// pixel rays would hit each object with everything else cleared away, and
/// which objects block rays that would otherwise reach the target.
#[derive(Debug, Clone)]
pub struct RenderInfo {
    pub render: DepthRender,
    pub solo_pixels: BTreeMap<u32, u32>,
    pub target_blockers: BTreeSet<u32>,
}

/// Generate a clutter scene by rejection sampling.
///
/// Identical (n_objects, seed, config) triples produce bit-identical scenes.
pub fn generate_scene(
    n_objects: u32,
    seed: u64,
    config: &SceneConfig,
) -> Result<SceneState, SceneError> {
    if n_objects == 0 || n_objects > config.max_objects {
        return Err(SceneError::InvalidParams(format!(
            "n_objects {n_objects} outside 1..={}",
            config.max_objects
        )));
    }
    if config.occluded_target && n_objects < 2 {
        return Err(SceneError::InvalidParams(
            "occluded-target scenes need at least 2 objects".to_string(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = spawn_camera(config);

    // The outer loop re-rolls occluded-family scenes whose target turns out
    // to be visible anyway; uniform scenes pass on the first iteration.
    let mut scene_tries = 0u32;
    loop {
        scene_tries += 1;
        let scene = match build_scene(n_objects, seed, &mut rng, camera, config) {
            Ok(scene) => scene,
            Err(SceneError::PlacementFailed { tries }) => {
                // Unlucky layout (dense packing, or no room for the wall);
                // re-roll the whole scene from the continuing stream.
                if scene_tries >= 32 {
                    return Err(SceneError::PlacementFailed { tries });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if !config.occluded_target {
            return Ok(scene);
        }
        let render = render(&scene, &scene.camera);
        let target_visible = render.instance.iter().any(|&id| id == scene.target_id());
        if !target_visible {
            return Ok(scene);
        }
        if scene_tries >= 32 {
            return Err(SceneError::PlacementFailed { tries: config.max_rejection_tries });
        }
    }
}

fn spawn_camera(config: &SceneConfig) -> CameraPose {
    CameraPose::on_ring(
        Vec3::new(0.0, 0.0, 0.0),
        config.camera_radius,
        config.camera_elevation_deg,
        config.camera_azimuth_deg,
        Intrinsics {
            focal_px: config.focal_px,
            width: config.render_width,
            height: config.render_height,
        },
    )
}

fn build_scene(
    n_objects: u32,
    seed: u64,
    rng: &mut ChaCha8Rng,
    camera: CameraPose,
    config: &SceneConfig,
) -> Result<SceneState, SceneError> {
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(n_objects as usize);

    if config.occluded_target {
        // Target first, kept away from the camera-side edge so the wall fits,
        // then the wall between it and the spawn camera.
        let u = Vec3::new(camera.position.x, camera.position.y, 0.0).normalized();
        let mut target = None;
        for _ in 0..config.max_rejection_tries {
            let cand = sample_object(1, rng, config, &objects)?;
            let (cx, cy) = cand.footprint.center();
            if cx * u.x + cy * u.y <= 0.02 * config.workspace_size {
                target = Some(cand);
                break;
            }
        }
        let target =
            target.ok_or(SceneError::PlacementFailed { tries: config.max_rejection_tries })?;
        objects.push(target);
        let wall = sample_wall(2, rng, config, &objects, &camera)?;
        objects.push(wall);
        for id in 3..=n_objects {
            let obj = sample_object(id, rng, config, &objects)?;
            objects.push(obj);
        }
        objects[0].is_target = true;
    } else {
        for id in 1..=n_objects {
            let obj = sample_object(id, rng, config, &objects)?;
            objects.push(obj);
        }
        let target_idx = rng.gen_range(0..objects.len());
        objects[target_idx].is_target = true;
    }

    Ok(SceneState {
        objects,
        workspace: config.workspace_size,
        camera,
        step_count: 0,
        rng_seed: seed,
    })
}

fn sample_object(
    id: u32,
    rng: &mut ChaCha8Rng,
    config: &SceneConfig,
    placed: &[ObjectInstance],
) -> Result<ObjectInstance, SceneError> {
    for _ in 0..config.max_rejection_tries {
        let sx = rng.gen_range(config.size_range[0]..=config.size_range[1]);
        let sy = rng.gen_range(config.size_range[0]..=config.size_range[1]);
        let height = rng.gen_range(config.height_range[0]..=config.height_range[1]);
        let half = config.workspace_size / 2.0;
        let cx = rng.gen_range(-half + sx / 2.0..=half - sx / 2.0);
        let cy = rng.gen_range(-half + sy / 2.0..=half - sy / 2.0);
        let footprint = Rect::centered(cx, cy, sx, sy);
        if footprint_ok(&footprint, placed, config) {
            return Ok(ObjectInstance { id, footprint, height, is_target: false, removed: false });
        }
    }
    Err(SceneError::PlacementFailed { tries: config.max_rejection_tries })
}

fn footprint_ok(footprint: &Rect, placed: &[ObjectInstance], config: &SceneConfig) -> bool {
    if !footprint.inside_square(config.workspace_size) {
        return false;
    }
    let area = footprint.area();
    let overlap: f64 =
        placed.iter().map(|o| footprint.intersection_area(&o.footprint)).sum();
    overlap <= config.overlap_tolerance * area + 1e-12
}

/// A tall, wide box dropped on the camera-to-target line so the target starts
/// fully hidden from the spawn viewpoint. The wall height is derived from the
/// camera sight lines over the target's top corners; the generator still
/// verifies full occlusion with a render and re-rolls on failure.
fn sample_wall(
    id: u32,
    rng: &mut ChaCha8Rng,
    config: &SceneConfig,
    placed: &[ObjectInstance],
    camera: &CameraPose,
) -> Result<ObjectInstance, SceneError> {
    let target = &placed[0];
    let (tx, ty) = target.footprint.center();
    let to_cam = Vec3::new(camera.position.x - tx, camera.position.y - ty, 0.0).normalized();

    for _ in 0..config.max_rejection_tries {
        let gap = rng.gen_range(0.01..=0.03);
        let depth = rng.gen_range(0.03..=0.06);
        let t_half = 0.5
            * (target.footprint.max_x - target.footprint.min_x)
                .max(target.footprint.max_y - target.footprint.min_y);
        let dist = t_half + gap + depth / 2.0;
        let (cx, cy) = (tx + to_cam.x * dist, ty + to_cam.y * dist);

        // Extent perpendicular to the viewing direction, depth along it. The
        // width shrinks to whatever fits at this lateral position but must
        // still comfortably cover the target silhouette.
        let target_side = (target.footprint.max_x - target.footprint.min_x)
            .max(target.footprint.max_y - target.footprint.min_y);
        let half_ws = config.workspace_size / 2.0;
        let y_wide = to_cam.x.abs() >= to_cam.y.abs();
        let perp = if y_wide { cy } else { cx };
        let width_fit = 2.0 * (half_ws - perp.abs()) - 1e-9;
        if width_fit < 1.6 * target_side {
            continue;
        }
        let width = (rng.gen_range(2.5..=4.0) * target_side).min(width_fit);
        let (sx, sy) = if y_wide { (depth, width) } else { (width, depth) };

        // Minimum height so the sight line from the camera to each top corner
        // of the target crosses the wall's center line below the wall top.
        let fp = target.footprint;
        let mut h_min: f64 = 0.0;
        for &(px, py) in
            &[(fp.min_x, fp.min_y), (fp.min_x, fp.max_y), (fp.max_x, fp.min_y), (fp.max_x, fp.max_y)]
        {
            let d_corner =
                ((px - camera.position.x).powi(2) + (py - camera.position.y).powi(2)).sqrt();
            let d_wall =
                ((cx - camera.position.x).powi(2) + (cy - camera.position.y).powi(2)).sqrt();
            if d_corner > 1e-9 {
                let t = (d_wall / d_corner).clamp(0.0, 1.0);
                h_min = h_min.max(camera.position.z + t * (target.height - camera.position.z));
            }
        }
        let height =
            (h_min + rng.gen_range(0.02..=0.06)).min(camera.position.z * 0.9).max(target.height);

        let footprint =
            Rect::centered(cx, cy, sx.min(config.workspace_size), sy.min(config.workspace_size));
        if footprint.inside_square(config.workspace_size)
            && footprint.intersection_area(&target.footprint) <= 1e-12
        {
            return Ok(ObjectInstance { id, footprint, height, is_target: false, removed: false });
        }
    }
    Err(SceneError::PlacementFailed { tries: config.max_rejection_tries })
}

/// Per-pixel ray cast of the scene from `camera`. Pure function of its inputs.
pub fn render(scene: &SceneState, camera: &CameraPose) -> DepthRender {
    render_info(scene, camera).render
}

/// Render plus oracle statistics, computed in one pass over the pixel rays.
pub fn render_info(scene: &SceneState, camera: &CameraPose) -> RenderInfo {
    let w = camera.intrinsics.width;
    let h = camera.intrinsics.height;
    let n_px = (w * h) as usize;
    let mut depth = vec![0.0f64; n_px];
    let mut instance = vec![0u32; n_px];
    let mut solo_pixels: BTreeMap<u32, u32> = BTreeMap::new();
    let mut target_blockers: BTreeSet<u32> = BTreeSet::new();

    let live: Vec<&ObjectInstance> = scene.objects.iter().filter(|o| !o.removed).collect();
    for o in &live {
        solo_pixels.insert(o.id, 0);
    }
    let target_id = scene.objects.iter().find(|o| o.is_target).map(|o| o.id);

    let origin = camera.position;
    let mut hits: Vec<(u32, f64)> = Vec::with_capacity(live.len());
    for row in 0..h {
        for col in 0..w {
            let dir = camera.pixel_ray(row, col);
            let t_table = if dir.z < -1e-12 { -origin.z / dir.z } else { FAR_DEPTH };

            hits.clear();
            for o in &live {
                if let Some(t) = o.table_box().ray_hit(origin, dir) {
                    hits.push((o.id, t));
                    *solo_pixels.get_mut(&o.id).unwrap() += 1;
                }
            }

            let mut best_t = t_table;
            let mut best_id = 0u32;
            for &(id, t) in &hits {
                if t < best_t {
                    best_t = t;
                    best_id = id;
                }
            }

            if let Some(tid) = target_id {
                if let Some(&(_, t_target)) = hits.iter().find(|(id, _)| *id == tid) {
                    for &(id, t) in &hits {
                        if id != tid && t < t_target {
                            target_blockers.insert(id);
                        }
                    }
                }
            }

            let idx = (row * w + col) as usize;
            depth[idx] = best_t;
            instance[idx] = best_id;
        }
    }

    RenderInfo {
        render: DepthRender { width: w, height: h, depth, instance },
        solo_pixels,
        target_blockers,
    }
}

/// Deterministic per-step RNG used for failure perturbations. Derived from
/// the scene seed and the step index so that re-simulating a recorded episode
/// reproduces every draw.
fn step_rng(scene: &SceneState) -> ChaCha8Rng {
    let mixed = scene
        .rng_seed
        .wrapping_add((scene.step_count as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn mix64(mut h: u64) -> u64 {
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

/// Latent grasp difficulty of one object, uniform in [0, 1) and fixed per
/// (scene seed, object) for the whole episode. A grasp succeeds iff the
/// object's current quality score exceeds this draw: the first attempt is
/// Bernoulli(quality) across scenes, and retrying only helps after the score
/// itself has been raised, by clearing neighbors or exposing the object.
fn grasp_difficulty(scene: &SceneState, id: u32) -> f64 {
    let h = mix64(scene.rng_seed ^ (id as u64 + 1).wrapping_mul(0xD134_2543_DE82_EF95));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.gen_range(0.0..1.0)
}

/// Execute one action primitive against the scene.
///
/// Grasps succeed with probability equal to the oracle's quality score for
/// the grasped object (a seeded Bernoulli draw). Every call advances
/// `step_count` by exactly one, including infeasible actions.
pub fn execute(
    scene: &SceneState,
    action: &ActionPrimitive,
    scores: &GraspScores,
    config: &DynamicsConfig,
) -> (SceneState, TransitionOutcome) {
    assert!(
        scene.step_count < config.max_motions,
        "execute called past the motion budget"
    );
    let mut next = scene.clone();
    let mut rng = step_rng(scene);

    let outcome = match action {
        ActionPrimitive::GraspTarget => {
            let target_idx = next.objects.iter().position(|o| o.is_target && !o.removed);
            match target_idx {
                None => TransitionOutcome::Infeasible,
                // A zero score means no grasp candidate exists (for example a
                // fully occluded target): selecting the grasp is infeasible.
                Some(_) if scores.q_target <= 0.0 => TransitionOutcome::Infeasible,
                Some(i) => {
                    if scores.q_target > grasp_difficulty(scene, next.objects[i].id) {
                        next.objects[i].removed = true;
                        TransitionOutcome::TargetExtracted
                    } else {
                        if config.perturb_on_failure {
                            let id = next.objects[i].id;
                            let radius = config.perturb_radius
                                * (1.0 + config.failure_severity * (1.0 - scores.q_target));
                            perturb(&mut next, id, &mut rng, radius);
                        }
                        TransitionOutcome::GraspFailed
                    }
                }
            }
        }
        ActionPrimitive::RemoveOccluder { id } => {
            let idx = next
                .objects
                .iter()
                .position(|o| o.id == *id && !o.removed && !o.is_target);
            let q = scores.per_object.get(id).copied().unwrap_or(0.0);
            match idx {
                None => TransitionOutcome::Infeasible,
                Some(_) if q <= 0.0 => TransitionOutcome::Infeasible,
                Some(i) => {
                    if q > grasp_difficulty(scene, *id) * config.removal_ease {
                        next.objects[i].removed = true;
                        TransitionOutcome::OccluderRemoved { id: *id }
                    } else {
                        if config.perturb_on_failure {
                            let radius = config.perturb_radius
                                * (1.0 + config.failure_severity * (1.0 - q));
                            perturb(&mut next, *id, &mut rng, radius);
                        }
                        TransitionOutcome::OccluderGraspFailed { id: *id }
                    }
                }
            }
        }
        ActionPrimitive::MoveView { pose } => {
            next.camera = *pose;
            TransitionOutcome::ViewMoved
        }
    };

    next.step_count += 1;
    (next, outcome)
}

/// A failed grasp destabilizes the local pile: nearby surviving objects
/// slide toward the attempted object, tightening the clutter around it.
fn perturb(scene: &mut SceneState, attempted_id: u32, rng: &mut ChaCha8Rng, radius: f64) {
    let Some(attempted) = scene.object(attempted_id) else { return };
    let (ax, ay) = attempted.footprint.center();
    let reach = attempted.footprint.inflated(4.0 * radius + 0.05);
    let half = scene.workspace / 2.0;

    for o in scene.objects.iter_mut().filter(|o| !o.removed && o.id != attempted_id) {
        if reach.intersection_area(&o.footprint) <= 0.0 && !reach_touches(&reach, &o.footprint) {
            continue;
        }
        let (cx, cy) = o.footprint.center();
        let dir_x = ax - cx;
        let dir_y = ay - cy;
        let norm = (dir_x * dir_x + dir_y * dir_y).sqrt();
        if norm < 1e-9 {
            continue;
        }
        let shift = rng.gen_range(0.0..=radius);
        let w = o.footprint.max_x - o.footprint.min_x;
        let h = o.footprint.max_y - o.footprint.min_y;
        let nx = (cx + dir_x / norm * shift).clamp(-half + w / 2.0, half - w / 2.0);
        let ny = (cy + dir_y / norm * shift).clamp(-half + h / 2.0, half - h / 2.0);
        o.footprint = Rect::centered(nx, ny, w, h);
    }
}

fn reach_touches(reach: &Rect, fp: &Rect) -> bool {
    fp.min_x <= reach.max_x && fp.max_x >= reach.min_x && fp.min_y <= reach.max_y && fp.max_y >= reach.min_y
}

/// Versioned scene snapshot for replay files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub version: u32,
    pub scene: SceneState,
}

impl SceneSnapshot {
    pub fn new(scene: SceneState) -> Self {
        Self { version: SNAPSHOT_VERSION, scene }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}
