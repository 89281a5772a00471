//! Truncated signed distance fusion over a fixed voxel grid, plus the ray
//! queries the view planner uses to synthesize visibility from fused depth.

use serde::{Deserialize, Serialize};

use crate::config::NbvConfig;
use crate::geom::{CameraPose, Vec3};
use crate::perception::TargetMask;
use crate::scene::DepthRender;

/// Voxel grid of truncated signed distances with per-voxel fusion weights.
/// `weight == 0` marks a voxel as unobserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsdfGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub truncation: f64,
    pub weight_cap: f64,
}

impl TsdfGrid {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3], truncation: f64, weight_cap: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin,
            voxel_size,
            dims,
            values: vec![0.0; n],
            weights: vec![0.0; n],
            truncation,
            weight_cap,
        }
    }

    /// Grid spanning the workspace square (plus a margin) from just below the
    /// table up to the configured volume height.
    pub fn for_workspace(workspace: f64, config: &NbvConfig) -> Self {
        let margin = 0.06;
        let half = workspace / 2.0 + margin;
        let v = config.voxel_size;
        let dims = [
            (2.0 * half / v).ceil() as usize,
            (2.0 * half / v).ceil() as usize,
            ((config.volume_height + v) / v).ceil() as usize,
        ];
        let origin = Vec3::new(-half, -half, -v);
        Self::new(origin, v, dims, config.truncation_mult * v, config.weight_cap)
    }

    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + y * self.dims[0] + z * self.dims[0] * self.dims[1]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Voxel containing a world point, or `None` outside the grid.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let rel = p - self.origin;
        let fx = rel.x / self.voxel_size;
        let fy = rel.y / self.voxel_size;
        let fz = rel.z / self.voxel_size;
        if fx < 0.0 || fy < 0.0 || fz < 0.0 {
            return None;
        }
        let (x, y, z) = (fx as usize, fy as usize, fz as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some([x, y, z])
    }

    /// (value, weight) at the voxel containing `p`; `None` outside the grid.
    pub fn sample(&self, p: Vec3) -> Option<(f64, f64)> {
        self.voxel_of(p).map(|[x, y, z]| {
            let i = self.idx(x, y, z);
            (self.values[i], self.weights[i])
        })
    }

    pub fn observed_voxels(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Fuse one depth render taken from `camera` into the grid using the
    /// standard weighted running mean. With `mask` given, only pixels where
    /// the mask is set contribute (used for the target-only belief grid).
    pub fn integrate(
        &mut self,
        render: &DepthRender,
        camera: &CameraPose,
        mask: Option<&TargetMask>,
    ) {
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let p = self.voxel_center(x, y, z);
                    let Some((row, col, dist)) = camera.project(p) else { continue };
                    if let Some(m) = mask {
                        if m.mask[(row * m.width + col) as usize] == 0 {
                            continue;
                        }
                    }
                    let depth = render.depth_at(row, col);
                    if !depth.is_finite() || depth <= 0.0 {
                        continue;
                    }
                    let sdf = depth - dist;
                    if sdf < -self.truncation {
                        // Far behind the observed surface: nothing is known.
                        continue;
                    }
                    let tsdf = sdf.min(self.truncation).max(-self.truncation);
                    let i = self.idx(x, y, z);
                    let w = self.weights[i];
                    self.values[i] = (self.values[i] * w + tsdf) / (w + 1.0);
                    self.weights[i] = (w + 1.0).min(self.weight_cap);
                }
            }
        }
    }

    /// March a ray from `origin` along `dir`, returning the distance of the
    /// first observed free-to-occupied sign change, if any, up to `max_t`.
    ///
    /// Unobserved voxels break the crossing detection: a surface is only
    /// reported where fused evidence actually flips sign.
    pub fn march_ray(&self, origin: Vec3, dir: Vec3, max_t: f64, step: f64) -> Option<f64> {
        let mut prev: Option<(f64, f64)> = None; // (t, value)
        let mut t = 0.0;
        while t <= max_t {
            let p = origin + dir * t;
            match self.sample(p) {
                Some((v, w)) if w > 0.0 => {
                    if let Some((pt, pv)) = prev {
                        if pv > 0.0 && v <= 0.0 {
                            // Interpolate the zero crossing between samples.
                            let frac = pv / (pv - v);
                            return Some(pt + frac * (t - pt));
                        }
                    }
                    prev = Some((t, v));
                }
                _ => {
                    prev = None;
                }
            }
            t += step;
        }
        None
    }

    /// Interpolated height of the fused surface in the voxel column closest
    /// to (x, y), scanning downward. `None` when the column holds no crossing.
    pub fn surface_height_at(&self, x: f64, y: f64) -> Option<f64> {
        let probe = Vec3::new(x, y, self.origin.z + self.voxel_size / 2.0);
        let rel = probe - self.origin;
        let vx = (rel.x / self.voxel_size) as usize;
        let vy = (rel.y / self.voxel_size) as usize;
        if vx >= self.dims[0] || vy >= self.dims[1] {
            return None;
        }
        for z in (1..self.dims[2]).rev() {
            let hi = self.idx(vx, vy, z);
            let lo = self.idx(vx, vy, z - 1);
            if self.weights[hi] > 0.0
                && self.weights[lo] > 0.0
                && self.values[hi] > 0.0
                && self.values[lo] <= 0.0
            {
                let z_hi = self.voxel_center(vx, vy, z).z;
                let z_lo = self.voxel_center(vx, vy, z - 1).z;
                let frac = self.values[hi] / (self.values[hi] - self.values[lo]);
                return Some(z_hi + frac * (z_lo - z_hi));
            }
        }
        None
    }

    /// Centers of observed voxels lying within `band` (in voxels) of the
    /// fused surface.
    pub fn surface_voxels(&self, band: f64) -> Vec<Vec3> {
        let cutoff = band * self.voxel_size;
        let mut out = Vec::new();
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let i = self.idx(x, y, z);
                    if self.weights[i] > 0.0 && self.values[i].abs() <= cutoff {
                        out.push(self.voxel_center(x, y, z));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{NbvConfig, SceneConfig};
    use crate::scene::{generate_scene, render};

    fn flat_table_setup() -> (TsdfGrid, crate::scene::SceneState) {
        let mut scene_cfg = SceneConfig::default();
        scene_cfg.camera_elevation_deg = 60.0;
        let mut scene = generate_scene(1, 1, &scene_cfg).unwrap();
        scene.objects[0].removed = true; // bare table
        let grid = TsdfGrid::for_workspace(scene.workspace, &NbvConfig::default());
        (grid, scene)
    }

    #[test]
    fn integration_observes_only_frustum_voxels() {
        let (mut grid, scene) = flat_table_setup();
        assert_eq!(grid.observed_voxels(), 0);
        let r = render(&scene, &scene.camera);
        grid.integrate(&r, &scene.camera, None);
        assert!(grid.observed_voxels() > 0);

        // Every observed voxel must project into the image.
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    if grid.weights[grid.idx(x, y, z)] > 0.0 {
                        assert!(scene.camera.project(grid.voxel_center(x, y, z)).is_some());
                    }
                }
            }
        }
    }

    #[test]
    fn double_integration_is_idempotent_on_values() {
        let (mut grid, scene) = flat_table_setup();
        let r = render(&scene, &scene.camera);
        grid.integrate(&r, &scene.camera, None);
        let values_once = grid.values.clone();
        grid.integrate(&r, &scene.camera, None);
        for (a, b) in values_once.iter().zip(grid.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_monotone_and_values_bounded() {
        let (mut grid, scene) = flat_table_setup();
        let r = render(&scene, &scene.camera);
        grid.integrate(&r, &scene.camera, None);
        let w1 = grid.weights.clone();
        grid.integrate(&r, &scene.camera, None);
        for (a, b) in w1.iter().zip(grid.weights.iter()) {
            assert!(b >= a);
            assert!(*b <= grid.weight_cap);
        }
        for v in &grid.values {
            assert!(v.abs() <= grid.truncation + 1e-12);
        }
    }

    /// The fused zero-crossing of a bare table must sit within one voxel of
    /// the analytic plane at z = 0.
    #[test]
    fn flat_plane_zero_crossing_within_one_voxel() {
        let (mut grid, scene) = flat_table_setup();
        let r = render(&scene, &scene.camera);
        grid.integrate(&r, &scene.camera, None);

        let mut checked = 0;
        for &xy in &[(0.0, 0.0), (0.1, -0.1), (-0.15, 0.05), (0.2, 0.2)] {
            if let Some(h) = grid.surface_height_at(xy.0, xy.1) {
                assert!(
                    h.abs() <= grid.voxel_size,
                    "plane crossing at ({}, {}) off by {h}",
                    xy.0,
                    xy.1
                );
                checked += 1;
            }
        }
        assert!(checked >= 3, "most probed columns should contain the table surface");
    }

    #[test]
    fn march_ray_finds_table() {
        let (mut grid, scene) = flat_table_setup();
        let r = render(&scene, &scene.camera);
        grid.integrate(&r, &scene.camera, None);

        // From above the center straight down: expect a crossing near z=0.
        let origin = Vec3::new(0.0, 0.0, 0.25);
        let t = grid
            .march_ray(origin, Vec3::new(0.0, 0.0, -1.0), 0.4, grid.voxel_size * 0.5)
            .expect("table surface should be hit");
        assert!((t - 0.25).abs() <= 1.5 * grid.voxel_size, "crossing at t={t}");
    }

    #[test]
    fn march_ray_ignores_unobserved_space() {
        let grid =
            TsdfGrid::for_workspace(0.5, &NbvConfig::default());
        let hit = grid.march_ray(
            Vec3::new(0.0, 0.0, 0.3),
            Vec3::new(0.0, 0.0, -1.0),
            0.5,
            grid.voxel_size * 0.5,
        );
        assert!(hit.is_none());
    }

    #[test]
    fn masked_integration_restricts_to_target_pixels() {
        let scene = generate_scene(1, 3, &SceneConfig::default()).unwrap();
        let r = render(&scene, &scene.camera);
        let mask = crate::perception::build_target_mask(&r, scene.target_id());

        let cfg = NbvConfig::default();
        let mut full = TsdfGrid::for_workspace(scene.workspace, &cfg);
        let mut masked = TsdfGrid::for_workspace(scene.workspace, &cfg);
        full.integrate(&r, &scene.camera, None);
        masked.integrate(&r, &scene.camera, Some(&mask));
        assert!(masked.observed_voxels() > 0);
        assert!(masked.observed_voxels() < full.observed_voxels());
    }
}
