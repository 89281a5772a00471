//! Minimal 3-D geometry: vectors, axis-aligned boxes, and the pinhole camera
//! used by the depth renderer and the volumetric fusion code.

use serde::{Deserialize, Serialize};

pub const WORLD_UP: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            self * (1.0 / n)
        }
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Axis-aligned rectangle on the table plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, size_x: f64, size_y: f64) -> Self {
        Self {
            min_x: cx - size_x / 2.0,
            min_y: cy - size_y / 2.0,
            max_x: cx + size_x / 2.0,
            max_y: cy + size_y / 2.0,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0) * (self.max_y - self.min_y).max(0.0)
    }

    pub fn inflated(&self, r: f64) -> Rect {
        Rect {
            min_x: self.min_x - r,
            min_y: self.min_y - r,
            max_x: self.max_x + r,
            max_y: self.max_y + r,
        }
    }

    pub fn intersection_area(&self, o: &Rect) -> f64 {
        let w = self.max_x.min(o.max_x) - self.min_x.max(o.min_x);
        let h = self.max_y.min(o.max_y) - self.min_y.max(o.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Whether this rectangle lies entirely inside a square of the given side
    /// length centered on the origin.
    pub fn inside_square(&self, side: f64) -> bool {
        let half = side / 2.0;
        self.min_x >= -half && self.max_x <= half && self.min_y >= -half && self.max_y <= half
    }
}

/// Axis-aligned box standing on the table plane (z in [0, height]).
#[derive(Debug, Clone, Copy)]
pub struct TableBox {
    pub footprint: Rect,
    pub height: f64,
}

impl TableBox {
    /// Slab-method ray intersection. Returns the entry distance along the ray,
    /// or `None` if the ray misses (or the box is entirely behind the origin).
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let mins = [self.footprint.min_x, self.footprint.min_y, 0.0];
        let maxs = [self.footprint.max_x, self.footprint.max_y, self.height];
        let o = [origin.x, origin.y, origin.z];
        let d = [dir.x, dir.y, dir.z];

        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i] < mins[i] || o[i] > maxs[i] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[i];
                let (t0, t1) = {
                    let a = (mins[i] - o[i]) * inv;
                    let b = (maxs[i] - o[i]) * inv;
                    if a < b {
                        (a, b)
                    } else {
                        (b, a)
                    }
                };
                t_near = t_near.max(t0);
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
        }
        if t_far < 0.0 {
            return None;
        }
        Some(t_near.max(0.0))
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
}

/// Camera pose: position, look-at point, and intrinsics.
///
/// Image rows grow downward. Rays and point projection are exact inverses of
/// each other, which the volumetric fusion relies on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    /// Camera basis (right, up, forward). Falls back to +x as the right axis
    /// for straight-down views where forward is parallel to world up.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = (self.look_at - self.position).normalized();
        let mut right = forward.cross(WORLD_UP);
        if right.norm() < 1e-9 {
            right = Vec3::new(1.0, 0.0, 0.0);
        }
        let right = right.normalized();
        let up = right.cross(forward);
        (right, up, forward)
    }

    /// Unit direction of the ray through the center of pixel (row, col).
    pub fn pixel_ray(&self, row: u32, col: u32) -> Vec3 {
        let (right, up, forward) = self.basis();
        let cx = self.intrinsics.width as f64 / 2.0;
        let cy = self.intrinsics.height as f64 / 2.0;
        let x = col as f64 + 0.5 - cx;
        let y = row as f64 + 0.5 - cy;
        (forward * self.intrinsics.focal_px + right * x + up * (-y)).normalized()
    }

    /// Project a world point: pixel indices plus Euclidean distance from the
    /// camera. `None` when the point is behind the camera or outside the image.
    pub fn project(&self, p: Vec3) -> Option<(u32, u32, f64)> {
        let (right, up, forward) = self.basis();
        let v = p - self.position;
        let zc = v.dot(forward);
        if zc <= 1e-9 {
            return None;
        }
        let f = self.intrinsics.focal_px;
        let cx = self.intrinsics.width as f64 / 2.0;
        let cy = self.intrinsics.height as f64 / 2.0;
        let col = (f * v.dot(right) / zc + cx).floor();
        let row = (-f * v.dot(up) / zc + cy).floor();
        if col < 0.0
            || row < 0.0
            || col >= self.intrinsics.width as f64
            || row >= self.intrinsics.height as f64
        {
            return None;
        }
        Some((row as u32, col as u32, v.norm()))
    }

    /// Pose on a sphere of `radius` around `center` at the given angles,
    /// looking at `center`. Azimuth 0 is +x, measured counterclockwise.
    pub fn on_ring(
        center: Vec3,
        radius: f64,
        elevation_deg: f64,
        azimuth_deg: f64,
        intrinsics: Intrinsics,
    ) -> CameraPose {
        let el = elevation_deg.to_radians();
        let az = azimuth_deg.to_radians();
        let position = center
            + Vec3::new(
                radius * el.cos() * az.cos(),
                radius * el.cos() * az.sin(),
                radius * el.sin(),
            );
        CameraPose { position, look_at: center, intrinsics }
    }

    pub fn validate(&self) -> bool {
        self.position.z > 0.0
            && self.intrinsics.width > 0
            && self.intrinsics.height > 0
            && self.intrinsics.focal_px > 0.0
            && (self.look_at - self.position).norm() > 1e-9
    }
}
