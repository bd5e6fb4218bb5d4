//! Analytic ray casting of boxes and vertical cylinders into pinhole RGB-D
//! views. Depth is the camera-frame z of the first hit; 0 marks no return.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use super::scene::SceneState;
use super::ToyWorldConfig;
use crate::voxelizer::CameraView;

const NEAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Primitive {
    Cuboid { center: Vector3<f64>, half: Vector3<f64>, rot: Rotation3<f64>, rgb: [u8; 3] },
    /// Axis along world z.
    Cylinder { center: [f64; 2], z0: f64, z1: f64, radius: f64, rgb: [u8; 3] },
}

impl Primitive {
    pub(crate) fn cuboid(center: Vector3<f64>, half: Vector3<f64>, rot: Rotation3<f64>, rgb: [u8; 3]) -> Self {
        Self::Cuboid { center, half, rot, rgb }
    }

    fn intersect(&self, ray: &Ray) -> Option<Hit> {
        match self {
            Self::Cuboid { center, half, rot, rgb } => {
                let o = rot.inverse_transform_vector(&(ray.origin - center));
                let d = rot.inverse_transform_vector(&ray.dir);
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if d[k] == 0.0 {
                        if o[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - o[k]) / d[k];
                    let b = (half[k] - o[k]) / d[k];
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
                if lo > hi {
                    return None;
                }
                let t = if lo > NEAR { lo } else { hi };
                (t > NEAR).then_some(Hit { t, rgb: *rgb })
            }
            Self::Cylinder { center, z0, z1, radius, rgb } => {
                let ox = ray.origin.x - center[0];
                let oy = ray.origin.y - center[1];
                let (dx, dy, dz) = (ray.dir.x, ray.dir.y, ray.dir.z);
                let mut best = f64::INFINITY;
                let a = dx * dx + dy * dy;
                if a > 0.0 {
                    let b = ox * dx + oy * dy;
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = ray.origin.z + t * dz;
                            if t > NEAR && z >= *z0 && z <= *z1 {
                                best = best.min(t);
                            }
                        }
                    }
                }
                if dz != 0.0 {
                    for zc in [*z0, *z1] {
                        let t = (zc - ray.origin.z) / dz;
                        let (x, y) = (ox + t * dx, oy + t * dy);
                        if t > NEAR && x * x + y * y <= radius * radius {
                            best = best.min(t);
                        }
                    }
                }
                best.is_finite().then_some(Hit { t: best, rgb: *rgb })
            }
        }
    }
}

/// `origin + t * dir`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub rgb: [u8; 3],
}

/// A camera looking from `position` at `look_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub name: &'static str,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub fov_deg: f64,
}

impl CameraPose {
    /// Camera-to-world rotation: x right, y down, z forward.
    fn rotation(&self) -> Matrix3<f64> {
        let f = (Vector3::from(self.look_at) - Vector3::from(self.position)).normalize();
        // Straight down views use +y as image up.
        let up = if f.z.abs() > 0.99 { Vector3::y() } else { Vector3::z() };
        let right = f.cross(&up).normalize();
        let down = f.cross(&right);
        Matrix3::from_columns(&[right, down, f])
    }

    pub fn extrinsics(&self) -> Matrix4<f64> {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(self.position));
        e
    }

    /// Square-pixel intrinsics with the principal point at the image center
    /// in pixel-index coordinates.
    pub fn intrinsics(&self, size: usize) -> Matrix3<f64> {
        let f = (size as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan();
        let c = (size as f64 - 1.0) / 2.0;
        Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0)
    }
}

/// Front, overhead, left and right cameras; the first `num_cameras` are used.
pub fn camera_rig(cfg: &ToyWorldConfig) -> Vec<CameraPose> {
    let target = [0.0, 0.0, 0.05];
    let all = [
        CameraPose { name: "front", position: [0.0, -0.75, 0.55], look_at: target, fov_deg: 50.0 },
        CameraPose { name: "overhead", position: [0.0, 0.0, 1.0], look_at: [0.0, 0.0, 0.0], fov_deg: 45.0 },
        CameraPose { name: "left", position: [-0.75, 0.0, 0.55], look_at: target, fov_deg: 50.0 },
        CameraPose { name: "right", position: [0.75, 0.0, 0.55], look_at: target, fov_deg: 50.0 },
    ];
    all.into_iter().take(cfg.num_cameras).collect()
}

pub(crate) fn cast(prims: &[Primitive], ray: &Ray) -> Option<Hit> {
    prims
        .iter()
        .filter_map(|p| p.intersect(ray))
        .min_by(|a, b| a.t.total_cmp(&b.t))
}

fn render_view(prims: &[Primitive], cam: &CameraPose, size: usize) -> CameraView {
    let k = cam.intrinsics(size);
    let rot = cam.rotation();
    let origin = Vector3::from(cam.position);
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    let mut rgb = vec![0u8; size * size * 3];
    let mut depth = vec![0f32; size * size];
    for row in 0..size {
        for col in 0..size {
            let d_cam = Vector3::new((col as f64 - cx) / fx, (row as f64 - cy) / fy, 1.0);
            // Unit camera-z component, so the hit parameter is the z-depth.
            let ray = Ray { origin, dir: rot * d_cam };
            if let Some(hit) = cast(prims, &ray) {
                let i = row * size + col;
                depth[i] = hit.t as f32;
                rgb[3 * i..3 * i + 3].copy_from_slice(&hit.rgb);
            }
        }
    }
    CameraView {
        width: size,
        height: size,
        rgb,
        depth,
        intrinsics: k,
        extrinsics: cam.extrinsics(),
    }
}

pub fn render_views(state: &SceneState, cfg: &ToyWorldConfig) -> Vec<CameraView> {
    let prims = state.primitives();
    camera_rig(cfg).iter().map(|c| render_view(&prims, c, cfg.image_size)).collect()
}
