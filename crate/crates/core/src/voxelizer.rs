//! Multi-view RGB-D fusion into a dense 10-channel voxel grid.
//!
//! Camera convention (used everywhere, including the toy world renderer):
//! pinhole with z forward, x right, y down. Pixel `(col, row)` with depth `d`
//! back-projects to `((col - cx) d / fx, (row - cy) d / fy, d)` in the camera
//! frame. Depth is z-depth, not ray length.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Number of channels per voxel.
pub const NUM_CHANNELS: usize = 10;
pub const CH_RGB: usize = 0;
pub const CH_POINT: usize = 3;
pub const CH_OCCUPANCY: usize = 6;
pub const CH_INDEX: usize = 7;

const ORTHO_TOL: f64 = 1e-6;

/// One calibrated RGB-D camera image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width x 3`, values in `[0, 255]`.
    pub rgb: Vec<u8>,
    /// Row-major `height x width`, metric z-depth. Zero marks a missing return.
    pub depth: Vec<f32>,
    pub intrinsics: Matrix3<f64>,
    /// Camera-to-world rigid transform.
    pub extrinsics: Matrix4<f64>,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        let pixels = self.width * self.height;
        if self.rgb.len() != pixels * 3 || self.depth.len() != pixels {
            return Err(invalid(format!(
                "camera buffers do not match {}x{} resolution",
                self.width, self.height
            )));
        }
        if let Some(d) = self.depth.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(invalid(format!("depth value {d} is not finite and non-negative")));
        }
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(invalid("intrinsics must have positive focal lengths"));
        }
        let rot = self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (rot.transpose() * rot - Matrix3::identity()).norm();
        if !(err < ORTHO_TOL) {
            return Err(invalid(format!(
                "extrinsics rotation is not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        let bottom = self.extrinsics.fixed_view::<1, 4>(3, 0).into_owned();
        if (bottom - Vector4::new(0.0, 0.0, 0.0, 1.0).transpose()).norm() > ORTHO_TOL {
            return Err(invalid("extrinsics bottom row must be [0, 0, 0, 1]"));
        }
        Ok(())
    }
}

/// Axis-aligned workspace box divided into cubic voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBounds {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
    pub grid_size: [usize; 3],
}

impl WorkspaceBounds {
    pub fn new(min_corner: [f64; 3], max_corner: [f64; 3], grid_size: [usize; 3]) -> Result<Self> {
        let bounds = Self { min_corner, max_corner, grid_size };
        bounds.validate()?;
        Ok(bounds)
    }

    /// Cube of side `extent` starting at `min_corner` with `n` voxels per axis.
    pub fn cube(min_corner: [f64; 3], extent: f64, n: usize) -> Result<Self> {
        let max = [min_corner[0] + extent, min_corner[1] + extent, min_corner[2] + extent];
        Self::new(min_corner, max, [n, n, n])
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max_corner[a] > self.min_corner[a]) {
                return Err(invalid("workspace max corner must exceed min corner on every axis"));
            }
            if self.grid_size[a] == 0 {
                return Err(invalid("grid size must be positive"));
            }
        }
        let edges = self.axis_edges();
        let tol = 1e-9 * edges[0].abs().max(1.0);
        if (edges[0] - edges[1]).abs() > tol || (edges[0] - edges[2]).abs() > tol {
            return Err(invalid(format!("voxels are not cubic: edges {edges:?}")));
        }
        Ok(())
    }

    fn axis_edges(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.max_corner[a] - self.min_corner[a]) / self.grid_size[a] as f64)
    }

    /// Voxel edge length in meters.
    pub fn edge(&self) -> f64 {
        (self.max_corner[0] - self.min_corner[0]) / self.grid_size[0] as f64
    }

    pub fn num_voxels(&self) -> usize {
        self.grid_size.iter().product()
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min_corner[a] + self.max_corner[a]))
    }

    /// World-space center of voxel `index`.
    pub fn voxel_center(&self, index: [usize; 3]) -> [f64; 3] {
        let e = self.edge();
        std::array::from_fn(|a| self.min_corner[a] + (index[a] as f64 + 0.5) * e)
    }

    /// Row-major flat index of a voxel triple.
    pub fn flat_index(&self, index: [usize; 3]) -> usize {
        let [_, w, d] = self.grid_size;
        (index[0] * w + index[1]) * d + index[2]
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let [_, w, d] = self.grid_size;
        [flat / (w * d), (flat / d) % w, flat % d]
    }
}

/// Index of the voxel containing `p`, or `None` when outside the half-open
/// box `[min, max)`.
pub fn voxel_index_of(p: [f64; 3], bounds: &WorkspaceBounds) -> Option<[usize; 3]> {
    let edge = bounds.edge();
    let mut out = [0usize; 3];
    for a in 0..3 {
        if !p[a].is_finite() || p[a] < bounds.min_corner[a] || p[a] >= bounds.max_corner[a] {
            return None;
        }
        let i = ((p[a] - bounds.min_corner[a]) / edge).floor();
        // Rounding in the division can land exactly on the grid size.
        let i = i as usize;
        if i >= bounds.grid_size[a] {
            return None;
        }
        out[a] = i;
    }
    Some(out)
}

/// A world-space point with its color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: [f32; 3],
    pub rgb: [u8; 3],
}

impl ColoredPoint {
    pub fn position_f64(&self) -> [f64; 3] {
        self.position.map(f64::from)
    }
}

/// Back-project every pixel with positive depth into world coordinates, in
/// row-major pixel order.
pub fn project_pointcloud(view: &CameraView) -> Result<Vec<ColoredPoint>> {
    view.validate()?;
    let k = &view.intrinsics;
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    let rot = view.extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
    let trans: Vector3<f64> = view.extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
    let mut points = Vec::with_capacity(view.depth.len());
    for row in 0..view.height {
        for col in 0..view.width {
            let i = row * view.width + col;
            let d = f64::from(view.depth[i]);
            if d <= 0.0 {
                continue;
            }
            let cam = Vector3::new((col as f64 - cx) * d / fx, (row as f64 - cy) * d / fy, d);
            let w = rot * cam + trans;
            points.push(ColoredPoint {
                position: [w.x as f32, w.y as f32, w.z as f32],
                rgb: [view.rgb[3 * i], view.rgb[3 * i + 1], view.rgb[3 * i + 2]],
            });
        }
    }
    Ok(points)
}

/// Dense `H x W x D x 10` observation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub bounds: WorkspaceBounds,
    /// Channels: RGB in `[-1, 1]`, world point (m), occupancy, normalized index.
    pub data: Array4<f32>,
}

impl VoxelGrid {
    /// Empty grid with only the position-index channels filled.
    pub fn empty(bounds: WorkspaceBounds) -> Self {
        let [h, w, d] = bounds.grid_size;
        let mut data = Array4::<f32>::zeros((h, w, d, NUM_CHANNELS));
        let norm = |i: usize, n: usize| -> f32 {
            if n <= 1 {
                0.0
            } else {
                (2.0 * i as f64 / (n - 1) as f64 - 1.0) as f32
            }
        };
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    data[[x, y, z, CH_INDEX]] = norm(x, h);
                    data[[x, y, z, CH_INDEX + 1]] = norm(y, w);
                    data[[x, y, z, CH_INDEX + 2]] = norm(z, d);
                }
            }
        }
        Self { bounds, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn occupied(&self, index: [usize; 3]) -> bool {
        self.data[[index[0], index[1], index[2], CH_OCCUPANCY]] > 0.5
    }

    pub fn num_occupied(&self) -> usize {
        self.data
            .index_axis(ndarray::Axis(3), CH_OCCUPANCY)
            .iter()
            .filter(|v| **v > 0.5)
            .count()
    }

    /// Channel data as a contiguous `(H*W*D) x 10` row-major slice.
    pub fn as_rows(&self) -> &[f32] {
        self.data.as_slice().expect("voxel grid is contiguous")
    }
}

/// Map an 8-bit color to `[-1, 1]`.
pub fn normalize_rgb(c: u8) -> f32 {
    ((f64::from(c) / 255.0 - 0.5) * 2.0) as f32
}

/// Scatter points into a grid. Later points overwrite earlier ones that land
/// in the same voxel.
pub fn fuse_points(points: &[ColoredPoint], bounds: &WorkspaceBounds) -> VoxelGrid {
    let mut grid = VoxelGrid::empty(*bounds);
    for p in points {
        let Some([x, y, z]) = voxel_index_of(p.position_f64(), bounds) else {
            continue;
        };
        let mut cell = grid.data.slice_mut(ndarray::s![x, y, z, ..]);
        for c in 0..3 {
            cell[CH_RGB + c] = normalize_rgb(p.rgb[c]);
            cell[CH_POINT + c] = p.position[c];
        }
        cell[CH_OCCUPANCY] = 1.0;
    }
    grid
}

/// Concatenate the point clouds of all views in view order.
pub fn project_views(views: &[CameraView]) -> Result<Vec<ColoredPoint>> {
    let mut all = Vec::new();
    for v in views {
        all.extend(project_pointcloud(v)?);
    }
    Ok(all)
}

/// Fuse calibrated views into a voxel grid.
pub fn fuse(views: &[CameraView], bounds: &WorkspaceBounds) -> Result<VoxelGrid> {
    if views.is_empty() {
        return Err(invalid("fuse requires at least one camera view"));
    }
    bounds.validate()?;
    Ok(fuse_points(&project_views(views)?, bounds))
}
