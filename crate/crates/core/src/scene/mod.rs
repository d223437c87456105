//! Piecewise-planar synthetic scenes with exact depth, normals, occlusion
//! edges and room layout, plus noisy cue observations of them.

mod cues;
mod dataset;
mod generate;
mod render;

pub use cues::{
    synthesize_cues, CueObservation, CueSet, NoiseConfig, NoiseField, PerspectiveCue, VARIANCE_FLOOR,
};
pub use dataset::{
    read_dataset, read_manifest, write_dataset, ArrayEntry, Dataset, DatasetConfig, DepthPrior, FrameEntry,
    Manifest, Sample, SceneEntry, Sequence, MANIFEST_FILE,
};
pub use generate::{generate_scene, SceneConfig};
pub use render::{depth_edges, render_frame, render_sequence, RenderedFrame};

use serde::{Deserialize, Serialize};

/// Depth-ratio threshold above which two 4-neighbours straddle an
/// occlusion boundary.
pub const EDGE_RATIO: f64 = 1.05;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rotation about the vertical (y) axis.
pub(crate) fn rot_y(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// Pinhole intrinsics. Camera frame: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Centred principal point, focal length `fov_scale * width`.
    pub fn centred(width: usize, height: usize, fov_scale: f64) -> Self {
        Self {
            width,
            height,
            focal_px: fov_scale * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Same field of view at `factor` times the resolution.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            width: self.width * factor,
            height: self.height * factor,
            focal_px: self.focal_px * f,
            cx: self.cx * f,
            cy: self.cy * f,
        }
    }
}

/// Camera placement in the world: position plus yaw about the vertical.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

impl Pose {
    pub(crate) fn to_camera(&self, p: Vec3) -> Vec3 {
        rot_y(sub(p, self.position), -self.yaw)
    }

    pub(crate) fn dir_to_world(&self, d: Vec3) -> Vec3 {
        rot_y(d, self.yaw)
    }

    pub(crate) fn dir_to_camera(&self, d: Vec3) -> Vec3 {
        rot_y(d, -self.yaw)
    }
}

/// Which part of the room a plane is, for layout extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaneRole {
    Floor,
    Wall,
    Other,
}

/// Textured scene element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Infinite plane `normal . X = offset` (world frame, unit normal).
    Plane {
        normal: Vec3,
        offset: f64,
        albedo: Vec3,
        role: PlaneRole,
    },
    /// Box yawed about the vertical axis through its centre.
    Cuboid {
        centre: Vec3,
        half_extent: Vec3,
        yaw: f64,
        albedo: Vec3,
    },
}

impl Primitive {
    pub fn albedo(&self) -> Vec3 {
        match self {
            Primitive::Plane { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub camera: Camera,
    pub primitives: Vec<Primitive>,
    /// `[d_min, d_max]` in metres.
    pub depth_range: (f64, f64),
    /// One pose per frame; a single identity pose for still scenes.
    pub trajectory: Vec<Pose>,
    /// Checker period of the solid texture, metres.
    pub texture_period: f64,
    /// Direction the light travels (world frame).
    pub light_dir: Vec3,
}

impl Scene {
    /// Still scene seen from the origin.
    pub fn still(camera: Camera, primitives: Vec<Primitive>, depth_range: (f64, f64)) -> Self {
        Self {
            camera,
            primitives,
            depth_range,
            trajectory: vec![Pose::default()],
            texture_period: 0.5,
            light_dir: normalize([0.4, 1.0, 0.6]),
        }
    }
}
