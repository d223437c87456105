use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize, render_frame, Camera, PlaneRole, Pose, Primitive, Scene};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 200;

/// Parameters of the random room generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub fov_scale: f64,
    pub depth_range: (f64, f64),
    pub wall_distance: (f64, f64),
    pub camera_height: (f64, f64),
    pub max_boxes: usize,
    pub frames: usize,
    /// Per-frame forward motion range in metres; zero for still sequences.
    pub forward_step: (f64, f64),
    /// Per-frame yaw change bound in radians.
    pub yaw_step: f64,
    pub still: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fov_scale: 0.9,
            depth_range: (0.5, 20.0),
            wall_distance: (7.0, 13.0),
            camera_height: (1.2, 1.8),
            max_boxes: 3,
            frames: 4,
            forward_step: (0.1, 0.3),
            yaw_step: 0.04,
            still: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if self.width < 8 || self.height < 8 {
            return Err(Error::Invalid(format!(
                "frames must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Invalid(format!("bad depth range [{lo}, {hi}]")));
        }
        if self.frames == 0 || self.max_boxes == 0 || self.fov_scale <= 0.0 {
            return Err(Error::Invalid(
                "frames, max_boxes and fov_scale must be positive".into(),
            ));
        }
        if self.wall_distance.0 > self.wall_distance.1 || self.wall_distance.1 >= hi {
            return Err(Error::Invalid(format!(
                "wall distance {:?} must lie inside the depth range",
                self.wall_distance
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.3..0.9),
        rng.random_range(0.3..0.9),
        rng.random_range(0.3..0.9),
    ]
}

fn propose(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Scene {
    let camera = Camera::centred(config.width, config.height, config.fov_scale);
    let cam_h = uniform(rng, config.camera_height);
    let wall_z = uniform(rng, config.wall_distance);
    let wall_yaw: f64 = rng.random_range(-0.3..0.3);
    let mut primitives = vec![
        Primitive::Plane {
            normal: [0.0, -1.0, 0.0],
            offset: -cam_h,
            albedo: albedo(rng),
            role: PlaneRole::Floor,
        },
        Primitive::Plane {
            normal: [wall_yaw.sin(), 0.0, -wall_yaw.cos()],
            offset: -wall_z * wall_yaw.cos(),
            albedo: albedo(rng),
            role: PlaneRole::Wall,
        },
    ];
    let boxes = rng.random_range(1..=config.max_boxes);
    for _ in 0..boxes {
        let half: [f64; 3] = [
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.2),
            rng.random_range(0.3..1.0),
        ];
        let reach = (half[0] * half[0] + half[2] * half[2]).sqrt();
        let z = rng.random_range(3.0..(wall_z - reach - 0.5).max(3.5));
        let x = rng.random_range(-0.45 * z..0.45 * z);
        primitives.push(Primitive::Cuboid {
            centre: [x, cam_h - half[1], z],
            half_extent: half,
            yaw: rng.random_range(-0.8..0.8),
            albedo: albedo(rng),
        });
    }
    let mut trajectory = Vec::with_capacity(config.frames);
    let mut pose = Pose::default();
    let lateral: f64 = rng.random_range(-0.1..0.1);
    for _ in 0..config.frames {
        trajectory.push(pose);
        if !config.still {
            let step = uniform(rng, config.forward_step);
            pose.position[0] += lateral + step * pose.yaw.sin();
            pose.position[2] += step * pose.yaw.cos();
            pose.yaw += rng.random_range(-config.yaw_step..=config.yaw_step);
        }
    }
    Scene {
        camera,
        primitives,
        depth_range: config.depth_range,
        trajectory,
        texture_period: rng.random_range(0.4..0.8),
        light_dir: normalize([
            rng.random_range(-0.6..0.6),
            1.0,
            rng.random_range(0.2..0.8),
        ]),
    }
}

/// Draws a random room (floor, back wall, one to `max_boxes` boxes) and a
/// camera trajectory, resampling until every frame renders cleanly.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let scene = propose(config, &mut rng);
        match scene
            .trajectory
            .iter()
            .try_for_each(|p| render_frame(&scene, p).map(drop))
        {
            Ok(()) => return Ok(scene),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Invalid(format!(
        "no valid scene after {MAX_ATTEMPTS} attempts: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}
