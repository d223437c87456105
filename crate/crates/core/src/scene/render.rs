use super::{
    cross, dot, normalize, rot_y, sub, Camera, PlaneRole, Pose, Primitive, Scene, Vec3, EDGE_RATIO,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NEAR: f64 = 0.05;

/// Ground truth for one camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub pose: Pose,
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[H, W, 1]` camera-frame z, metres.
    pub depth: Tensor<f32>,
    /// `[H, W, 1]` binary occlusion-boundary mask.
    pub edges: Tensor<f32>,
    /// `[H, W, 3]` unit normals in the camera frame, facing the camera.
    pub normals: Tensor<f32>,
    /// Per-column floor/wall boundary row (continuous pixel coordinate).
    pub layout: Vec<f32>,
}

impl RenderedFrame {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    /// Signed row offset of every pixel centre from the layout boundary,
    /// divided by the image height. Positive below the boundary.
    pub fn layout_distance(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push((y as f32 + 0.5 - self.layout[x]) / h as f32);
            }
        }
        Tensor::new(&[h, w, 1], out).expect("sized from frame")
    }
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: Vec3,
}

fn intersect(p: &Primitive, origin: Vec3, dir: Vec3) -> Result<Option<Hit>> {
    match p {
        Primitive::Plane {
            normal,
            offset,
            albedo,
            ..
        } => {
            let denom = dot(*normal, dir);
            if denom.abs() < 1e-12 {
                return Ok(None);
            }
            let t = (offset - dot(*normal, origin)) / denom;
            if t <= NEAR {
                return Ok(None);
            }
            let n = if denom > 0.0 {
                [-normal[0], -normal[1], -normal[2]]
            } else {
                *normal
            };
            Ok(Some(Hit {
                t,
                normal: n,
                albedo: *albedo,
            }))
        }
        Primitive::Cuboid {
            centre,
            half_extent,
            yaw,
            albedo,
        } => {
            let o = rot_y(sub(origin, *centre), -yaw);
            let d = rot_y(dir, -yaw);
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            for i in 0..3 {
                if d[i].abs() < 1e-12 {
                    if o[i].abs() > half_extent[i] {
                        return Ok(None);
                    }
                    continue;
                }
                let a = (-half_extent[i] - o[i]) / d[i];
                let b = (half_extent[i] - o[i]) / d[i];
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                if lo > t_near {
                    t_near = lo;
                    axis = i;
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_far <= 0.0 {
                return Ok(None);
            }
            if t_near <= NEAR {
                return Err(Error::DegenerateCamera(
                    "camera inside or touching a box".into(),
                ));
            }
            let mut n = [0.0; 3];
            n[axis] = -d[axis].signum();
            Ok(Some(Hit {
                t: t_near,
                normal: rot_y(n, *yaw),
                albedo: *albedo,
            }))
        }
    }
}

fn check_in_front(p: &Primitive, pose: &Pose) -> Result<()> {
    if let Primitive::Cuboid {
        centre,
        half_extent,
        yaw,
        ..
    } = p
    {
        for corner in 0..8 {
            let s = |bit: usize, i: usize| if corner >> bit & 1 == 1 { half_extent[i] } else { -half_extent[i] };
            let local = [s(0, 0), s(1, 1), s(2, 2)];
            let w = rot_y(local, *yaw);
            let world = [centre[0] + w[0], centre[1] + w[1], centre[2] + w[2]];
            if pose.to_camera(world)[2] <= NEAR {
                return Err(Error::DegenerateCamera(format!(
                    "box at {centre:?} extends behind the camera"
                )));
            }
        }
    }
    Ok(())
}

fn checker(p: Vec3, period: f64) -> f64 {
    let cell = |v: f64, off: f64| ((v + off) / period).floor() as i64;
    let parity = cell(p[0], 0.013) + cell(p[1], 0.007) + cell(p[2], 0.011);
    if parity.rem_euclid(2) == 0 {
        1.0
    } else {
        0.0
    }
}

/// Per-column image row where the floor meets the first wall, in the
/// camera frame of `pose`. Falls back to the principal row when the scene
/// has no floor/wall pair or the boundary is not visible.
fn layout_rows(scene: &Scene, pose: &Pose) -> Vec<f32> {
    let cam = &scene.camera;
    let find = |role: PlaneRole| {
        scene.primitives.iter().find_map(|p| match p {
            Primitive::Plane {
                normal,
                offset,
                role: r,
                ..
            } if *r == role => Some((pose.dir_to_camera(*normal), offset - dot(*normal, pose.position))),
            _ => None,
        })
    };
    let fallback = vec![cam.cy as f32; cam.width];
    let (Some((n1, d1)), Some((n2, d2))) = (find(PlaneRole::Floor), find(PlaneRole::Wall)) else {
        return fallback;
    };
    let dir = cross(n1, n2);
    let (a, b, c) = (dot(n1, n1), dot(n2, n2), dot(n1, n2));
    let det = a * b - c * c;
    if det.abs() < 1e-12 {
        return fallback;
    }
    let k1 = (d1 * b - d2 * c) / det;
    let k2 = (d2 * a - d1 * c) / det;
    let p0 = [
        k1 * n1[0] + k2 * n2[0],
        k1 * n1[1] + k2 * n2[1],
        k1 * n1[2] + k2 * n2[2],
    ];
    (0..cam.width)
        .map(|u| {
            let a = u as f64 + 0.5 - cam.cx;
            let den = cam.focal_px * dir[0] - a * dir[2];
            if den.abs() < 1e-12 {
                return cam.cy as f32;
            }
            let s = (a * p0[2] - cam.focal_px * p0[0]) / den;
            let q = [p0[0] + s * dir[0], p0[1] + s * dir[1], p0[2] + s * dir[2]];
            if q[2] <= NEAR {
                return cam.cy as f32;
            }
            (cam.focal_px * q[1] / q[2] + cam.cy) as f32
        })
        .collect()
}

/// Marks every pixel whose depth ratio to some 4-neighbour exceeds
/// `threshold`. Input and output are `[H, W]` row-major.
pub fn depth_edges(depth: &[f32], height: usize, width: usize, threshold: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; height * width];
    let jump = |a: f32, b: f32| {
        let (a, b) = (a as f64, b as f64);
        (a / b).max(b / a) > threshold
    };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width && jump(depth[i], depth[i + 1]) {
                out[i] = 1.0;
                out[i + 1] = 1.0;
            }
            if y + 1 < height && jump(depth[i], depth[i + width]) {
                out[i] = 1.0;
                out[i + width] = 1.0;
            }
        }
    }
    out
}

/// Ray-casts one frame of `scene` from `pose`.
pub fn render_frame(scene: &Scene, pose: &Pose) -> Result<RenderedFrame> {
    let cam: &Camera = &scene.camera;
    if cam.width == 0 || cam.height == 0 || cam.focal_px <= 0.0 {
        return Err(Error::DegenerateCamera(format!("{cam:?}")));
    }
    for p in &scene.primitives {
        check_in_front(p, pose)?;
    }
    let (h, w) = (cam.height, cam.width);
    let (d_min, d_max) = scene.depth_range;
    let light = normalize(scene.light_dir);
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    let mut normals = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            let dc = [
                (u as f64 + 0.5 - cam.cx) / cam.focal_px,
                (v as f64 + 0.5 - cam.cy) / cam.focal_px,
                1.0,
            ];
            let dir = pose.dir_to_world(dc);
            let mut best: Option<Hit> = None;
            for p in &scene.primitives {
                if let Some(hit) = intersect(p, pose.position, dir)? {
                    if best.as_ref().is_none_or(|b| hit.t < b.t) {
                        best = Some(hit);
                    }
                }
            }
            let hit = best.ok_or_else(|| {
                Error::Invalid(format!("pixel ({u}, {v}) sees no surface"))
            })?;
            if hit.t < d_min || hit.t > d_max {
                return Err(Error::Invalid(format!(
                    "pixel ({u}, {v}) depth {:.3} outside [{d_min}, {d_max}]",
                    hit.t
                )));
            }
            let point = [
                pose.position[0] + hit.t * dir[0],
                pose.position[1] + hit.t * dir[1],
                pose.position[2] + hit.t * dir[2],
            ];
            let tex = 0.7 + 0.3 * checker(point, scene.texture_period);
            let shade = 0.35 + 0.65 * (-dot(hit.normal, light)).max(0.0);
            for k in 0..3 {
                rgb.push((hit.albedo[k] * tex * shade).clamp(0.0, 1.0) as f32);
            }
            depth.push(hit.t as f32);
            let nc = normalize(pose.dir_to_camera(hit.normal));
            normals.extend(nc.iter().map(|&x| x as f32));
        }
    }
    let edges = depth_edges(&depth, h, w, EDGE_RATIO);
    Ok(RenderedFrame {
        pose: *pose,
        rgb: Tensor::new(&[h, w, 3], rgb)?,
        depth: Tensor::new(&[h, w, 1], depth)?,
        edges: Tensor::new(&[h, w, 1], edges)?,
        normals: Tensor::new(&[h, w, 3], normals)?,
        layout: layout_rows(scene, pose),
    })
}

/// Renders the first `length` poses of the scene's trajectory.
pub fn render_sequence(scene: &Scene, length: usize) -> Result<Vec<RenderedFrame>> {
    if length == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    if length > scene.trajectory.len() {
        return Err(Error::Invalid(format!(
            "trajectory has {} poses, {length} frames requested",
            scene.trajectory.len()
        )));
    }
    scene.trajectory[..length]
        .iter()
        .map(|pose| render_frame(scene, pose))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_at(z: f64) -> Primitive {
        Primitive::Plane {
            normal: [0.0, 0.0, -1.0],
            offset: -z,
            albedo: [0.6, 0.5, 0.4],
            role: PlaneRole::Wall,
        }
    }

    #[test]
    fn fronto_parallel_plane() {
        let scene = Scene::still(Camera::centred(32, 24, 0.9), vec![plane_at(5.0)], (0.5, 20.0));
        let f = &render_sequence(&scene, 1).unwrap()[0];
        assert!(f.depth.data().iter().all(|&d| (d - 5.0).abs() < 1e-5));
        assert!(f.edges.data().iter().all(|&e| e == 0.0));
        for n in f.normals.data().chunks(3) {
            assert!((n[0]).abs() < 1e-6 && (n[1]).abs() < 1e-6 && (n[2] + 1.0).abs() < 1e-6);
        }
        assert!(f.rgb.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn box_behind_camera_is_rejected() {
        let mut scene = Scene::still(Camera::centred(16, 16, 0.9), vec![plane_at(8.0)], (0.5, 20.0));
        scene.primitives.push(Primitive::Cuboid {
            centre: [0.0, 0.0, -2.0],
            half_extent: [0.5, 0.5, 0.5],
            yaw: 0.0,
            albedo: [0.5; 3],
        });
        assert!(matches!(
            render_sequence(&scene, 1),
            Err(Error::DegenerateCamera(_))
        ));
    }

    #[test]
    fn depth_out_of_range_is_rejected() {
        let scene = Scene::still(Camera::centred(8, 8, 0.9), vec![plane_at(25.0)], (0.5, 20.0));
        assert!(render_sequence(&scene, 1).is_err());
        assert!(render_sequence(&scene, 0).is_err());
    }

    #[test]
    fn level_floor_meets_wall_on_one_row() {
        let cam = Camera::centred(16, 16, 1.0);
        let floor = Primitive::Plane {
            normal: [0.0, -1.0, 0.0],
            offset: -1.5,
            albedo: [0.5; 3],
            role: PlaneRole::Floor,
        };
        let scene = Scene::still(cam, vec![floor, plane_at(6.0)], (0.5, 20.0));
        let f = render_frame(&scene, &Pose::default()).unwrap();
        // floor y = 1.5 at z = 6 projects to cy + f * 1.5 / 6
        for &r in &f.layout {
            assert!((r - (8.0 + 16.0 * 1.5 / 6.0) as f32).abs() < 1e-4);
        }
    }
}
