//! Synthetic world the simulated robot drives through, and the fisheye
//! renderer that photographs it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frame::{FisheyeFrame, StageTrail};
use crate::geometry::{
    direction_to_yaw_pitch, fisheye_unproject, rotation_from_ypr, yaw_pitch_to_direction, EquirectCoords, Vec3,
};
use crate::image::{round_channel, sample_bilinear, Edge, RgbImage};
use crate::par::{for_each_row, map_indices, Exec};
use crate::rig::{RigCalibration, RigCamera};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("environment map must be 2:1, got {0}x{1}")]
    NotEquirect(u32, u32),
}

/// Checkerboard floor below the rig.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundGrid {
    /// Distance from the rig center down to the floor.
    pub depth_m: f64,
    pub cell_m: f64,
    pub colors: [[u8; 3]; 2],
    /// Beyond this range the checker fades to its mean color (anti-aliasing).
    pub fade_m: f64,
}

/// Vertical textured rectangle at a finite distance, facing along `yaw_rad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Billboard {
    pub center: [f64; 3],
    pub yaw_rad: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub texture: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEnvironment {
    /// World texture at infinity, equirectangular.
    pub env: RgbImage,
    pub ground: Option<GroundGrid>,
    pub billboards: Vec<Billboard>,
}

/// Planar robot pose in the world.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DevicePose {
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
}

impl SceneEnvironment {
    pub fn new(env: RgbImage) -> Result<Self, SceneError> {
        if env.width() != 2 * env.height() || env.is_empty() {
            return Err(SceneError::NotEquirect(env.width(), env.height()));
        }
        Ok(Self {
            env,
            ground: None,
            billboards: Vec::new(),
        })
    }

    /// Environment map only (everything at infinity).
    pub fn env_only(seed: u64, env_width: u32) -> Self {
        Self::new(synthetic_environment_map(seed, env_width)).expect("2:1 by construction")
    }

    /// Environment map plus a floor and a few billboards around the origin.
    pub fn procedural(seed: u64, env_width: u32) -> Self {
        let mut scene = Self::env_only(seed, env_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b111);
        scene.ground = Some(GroundGrid {
            depth_m: 0.6,
            cell_m: 1.0,
            colors: [[92, 86, 80], [150, 146, 136]],
            fade_m: 12.0,
        });
        for i in 0..6 {
            let bearing = i as f64 * PI / 3.0 + rng.random_range(-0.3..0.3);
            let dist = rng.random_range(4.0..9.0);
            scene.billboards.push(Billboard {
                center: [dist * bearing.cos(), dist * bearing.sin(), -0.4],
                yaw_rad: bearing + PI,
                width_m: rng.random_range(1.0..2.5),
                height_m: rng.random_range(1.0..2.0),
                texture: billboard_texture(&mut rng, 64),
            });
        }
        scene
    }

    pub fn is_env_only(&self) -> bool {
        self.ground.is_none() && self.billboards.is_empty()
    }

    fn sample_env(&self, yaw: f64, pitch: f64) -> [f32; 3] {
        let [x, y] = EquirectCoords::from_yaw_pitch(yaw, pitch).to_pixel(self.env.width(), self.env.height());
        sample_bilinear(&self.env, x, y, Edge::WrapX)
    }

    /// Color seen along world ray `origin + t·dir`.
    pub fn radiance(&self, origin: &Vec3, dir: &Vec3) -> [f32; 3] {
        let mut best_t = f64::INFINITY;
        let mut color = None;
        if let Some(g) = &self.ground {
            if dir.z > 1e-9 {
                let t = (g.depth_m - origin.z) / dir.z;
                if t > 0.0 {
                    best_t = t;
                    let p = origin + dir * t;
                    let parity = ((p.x / g.cell_m).floor() as i64 + (p.y / g.cell_m).floor() as i64).rem_euclid(2);
                    let c = g.colors[parity as usize];
                    let mean = [
                        (g.colors[0][0] as f32 + g.colors[1][0] as f32) / 2.0,
                        (g.colors[0][1] as f32 + g.colors[1][1] as f32) / 2.0,
                        (g.colors[0][2] as f32 + g.colors[1][2] as f32) / 2.0,
                    ];
                    let a = ((t / g.fade_m) as f32).min(1.0);
                    color = Some([
                        c[0] as f32 * (1.0 - a) + mean[0] * a,
                        c[1] as f32 * (1.0 - a) + mean[1] * a,
                        c[2] as f32 * (1.0 - a) + mean[2] * a,
                    ]);
                }
            }
        }
        for b in &self.billboards {
            let (s, c) = b.yaw_rad.sin_cos();
            let normal = Vec3::new(c, s, 0.0);
            let denom = normal.dot(dir);
            if denom.abs() < 1e-9 {
                continue;
            }
            let center = Vec3::from(b.center);
            let t = normal.dot(&(center - origin)) / denom;
            if t <= 0.0 || t >= best_t {
                continue;
            }
            let rel = origin + dir * t - center;
            let right = Vec3::new(-s, c, 0.0);
            let across = rel.dot(&right);
            let down = rel.z;
            if across.abs() <= b.width_m / 2.0 && down.abs() <= b.height_m / 2.0 {
                best_t = t;
                let tx = (across / b.width_m + 0.5) * b.texture.width() as f64 - 0.5;
                let ty = (down / b.height_m + 0.5) * b.texture.height() as f64 - 0.5;
                color = Some(sample_bilinear(&b.texture, tx, ty, Edge::Clamp));
            }
        }
        color.unwrap_or_else(|| {
            let (yaw, pitch) = direction_to_yaw_pitch(dir);
            self.sample_env(yaw, pitch)
        })
    }
}

fn billboard_texture(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    let base: [u8; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = RgbImage::filled(size, size, base);
    for _ in 0..6 {
        let (cx, cy) = (rng.random_range(0..size), rng.random_range(0..size));
        let r = rng.random_range(3..12i64);
        let col: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as i64 - cx as i64, y as i64 - cy as i64);
                if dx * dx + dy * dy <= r * r {
                    img.put_pixel(x, y, col);
                }
            }
        }
    }
    img.draw_rect(0, 0, size, size, 2, [20, 20, 20]);
    img
}

struct Blob {
    dir: Vec3,
    cos_cut: f64,
    inv_two_sigma2: f64,
    color: [f32; 3],
    amount: f32,
}

/// Deterministic, textured but band-limited equirectangular world map: a sky /
/// ground gradient covered with soft colored blobs of varied size. Blob
/// centers make good scale-space features for seam matching.
pub fn synthetic_environment_map(seed: u64, width: u32) -> RgbImage {
    let width = width.max(2) & !1;
    let height = width / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<Blob> = (0..600)
        .map(|_| {
            let yaw = rng.random_range(-PI..PI);
            let pitch = (rng.random_range(-1.0f64..1.0)).asin();
            let sigma = 0.012 * (rng.random_range(0.0f64..1.0) * 7f64.ln()).exp();
            let color = [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
            Blob {
                dir: yaw_pitch_to_direction(yaw, pitch),
                cos_cut: (3.5 * sigma).min(PI).cos(),
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                color,
                amount: rng.random_range(0.6..0.95),
            }
        })
        .collect();
    let mut img = RgbImage::new(width, height);
    let row_len = img.row_len();
    for_each_row(Exec::default(), img.data_mut(), row_len, |y, row| {
        for x in 0..width {
            let uv = EquirectCoords::from_pixel(x as f64, y as f64, width, height);
            let pitch = uv.pitch();
            let d = yaw_pitch_to_direction(uv.yaw(), pitch);
            let s = (pitch / (PI / 2.0)) as f32;
            let mut c = if s >= 0.0 {
                [170.0 - 60.0 * s, 190.0 - 40.0 * s, 215.0 + 20.0 * s]
            } else {
                [120.0 + 30.0 * s, 110.0 + 30.0 * s, 90.0 + 20.0 * s]
            };
            for b in &blobs {
                let dot = b.dir.dot(&d);
                if dot < b.cos_cut {
                    continue;
                }
                let ang2 = 2.0 * (1.0 - dot.min(1.0));
                let a = b.amount * (-ang2 * b.inv_two_sigma2).exp() as f32;
                for ch in 0..3 {
                    c[ch] = c[ch] * (1.0 - a) + b.color[ch] * a;
                }
            }
            let i = x as usize * 3;
            row[i] = round_channel(c[0]);
            row[i + 1] = round_channel(c[1]);
            row[i + 2] = round_channel(c[2]);
        }
    });
    img
}

/// Precomputed rig-frame rays for every pixel of one camera.
#[derive(Debug, Clone)]
pub struct CameraRays {
    width: u32,
    height: u32,
    /// Rig-frame `[yaw, pitch]` per pixel; NaN outside the image circle.
    angles: Vec<[f64; 2]>,
    /// Rig-frame unit directions, zero outside the image circle.
    dirs: Vec<Vec3>,
}

impl CameraRays {
    pub fn new(cam: &RigCamera) -> Self {
        let intr = cam.intrinsics;
        let rot = cam.rotation();
        let (w, h) = (intr.width_px, intr.height_px);
        let n = w as usize * h as usize;
        let mut angles = Vec::with_capacity(n);
        let mut dirs = Vec::with_capacity(n);
        for i in 0..n {
            let px = [(i % w as usize) as f64, (i / w as usize) as f64];
            match fisheye_unproject(px, &intr) {
                Some(d) => {
                    let r = rot * d;
                    let (yaw, pitch) = direction_to_yaw_pitch(&r);
                    angles.push([yaw, pitch]);
                    dirs.push(r);
                }
                None => {
                    angles.push([f64::NAN; 2]);
                    dirs.push(Vec3::zeros());
                }
            }
        }
        Self {
            width: w,
            height: h,
            angles,
            dirs,
        }
    }
}

/// Renders all rig cameras with cached rays.
#[derive(Debug, Clone)]
pub struct RigRenderer {
    cameras: Vec<CameraRays>,
    /// Height of the rig center above the floor is carried by the scene; the
    /// rig origin sits at world z = 0.
    exec: Exec,
}

impl RigRenderer {
    pub fn new(calib: &RigCalibration) -> Self {
        Self::with_exec(calib, Exec::default())
    }

    pub fn with_exec(calib: &RigCalibration, exec: Exec) -> Self {
        Self {
            cameras: map_indices(exec, calib.cameras.len(), |i| CameraRays::new(&calib.cameras[i])),
            exec,
        }
    }

    pub fn render_camera(&self, scene: &SceneEnvironment, pose: &DevicePose, index: usize, t_capture_ns: u64, seq: u64) -> FisheyeFrame {
        let rays = &self.cameras[index];
        let mut img = RgbImage::new(rays.width, rays.height);
        let row_len = img.row_len();
        let w = rays.width as usize;
        let heading = rotation_from_ypr(pose.heading_rad, 0.0, 0.0);
        let origin = Vec3::new(pose.x_m, pose.y_m, 0.0);
        let env_only = scene.is_env_only();
        for_each_row(self.exec, img.data_mut(), row_len, |y, row| {
            for x in 0..w {
                let [yaw, pitch] = rays.angles[y * w + x];
                if yaw.is_nan() {
                    continue;
                }
                let c = if env_only {
                    scene.sample_env(yaw + pose.heading_rad, pitch)
                } else {
                    scene.radiance(&origin, &(heading * rays.dirs[y * w + x]))
                };
                row[x * 3] = round_channel(c[0]);
                row[x * 3 + 1] = round_channel(c[1]);
                row[x * 3 + 2] = round_channel(c[2]);
            }
        });
        FisheyeFrame {
            image: img,
            t_capture_ns,
            seq,
            stages: StageTrail::new(),
        }
    }

    pub fn render_all(&self, scene: &SceneEnvironment, pose: &DevicePose, t_capture_ns: u64, seq: u64) -> Vec<FisheyeFrame> {
        (0..self.cameras.len())
            .map(|i| self.render_camera(scene, pose, i, t_capture_ns, seq))
            .collect()
    }
}

/// Renders one fisheye view of the scene; pixels outside the image circle
/// are black.
pub fn render_fisheye(scene: &SceneEnvironment, pose: &DevicePose, cam: &RigCamera, t_capture_ns: u64, seq: u64) -> FisheyeFrame {
    let rays = CameraRays::new(cam);
    let r = RigRenderer {
        cameras: vec![rays],
        exec: Exec::default(),
    };
    r.render_camera(scene, pose, 0, t_capture_ns, seq)
}

/// Equirectangular render of the scene straight from the rig center: the
/// ground truth a perfect stitcher would produce.
pub fn render_equirect(scene: &SceneEnvironment, pose: &DevicePose, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    let row_len = img.row_len();
    let heading = rotation_from_ypr(pose.heading_rad, 0.0, 0.0);
    let origin = Vec3::new(pose.x_m, pose.y_m, 0.0);
    for_each_row(Exec::default(), img.data_mut(), row_len, |y, row| {
        for x in 0..width {
            let uv = EquirectCoords::from_pixel(x as f64, y as f64, width, height);
            let c = if scene.is_env_only() {
                scene.sample_env(uv.yaw() + pose.heading_rad, uv.pitch())
            } else {
                let d = yaw_pitch_to_direction(uv.yaw(), uv.pitch());
                scene.radiance(&origin, &(heading * d))
            };
            let i = x as usize * 3;
            row[i] = round_channel(c[0]);
            row[i + 1] = round_channel(c[1]);
            row[i + 2] = round_channel(c[2]);
        }
    });
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> RigCalibration {
        RigCalibration::default_ring(40.0)
    }

    #[test]
    fn constant_environment_gives_constant_frame() {
        let scene = SceneEnvironment::new(RgbImage::filled(64, 32, [7, 99, 201])).unwrap();
        let cam = small_rig().cameras[1];
        let f = render_fisheye(&scene, &DevicePose::default(), &cam, 5, 1);
        let intr = cam.intrinsics;
        for y in 0..intr.height_px {
            for x in 0..intr.width_px {
                let inside = fisheye_unproject([x as f64, y as f64], &intr).is_some();
                let expect = if inside { [7, 99, 201] } else { [0, 0, 0] };
                assert_eq!(f.image.pixel(x, y), expect);
            }
        }
        assert_eq!(f.image.pixel(0, 0), [0, 0, 0], "corner outside circle is black");
        assert_eq!((f.t_capture_ns, f.seq), (5, 1));
    }

    #[test]
    fn heading_is_environment_u_shift() {
        let w = 256u32;
        let scene = SceneEnvironment::env_only(3, w);
        let k = 19u32;
        let delta = 2.0 * PI * k as f64 / w as f64;
        // Oracle: environment rolled right by k columns, rendered at heading 0.
        let mut rolled = RgbImage::new(w, w / 2);
        for y in 0..w / 2 {
            for x in 0..w {
                rolled.put_pixel(x, y, scene.env.pixel((x + k) % w, y));
            }
        }
        let shifted = SceneEnvironment::new(rolled).unwrap();
        let cam = small_rig().cameras[0];
        let a = render_fisheye(&scene, &DevicePose { heading_rad: delta, ..Default::default() }, &cam, 0, 0);
        let b = render_fisheye(&shifted, &DevicePose::default(), &cam, 0, 0);
        let worst = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .map(|(p, q)| (*p as i32 - *q as i32).abs())
            .max()
            .unwrap();
        assert!(worst <= 1, "worst channel difference {worst}");
    }

    #[test]
    fn environment_map_is_deterministic_and_2_to_1() {
        let a = synthetic_environment_map(9, 128);
        assert_eq!((a.width(), a.height()), (128, 64));
        assert_eq!(a, synthetic_environment_map(9, 128));
        assert_ne!(a, synthetic_environment_map(10, 128));
        assert!(SceneEnvironment::new(RgbImage::new(10, 10)).is_err());
    }

    #[test]
    fn ground_and_billboards_occlude_environment() {
        let scene = SceneEnvironment::procedural(1, 128);
        let down = Vec3::new(0.0, 0.0, 1.0);
        let c = scene.radiance(&Vec3::zeros(), &down);
        let g = scene.ground.as_ref().unwrap();
        // Straight down the fade toward the mean color is only 5%.
        assert!(g.colors.iter().any(|gc| (gc[0] as f32 - c[0]).abs() < 2.0), "{c:?}");
        let b = &scene.billboards[0];
        let to_b = (Vec3::from(b.center)).normalize();
        let seen = scene.radiance(&Vec3::zeros(), &to_b);
        let tex_center = sample_bilinear(&b.texture, 31.5, 31.5, Edge::Clamp);
        for ch in 0..3 {
            assert!((seen[ch] - tex_center[ch]).abs() < 1.0);
        }
    }

    #[test]
    fn renderer_sequential_matches_parallel() {
        let scene = SceneEnvironment::procedural(2, 128);
        let rig = small_rig();
        let pose = DevicePose { x_m: 0.5, y_m: -1.0, heading_rad: 0.3 };
        let a = RigRenderer::with_exec(&rig, Exec::Sequential).render_all(&scene, &pose, 0, 0);
        let b = RigRenderer::with_exec(&rig, Exec::default()).render_all(&scene, &pose, 0, 0);
        assert_eq!(a, b);
    }
}
