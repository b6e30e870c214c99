//! Procedural static scenes of textured rectangles seen from a moving camera.

use fmfilter_tensor::{IntTensor, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{relative_motion, rotation_from_angles, CameraIntrinsics, RigidTransform};

pub const BACKGROUND_CLASS: usize = 0;
pub const FAR_DEPTH: f64 = 10.0;
pub const DEFAULT_CLASSES: usize = 6;
pub const DEFAULT_LENGTH: usize = 7;
pub const DEFAULT_SIZE: usize = 32;
const RECT_DEPTH: (f64, f64) = (1.0, 5.0);
const RECT_COUNT: (usize, usize) = (3, 8);

/// 64-bit finalizer used for seeds and lattice hashing.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic child seed for item `index` of stream `tag`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)).wrapping_add(index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub color: [f64; 3],
    pub frequency: f64,
    pub amplitude: f64,
    pub salt: u64,
}

impl Texture {
    /// Color at surface coordinates `(a, b)`, in scene units.
    pub fn sample(&self, a: f64, b: f64) -> [f64; 3] {
        let n = value_noise(a * self.frequency, b * self.frequency, self.salt) - 0.5;
        let fine = value_noise(a * self.frequency * 3.1, b * self.frequency * 3.1, self.salt ^ 0x5bd1) - 0.5;
        let shade = self.amplitude * (n + 0.5 * fine);
        self.color.map(|c| (c + shade).clamp(0.0, 1.0))
    }
}

fn lattice(ix: i64, iy: i64, salt: u64) -> f64 {
    let h = splitmix64(salt ^ splitmix64((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(x: f64, y: f64, salt: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - fx), s(y - fy));
    let top = lattice(ix, iy, salt) * (1.0 - tx) + lattice(ix + 1, iy, salt) * tx;
    let bottom = lattice(ix, iy + 1, salt) * (1.0 - tx) + lattice(ix + 1, iy + 1, salt) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Base color of each class; background first.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.50],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.85],
        [0.90, 0.80, 0.25],
        [0.70, 0.30, 0.80],
        [0.20, 0.75, 0.80],
        [0.95, 0.55, 0.15],
    ];
    PALETTE[class % PALETTE.len()]
}

fn class_texture(class: usize, salt: u64) -> Texture {
    Texture {
        color: class_color(class),
        frequency: 1.5 + (class % 4) as f64 * 1.2,
        amplitude: 0.25 + 0.05 * (class % 3) as f64,
        salt,
    }
}

/// Fronto-parallel rectangle on the world plane `z = depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub depth: f64,
    pub class: usize,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rects: Vec<Rect>,
    pub background_class: usize,
    pub background: Texture,
    pub class_count: usize,
}

impl Scene {
    pub fn empty(class_count: usize) -> Self {
        Self {
            rects: Vec::new(),
            background_class: BACKGROUND_CLASS,
            background: class_texture(BACKGROUND_CLASS, 0),
            class_count,
        }
    }
}

/// 3–8 rectangles at depths in `[1, 5]`, classes drawn from `1..K`.
pub fn generate_scene(seed: u64, class_count: usize) -> Result<Scene> {
    if class_count < 2 {
        return invalid(format!("need at least two classes, got {class_count}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(RECT_COUNT.0..=RECT_COUNT.1);
    let mut rects = Vec::with_capacity(n);
    for i in 0..n {
        let depth = rng.random_range(RECT_DEPTH.0..=RECT_DEPTH.1);
        // The view half-width at depth z is z for the default focal length.
        let cx = rng.random_range(-0.8..0.8) * depth;
        let cy = rng.random_range(-0.8..0.8) * depth;
        let hw = rng.random_range(0.2..0.6) * depth;
        let hh = rng.random_range(0.2..0.6) * depth;
        let class = rng.random_range(1..class_count);
        rects.push(Rect {
            min: [cx - hw, cy - hh],
            max: [cx + hw, cy + hh],
            depth,
            class,
            texture: class_texture(class, derive_seed(seed, 1, i as u64)),
        });
    }
    Ok(Scene {
        rects,
        background_class: BACKGROUND_CLASS,
        background: class_texture(BACKGROUND_CLASS, derive_seed(seed, 2, 0)),
        class_count,
    })
}

/// One rendered view: RGB `[3,H,W]`, depth `[1,H,W]`, labels `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub frame: Tensor,
    pub depth: Tensor,
    pub labels: IntTensor,
}

/// Ray-casts every pixel center; depth is the camera-frame z of the nearest hit.
pub fn render(scene: &Scene, pose: &RigidTransform, k: &CameraIntrinsics) -> Result<View> {
    k.validate()?;
    let (h, w) = (k.height, k.width);
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![FAR_DEPTH; plane];
    let mut labels = vec![scene.background_class as i32; plane];
    let origin = pose.translation;
    for v in 0..h {
        for u in 0..w {
            let ray_cam = k.ray(u as f64, v as f64);
            let dir = pose.rotation * ray_cam;
            let mut best: Option<(f64, &Rect, Vector3<f64>)> = None;
            if dir.z > 0.0 {
                for r in &scene.rects {
                    let t = (r.depth - origin.z) / dir.z;
                    if !(t > 0.0) {
                        continue;
                    }
                    let p = origin + dir * t;
                    let inside = p.x >= r.min[0] && p.x <= r.max[0] && p.y >= r.min[1] && p.y <= r.max[1];
                    if inside && best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, r, p));
                    }
                }
            }
            let i = v * w + u;
            let color = match best {
                Some((t, r, p)) => {
                    depth[i] = t;
                    labels[i] = r.class as i32;
                    r.texture.sample(p.x - r.min[0], p.y - r.min[1])
                }
                None => {
                    let p = origin + dir * FAR_DEPTH;
                    scene.background.sample(p.x * 0.5 + p.z * 0.3, p.y * 0.5)
                }
            };
            for (c, value) in color.iter().enumerate() {
                rgb[c * plane + i] = *value;
            }
        }
    }
    Ok(View {
        frame: Tensor::new(vec![3, h, w], rgb)?,
        depth: Tensor::new(vec![1, h, w], depth)?,
        labels: IntTensor::new(vec![1, h, w], labels)?,
    })
}

/// Per-step camera motion magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    /// Translation per step, scene units.
    pub translation: (f64, f64),
    /// Rotation per step, radians.
    pub rotation: (f64, f64),
    /// Relative per-step jitter around the sequence's base velocity.
    pub jitter: f64,
    /// Low-pass coefficient of the velocity filter.
    pub smoothing: f64,
}

impl Default for MotionProfile {
    fn default() -> Self {
        Self { translation: (0.10, 0.25), rotation: (0.015, 0.04), jitter: 0.3, smoothing: 0.6 }
    }
}

impl MotionProfile {
    pub fn still() -> Self {
        Self { translation: (0.0, 0.0), rotation: (0.0, 0.0), jitter: 0.0, smoothing: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, r) = (self.translation, self.rotation);
        let ok = 0.0 <= t.0 && t.0 <= t.1 && t.1 <= 0.5 && 0.0 <= r.0 && r.0 <= r.1 && r.1 <= 0.1;
        if !ok || !(0.0..1.0).contains(&self.smoothing) || !(0.0..=1.0).contains(&self.jitter) {
            return invalid(format!("motion profile out of range: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    pub labels: Vec<IntTensor>,
    /// Camera-to-world pose of every frame.
    pub poses: Vec<RigidTransform>,
    pub intrinsics: CameraIntrinsics,
    pub class_count: usize,
    pub seed: u64,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth motion of each consecutive pair.
    pub fn motions(&self) -> Vec<RigidTransform> {
        self.poses.windows(2).map(|p| relative_motion(&p[0], &p[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 || self.depths.len() != n || self.labels.len() != n || self.poses.len() != n {
            return invalid("sequence lists must be non-empty and of equal length");
        }
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        for i in 0..n {
            if self.frames[i].shape() != [3, h, w] || self.depths[i].shape() != [1, h, w] || self.labels[i].shape() != [1, h, w] {
                return invalid(format!("frame {i} does not match the {h}x{w} intrinsics"));
            }
            if self.labels[i].data().iter().any(|l| *l < 0 || *l as usize >= self.class_count) {
                return invalid(format!("frame {i} has labels outside 0..{}", self.class_count));
            }
            if self.depths[i].data().iter().any(|d| !(*d > 0.0)) {
                return invalid(format!("frame {i} has non-positive depth"));
            }
        }
        Ok(())
    }
}

fn axis_vector(rng: &mut ChaCha8Rng, magnitude: f64, weights: [f64; 3]) -> Vector3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v = Vector3::new(
        normal.sample(rng) * weights[0],
        normal.sample(rng) * weights[1],
        normal.sample(rng) * weights[2],
    );
    let n = v.norm();
    if n == 0.0 {
        Vector3::zeros()
    } else {
        v * (magnitude / n)
    }
}

fn step_transform(trans: &Vector3<f64>, ang: &Vector3<f64>) -> RigidTransform {
    RigidTransform { rotation: rotation_from_angles(ang.x, ang.y, ang.z), translation: *trans }
}

/// Camera poses with a smoothly varying per-step motion around a base velocity.
pub fn generate_trajectory(seed: u64, length: usize, profile: &MotionProfile) -> Result<Vec<RigidTransform>> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const T_WEIGHTS: [f64; 3] = [1.0, 0.7, 0.2];
    const R_WEIGHTS: [f64; 3] = [0.7, 1.0, 0.25];
    let t_mag = rng.random_range(profile.translation.0..=profile.translation.1);
    let r_mag = rng.random_range(profile.rotation.0..=profile.rotation.1);
    let base_t = axis_vector(&mut rng, t_mag, T_WEIGHTS);
    let base_r = axis_vector(&mut rng, r_mag, R_WEIGHTS);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let jitter = |rng: &mut ChaCha8Rng, base: &Vector3<f64>, mag: f64, wts: [f64; 3]| -> Vector3<f64> {
        let s = profile.jitter * mag;
        base + Vector3::new(
            normal.sample(rng) * s * wts[0],
            normal.sample(rng) * s * wts[1],
            normal.sample(rng) * s * wts[2],
        )
    };
    let mut poses = vec![RigidTransform::identity()];
    let mut vel_t = jitter(&mut rng, &base_t, t_mag, T_WEIGHTS);
    let mut vel_r = jitter(&mut rng, &base_r, r_mag, R_WEIGHTS);
    let a = profile.smoothing;
    for i in 1..length {
        if i > 1 {
            vel_t = vel_t * a + jitter(&mut rng, &base_t, t_mag, T_WEIGHTS) * (1.0 - a);
            vel_r = vel_r * a + jitter(&mut rng, &base_r, r_mag, R_WEIGHTS) * (1.0 - a);
        }
        let prev = poses[i - 1];
        poses.push(prev.compose(&step_transform(&vel_t, &vel_r)));
    }
    Ok(poses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    pub length: usize,
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    pub profile: MotionProfile,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            length: DEFAULT_LENGTH,
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            class_count: DEFAULT_CLASSES,
            profile: MotionProfile::default(),
        }
    }
}

/// Renders a scene along a generated trajectory.
pub fn generate_sequence(seed: u64, config: &SequenceConfig) -> Result<SequenceSample> {
    if config.length < 2 {
        return invalid(format!("sequence length must be at least 2, got {}", config.length));
    }
    let k = CameraIntrinsics::default_for(config.width, config.height);
    let scene = generate_scene(derive_seed(seed, 10, 0), config.class_count)?;
    let poses = generate_trajectory(derive_seed(seed, 11, 0), config.length, &config.profile)?;
    let mut out = SequenceSample {
        frames: Vec::new(),
        depths: Vec::new(),
        labels: Vec::new(),
        poses: poses.clone(),
        intrinsics: k,
        class_count: config.class_count,
        seed,
    };
    for pose in &poses {
        let view = render(&scene, pose, &k)?;
        out.frames.push(view.frame);
        out.depths.push(view.depth);
        out.labels.push(view.labels);
    }
    Ok(out)
}

/// The same rendered view repeated `length` times.
pub fn generate_static_sequence(seed: u64, config: &SequenceConfig) -> Result<SequenceSample> {
    generate_sequence(seed, &SequenceConfig { profile: MotionProfile::still(), ..config.clone() })
}
