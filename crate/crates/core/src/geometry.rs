//! Pinhole cameras, rigid transforms, forward warping and pose error metrics.
//!
//! Camera coordinates are x right, y down, z forward. A pose maps camera
//! coordinates to world coordinates; the inter-frame motion τ maps camera
//! coordinates of frame t−1 to camera coordinates of frame t.

use fmfilter_tensor::{Function, Tape, Tensor, Var};
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// `fx = fy = width / 2`, principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64 / 2.0,
            fy: width as f64 / 2.0,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return invalid(format!("focal lengths must be positive and finite: {self:?}"));
        }
        if self.width == 0 || self.height == 0 {
            return invalid("image size must be positive");
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return invalid(format!("principal point ({}, {}) outside the image", self.cx, self.cy));
        }
        Ok(())
    }

    /// Intrinsics of the same camera sampled on a grid `factor` times coarser.
    ///
    /// Pixel centers are preserved: `c' = (c + 0.5) / factor − 0.5`.
    pub fn scaled_down(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return invalid(format!("{}x{} is not divisible by {factor}", self.width, self.height));
        }
        let f = factor as f64;
        Self::new(
            self.fx / f,
            self.fy / f,
            (self.cx + 0.5) / f - 0.5,
            (self.cy + 0.5) / f - 0.5,
            self.width / factor,
            self.height / factor,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point at depth `d` along the ray through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new(d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d)
    }

    /// Continuous pixel coordinates of a camera-frame point with `z > 0`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Unit-depth ray direction through pixel `(u, v)`, i.e. `K⁻¹ (u, v, 1)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.back_project(u, v, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rejects rotations that are not orthonormal with unit determinant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_valid(ROTATION_TOLERANCE) || !translation.iter().all(|v| v.is_finite()) {
            return invalid(format!("not a rigid transform: R = {rotation}, T = {translation}"));
        }
        Ok(t)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).iter().all(|e| e.abs() <= tol);
        orth && (r.determinant() - 1.0).abs() <= tol
    }

    /// `p ↦ R p + T`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `[R | T]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_rows(rows: &[f64]) -> Result<Self> {
        if rows.len() != 12 {
            return invalid(format!("a 3x4 pose needs 12 numbers, got {}", rows.len()));
        }
        let rotation = Matrix3::new(rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10]);
        Self::new(rotation, Vector3::new(rows[3], rows[7], rows[11]))
    }
}

/// `compose(a, b)` as a free function.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(a: &RigidTransform) -> RigidTransform {
    a.inverse()
}

/// Motion from the camera frame of `pose_prev` to that of `pose_next` (both camera-to-world).
pub fn relative_motion(pose_prev: &RigidTransform, pose_next: &RigidTransform) -> RigidTransform {
    pose_next.inverse().compose(pose_prev)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(γ) · Ry(β) · Rx(α)`.
pub fn rotation_from_angles(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    rot_z(gamma) * rot_y(beta) * rot_x(alpha)
}

/// Rotation from the sines of the three Euler angles; inputs are clamped to `[−1, 1]`.
pub fn rotation_from_sines(s: [f64; 3]) -> Matrix3<f64> {
    let [a, b, g] = s.map(|v| v.clamp(-1.0, 1.0).asin());
    rotation_from_angles(a, b, g)
}

/// Euler angles `(α, β, γ)` of `R = Rz·Ry·Rx`, with `β ∈ [−π/2, π/2]`.
pub fn angles_from_rotation(r: &Matrix3<f64>) -> [f64; 3] {
    let beta = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let alpha = r[(2, 1)].atan2(r[(2, 2)]);
    let gamma = r[(1, 0)].atan2(r[(0, 0)]);
    [alpha, beta, gamma]
}

/// Tape op `[3] → [3,3]` for [`rotation_from_sines`].
///
/// The arcsine derivative is taken as zero at `|s| ≥ 1`, where the head clips.
struct SinesToRotation;

impl Function for SinesToRotation {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let s = inputs[0].data();
        let ang: Vec<f64> = s.iter().map(|v| v.clamp(-1.0, 1.0).asin()).collect();
        let (rx, ry, rz) = (rot_x(ang[0]), rot_y(ang[1]), rot_z(ang[2]));
        let (sa, ca) = ang[0].sin_cos();
        let (sb, cb) = ang[1].sin_cos();
        let (sg, cg) = ang[2].sin_cos();
        let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sa, -ca, 0.0, ca, -sa);
        let dry = Matrix3::new(-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb);
        let drz = Matrix3::new(-sg, -cg, 0.0, cg, -sg, 0.0, 0.0, 0.0, 0.0);
        let jac = [rz * ry * drx, rz * dry * rx, drz * ry * rx];
        let mut g = vec![0.0; 3];
        for i in 0..3 {
            let denom = 1.0 - s[i] * s[i];
            if denom <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    acc += grad_output[r * 3 + c] * jac[i][(r, c)];
                }
            }
            g[i] = acc / denom.sqrt();
        }
        vec![g]
    }
}

/// Records `rotation_from_sines` on the tape; `s` must have shape `[3]`.
pub fn rotation_from_sines_var(tape: &mut Tape, s: Var) -> Result<Var> {
    if tape.shape(s) != [3] {
        return invalid(format!("expected 3 sines, got shape {:?}", tape.shape(s)));
    }
    let v = tape.value(s).data();
    let r = rotation_from_sines([v[0], v[1], v[2]]);
    let data: Vec<f64> = (0..9).map(|i| r[(i / 3, i % 3)]).collect();
    Ok(tape.custom(&[s], Tensor::new(vec![3, 3], data)?, Box::new(SinesToRotation)))
}

pub fn matrix_from_tensor(t: &Tensor) -> Result<Matrix3<f64>> {
    if t.shape() != [3, 3] {
        return invalid(format!("expected a 3x3 matrix, got {:?}", t.shape()));
    }
    Ok(Matrix3::from_row_slice(t.data()))
}

pub fn tensor_from_matrix(m: &Matrix3<f64>) -> Tensor {
    Tensor::from_fn(&[3, 3], |i| m[(i / 3, i % 3)])
}

/// `ΔT = ‖R̂ᵀ (T − T̂)‖²`.
pub fn translation_error(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    (pred.rotation.transpose() * (gt.translation - pred.translation)).norm_squared()
}

/// `ΔR = arccos(clamp((tr(R̂ᵀ R) − 1) / 2, −1, 1))`, in radians.
pub fn rotation_error(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let tr = (pred.rotation.transpose() * gt.rotation).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Per-pixel depths `[1, H, W]`, all strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != 1 {
            return invalid(format!("depth map must be [1,H,W], got {s:?}"));
        }
        if let Some(bad) = values.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return invalid(format!("depth must be positive and finite, found {bad}"));
        }
        Ok(Self(values))
    }

    /// Depth `1 / max(z, eps)` from an inverse-depth map.
    pub fn from_inverse(z: &Tensor, eps: f64) -> Result<Self> {
        let d = Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| 1.0 / v.max(eps)).collect())?;
        Self::new(d)
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Which source pixel lands on each target pixel, with its transformed depth.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpPlan {
    pub source: Vec<Option<usize>>,
    pub target_depth: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl WarpPlan {
    /// Forward splat with nearest-integer rounding and a strict z-buffer.
    ///
    /// Sources are visited in row-major order, so exact depth ties keep the
    /// earlier source.
    pub fn build(depth: &DepthMap, tau: &RigidTransform, k: &CameraIntrinsics) -> Result<Self> {
        let (h, w) = (depth.height(), depth.width());
        if h != k.height || w != k.width {
            return invalid(format!("depth is {h}x{w} but intrinsics are {}x{}", k.height, k.width));
        }
        let mut source = vec![None; h * w];
        let mut target_depth = vec![f64::INFINITY; h * w];
        let d = depth.values().data();
        for v in 0..h {
            for u in 0..w {
                let s = v * w + u;
                let q = tau.apply(&k.back_project(u as f64, v as f64, d[s]));
                if !(q.z > 0.0) {
                    continue;
                }
                let (pu, pv) = k.project(&q);
                let (tu, tv) = (pu.round(), pv.round());
                if !(tu >= 0.0 && tv >= 0.0 && tu < w as f64 && tv < h as f64) {
                    continue;
                }
                let t = tv as usize * w + tu as usize;
                if q.z < target_depth[t] {
                    target_depth[t] = q.z;
                    source[t] = Some(s);
                }
            }
        }
        Ok(Self { source, target_depth, height: h, width: w })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            source: (0..height * width).map(Some).collect(),
            target_depth: vec![f64::NAN; height * width],
            height,
            width,
        }
    }

    pub fn validity(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.source[i].is_some() { 1.0 } else { 0.0 })
    }

    pub fn valid_count(&self) -> usize {
        self.source.iter().flatten().count()
    }

    /// Applies the plan to a `[C, H, W]` tensor outside any tape.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let y = self.apply_var(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Gathers winners on the tape; gradients reach the features only.
    pub fn apply_var(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let s = tape.shape(features);
        if s.len() != 3 || s[1] != self.height || s[2] != self.width {
            return invalid(format!("features {s:?} do not match a {}x{} plan", self.height, self.width));
        }
        Ok(tape.gather_pixels(features, &self.source, self.height, self.width)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub warped: Tensor,
    pub validity: Tensor,
}

/// Forward-warps `features` from frame t−1 into frame t.
pub fn project_warp(
    features: &Tensor,
    depth: &DepthMap,
    tau: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    let plan = WarpPlan::build(depth, tau, k)?;
    Ok(WarpResult { warped: plan.apply(features)?, validity: plan.validity() })
}
