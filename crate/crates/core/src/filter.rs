//! The recurrent feature filter: geometric prediction, gated update and GRU motion integration.
//!
//! Everything is recorded on a [`Session`] tape so a whole sequence can be
//! unrolled and differentiated end to end.

use fmfilter_tensor::{Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::geometry::{matrix_from_tensor, rotation_from_sines_var, CameraIntrinsics, DepthMap, RigidTransform, WarpPlan};
use crate::networks::{decode_depth, decode_motion, decode_semantic, encode, fuse_acceleration, BnKind, Session, DEPTH_EPS};

/// How the transform used by the prediction step is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionMode {
    /// From the motion decoder and GRU.
    Estimated,
    /// Motion filter removed; the prediction uses the identity transform.
    Identity,
    /// A fixed transform; the motion filter is not run.
    Given(RigidTransform),
}

/// Warp plans recorded during a forward pass, optionally replayed in a later one.
///
/// Finite-difference checks replay the plans of the analytic pass so that
/// the piecewise-constant pixel assignment does not jump under perturbation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanLog {
    pub recorded: Vec<WarpPlan>,
    replay: Option<Vec<WarpPlan>>,
}

impl PlanLog {
    pub fn replaying(plans: Vec<WarpPlan>) -> Self {
        Self { recorded: Vec::new(), replay: Some(plans) }
    }

    fn next(&mut self, build: impl FnOnce() -> Result<WarpPlan>) -> Result<WarpPlan> {
        let plan = match &self.replay {
            Some(p) => p
                .get(self.recorded.len())
                .cloned()
                .ok_or_else(|| Error::Precondition("replay log exhausted".into()))?,
            None => build()?,
        };
        self.recorded.push(plan.clone());
        Ok(plan)
    }
}

/// Hidden state `(r̂_{t−1}, r̃_{t−1}, h^m_{t−1})` plus the last inverse depth.
pub struct FilterState {
    pub r_hat_prev: Var,
    pub r_tilde_prev: Var,
    pub h_motion: Var,
    /// `ẑ` decoded from `r̂_{t−1}`, used for the next warp.
    pub z_hat_prev: Tensor,
    pub initialized: bool,
    pub plans: PlanLog,
}

impl FilterState {
    /// All-zero, uninitialized state.
    pub fn new(s: &mut Session) -> Self {
        let cfg = s.config();
        let (h, w) = cfg.feature_size();
        let c = cfg.feature_channels;
        Self {
            r_hat_prev: s.input(Tensor::zeros(&[c, h, w])),
            r_tilde_prev: s.input(Tensor::zeros(&[c, h, w])),
            h_motion: s.input(Tensor::zeros(&[cfg.motion_state])),
            z_hat_prev: Tensor::zeros(&[1, h, w]),
            initialized: false,
            plans: PlanLog::default(),
        }
    }
}

pub struct MotionEstimate {
    pub translation: Var,
    /// Head outputs before clipping.
    pub sines_raw: Var,
    pub sines: Var,
    pub rotation: Var,
    pub transform: RigidTransform,
}

pub struct Prediction {
    pub r_bar: Var,
    pub validity: Tensor,
    pub plan: WarpPlan,
    pub depth: DepthMap,
}

pub struct StepOutput {
    pub r_tilde: Var,
    pub r_hat: Var,
    pub logits: Var,
    pub z_hat: Var,
    /// `i_t` as `[1, h, w]`; all ones on the first frame.
    pub gate: Var,
    pub transform: RigidTransform,
    pub motion: Option<MotionEstimate>,
    pub prediction: Option<Prediction>,
}

fn gru_gate(s: &mut Session, gate: &str, m: Var, h_term: Var) -> Result<Var> {
    let wm = s.param(&format!("motion_gru/w_m{gate}/weight"))?;
    let b = s.param(&format!("motion_gru/b_{gate}"))?;
    let a = s.tape.linear(m, wm, Some(b))?;
    let z = s.tape.add(a, h_term)?;
    Ok(s.tape.sigmoid(z))
}

fn recurrent(s: &mut Session, gate: &str, h: Var) -> Result<Var> {
    let wh = s.param(&format!("motion_gru/w_h{gate}/weight"))?;
    Ok(s.tape.linear(h, wh, None)?)
}

/// `h' = (1 − u)∘h + u∘c` with gates `o, u` and candidate `c`; returns `(h', u)`.
pub fn gru_cell(s: &mut Session, m: Var, h: Var) -> Result<(Var, Var)> {
    let ho = recurrent(s, "o", h)?;
    let o = gru_gate(s, "o", m, ho)?;
    let hu = recurrent(s, "u", h)?;
    let u = gru_gate(s, "u", m, hu)?;
    let hc = recurrent(s, "c", h)?;
    let ohc = s.tape.mul(o, hc)?;
    let c = gru_gate(s, "c", m, ohc)?;
    Ok((blend(s, h, c, u)?, u))
}

/// `(1 − u)∘h + u∘c`.
pub fn blend(s: &mut Session, h: Var, c: Var, u: Var) -> Result<Var> {
    let keep = s.tape.affine(u, -1.0, 1.0);
    let a = s.tape.mul(keep, h)?;
    let b = s.tape.mul(u, c)?;
    Ok(s.tape.add(a, b)?)
}

/// Maps a motion state to `(T̂, R̂)` through the two fully connected layers.
pub fn motion_head(s: &mut Session, h: Var) -> Result<MotionEstimate> {
    let y = s.linear("motion_head/fc1", h, false)?;
    let y = s.batchnorm("motion_head/fc1/bn", y, BnKind::Running)?;
    let y = s.tape.relu(y);
    let y = s.linear("motion_head/fc2", y, true)?;
    let y = s.tape.reshape(y, &[1, 1, 6])?;
    let t = s.tape.crop(y, 0, 0, 1, 3)?;
    let translation = s.tape.reshape(t, &[3])?;
    let r = s.tape.crop(y, 0, 3, 1, 3)?;
    let sines_raw = s.tape.reshape(r, &[3])?;
    let sines = s.tape.clip(sines_raw, -1.0, 1.0)?;
    let rotation = rotation_from_sines_var(&mut s.tape, sines)?;
    let tv = s.tape.value(translation).data();
    let transform = RigidTransform::new(
        matrix_from_tensor(s.tape.value(rotation))?,
        nalgebra::Vector3::new(tv[0], tv[1], tv[2]),
    )?;
    Ok(MotionEstimate { translation, sines_raw, sines, rotation, transform })
}

/// One GRU step on motion features followed by the output head.
pub fn motion_step(s: &mut Session, h: Var, m: Var) -> Result<(Var, MotionEstimate)> {
    let (h_next, _) = gru_cell(s, m, h)?;
    let est = motion_head(s, h_next)?;
    Ok((h_next, est))
}

/// Motion features of an encoded pair.
pub fn motion_features(s: &mut Session, r_prev: Var, r_next: Var, accel: Option<[f64; 3]>) -> Result<Var> {
    let pair = s.tape.concat(&[r_prev, r_next])?;
    let m = decode_motion(s, pair)?;
    fuse_acceleration(s, m, accel)
}

/// `r̄_t`: the previous filtered features warped by `tau` with the previous depth estimate.
///
/// Reads only the state, never the current frame.
pub fn predict(
    s: &mut Session,
    state: &mut FilterState,
    tau: &RigidTransform,
    k_feat: &CameraIntrinsics,
) -> Result<Prediction> {
    if !state.initialized {
        return Err(Error::Precondition("prediction needs an initialized filter state".into()));
    }
    let depth = DepthMap::from_inverse(&state.z_hat_prev, DEPTH_EPS)?;
    let plan = state.plans.next(|| WarpPlan::build(&depth, tau, k_feat))?;
    if plan.height != depth.height() || plan.width != depth.width() {
        return invalid("replayed plan does not match the feature size");
    }
    let r_bar = plan.apply_var(&mut s.tape, state.r_hat_prev)?;
    Ok(Prediction { r_bar, validity: plan.validity(), plan, depth })
}

/// Gated fusion; returns `(r̂_t, i_t)`.
pub fn update(s: &mut Session, r_bar: Var, r_tilde: Var) -> Result<(Var, Var)> {
    if s.tape.shape(r_bar) != s.tape.shape(r_tilde) {
        return invalid(format!("{:?} vs {:?}", s.tape.shape(r_bar), s.tape.shape(r_tilde)));
    }
    let w_hid = s.param("gate/w_hid")?;
    let w_in = s.param("gate/w_in")?;
    let b = s.param("gate/bias")?;
    let a = s.tape.conv2d(r_bar, w_hid, None, 1, 1)?;
    let c = s.tape.conv2d(r_tilde, w_in, Some(b), 1, 1)?;
    let z = s.tape.add(a, c)?;
    let i = s.tape.sigmoid(z);
    let keep = s.tape.affine(i, -1.0, 1.0);
    let prior = s.tape.mul_bcast(r_bar, keep)?;
    let obs = s.tape.mul_bcast(r_tilde, i)?;
    Ok((s.tape.add(prior, obs)?, i))
}

/// Feature-resolution intrinsics for the session's network.
pub fn feature_intrinsics(s: &Session, k: &CameraIntrinsics) -> Result<CameraIntrinsics> {
    let cfg = s.config();
    if k.width != cfg.image_width || k.height != cfg.image_height {
        return invalid(format!("intrinsics are {}x{}, network expects {}x{}", k.width, k.height, cfg.image_width, cfg.image_height));
    }
    k.scaled_down(cfg.downsample())
}

/// One filter step on frame `x` (`[3, H, W]`).
pub fn step(
    s: &mut Session,
    state: &mut FilterState,
    x: &Tensor,
    accel: Option<[f64; 3]>,
    motion: &MotionMode,
    k: &CameraIntrinsics,
) -> Result<StepOutput> {
    let cfg = s.config();
    if x.shape() != [cfg.in_channels, cfg.image_height, cfg.image_width] {
        return invalid(format!("frame has shape {:?}", x.shape()));
    }
    let k_feat = feature_intrinsics(s, k)?;
    let xv = s.input(x.clone());
    let r_tilde = encode(s, xv)?;

    let (r_hat, gate, transform, est, prediction) = if !state.initialized {
        let (h, w) = cfg.feature_size();
        let ones = s.input(Tensor::ones(&[1, h, w]));
        (r_tilde, ones, RigidTransform::identity(), None, None)
    } else {
        let (tau, est) = match motion {
            MotionMode::Estimated => {
                let m = motion_features(s, state.r_tilde_prev, r_tilde, accel)?;
                let (h_next, est) = motion_step(s, state.h_motion, m)?;
                state.h_motion = h_next;
                (est.transform, Some(est))
            }
            MotionMode::Identity => (RigidTransform::identity(), None),
            MotionMode::Given(t) => (*t, None),
        };
        let p = predict(s, state, &tau, &k_feat)?;
        let (r_hat, i) = update(s, p.r_bar, r_tilde)?;
        (r_hat, i, tau, est, Some(p))
    };

    let logits = decode_semantic(s, r_hat)?;
    let z_hat = decode_depth(s, r_hat)?;
    state.r_hat_prev = r_hat;
    state.r_tilde_prev = r_tilde;
    state.z_hat_prev = s.tape.value(z_hat).clone();
    state.initialized = true;
    Ok(StepOutput { r_tilde, r_hat, logits, z_hat, gate, transform, motion: est, prediction })
}

/// Filters a whole sequence from a fresh state.
pub fn run_sequence(
    s: &mut Session,
    frames: &[Tensor],
    motion: &MotionMode,
    k: &CameraIntrinsics,
    plans: PlanLog,
) -> Result<(Vec<StepOutput>, PlanLog)> {
    let mut state = FilterState::new(s);
    state.plans = plans;
    let mut out = Vec::with_capacity(frames.len());
    for x in frames {
        out.push(step(s, &mut state, x, None, motion, k)?);
    }
    Ok((out, state.plans))
}

/// The unfiltered multi-task forward pass on one frame: `(r̃, logits, ẑ)`.
pub fn forward_single(s: &mut Session, x: &Tensor) -> Result<(Var, Var, Var)> {
    let xv = s.input(x.clone());
    let r = encode(s, xv)?;
    let logits = decode_semantic(s, r)?;
    let z = decode_depth(s, r)?;
    Ok((r, logits, z))
}

/// Unfiltered motion estimate for a pair: one GRU step from a zero state.
pub fn motion_single(s: &mut Session, r_prev: Var, r_next: Var) -> Result<MotionEstimate> {
    let m = motion_features(s, r_prev, r_next, None)?;
    let h0 = s.input(Tensor::zeros(&[s.config().motion_state]));
    Ok(motion_step(s, h0, m)?.1)
}
