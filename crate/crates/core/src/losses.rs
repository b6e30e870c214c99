//! Training objectives, recorded on the tape.

use fmfilter_tensor::{IntTensor, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::geometry::{tensor_from_matrix, RigidTransform};

/// Components weighted by the multi-task loss, in this order.
pub const TASKS: [&str; 5] = ["seg", "depth_l1", "depth_sig", "trans", "rot"];

pub const SIG_SCALES: [usize; 3] = [1, 2, 4];

/// Clamp margin inside `acos` for the rotation loss.
pub const ACOS_MARGIN: f64 = 1e-7;

fn check_map(tape: &Tape, z_hat: Var, z_gt: &Tensor) -> Result<(usize, usize)> {
    let s = tape.shape(z_hat);
    if s.len() != 3 || s[0] != 1 || z_gt.shape() != s {
        return invalid(format!("depth maps must both be [1,h,w]: {s:?} vs {:?}", z_gt.shape()));
    }
    Ok((s[1], s[2]))
}

/// `Σ |z − ẑ|` over pixels.
pub fn depth_l1(tape: &mut Tape, z_gt: &Tensor, z_hat: Var) -> Result<Var> {
    check_map(tape, z_hat, z_gt)?;
    let z = tape.constant(z_gt.clone());
    let d = tape.sub(z, z_hat)?;
    let a = tape.abs(d);
    Ok(tape.sum(a))
}

/// Normalized forward differences along rows and columns at spacing `h`,
/// zero-padded back to the full map.
fn normalized_gradients(tape: &mut Tape, n: Var, h: usize, rows: usize, cols: usize) -> Result<(Var, Var)> {
    let diff = |tape: &mut Tape, far: Var, near: Var| -> Result<Var> {
        let num = tape.sub(far, near)?;
        let af = tape.abs(far);
        let an = tape.abs(near);
        let den = tape.add(af, an)?;
        Ok(tape.safe_div(num, den)?)
    };
    let gy = if h < rows {
        let far = tape.crop(n, h, 0, rows - h, cols)?;
        let near = tape.crop(n, 0, 0, rows - h, cols)?;
        let g = diff(tape, far, near)?;
        tape.pad(g, 0, 0, rows, cols)?
    } else {
        tape.constant(Tensor::zeros(&[1, rows, cols]))
    };
    let gx = if h < cols {
        let far = tape.crop(n, 0, h, rows, cols - h)?;
        let near = tape.crop(n, 0, 0, rows, cols - h)?;
        let g = diff(tape, far, near)?;
        tape.pad(g, 0, 0, rows, cols)?
    } else {
        tape.constant(Tensor::zeros(&[1, rows, cols]))
    };
    Ok((gy, gx))
}

/// `g_h[n]` for a plain map, as `(row component, column component)` per pixel.
pub fn scale_invariant_gradient(n: &Tensor, h: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let v = tape.constant(n.clone());
    let (rows, cols) = check_map(&tape, v, n)?;
    let (gy, gx) = normalized_gradients(&mut tape, v, h, rows, cols)?;
    Ok((tape.value(gy).clone(), tape.value(gx).clone()))
}

/// `Σ_h Σ_ij ‖g_h[z](i,j) − g_h[ẑ](i,j)‖₂` for `h ∈ {1, 2, 4}`.
pub fn depth_sig(tape: &mut Tape, z_gt: &Tensor, z_hat: Var) -> Result<Var> {
    let (rows, cols) = check_map(tape, z_hat, z_gt)?;
    let z = tape.constant(z_gt.clone());
    let mut terms = Vec::new();
    for h in SIG_SCALES {
        let (gy, gx) = normalized_gradients(tape, z_hat, h, rows, cols)?;
        let (ty, tx) = normalized_gradients(tape, z, h, rows, cols)?;
        let dy = tape.sub(ty, gy)?;
        let dx = tape.sub(tx, gx)?;
        let sy = tape.mul(dy, dy)?;
        let sx = tape.mul(dx, dx)?;
        let sq = tape.add(sy, sx)?;
        let norm = tape.sqrt(sq)?;
        terms.push(tape.sum(norm));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t)?;
    }
    Ok(total)
}

/// Mean over pixels of `−log softmax(logits)[label]`.
pub fn seg_ce(tape: &mut Tape, logits: Var, labels: &IntTensor) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || labels.shape() != [1, s[1], s[2]] {
        return invalid(format!("labels {:?} do not match logits {s:?}", labels.shape()));
    }
    let k = s[0];
    let mut idx = Vec::with_capacity(labels.len());
    for l in labels.data() {
        if *l < 0 || *l as usize >= k {
            return invalid(format!("label {l} out of range for {k} classes"));
        }
        idx.push(*l as usize);
    }
    let lp = tape.log_softmax(logits, 0)?;
    let picked = tape.gather_channels(lp, &idx)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// `ΔT = ‖R̂ᵀ (T − T̂)‖²` with `T̂: [3]`, `R̂: [3,3]` on the tape.
pub fn translation_loss(tape: &mut Tape, t_hat: Var, r_hat: Var, gt: &RigidTransform) -> Result<Var> {
    let t = tape.constant(Tensor::new(vec![3], gt.translation.iter().copied().collect())?);
    let d = tape.sub(t, t_hat)?;
    let d = tape.reshape(d, &[3, 1])?;
    let rt = tape.transpose(r_hat)?;
    let v = tape.matmul(rt, d)?;
    let sq = tape.mul(v, v)?;
    Ok(tape.sum(sq))
}

/// `ΔR = acos((tr(R̂ᵀ R) − 1) / 2)`, clamped `margin` inside `[−1, 1]`.
pub fn rotation_loss(tape: &mut Tape, r_hat: Var, gt: &RigidTransform, margin: f64) -> Result<Var> {
    let prod = tape.mul_const(r_hat, &tensor_from_matrix(&gt.rotation))?;
    let tr = tape.sum(prod);
    let c = tape.affine(tr, 0.5, -0.5);
    Ok(tape.acos_clamped(c, margin)?)
}

/// `Σ_i exp(−s_i) L_i + s_i`.
pub fn multitask_total(tape: &mut Tape, losses: &[Var], weights: &[Var]) -> Result<Var> {
    if losses.len() != weights.len() || losses.is_empty() {
        return invalid(format!("{} losses for {} weights", losses.len(), weights.len()));
    }
    let mut total: Option<Var> = None;
    for (l, s) in losses.iter().zip(weights) {
        let neg = tape.scale(*s, -1.0);
        let e = tape.exp(neg);
        let wl = tape.mul(e, *l)?;
        let term = tape.add(wl, *s)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Mean of several scalar nodes.
pub fn mean_of(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    if xs.is_empty() {
        return invalid("mean of no values");
    }
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = tape.add(acc, *x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64))
}

/// Block-averaged inverse depth `[1, H/f, W/f]` from a depth map `[1, H, W]`.
pub fn inverse_depth_target(depth: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = depth.dims3()?;
    if c != 1 || factor == 0 || h % factor != 0 || w % factor != 0 {
        return invalid(format!("cannot downsample {:?} by {factor}", depth.shape()));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = depth.data();
    let mut out = vec![0.0; oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += 1.0 / d[y * w + x];
        }
    }
    let n = (factor * factor) as f64;
    Ok(Tensor::new(vec![1, oh, ow], out.into_iter().map(|v| v / n).collect())?)
}
