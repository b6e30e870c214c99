//! Aleatoric perturbations: Gaussian noise, lens clutter and lighting jumps.
//!
//! A [`PerturbationSpec`] is sampled once per sequence and fully determines
//! the corruption. Clutter kernel widths are specified in pixels of a
//! 320×240 reference image and rescaled to the actual resolution.

use fmfilter_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MAX_NOISE_VARIANCE: f64 = 0.001;
pub const MAX_CLUTTER_KERNELS: usize = 8;
pub const CLUTTER_STD_RANGE: (f64, f64) = (10.0, 36.0);
pub const LIGHTING_SCALE_RANGE: (f64, f64) = (0.5, 1.0);
pub const LIGHTING_DECAY: f64 = 0.3;
pub const REFERENCE_WIDTH: f64 = 320.0;
pub const REFERENCE_HEIGHT: f64 = 240.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterKernel {
    /// `(x, y)` as fractions of the image width and height.
    pub center: [f64; 2],
    /// `(σx, σy)` in reference pixels.
    pub std: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub seed: u64,
    pub sequence_length: usize,
    pub noise_variance: f64,
    pub clutter_kernel_count: usize,
    pub clutter_kernels: Vec<ClutterKernel>,
    pub lighting_frame_index: usize,
    /// Sampled from `[0.5, 1]`; `0` disables the lighting change.
    pub lighting_scale: f64,
    pub lighting_sign: i32,
}

impl PerturbationSpec {
    /// A spec that leaves every sequence unchanged.
    pub fn null(sequence_length: usize) -> Self {
        Self {
            seed: 0,
            sequence_length,
            noise_variance: 0.0,
            clutter_kernel_count: 0,
            clutter_kernels: Vec::new(),
            lighting_frame_index: 0,
            lighting_scale: 0.0,
            lighting_sign: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_NOISE_VARIANCE).contains(&self.noise_variance) {
            return invalid(format!("noise variance {} outside [0, {MAX_NOISE_VARIANCE}]", self.noise_variance));
        }
        if self.clutter_kernel_count > MAX_CLUTTER_KERNELS || self.clutter_kernel_count != self.clutter_kernels.len() {
            return invalid(format!(
                "kernel count {} must be at most {MAX_CLUTTER_KERNELS} and match {} kernels",
                self.clutter_kernel_count,
                self.clutter_kernels.len()
            ));
        }
        let (lo, hi) = CLUTTER_STD_RANGE;
        for k in &self.clutter_kernels {
            if k.center.iter().any(|c| !(0.0..=1.0).contains(c)) || k.std.iter().any(|s| !(lo..=hi).contains(s)) {
                return invalid(format!("clutter kernel {k:?} out of range"));
            }
        }
        if self.sequence_length == 0 || self.lighting_frame_index >= self.sequence_length {
            return invalid(format!(
                "lighting frame {} outside a sequence of length {}",
                self.lighting_frame_index, self.sequence_length
            ));
        }
        if !(0.0..=LIGHTING_SCALE_RANGE.1).contains(&self.lighting_scale) {
            return invalid(format!("lighting scale {} outside [0, 1]", self.lighting_scale));
        }
        if self.lighting_sign != 1 && self.lighting_sign != -1 {
            return invalid(format!("lighting sign must be ±1, got {}", self.lighting_sign));
        }
        Ok(())
    }
}

/// Draws every parameter uniformly from its interval.
pub fn sample_spec(seed: u64, sequence_length: usize) -> Result<PerturbationSpec> {
    if sequence_length == 0 {
        return invalid("sequence length must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_variance = rng.random_range(0.0..=MAX_NOISE_VARIANCE);
    let count = rng.random_range(0..=MAX_CLUTTER_KERNELS);
    let (lo, hi) = CLUTTER_STD_RANGE;
    let clutter_kernels = (0..count)
        .map(|_| ClutterKernel {
            center: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            std: [rng.random_range(lo..=hi), rng.random_range(lo..=hi)],
        })
        .collect();
    let lighting_frame_index = rng.random_range(0..sequence_length);
    let lighting_scale = rng.random_range(LIGHTING_SCALE_RANGE.0..=LIGHTING_SCALE_RANGE.1);
    let lighting_sign = if rng.random_bool(0.5) { 1 } else { -1 };
    Ok(PerturbationSpec {
        seed,
        sequence_length,
        noise_variance,
        clutter_kernel_count: count,
        clutter_kernels,
        lighting_frame_index,
        lighting_scale,
        lighting_sign,
    })
}

/// Sum of truncated, peak-normalized Gaussian kernels, clipped to `[0, 1]`.
pub fn build_clutter_mask(spec: &PerturbationSpec, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return invalid("mask size must be positive");
    }
    let mut mask = vec![0.0; height * width];
    for k in &spec.clutter_kernels {
        let (cx, cy) = (k.center[0] * width as f64, k.center[1] * height as f64);
        let sx = k.std[0] * width as f64 / REFERENCE_WIDTH;
        let sy = k.std[1] * height as f64 / REFERENCE_HEIGHT;
        for y in 0..height {
            let dy = y as f64 - cy;
            if dy.abs() > 3.0 * sy {
                continue;
            }
            for x in 0..width {
                let dx = x as f64 - cx;
                if dx.abs() > 3.0 * sx {
                    continue;
                }
                mask[y * width + x] += (-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy))).exp();
            }
        }
    }
    for m in &mut mask {
        *m = m.clamp(0.0, 1.0);
    }
    Ok(Tensor::new(vec![1, height, width], mask)?)
}

fn check_frame(frame: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = frame.dims3()?;
    if c == 0 {
        return invalid("frame has no channels");
    }
    Ok((c, h, w))
}

/// Per-channel mean over all pixels of all frames.
pub fn sequence_mean(frames: &[Tensor]) -> Result<Vec<f64>> {
    let Some(first) = frames.first() else {
        return invalid("empty sequence");
    };
    let (c, h, w) = check_frame(first)?;
    let mut sums = vec![0.0; c];
    for f in frames {
        if f.shape() != first.shape() {
            return invalid(format!("frame shape {:?} differs from {:?}", f.shape(), first.shape()));
        }
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += f.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
        }
    }
    let n = (frames.len() * h * w) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// `x · (1 − m) + μ · m` per channel.
pub fn apply_clutter(frame: &Tensor, mask: &Tensor, mu: &[f64]) -> Result<Tensor> {
    let (c, h, w) = check_frame(frame)?;
    if mask.shape() != [1, h, w] || mu.len() != c {
        return invalid(format!("mask {:?} / mean of {} channels do not fit frame {:?}", mask.shape(), mu.len(), frame.shape()));
    }
    let plane = h * w;
    let m = mask.data();
    let data = frame.data().iter().enumerate().map(|(i, x)| x * (1.0 - m[i % plane]) + mu[i / plane] * m[i % plane]).collect();
    Ok(Tensor::new(frame.shape().to_vec(), data)?)
}

/// Lighting offset `p · 0.3^(j − i) · s` of frame `j`, zero before frame `i`.
pub fn lighting_offset(spec: &PerturbationSpec, j: usize) -> f64 {
    if j < spec.lighting_frame_index {
        return 0.0;
    }
    spec.lighting_sign as f64 * LIGHTING_DECAY.powi((j - spec.lighting_frame_index) as i32) * spec.lighting_scale
}

pub fn apply_lighting(frames: &[Tensor], spec: &PerturbationSpec) -> Result<Vec<Tensor>> {
    if spec.lighting_frame_index >= frames.len() {
        return invalid(format!("lighting frame {} outside {} frames", spec.lighting_frame_index, frames.len()));
    }
    frames
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let off = lighting_offset(spec, j);
            Ok(Tensor::new(f.shape().to_vec(), f.data().iter().map(|x| x + off).collect())?)
        })
        .collect()
}

/// Zero-mean Gaussian noise for frame `j`, drawn from its own stream of `spec.seed`.
pub fn add_noise(frame: &Tensor, spec: &PerturbationSpec, j: usize) -> Result<Tensor> {
    if spec.noise_variance == 0.0 {
        return Ok(frame.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + j as u64);
    let normal = Normal::new(0.0, spec.noise_variance.sqrt()).map_err(|e| crate::error::Error::InvalidArgument(e.to_string()))?;
    let data = frame.data().iter().map(|x| x + normal.sample(&mut rng)).collect();
    Ok(Tensor::new(frame.shape().to_vec(), data)?)
}

/// Clutter, then lighting, then noise, then a final clip to `[0, 1]`.
pub fn perturb_sequence(frames: &[Tensor], spec: &PerturbationSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    if frames.len() != spec.sequence_length {
        return invalid(format!("spec is for {} frames, sequence has {}", spec.sequence_length, frames.len()));
    }
    let mu = sequence_mean(frames)?;
    let (_, h, w) = check_frame(&frames[0])?;
    let mask = build_clutter_mask(spec, h, w)?;
    let cluttered: Vec<Tensor> = frames.iter().map(|f| apply_clutter(f, &mask, &mu)).collect::<Result<_>>()?;
    let lit = apply_lighting(&cluttered, spec)?;
    lit.iter()
        .enumerate()
        .map(|(j, f)| {
            let noisy = add_noise(f, spec, j)?;
            Ok(Tensor::new(noisy.shape().to_vec(), noisy.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
        })
        .collect()
}

/// Mean and standard deviation of the Gaussian noise that replaces occluded or blanked content.
pub const OUTAGE_NOISE: (f64, f64) = (0.5, 0.25);

/// A frame of pure Gaussian noise, clipped to `[0, 1]`.
pub fn noise_frame(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(OUTAGE_NOISE.0, OUTAGE_NOISE.1).unwrap();
    Tensor::from_fn(shape, |_| normal.sample(rng).clamp(0.0, 1.0))
}

/// Replaces a random half of the `block`×`block` tiles of `frame` with noise.
pub fn occlude_half(frame: &Tensor, block: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (c, h, w) = check_frame(frame)?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return invalid(format!("{h}x{w} frame cannot be tiled by {block}"));
    }
    let (bh, bw) = (h / block, w / block);
    let mut tiles: Vec<usize> = (0..bh * bw).collect();
    let (chosen, _) = tiles.partial_shuffle(rng, bh * bw / 2);
    let mut hide = vec![false; bh * bw];
    for t in chosen.iter() {
        hide[*t] = true;
    }
    let noise = noise_frame(rng, frame.shape());
    let mut out = frame.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if hide[(y / block) * bw + x / block] {
                    let i = (ch * h + y) * w + x;
                    d[i] = noise.data()[i];
                }
            }
        }
    }
    Ok(out)
}
