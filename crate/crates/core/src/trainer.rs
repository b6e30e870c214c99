//! Adam, the staged training protocol and a finite-difference harness for whole models.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use fmfilter_tensor::gradcheck::{relative_error, DEFAULT_FLOOR, DEFAULT_STEP};
use fmfilter_tensor::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::filter::{forward_single, motion_features, motion_single, motion_step, run_sequence, MotionMode, PlanLog};
use crate::geometry::relative_motion;
use crate::losses::{
    depth_l1, depth_sig, inverse_depth_target, mean_of, multitask_total, rotation_loss, seg_ce, translation_loss,
    ACOS_MARGIN,
};
use crate::networks::{apply_bn_observations, encode, groups, Mode, ParameterStore, Session, Trainable};
use crate::perturb::{noise_frame, occlude_half};
use crate::synthdata::{derive_seed, SequenceSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Baseline,
    MotionPretrain,
    UpdatePretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::MotionPretrain => "motion-pretrain",
            Stage::UpdatePretrain => "update-pretrain",
            Stage::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }

    /// Parameter groups optimized in this stage; everything else is frozen.
    pub fn trainable(self) -> Trainable {
        use groups::*;
        match self {
            Stage::Baseline => Trainable::groups(&[ENCODER, SEMANTIC, DEPTH, MOTION, MOTION_GRU, MOTION_HEAD, FUSION, MULTITASK]),
            Stage::MotionPretrain => Trainable::groups(&[MOTION, MOTION_GRU, MOTION_HEAD, FUSION]),
            Stage::UpdatePretrain => Trainable::groups(&[ENCODER, GATE, MULTITASK]),
            Stage::Finetune => Trainable::All,
        }
    }
}

/// Synthetic corruption applied to training sequences on the fly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    #[default]
    None,
    /// Half of the 8×8 tiles of every frame replaced by noise, chosen anew per frame.
    StaticOcclusion,
    /// The last `outage_frames` frames replaced entirely by noise.
    TailOutage,
}

pub const OCCLUSION_BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Truncates sequences to this many frames.
    pub sequence_length: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Sequences per optimizer step.
    pub accumulation: usize,
    /// Uses only the first `max_sequences` sequences.
    pub max_sequences: Option<usize>,
    pub corruption: Corruption,
    /// Chance that a sequence is corrupted.
    pub corruption_probability: f64,
    pub outage_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            sequence_length: None,
            epochs: 1,
            seed: 0,
            accumulation: 4,
            max_sequences: None,
            corruption: Corruption::None,
            corruption_probability: 1.0,
            outage_frames: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return invalid(format!("{n} = {b} outside (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return invalid("epsilon must be positive and weight decay non-negative");
        }
        if self.accumulation == 0 {
            return invalid("accumulation must be at least 1");
        }
        if self.sequence_length == Some(0) || self.max_sequences == Some(0) {
            return invalid("sequence length and sequence count must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption_probability) {
            return invalid(format!("corruption probability {} outside [0, 1]", self.corruption_probability));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| format_err("train config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

// ---- Adam -------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One Adam step with bias correction and decoupled weight decay on `decay` parameters.
///
/// Only parameters present in `grads` are touched.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = store.params.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if g.len() != p.value.len() {
            return invalid(format!("gradient for {name} has {} entries, parameter has {}", g.len(), p.value.len()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let shrink = if p.decay { 1.0 - cfg.learning_rate * cfg.weight_decay } else { 1.0 };
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *x = *x * shrink - cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

// ---- losses per stage ---------------------------------------------------------

/// Per-task losses averaged over frames (or frame pairs).
#[derive(Clone, Debug, Default)]
pub struct Terms {
    pub seg: Option<Var>,
    pub depth_l1: Option<Var>,
    pub depth_sig: Option<Var>,
    pub trans: Option<Var>,
    pub rot: Option<Var>,
}

impl Terms {
    fn named(&self) -> Vec<(&'static str, Var)> {
        let all = [
            ("seg", self.seg),
            ("depth_l1", self.depth_l1),
            ("depth_sig", self.depth_sig),
            ("trans", self.trans),
            ("rot", self.rot),
        ];
        all.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))).collect()
    }
}

#[derive(Default)]
struct Collect {
    seg: Vec<Var>,
    l1: Vec<Var>,
    sig: Vec<Var>,
    trans: Vec<Var>,
    rot: Vec<Var>,
}

impl Collect {
    fn frame(&mut self, s: &mut Session, seq: &SequenceSample, t: usize, logits: Var, z_hat: Var) -> Result<()> {
        self.seg.push(seg_ce(&mut s.tape, logits, &seq.labels[t])?);
        let target = inverse_depth_target(&seq.depths[t], s.config().downsample())?;
        self.l1.push(depth_l1(&mut s.tape, &target, z_hat)?);
        self.sig.push(depth_sig(&mut s.tape, &target, z_hat)?);
        Ok(())
    }

    fn motion(&mut self, s: &mut Session, seq: &SequenceSample, t: usize, t_hat: Var, r_hat: Var) -> Result<()> {
        let gt = relative_motion(&seq.poses[t - 1], &seq.poses[t]);
        self.trans.push(translation_loss(&mut s.tape, t_hat, r_hat, &gt)?);
        self.rot.push(rotation_loss(&mut s.tape, r_hat, &gt, ACOS_MARGIN)?);
        Ok(())
    }

    fn finish(self, s: &mut Session) -> Result<Terms> {
        let mut avg = |xs: Vec<Var>| -> Result<Option<Var>> {
            if xs.is_empty() {
                Ok(None)
            } else {
                Ok(Some(mean_of(&mut s.tape, &xs)?))
            }
        };
        Ok(Terms {
            seg: avg(self.seg)?,
            depth_l1: avg(self.l1)?,
            depth_sig: avg(self.sig)?,
            trans: avg(self.trans)?,
            rot: avg(self.rot)?,
        })
    }
}

/// Unrolls the filter over `frames` with losses against `seq`.
pub fn filtered_terms(s: &mut Session, seq: &SequenceSample, frames: &[Tensor], motion: &MotionMode, plans: PlanLog) -> Result<(Terms, PlanLog)> {
    let (outs, plans) = run_sequence(s, frames, motion, &seq.intrinsics, plans)?;
    let mut c = Collect::default();
    for (t, o) in outs.iter().enumerate() {
        c.frame(s, seq, t, o.logits, o.z_hat)?;
        if let Some(m) = &o.motion {
            c.motion(s, seq, t, m.translation, m.rotation)?;
        }
    }
    Ok((c.finish(s)?, plans))
}

/// Unfiltered multi-task losses: every frame on its own, motion from each consecutive pair.
pub fn baseline_terms(s: &mut Session, seq: &SequenceSample, frames: &[Tensor]) -> Result<Terms> {
    let mut c = Collect::default();
    let mut prev: Option<Var> = None;
    for (t, x) in frames.iter().enumerate() {
        let (r, logits, z) = forward_single(s, x)?;
        c.frame(s, seq, t, logits, z)?;
        if let Some(p) = prev {
            let est = motion_single(s, p, r)?;
            c.motion(s, seq, t, est.translation, est.rotation)?;
        }
        prev = Some(r);
    }
    c.finish(s)
}

/// Motion-only unroll: encoder, motion decoder, GRU and head.
pub fn motion_terms(s: &mut Session, seq: &SequenceSample, frames: &[Tensor]) -> Result<Terms> {
    let mut c = Collect::default();
    let mut h = s.input(Tensor::zeros(&[s.config().motion_state]));
    let mut prev: Option<Var> = None;
    for (t, x) in frames.iter().enumerate() {
        let xv = s.input(x.clone());
        let r = encode(s, xv)?;
        if let Some(p) = prev {
            let m = motion_features(s, p, r, None)?;
            let (h_next, est) = motion_step(s, h, m)?;
            h = h_next;
            c.motion(s, seq, t, est.translation, est.rotation)?;
        }
        prev = Some(r);
    }
    c.finish(s)
}

/// Scalar objective of a stage from its terms.
pub fn stage_objective(s: &mut Session, stage: Stage, terms: &Terms) -> Result<Var> {
    let named = terms.named();
    if named.is_empty() {
        return invalid("no loss terms");
    }
    if stage == Stage::MotionPretrain {
        let (t, r) = match (terms.trans, terms.rot) {
            (Some(t), Some(r)) => (t, r),
            _ => return invalid("motion pre-training needs at least two frames"),
        };
        return Ok(s.tape.add(t, r)?);
    }
    let mut losses = Vec::new();
    let mut weights = Vec::new();
    for (name, v) in named {
        losses.push(v);
        weights.push(s.param(&format!("multitask/s_{name}"))?);
    }
    multitask_total(&mut s.tape, &losses, &weights)
}

// ---- data preparation ---------------------------------------------------------

fn is_static(seq: &SequenceSample) -> bool {
    seq.poses.windows(2).all(|w| w[0].to_rows() == w[1].to_rows())
}

/// Frames used for training after truncation and corruption.
pub fn prepare_frames(seq: &SequenceSample, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let n = cfg.sequence_length.unwrap_or(seq.len()).min(seq.len());
    let mut frames: Vec<Tensor> = seq.frames[..n].to_vec();
    if cfg.corruption == Corruption::None || !rng.random_bool(cfg.corruption_probability) {
        return Ok(frames);
    }
    match cfg.corruption {
        Corruption::None => {}
        Corruption::StaticOcclusion => {
            for f in frames.iter_mut() {
                *f = occlude_half(f, OCCLUSION_BLOCK, rng)?;
            }
        }
        Corruption::TailOutage => {
            let start = n.saturating_sub(cfg.outage_frames).max(1);
            for f in frames[start..].iter_mut() {
                *f = noise_frame(rng, f.shape());
            }
        }
    }
    Ok(frames)
}

fn truncated(seq: &SequenceSample, n: usize) -> SequenceSample {
    let n = n.min(seq.len());
    SequenceSample {
        frames: seq.frames[..n].to_vec(),
        depths: seq.depths[..n].to_vec(),
        labels: seq.labels[..n].to_vec(),
        poses: seq.poses[..n].to_vec(),
        intrinsics: seq.intrinsics,
        class_count: seq.class_count,
        seed: seq.seed,
    }
}

fn check_data(stage: Stage, data: &[SequenceSample], cfg: &TrainConfig, store: &ParameterStore) -> Result<()> {
    if data.is_empty() {
        return invalid("no training sequences");
    }
    let net = &store.config;
    for seq in data {
        let k = &seq.intrinsics;
        if k.width != net.image_width || k.height != net.image_height || seq.class_count != net.class_count {
            return invalid(format!(
                "sequence {} is {}x{} with {} classes; network expects {}x{} with {}",
                seq.seed, k.width, k.height, seq.class_count, net.image_width, net.image_height, net.class_count
            ));
        }
        let n = cfg.sequence_length.unwrap_or(seq.len()).min(seq.len());
        if stage != Stage::UpdatePretrain && n < 2 {
            return invalid(format!("stage {} needs sequences of at least two frames", stage.name()));
        }
    }
    if stage == Stage::UpdatePretrain && !data.iter().all(is_static) {
        return invalid("update pre-training requires static sequences (one camera pose per sequence)");
    }
    Ok(())
}

// ---- training loop ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub steps: u64,
    pub objective: f64,
    /// Mean of each unweighted loss component over the epoch.
    pub components: BTreeMap<String, f64>,
    /// Learned multi-task log-variances at the end of the epoch.
    pub weights: BTreeMap<String, f64>,
}

/// Runs one training stage and returns the updated store with per-epoch metrics.
pub fn train_stage(
    data: &[SequenceSample],
    mut store: ParameterStore,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<(ParameterStore, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let stage = cfg.stage;
    let data = &data[..cfg.max_sequences.unwrap_or(data.len()).min(data.len())];
    check_data(stage, data, cfg, &store)?;
    let trainable = stage.trainable();
    let mut opt = OptimizerState::default();
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64)));
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut objective = 0.0;

        for chunk in order.chunks(cfg.accumulation) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut observations = Vec::new();
            for &idx in chunk {
                let sample_seed = derive_seed(cfg.seed, 2 + epoch as u64, idx as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                let seq = match cfg.sequence_length {
                    Some(n) => truncated(&data[idx], n),
                    None => data[idx].clone(),
                };
                let frames = prepare_frames(&seq, cfg, &mut rng)?;
                let mut s = Session::new(&store, Mode::Train, trainable.clone(), sample_seed);
                let terms = match stage {
                    Stage::Baseline => baseline_terms(&mut s, &seq, &frames)?,
                    Stage::MotionPretrain => motion_terms(&mut s, &seq, &frames)?,
                    Stage::UpdatePretrain => {
                        let mut t = filtered_terms(&mut s, &seq, &frames, &MotionMode::Identity, PlanLog::default())?.0;
                        t.trans = None;
                        t.rot = None;
                        t
                    }
                    Stage::Finetune => filtered_terms(&mut s, &seq, &frames, &MotionMode::Estimated, PlanLog::default())?.0,
                };
                let total = stage_objective(&mut s, stage, &terms)?;
                objective += s.tape.value(total).item()?;
                for (name, v) in terms.named() {
                    *sums.entry(name.to_string()).or_insert(0.0) += s.tape.value(v).item()?;
                }
                s.tape.backward(total)?;
                for (name, g) in s.gradients() {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
                observations.append(&mut s.bn_observations);
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.values_mut() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(&mut store, &grads, &mut opt, cfg)?;
            apply_bn_observations(&mut store, &observations)?;
        }

        let n = data.len() as f64;
        let weights = store
            .in_group(groups::MULTITASK)
            .map(|(k, p)| (k.trim_start_matches(groups::MULTITASK).to_string(), p.value.data()[0]))
            .collect();
        let m = EpochMetrics {
            stage: stage.name().to_string(),
            epoch: epoch + 1,
            steps: opt.step,
            objective: objective / n,
            components: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            weights,
        };
        progress(&m);
        log.push(m);
    }
    Ok((store, log))
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|source| Error::Json { path: path.display().to_string(), source })?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

// ---- gradient checking ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelGradCheck {
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `n` random `(parameter, element)` pairs, tensors chosen uniformly.
pub fn sample_entries(store: &ParameterStore, n: usize, seed: u64) -> Vec<(String, usize)> {
    let names: Vec<&String> = store.names().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let name = names[rng.random_range(0..names.len())];
            let len = store.params[name].value.len();
            (name.clone(), rng.random_range(0..len))
        })
        .collect()
}

/// Central differences of a model loss against its tape gradients.
///
/// `f` builds the loss in a session; its warp plans are recorded on the analytic
/// pass and replayed on the perturbed ones. Entries whose perturbed passes take
/// a different branch at any kink are skipped.
pub fn grad_check<F>(store: &ParameterStore, entries: &[(String, usize)], tolerance: f64, mode: Mode, f: F) -> Result<ModelGradCheck>
where
    F: Fn(&mut Session, PlanLog) -> Result<(Var, PlanLog)>,
{
    let seed = 7;
    let mut s = Session::new(store, mode, Trainable::All, seed);
    let (loss, plans) = f(&mut s, PlanLog::default())?;
    let signature = s.tape.branch_signature();
    s.tape.backward(loss)?;
    let grads = s.gradients();
    drop(s);

    let eval = |st: &ParameterStore| -> Result<(f64, u64)> {
        let mut s = Session::new(st, mode, Trainable::Nothing, seed);
        s.set_bn_training(Trainable::All);
        let (loss, _) = f(&mut s, PlanLog::replaying(plans.recorded.clone()))?;
        Ok((s.tape.value(loss).item()?, s.tape.branch_signature()))
    };

    let mut report = ModelGradCheck { checked: 0, skipped: 0, max_rel_error: 0.0, worst: None, tolerance, passed: true };
    let mut work = store.clone();
    for (name, idx) in entries {
        let x0 = store.get(name)?.value.data()[*idx];
        work.params.get_mut(name).unwrap().value.data_mut()[*idx] = x0 + DEFAULT_STEP;
        let (fp, sp) = eval(&work)?;
        work.params.get_mut(name).unwrap().value.data_mut()[*idx] = x0 - DEFAULT_STEP;
        let (fm, sm) = eval(&work)?;
        work.params.get_mut(name).unwrap().value.data_mut()[*idx] = x0;
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * DEFAULT_STEP);
        let analytic = grads.get(name).map(|g| g[*idx]).unwrap_or(0.0);
        let err = relative_error(analytic, numeric, DEFAULT_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), *idx));
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error <= tolerance;
    Ok(report)
}
