//! Metrics and the three evaluation experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fmfilter_tensor::{IntTensor, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::filter::{forward_single, run_sequence, MotionMode, PlanLog};
use crate::geometry::{relative_motion, rotation_error, translation_error, DepthMap, RigidTransform, WarpPlan};
use crate::networks::{argmax_labels, ParameterStore, Session};
use crate::perturb::{noise_frame, occlude_half};
use crate::synthdata::{derive_seed, SequenceSample};
use crate::trainer::OCCLUSION_BLOCK;

/// Counts with rows = ground truth and columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return invalid("confusion matrix must be square");
        }
        Ok(Self { classes: k, counts: rows.concat() })
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: &IntTensor, pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return invalid(format!("{} labels vs {} predictions", gt.len(), pred.len()));
        }
        if let Some((g, p)) = gt.data().iter().zip(pred).find(|(g, p)| **g < 0 || **g as usize >= self.classes || **p >= self.classes) {
            return invalid(format!("class out of range: gt {g}, prediction {p}"));
        }
        for (g, p) in gt.data().iter().zip(pred) {
            self.counts[*g as usize * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Mean over ground-truth-present classes of `M[c,c] / (row_c + col_c − M[c,c])`.
pub fn mean_iou(m: &ConfusionMatrix) -> Result<f64> {
    let k = m.classes;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let row: u64 = (0..k).map(|j| m.get(c, j)).sum();
        if row == 0 {
            continue;
        }
        let col: u64 = (0..k).map(|i| m.get(i, c)).sum();
        let tp = m.get(c, c);
        sum += tp as f64 / (row + col - tp) as f64;
        present += 1;
    }
    if present == 0 {
        return invalid("no ground-truth pixels in the confusion matrix");
    }
    Ok(sum / present as f64)
}

// ---- reports -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub sequences: usize,
    pub config: serde_json::Value,
    /// Column labels, one per frame ("1", "2", …) or pair ("1-2", …).
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&[f64]> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.values.as_slice())
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{} ({} sequences, seed {})", self.experiment, self.sequences, self.seed);
        let _ = write!(out, "{:<label_w$}", "");
        for c in &self.columns {
            let _ = write!(out, " {c:>10}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.name);
            for v in &r.values {
                let _ = write!(out, " {v:>10.4}");
            }
            out.push('\n');
        }
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}: {v:.6}");
        }
        out
    }
}

fn frame_columns(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}

fn ious(ms: &[ConfusionMatrix]) -> Result<Vec<f64>> {
    ms.iter().map(mean_iou).collect()
}

fn check_store(store: &ParameterStore, data: &[SequenceSample]) -> Result<()> {
    if data.is_empty() {
        return invalid("no evaluation sequences");
    }
    let c = &store.config;
    for s in data {
        if s.intrinsics.width != c.image_width || s.intrinsics.height != c.image_height || s.class_count != c.class_count {
            return invalid("evaluation data does not match the checkpoint's network");
        }
    }
    Ok(())
}

fn predict_labels(s: &Session, logits: fmfilter_tensor::Var) -> Result<Vec<usize>> {
    argmax_labels(s.tape.value(logits))
}

// ---- static integration ---------------------------------------------------------

pub const STATIC_FRAMES: usize = 4;

/// Images for one static sequence: occluded inputs and gates `i_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticArtifacts {
    pub inputs: Vec<Tensor>,
    pub gates: Vec<Tensor>,
    pub predictions: Vec<Vec<usize>>,
    pub labels: IntTensor,
}

/// The first frame of every sequence repeated four times, half of its tiles
/// replaced by noise anew in every frame, filtered with identity motion.
pub fn experiment_static(data: &[SequenceSample], store: &ParameterStore, seed: u64) -> Result<(ExperimentReport, StaticArtifacts)> {
    check_store(store, data)?;
    let k = store.config.class_count;
    let mut filtered = vec![ConfusionMatrix::new(k); STATIC_FRAMES];
    let mut single = vec![ConfusionMatrix::new(k); STATIC_FRAMES];
    let mut artifacts = None;
    for (n, seq) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 30, n as u64));
        let frames: Vec<Tensor> =
            (0..STATIC_FRAMES).map(|_| occlude_half(&seq.frames[0], OCCLUSION_BLOCK, &mut rng)).collect::<Result<_>>()?;
        let mut s = Session::eval(store);
        let (outs, _) = run_sequence(&mut s, &frames, &MotionMode::Identity, &seq.intrinsics, PlanLog::default())?;
        let mut preds = Vec::new();
        for (t, o) in outs.iter().enumerate() {
            let p = predict_labels(&s, o.logits)?;
            filtered[t].add(&seq.labels[0], &p)?;
            preds.push(p);
        }
        for (t, x) in frames.iter().enumerate() {
            let mut s1 = Session::eval(store);
            let (_, logits, _) = forward_single(&mut s1, x)?;
            single[t].add(&seq.labels[0], &predict_labels(&s1, logits)?)?;
        }
        if artifacts.is_none() {
            artifacts = Some(StaticArtifacts {
                gates: outs.iter().map(|o| s.tape.value(o.gate).clone()).collect(),
                inputs: frames,
                predictions: preds,
                labels: seq.labels[0].clone(),
            });
        }
    }
    let f = ious(&filtered)?;
    let u = ious(&single)?;
    let mut summary = BTreeMap::new();
    summary.insert("gain_frame4_over_frame1".into(), f[STATIC_FRAMES - 1] - f[0]);
    let min_step = f.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    summary.insert("min_consecutive_change".into(), min_step);
    let report = ExperimentReport {
        experiment: "static".into(),
        seed,
        sequences: data.len(),
        config: serde_json::json!({ "frames": STATIC_FRAMES, "occlusion_block": OCCLUSION_BLOCK, "occluded_fraction": 0.5, "motion": "identity" }),
        columns: frame_columns(STATIC_FRAMES),
        rows: vec![
            ReportRow { name: "mean_iou_filtered".into(), values: f },
            ReportRow { name: "mean_iou_single_frame".into(), values: u },
        ],
        summary,
    };
    Ok((report, artifacts.unwrap()))
}

// ---- motion integration -----------------------------------------------------------

pub const MOTION_LENGTH: usize = 10;
pub const MOTION_BLANKED: usize = 5;

/// Successive projections of frame one for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionArtifacts {
    pub frames: Vec<Tensor>,
    /// Frame one warped to frame t with predicted motion (index t−1; the first is frame one).
    pub predicted: Vec<Tensor>,
    pub ground_truth: Vec<Tensor>,
}

/// Warps `x` (`[C,H,W]`) from the first frame to each later frame using cumulative transforms.
pub fn successive_projections(x: &Tensor, depth: &Tensor, steps: &[RigidTransform], seq: &SequenceSample) -> Result<Vec<(Tensor, Tensor)>> {
    let d = DepthMap::new(depth.clone())?;
    let mut acc = RigidTransform::identity();
    let mut out = vec![(x.clone(), Tensor::ones(&[1, d.height(), d.width()]))];
    for tau in steps {
        acc = tau.compose(&acc);
        let plan = WarpPlan::build(&d, &acc, &seq.intrinsics)?;
        out.push((plan.apply(x)?, plan.validity()));
    }
    Ok(out)
}

fn labels_as_tensor(l: &IntTensor) -> Result<Tensor> {
    Ok(Tensor::new(l.shape().to_vec(), l.data().iter().map(|v| *v as f64).collect())?)
}

/// Ten-frame sequences whose last five frames are pure noise.
pub fn experiment_motion(data: &[SequenceSample], store: &ParameterStore, seed: u64) -> Result<(ExperimentReport, MotionArtifacts)> {
    check_store(store, data)?;
    if data.iter().any(|s| s.len() < MOTION_LENGTH) {
        return invalid(format!("motion experiment needs sequences of at least {MOTION_LENGTH} frames"));
    }
    let pairs = MOTION_LENGTH - 1;
    let mut dt = vec![0.0; pairs];
    let mut dr = vec![0.0; pairs];
    let mut blanked_total = 0usize;
    let mut blanked_ok = 0usize;
    let mut all_finite = true;
    let mut agree = 0usize;
    let mut valid = 0usize;
    let mut artifacts = None;
    for (n, seq) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 31, n as u64));
        let mut frames: Vec<Tensor> = seq.frames[..MOTION_LENGTH].to_vec();
        for f in frames[MOTION_LENGTH - MOTION_BLANKED..].iter_mut() {
            *f = noise_frame(&mut rng, f.shape());
        }
        let mut s = Session::eval(store);
        let (outs, _) = run_sequence(&mut s, &frames, &MotionMode::Estimated, &seq.intrinsics, PlanLog::default())?;
        let mut predicted = Vec::new();
        let mut truth = Vec::new();
        for t in 1..MOTION_LENGTH {
            let gt = relative_motion(&seq.poses[t - 1], &seq.poses[t]);
            let est = outs[t].transform;
            let (et, er) = (translation_error(&est, &gt), rotation_error(&est, &gt));
            all_finite &= et.is_finite() && er.is_finite();
            dt[t - 1] += et;
            dr[t - 1] += er;
            if t >= MOTION_LENGTH - MOTION_BLANKED {
                blanked_total += 1;
                if er < std::f64::consts::FRAC_PI_2 {
                    blanked_ok += 1;
                }
            }
            predicted.push(est);
            truth.push(gt);
        }
        // Ground-truth projections of frame one must reproduce later labels.
        let lab = labels_as_tensor(&seq.labels[0])?;
        for (t, (warped, validity)) in successive_projections(&lab, &seq.depths[0], &truth, seq)?.iter().enumerate().skip(1) {
            for (i, v) in validity.data().iter().enumerate() {
                if *v > 0.0 {
                    valid += 1;
                    if warped.data()[i] as i32 == seq.labels[t].data()[i] {
                        agree += 1;
                    }
                }
            }
        }
        if artifacts.is_none() {
            let p = successive_projections(&seq.frames[0], &seq.depths[0], &predicted, seq)?;
            let g = successive_projections(&seq.frames[0], &seq.depths[0], &truth, seq)?;
            artifacts = Some(MotionArtifacts {
                frames,
                predicted: p.into_iter().map(|x| x.0).collect(),
                ground_truth: g.into_iter().map(|x| x.0).collect(),
            });
        }
    }
    let n = data.len() as f64;
    dt.iter_mut().for_each(|v| *v /= n);
    dr.iter_mut().for_each(|v| *v /= n);
    let mut summary = BTreeMap::new();
    summary.insert("all_finite".into(), if all_finite { 1.0 } else { 0.0 });
    summary.insert("blanked_rotation_below_half_pi".into(), blanked_ok as f64 / blanked_total as f64);
    summary.insert("gt_projection_label_agreement".into(), agree as f64 / valid.max(1) as f64);
    let report = ExperimentReport {
        experiment: "motion".into(),
        seed,
        sequences: data.len(),
        config: serde_json::json!({ "length": MOTION_LENGTH, "blanked_frames": MOTION_BLANKED }),
        columns: (1..MOTION_LENGTH).map(|i| format!("{}-{}", i, i + 1)).collect(),
        rows: vec![ReportRow { name: "delta_t".into(), values: dt }, ReportRow { name: "delta_r".into(), values: dr }],
        summary,
    };
    Ok((report, artifacts.unwrap()))
}

// ---- filtered vs unfiltered ---------------------------------------------------------

/// Per-frame Mean IoU of the filter against the single-frame baseline model.
pub fn experiment_compare(data: &[SequenceSample], filtered: &ParameterStore, baseline: &ParameterStore, seed: u64) -> Result<ExperimentReport> {
    check_store(filtered, data)?;
    check_store(baseline, data)?;
    let len = data.iter().map(|s| s.len()).min().unwrap();
    let k = filtered.config.class_count;
    let mut fm = vec![ConfusionMatrix::new(k); len];
    let mut bm = vec![ConfusionMatrix::new(k); len];
    for seq in data {
        let frames = &seq.frames[..len];
        let mut s = Session::eval(filtered);
        let (outs, _) = run_sequence(&mut s, frames, &MotionMode::Estimated, &seq.intrinsics, PlanLog::default())?;
        for (t, o) in outs.iter().enumerate() {
            fm[t].add(&seq.labels[t], &predict_labels(&s, o.logits)?)?;
        }
        for (t, x) in frames.iter().enumerate() {
            let mut s = Session::eval(baseline);
            let (_, logits, _) = forward_single(&mut s, x)?;
            bm[t].add(&seq.labels[t], &predict_labels(&s, logits)?)?;
        }
    }
    let f = ious(&fm)?;
    let b = ious(&bm)?;
    let mut summary = BTreeMap::new();
    if len >= 2 {
        let mean = |v: &[f64]| v[1..].iter().sum::<f64>() / (v.len() - 1) as f64;
        summary.insert("filtered_mean_after_first".into(), mean(&f));
        summary.insert("baseline_mean_after_first".into(), mean(&b));
        summary.insert("gain_after_first".into(), mean(&f) - mean(&b));
    }
    summary.insert("frame1_gap".into(), f[0] - b[0]);
    Ok(ExperimentReport {
        experiment: "compare".into(),
        seed,
        sequences: data.len(),
        config: serde_json::json!({ "length": len }),
        columns: frame_columns(len),
        rows: vec![ReportRow { name: "filtered".into(), values: f }, ReportRow { name: "baseline".into(), values: b }],
        summary,
    })
}
