//! The command-line workflows, callable as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataset::{
    list_sequences, read_all, read_manifest, read_perturbation, read_sequence, seq_id, write_frames, write_json,
    write_perturbation, write_sequence, PERTURBATION_FILE,
};
use crate::error::{format_err, invalid, Result};
use crate::eval::{experiment_compare, experiment_motion, experiment_static, ExperimentReport};
use crate::filter::{run_sequence, MotionMode, PlanLog};
use crate::geometry::{relative_motion, DepthMap, WarpPlan};
use crate::image::{write_image, write_labels, ImageMode};
use crate::networks::{load_checkpoint, save_checkpoint, NetConfig, ParameterStore, Session};
use crate::perturb::{perturb_sequence, sample_spec};
use crate::synthdata::{derive_seed, generate_sequence, generate_static_sequence, MotionProfile, SequenceConfig};
use crate::trainer::{train_stage, write_metrics, EpochMetrics, Stage, TrainConfig};
use fmfilter_tensor::{IntTensor, Tensor};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format_err("size", format!("expected HxW, got {s:?}")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format_err("size", format!("bad dimension {v:?}")));
    Ok((p(h)?, p(w)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub classes: usize,
    /// Every frame shows the same view.
    pub still: bool,
}

/// Writes `<out>/train/seq_*` and `<out>/test/seq_*`.
pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SequenceConfig {
        length: a.length,
        width: a.width,
        height: a.height,
        class_count: a.classes,
        profile: MotionProfile::default(),
    };
    for (split, count, tag) in [("train", a.train, 100), ("test", a.test, 200)] {
        let root = a.out.join(split);
        std::fs::create_dir_all(&root)?;
        for i in 0..count {
            let seed = derive_seed(a.seed, tag, i as u64);
            let s = if a.still { generate_static_sequence(seed, &cfg)? } else { generate_sequence(seed, &cfg)? };
            write_sequence(&root.join(seq_id(i)), &seq_id(i), &s)?;
        }
    }
    Ok(())
}

/// Perturbs every sequence under `input` and writes it with its spec under `output`.
///
/// `output` may equal `input`, in which case only the RGB frames are rewritten.
pub fn perturb(input: &Path, output: &Path, seed: u64) -> Result<usize> {
    let dirs = list_sequences(input)?;
    for dir in &dirs {
        if read_perturbation(dir)?.is_some() {
            return invalid(format!("{} already has a {PERTURBATION_FILE}", dir.display()));
        }
    }
    let in_place = std::fs::canonicalize(input)? == std::fs::canonicalize(output).unwrap_or_else(|_| output.to_path_buf());
    for (i, dir) in dirs.iter().enumerate() {
        let mut s = read_sequence(dir)?;
        let spec = sample_spec(derive_seed(seed, 300, i as u64), s.len())?;
        s.frames = perturb_sequence(&s.frames, &spec)?;
        let target = if in_place {
            write_frames(dir, &s.frames)?;
            dir.clone()
        } else {
            let m = read_manifest(dir)?;
            let target = output.join(&m.seq_id);
            write_sequence(&target, &m.seq_id, &s)?;
            target
        };
        write_perturbation(&target, &spec)?;
    }
    Ok(dirs.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainArgs {
    pub stage: Stage,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    /// Checkpoint to start from; otherwise a fresh initialization.
    pub init: Option<PathBuf>,
    /// Network configuration for a fresh initialization.
    pub net: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| format_err("file", format!("{}: {e}", path.display())))
}

pub fn train(a: &TrainArgs, progress: impl FnMut(&EpochMetrics)) -> Result<Vec<EpochMetrics>> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.stage = a.stage;
    let dirs = list_sequences(&a.data)?;
    let first = read_manifest(&dirs[0])?;
    let store = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => {
            let net = match &a.net {
                Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| format_err("network config", e.to_string()))?,
                None => NetConfig {
                    image_height: first.height,
                    image_width: first.width,
                    class_count: first.class_count,
                    ..NetConfig::default()
                },
            };
            ParameterStore::init(&net, cfg.seed)?
        }
    };
    let data = read_all(&a.data)?;
    let (store, metrics) = train_stage(&data, store, &cfg, progress)?;
    save_checkpoint(&store, &a.out)?;
    write_metrics(&a.out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Static,
    Motion,
    Compare,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "motion" => Ok(Self::Motion),
            "compare" => Ok(Self::Compare),
            _ => invalid(format!("unknown experiment {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub experiment: Experiment,
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub baseline: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

fn labels_from(pred: &[usize], like: &IntTensor) -> Result<IntTensor> {
    Ok(IntTensor::new(like.shape().to_vec(), pred.iter().map(|v| *v as i32).collect())?)
}

/// Runs an experiment and writes `report.json`, `report.txt`, `timing.json` and images.
pub fn eval(a: &EvalArgs) -> Result<ExperimentReport> {
    let start = Instant::now();
    let data = read_all(&a.data)?;
    let store = load_checkpoint(&a.ckpt)?;
    std::fs::create_dir_all(&a.out)?;
    let images = a.out.join("images");
    let report = match a.experiment {
        Experiment::Static => {
            let (r, art) = experiment_static(&data, &store, a.seed)?;
            std::fs::create_dir_all(&images)?;
            for (t, (x, g)) in art.inputs.iter().zip(&art.gates).enumerate() {
                write_image(&images.join(format!("input_{}.ppm", t + 1)), x, ImageMode::Rgb)?;
                write_image(&images.join(format!("gate_{}.pgm", t + 1)), g, ImageMode::Gray)?;
                write_labels(&images.join(format!("prediction_{}.ppm", t + 1)), &labels_from(&art.predictions[t], &art.labels)?)?;
            }
            write_labels(&images.join("labels.ppm"), &art.labels)?;
            r
        }
        Experiment::Motion => {
            let (r, art) = experiment_motion(&data, &store, a.seed)?;
            std::fs::create_dir_all(&images)?;
            for (t, x) in art.frames.iter().enumerate() {
                write_image(&images.join(format!("frame_{:02}.ppm", t + 1)), x, ImageMode::Rgb)?;
                write_image(&images.join(format!("projected_predicted_{:02}.ppm", t + 1)), &art.predicted[t], ImageMode::Rgb)?;
                write_image(&images.join(format!("projected_truth_{:02}.ppm", t + 1)), &art.ground_truth[t], ImageMode::Rgb)?;
            }
            r
        }
        Experiment::Compare => {
            let b = a.baseline.as_ref().ok_or_else(|| crate::Error::InvalidArgument("compare needs --baseline".into()))?;
            experiment_compare(&data, &store, &load_checkpoint(b)?, a.seed)?
        }
    };
    write_json(&a.out.join(REPORT_JSON), &report)?;
    std::fs::write(a.out.join(REPORT_TEXT), report.to_text())?;
    write_json(&a.out.join("timing.json"), &serde_json::json!({ "wall_clock_seconds": start.elapsed().as_secs_f64() }))?;
    Ok(report)
}

/// Ground-truth warp of frame `frame − 1` into `frame`, plus filter gates and depth when a checkpoint is given.
pub fn warp_demo(seq_dir: &Path, out: &Path, frame: usize, ckpt: Option<&Path>) -> Result<()> {
    let s = read_sequence(seq_dir)?;
    if frame == 0 || frame >= s.len() {
        return invalid(format!("frame must be in 1..{}", s.len()));
    }
    std::fs::create_dir_all(out)?;
    let tau = relative_motion(&s.poses[frame - 1], &s.poses[frame]);
    let plan = WarpPlan::build(&DepthMap::new(s.depths[frame - 1].clone())?, &tau, &s.intrinsics)?;
    let validity = plan.validity();
    write_image(&out.join("source.ppm"), &s.frames[frame - 1], ImageMode::Rgb)?;
    write_image(&out.join("target.ppm"), &s.frames[frame], ImageMode::Rgb)?;
    write_image(&out.join("warped.ppm"), &plan.apply(&s.frames[frame - 1])?, ImageMode::Rgb)?;
    write_image(&out.join("validity.pgm"), &validity, ImageMode::Gray)?;
    let inv = Tensor::new(s.depths[frame - 1].shape().to_vec(), s.depths[frame - 1].data().iter().map(|d| 1.0 / d).collect())?;
    write_image(&out.join("inverse_depth.pgm"), &inv, ImageMode::Depth)?;
    let lab = Tensor::new(s.labels[frame - 1].shape().to_vec(), s.labels[frame - 1].data().iter().map(|v| *v as f64).collect())?;
    let warped = plan.apply(&lab)?;
    let wl = IntTensor::new(warped.shape().to_vec(), warped.data().iter().map(|v| *v as i32).collect())?;
    write_labels(&out.join("labels_source.ppm"), &s.labels[frame - 1])?;
    write_labels(&out.join("labels_target.ppm"), &s.labels[frame])?;
    write_labels(&out.join("labels_warped.ppm"), &wl)?;

    if let Some(c) = ckpt {
        let store = load_checkpoint(c)?;
        let mut sess = Session::eval(&store);
        let (outs, _) = run_sequence(&mut sess, &s.frames, &MotionMode::Estimated, &s.intrinsics, PlanLog::default())?;
        for (t, o) in outs.iter().enumerate() {
            write_image(&out.join(format!("gate_{:02}.pgm", t + 1)), sess.tape.value(o.gate), ImageMode::Gray)?;
            write_image(&out.join(format!("depth_{:02}.pgm", t + 1)), sess.tape.value(o.z_hat), ImageMode::Depth)?;
        }
    }
    Ok(())
}
