//! On-disk sequences: `<root>/<seq_id>/manifest.json` plus per-frame tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use fmfilter_tensor::io::{read_file, write_f64, write_i32};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::perturb::PerturbationSpec;
use crate::synthdata::SequenceSample;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PERTURBATION_FILE: &str = "perturbation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seq_id: String,
    pub length: usize,
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Row-major 3×4 camera-to-world matrix per frame.
    pub poses: Vec<Vec<f64>>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.length == 0 || self.poses.len() != self.length {
            return invalid(format!("{} poses for a sequence of length {}", self.poses.len(), self.length));
        }
        if self.intrinsics.width != self.width || self.intrinsics.height != self.height {
            return invalid("intrinsics disagree with the image size");
        }
        if self.class_count < 2 || self.class_count > i32::MAX as usize {
            return invalid(format!("class count {} out of range", self.class_count));
        }
        if self.seq_id.is_empty() || self.seq_id.contains(['/', '\\']) || self.seq_id.starts_with('.') {
            return invalid(format!("bad sequence id {:?}", self.seq_id));
        }
        for p in &self.poses {
            RigidTransform::from_rows(p)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| format_err("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn parse_perturbation(text: &str) -> Result<PerturbationSpec> {
    let s: PerturbationSpec = serde_json::from_str(text).map_err(|e| format_err("perturbation spec", e.to_string()))?;
    s.validate()?;
    Ok(s)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| Error::Json { path: path.display().to_string(), source })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn frame_file(kind: &str, i: usize) -> String {
    format!("{kind}_{i:03}.tnsr")
}

pub fn write_sequence(dir: &Path, seq_id: &str, s: &SequenceSample) -> Result<()> {
    s.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        seq_id: seq_id.to_string(),
        length: s.len(),
        width: s.intrinsics.width,
        height: s.intrinsics.height,
        class_count: s.class_count,
        seed: s.seed,
        intrinsics: s.intrinsics,
        poses: s.poses.iter().map(|p| p.to_rows().to_vec()).collect(),
    };
    manifest.validate()?;
    for i in 0..s.len() {
        write_f64(dir.join(frame_file("rgb", i)), &s.frames[i])?;
        write_f64(dir.join(frame_file("depth", i)), &s.depths[i])?;
        write_i32(dir.join(frame_file("label", i)), &s.labels[i])?;
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Overwrites only the RGB frames of an existing sequence directory.
pub fn write_frames(dir: &Path, frames: &[fmfilter_tensor::Tensor]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        write_f64(dir.join(frame_file("rgb", i)), f)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

pub fn read_sequence(dir: &Path) -> Result<SequenceSample> {
    let m = read_manifest(dir)?;
    let mut s = SequenceSample {
        frames: Vec::with_capacity(m.length),
        depths: Vec::with_capacity(m.length),
        labels: Vec::with_capacity(m.length),
        poses: m.poses.iter().map(|p| RigidTransform::from_rows(p)).collect::<Result<_>>()?,
        intrinsics: m.intrinsics,
        class_count: m.class_count,
        seed: m.seed,
    };
    for i in 0..m.length {
        s.frames.push(read_file(dir.join(frame_file("rgb", i)))?.into_f64()?);
        s.depths.push(read_file(dir.join(frame_file("depth", i)))?.into_f64()?);
        s.labels.push(read_file(dir.join(frame_file("label", i)))?.into_i32()?);
    }
    s.validate()?;
    Ok(s)
}

pub fn read_perturbation(dir: &Path) -> Result<Option<PerturbationSpec>> {
    let p = dir.join(PERTURBATION_FILE);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(parse_perturbation(&fs::read_to_string(p)?)?))
}

pub fn write_perturbation(dir: &Path, spec: &PerturbationSpec) -> Result<()> {
    write_json(&dir.join(PERTURBATION_FILE), spec)
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let p = entry?.path();
        if p.join(MANIFEST_FILE).is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return invalid(format!("no sequences under {}", root.display()));
    }
    Ok(out)
}

pub fn read_all(root: &Path) -> Result<Vec<SequenceSample>> {
    list_sequences(root)?.iter().map(|p| read_sequence(p)).collect()
}

pub fn seq_id(index: usize) -> String {
    format!("seq_{index:05}")
}
