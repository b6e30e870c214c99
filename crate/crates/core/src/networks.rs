//! Multi-task backbone: encoder with pyramid pooling plus semantic, depth and motion decoders.
//!
//! Forward passes record onto the [`Session`] tape. Parameters live in a
//! [`ParameterStore`] keyed by `group/layer/name`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use fmfilter_tensor::io::{read_file, write_f64};
use fmfilter_tensor::{BatchNormMode, BatchStats, RunningStats, Tape, Tensor, Var};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::write_json;
use crate::error::{format_err, invalid, Error, Result};

pub const DEPTH_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub psp_kernels: Vec<usize>,
    pub psp_features: usize,
    /// Channel count `C` of the filtered representation.
    pub feature_channels: usize,
    pub semantic_width: usize,
    pub semantic_head_kernel: usize,
    pub class_count: usize,
    pub depth_width: usize,
    pub motion_widths: Vec<usize>,
    pub motion_features: usize,
    pub motion_state: usize,
    pub motion_head_width: usize,
    pub dropout: f64,
    pub acceleration_fusion: bool,
    /// Spatial batchnorm layers normalize by the statistics of the current
    /// sample outside training as well; running statistics are still kept.
    #[serde(default = "default_true")]
    pub per_sample_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            in_channels: 3,
            encoder_widths: vec![16, 32, 32],
            encoder_strides: vec![2, 2, 1],
            psp_kernels: vec![8, 4, 2],
            psp_features: 32,
            feature_channels: 32,
            semantic_width: 32,
            semantic_head_kernel: 3,
            class_count: 6,
            depth_width: 64,
            motion_widths: vec![64, 128, 128],
            motion_features: 128,
            motion_state: 128,
            motion_head_width: 128,
            dropout: 0.1,
            acceleration_fusion: false,
            per_sample_norm: true,
        }
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

impl NetConfig {
    /// A narrow network for gradient checks and fast tests.
    pub fn tiny(size: usize, class_count: usize) -> Self {
        Self {
            image_height: size,
            image_width: size,
            encoder_widths: vec![3, 4],
            encoder_strides: vec![2, 2],
            psp_kernels: vec![size / 4, size / 8],
            psp_features: 2,
            feature_channels: 4,
            semantic_width: 3,
            class_count,
            depth_width: 3,
            motion_widths: vec![4, 4],
            motion_features: 5,
            motion_state: 4,
            motion_head_width: 4,
            ..Self::default()
        }
    }

    pub fn downsample(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let f = self.downsample();
        (self.image_height / f, self.image_width / f)
    }

    /// Spatial size of the last motion convolution.
    pub fn motion_grid(&self) -> (usize, usize) {
        let (mut h, mut w) = self.feature_size();
        for _ in &self.motion_widths {
            h = conv_out(h, 2);
            w = conv_out(w, 2);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_height,
            self.image_width,
            self.in_channels,
            self.psp_features,
            self.feature_channels,
            self.semantic_width,
            self.class_count,
            self.depth_width,
            self.motion_features,
            self.motion_state,
            self.motion_head_width,
        ];
        if positive.contains(&0) || self.encoder_widths.contains(&0) || self.motion_widths.contains(&0) {
            return invalid("network widths must be positive");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_strides.len() {
            return invalid("encoder widths and strides must be non-empty and of equal length");
        }
        if self.encoder_strides.iter().any(|s| *s == 0 || *s > 2) {
            return invalid("encoder strides must be 1 or 2");
        }
        let f = self.downsample();
        if self.image_height % f != 0 || self.image_width % f != 0 {
            return invalid(format!("{}x{} is not divisible by {f}", self.image_height, self.image_width));
        }
        let (h, w) = self.feature_size();
        if h < 4 || w < 4 {
            return invalid(format!("encoder output {h}x{w} is smaller than 4x4"));
        }
        if self.psp_kernels.iter().any(|k| *k == 0 || h % k != 0 || w % k != 0) {
            return invalid(format!("pyramid kernels {:?} must divide {h}x{w}", self.psp_kernels));
        }
        if self.semantic_head_kernel % 2 == 0 {
            return invalid("semantic head kernel must be odd");
        }
        if self.motion_widths.is_empty() {
            return invalid("motion decoder needs at least one convolution");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Subject to weight decay (weights only, not biases or normalization).
    pub decay: bool,
}

/// How a batchnorm layer obtains its statistics in train mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnKind {
    /// Per-sample spatial statistics in training, running statistics in evaluation.
    Spatial,
    /// Running statistics in both modes; training only refreshes them.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub config: NetConfig,
    pub params: BTreeMap<String, Param>,
    pub buffers: BTreeMap<String, RunningStats>,
}

/// Parameter groups, by name prefix.
pub mod groups {
    pub const ENCODER: &str = "encoder/";
    pub const SEMANTIC: &str = "semantic/";
    pub const DEPTH: &str = "depth/";
    pub const MOTION: &str = "motion/";
    pub const MOTION_GRU: &str = "motion_gru/";
    pub const MOTION_HEAD: &str = "motion_head/";
    pub const GATE: &str = "gate/";
    pub const FUSION: &str = "fusion/";
    pub const MULTITASK: &str = "multitask/";
    pub const ALL: [&str; 9] = [ENCODER, SEMANTIC, DEPTH, MOTION, MOTION_GRU, MOTION_HEAD, GATE, FUSION, MULTITASK];
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = Normal::new(0.0, std).unwrap();
        Tensor::from_fn(shape, |_| n.sample(&mut self.rng))
    }
}

impl ParameterStore {
    pub fn empty(config: NetConfig) -> Self {
        Self { config, params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor, decay: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return invalid(format!("parameter {name} registered twice"));
        }
        self.params.insert(name.to_string(), Param { value, decay });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&RunningStats> {
        self.buffers.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown batchnorm buffer {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn in_group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Param)> + 'a {
        self.params.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    fn conv(&mut self, init: &mut Init, name: &str, cout: usize, cin: usize, k: usize, bias: bool) -> Result<()> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.insert(&format!("{name}/weight"), init.normal(&[cout, cin, k, k], std), true)?;
        if bias {
            self.insert(&format!("{name}/bias"), Tensor::zeros(&[cout]), false)?;
        }
        Ok(())
    }

    fn linear(&mut self, init: &mut Init, name: &str, out: usize, inp: usize, std: f64, bias: bool) -> Result<()> {
        self.insert(&format!("{name}/weight"), init.normal(&[out, inp], std), true)?;
        if bias {
            self.insert(&format!("{name}/bias"), Tensor::zeros(&[out]), false)?;
        }
        Ok(())
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.insert(&format!("{name}/gamma"), Tensor::ones(&[c]), false)?;
        self.insert(&format!("{name}/beta"), Tensor::zeros(&[c]), false)?;
        self.buffers.insert(name.to_string(), RunningStats::new(c));
        Ok(())
    }

    /// He-initialized parameters for every layer of the model.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = Self::empty(config.clone());
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let c = config.feature_channels;

        let mut cin = config.in_channels;
        for (i, w) in config.encoder_widths.iter().enumerate() {
            s.conv(&mut init, &format!("encoder/conv{i}"), *w, cin, 3, false)?;
            s.bn(&format!("encoder/conv{i}/bn"), *w)?;
            cin = *w;
        }
        let trunk = cin;
        for (i, _) in config.psp_kernels.iter().enumerate() {
            s.conv(&mut init, &format!("encoder/psp{i}"), config.psp_features, trunk, 1, false)?;
            s.bn(&format!("encoder/psp{i}/bn"), config.psp_features)?;
        }
        let fused = trunk + config.psp_kernels.len() * config.psp_features;
        s.conv(&mut init, "encoder/fuse", c, fused, 1, false)?;
        s.bn("encoder/fuse/bn", c)?;

        s.conv(&mut init, "semantic/conv", config.semantic_width, c, 3, false)?;
        s.bn("semantic/conv/bn", config.semantic_width)?;
        s.conv(&mut init, "semantic/head", config.class_count, config.semantic_width, config.semantic_head_kernel, true)?;

        s.conv(&mut init, "depth/conv0", config.depth_width, c, 3, false)?;
        s.bn("depth/conv0/bn", config.depth_width)?;
        s.conv(&mut init, "depth/conv1", config.depth_width, config.depth_width, 1, false)?;
        s.bn("depth/conv1/bn", config.depth_width)?;
        s.conv(&mut init, "depth/conv2", 1, config.depth_width, 1, false)?;
        s.bn("depth/conv2/bn", 1)?;
        // Start the inverse-depth head inside the positive ReLU range.
        s.params.get_mut("depth/conv2/bn/gamma").unwrap().value = Tensor::full(&[1], 0.1);
        s.params.get_mut("depth/conv2/bn/beta").unwrap().value = Tensor::full(&[1], 0.4);

        let mut cin = 2 * c;
        for (i, w) in config.motion_widths.iter().enumerate() {
            s.conv(&mut init, &format!("motion/conv{i}"), *w, cin, 3, false)?;
            s.bn(&format!("motion/conv{i}/bn"), *w)?;
            cin = *w;
        }
        let (gh, gw) = config.motion_grid();
        let flat = cin * gh * gw;
        let mf = config.motion_features;
        s.linear(&mut init, "motion/fc", mf, flat, (2.0 / flat as f64).sqrt(), false)?;
        s.bn("motion/fc/bn", mf)?;

        if config.acceleration_fusion {
            s.linear(&mut init, "fusion/linear", mf, mf + 3, (1.0 / (mf + 3) as f64).sqrt(), true)?;
        }

        let st = config.motion_state;
        for gate in ["o", "u", "c"] {
            s.linear(&mut init, &format!("motion_gru/w_m{gate}"), st, mf, (1.0 / mf as f64).sqrt(), false)?;
            s.linear(&mut init, &format!("motion_gru/w_h{gate}"), st, st, (1.0 / st as f64).sqrt(), false)?;
            s.insert(&format!("motion_gru/b_{gate}"), Tensor::zeros(&[st]), false)?;
        }
        let hw = config.motion_head_width;
        s.linear(&mut init, "motion_head/fc1", hw, st, (2.0 / st as f64).sqrt(), false)?;
        s.bn("motion_head/fc1/bn", hw)?;
        s.linear(&mut init, "motion_head/fc2", 6, hw, 0.01, true)?;

        s.insert("gate/w_hid", init.normal(&[1, c, 3, 3], 0.01), true)?;
        s.insert("gate/w_in", init.normal(&[1, c, 3, 3], 0.01), true)?;
        s.insert("gate/bias", Tensor::zeros(&[1]), false)?;

        for name in crate::losses::TASKS {
            s.insert(&format!("multitask/s_{name}"), Tensor::zeros(&[1]), false)?;
        }
        Ok(s)
    }

    /// Bitwise comparison of every tensor whose name starts with `prefix`.
    pub fn group_equal(&self, other: &ParameterStore, prefix: &str) -> bool {
        let a: Vec<_> = self.in_group(prefix).collect();
        let b: Vec<_> = other.in_group(prefix).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, pa), (nb, pb))| {
                na == nb && pa.value.shape() == pb.value.shape() && bits_equal(pa.value.data(), pb.value.data())
            })
    }

    /// Copies all parameters and buffers whose names start with `prefix` from `other`.
    pub fn copy_group(&mut self, other: &ParameterStore, prefix: &str) -> Result<()> {
        for (name, p) in other.in_group(prefix) {
            let dst = self.params.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            if dst.value.shape() != p.value.shape() {
                return invalid(format!("shape mismatch for {name}"));
            }
            dst.value = p.value.clone();
        }
        for (name, b) in other.buffers.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.buffers.insert(name.clone(), b.clone());
        }
        Ok(())
    }
}

pub fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- checkpoints ------------------------------------------------------------

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default)]
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: NetConfig,
    pub params: BTreeMap<String, TensorEntry>,
    /// Running statistics: `<layer>/running_mean` and `<layer>/running_var`.
    pub buffers: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub buffer_momentum: BTreeMap<String, f64>,
}

fn file_name(name: &str) -> String {
    format!("{}.tnsr", name.replace('/', "."))
}

fn safe_file(file: &str) -> Result<()> {
    let ok = !file.is_empty()
        && file.ends_with(".tnsr")
        && !file.starts_with('.')
        && file.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if !ok {
        return Err(format_err("checkpoint manifest", format!("unsafe tensor file name {file:?}")));
    }
    Ok(())
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| format_err("checkpoint manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(format_err("checkpoint manifest", format!("unsupported format {}", self.format)));
        }
        self.config.validate()?;
        for e in self.params.values().chain(self.buffers.values()) {
            safe_file(&e.file)?;
            if e.dtype != "f64" || e.shape.is_empty() || e.shape.contains(&0) {
                return Err(format_err("checkpoint manifest", format!("bad entry {e:?}")));
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(store: &ParameterStore, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = BTreeMap::new();
    for (name, p) in &store.params {
        let file = file_name(name);
        write_f64(dir.join(&file), &p.value)?;
        params.insert(
            name.clone(),
            TensorEntry { shape: p.value.shape().to_vec(), dtype: "f64".into(), file, trainable: true, decay: p.decay },
        );
    }
    let mut buffers = BTreeMap::new();
    let mut buffer_momentum = BTreeMap::new();
    for (name, b) in &store.buffers {
        for (suffix, data) in [("running_mean", &b.mean), ("running_var", &b.var)] {
            let key = format!("{name}/{suffix}");
            let file = file_name(&key);
            let t = Tensor::new(vec![data.len()], data.clone())?;
            write_f64(dir.join(&file), &t)?;
            buffers.insert(key, TensorEntry { shape: vec![data.len()], dtype: "f64".into(), file, trainable: false, decay: false });
        }
        buffer_momentum.insert(name.clone(), b.momentum);
    }
    let manifest = CheckpointManifest { format: CHECKPOINT_FORMAT, config: store.config.clone(), params, buffers, buffer_momentum };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ParameterStore> {
    let text = std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let m = CheckpointManifest::parse(&text)?;
    let load = |e: &TensorEntry| -> Result<Tensor> {
        let t = read_file(dir.join(&e.file))?.into_f64()?;
        if t.shape() != e.shape.as_slice() {
            return Err(format_err("checkpoint", format!("{} has shape {:?}, manifest says {:?}", e.file, t.shape(), e.shape)));
        }
        Ok(t)
    };
    let mut store = ParameterStore::empty(m.config.clone());
    for (name, e) in &m.params {
        store.insert(name, load(e)?, e.decay)?;
    }
    for (name, momentum) in &m.buffer_momentum {
        let get = |suffix: &str| -> Result<Vec<f64>> {
            let e = m
                .buffers
                .get(&format!("{name}/{suffix}"))
                .ok_or_else(|| format_err("checkpoint manifest", format!("missing {name}/{suffix}")))?;
            Ok(load(e)?.into_data())
        };
        let (mean, var) = (get("running_mean")?, get("running_var")?);
        if mean.len() != var.len() {
            return Err(format_err("checkpoint", format!("running stats of {name} disagree in length")));
        }
        store.buffers.insert(name.clone(), RunningStats { mean, var, momentum: *momentum });
    }
    // The layout must match a freshly built model exactly.
    let reference = ParameterStore::init(&m.config, 0)?;
    let same_names = reference.params.keys().eq(store.params.keys()) && reference.buffers.keys().eq(store.buffers.keys());
    if !same_names {
        return Err(format_err("checkpoint", "parameter set does not match the configured architecture"));
    }
    for (name, p) in &reference.params {
        if store.params[name].value.shape() != p.value.shape() {
            return Err(format_err("checkpoint", format!("{name} has the wrong shape")));
        }
    }
    Ok(store)
}

// ---- sessions ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameters receive gradients in a session.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    All,
    Nothing,
    Groups(Vec<String>),
}

impl Trainable {
    pub fn groups(prefixes: &[&str]) -> Self {
        Trainable::Groups(prefixes.iter().map(|s| s.to_string()).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Groups(g) => g.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Batch statistics seen by one batchnorm layer on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation {
    pub layer: String,
    pub kind: BnKind,
    pub stats: BatchStats,
}

/// Folds observations into the running statistics, in observation order.
///
/// Spatial layers take one moving-average step per observation; running
/// layers pool all of their observations into a single step.
pub fn apply_bn_observations(store: &mut ParameterStore, obs: &[BnObservation]) -> Result<()> {
    let mut pooled: Vec<(String, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for o in obs {
        let buf = store.buffers.get_mut(&o.layer).ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {}", o.layer)))?;
        match o.kind {
            BnKind::Spatial => buf.update(&o.stats),
            BnKind::Running => {
                let idx = match pooled.iter().position(|p| p.0 == o.layer) {
                    Some(i) => i,
                    None => {
                        let c = o.stats.mean.len();
                        pooled.push((o.layer.clone(), vec![0.0; c], vec![0.0; c], 0));
                        pooled.len() - 1
                    }
                };
                let p = &mut pooled[idx];
                for ch in 0..o.stats.mean.len() {
                    p.1[ch] += o.stats.mean[ch];
                    p.2[ch] += o.stats.var[ch] + o.stats.mean[ch] * o.stats.mean[ch];
                }
                p.3 += 1;
            }
        }
    }
    for (layer, s1, s2, n) in pooled {
        let n = n as f64;
        let mean: Vec<f64> = s1.iter().map(|v| v / n).collect();
        let var = s2.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
        store.buffers.get_mut(&layer).unwrap().update(&BatchStats { mean, var });
    }
    Ok(())
}

fn channel_stats(t: &Tensor) -> BatchStats {
    let c = t.shape()[0];
    let plane = t.len() / c;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s = &t.data()[ch * plane..(ch + 1) * plane];
        let m = s.iter().fold(0.0, |a, v| a + v) / plane as f64;
        mean[ch] = m;
        var[ch] = s.iter().fold(0.0, |a, v| a + (v - m) * (v - m)) / plane as f64;
    }
    BatchStats { mean, var }
}

/// One forward graph over a parameter store.
pub struct Session<'a> {
    pub tape: Tape,
    pub store: &'a ParameterStore,
    pub mode: Mode,
    trainable: Trainable,
    /// Layers whose batchnorm behaves as in training; frozen layers act as in evaluation.
    bn_train: Trainable,
    vars: HashMap<String, Var>,
    pub bn_observations: Vec<BnObservation>,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParameterStore, mode: Mode, trainable: Trainable, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bn_train: trainable.clone(),
            trainable,
            vars: HashMap::new(),
            bn_observations: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval(store: &'a ParameterStore) -> Self {
        Self::new(store, Mode::Eval, Trainable::Nothing, 0)
    }

    /// Overrides which batchnorm layers use training behavior in train mode.
    pub fn set_bn_training(&mut self, layers: Trainable) {
        self.bn_train = layers;
    }

    pub fn trainable(&self) -> &Trainable {
        &self.trainable
    }

    pub fn config(&self) -> &'a NetConfig {
        &self.store.config
    }

    /// Tape node of a parameter, registered on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name)?;
        let v = if self.trainable.contains(name) {
            self.tape.leaf(p.value.clone().with_requires_grad(true))
        } else {
            self.tape.constant(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every registered trainable parameter after `backward`.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if self.trainable.contains(name) {
                if let Some(g) = self.tape.grad(*v) {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        out
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn batchnorm(&mut self, layer: &str, x: Var, kind: BnKind) -> Result<Var> {
        let gamma = self.param(&format!("{layer}/gamma"))?;
        let beta = self.param(&format!("{layer}/beta"))?;
        let running = self.store.buffer(layer)?;
        let learning = self.mode == Mode::Train && self.bn_train.contains(layer);
        let per_sample = kind == BnKind::Spatial && (learning || self.config().per_sample_norm);
        let mode = if per_sample { BatchNormMode::Train } else { BatchNormMode::Eval };
        let (y, stats) = self.tape.batchnorm(x, gamma, beta, running, mode)?;
        if learning {
            let stats = match stats {
                Some(s) => s,
                None => channel_stats(self.tape.value(x)),
            };
            self.bn_observations.push(BnObservation { layer: layer.to_string(), kind, stats });
        }
        Ok(y)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.config().dropout;
        if self.mode != Mode::Train || p == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        Ok(self.tape.mul_const(x, &mask)?)
    }

    fn conv_bn_relu(&mut self, layer: &str, x: Var, stride: usize, kind: BnKind) -> Result<Var> {
        let k = self.param(&format!("{layer}/weight"))?;
        let pad = self.tape.shape(k)[2] / 2;
        let y = self.tape.conv2d(x, k, None, stride, pad)?;
        let y = self.batchnorm(&format!("{layer}/bn"), y, kind)?;
        Ok(self.tape.relu(y))
    }

    pub fn linear(&mut self, layer: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{layer}/weight"))?;
        let b = if bias { Some(self.param(&format!("{layer}/bias"))?) } else { None };
        Ok(self.tape.linear(x, w, b)?)
    }
}

fn expect_shape(tape: &Tape, v: Var, shape: &[usize], what: &str) -> Result<()> {
    if tape.shape(v) != shape {
        return invalid(format!("{what} must have shape {shape:?}, got {:?}", tape.shape(v)));
    }
    Ok(())
}

/// `r̃ = f_enc(x)`, shape `[C, H/4, W/4]` for the default strides.
pub fn encode(s: &mut Session, x: Var) -> Result<Var> {
    let cfg = s.config();
    expect_shape(&s.tape, x, &[cfg.in_channels, cfg.image_height, cfg.image_width], "encoder input")?;
    let mut h = x;
    for (i, stride) in cfg.encoder_strides.iter().enumerate() {
        h = s.conv_bn_relu(&format!("encoder/conv{i}"), h, *stride, BnKind::Spatial)?;
    }
    let mut branches = vec![h];
    for (i, k) in cfg.psp_kernels.iter().enumerate() {
        let p = s.tape.avg_pool(h, *k)?;
        let p = s.conv_bn_relu(&format!("encoder/psp{i}"), p, 1, BnKind::Running)?;
        branches.push(s.tape.upsample(p, *k)?);
    }
    let cat = s.tape.concat(&branches)?;
    s.conv_bn_relu("encoder/fuse", cat, 1, BnKind::Spatial)
}

/// Class logits `[K, H, W]`.
pub fn decode_semantic(s: &mut Session, r: Var) -> Result<Var> {
    let cfg = s.config();
    let (h, w) = cfg.feature_size();
    expect_shape(&s.tape, r, &[cfg.feature_channels, h, w], "semantic decoder input")?;
    let y = s.conv_bn_relu("semantic/conv", r, 1, BnKind::Spatial)?;
    let y = s.dropout(y)?;
    let y = s.tape.upsample(y, cfg.downsample())?;
    let k = s.param("semantic/head/weight")?;
    let b = s.param("semantic/head/bias")?;
    Ok(s.tape.conv2d(y, k, Some(b), 1, cfg.semantic_head_kernel / 2)?)
}

/// Inverse depth `ẑ ≥ 0`, shape `[1, h, w]`.
pub fn decode_depth(s: &mut Session, r: Var) -> Result<Var> {
    let cfg = s.config();
    let (h, w) = cfg.feature_size();
    expect_shape(&s.tape, r, &[cfg.feature_channels, h, w], "depth decoder input")?;
    let y = s.conv_bn_relu("depth/conv0", r, 1, BnKind::Spatial)?;
    let y = s.dropout(y)?;
    let y = s.conv_bn_relu("depth/conv1", y, 1, BnKind::Spatial)?;
    let y = s.dropout(y)?;
    s.conv_bn_relu("depth/conv2", y, 1, BnKind::Running)
}

/// Motion features `m̃` from a concatenated pair `[r̃_{t−1}, r̃_t]`.
pub fn decode_motion(s: &mut Session, pair: Var) -> Result<Var> {
    let cfg = s.config();
    let (h, w) = cfg.feature_size();
    expect_shape(&s.tape, pair, &[2 * cfg.feature_channels, h, w], "motion decoder input")?;
    let mut y = pair;
    for i in 0..cfg.motion_widths.len() {
        y = s.conv_bn_relu(&format!("motion/conv{i}"), y, 2, BnKind::Running)?;
    }
    let n = s.tape.value(y).len();
    let flat = s.tape.reshape(y, &[n])?;
    let f = s.linear("motion/fc", flat, false)?;
    let f = s.batchnorm("motion/fc/bn", f, BnKind::Running)?;
    Ok(s.tape.relu(f))
}

/// Concatenates acceleration and projects back to the motion width; identity without it.
pub fn fuse_acceleration(s: &mut Session, m: Var, accel: Option<[f64; 3]>) -> Result<Var> {
    let Some(a) = accel else {
        return Ok(m);
    };
    if !s.config().acceleration_fusion {
        return invalid("acceleration given but the model has no fusion layer");
    }
    let av = s.input(Tensor::from_vec(a.to_vec()));
    let n = s.tape.value(m).len();
    let m3 = s.tape.reshape(m, &[n, 1, 1])?;
    let a3 = s.tape.reshape(av, &[3, 1, 1])?;
    let cat = s.tape.concat(&[m3, a3])?;
    let cat = s.tape.reshape(cat, &[n + 3])?;
    s.linear("fusion/linear", cat, true)
}

/// Per-pixel argmax of `[K, H, W]` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<usize>> {
    let (k, h, w) = logits.dims3()?;
    let plane = h * w;
    let d = logits.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
