use std::collections::BTreeMap;

use fmfilter::filter::{MotionMode, PlanLog};
use fmfilter::networks::{groups, Mode, NetConfig, ParameterStore};
use fmfilter::synthdata::{generate_sequence, generate_static_sequence, SequenceConfig, SequenceSample};
use fmfilter::trainer::*;
use fmfilter_tensor::{Function, Tensor};

const ALL_GROUPS: [&str; 9] = [
    groups::ENCODER,
    groups::SEMANTIC,
    groups::DEPTH,
    groups::MOTION,
    groups::MOTION_GRU,
    groups::MOTION_HEAD,
    groups::FUSION,
    groups::GATE,
    groups::MULTITASK,
];

fn small_cfg(length: usize) -> SequenceConfig {
    SequenceConfig { width: 16, height: 16, length, class_count: 3, ..Default::default() }
}

fn dynamic(n: usize, length: usize) -> Vec<SequenceSample> {
    (0..n).map(|i| generate_sequence(100 + i as u64, &small_cfg(length)).unwrap()).collect()
}

fn still(n: usize, length: usize) -> Vec<SequenceSample> {
    (0..n).map(|i| generate_static_sequence(200 + i as u64, &small_cfg(length)).unwrap()).collect()
}

fn tiny() -> ParameterStore {
    ParameterStore::init(&NetConfig::tiny(16, 3), 3).unwrap()
}

fn one_param(decay: bool, value: Vec<f64>) -> ParameterStore {
    let mut st = ParameterStore::empty(NetConfig::tiny(16, 3));
    st.insert("w", Tensor::from_vec(value), decay).unwrap();
    st
}

#[test]
fn adam_with_zero_gradient_only_decays() {
    let cfg = TrainConfig { learning_rate: 0.01, weight_decay: 0.5, ..Default::default() };
    let grads = BTreeMap::from([("w".to_string(), vec![0.0, 0.0])]);
    for decay in [true, false] {
        let mut st = one_param(decay, vec![2.0, -4.0]);
        let mut opt = OptimizerState::default();
        adam_step(&mut st, &grads, &mut opt, &cfg).unwrap();
        let f = if decay { 1.0 - 0.01 * 0.5 } else { 1.0 };
        assert_eq!(st.get("w").unwrap().value.data(), &[2.0 * f, -4.0 * f]);
        assert_eq!(opt.step, 1);
    }
}

#[test]
fn adam_steps_approach_the_learning_rate_under_constant_gradient() {
    let cfg = TrainConfig { learning_rate: 0.001, weight_decay: 0.0, ..Default::default() };
    let mut st = one_param(true, vec![0.0, 0.0]);
    let mut opt = OptimizerState::default();
    let grads = BTreeMap::from([("w".to_string(), vec![3.0, -0.02])]);
    let mut prev = vec![0.0, 0.0];
    for step in 1..=500u64 {
        adam_step(&mut st, &grads, &mut opt, &cfg).unwrap();
        assert_eq!(opt.step, step);
        let now = st.get("w").unwrap().value.data().to_vec();
        let du = [now[0] - prev[0], now[1] - prev[1]];
        assert!((du[0] + 0.001).abs() < 1e-8, "step {step}: {}", du[0]);
        assert!((du[1] - 0.001).abs() < 1e-6, "step {step}: {}", du[1]);
        prev = now;
    }
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let cfg = TrainConfig::default();
    let mut st = one_param(true, vec![1.0]);
    let mut opt = OptimizerState::default();
    let unknown = BTreeMap::from([("v".to_string(), vec![1.0])]);
    assert!(adam_step(&mut st, &unknown, &mut opt, &cfg).is_err());
    let long = BTreeMap::from([("w".to_string(), vec![1.0, 2.0])]);
    assert!(adam_step(&mut st, &long, &mut opt, &cfg).is_err());
}

#[test]
fn config_parsing_and_validation() {
    let c = TrainConfig::parse(r#"{"stage": "motion-pretrain", "epochs": 3, "corruption": "tail_outage"}"#).unwrap();
    assert_eq!(c.stage, Stage::MotionPretrain);
    assert_eq!(c.epochs, 3);
    assert_eq!(c.corruption, Corruption::TailOutage);
    assert_eq!(c.learning_rate, 1e-3);
    assert!(TrainConfig::parse(r#"{"learnign_rate": 0.1}"#).is_err());
    assert!(TrainConfig::parse(r#"{"learning_rate": -0.1}"#).is_err());
    assert!(TrainConfig::parse(r#"{"beta1": 1.0}"#).is_err());
    assert!(TrainConfig::parse(r#"{"accumulation": 0}"#).is_err());
    assert!(TrainConfig::parse(r#"{"learning_rate": 0.0}"#).is_ok());
    for s in ["baseline", "motion-pretrain", "update-pretrain", "finetune"] {
        assert_eq!(Stage::parse(s).unwrap().name(), s);
    }
    assert!(Stage::parse("pretrain").is_err());
}

fn buffers_equal(a: &ParameterStore, b: &ParameterStore, prefix: &str) -> bool {
    let pick = |s: &ParameterStore| s.buffers.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(n, b)| (n.clone(), b.clone())).collect::<Vec<_>>();
    pick(a) == pick(b)
}

fn run(stage: Stage, data: &[SequenceSample], store: ParameterStore) -> ParameterStore {
    let cfg = TrainConfig { stage, learning_rate: 0.01, accumulation: 2, ..Default::default() };
    train_stage(data, store, &cfg, |_| {}).unwrap().0
}

#[test]
fn stages_touch_exactly_their_groups() {
    let cases = [
        (Stage::Baseline, dynamic(4, 3)),
        (Stage::MotionPretrain, dynamic(4, 3)),
        (Stage::UpdatePretrain, still(4, 3)),
        (Stage::Finetune, dynamic(4, 3)),
    ];
    for (stage, data) in cases {
        let before = tiny();
        let after = run(stage, &data, before.clone());
        let trainable = stage.trainable();
        for g in ALL_GROUPS {
            let frozen = !trainable.contains(g);
            let empty = before.in_group(g).next().is_none();
            if frozen {
                assert!(after.group_equal(&before, g), "{} changed {g}", stage.name());
                assert!(buffers_equal(&after, &before, g), "{} changed {g} statistics", stage.name());
            } else if !empty && !(stage == Stage::Baseline && g == groups::GATE) {
                assert!(!after.group_equal(&before, g), "{} left {g} untouched", stage.name());
            }
        }
    }
}

#[test]
fn stage_groups_follow_the_protocol() {
    let t = Stage::MotionPretrain.trainable();
    assert!(!t.contains("encoder/conv0/weight"));
    assert!(t.contains("motion/conv0/weight") && t.contains("motion_gru/b_u") && t.contains("motion_head/fc2/bias"));
    let u = Stage::UpdatePretrain.trainable();
    assert!(u.contains("encoder/fuse/weight") && u.contains("gate/bias"));
    for frozen in ["semantic/head/weight", "depth/conv0/weight", "motion/fc/weight"] {
        assert!(!u.contains(frozen));
    }
    assert!(!Stage::Baseline.trainable().contains("gate/w_in"));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let before = tiny();
    let cfg = TrainConfig { stage: Stage::Finetune, learning_rate: 0.0, ..Default::default() };
    let (after, log) = train_stage(&dynamic(3, 3), before.clone(), &cfg, |_| {}).unwrap();
    assert!(after.group_equal(&before, ""));
    assert_eq!(log.len(), 1);
}

#[test]
fn data_must_match_the_stage_and_network() {
    let store = tiny();
    let cfg = TrainConfig { stage: Stage::UpdatePretrain, ..Default::default() };
    assert!(train_stage(&dynamic(2, 3), store.clone(), &cfg, |_| {}).is_err());
    let wrong_size = vec![generate_sequence(0, &SequenceConfig { length: 3, ..Default::default() }).unwrap()];
    let cfg = TrainConfig { stage: Stage::Finetune, ..Default::default() };
    assert!(train_stage(&wrong_size, store.clone(), &cfg, |_| {}).is_err());
    assert!(train_stage(&[], store.clone(), &cfg, |_| {}).is_err());
    let cfg = TrainConfig { stage: Stage::MotionPretrain, sequence_length: Some(1), ..Default::default() };
    assert!(train_stage(&dynamic(2, 3), store, &cfg, |_| {}).is_err());
}

#[test]
fn training_is_reproducible() {
    let data = dynamic(4, 3);
    let cfg = TrainConfig { stage: Stage::Finetune, epochs: 2, corruption: Corruption::TailOutage, corruption_probability: 0.5, outage_frames: 1, ..Default::default() };
    let (a, la) = train_stage(&data, tiny(), &cfg, |_| {}).unwrap();
    let (b, lb) = train_stage(&data, tiny(), &cfg, |_| {}).unwrap();
    assert!(a.group_equal(&b, ""));
    assert_eq!(a.buffers, b.buffers);
    assert_eq!(la, lb);
    let (c, _) = train_stage(&data, tiny(), &TrainConfig { seed: 1, ..cfg }, |_| {}).unwrap();
    assert!(!a.group_equal(&c, ""));
}

#[test]
fn metrics_are_written_one_json_object_per_line() {
    let mut seen = Vec::new();
    let cfg = TrainConfig { stage: Stage::Baseline, epochs: 2, ..Default::default() };
    let (_, log) = train_stage(&dynamic(2, 3), tiny(), &cfg, |m| seen.push(m.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(log[1].steps, 2);
    assert_eq!(log[0].weights.len(), 5);
    assert!(log[0].components.contains_key("trans"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    write_metrics(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<EpochMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, log);
}

#[test]
fn static_toy_loss_halves() {
    let data = still(4, 3);
    let cfg = TrainConfig { stage: Stage::Finetune, learning_rate: 0.01, epochs: 80, accumulation: 1, ..Default::default() };
    let (_, log) = train_stage(&data, tiny(), &cfg, |_| {}).unwrap();
    let task = |m: &EpochMetrics| m.components["seg"] + m.components["depth_l1"];
    let (first, last) = (task(&log[0]), task(log.last().unwrap()));
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn linear_model_gradients_are_exact() {
    let store = tiny();
    let x = Tensor::from_fn(&store.get("semantic/head/weight").unwrap().value.shape().to_vec(), |i| (i as f64 * 0.37).sin());
    let entries = sample_entries(&store, 10, 1).into_iter().map(|(_, i)| ("semantic/head/weight".to_string(), i % x.len())).collect::<Vec<_>>();
    let r = grad_check(&store, &entries, 1e-9, Mode::Eval, |s, plans| {
        let w = s.param("semantic/head/weight")?;
        let y = s.tape.mul_const(w, &x)?;
        Ok((s.tape.sum(y), plans))
    })
    .unwrap();
    assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");
}

/// Squares its input but reports a gradient of `3x`.
struct WrongSquare;

impl Function for WrongSquare {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad_output).map(|(x, g)| 3.0 * x * g).collect()]
    }
}

#[test]
fn corrupted_backward_rules_are_caught() {
    let store = tiny();
    let entries: Vec<_> = (0..4).map(|i| ("semantic/head/weight".to_string(), i)).collect();
    let r = grad_check(&store, &entries, 1e-4, Mode::Eval, |s, plans| {
        let w = s.param("semantic/head/weight")?;
        let v = s.tape.value(w);
        let sq = Tensor::from_fn(v.shape(), |i| v.data()[i] * v.data()[i]);
        let y = s.tape.custom(&[w], sq, Box::new(WrongSquare));
        Ok((s.tape.sum(y), plans))
    })
    .unwrap();
    assert!(!r.passed && (r.max_rel_error - 1.0 / 3.0).abs() < 1e-4, "{r:?}");
}

#[test]
fn unrolled_filter_gradients_match_finite_differences() {
    let store = tiny();
    let seq = dynamic(1, 3).remove(0);
    let entries = sample_entries(&store, 20, 9);
    let r = grad_check(&store, &entries, 1e-4, Mode::Train, |s, plans| {
        let (terms, plans) = filtered_terms(s, &seq, &seq.frames, &MotionMode::Estimated, plans)?;
        Ok((stage_objective(s, Stage::Finetune, &terms)?, plans))
    })
    .unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked >= 15, "{r:?}");
    let _ = PlanLog::default();
}
