//! The per-site multi-task network: a small shared-weight convolutional
//! encoder, an optional channel-selection gate between encoder and
//! decoder, a nearest-neighbor upsampling decoder, and a task head
//! (segmentation logits or range-squashed depth).
//!
//! Parameters live in a [`ParameterSet`]: an ordered map from layer name
//! to tensor, partitioned into `shared` / `personalized` / `head` groups.
//! Names are stable (`enc.0.kernel`, `dec.1.bias`, `head.0.kernel`,
//! `lcs.fc.weight`, ...) and ordering is the construction order, so two
//! sites built from the same architecture agree layer-for-layer on the
//! shared groups.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lcs::{self, GateAxis, LcsParamVars};
use crate::ops::Padding;
use crate::rng::Xoshiro256StarStar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::TextIndicator;

const CONV_KERNEL: usize = 3;

/// The task a site trains on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Segmentation { class_count: usize },
    Depth { depth_min: f64, depth_max: f64 },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Segmentation { class_count } => {
                if class_count < 2 {
                    return Err(Error::Config(format!(
                        "segmentation needs at least 2 classes, got {}",
                        class_count
                    )));
                }
            }
            TaskSpec::Depth {
                depth_min,
                depth_max,
            } => {
                if !(depth_min < depth_max) || depth_min <= 0.0 {
                    return Err(Error::Config(format!(
                        "depth range must satisfy 0 < min < max, got [{}, {}]",
                        depth_min, depth_max
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, TaskSpec::Segmentation { .. })
    }

    /// Output channels of the task head.
    pub fn head_channels(&self) -> usize {
        match *self {
            TaskSpec::Segmentation { class_count } => class_count,
            TaskSpec::Depth { .. } => 1,
        }
    }
}

/// Aggregation group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Aggregated across all sites.
    Shared,
    /// Never leaves the site (gate parameters, `lcs.*`).
    Personalized,
    /// Task head; aggregation depends on the method.
    Head,
}

/// Ordered, partitioned collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
    partition: IndexMap<String, ParamGroup>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, group: ParamGroup) {
        debug_assert!(
            group != ParamGroup::Personalized || name.starts_with("lcs."),
            "personalized parameters carry the lcs. prefix"
        );
        self.entries.insert(name.to_string(), tensor);
        self.partition.insert(name.to_string(), group);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.partition.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Names of all layers in a group, in construction order.
    pub fn names_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.partition
            .iter()
            .filter(|(_, &g)| g == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Layer-by-layer match check: names, shapes, and ordering.
    fn check_aligned(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "parameter sets differ in layer count: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((an, at), (bn, bt)) in self.entries.iter().zip(other.entries.iter()) {
            if an != bn {
                return Err(Error::Contract(format!(
                    "parameter name mismatch: {} vs {}",
                    an, bn
                )));
            }
            if at.shape() != bt.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} shape mismatch: {:?} vs {:?}",
                    an,
                    at.shape(),
                    bt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Layerwise `self - other`.
    pub fn sub(&self, other: &ParameterSet) -> Result<ParameterSet> {
        self.check_aligned(other)?;
        let mut out = ParameterSet::new();
        for (name, tensor) in &self.entries {
            let diff = tensor.sub(&other.entries[name])?;
            out.insert(name, diff, self.partition[name]);
        }
        Ok(out)
    }

    /// Layerwise `self + other`.
    pub fn add(&self, other: &ParameterSet) -> Result<ParameterSet> {
        self.check_aligned(other)?;
        let mut out = ParameterSet::new();
        for (name, tensor) in &self.entries {
            let sum = tensor.add(&other.entries[name])?;
            out.insert(name, sum, self.partition[name]);
        }
        Ok(out)
    }

    /// Bitwise equality over every layer.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bitwise_eq(bt))
    }
}

/// Architecture configuration of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input size `[h, w, 3]`.
    pub input: [usize; 3],
    /// Frames per clip; layers share weights across frames.
    pub clip_len: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub lcs_enabled: bool,
    pub gate_axis: GateAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [64, 64, 3],
            clip_len: 1,
            encoder_widths: vec![8, 16],
            encoder_strides: vec![2, 2],
            decoder_widths: vec![16, 8],
            lcs_enabled: true,
            gate_axis: GateAxis::Channel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input[2] != 3 {
            return Err(Error::Config("input must have 3 channels".into()));
        }
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one stage".into()));
        }
        if self.encoder_widths.len() != self.encoder_strides.len() {
            return Err(Error::Config(format!(
                "{} encoder widths but {} strides",
                self.encoder_widths.len(),
                self.encoder_strides.len()
            )));
        }
        if self.encoder_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("encoder strides must be 1 or 2".into()));
        }
        let down: usize = self.encoder_strides.iter().product();
        let up = 1usize << self.decoder_widths.len();
        if down != up {
            return Err(Error::Config(format!(
                "decoder upsamples x{} but encoder downsamples x{}",
                up, down
            )));
        }
        if self.input[0] % down != 0 || self.input[1] % down != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by total stride {}",
                self.input[0], self.input[1], down
            )));
        }
        Ok(())
    }

    /// Channel count of the encoder output (the gated feature map).
    pub fn feature_channels(&self) -> usize {
        *self.encoder_widths.last().expect("validated non-empty")
    }
}

fn uniform_init(rng: &mut Xoshiro256StarStar, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_in(-bound, bound)).collect(),
    )
    .expect("shape matches data")
}

/// Builds a freshly initialized parameter set for `config` and `task`.
///
/// Weights draw fan-in-scaled uniform values from a stream seeded with
/// `init_seed`; the gate layers are zero-initialized so a fresh gate is
/// 0.5 everywhere. Identical `(config, task, indicator dim, seed)`
/// quadruples produce bit-identical parameters.
pub fn build_model(
    config: &ModelConfig,
    task: &TaskSpec,
    indicator: &TextIndicator,
    init_seed: u64,
) -> Result<ParameterSet> {
    config.validate()?;
    task.validate()?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(init_seed);
    let mut params = ParameterSet::new();

    let mut in_ch = config.input[2];
    for (i, &width) in config.encoder_widths.iter().enumerate() {
        let fan_in = CONV_KERNEL * CONV_KERNEL * in_ch;
        params.insert(
            &format!("enc.{}.kernel", i),
            uniform_init(&mut rng, &[CONV_KERNEL, CONV_KERNEL, in_ch, width], fan_in),
            ParamGroup::Shared,
        );
        params.insert(
            &format!("enc.{}.bias", i),
            uniform_init(&mut rng, &[width], fan_in),
            ParamGroup::Shared,
        );
        in_ch = width;
    }
    for (j, &width) in config.decoder_widths.iter().enumerate() {
        let fan_in = CONV_KERNEL * CONV_KERNEL * in_ch;
        params.insert(
            &format!("dec.{}.kernel", j),
            uniform_init(&mut rng, &[CONV_KERNEL, CONV_KERNEL, in_ch, width], fan_in),
            ParamGroup::Shared,
        );
        params.insert(
            &format!("dec.{}.bias", j),
            uniform_init(&mut rng, &[width], fan_in),
            ParamGroup::Shared,
        );
        in_ch = width;
    }
    let head_out = task.head_channels();
    params.insert(
        "head.0.kernel",
        uniform_init(&mut rng, &[1, 1, in_ch, head_out], in_ch),
        ParamGroup::Head,
    );
    params.insert(
        "head.0.bias",
        uniform_init(&mut rng, &[head_out], in_ch),
        ParamGroup::Head,
    );

    if config.lcs_enabled {
        let c = config.feature_channels();
        let d = indicator.dim();
        match config.gate_axis {
            GateAxis::Channel => {
                params.insert("lcs.fc.weight", Tensor::zeros(&[c + d, c]), ParamGroup::Personalized);
                params.insert("lcs.fc.bias", Tensor::zeros(&[c]), ParamGroup::Personalized);
            }
            GateAxis::Spatial => {
                params.insert("lcs.proj.weight", Tensor::zeros(&[d, 1]), ParamGroup::Personalized);
                params.insert("lcs.pixel.weight", Tensor::zeros(&[2, 1]), ParamGroup::Personalized);
                params.insert("lcs.pixel.bias", Tensor::zeros(&[1]), ParamGroup::Personalized);
            }
        }
    }
    Ok(params)
}

/// Tape handles for every parameter of a model, keyed by layer name.
pub struct ParamVars {
    pub vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Registers every parameter as a leaf on the tape.
    pub fn leaves(tape: &mut Tape, params: &ParameterSet) -> Self {
        let mut vars = IndexMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(tensor.clone()));
        }
        Self { vars }
    }

    /// Registers every parameter as a constant (evaluation only).
    pub fn constants(tape: &mut Tape, params: &ParameterSet) -> Self {
        let mut vars = IndexMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.to_string(), tape.constant(tensor.clone()));
        }
        Self { vars }
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {}", name)))
    }
}

/// Records the full forward pass on a tape and returns the prediction
/// node: segmentation logits `[l,h,w,C]` or depth values `[l,h,w,1]`
/// mapped into the task's depth range.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ParamVars,
    x: Var,
    indicator: Var,
    config: &ModelConfig,
    task: &TaskSpec,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1] != config.input[0] || xs[2] != config.input[1] || xs[3] != 3 {
        return Err(Error::Dimension(format!(
            "input {:?} does not match configured size {:?}",
            xs, config.input
        )));
    }

    let mut cur = x;
    for (i, &stride) in config.encoder_strides.iter().enumerate() {
        let k = params.var(&format!("enc.{}.kernel", i))?;
        let b = params.var(&format!("enc.{}.bias", i))?;
        cur = tape.conv2d(cur, k, b, stride, Padding::Same)?;
        cur = tape.leaky_relu(cur);
    }

    if config.lcs_enabled {
        let gate_vars = match config.gate_axis {
            GateAxis::Channel => LcsParamVars::Channel {
                fc_weight: params.var("lcs.fc.weight")?,
                fc_bias: params.var("lcs.fc.bias")?,
            },
            GateAxis::Spatial => LcsParamVars::Spatial {
                proj_weight: params.var("lcs.proj.weight")?,
                pixel_weight: params.var("lcs.pixel.weight")?,
                pixel_bias: params.var("lcs.pixel.bias")?,
            },
        };
        let gate = lcs::gate_on_tape(tape, cur, indicator, &gate_vars)?;
        cur = lcs::apply_on_tape(tape, cur, gate, config.gate_axis)?;
    }

    for j in 0..config.decoder_widths.len() {
        cur = tape.upsample2x(cur)?;
        let k = params.var(&format!("dec.{}.kernel", j))?;
        let b = params.var(&format!("dec.{}.bias", j))?;
        cur = tape.conv2d(cur, k, b, 1, Padding::Same)?;
        cur = tape.leaky_relu(cur);
    }

    let hk = params.var("head.0.kernel")?;
    let hb = params.var("head.0.bias")?;
    let raw = tape.conv2d(cur, hk, hb, 1, Padding::Same)?;

    match *task {
        TaskSpec::Segmentation { .. } => Ok(raw),
        TaskSpec::Depth {
            depth_min,
            depth_max,
        } => {
            let squashed = tape.sigmoid(raw);
            let scaled = tape.scale(squashed, depth_max - depth_min);
            Ok(tape.add_const(scaled, depth_min))
        }
    }
}

/// Pure forward pass (no gradients recorded).
pub fn forward(
    params: &ParameterSet,
    x: &Tensor,
    indicator: &TextIndicator,
    config: &ModelConfig,
    task: &TaskSpec,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let ind = tape.constant(indicator.vector.clone());
    let out = forward_on_tape(&mut tape, &vars, xv, ind, config, task)?;
    Ok(tape.value(out).clone())
}

/// Records the task loss on a tape.
///
/// Segmentation: mean pixel-wise cross-entropy of the logits against
/// integer class labels `[l,h,w]`. Depth: mean absolute error of the
/// prediction `[l,h,w,1]` against a target depth map.
pub fn loss_on_tape(
    tape: &mut Tape,
    prediction: Var,
    target: &Tensor,
    task: &TaskSpec,
) -> Result<Var> {
    match *task {
        TaskSpec::Segmentation { class_count } => {
            let pred_shape = tape.value(prediction).shape().to_vec();
            if pred_shape[3] != class_count {
                return Err(Error::Dimension(format!(
                    "logits have {} channels, task has {} classes",
                    pred_shape[3], class_count
                )));
            }
            let labels = target.reshape(pred_shape[..3].to_vec())?;
            let labels = tape.constant(labels);
            tape.cross_entropy(prediction, labels)
        }
        TaskSpec::Depth { .. } => {
            let pred_shape = tape.value(prediction).shape().to_vec();
            let want: usize = pred_shape.iter().product();
            if target.len() != want {
                return Err(Error::Dimension(format!(
                    "depth target has {} values, prediction {}",
                    target.len(),
                    want
                )));
            }
            let t = tape.constant(target.reshape(pred_shape)?);
            tape.l1_loss(prediction, t)
        }
    }
}

/// Pure task loss for a prediction/target pair.
pub fn compute_loss(prediction: &Tensor, target: &Tensor, task: &TaskSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(prediction.clone());
    let loss = loss_on_tape(&mut tape, p, target, task)?;
    Ok(tape.value(loss).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{make_indicator, IndicatorKind};

    fn small_config() -> ModelConfig {
        ModelConfig {
            input: [8, 8, 3],
            clip_len: 1,
            encoder_widths: vec![3, 4],
            encoder_strides: vec![2, 2],
            decoder_widths: vec![4, 3],
            lcs_enabled: true,
            gate_axis: GateAxis::Channel,
        }
    }

    fn indicator() -> TextIndicator {
        make_indicator(IndicatorKind::Text, 0, "Dataset: T, Task: S, Label: a, b", 1, 8, 0)
            .unwrap()
    }

    fn random_input(config: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let n = config.clip_len * config.input[0] * config.input[1] * 3;
        Tensor::new(
            vec![config.clip_len, config.input[0], config.input[1], 3],
            (0..n).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_config();
        let task = TaskSpec::Segmentation { class_count: 3 };
        let a = build_model(&cfg, &task, &indicator(), 11).unwrap();
        let b = build_model(&cfg, &task, &indicator(), 11).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = build_model(&cfg, &task, &indicator(), 12).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn sites_with_same_architecture_share_layer_lists() {
        let cfg = small_config();
        let task = TaskSpec::Segmentation { class_count: 3 };
        let a = build_model(&cfg, &task, &indicator(), 1).unwrap();
        let b = build_model(&cfg, &task, &indicator(), 2).unwrap();
        let names_a: Vec<&str> = a.names().collect();
        let names_b: Vec<&str> = b.names().collect();
        assert_eq!(names_a, names_b);
        for (n, t) in a.iter() {
            assert_eq!(t.shape(), b.get(n).unwrap().shape());
        }
    }

    #[test]
    fn task_swap_changes_only_head_shapes() {
        let cfg = small_config();
        let seg = build_model(&cfg, &TaskSpec::Segmentation { class_count: 5 }, &indicator(), 1)
            .unwrap();
        let depth = build_model(
            &cfg,
            &TaskSpec::Depth {
                depth_min: 1.0,
                depth_max: 2.0,
            },
            &indicator(),
            1,
        )
        .unwrap();
        for (name, t) in seg.iter() {
            let other = depth.get(name).unwrap();
            if name.starts_with("head.") {
                continue;
            }
            assert_eq!(t.shape(), other.shape(), "layer {}", name);
        }
        assert_eq!(seg.get("head.0.kernel").unwrap().shape(), &[1, 1, 3, 5]);
        assert_eq!(depth.get("head.0.kernel").unwrap().shape(), &[1, 1, 3, 1]);
    }

    #[test]
    fn personalized_layers_carry_lcs_prefix_and_zero_init() {
        let cfg = small_config();
        let task = TaskSpec::Segmentation { class_count: 3 };
        let params = build_model(&cfg, &task, &indicator(), 7).unwrap();
        for name in params.names_in_group(ParamGroup::Personalized) {
            assert!(name.starts_with("lcs."));
            assert!(params.get(&name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fresh_gate_is_half_everywhere() {
        let cfg = small_config();
        let task = TaskSpec::Segmentation { class_count: 3 };
        let params = build_model(&cfg, &task, &indicator(), 3).unwrap();
        let ind = indicator();
        let f = random_input(&cfg, 5);
        // Encoder output channels = 4; gate via the lcs module.
        let gate = crate::lcs::lcs_gate(
            &crate::ops::tanh(&Tensor::zeros(&[1, 2, 2, 4])),
            &ind,
            &crate::lcs::LcsParams::Channel {
                fc_weight: params.get("lcs.fc.weight").unwrap().clone(),
                fc_bias: params.get("lcs.fc.bias").unwrap().clone(),
            },
        )
        .unwrap();
        assert!(gate.values.data().iter().all(|&v| v == 0.5));
        drop(f);
    }

    #[test]
    fn default_parameter_count_stays_desk_scale() {
        let cfg = ModelConfig::default();
        let task = TaskSpec::Segmentation { class_count: 11 };
        let ind = make_indicator(IndicatorKind::Text, 0, "p", 1, 64, 0).unwrap();
        let params = build_model(&cfg, &task, &ind, 0).unwrap();
        assert!(params.parameter_count() <= 250_000);
    }

    #[test]
    fn forward_preserves_spatial_size() {
        let cfg = small_config();
        let task = TaskSpec::Segmentation { class_count: 4 };
        let params = build_model(&cfg, &task, &indicator(), 2).unwrap();
        let x = random_input(&cfg, 9);
        let out = forward(&params, &x, &indicator(), &cfg, &task).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 4]);
        assert!(out.all_finite());
    }

    #[test]
    fn depth_predictions_stay_in_range() {
        let mut cfg = small_config();
        cfg.lcs_enabled = false;
        let task = TaskSpec::Depth {
            depth_min: 2.0,
            depth_max: 5.0,
        };
        let params = build_model(&cfg, &task, &indicator(), 4).unwrap();
        let x = random_input(&cfg, 10);
        let out = forward(&params, &x, &indicator(), &cfg, &task).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 1]);
        assert!(out.data().iter().all(|&v| v > 2.0 && v < 5.0));
    }

    #[test]
    fn without_lcs_forward_ignores_indicator() {
        let mut cfg = small_config();
        cfg.lcs_enabled = false;
        let task = TaskSpec::Segmentation { class_count: 3 };
        let ind_a = make_indicator(IndicatorKind::Text, 0, "prompt A", 2, 8, 0).unwrap();
        let ind_b = make_indicator(IndicatorKind::Text, 1, "very different", 2, 8, 0).unwrap();
        let params = build_model(&cfg, &task, &ind_a, 6).unwrap();
        let x = random_input(&cfg, 11);
        let out_a = forward(&params, &x, &ind_a, &cfg, &task).unwrap();
        let out_b = forward(&params, &x, &ind_b, &cfg, &task).unwrap();
        assert!(out_a.bitwise_eq(&out_b));
    }

    #[test]
    fn loss_reference_values() {
        // uniform logits over 4 classes -> ln 4
        let task = TaskSpec::Segmentation { class_count: 4 };
        let logits = Tensor::zeros(&[1, 2, 2, 4]);
        let labels = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let loss = compute_loss(&logits, &labels, &task).unwrap();
        assert!((loss.scalar_value().unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let task = TaskSpec::Depth {
            depth_min: 1.0,
            depth_max: 3.0,
        };
        let pred = Tensor::full(&[1, 2, 2, 1], 2.0);
        let target = Tensor::full(&[1, 2, 2], 2.0);
        assert_eq!(
            compute_loss(&pred, &target, &task).unwrap().scalar_value().unwrap(),
            0.0
        );
        let offset = Tensor::full(&[1, 2, 2], 4.0);
        assert_eq!(
            compute_loss(&pred, &offset, &task).unwrap().scalar_value().unwrap(),
            2.0
        );
    }

    #[test]
    fn segmentation_label_out_of_range_is_input_error() {
        let task = TaskSpec::Segmentation { class_count: 3 };
        let logits = Tensor::zeros(&[1, 1, 1, 3]);
        let labels = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        assert!(matches!(
            compute_loss(&logits, &labels, &task),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn losses_are_non_negative() {
        let cfg = small_config();
        let task = TaskSpec::Segmentation { class_count: 3 };
        let params = build_model(&cfg, &task, &indicator(), 8).unwrap();
        let x = random_input(&cfg, 12);
        let out = forward(&params, &x, &indicator(), &cfg, &task).unwrap();
        let labels = Tensor::new(vec![1, 8, 8], vec![1.0; 64]).unwrap();
        let loss = compute_loss(&out, &labels, &task).unwrap();
        assert!(loss.scalar_value().unwrap() >= 0.0);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // 8x8 input; checks one parameter from every group.
        for gate_axis in [GateAxis::Channel, GateAxis::Spatial] {
            let mut cfg = small_config();
            cfg.gate_axis = gate_axis;
            let task = TaskSpec::Segmentation { class_count: 3 };
            let ind = indicator();
            let params = build_model(&cfg, &task, &ind, 13).unwrap();
            let x = random_input(&cfg, 14);
            let mut rng = Xoshiro256StarStar::seed_from_u64(15);
            let labels = Tensor::new(
                vec![1, 8, 8],
                (0..64).map(|_| rng.below(3) as f64).collect(),
            )
            .unwrap();

            let eval = |ps: &ParameterSet| -> f64 {
                let mut tape = Tape::new();
                let vars = ParamVars::constants(&mut tape, ps);
                let xv = tape.constant(x.clone());
                let iv = tape.constant(ind.vector.clone());
                let pred = forward_on_tape(&mut tape, &vars, xv, iv, &cfg, &task).unwrap();
                let loss = loss_on_tape(&mut tape, pred, &labels, &task).unwrap();
                tape.value(loss).scalar_value().unwrap()
            };

            let mut tape = Tape::new();
            let vars = ParamVars::leaves(&mut tape, &params);
            let xv = tape.constant(x.clone());
            let iv = tape.constant(ind.vector.clone());
            let pred = forward_on_tape(&mut tape, &vars, xv, iv, &cfg, &task).unwrap();
            let loss = loss_on_tape(&mut tape, pred, &labels, &task).unwrap();
            let grads = tape.backward(loss).unwrap();

            // Probe a handful of coordinates from each layer.
            for (name, var) in &vars.vars {
                let analytic = grads.wrt(&tape, *var);
                let tensor = params.get(name).unwrap();
                let probes = [0, tensor.len() / 2, tensor.len() - 1];
                for &i in &probes {
                    let x0 = tensor.data()[i];
                    let h = 1e-5 * x0.abs().max(1.0);
                    let mut plus = params.clone();
                    plus.get_mut(name).unwrap().data_mut()[i] = x0 + h;
                    let mut minus = params.clone();
                    minus.get_mut(name).unwrap().data_mut()[i] = x0 - h;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic.data()[i];
                    let denom = a.abs().max(numeric.abs()).max(1e-2);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{:?} {} [{}]: analytic {} vs numeric {}",
                        gate_axis,
                        name,
                        i,
                        a,
                        numeric
                    );
                }
            }
        }
    }
}
