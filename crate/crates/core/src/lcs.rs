//! Language-guided channel selection: per-site personalized gating of
//! encoder features, conditioned on the site's text indicator, with a
//! residual connection.
//!
//! The gate is a single fully connected layer over the concatenation of
//! pooled features and the indicator, squashed through a sigmoid. Two
//! gating axes are supported: `channel` (one gate value per feature
//! channel, the default) and `spatial` (one gate value per position).
//! Gate parameters are always personalized — they never enter any
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::TextIndicator;

/// Which axis of the feature map the gate modulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateAxis {
    #[default]
    Channel,
    Spatial,
}

/// Gate parameters, one variant per axis.
///
/// Channel: `fc_weight [(c+d), c]`, `fc_bias [c]`.
/// Spatial: `proj_weight [d, 1]` projecting the indicator to a scalar,
/// plus a per-position 2-input affine `pixel_weight [2, 1]`,
/// `pixel_bias [1]`.
#[derive(Debug, Clone)]
pub enum LcsParams {
    Channel {
        fc_weight: Tensor,
        fc_bias: Tensor,
    },
    Spatial {
        proj_weight: Tensor,
        pixel_weight: Tensor,
        pixel_bias: Tensor,
    },
}

/// Tape handles for gate parameters during training.
#[derive(Debug, Clone, Copy)]
pub enum LcsParamVars {
    Channel {
        fc_weight: Var,
        fc_bias: Var,
    },
    Spatial {
        proj_weight: Var,
        pixel_weight: Var,
        pixel_bias: Var,
    },
}

/// A computed gate: values in `(0, 1)` along the channel or spatial axis.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub values: Tensor,
    pub axis: GateAxis,
}

impl ChannelGate {
    /// Builds a gate from raw values, bypassing the sigmoid. Intended
    /// for tests that need gates outside `(0, 1)`.
    pub fn from_raw(values: Tensor, axis: GateAxis) -> Self {
        Self { values, axis }
    }
}

/// Records the gate computation on a tape and returns the gate node.
pub fn gate_on_tape(
    tape: &mut Tape,
    features: Var,
    indicator: Var,
    params: &LcsParamVars,
) -> Result<Var> {
    match params {
        LcsParamVars::Channel { fc_weight, fc_bias } => {
            let pooled = tape.global_avg_pool(features)?;
            let joint = tape.concat(pooled, indicator)?;
            let raw = tape.affine(joint, *fc_weight, *fc_bias)?;
            Ok(tape.sigmoid(raw))
        }
        LcsParamVars::Spatial {
            proj_weight,
            pixel_weight,
            pixel_bias,
        } => {
            // gate(p) = sigmoid(w0 * mean_c(F)(p) + w1 * proj + b)
            let pooled_map = tape.channel_mean(features)?;
            let zero_bias = tape.constant(Tensor::zeros(&[1]));
            let proj = tape.affine(indicator, *proj_weight, zero_bias)?;
            let proj = tape.slice_scalar(proj, 0)?;
            let w0 = tape.slice_scalar(*pixel_weight, 0)?;
            let w1 = tape.slice_scalar(*pixel_weight, 1)?;
            let b = tape.slice_scalar(*pixel_bias, 0)?;
            let term0 = tape.mul_scalar_node(pooled_map, w0)?;
            let projw = tape.mul(proj, w1)?;
            let with_proj = tape.add_scalar_node(term0, projw)?;
            let raw = tape.add_scalar_node(with_proj, b)?;
            Ok(tape.sigmoid(raw))
        }
    }
}

/// Residual gate application on a tape: `F* = F + F ⊗ gate`.
pub fn apply_on_tape(tape: &mut Tape, features: Var, gate: Var, axis: GateAxis) -> Result<Var> {
    let gated = match axis {
        GateAxis::Channel => tape.mul_channel_gate(features, gate)?,
        GateAxis::Spatial => tape.mul_spatial_gate(features, gate)?,
    };
    tape.add(features, gated)
}

/// Computes the gate for a feature map (pure wrapper over the tape path).
pub fn lcs_gate(
    features: &Tensor,
    indicator: &TextIndicator,
    params: &LcsParams,
) -> Result<ChannelGate> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let ind = tape.constant(indicator.vector.clone());
    let (vars, axis) = match params {
        LcsParams::Channel { fc_weight, fc_bias } => (
            LcsParamVars::Channel {
                fc_weight: tape.constant(fc_weight.clone()),
                fc_bias: tape.constant(fc_bias.clone()),
            },
            GateAxis::Channel,
        ),
        LcsParams::Spatial {
            proj_weight,
            pixel_weight,
            pixel_bias,
        } => (
            LcsParamVars::Spatial {
                proj_weight: tape.constant(proj_weight.clone()),
                pixel_weight: tape.constant(pixel_weight.clone()),
                pixel_bias: tape.constant(pixel_bias.clone()),
            },
            GateAxis::Spatial,
        ),
    };
    let gate = gate_on_tape(&mut tape, f, ind, &vars)?;
    Ok(ChannelGate {
        values: tape.value(gate).clone(),
        axis,
    })
}

/// Residual enhancement: `F* = F + F ⊗ gate`, the gate broadcast along
/// its axis. Gates in `(0, 1)` keep `sign(F*) = sign(F)` and
/// `|F| <= |F*| <= 2|F|` elementwise.
pub fn lcs_apply(features: &Tensor, gate: &ChannelGate) -> Result<Tensor> {
    if features.rank() != 4 {
        return Err(Error::Dimension(format!(
            "lcs_apply expects features [l,h,w,c], got {:?}",
            features.shape()
        )));
    }
    let c = features.shape()[3];
    match gate.axis {
        GateAxis::Channel => {
            if gate.values.shape() != [c] {
                return Err(Error::Dimension(format!(
                    "channel gate {:?} does not match c={}",
                    gate.values.shape(),
                    c
                )));
            }
            let mut out = features.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += *v * gate.values.data()[i % c];
            }
            Ok(out)
        }
        GateAxis::Spatial => {
            if gate.values.shape() != &features.shape()[..3] {
                return Err(Error::Dimension(format!(
                    "spatial gate {:?} does not match features {:?}",
                    gate.values.shape(),
                    features.shape()
                )));
            }
            let mut out = features.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += *v * gate.values.data()[i / c];
            }
            Ok(out)
        }
    }
}
