//! Stack of conv → batch-norm → relu stages producing the activation tensor
//! `T` that both branches of the head read.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnConfig, BnStats, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, Bindings, ParamGroup, ParamVisitor};
use crate::seed;

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels per stage; the last entry is `C`.
    pub channels: Vec<usize>,
    /// Stride per stage. The final entry is replaced by `last_stage_stride`.
    pub strides: Vec<usize>,
    /// 1 removes the last spatial down-sampling, doubling `T`'s extents.
    pub last_stage_stride: usize,
    /// Square input side length in pixels.
    pub input_size: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 2],
            last_stage_stride: 1,
            input_size: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

fn conv_extent(size: usize, stride: usize) -> usize {
    (size + 2 * PADDING - KERNEL) / stride + 1
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "{} channel entries vs {} stride entries",
                    self.channels.len(),
                    self.strides.len()
                ),
            ));
        }
        if self.channels.contains(&0) || self.input_size == 0 {
            return Err(Error::invalid("backbone", "channels and input size must be positive"));
        }
        if self
            .effective_strides()
            .iter()
            .any(|s| !matches!(s, 1 | 2))
        {
            return Err(Error::invalid("backbone", "all strides must be 1 or 2"));
        }
        Ok(())
    }

    pub fn effective_strides(&self) -> Vec<usize> {
        let mut s = self.strides.clone();
        if let Some(last) = s.last_mut() {
            *last = self.last_stage_stride;
        }
        s
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Spatial extent `(H, W)` of `T`.
    pub fn output_extent(&self) -> (usize, usize) {
        let side = self
            .effective_strides()
            .iter()
            .fold(self.input_size, |s, &st| conv_extent(s, st));
        (side, side)
    }

    fn bn(&self) -> BnConfig {
        BnConfig {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub stats: BnStats<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub stages: Vec<StageParams>,
}

/// Fan-in scaled normal conv weights, zero biases, unit BN scale.
pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = seed::rng(seed, "backbone", 0);
    let mut in_ch = 3;
    let stages = config
        .channels
        .iter()
        .map(|&out| {
            let fan_in = in_ch * KERNEL * KERNEL;
            let stage = StageParams {
                weight: fan_in_normal(&[out, in_ch, KERNEL, KERNEL], fan_in, &mut rng),
                bias: Tensor::zeros(&[out]),
                gamma: Tensor::full(&[out], 1.0),
                beta: Tensor::zeros(&[out]),
                stats: BnStats::new(out),
            };
            in_ch = out;
            stage
        })
        .collect();
    Ok(BackboneParams { stages })
}

impl BackboneParams {
    pub fn visit_mut(&mut self, f: &mut ParamVisitor<'_>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let g = ParamGroup::Backbone;
            f(&format!("backbone.stage{i}.conv.weight"), g, &mut s.weight);
            f(&format!("backbone.stage{i}.conv.bias"), g, &mut s.bias);
            f(&format!("backbone.stage{i}.bn.gamma"), g, &mut s.gamma);
            f(&format!("backbone.stage{i}.bn.beta"), g, &mut s.beta);
        }
    }

    pub fn stats_mut(&mut self) -> impl Iterator<Item = (String, &mut BnStats<f32>)> {
        self.stages
            .iter_mut()
            .enumerate()
            .map(|(i, s)| (format!("backbone.stage{i}.bn"), &mut s.stats))
    }
}

/// Run the stack on an N×3×S×S batch, returning `T` (N×C×H×W).
///
/// Training mode updates the batch-norm running statistics in `params`.
pub fn forward(
    graph: &mut Graph<f32>,
    images: Var,
    config: &BackboneConfig,
    params: &mut BackboneParams,
    bindings: &mut Bindings,
    mode: Mode,
) -> Result<Var> {
    let shape = graph.value(images).shape().to_vec();
    let s = config.input_size;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(Error::Shape {
            op: "backbone",
            lhs: shape,
            rhs: vec![0, 3, s, s],
        });
    }
    if params.stages.len() != config.channels.len() {
        return Err(Error::invalid("backbone", "parameter/stage count mismatch"));
    }
    let bn = config.bn();
    let mut x = images;
    for (i, (stage, stride)) in params
        .stages
        .iter_mut()
        .zip(config.effective_strides())
        .enumerate()
    {
        let w = bindings.bind(graph, format!("backbone.stage{i}.conv.weight"), &stage.weight);
        let b = bindings.bind(graph, format!("backbone.stage{i}.conv.bias"), &stage.bias);
        let gm = bindings.bind(graph, format!("backbone.stage{i}.bn.gamma"), &stage.gamma);
        let bt = bindings.bind(graph, format!("backbone.stage{i}.bn.beta"), &stage.beta);
        let y = graph.conv2d(x, w, b, stride, PADDING)?;
        let y = graph.batch_norm(y, gm, bt, &mut stage.stats, mode, bn)?;
        x = graph.relu(y);
    }
    Ok(x)
}
