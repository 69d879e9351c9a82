//! Global and part-aware branches over the activation tensor `T`.
//!
//! The global branch averages all of `T`. The local branch averages each
//! rectangle of a uniform `h_parts × v_parts` grid. Every pooled feature
//! owns an independent reduction (linear → batch-norm → dropout) and
//! classifier for training; retrieval descriptors use the pooled features
//! themselves.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnConfig, BnStats, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_normal, Bindings, ParamGroup, ParamVisitor};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub h_parts: usize,
    pub v_parts: usize,
}

impl PartitionScheme {
    pub const fn new(h_parts: usize, v_parts: usize) -> Self {
        Self { h_parts, v_parts }
    }

    pub fn parts(&self) -> usize {
        self.h_parts * self.v_parts
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.h_parts >= 1 && self.v_parts >= 1 && self.h_parts <= height && self.v_parts <= width
    }
}

impl Default for PartitionScheme {
    fn default() -> Self {
        Self::new(3, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

/// Split `extent` into `parts` contiguous stripes; the first
/// `extent % parts` stripes are one longer.
fn stripes(extent: usize, parts: usize) -> Vec<Range<usize>> {
    let (base, extra) = (extent / parts, extent % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Grid rectangles in row-major `(h_index, v_index)` order.
pub fn partition_regions(height: usize, width: usize, scheme: PartitionScheme) -> Result<Vec<Region>> {
    if !scheme.fits(height, width) {
        return Err(Error::range(
            "partition_regions",
            format!(
                "{}x{} parts do not fit a {height}x{width} grid",
                scheme.h_parts, scheme.v_parts
            ),
        ));
    }
    let rows = stripes(height, scheme.h_parts);
    let cols = stripes(width, scheme.v_parts);
    Ok(rows
        .iter()
        .flat_map(|r| {
            cols.iter().map(move |c| Region {
                rows: r.clone(),
                cols: c.clone(),
            })
        })
        .collect())
}

/// Global feature `f_g` and part features `f_1..f_p`, each N×C.
pub fn pool_features(graph: &mut Graph<f32>, t: Var, scheme: PartitionScheme) -> Result<(Var, Vec<Var>)> {
    let shape = graph.value(t).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid("pool_features", format!("expected NCHW, got {shape:?}")));
    }
    let regions = partition_regions(shape[2], shape[3], scheme)?;
    let global = graph.global_avg_pool(t)?;
    let parts = regions
        .into_iter()
        .map(|r| graph.region_avg_pool(t, r.rows, r.cols))
        .collect::<Result<Vec<_>>>()?;
    Ok((global, parts))
}

/// Which pooled features take part in training and retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    #[default]
    Both,
    GlobalOnly,
    LocalOnly,
}

impl Components {
    pub fn label(&self) -> &'static str {
        match self {
            Components::Both => "combined",
            Components::GlobalOnly => "global-only",
            Components::LocalOnly => "local-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub h_parts: usize,
    pub v_parts: usize,
    pub reduction_dim: usize,
    pub dropout: f64,
    pub components: Components,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            h_parts: 3,
            v_parts: 1,
            reduction_dim: 512,
            dropout: 0.5,
            components: Components::Both,
        }
    }
}

impl HeadConfig {
    pub fn scheme(&self) -> PartitionScheme {
        PartitionScheme::new(self.h_parts, self.v_parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub reduce_weight: Tensor<f32>,
    pub reduce_bias: Tensor<f32>,
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub stats: BnStats<f32>,
    pub classifier_weight: Tensor<f32>,
    pub classifier_bias: Tensor<f32>,
}

impl BranchParams {
    fn init(channels: usize, reduced: usize, classes: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            reduce_weight: fan_in_normal(&[channels, reduced], channels, rng),
            reduce_bias: Tensor::zeros(&[reduced]),
            gamma: Tensor::full(&[reduced], 1.0),
            beta: Tensor::zeros(&[reduced]),
            stats: BnStats::new(reduced),
            classifier_weight: fan_in_normal(&[reduced, classes], reduced, rng),
            classifier_bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_weight.shape()[1]
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        let g = ParamGroup::New;
        f(&format!("{prefix}.reduce.weight"), g, &mut self.reduce_weight);
        f(&format!("{prefix}.reduce.bias"), g, &mut self.reduce_bias);
        f(&format!("{prefix}.bn.gamma"), g, &mut self.gamma);
        f(&format!("{prefix}.bn.beta"), g, &mut self.beta);
        f(&format!("{prefix}.classifier.weight"), g, &mut self.classifier_weight);
        f(&format!("{prefix}.classifier.bias"), g, &mut self.classifier_bias);
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        graph: &mut Graph<f32>,
        feature: Var,
        prefix: &str,
        bindings: &mut Bindings,
        mode: Mode,
        dropout: f64,
        bn: BnConfig,
        seed: u64,
    ) -> Result<Var> {
        let rw = bindings.bind(graph, format!("{prefix}.reduce.weight"), &self.reduce_weight);
        let rb = bindings.bind(graph, format!("{prefix}.reduce.bias"), &self.reduce_bias);
        let gm = bindings.bind(graph, format!("{prefix}.bn.gamma"), &self.gamma);
        let bt = bindings.bind(graph, format!("{prefix}.bn.beta"), &self.beta);
        let cw = bindings.bind(graph, format!("{prefix}.classifier.weight"), &self.classifier_weight);
        let cb = bindings.bind(graph, format!("{prefix}.classifier.bias"), &self.classifier_bias);
        let r = graph.linear(feature, rw, rb)?;
        let r = graph.batch_norm(r, gm, bt, &mut self.stats, mode, bn)?;
        let r = graph.dropout(r, dropout, mode, seed)?;
        graph.linear(r, cw, cb)
    }
}

/// One branch for `f_g` plus one per part, `p + 1` classifier heads total.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub global: BranchParams,
    pub parts: Vec<BranchParams>,
}

pub fn global_prefix() -> &'static str {
    "head.global"
}

/// Parts are numbered from 1 in parameter names.
pub fn part_prefix(index: usize) -> String {
    format!("head.part{}", index + 1)
}

impl HeadParams {
    pub fn init(config: &HeadConfig, channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("head", format!("need at least 2 classes, got {num_classes}")));
        }
        if channels == 0 || config.reduction_dim == 0 || config.scheme().parts() == 0 {
            return Err(Error::invalid("head", "channels, reduction size and part counts must be positive"));
        }
        let mut rng = seed::rng(seed, "head", 0);
        let global = BranchParams::init(channels, config.reduction_dim, num_classes, &mut rng);
        let parts = (0..config.scheme().parts())
            .map(|_| BranchParams::init(channels, config.reduction_dim, num_classes, &mut rng))
            .collect();
        Ok(Self { global, parts })
    }

    pub fn num_classes(&self) -> usize {
        self.global.num_classes()
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitor<'_>) {
        self.global.visit_mut(global_prefix(), f);
        for (i, p) in self.parts.iter_mut().enumerate() {
            p.visit_mut(&part_prefix(i), f);
        }
    }

    pub fn stats_mut(&mut self) -> impl Iterator<Item = (String, &mut BnStats<f32>)> {
        std::iter::once((format!("{}.bn", global_prefix()), &mut self.global.stats)).chain(
            self.parts
                .iter_mut()
                .enumerate()
                .map(|(i, p)| (format!("{}.bn", part_prefix(i)), &mut p.stats)),
        )
    }
}

/// Logits of every classifier, ordered `(global, part 1, …, part p)`.
#[allow(clippy::too_many_arguments)]
pub fn train_forward(
    graph: &mut Graph<f32>,
    t: Var,
    config: &HeadConfig,
    params: &mut HeadParams,
    bindings: &mut Bindings,
    mode: Mode,
    bn: BnConfig,
    seed: u64,
) -> Result<Vec<Var>> {
    let scheme = config.scheme();
    if params.parts.len() != scheme.parts() {
        return Err(Error::invalid(
            "train_forward",
            format!("{} part heads for a scheme with {} parts", params.parts.len(), scheme.parts()),
        ));
    }
    let (global, parts) = pool_features(graph, t, scheme)?;
    let mut logits = Vec::with_capacity(parts.len() + 1);
    logits.push(params.global.forward(
        graph,
        global,
        global_prefix(),
        bindings,
        mode,
        config.dropout,
        bn,
        seed::derive(seed, "dropout", 0),
    )?);
    for (i, (branch, feature)) in params.parts.iter_mut().zip(parts).enumerate() {
        logits.push(branch.forward(
            graph,
            feature,
            &part_prefix(i),
            bindings,
            mode,
            config.dropout,
            bn,
            seed::derive(seed, "dropout", i as u64 + 1),
        )?);
    }
    Ok(logits)
}

/// Descriptor width for `channels`-deep activations.
pub fn descriptor_dim(channels: usize, scheme: PartitionScheme, components: Components) -> usize {
    let blocks = match components {
        Components::Both => scheme.parts() + 1,
        Components::GlobalOnly => 1,
        Components::LocalOnly => scheme.parts(),
    };
    blocks * channels
}

/// Concatenated pooled features `[f_g, f_1, …, f_p]` per sample (N×D),
/// restricted to the selected components.
pub fn extract_descriptor(t: &Tensor<f32>, scheme: PartitionScheme, components: Components) -> Result<Tensor<f32>> {
    let mut graph = Graph::new();
    let tv = graph.input(t.clone());
    let (global, parts) = pool_features(&mut graph, tv, scheme)?;
    let mut blocks = Vec::new();
    if components != Components::LocalOnly {
        blocks.push(global);
    }
    if components != Components::GlobalOnly {
        blocks.extend(parts);
    }
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(n * c * blocks.len());
    for s in 0..n {
        for b in &blocks {
            data.extend_from_slice(&graph.value(*b).data()[s * c..(s + 1) * c]);
        }
    }
    Tensor::new(vec![n, c * blocks.len()], data)
}
