use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{weighted_loss, LossConfig};
use super::optim::{lr_at, sgd_step, OptimConfig};
use crate::autodiff::{Graph, Mode, Tensor};
use crate::backbone::BackboneConfig;
use crate::config::comment_block;
use crate::datasets::{augment, EvalProtocol, ImageLibrary, JitterConfig, ManifestRecord, NormStats};
use crate::error::{Error, Result};
use crate::head::{Components, HeadConfig};
use crate::model::GpaModel;
use crate::params::ParamGroup;
use crate::retrieval::DescriptorCache;
use crate::retrieval::{score, DescriptorMatrix};
use crate::seed;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub jitter: JitterConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub mean_global_loss: f64,
    pub mean_local_loss: f64,
    /// `None` when no training identity has a validation image.
    pub val_rank1: Option<f64>,
    pub lr_new: f64,
    pub lr_backbone: f64,
}

pub const LOG_HEADER: &str = "epoch,mean_total_loss,mean_global_loss,mean_local_loss,val_rank1,lr_new,lr_backbone";

/// Delimited training log; `preamble` lines are written first as `#`
/// comments.
pub fn log_to_csv(log: &[EpochLog], preamble: Option<&str>) -> String {
    let mut out = preamble.map(comment_block).unwrap_or_default();
    writeln!(out, "{LOG_HEADER}").unwrap();
    for e in log {
        let val = e.val_rank1.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{val},{},{}",
            e.epoch, e.mean_total_loss, e.mean_global_loss, e.mean_local_loss, e.lr_new, e.lr_backbone
        )
        .unwrap();
    }
    out
}

pub struct TrainOutcome {
    pub model: GpaModel,
    pub log: Vec<EpochLog>,
}

/// Splits a shuffled order into mini-batches. A trailing batch of one is
/// folded into the previous batch because batch statistics need two
/// samples.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn validation_rank1(model: &mut GpaModel, protocol: &EvalProtocol, images: &mut ImageLibrary) -> Result<Option<f64>> {
    if protocol.validation.is_empty() {
        return Ok(None);
    }
    let gallery = &protocol.train;
    let query: Vec<ManifestRecord> = protocol
        .validation
        .iter()
        .filter(|v| gallery.iter().any(|g| g.match_key() == v.match_key()))
        .cloned()
        .collect();
    if query.is_empty() {
        return Ok(None);
    }
    let mut cache = DescriptorCache::new(model);
    let g: DescriptorMatrix = cache.matrix(gallery, images)?;
    let q = cache.matrix(&query, images)?;
    Ok(Some(score(&g, &q)?.rank1()))
}

/// Trains a fresh model on `protocol.train` and logs one row per epoch.
pub fn train(
    protocol: &EvalProtocol,
    images: &mut ImageLibrary,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.size() != config.backbone.input_size {
        return Err(Error::Data(format!(
            "image size {} does not match the backbone input size {}",
            images.size(),
            config.backbone.input_size
        )));
    }
    let classes = protocol.classes();
    if classes.len() < 2 {
        return Err(Error::Data(format!("training needs at least 2 classes, got {}", classes.len())));
    }
    if protocol.train.len() < 2 {
        return Err(Error::Data("training needs at least 2 images".into()));
    }
    let class_of: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels: Vec<usize> = protocol.train.iter().map(|r| class_of[r.identity.as_str()]).collect();
    let raw: Vec<Tensor<f32>> = protocol
        .train
        .iter()
        .map(|r| images.get(r).cloned())
        .collect::<Result<_>>()?;
    let norm = NormStats::from_images(&raw)?;
    let mut model = GpaModel::new(config.backbone.clone(), config.head.clone(), classes.len(), norm, config.seed)?;

    let optim = &config.optim;
    let components = config.head.components;
    let mut velocity: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut log = Vec::with_capacity(optim.epochs);
    let mut step = 0u64;
    for epoch in 0..optim.epochs {
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.shuffle(&mut seed::rng(config.seed, "shuffle", epoch as u64));
        let aug_seed = seed::derive(config.seed, "augment", epoch as u64);
        let (lr_new, lr_backbone) = (lr_at(epoch, ParamGroup::New, optim), lr_at(epoch, ParamGroup::Backbone, optim));
        let (mut total, mut global, mut local, mut seen) = (0.0, 0.0, 0.0, 0usize);

        for batch in batches(&order, optim.batch_size) {
            let inputs = batch
                .iter()
                .map(|&i| augment(&raw[i], Mode::Train, &model.norm, &config.jitter, seed::derive(aug_seed, "image", i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut graph = Graph::new();
            let x = graph.input(Tensor::stack(&inputs)?);
            let (logits, bindings) = model.forward(&mut graph, x, Mode::Train, seed::derive(config.seed, "step", step))?;
            let (g, parts) = match components {
                Components::Both => (Some(logits[0]), &logits[1..]),
                Components::GlobalOnly => (Some(logits[0]), &logits[..0]),
                Components::LocalOnly => (None, &logits[1..]),
            };
            let terms = weighted_loss(&mut graph, g, parts, &batch_labels, &config.loss)?;
            let value = graph.value(terms.total).item() as f64;
            if !value.is_finite() || !terms.global.is_finite() || !terms.local.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step}: total {value}, global {}, local {}",
                    terms.global, terms.local
                )));
            }
            graph.backward(terms.total)?;

            let mut failure = None;
            model.visit_params_mut(&mut |name, group, param| {
                if failure.is_some() {
                    return;
                }
                let Some(grad) = bindings.get(name).and_then(|v| graph.take_grad(v)) else {
                    return;
                };
                let lr = match group {
                    ParamGroup::New => lr_new,
                    ParamGroup::Backbone => lr_backbone,
                };
                let is_norm = name.contains(".bn.");
                let decay = if is_norm && !optim.decay_norm_params { 0.0 } else { optim.weight_decay };
                let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; param.numel()]);
                if let Err(e) = sgd_step(param.data_mut(), &grad, v, lr, decay, optim) {
                    failure = Some(e);
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let n = batch.len();
            total += value * n as f64;
            global += terms.global * n as f64;
            local += terms.local * n as f64;
            seen += n;
            step += 1;
        }

        let entry = EpochLog {
            epoch,
            mean_total_loss: total / seen as f64,
            mean_global_loss: global / seen as f64,
            mean_local_loss: local / seen as f64,
            val_rank1: validation_rank1(&mut model, protocol, images)?,
            lr_new,
            lr_backbone,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
