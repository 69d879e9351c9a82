//! Backbone + head bundle with the normalization constants it was trained
//! under.

use crate::autodiff::{BnConfig, Graph, Mode, Tensor, Var};
use crate::backbone::{self, BackboneConfig, BackboneParams};
use crate::datasets::{augment, JitterConfig, NormStats};
use crate::error::{Error, Result};
use crate::head::{self, HeadConfig, HeadParams, PartitionScheme};
use crate::params::{Bindings, ParamVisitor};
use crate::seed;

/// Images per eval-mode forward pass when extracting descriptors.
const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct GpaModel {
    pub backbone_config: BackboneConfig,
    pub head_config: HeadConfig,
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub norm: NormStats,
}

/// Rejects a partition grid that does not fit the backbone's output.
pub fn check_compatible(backbone_config: &BackboneConfig, scheme: PartitionScheme) -> Result<()> {
    backbone_config.validate()?;
    let (h, w) = backbone_config.output_extent();
    if !scheme.fits(h, w) {
        return Err(Error::range(
            "model",
            format!(
                "{}x{} parts exceed the {h}x{w} activation grid",
                scheme.h_parts, scheme.v_parts
            ),
        ));
    }
    Ok(())
}

impl GpaModel {
    pub fn new(
        backbone_config: BackboneConfig,
        head_config: HeadConfig,
        num_classes: usize,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self> {
        check_compatible(&backbone_config, head_config.scheme())?;
        let backbone = backbone::init_params(&backbone_config, seed::derive(seed, "init", 0))?;
        let head = HeadParams::init(
            &head_config,
            backbone_config.out_channels(),
            num_classes,
            seed::derive(seed, "init", 1),
        )?;
        Ok(Self {
            backbone_config,
            head_config,
            backbone,
            head,
            norm,
        })
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.head_config.scheme()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn descriptor_dim(&self) -> usize {
        head::descriptor_dim(self.backbone_config.out_channels(), self.scheme(), self.head_config.components)
    }

    pub fn bn_config(&self) -> BnConfig {
        BnConfig {
            momentum: self.backbone_config.bn_momentum,
            eps: self.backbone_config.bn_eps,
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamVisitor<'_>) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// Classifier logits `(global, part 1..p)` for a normalized N×3×S×S
    /// batch already on `graph`.
    pub fn forward(&mut self, graph: &mut Graph<f32>, images: Var, mode: Mode, seed: u64) -> Result<(Vec<Var>, Bindings)> {
        let mut bindings = Bindings::default();
        let bn = self.bn_config();
        let t = backbone::forward(graph, images, &self.backbone_config, &mut self.backbone, &mut bindings, mode)?;
        let logits = head::train_forward(graph, t, &self.head_config, &mut self.head, &mut bindings, mode, bn, seed)?;
        Ok((logits, bindings))
    }

    /// Eval-mode activation tensor `T` for a normalized batch.
    pub fn activations(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut graph = Graph::new();
        let x = graph.input(images.clone());
        let mut bindings = Bindings::default();
        let t = backbone::forward(&mut graph, x, &self.backbone_config, &mut self.backbone, &mut bindings, Mode::Eval)?;
        Ok(graph.value(t).clone())
    }

    /// Descriptors (one row per image) for raw 3×S×S images in `[0, 1]`.
    pub fn describe(&mut self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        let dim = self.descriptor_dim();
        let mut rows = Vec::with_capacity(images.len() * dim);
        for chunk in images.chunks(EXTRACT_CHUNK) {
            let normed = chunk
                .iter()
                .map(|img| augment(img, Mode::Eval, &self.norm, &JitterConfig::default(), 0))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&normed)?;
            let t = self.activations(&batch)?;
            let d = head::extract_descriptor(&t, self.scheme(), self.head_config.components)?;
            rows.extend_from_slice(d.data());
        }
        if images.is_empty() {
            return Err(Error::invalid("describe", "no images"));
        }
        Tensor::new(vec![images.len(), dim], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Components;

    fn small() -> (BackboneConfig, HeadConfig) {
        (
            BackboneConfig { channels: vec![4, 8], strides: vec![2, 2], input_size: 16, ..Default::default() },
            HeadConfig { reduction_dim: 8, ..Default::default() },
        )
    }

    #[test]
    fn rejects_grid_larger_than_activations() {
        let (mut b, h) = small();
        b.input_size = 4;
        assert!(GpaModel::new(b, h, 3, NormStats::default(), 0).is_err());
    }

    #[test]
    fn descriptor_width_follows_components() {
        let (b, h) = small();
        let img = Tensor::full(&[3, 16, 16], 0.5);
        for (comp, dim) in [(Components::Both, 32), (Components::GlobalOnly, 8), (Components::LocalOnly, 24)] {
            let mut m = GpaModel::new(b.clone(), HeadConfig { components: comp, ..h.clone() }, 3, NormStats::default(), 1).unwrap();
            let d = m.describe(&[&img, &img]).unwrap();
            assert_eq!(d.shape(), &[2, dim]);
            assert_eq!(d.slab(0), d.slab(1));
        }
    }

    #[test]
    fn forward_binds_every_parameter() {
        let (b, h) = small();
        let mut m = GpaModel::new(b, h, 3, NormStats::default(), 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 3, 16, 16], 0.1));
        let (logits, bindings) = m.forward(&mut g, x, Mode::Train, 0).unwrap();
        assert_eq!(logits.len(), 4);
        let mut count = 0;
        m.visit_params_mut(&mut |name, _, _| {
            assert!(bindings.get(name).is_some(), "{name}");
            count += 1;
        });
        assert_eq!(count, bindings.len());
    }
}
