//! Learnable-parameter plumbing shared by the backbone and the head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};

/// Learning-rate group. Pre-existing (backbone) layers train at a reduced
/// rate; newly added layers at the base rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    New,
}

/// Zero-mean normal draw with variance `1 / fan_in`.
pub fn fan_in_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let dist = Normal::new(0.0f64, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// Parameter nodes registered on a graph during one forward pass, keyed by
/// the parameter's checkpoint name.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn bind(&mut self, graph: &mut Graph<f32>, name: String, t: &Tensor<f32>) -> Var {
        let v = graph.param(t.clone());
        self.vars.insert(name, v);
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Callback over `(name, group, tensor)` for every learnable tensor.
pub type ParamVisitor<'a> = dyn FnMut(&str, ParamGroup, &mut Tensor<f32>) + 'a;
