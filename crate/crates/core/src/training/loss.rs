use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the summed part losses relative to the global loss.
    pub lambda: f64,
    /// Label-smoothing mass spread uniformly over all classes.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("loss", format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::invalid("loss", format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Smoothed target distribution: `1 − ε(K−1)/K` on `label`, `ε/K`
/// elsewhere.
///
/// Entries are adjusted by a few ulps where needed so that, summed in index
/// order, they give exactly 1.
pub fn smoothed_targets(label: usize, classes: usize, epsilon: f64) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::invalid("smoothed_targets", format!("need at least 2 classes, got {classes}")));
    }
    if label >= classes {
        return Err(Error::range("smoothed_targets", format!("label {label} outside 0..{classes}")));
    }
    let off = epsilon / classes as f64;
    let mut q = vec![off; classes];
    q[label] = 1.0 - epsilon * (classes - 1) as f64 / classes as f64;
    // Search outward from the closed form, one ulp at a time, for the
    // nearest true-class value whose ordered sum is exactly 1.
    let closed = q[label];
    let sums_to_one = |q: &mut Vec<f64>, v: f64| {
        q[label] = v;
        q.iter().sum::<f64>() == 1.0
    };
    let (mut up, mut down) = (closed, closed);
    for _ in 0..MAX_NUDGE {
        if sums_to_one(&mut q, up) {
            return Ok(q);
        }
        if sums_to_one(&mut q, down) {
            return Ok(q);
        }
        up = next_up(up);
        down = next_down(down);
    }
    // Rounding can skip over 1 entirely; then the last entry absorbs the
    // residual of the preceding partial sum instead.
    q[label] = closed;
    let last = classes - 1;
    let partial: f64 = q[..last].iter().sum();
    q[last] = 1.0 - partial;
    if q.iter().sum::<f64>() == 1.0 {
        return Ok(q);
    }
    Err(Error::Numeric(format!("smoothed targets for K={classes}, eps={epsilon} cannot sum to exactly 1")))
}

const MAX_NUDGE: usize = 64;

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Row-major N×K targets for `labels`.
pub fn target_matrix<T: Real>(labels: &[usize], classes: usize, epsilon: f64) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(labels.len() * classes);
    for &y in labels {
        out.extend(smoothed_targets(y, classes, epsilon)?.into_iter().map(T::of));
    }
    Ok(out)
}

/// Loss node and the scalar value of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub global: f64,
    pub local: f64,
}

fn check_logits<T: Real>(graph: &Graph<T>, heads: &[Var], labels: &[usize]) -> Result<usize> {
    let first = graph.value(heads[0]).shape().to_vec();
    if first.len() != 2 || first[0] != labels.len() {
        return Err(Error::shape("total_loss", &first, &[labels.len()]));
    }
    for h in heads {
        if graph.value(*h).shape() != first.as_slice() {
            return Err(Error::shape("total_loss", &first, graph.value(*h).shape()));
        }
    }
    Ok(first[1])
}

/// Batch-mean smoothed cross-entropy of the global head plus `λ` times the
/// sum of the part heads' batch-mean cross-entropies. A missing global head
/// contributes nothing (local-only training).
pub fn weighted_loss<T: Real>(
    graph: &mut Graph<T>,
    global: Option<Var>,
    locals: &[Var],
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let heads: Vec<Var> = global.iter().copied().chain(locals.iter().copied()).collect();
    if heads.is_empty() {
        return Err(Error::invalid("total_loss", "no classifier heads"));
    }
    let classes = check_logits(graph, &heads, labels)?;
    let targets = target_matrix::<T>(labels, classes, config.epsilon)?;

    let mut total: Option<Var> = None;
    let mut global_value = 0.0;
    if let Some(g) = global {
        let ce = graph.soft_cross_entropy(g, targets.clone())?;
        global_value = graph.value(ce).item().to_f64().unwrap();
        total = Some(ce);
    }
    let mut local_sum: Option<Var> = None;
    for l in locals {
        let ce = graph.soft_cross_entropy(*l, targets.clone())?;
        local_sum = Some(match local_sum {
            Some(acc) => graph.add(acc, ce)?,
            None => ce,
        });
    }
    let mut local_value = 0.0;
    if let Some(ls) = local_sum {
        local_value = graph.value(ls).item().to_f64().unwrap();
        let scaled = graph.scale(ls, T::of(config.lambda));
        total = Some(match total {
            Some(t) => graph.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(LossTerms {
        total: total.expect("at least one head"),
        global: global_value,
        local: local_value,
    })
}

/// Combined objective over the global head and `p` part heads.
pub fn total_loss<T: Real>(
    graph: &mut Graph<T>,
    global: Var,
    locals: &[Var],
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossTerms> {
    weighted_loss(graph, Some(global), locals, labels, config)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{grad_check, Tensor};

    #[test]
    fn smoothing_examples() {
        let q = smoothed_targets(2, 4, 0.1).unwrap();
        let want = [0.025, 0.025, 0.925, 0.025];
        for (a, b) in q.iter().zip(want) {
            assert!((a - b).abs() <= f64::EPSILON, "{q:?}");
        }
        assert_eq!(smoothed_targets(1, 3, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        let q = smoothed_targets(0, 10, 0.1).unwrap();
        assert!((q[0] - 0.91).abs() < 1e-15);
        assert!(q[1..].iter().all(|v| (v - 0.01).abs() < 1e-15));
        assert!(smoothed_targets(4, 4, 0.1).is_err());
    }

    #[test]
    fn smoothing_sums_to_exactly_one() {
        for k in 2..=1000 {
            for eps in [0.0, 0.1, 0.5] {
                for y in [0, k / 2, k - 1] {
                    let q = smoothed_targets(y, k, eps).unwrap();
                    assert_eq!(q.iter().sum::<f64>(), 1.0, "k={k} eps={eps} y={y}");
                    for (i, v) in q.iter().enumerate() {
                        let closed = if i == y { 1.0 - eps * (k - 1) as f64 / k as f64 } else { eps / k as f64 };
                        assert!((v - closed).abs() <= k as f64 * f64::EPSILON, "k={k} eps={eps} i={i}");
                    }
                }
            }
        }
    }

    fn logits(g: &mut Graph<f64>, n: usize, k: usize, fill: impl Fn(usize) -> f64) -> Var {
        g.input(Tensor::from_fn(&[n, k], fill))
    }

    #[test]
    fn uniform_logits_give_ln_k_per_head() {
        for p in [1usize, 3, 4, 12] {
            for lambda in [0.0, 1.0 / p as f64, 1.0] {
                let k = 7;
                let mut g = Graph::new();
                let gl = logits(&mut g, 5, k, |_| 0.0);
                let ls: Vec<Var> = (0..p).map(|_| logits(&mut g, 5, k, |_| 0.0)).collect();
                let cfg = LossConfig { lambda, epsilon: 0.1 };
                let t = total_loss(&mut g, gl, &ls, &[0, 1, 2, 3, 6], &cfg).unwrap();
                let want = (1.0 + lambda * p as f64) * (k as f64).ln();
                assert!((g.value(t.total).item() - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let mut g = Graph::new();
        let gl = logits(&mut g, 1, 3, |j| if j == 1 { 1000.0 } else { 0.0 });
        let t = total_loss(&mut g, gl, &[], &[1], &LossConfig { lambda: 1.0, epsilon: 0.0 }).unwrap();
        assert!(g.value(t.total).item().abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_leaves_global_only() {
        let mut g = Graph::new();
        let gl = logits(&mut g, 2, 4, |i| i as f64 * 0.3);
        let l1 = logits(&mut g, 2, 4, |i| (i % 3) as f64);
        let full = total_loss(&mut g, gl, &[l1], &[0, 3], &LossConfig { lambda: 0.0, epsilon: 0.1 }).unwrap();
        let alone = total_loss(&mut g, gl, &[], &[0, 3], &LossConfig { lambda: 0.0, epsilon: 0.1 }).unwrap();
        assert_eq!(g.value(full.total).item(), g.value(alone.total).item());
    }

    #[test]
    fn lambda_scales_only_local_term() {
        let mut g = Graph::new();
        let a = logits(&mut g, 3, 5, |i| ((i * 7) % 5) as f64 * 0.4);
        let b = logits(&mut g, 3, 5, |i| ((i * 7) % 5) as f64 * 0.4);
        let one = total_loss(&mut g, a, &[b], &[0, 2, 4], &LossConfig { lambda: 1.0, epsilon: 0.1 }).unwrap();
        let zero = total_loss(&mut g, a, &[b], &[0, 2, 4], &LossConfig { lambda: 0.0, epsilon: 0.1 }).unwrap();
        let ratio = g.value(one.total).item() / g.value(zero.total).item();
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_heads_rejected() {
        let mut g = Graph::new();
        let a = logits(&mut g, 2, 4, |_| 0.0);
        let b = logits(&mut g, 2, 5, |_| 0.0);
        assert!(total_loss(&mut g, a, &[b], &[0, 1], &LossConfig::default()).is_err());
        assert!(total_loss(&mut g, a, &[], &[0, 4], &LossConfig::default()).is_err());
        assert!(total_loss(&mut g, a, &[], &[0], &LossConfig::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = [1usize, 0, 3];
        let other = Tensor::from_fn(&[3, 4], |i| ((i * 5) % 7) as f64 * 0.2 - 0.5);
        let err = grad_check(
            |g, z| {
                let o = g.input(other.clone());
                Ok(total_loss(g, z, &[o, z], &labels, &LossConfig { lambda: 0.7, epsilon: 0.1 })?.total)
            },
            &Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(
            z in prop::collection::vec(-30.0f64..30.0, 12),
            eps in 0.0f64..0.9,
            lambda in 0.0f64..3.0,
        ) {
            let mut g = Graph::new();
            let a = g.input(Tensor::new(vec![3, 4], z.clone()).unwrap());
            let b = g.input(Tensor::new(vec![3, 4], z.iter().rev().copied().collect()).unwrap());
            let t = total_loss(&mut g, a, &[b], &[0, 1, 3], &LossConfig { lambda, epsilon: eps }).unwrap();
            prop_assert!(g.value(t.total).item() >= 0.0);
        }

        #[test]
        fn uniform_predictions_ignore_labels(labels in prop::collection::vec(0usize..6, 1..8)) {
            let mut g = Graph::new();
            let n = labels.len();
            let a = g.input(Tensor::full(&[n, 6], 2.5));
            let b = g.input(Tensor::full(&[n, 6], -1.0));
            let t = total_loss(&mut g, a, &[b, b], &labels, &LossConfig::default()).unwrap();
            prop_assert!((g.value(t.total).item() - 3.0 * 6f64.ln()).abs() < 1e-9);
        }
    }
}
