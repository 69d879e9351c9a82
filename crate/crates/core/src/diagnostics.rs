//! Finite-difference gradient suite over every differentiable op.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{grad_check, BnConfig, BnStats, Graph, Mode, Tensor, Var};
use crate::error::Result;
use crate::seed;
use crate::training::{total_loss, LossConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub wrt: &'static str,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Uniform values in `[-1, 1]` kept at least `0.05` away from zero so relu
/// kinks stay outside the difference stencil.
fn random(shape: &[usize], seed: u64, tag: &str) -> Tensor<f64> {
    let mut rng = seed::rng(seed, tag, 0);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn coeffs(n: usize, seed: u64, tag: &str) -> Vec<f64> {
    random(&[n], seed, tag).into_data()
}

/// Projects an op's output onto fixed random coefficients so the check
/// sees a scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64, tag: &str) -> Result<Var> {
    let n = g.value(y).numel();
    g.weighted_sum(y, coeffs(n, seed, tag))
}

fn check(op: &'static str, wrt: &'static str, param: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<OpCheck> {
    Ok(OpCheck {
        op,
        wrt,
        max_rel_error: grad_check(build, param, STEP)?,
    })
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();

    let x = random(&[2, 3, 6, 5], seed, "conv.x");
    let w = random(&[4, 3, 3, 3], seed, "conv.w");
    let b = random(&[4], seed, "conv.b");
    for (stride, label_x, label_w, label_b) in [
        (1, "input (stride 1)", "weight (stride 1)", "bias (stride 1)"),
        (2, "input (stride 2)", "weight (stride 2)", "bias (stride 2)"),
    ] {
        let conv = |g: &mut Graph<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
            let y = g.conv2d(xv, wv, bv, stride, 1)?;
            project(g, y, seed, "conv.c")
        };
        out.push(check("conv2d", label_x, &x, |g, xv| {
            let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
            conv(g, xv, wv, bv)
        })?);
        out.push(check("conv2d", label_w, &w, |g, wv| {
            let (xv, bv) = (g.input(x.clone()), g.input(b.clone()));
            conv(g, xv, wv, bv)
        })?);
        out.push(check("conv2d", label_b, &b, |g, bv| {
            let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
            conv(g, xv, wv, bv)
        })?);
    }

    let x = random(&[5, 4], seed, "linear.x");
    let w = random(&[4, 6], seed, "linear.w");
    let b = random(&[6], seed, "linear.b");
    let linear = |g: &mut Graph<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
        let y = g.linear(xv, wv, bv)?;
        project(g, y, seed, "linear.c")
    };
    out.push(check("linear", "input", &x, |g, xv| {
        let (wv, bv) = (g.input(w.clone()), g.input(b.clone()));
        linear(g, xv, wv, bv)
    })?);
    out.push(check("linear", "weight", &w, |g, wv| {
        let (xv, bv) = (g.input(x.clone()), g.input(b.clone()));
        linear(g, xv, wv, bv)
    })?);
    out.push(check("linear", "bias", &b, |g, bv| {
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        linear(g, xv, wv, bv)
    })?);

    let gamma = random(&[3], seed, "bn.gamma");
    let beta = random(&[3], seed, "bn.beta");
    for (shape, mode, label) in [
        (vec![6, 3], Mode::Train, "input (N×D, train)"),
        (vec![6, 3], Mode::Eval, "input (N×D, eval)"),
        (vec![2, 3, 3, 2], Mode::Train, "input (NCHW, train)"),
    ] {
        let x = random(&shape, seed, label);
        let bn = |g: &mut Graph<f64>, xv: Var, gv: Var, bv: Var| -> Result<Var> {
            let mut stats = BnStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![1.5, 0.7, 0.9],
            };
            let y = g.batch_norm(xv, gv, bv, &mut stats, mode, BnConfig::default())?;
            project(g, y, seed, "bn.c")
        };
        out.push(check("batch_norm", label, &x, |g, xv| {
            let (gv, bv) = (g.input(gamma.clone()), g.input(beta.clone()));
            bn(g, xv, gv, bv)
        })?);
        if mode == Mode::Train && shape.len() == 2 {
            out.push(check("batch_norm", "gamma", &gamma, |g, gv| {
                let (xv, bv) = (g.input(x.clone()), g.input(beta.clone()));
                bn(g, xv, gv, bv)
            })?);
            out.push(check("batch_norm", "beta", &beta, |g, bv| {
                let (xv, gv) = (g.input(x.clone()), g.input(gamma.clone()));
                bn(g, xv, gv, bv)
            })?);
        }
    }

    out.push(check("relu", "input", &random(&[4, 5], seed, "relu.x"), |g, xv| {
        let y = g.relu(xv);
        project(g, y, seed, "relu.c")
    })?);

    out.push(check("softmax", "input", &random(&[4, 5], seed, "softmax.x"), |g, xv| {
        let y = g.softmax(xv)?;
        project(g, y, seed, "softmax.c")
    })?);

    out.push(check("region_avg_pool", "input", &random(&[2, 3, 5, 4], seed, "pool.x"), |g, xv| {
        let y = g.region_avg_pool(xv, 1..4, 1..3)?;
        project(g, y, seed, "pool.c")
    })?);

    let labels = [2usize, 0, 4, 1];
    let cfg = LossConfig::default();
    let others: Vec<Tensor<f64>> = (0..3).map(|i| random(&[4, 5], seed, &format!("loss.local{i}"))).collect();
    out.push(check("total_loss", "global logits", &random(&[4, 5], seed, "loss.global"), |g, z| {
        let locals: Vec<Var> = others.iter().map(|t| g.input(t.clone())).collect();
        Ok(total_loss(g, z, &locals, &labels, &cfg)?.total)
    })?);
    let global = random(&[4, 5], seed, "loss.global");
    out.push(check("total_loss", "part logits", &others[0], |g, z| {
        let gl = g.input(global.clone());
        let rest: Vec<Var> = others[1..].iter().map(|t| g.input(t.clone())).collect();
        let locals: Vec<Var> = std::iter::once(z).chain(rest).collect();
        Ok(total_loss(g, gl, &locals, &labels, &cfg)?.total)
    })?);
    Ok(out)
}

pub fn render_table(rows: &[OpCheck]) -> String {
    let mut out = format!("{:<16} {:<22} {:>14}  result\n", "op", "wrt", "max rel error");
    for r in rows {
        writeln!(
            out,
            "{:<16} {:<22} {:>14.3e}  {}",
            r.op,
            r.wrt,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}
