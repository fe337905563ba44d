//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each case builds a small graph, seeds the output with a random projection
//! `L = <r, y>`, and compares the analytic gradient of every input element and
//! trainable parameter against `(L(v + h) - L(v - h)) / 2h`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{backward_from, forward, Graph, GraphBuilder, NodeId, ParamRole, Params};
use crate::tensor::{conv_out_dim, ActKind, BnMode, PoolKind, Shape, Tensor, BN_EPS, BN_MOMENTUM};
use crate::train::{cross_entropy_ohem, OhemConfig};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub name: String,
    /// Scalars compared.
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all compared scalars.
    pub rel_err: f64,
    pub passed: bool,
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks `g` at input `x` (named "x") with output `out`, in the given BN mode.
pub fn check_graph(
    name: &str,
    g: &Graph,
    out: NodeId,
    x: &Tensor<f64>,
    mode: BnMode,
    seed: u64,
    tol: f64,
) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::<f64>::init(g, seed);
    // break symmetric starting points such as all-equal fusion weights
    let names: Vec<String> = g
        .params
        .iter()
        .filter(|p| p.role == ParamRole::Weight)
        .map(|p| p.name.clone())
        .collect();
    for n in &names {
        for v in params.get_mut(n)?.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let feed = |x: &Tensor<f64>| BTreeMap::from([("x".to_string(), x.clone())]);
    let trace = forward(g, &params, &feed(x), mode)?;
    let proj = random_tensor(trace.value(out).shape(), &mut rng);
    let grads = backward_from(g, &params, &trace, vec![(out, proj.clone())])?;

    let loss = |p: &Params<f64>, x: &Tensor<f64>| -> Result<f64> {
        let t = forward(g, p, &feed(x), mode)?;
        Ok(t.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let h = DEFAULT_STEP;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();

    let gx = grads
        .inputs
        .get("x")
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut xv = x.clone();
    for i in 0..x.numel() {
        let v0 = xv.data()[i];
        xv.data_mut()[i] = v0 + h;
        let lp = loss(&params, &xv)?;
        xv.data_mut()[i] = v0 - h;
        let lm = loss(&params, &xv)?;
        xv.data_mut()[i] = v0;
        analytic.push(gx.data()[i]);
        numeric.push((lp - lm) / (2.0 * h));
    }
    for n in &names {
        let ga = grads.params[n].clone();
        for i in 0..ga.numel() {
            let v0 = params.get(n)?.data()[i];
            params.get_mut(n)?.data_mut()[i] = v0 + h;
            let lp = loss(&params, x)?;
            params.get_mut(n)?.data_mut()[i] = v0 - h;
            let lm = loss(&params, x)?;
            params.get_mut(n)?.data_mut()[i] = v0;
            analytic.push(ga.data()[i]);
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    let e = rel_err(&analytic, &numeric);
    Ok(GradcheckResult {
        name: name.to_string(),
        checked: analytic.len(),
        rel_err: e,
        passed: e < tol,
    })
}

type CaseBuilder = fn(&mut GraphBuilder, NodeId) -> NodeId;

fn kernel_cases() -> Vec<(&'static str, usize, usize, BnMode, CaseBuilder)> {
    vec![
        ("conv2d_3x3_s1", 3, 6, BnMode::Infer, |b, x| b.conv(x, 4, 3, 1)),
        ("conv2d_3x3_s2", 3, 6, BnMode::Infer, |b, x| b.conv(x, 2, 3, 2)),
        ("conv2d_1x1", 3, 5, BnMode::Infer, |b, x| b.conv(x, 4, 1, 1)),
        ("conv2d_5x5_s2", 2, 7, BnMode::Infer, |b, x| b.conv(x, 2, 5, 2)),
        ("depthwise_conv2d_3x3", 3, 6, BnMode::Infer, |b, x| b.dwconv(x, 3, 1)),
        ("depthwise_conv2d_5x5_s2", 2, 8, BnMode::Infer, |b, x| b.dwconv(x, 5, 2)),
        ("bias_add", 3, 4, BnMode::Infer, |b, x| b.bias(x)),
        ("batch_norm_train", 3, 4, BnMode::Train, |b, x| {
            b.bn(x, BN_EPS, BN_MOMENTUM)
        }),
        ("batch_norm_infer", 3, 4, BnMode::Infer, |b, x| {
            b.bn(x, BN_EPS, BN_MOMENTUM)
        }),
        ("relu", 3, 4, BnMode::Infer, |b, x| b.act(x, ActKind::Relu)),
        ("silu", 3, 4, BnMode::Infer, |b, x| b.act(x, ActKind::Silu)),
        ("sigmoid", 3, 4, BnMode::Infer, |b, x| b.act(x, ActKind::Sigmoid)),
        ("avg_pool_3x3_s2", 2, 6, BnMode::Infer, |b, x| {
            b.pool(x, PoolKind::Avg, 3, 2, 1)
        }),
        ("max_pool_3x3_s2", 2, 6, BnMode::Infer, |b, x| {
            b.pool(x, PoolKind::Max, 3, 2, 1)
        }),
        ("avg_pool_2x2", 2, 6, BnMode::Infer, |b, x| {
            b.pool(x, PoolKind::Avg, 2, 2, 0)
        }),
        ("global_avg_pool", 3, 5, BnMode::Infer, |b, x| b.global_avg_pool(x)),
        ("upsample_x2", 2, 4, BnMode::Infer, |b, x| b.upsample(x, 2)),
        ("upsample_x4", 2, 3, BnMode::Infer, |b, x| b.upsample(x, 4)),
        ("add", 3, 4, BnMode::Infer, |b, x| {
            let y = b.scoped("a", |b| b.conv(x, 3, 1, 1));
            b.add(&[x, y])
        }),
        ("channel_gate", 3, 4, BnMode::Infer, |b, x| {
            let s = b.global_avg_pool(x);
            let s = b.act(s, ActKind::Sigmoid);
            b.gate(x, s)
        }),
        ("fast_fusion", 3, 4, BnMode::Infer, |b, x| {
            let y = b.scoped("a", |b| b.conv(x, 3, 1, 1));
            b.fast_fusion(&[x, y], 1e-4)
        }),
        ("softmax_fusion", 3, 4, BnMode::Infer, |b, x| {
            let y = b.scoped("a", |b| b.conv(x, 3, 1, 1));
            let z = b.scoped("c", |b| b.conv(x, 3, 3, 1));
            b.softmax_fusion(&[x, y, z])
        }),
        ("fixed_fusion", 3, 4, BnMode::Infer, |b, x| {
            let y = b.scoped("a", |b| b.conv(x, 3, 1, 1));
            b.fixed_fusion(&[x, y], vec![0.3, -1.7])
        }),
        ("sum_all", 3, 4, BnMode::Infer, |b, x| b.sum_all(x)),
    ]
}

/// One result per differentiable graph kernel, plus the OHEM loss.
pub fn check_kernels(seed: u64, tol: f64) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for (i, (name, c, hw, mode, build)) in kernel_cases().into_iter().enumerate() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", c);
        let y = build(&mut b, x);
        b.output("y", y);
        let g = b.finish()?;
        let case_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed ^ 0x5eed);
        let xt = random_tensor(Shape::new(2, c, hw, hw), &mut rng);
        out.push(check_graph(name, &g, y, &xt, mode, case_seed, tol)?);
    }
    out.push(check_ohem(seed, tol)?);
    Ok(out)
}

/// The loss gradient with respect to logits, with some pixels dropped by mining and some ignored.
pub fn check_ohem(seed: u64, tol: f64) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e4e);
    let k = 4;
    let logits = random_tensor(Shape::new(2, k, 3, 3), &mut rng).scale(3.0);
    let labels: Vec<u8> = (0..18)
        .map(|i| if i % 7 == 3 { 255 } else { rng.random_range(0..k as u8) })
        .collect();
    let cfg = OhemConfig {
        prob_threshold: 0.7,
        min_kept_fraction: 0.25,
        ignore_index: 255,
    };
    let base = cross_entropy_ohem(&logits, &labels, &cfg)?;
    let h = DEFAULT_STEP;
    let mut numeric = Vec::new();
    let mut l = logits.clone();
    for i in 0..logits.numel() {
        let v0 = l.data()[i];
        l.data_mut()[i] = v0 + h;
        let lp = cross_entropy_ohem(&l, &labels, &cfg)?.loss;
        l.data_mut()[i] = v0 - h;
        let lm = cross_entropy_ohem(&l, &labels, &cfg)?.loss;
        l.data_mut()[i] = v0;
        numeric.push((lp - lm) / (2.0 * h));
    }
    let e = rel_err(base.grad.data(), &numeric);
    Ok(GradcheckResult {
        name: "ohem_cross_entropy".into(),
        checked: numeric.len(),
        rel_err: e,
        passed: e < tol,
    })
}

/// A random DAG of at most `max_nodes` nodes drawn from every graph kernel.
pub fn random_graph(seed: u64, max_nodes: usize) -> Result<(Graph, NodeId, Shape, BnMode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = rng.random_range(1..=3);
    let hw0 = [4, 6, 8][rng.random_range(0..3)];
    let mode = if rng.random_bool(0.5) {
        BnMode::Train
    } else {
        BnMode::Infer
    };
    let mut b = GraphBuilder::new();
    let x = b.input("x", c0);
    // (node, channels, spatial)
    let mut pool: Vec<(NodeId, usize, usize)> = vec![(x, c0, hw0)];
    let mut i = 0;
    while b.len() + 3 <= max_nodes {
        i += 1;
        let (src, c, hw) = pool[rng.random_range(0..pool.len())];
        let same: Vec<NodeId> = pool
            .iter()
            .filter(|&&(id, cc, s)| id != src && cc == c && s == hw)
            .map(|p| p.0)
            .collect();
        let choice = rng.random_range(0..12);
        let made = b.scoped(format!("n{i}"), |b| -> Option<(NodeId, usize, usize)> {
            match choice {
                0 => {
                    let oc = rng.random_range(1..=4);
                    let k = [1, 3][rng.random_range(0..2)];
                    let s = if hw >= 4 && hw % 2 == 0 && rng.random_bool(0.3) {
                        2
                    } else {
                        1
                    };
                    let oh = conv_out_dim(hw, k, s, k / 2)?;
                    Some((b.conv(src, oc, k, s), oc, oh))
                }
                1 => Some((b.dwconv(src, 3, 1), c, hw)),
                2 => Some((b.bias(src), c, hw)),
                3 if hw >= 2 => Some((b.bn(src, BN_EPS, BN_MOMENTUM), c, hw)),
                4 => {
                    let kind = [ActKind::Relu, ActKind::Silu, ActKind::Sigmoid][rng.random_range(0..3)];
                    Some((b.act(src, kind), c, hw))
                }
                5 if hw >= 4 && hw % 2 == 0 => {
                    let kind = if rng.random_bool(0.5) {
                        PoolKind::Avg
                    } else {
                        PoolKind::Max
                    };
                    Some((b.pool(src, kind, 3, 2, 1), c, hw / 2))
                }
                6 if hw <= 6 => Some((b.upsample(src, 2), c, hw * 2)),
                7 if !same.is_empty() => {
                    let other = same[rng.random_range(0..same.len())];
                    Some((b.add(&[src, other]), c, hw))
                }
                8 if !same.is_empty() => {
                    let other = same[rng.random_range(0..same.len())];
                    Some((b.fast_fusion(&[src, other], 1e-4), c, hw))
                }
                9 if !same.is_empty() => {
                    let other = same[rng.random_range(0..same.len())];
                    Some((b.softmax_fusion(&[src, other]), c, hw))
                }
                10 if !same.is_empty() => {
                    let other = same[rng.random_range(0..same.len())];
                    let w = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    Some((b.fixed_fusion(&[src, other], w), c, hw))
                }
                11 => {
                    let s = b.global_avg_pool(src);
                    let s = b.act(s, ActKind::Sigmoid);
                    Some((b.gate(src, s), c, hw))
                }
                _ => None,
            }
        });
        if let Some(p) = made {
            pool.push(p);
        }
    }
    // consume the last two nodes so most of the graph is reachable
    let (last, c, hw) = *pool.last().expect("input node");
    let out = match pool.iter().rev().skip(1).find(|p| p.1 == c && p.2 == hw) {
        Some(&(other, _, _)) if b.len() < max_nodes => b.add(&[last, other]),
        _ => last,
    };
    b.output("y", out);
    Ok((b.finish()?, out, Shape::new(2, c0, hw0, hw0), mode))
}

/// Gradient checks of `count` random graphs with at most 20 nodes.
pub fn check_random_graphs(seed: u64, count: usize, tol: f64) -> Result<Vec<GradcheckResult>> {
    (0..count)
        .map(|i| {
            let gs = seed.wrapping_mul(7919).wrapping_add(i as u64);
            let (g, out, shape, mode) = random_graph(gs, 20)?;
            let mut rng = ChaCha8Rng::seed_from_u64(gs ^ 0xabc);
            let x = random_tensor(shape, &mut rng);
            check_graph(&format!("random_graph_{i}"), &g, out, &x, mode, gs, tol)
        })
        .collect()
}
