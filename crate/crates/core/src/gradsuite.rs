//! Finite-difference verification of every differentiable operation and
//! block, on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{self, InceptionConfig, Mode, ParamStore, Session};
use crate::tensor::{
    grad_check_sampled, BnStats, GradCheckReport, Graph, NodeId, Padding, PoolKind, ReduceKind, Tensor,
};

/// Default pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Coordinates compared per parameter tensor for block-level checks.
const BLOCK_COORDS: usize = 6;

/// Outcome for one operation over all its instances.
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    /// Coordinates skipped because of a kink inside the stencil.
    pub nonsmooth: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// `sum(y * r)` for a fixed random `r`, so every output coordinate carries a
/// distinct weight.
fn probe(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng));
    let m = g.mul(y, r)?;
    g.sum_all(m)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so kinks (relu, max) sit far from the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Distinct values in random order, so max pooling has a unique winner
/// separated by far more than the finite-difference step.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| i as f64 * 0.05 - 1.0).collect()).expect("shape matches")
}

fn op_case(rng: &mut ChaCha8Rng, name: &str) -> (Vec<Tensor<f64>>, Builder) {
    let s: u64 = rng.random();
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let x4 = [n, c, h, w];
    match name {
        "conv2d" => {
            let o = rng.random_range(1..=3);
            let k = *[1usize, 3, 5].get(rng.random_range(0..3)).unwrap_or(&3);
            let stride = rng.random_range(1..=2);
            let pad = if rng.random::<bool>() {
                Padding::Same
            } else {
                Padding::Valid
            };
            let k = if pad == Padding::Valid { k.min(h).min(w) } else { k };
            (
                vec![randn(&x4, rng), randn(&[o, c, k, k], rng), randn(&[o], rng)],
                Box::new(move |g, p| {
                    let y = g.conv2d(p[0], p[1], Some(p[2]), stride, pad)?;
                    probe(g, y, s)
                }),
            )
        }
        "pool2d_max" => {
            let stride = rng.random_range(1..=2);
            (
                vec![distinct(&x4, rng)],
                Box::new(move |g, p| {
                    let y = g.pool2d(p[0], PoolKind::Max, 2, stride, Padding::Valid)?;
                    probe(g, y, s)
                }),
            )
        }
        "pool2d_avg" => {
            let pad = if rng.random::<bool>() {
                Padding::Same
            } else {
                Padding::Valid
            };
            (
                vec![randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = g.pool2d(p[0], PoolKind::Avg, 3, 1, pad)?;
                    probe(g, y, s)
                }),
            )
        }
        "add" | "sub" | "mul" => {
            let kind = name.to_string();
            (
                vec![randn(&x4, rng), randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = match kind.as_str() {
                        "add" => g.add(p[0], p[1])?,
                        "sub" => g.sub(p[0], p[1])?,
                        _ => g.mul(p[0], p[1])?,
                    };
                    probe(g, y, s)
                }),
            )
        }
        "relu" => (
            vec![away_from_zero(&x4, rng)],
            Box::new(move |g, p| {
                let y = g.relu(p[0])?;
                probe(g, y, s)
            }),
        ),
        "exp" | "sigmoid" => {
            let kind = name.to_string();
            (
                vec![randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = if kind == "exp" { g.exp(p[0])? } else { g.sigmoid(p[0])? };
                    probe(g, y, s)
                }),
            )
        }
        "scale" | "add_scalar" => {
            let k: f64 = rng.random_range(-2.0..2.0);
            let kind = name.to_string();
            (
                vec![randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = if kind == "scale" {
                        g.scale(p[0], k)?
                    } else {
                        g.add_scalar(p[0], k)?
                    };
                    // add_scalar has unit local gradient; square to make it non-trivial
                    let y = g.mul(y, y)?;
                    probe(g, y, s)
                }),
            )
        }
        "concat" => {
            let c2 = rng.random_range(1..=3);
            let axis = rng.random_range(0..4);
            let mut other = x4;
            other[axis] = c2;
            (
                vec![randn(&x4, rng), randn(&other, rng)],
                Box::new(move |g, p| {
                    let y = g.concat(&[p[0], p[1]], axis)?;
                    probe(g, y, s)
                }),
            )
        }
        "slice" => {
            let axis = rng.random_range(0..4);
            let len = rng.random_range(1..=x4[axis]);
            let start = rng.random_range(0..=x4[axis] - len);
            (
                vec![randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = g.slice(p[0], axis, start, len)?;
                    probe(g, y, s)
                }),
            )
        }
        "reshape" => (
            vec![randn(&x4, rng)],
            Box::new(move |g, p| {
                let y = g.reshape(p[0], &[n * c, h * w])?;
                let y = g.softmax(y)?;
                probe(g, y, s)
            }),
        ),
        "dense" => {
            let (d, k) = (rng.random_range(1..=5), rng.random_range(1..=5));
            (
                vec![randn(&[n, d], rng), randn(&[d, k], rng), randn(&[k], rng)],
                Box::new(move |g, p| {
                    let y = g.dense(p[0], p[1], Some(p[2]))?;
                    probe(g, y, s)
                }),
            )
        }
        "softmax" | "log_softmax" => {
            let k = rng.random_range(1..=6);
            let log = name == "log_softmax";
            (
                vec![randn(&[n + 1, k], rng)],
                Box::new(move |g, p| {
                    let y = if log { g.log_softmax(p[0])? } else { g.softmax(p[0])? };
                    probe(g, y, s)
                }),
            )
        }
        "reduce_sum" | "reduce_mean" => {
            let kind = if name == "reduce_sum" {
                ReduceKind::Sum
            } else {
                ReduceKind::Mean
            };
            let axes: Vec<usize> = (0..4).filter(|_| rng.random::<bool>()).collect();
            (
                vec![randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = g.reduce(p[0], kind, &axes)?;
                    let y = g.mul(y, y)?;
                    probe(g, y, s)
                }),
            )
        }
        "batch_norm_train" => {
            let x = [n + 1, c, h, w];
            (
                vec![randn(&x, rng), randn(&[c], rng), randn(&[c], rng)],
                Box::new(move |g, p| {
                    let (y, _) = g.batch_norm(p[0], p[1], p[2], BnStats::Batch, nn::BN_EPS)?;
                    probe(g, y, s)
                }),
            )
        }
        "batch_norm_infer" => {
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            (
                vec![randn(&x4, rng), randn(&[c], rng), randn(&[c], rng)],
                Box::new(move |g, p| {
                    let stats = BnStats::Running { mean: &mean, var: &var };
                    let (y, _) = g.batch_norm(p[0], p[1], p[2], stats, nn::BN_EPS)?;
                    probe(g, y, s)
                }),
            )
        }
        "channel_scale" => (
            vec![randn(&x4, rng), randn(&[n, c], rng)],
            Box::new(move |g, p| {
                let y = g.channel_scale(p[0], p[1])?;
                probe(g, y, s)
            }),
        ),
        "upsample" => {
            let f = rng.random_range(1..=3);
            (
                vec![randn(&x4, rng)],
                Box::new(move |g, p| {
                    let y = g.upsample(p[0], f)?;
                    probe(g, y, s)
                }),
            )
        }
        "global_avg_pool" => (
            vec![randn(&x4, rng)],
            Box::new(move |g, p| {
                let y = g.global_avg_pool(p[0])?;
                probe(g, y, s)
            }),
        ),
        "conv_relu_mean" => {
            let o = rng.random_range(1..=3);
            (
                vec![randn(&x4, rng), randn(&[o, c, 3, 3], rng), randn(&[o], rng)],
                Box::new(move |g, p| {
                    let y = g.conv2d(p[0], p[1], Some(p[2]), 1, Padding::Same)?;
                    let y = g.relu(y)?;
                    g.mean_all(y)
                }),
            )
        }
        "mlp3" => {
            let d = [
                rng.random_range(2..=5),
                rng.random_range(2..=5),
                rng.random_range(2..=5),
                3,
            ];
            let mut params = vec![randn(&[n + 1, d[0]], rng)];
            for l in 0..3 {
                params.push(randn(&[d[l], d[l + 1]], rng));
                params.push(randn(&[d[l + 1]], rng));
            }
            (
                params,
                Box::new(move |g, p| {
                    let mut y = p[0];
                    for l in 0..3 {
                        y = g.dense(y, p[1 + 2 * l], Some(p[2 + 2 * l]))?;
                        if l < 2 {
                            y = g.sigmoid(y)?;
                        }
                    }
                    let y = g.log_softmax(y)?;
                    probe(g, y, s)
                }),
            )
        }
        other => unreachable!("unknown op case {other}"),
    }
}

/// Operation-level cases, in reporting order.
pub const OP_CASES: &[&str] = &[
    "conv2d",
    "pool2d_max",
    "pool2d_avg",
    "add",
    "sub",
    "mul",
    "relu",
    "exp",
    "sigmoid",
    "scale",
    "add_scalar",
    "concat",
    "slice",
    "reshape",
    "dense",
    "softmax",
    "log_softmax",
    "reduce_sum",
    "reduce_mean",
    "global_avg_pool",
    "batch_norm_train",
    "batch_norm_infer",
    "channel_scale",
    "upsample",
    "conv_relu_mean",
    "mlp3",
];

/// Block-level cases, in reporting order.
pub const BLOCK_CASES: &[&str] = &[
    "residual_inception",
    "factorized_residual_inception",
    "partial_attention",
];

/// Gradient check of a [`Session`]-built scalar over every parameter the
/// builder creates (plus anything pre-seeded in `store`).
pub fn grad_check_session<F>(
    store: &ParamStore<f64>,
    build: F,
    tolerance: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<NodeId>,
{
    let mut init = store.clone();
    {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut init, Mode::Train, seed);
        build(&mut s)?;
    }
    let names = init.param_names();
    let params: Vec<Tensor<f64>> = names.iter().map(|n| init.param(n).expect("listed").clone()).collect();
    grad_check_sampled(
        &params,
        |g, ids| {
            let mut st = init.clone();
            let mut s = Session::new(g, &mut st, Mode::Train, seed);
            for (name, &id) in names.iter().zip(ids) {
                s.bind(name.clone(), id);
            }
            build(&mut s)
        },
        tolerance,
        max_per_tensor,
        seed,
    )
}

fn block_case(name: &str, rng: &mut ChaCha8Rng, tolerance: f64) -> Result<GradCheckReport> {
    let seed: u64 = rng.random();
    let mut store = ParamStore::<f64>::new(seed);
    let n = 2;
    match name {
        "residual_inception" | "factorized_residual_inception" => {
            let cin = rng.random_range(2..=4);
            let cout = rng.random_range(2..=5);
            let width = rng.random_range(1..=3);
            let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
            let cfg = InceptionConfig::uniform(cin, cout, width, name.starts_with("factorized"));
            store.insert_param("x", randn(&[n, cin, h, w], rng));
            grad_check_session(
                &store,
                |s| {
                    let x = s.param("x", &[n, cin, h, w], nn::Init::Zeros)?;
                    let y = nn::residual_inception(s, x, "blk", &cfg)?;
                    probe(s.graph, y, seed)
                },
                tolerance,
                BLOCK_COORDS,
                seed,
            )
        }
        "partial_attention" => {
            let c = rng.random_range(1..=3);
            let t = rng.random_range(2..=3);
            let sources: Vec<[usize; 4]> = (0..rng.random_range(1..=3))
                .map(|_| {
                    let f = rng.random_range(1..=2);
                    [n, rng.random_range(1..=3), t * f, t * f]
                })
                .collect();
            for (i, sh) in sources.iter().enumerate() {
                store.insert_param(format!("src{i}"), randn(sh, rng));
            }
            store.insert_param("tgt", randn(&[n, c, t, t], rng));
            grad_check_session(
                &store,
                |s| {
                    let src = sources
                        .iter()
                        .enumerate()
                        .map(|(i, sh)| s.param(&format!("src{i}"), sh, nn::Init::Zeros))
                        .collect::<Result<Vec<_>>>()?;
                    let tgt = s.param("tgt", &[n, c, t, t], nn::Init::Zeros)?;
                    let out = nn::partial_attention(s, &src, tgt, "attn")?;
                    probe(s.graph, out.output, seed)
                },
                tolerance,
                BLOCK_COORDS,
                seed,
            )
        }
        other => unreachable!("unknown block case {other}"),
    }
}

fn run_case(name: &'static str, instances: usize, seed: u64, tolerance: f64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::nn::fnv1a(name.as_bytes()));
    let mut out = OpCheck {
        name,
        instances,
        checked: 0,
        nonsmooth: 0,
        max_rel_err: 0.0,
        pass: true,
    };
    for _ in 0..instances {
        let report = if BLOCK_CASES.contains(&name) {
            block_case(name, &mut rng, tolerance)?
        } else {
            let (params, build) = op_case(&mut rng, name);
            grad_check_sampled(&params, build, tolerance, usize::MAX, 0)?
        };
        out.checked += report.checked;
        out.nonsmooth += report.nonsmooth;
        out.max_rel_err = out.max_rel_err.max(report.max_rel_err);
        out.pass &= report.pass;
    }
    Ok(out)
}

/// Check one named case over `instances` seeded instances.
pub fn check(name: &str, instances: usize, seed: u64, tolerance: f64) -> Result<OpCheck> {
    let name = OP_CASES
        .iter()
        .chain(BLOCK_CASES)
        .find(|&&c| c == name)
        .copied()
        .ok_or_else(|| crate::Error::Config(format!("unknown gradient-check case `{name}`")))?;
    run_case(name, instances, seed, tolerance)
}

/// Every operation and block case.
pub fn run_all(instances: usize, seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    OP_CASES
        .iter()
        .chain(BLOCK_CASES)
        .map(|&name| run_case(name, instances, seed, tolerance))
        .collect()
}
