//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Steps tried in order when the stencil straddles a kink (relu at zero, a
/// max-pool switch): a smaller step usually clears it.
const FALLBACK_STEPS: [f64; 1] = [1e-6];

/// The stencil counts as smooth when the one-sided differences agree to
/// within this fraction of the central difference.
const SMOOTH_RATIO: f64 = 1e-3;

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// Coordinates left out because the loss is not differentiable within
    /// the stencil at every step tried.
    pub nonsmooth: usize,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(params: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let l = v.item();
    if !l.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check loss".into(),
        });
    }
    Ok(l)
}

/// Central difference at `step` if the one-sided differences agree.
fn central_difference<F>(
    work: &mut [Tensor<f64>],
    pi: usize,
    ei: usize,
    base: f64,
    step: f64,
    build: &F,
) -> Result<Option<f64>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let orig = work[pi].data()[ei];
    work[pi].data_mut()[ei] = orig + step;
    let plus = eval_loss(work, build);
    work[pi].data_mut()[ei] = orig - step;
    let minus = eval_loss(work, build);
    work[pi].data_mut()[ei] = orig;
    let (plus, minus) = (plus?, minus?);
    let central = (plus - minus) / (2.0 * step);
    let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
    let smooth = (fwd - bwd).abs() <= SMOOTH_RATIO * central.abs().max(REL_ERR_FLOOR);
    Ok(smooth.then_some(central))
}

/// Compare backward gradients of every element of `params` against central
/// differences; passes iff the largest relative error is below `tolerance`.
///
/// Coordinates where the loss has a kink inside the stencil are retried at a
/// smaller step and, failing that, counted in
/// [`nonsmooth`](GradCheckReport::nonsmooth) instead of compared.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_sampled(params, build, tolerance, usize::MAX, 0)
}

/// As [`grad_check`] but compares at most `max_per_tensor` seeded-random
/// coordinates of each parameter.
pub fn grad_check_sampled<F>(
    params: &[Tensor<f64>],
    build: F,
    tolerance: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        nonsmooth: 0,
        worst: None,
        pass: true,
    };
    let mut work = params.to_vec();
    let base = eval_loss(&work, &build)?;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("every parameter has a gradient");
        let n = params[pi].numel();
        let coords: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for ei in coords {
            let mut numeric = None;
            for step in std::iter::once(FD_STEP).chain(FALLBACK_STEPS) {
                numeric = central_difference(&mut work, pi, ei, base, step, &build)?;
                if numeric.is_some() {
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.nonsmooth += 1;
                continue;
            };
            let a = analytic.data()[ei];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((pi, ei));
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}
