//! Training objectives built from graph ops so they differentiate for free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NodeId, ReduceKind, Tensor};

/// `ε/K` everywhere plus `1 − ε` on the true class.
pub fn label_smooth<T: Element>(labels: &[usize], k: usize, epsilon: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(
            "label_smooth",
            format!("epsilon {epsilon} outside [0, 1)"),
        ));
    }
    let off = epsilon / k as f64;
    let mut data = vec![T::from_f64(off); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(
                "label_smooth",
                format!("label {l} at row {i} outside 0..{k}"),
            ));
        }
        data[i * k + l] = T::from_f64(off + 1.0 - epsilon);
    }
    Tensor::new([labels.len(), k], data)
}

/// `Σ w_n · CE(softmax(logits_n), smooth(label_n)) / Σ w_n`.
pub fn weighted_ce_loss<T: Element>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
    weights: &[f32],
    epsilon: f64,
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::invalid(
            "weighted_ce_loss",
            format!("logits must be N x K, got {shape:?}"),
        ));
    };
    if labels.len() != n || weights.len() != n {
        return Err(Error::ShapeMismatch {
            op: "weighted_ce_loss",
            expected: vec![n],
            got: vec![labels.len(), weights.len()],
        });
    }
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::invalid(
            "weighted_ce_loss",
            format!("weight {} at row {i} is not positive", weights[i]),
        ));
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut targets = label_smooth::<T>(labels, k, epsilon)?;
    for (row, &w) in targets.data_mut().chunks_mut(k).zip(weights) {
        let s = -(w as f64) / total;
        row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * s));
    }
    let logp = g.log_softmax(logits)?;
    let t = g.input(targets);
    let prod = g.mul(logp, t)?;
    g.sum_all(prod)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossConfig {
    /// KL weight.
    pub beta: f64,
    /// Classification weight.
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for VaeLossConfig {
    fn default() -> Self {
        VaeLossConfig {
            beta: 1.0,
            lambda: 1.0,
            epsilon: 0.1,
        }
    }
}

/// Graph nodes of each term.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossNodes {
    pub total: NodeId,
    pub mse: NodeId,
    pub kl: NodeId,
    pub ce: NodeId,
}

/// `MSE(recon, input) + β·KL + λ·CE`, with
/// `KL = −½ · mean_n Σ_l (1 + logvar − mu² − exp(logvar))`.
#[allow(clippy::too_many_arguments)]
pub fn vae_total_loss<T: Element>(
    g: &mut Graph<T>,
    recon: NodeId,
    input: NodeId,
    mu: NodeId,
    logvar: NodeId,
    logits: NodeId,
    labels: &[usize],
    weights: &[f32],
    cfg: &VaeLossConfig,
) -> Result<VaeLossNodes> {
    if g.shape(recon) != g.shape(input) || g.shape(mu) != g.shape(logvar) {
        return Err(Error::ShapeMismatch {
            op: "vae_total_loss",
            expected: g.shape(recon).to_vec(),
            got: g.shape(input).to_vec(),
        });
    }
    let diff = g.sub(recon, input)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean_all(sq)?;
    let kl = kl_divergence(g, mu, logvar)?;
    let ce = weighted_ce_loss(g, logits, labels, weights, cfg.epsilon)?;
    let bkl = g.scale(kl, cfg.beta)?;
    let lce = g.scale(ce, cfg.lambda)?;
    let partial = g.add(mse, bkl)?;
    let total = g.add(partial, lce)?;
    Ok(VaeLossNodes { total, mse, kl, ce })
}

/// KL divergence of `N(mu, exp(logvar))` from `N(0, 1)`, summed over the
/// latent axis and averaged over the batch.
pub fn kl_divergence<T: Element>(g: &mut Graph<T>, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let n = g.shape(mu)[0];
    let one_plus = g.add_scalar(logvar, 1.0)?;
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let a = g.sub(one_plus, mu2)?;
    let b = g.sub(a, var)?;
    let per_sample = g.reduce(b, ReduceKind::Sum, &[1])?;
    let s = g.sum_all(per_sample)?;
    g.scale(s, -0.5 / n as f64)
}
