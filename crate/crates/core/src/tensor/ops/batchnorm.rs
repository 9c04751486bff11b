use super::{BackwardCtx, LocalGrads};
use crate::error::{Error, Result};
use crate::tensor::graph::Op;
use crate::tensor::{Element, Graph, NodeId, Tensor};

/// Statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    /// Normalise by the statistics of the current batch.
    Batch,
    /// Normalise by fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed in training mode; `var` is the
/// unbiased estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct BnSaved {
    train: bool,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Element> Graph<T> {
    /// Batch normalisation of an NCHW tensor with per-channel `gamma`/`beta`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchMoments>)> {
        let xv = self.check(x)?;
        let (n, c, h, w) = xv.dims4("batch_norm")?;
        for p in [gamma, beta] {
            let s = self.check(p)?.shape();
            if s != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    expected: vec![c],
                    got: s.to_vec(),
                });
            }
        }
        let hw = h * w;
        let m = n * hw;
        let data = xv.data();
        let (mean, var, moments) = match stats {
            BnStats::Batch => {
                if m < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "training mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += data[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += data[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(moments))
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::invalid("batch_norm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.check(gamma)?.data(), self.check(beta)?.data());
        let mut out = Vec::with_capacity(data.len());
        for b in 0..n {
            for ch in 0..c {
                let (mu, is, gm, be) = (mean[ch], inv_std[ch], g[ch].as_f64(), bt[ch].as_f64());
                let plane = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                out.extend(plane.iter().map(|&v| T::from_f64((v.as_f64() - mu) * is * gm + be)));
            }
        }
        let saved = BnSaved {
            train: moments.is_some(),
            mean,
            inv_std,
        };
        let id = self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::BatchNorm(saved),
            vec![x, gamma, beta],
        )?;
        Ok((id, moments))
    }
}

pub(crate) fn backward<T: Element>(s: &BnSaved, ctx: &BackwardCtx<'_, T>) -> LocalGrads<T> {
    let x = ctx.inputs[0];
    let gamma = ctx.inputs[1].data();
    let shape = x.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let g = ctx.grad[i].as_f64();
                let xh = (xd[i].as_f64() - s.mean[ch]) * s.inv_std[ch];
                sum_g[ch] += g;
                sum_gx[ch] += g * xh;
            }
        }
    }
    let dx = ctx.need[0].then(|| {
        let mut dx = Vec::with_capacity(xd.len());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let k = gamma[ch].as_f64() * s.inv_std[ch];
                for i in off..off + hw {
                    let g = ctx.grad[i].as_f64();
                    let v = if s.train {
                        let xh = (xd[i].as_f64() - s.mean[ch]) * s.inv_std[ch];
                        k * (g - sum_g[ch] / m - xh * sum_gx[ch] / m)
                    } else {
                        k * g
                    };
                    dx.push(T::from_f64(v));
                }
            }
        }
        dx
    });
    let dgamma = ctx.need[1].then(|| sum_gx.iter().map(|&v| T::from_f64(v)).collect());
    let dbeta = ctx.need[2].then(|| sum_g.iter().map(|&v| T::from_f64(v)).collect());
    vec![dx, dgamma, dbeta]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_stats(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let s = t.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn train_mode_output_has_beta_mean_and_gamma_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::randn([4, 2, 5, 5], 3.0, &mut rng));
        let gamma = g.param(Tensor::from_f64([2], &[2.0, -0.5]).unwrap());
        let beta = g.param(Tensor::from_f64([2], &[1.0, -3.0]).unwrap());
        let (y, moments) = g.batch_norm(x, gamma, beta, BnStats::Batch, 1e-5).unwrap();
        assert!(moments.is_some());
        for (ch, (gm, bt)) in [(2.0, 1.0), (-0.5, -3.0)].into_iter().enumerate() {
            let (mean, std) = channel_stats(g.value(y), ch);
            assert!((mean - bt).abs() < 1e-4);
            assert!((std - f64::abs(gm)).abs() < 1e-4);
        }
    }

    #[test]
    fn infer_mode_with_unit_stats_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = Tensor::<f64>::randn([2, 2, 3, 3], 1.0, &mut rng);
        for eps in [0.0, 1e-5] {
            let mut g = Graph::<f64>::new();
            let x = g.input(xt.clone());
            let gamma = g.param(Tensor::from_f64([2], &[1.5, 0.5]).unwrap());
            let beta = g.param(Tensor::from_f64([2], &[0.1, 0.2]).unwrap());
            let stats = BnStats::Running {
                mean: &[0.0, 0.0],
                var: &[1.0, 1.0],
            };
            let (y, _) = g.batch_norm(x, gamma, beta, stats, eps).unwrap();
            for (i, (&o, &v)) in g.value(y).data().iter().zip(xt.data()).enumerate() {
                let ch = (i / 9) % 2;
                let scaled = [1.5, 0.5][ch] * v;
                // (1 + eps)^-1/2 differs from 1 by at most eps / 2
                let tol = 1e-6 + scaled.abs() * eps / 2.0;
                assert!((o - (scaled + [0.1, 0.2][ch])).abs() <= tol);
            }
        }
    }

    #[test]
    fn single_value_per_channel_fails_in_train_mode() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros([1, 2, 1, 1]));
        let gamma = g.param(Tensor::full([2], 1.0));
        let beta = g.param(Tensor::zeros([2]));
        assert!(g.batch_norm(x, gamma, beta, BnStats::Batch, 1e-5).is_err());
    }
}
