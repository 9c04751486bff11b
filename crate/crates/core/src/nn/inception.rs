use serde::{Deserialize, Serialize};

use super::Session;
use crate::error::{Error, Result};
use crate::tensor::{Element, NodeId, Padding, PoolKind};

/// Branch widths of a residual inception block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionConfig {
    pub in_channels: usize,
    pub b1x1: usize,
    pub b3x3_reduce: usize,
    pub b3x3: usize,
    pub b5x5_reduce: usize,
    pub b5x5: usize,
    pub bpool: usize,
    pub out_channels: usize,
    /// Replace every k×k convolution by 1×k followed by k×1.
    pub factorized: bool,
}

impl InceptionConfig {
    /// Every branch `width` wide.
    pub fn uniform(in_channels: usize, out_channels: usize, width: usize, factorized: bool) -> Self {
        InceptionConfig {
            in_channels,
            b1x1: width,
            b3x3_reduce: width,
            b3x3: width,
            b5x5_reduce: width,
            b5x5: width,
            bpool: width,
            out_channels,
            factorized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.in_channels,
            self.b1x1,
            self.b3x3_reduce,
            self.b3x3,
            self.b5x5_reduce,
            self.b5x5,
            self.bpool,
            self.out_channels,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(format!("inception widths must be positive: {self:?}")));
        }
        if self.b3x3_reduce != self.b3x3 || self.b5x5_reduce != self.b5x5 {
            return Err(Error::Config(format!(
                "inner residuals need reduce width == branch width (3x3: {} vs {}, 5x5: {} vs {})",
                self.b3x3_reduce, self.b3x3, self.b5x5_reduce, self.b5x5
            )));
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        self.b1x1 + self.b3x3 + self.b5x5 + self.bpool
    }
}

/// k×k conv-bn-relu, or its 1×k → k×1 factorization. The factorized middle
/// width is `min(in, out)`, which keeps it strictly cheaper for k ≥ 3.
fn spatial<T: Element>(
    s: &mut Session<'_, T>,
    x: NodeId,
    name: &str,
    out: usize,
    k: usize,
    factorized: bool,
    relu: bool,
) -> Result<NodeId> {
    if factorized && k > 1 {
        let mid = s.graph.shape(x)[1].min(out);
        let y = s.conv_bn(x, &format!("{name}_1x{k}"), mid, (1, k), 1, true)?;
        s.conv_bn(y, &format!("{name}_{k}x1"), out, (k, 1), 1, relu)
    } else {
        s.conv_bn(x, name, out, (k, k), 1, relu)
    }
}

/// Residual inception block; output has `cfg.out_channels` channels and the
/// input's spatial size.
///
/// Branches: 1×1; 1×1 → 3×3 with an inner residual; 1×1 → 5×5 with an inner
/// residual; 3×3 average pool → 1×1. The concatenation passes through a 3×3
/// anti-alias conv and is added to the input, projected by a biased 1×1 conv
/// (`{name}.proj`) when channel counts differ.
pub fn residual_inception<T: Element>(
    s: &mut Session<'_, T>,
    x: NodeId,
    name: &str,
    cfg: &InceptionConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let cin = s.graph.value(x).dims4("residual_inception")?.1;
    if cin != cfg.in_channels {
        return Err(Error::Config(format!(
            "block `{name}` expects {} input channels, got {cin}",
            cfg.in_channels
        )));
    }
    let f = cfg.factorized;
    let b1 = s.conv_bn(x, &format!("{name}.b1"), cfg.b1x1, (1, 1), 1, true)?;

    let r3 = s.conv_bn(x, &format!("{name}.b3_reduce"), cfg.b3x3_reduce, (1, 1), 1, true)?;
    let c3 = spatial(s, r3, &format!("{name}.b3"), cfg.b3x3, 3, f, true)?;
    let b3 = s.graph.add(r3, c3)?;

    let r5 = s.conv_bn(x, &format!("{name}.b5_reduce"), cfg.b5x5_reduce, (1, 1), 1, true)?;
    let c5 = spatial(s, r5, &format!("{name}.b5"), cfg.b5x5, 5, f, true)?;
    let b5 = s.graph.add(r5, c5)?;

    let pooled = s.graph.pool2d(x, PoolKind::Avg, 3, 1, Padding::Same)?;
    let bp = s.conv_bn(pooled, &format!("{name}.bpool"), cfg.bpool, (1, 1), 1, true)?;

    let joined = s.graph.concat_channels(&[b1, b3, b5, bp])?;
    let mixed = spatial(s, joined, &format!("{name}.alias"), cfg.out_channels, 3, f, false)?;
    let shortcut = if cin == cfg.out_channels {
        x
    } else {
        s.conv(x, &format!("{name}.proj"), cfg.out_channels, (1, 1), 1, true)?
    };
    s.graph.add(mixed, shortcut)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::{Graph, Tensor};

    fn forward(x: &Tensor<f64>, cfg: &InceptionConfig, store: &mut ParamStore<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let y = {
            let mut s = Session::new(&mut g, store, Mode::Train, 0);
            let xi = s.graph.input(x.clone());
            residual_inception(&mut s, xi, "blk", cfg).unwrap()
        };
        g.value(y).clone()
    }

    fn zero_all_but(store: &mut ParamStore<f64>, keep: Option<&str>) {
        store
            .params_mut()
            .filter(|(k, _)| !keep.is_some_and(|p| k.starts_with(p)) && !k.ends_with(".gamma"))
            .for_each(|(_, t)| t.data_mut().fill(0.0));
    }

    #[test]
    fn shapes_for_both_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 3, 7, 9], 1.0, &mut rng);
        for f in [false, true] {
            let cfg = InceptionConfig::uniform(3, 10, 2, f);
            let y = forward(&x, &cfg, &mut ParamStore::new(0));
            assert_eq!(y.shape(), &[2, 10, 7, 9]);
        }
    }

    #[test]
    fn zero_branches_reduce_to_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng);
        for f in [false, true] {
            // matching channels: identity shortcut
            let cfg = InceptionConfig::uniform(4, 4, 3, f);
            let mut store = ParamStore::new(1);
            forward(&x, &cfg, &mut store);
            zero_all_but(&mut store, None);
            assert_eq!(forward(&x, &cfg, &mut store), x);

            // differing channels: output equals the 1x1 projection alone
            let cfg = InceptionConfig::uniform(4, 6, 3, f);
            let mut store = ParamStore::new(1);
            forward(&x, &cfg, &mut store);
            zero_all_but(&mut store, Some("blk.proj"));
            let y = forward(&x, &cfg, &mut store);
            let w = store.param("blk.proj.weight").unwrap();
            let b = store.param("blk.proj.bias").unwrap();
            let want = crate::tensor::conv2d(&x, w, Some(b), 1, Padding::Valid).unwrap();
            assert_eq!(y, want);
        }
    }

    #[test]
    fn factorized_block_has_fewer_parameters() {
        let x = Tensor::<f64>::zeros([2, 8, 6, 6]);
        for width in [1, 2, 4, 8] {
            let mut plain = ParamStore::new(0);
            let mut fact = ParamStore::new(0);
            forward(&x, &InceptionConfig::uniform(8, 16, width, false), &mut plain);
            forward(&x, &InceptionConfig::uniform(8, 16, width, true), &mut fact);
            assert!(fact.num_parameters() < plain.num_parameters());
        }
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        let mut cfg = InceptionConfig::uniform(4, 4, 3, false);
        cfg.b3x3_reduce = 2;
        assert!(cfg.validate().is_err());
        let mut store = ParamStore::<f64>::new(0);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut store, Mode::Train, 0);
        let x = s.graph.input(Tensor::zeros([1, 5, 4, 4]));
        let ok = InceptionConfig::uniform(4, 4, 3, false);
        assert!(residual_inception(&mut s, x, "b", &ok).is_err());
    }
}
