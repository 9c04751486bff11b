use octscreen::tensor::{conv2d, pool2d, Padding, PoolKind, ReduceKind};
use octscreen::{Graph, NodeId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct six-loop convolution with explicit zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, same: bool) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4("oracle").unwrap();
    let (o, _, kh, kw) = w.dims4("oracle").unwrap();
    let (oh, ow, pt, pl) = if same {
        let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let xd = x.data();
    let wdta = w.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * wdta[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

fn naive_pool(x: &Tensor<f64>, max: bool, window: usize, stride: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4("oracle").unwrap();
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let vals: Vec<f64> = (0..window)
                    .flat_map(|dy| (0..window).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| plane[(oy * stride + dy) * w + ox * stride + dx])
                    .collect();
                out.push(if max {
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..60 {
        let (n, c, o) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let kh = rng.random_range(1..=h.min(5));
        let kw = rng.random_range(1..=w.min(5));
        let stride = rng.random_range(1..=3);
        let same = rng.random::<bool>();
        let x = Tensor::<f64>::randn([n, c, h, w], 1.0, &mut rng);
        let k = Tensor::<f64>::randn([o, c, kh, kw], 1.0, &mut rng);
        let b: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bt = Tensor::from_f64([o], &b).unwrap();
        let pad = if same { Padding::Same } else { Padding::Valid };
        let got = conv2d(&x, &k, Some(&bt), stride, pad).unwrap();
        assert_close(&got, &naive_conv(&x, &k, &b, stride, same), 1e-5);
    }
}

#[test]
fn pointwise_conv_equals_channel_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f64>::randn([1, 2, 6, 6], 1.0, &mut rng);
    let k = Tensor::from_f64([2, 2, 1, 1], &[1.0, 0.0, 0.5, -2.0]).unwrap();
    let got = conv2d(&x, &k, None, 1, Padding::Same).unwrap();
    let (a, b) = x.data().split_at(36);
    for i in 0..36 {
        assert!((got.data()[i] - a[i]).abs() < 1e-12);
        assert!((got.data()[36 + i] - (0.5 * a[i] - 2.0 * b[i])).abs() < 1e-12);
    }
}

#[test]
fn f32_conv_agrees_with_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn([2, 3, 12, 12], 1.0, &mut rng);
    let k = Tensor::<f64>::randn([4, 3, 3, 3], 1.0, &mut rng);
    let want = naive_conv(&x, &k, &[0.0; 4], 2, true);
    let got = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), None, 2, Padding::Same).unwrap();
    assert_close(&got.cast::<f64>(), &want, 1e-5);
}

#[test]
fn pool_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn([1, 4, 8, 8], 1.0, &mut rng);
    for max in [true, false] {
        let kind = if max { PoolKind::Max } else { PoolKind::Avg };
        let got = pool2d(&x, kind, 2, 2, Padding::Valid).unwrap();
        assert_close(&got, &naive_pool(&x, max, 2, 2), 1e-12);
    }
    for _ in 0..30 {
        let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let window = rng.random_range(1..=h.min(w));
        let stride = rng.random_range(1..=3);
        let x = Tensor::<f64>::randn([2, 2, h, w], 1.0, &mut rng);
        for max in [true, false] {
            let kind = if max { PoolKind::Max } else { PoolKind::Avg };
            let got = pool2d(&x, kind, window, stride, Padding::Valid).unwrap();
            assert_close(&got, &naive_pool(&x, max, window, stride), 1e-12);
        }
    }
}

#[test]
fn conv_error_contracts() {
    let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
    let k = Tensor::<f32>::zeros([2, 2, 3, 3]);
    assert!(conv2d(&x, &k, None, 1, Padding::Same).is_err());
    let k = Tensor::<f32>::zeros([2, 3, 3, 3]);
    assert!(conv2d(&x, &k, None, 0, Padding::Same).is_err());
    let k = Tensor::<f32>::zeros([2, 3, 5, 5]);
    assert!(conv2d(&x, &k, None, 1, Padding::Valid).is_err());
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    let b = g.param(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let r = g.input(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(r).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let m = g.mul(a, b).unwrap();
    let l = g.sum_all(m).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    let c = g.input(Tensor::zeros([3]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn dense_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap());
    let w = g.param(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.param(Tensor::from_f64([2], &[1.0, 1.0]).unwrap());
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 2.0]);
    let y0 = g.dense(x, w, None).unwrap();
    assert_eq!(g.value(y0).data(), &[1.0, 1.0]);
    let bad = g.param(Tensor::zeros([3, 2]));
    assert!(g.dense(x, bad, None).is_err());
}

#[test]
fn concat_shapes_identity_and_unit_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::randn([1, 2, 4, 4], 1.0, &mut rng));
    let b = g.param(Tensor::randn([1, 3, 4, 4], 1.0, &mut rng));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 4, 4]);
    let single = g.concat_channels(&[a]).unwrap();
    assert_eq!(g.value(single), g.value(a));
    let l = g.sum_all(c).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    let wrong = g.param(Tensor::zeros([1, 1, 3, 4]));
    assert!(g.concat_channels(&[a, wrong]).is_err());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let p = g.param(Tensor::zeros([2]));
    assert!(g.backward(p).is_err());
}

proptest! {
    #[test]
    fn concat_then_split_is_bit_exact(
        widths in prop::collection::vec(1usize..4, 1..5),
        n in 1usize..3,
        hw in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor<f32>> = widths.iter().map(|&c| Tensor::randn([n, c, hw, hw], 3.0, &mut rng)).collect();
        let mut g = Graph::<f32>::new();
        let ids: Vec<NodeId> = parts.iter().map(|t| g.input(t.clone())).collect();
        let cat = g.concat_channels(&ids).unwrap();
        let back = g.value(cat).split_channels(&widths).unwrap();
        prop_assert_eq!(back, parts);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, k in 1usize..8, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn([rows, k], 4.0, &mut rng);
        let shifted = Tensor::from_f64([rows, k], &x.data().iter().map(|v| v + shift).collect::<Vec<_>>()).unwrap();
        let p = octscreen::tensor::softmax_rows(&x).unwrap();
        let q = octscreen::tensor::softmax_rows(&shifted).unwrap();
        for (r, rs) in p.data().chunks(k).zip(q.data().chunks(k)) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in r.iter().zip(rs) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    /// Random op sequences over random earlier nodes keep every input id
    /// below its node id, and backward yields one parameter-shaped gradient
    /// per parameter.
    #[test]
    fn graphs_stay_topologically_ordered(ops in prop::collection::vec((0u8..9, any::<u32>(), any::<u32>()), 1..40)) {
        let mut rng = ChaCha8Rng::seed_from_u64(ops.len() as u64);
        let mut g = Graph::<f64>::new();
        let mut nodes = vec![g.param(Tensor::randn([2, 3], 1.0, &mut rng)), g.param(Tensor::randn([2, 3], 1.0, &mut rng))];
        for (op, a, b) in ops {
            let x = nodes[a as usize % nodes.len()];
            let y = nodes[b as usize % nodes.len()];
            let out = match op {
                0 => g.add(x, y),
                1 => g.mul(x, y),
                2 => g.sub(x, y),
                3 => g.relu(x),
                4 => g.sigmoid(x),
                5 => g.scale(x, 0.5),
                6 => g.softmax(x),
                7 => g.reduce(x, ReduceKind::Mean, &[1]).and_then(|r| {
                    let r = g.reshape(r, &[2, 1])?;
                    g.concat(&[r, r, r], 1)
                }),
                _ => Ok(g.param(Tensor::randn([2, 3], 1.0, &mut rng))),
            };
            nodes.push(out.unwrap());
        }
        prop_assert!(g.is_topologically_ordered());
        let last = *nodes.last().unwrap();
        let loss = g.sum_all(last).unwrap();
        let grads = g.backward(loss).unwrap();
        let params = g.parameters();
        prop_assert_eq!(grads.len(), params.len());
        for p in params {
            prop_assert_eq!(grads.get(p).unwrap().shape(), g.shape(p));
        }
    }
}
