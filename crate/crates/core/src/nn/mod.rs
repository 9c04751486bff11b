//! Parametered layers and the attention / inception building blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A [`Session`]
//! records one forward pass into a [`Graph`], creating missing parameters on
//! first use and binding each name to a graph node.

mod attention;
mod inception;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Element, Graph, NodeId, Padding, Tensor};

pub use attention::{compute_stride, partial_attention, AttentionOutput};
pub use inception::{residual_inception, InceptionConfig};

/// Running-average factor for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Initial value of a freshly created parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// 64-bit FNV-1a, used to derive stable per-parameter seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

impl<T: Element> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    /// Total element count over trainable tensors.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
        }
    }

    fn create(&self, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
        match init {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::full(shape.to_vec(), T::one()),
            Init::HeNormal { fan_in } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
                Tensor::randn(shape.to_vec(), (2.0 / fan_in.max(1) as f64).sqrt(), &mut rng)
            }
        }
    }
}

/// Keep-mask for inverted dropout: each element is `1 / (1 - rate)` with
/// probability `1 - rate`, else zero.
pub fn dropout_mask<T: Element, R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Inverted dropout on a plain tensor. Identity in infer mode.
pub fn dropout<T: Element, R: Rng + ?Sized>(x: &Tensor<T>, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    let mask = dropout_mask::<T, R>(x.shape(), rate, rng)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let data = x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One forward pass over a [`ParamStore`].
pub struct Session<'a, T: Element = f32> {
    pub graph: &'a mut Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: BTreeMap<String, NodeId>,
    mode: Mode,
    rng: ChaCha8Rng,
    update_stats: bool,
}

impl<'a, T: Element> Session<'a, T> {
    /// `seed` drives dropout masks.
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Session {
            graph,
            store,
            bound: BTreeMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            update_stats: mode == Mode::Train,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Disable running-statistic updates in train mode.
    pub fn freeze_stats(&mut self) {
        self.update_stats = false;
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Use an existing node for parameter `name` instead of the stored value.
    pub fn bind(&mut self, name: impl Into<String>, id: NodeId) {
        self.bound.insert(name.into(), id);
    }

    /// Name → node for every parameter used so far.
    pub fn bindings(&self) -> &BTreeMap<String, NodeId> {
        &self.bound
    }

    /// Node for parameter `name`, creating it with `init` if it does not exist.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            if self.graph.shape(id) != shape {
                return Err(Error::Config(format!(
                    "parameter `{name}` bound with shape {:?}, expected {shape:?}",
                    self.graph.shape(id)
                )));
            }
            return Ok(id);
        }
        let value = match self.store.param(name) {
            Some(v) if v.shape() == shape => v.clone(),
            Some(v) => {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    v.shape()
                )))
            }
            None => {
                let v = self.store.create(name, shape, init);
                self.store.insert_param(name, v.clone());
                v
            }
        };
        let id = self.graph.param(value);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Convolution with an `out × in × kh × kw` kernel named `{name}.weight`
    /// and, when `bias` is set, `{name}.bias`.
    pub fn conv(
        &mut self,
        x: NodeId,
        name: &str,
        out: usize,
        kernel: (usize, usize),
        stride: usize,
        bias: bool,
    ) -> Result<NodeId> {
        let cin = self.graph.shape(x)[1];
        let fan_in = cin * kernel.0 * kernel.1;
        let w = self.param(
            &format!("{name}.weight"),
            &[out, cin, kernel.0, kernel.1],
            Init::HeNormal { fan_in },
        )?;
        let b = if bias {
            Some(self.param(&format!("{name}.bias"), &[out], Init::Zeros)?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, stride, Padding::Same)
    }

    /// Batch norm with `{name}.gamma/beta` and running-stat buffers.
    pub fn batch_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let c = self.graph.shape(x)[1];
        let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Ones)?;
        let beta = self.param(&format!("{name}.beta"), &[c], Init::Zeros)?;
        let (mean_key, var_key) = (format!("{name}.running_mean"), format!("{name}.running_var"));
        if self.store.buffer(&mean_key).is_none() {
            self.store.insert_buffer(mean_key.clone(), Tensor::zeros([c]));
            self.store.insert_buffer(var_key.clone(), Tensor::full([c], T::one()));
        }
        match self.mode {
            Mode::Train => {
                let (y, moments) = self.graph.batch_norm(x, gamma, beta, BnStats::Batch, BN_EPS)?;
                if self.update_stats {
                    let m = moments.expect("train mode reports moments");
                    for (key, batch) in [(&mean_key, &m.mean), (&var_key, &m.var)] {
                        let buf = self.store.buffer_mut(key).expect("buffer created above");
                        for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                            *r = T::from_f64(BN_MOMENTUM * r.as_f64() + (1.0 - BN_MOMENTUM) * b);
                        }
                    }
                }
                Ok(y)
            }
            Mode::Infer => {
                let mean = self.store.buffer(&mean_key).expect("created").to_f64_vec();
                let var = self.store.buffer(&var_key).expect("created").to_f64_vec();
                let stats = BnStats::Running { mean: &mean, var: &var };
                Ok(self.graph.batch_norm(x, gamma, beta, stats, BN_EPS)?.0)
            }
        }
    }

    /// conv → batch norm → optional ReLU, with the conv bias omitted.
    pub fn conv_bn(
        &mut self,
        x: NodeId,
        name: &str,
        out: usize,
        kernel: (usize, usize),
        stride: usize,
        relu: bool,
    ) -> Result<NodeId> {
        let y = self.conv(x, &format!("{name}.conv"), out, kernel, stride, false)?;
        let y = self.batch_norm(y, &format!("{name}.bn"))?;
        if relu {
            self.graph.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Affine map `x @ W + b` with `{name}.weight` (`in × out`) and `{name}.bias`.
    pub fn dense(&mut self, x: NodeId, name: &str, out: usize) -> Result<NodeId> {
        let d = self.graph.shape(x)[1];
        let w = self.param(&format!("{name}.weight"), &[d, out], Init::HeNormal { fan_in: d })?;
        let b = self.param(&format!("{name}.bias"), &[out], Init::Zeros)?;
        self.graph.dense(x, w, Some(b))
    }

    /// Inverted dropout; identity in infer mode or at rate zero.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        let mask = dropout_mask::<T, _>(self.graph.shape(x), rate, &mut self.rng)?;
        if self.mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let m = self.graph.input(mask);
        self.graph.mul(x, m)
    }

    /// Standard normal draws from the session generator.
    pub fn normal(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::randn(shape.to_vec(), 1.0, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn he_init_is_seeded_per_name() {
        let s = ParamStore::<f64>::new(3);
        let a = s.create("a.weight", &[64, 64], Init::HeNormal { fan_in: 64 });
        let b = s.create("a.weight", &[64, 64], Init::HeNormal { fan_in: 64 });
        let c = s.create("b.weight", &[64, 64], Init::HeNormal { fan_in: 64 });
        assert_eq!(a, b);
        assert_ne!(a, c);
        let var = a.data().iter().map(|v| v * v).sum::<f64>() / a.numel() as f64;
        assert!((var - 2.0 / 64.0).abs() < 0.003);
    }

    #[test]
    fn dropout_rate_zero_and_infer_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn([4, 5], 1.0, &mut rng);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Infer, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        // Binomial(10^6, 0.5) has std 5e-4, so 0.01 is a 20-sigma bound.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::full([1_000_000], 1.0);
        let y = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = Tensor::<f64>::randn([4, 3, 4, 4], 2.0, &mut rng);
        let mut store = ParamStore::<f64>::new(0);
        for mode in [Mode::Infer, Mode::Train] {
            let mut g = Graph::new();
            let mut s = Session::new(&mut g, &mut store, mode, 0);
            let x = s.graph.input(xt.clone());
            s.batch_norm(x, "bn").unwrap();
        }
        let mean = store.buffer("bn.running_mean").unwrap();
        let var = store.buffer("bn.running_var").unwrap();
        // one train step from (0, 1): 0.1 * batch statistic + 0.9 * initial
        let plane = 16;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| xt.data()[(b * 3 + ch) * plane..(b * 3 + ch + 1) * plane].to_vec())
                .collect();
            let mu = vals.iter().sum::<f64>() / 64.0;
            let unbiased = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 63.0;
            assert!((mean.data()[ch] - 0.1 * mu).abs() < 1e-12);
            assert!((var.data()[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_of_standardized_input_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = Tensor::<f64>::randn([8, 1, 6, 6], 1.0, &mut rng);
        let n = raw.numel() as f64;
        let mu = raw.data().iter().sum::<f64>() / n;
        let sd = (raw.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        let z = Tensor::new(raw.shape().to_vec(), raw.data().iter().map(|v| (v - mu) / sd).collect()).unwrap();
        let mut store = ParamStore::<f64>::new(0);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut store, Mode::Train, 0);
        let x = s.graph.input(z.clone());
        let y = s.batch_norm(x, "bn").unwrap();
        for (a, b) in g.value(y).data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn stored_shape_conflict_is_reported() {
        let mut store = ParamStore::<f32>::new(0);
        store.insert_param("p", Tensor::zeros([2]));
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut store, Mode::Train, 0);
        let err = s.param("p", &[3], Init::Zeros).unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }
}
