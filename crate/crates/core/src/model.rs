//! Declarative model configs, the attentive inception classifier, the
//! two-head variational encoder and encoder-weight transfer between them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{compute_stride, partial_attention, residual_inception, InceptionConfig, Mode, ParamStore, Session};
use crate::tensor::{softmax_rows, Element, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub out_channels: usize,
    pub factorized: bool,
    /// Stride-2 3×3 conv at stage entry.
    pub downsample: bool,
}

/// Attention from the outputs of `sources` onto the output of `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLinkConfig {
    pub sources: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classifier,
    VaeTwohead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(C, H, W)` of the network input.
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub attention_links: Vec<AttentionLinkConfig>,
    pub num_classes: usize,
    pub latent_dim: Option<usize>,
    pub dropout: f64,
    pub head: HeadKind,
}

impl ModelConfig {
    /// Small two-stage network used for desk-scale experiments.
    pub fn toy() -> Self {
        ModelConfig {
            input: [3, 56, 56],
            stem_channels: 16,
            stem_stride: 2,
            stages: vec![
                StageConfig {
                    num_blocks: 1,
                    out_channels: 16,
                    factorized: false,
                    downsample: false,
                },
                StageConfig {
                    num_blocks: 1,
                    out_channels: 32,
                    factorized: true,
                    downsample: true,
                },
            ],
            attention_links: vec![AttentionLinkConfig {
                sources: vec![0, 1],
                target: 1,
            }],
            num_classes: 4,
            latent_dim: Some(16),
            dropout: 0.1,
            head: HeadKind::Classifier,
        }
    }

    pub fn with_head(&self, head: HeadKind) -> Self {
        ModelConfig { head, ..self.clone() }
    }

    /// Spatial size after the stem.
    fn stem_resolution(&self) -> (usize, usize) {
        (
            self.input[1].div_ceil(self.stem_stride),
            self.input[2].div_ceil(self.stem_stride),
        )
    }

    /// Spatial size of each stage's output.
    pub fn stage_resolutions(&self) -> Vec<(usize, usize)> {
        let mut hw = self.stem_resolution();
        self.stages
            .iter()
            .map(|s| {
                if s.downsample {
                    hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
                }
                hw
            })
            .collect()
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    fn block_config(&self, stage: usize, block: usize) -> InceptionConfig {
        let s = &self.stages[stage];
        let cin = if block > 0 || s.downsample {
            s.out_channels
        } else if stage == 0 {
            self.stem_channels
        } else {
            self.stages[stage - 1].out_channels
        };
        InceptionConfig::uniform(cin, s.out_channels, (s.out_channels / 4).max(1), s.factorized)
    }

    /// Checks every structural precondition so that invalid configs fail
    /// here rather than during a forward pass.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input.contains(&0) || self.stem_channels == 0 || self.stem_stride == 0 {
            return bad(format!(
                "input {:?}, stem {}x stride {} must be positive",
                self.input, self.stem_channels, self.stem_stride
            ));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_blocks == 0 || s.out_channels == 0 {
                return bad(format!("stage {i} needs positive num_blocks and out_channels"));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let res = self.stage_resolutions();
        for (li, link) in self.attention_links.iter().enumerate() {
            if link.target >= self.stages.len() {
                return bad(format!(
                    "attention link {li}: target stage {} does not exist",
                    link.target
                ));
            }
            if link.sources.is_empty() {
                return bad(format!("attention link {li} has no sources"));
            }
            let t = res[link.target];
            for &src in &link.sources {
                if src > link.target {
                    return bad(format!(
                        "attention link {li}: source stage {src} comes after target {}",
                        link.target
                    ));
                }
                let s = res[src];
                let stride = compute_stride(s, t).map_err(|e| Error::Config(format!("attention link {li}: {e}")))?;
                if s.0.div_ceil(stride) != t.0 || s.1.div_ceil(stride) != t.1 {
                    return bad(format!(
                        "attention link {li}: source {s:?} at stride {stride} does not land on target {t:?}"
                    ));
                }
            }
        }
        if self.head == HeadKind::VaeTwohead {
            match self.latent_dim {
                None => return bad("vae_twohead head requires latent_dim".into()),
                Some(0) => return bad("latent_dim must be at least 1".into()),
                Some(_) => {}
            }
            let downs = self.stages.iter().filter(|s| s.downsample).count() as u32;
            let scale = self.stem_stride * 2usize.pow(downs);
            let last = res[res.len() - 1];
            if last.0 * scale != self.input[1] || last.1 * scale != self.input[2] {
                return bad(format!(
                    "decoder cannot restore {}x{} from {last:?}: input sides must be divisible by {scale}",
                    self.input[1], self.input[2]
                ));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stem, stages of inception blocks and attention links, then global
/// average pooling. Returns the pooled `N × feature_dim` features.
pub fn encode<T: Element>(s: &mut Session<'_, T>, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let mut h = s.conv_bn(x, "stem", cfg.stem_channels, (3, 3), cfg.stem_stride, true)?;
    let mut outputs: Vec<NodeId> = Vec::with_capacity(cfg.stages.len());
    for (si, stage) in cfg.stages.iter().enumerate() {
        if stage.downsample {
            h = s.conv_bn(h, &format!("stage{si}.down"), stage.out_channels, (3, 3), 2, true)?;
        }
        for bi in 0..stage.num_blocks {
            h = residual_inception(s, h, &format!("stage{si}.block{bi}"), &cfg.block_config(si, bi))?;
        }
        for (li, link) in cfg.attention_links.iter().enumerate().filter(|(_, l)| l.target == si) {
            let sources: Vec<NodeId> = link
                .sources
                .iter()
                .map(|&src| if src == si { h } else { outputs[src] })
                .collect();
            h = partial_attention(s, &sources, h, &format!("attn{li}"))?.output;
        }
        outputs.push(h);
    }
    s.graph.global_avg_pool(h)
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub features: NodeId,
    pub logits: NodeId,
}

/// Encoder → dropout → dense `head.fc` logits.
pub fn classifier_forward<T: Element>(
    s: &mut Session<'_, T>,
    cfg: &ModelConfig,
    x: NodeId,
) -> Result<ClassifierOutput> {
    let features = encode(s, cfg, x)?;
    let d = s.dropout(features, cfg.dropout)?;
    let logits = s.dense(d, "head.fc", cfg.num_classes)?;
    Ok(ClassifierOutput { features, logits })
}

#[derive(Clone, Copy, Debug)]
pub struct VaeOutput {
    pub features: NodeId,
    pub recon: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub logits: NodeId,
}

/// `z = mu + exp(logvar / 2) * eps` for given standard-normal `eps`.
pub fn reparameterize<T: Element>(g: &mut Graph<T>, mu: NodeId, logvar: NodeId, eps: Tensor<T>) -> Result<NodeId> {
    if g.shape(mu) != g.shape(logvar) || g.shape(mu) != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            expected: g.shape(mu).to_vec(),
            got: g.shape(logvar).to_vec(),
        });
    }
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let e = g.input(eps);
    let noise = g.mul(std, e)?;
    g.add(mu, noise)
}

/// As [`reparameterize`], drawing `eps` from `rng`.
pub fn reparameterize_with<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    mu: NodeId,
    logvar: NodeId,
    rng: &mut R,
) -> Result<NodeId> {
    let eps = Tensor::randn(g.shape(mu).to_vec(), 1.0, rng);
    reparameterize(g, mu, logvar, eps)
}

/// Shared trunk, Gaussian latent heads, an upsampling decoder back to the
/// input size and a classification head on the pooled features.
///
/// `eps` is the reparameterization noise; `None` decodes from the mean.
pub fn vae_forward<T: Element>(
    s: &mut Session<'_, T>,
    cfg: &ModelConfig,
    x: NodeId,
    eps: Option<Tensor<T>>,
) -> Result<VaeOutput> {
    let latent = cfg
        .latent_dim
        .ok_or_else(|| Error::Config("vae_twohead head requires latent_dim".into()))?;
    let features = encode(s, cfg, x)?;
    let n = s.graph.shape(x)[0];
    let mu = s.dense(features, "vae.mu", latent)?;
    let logvar = s.dense(features, "vae.logvar", latent)?;
    let z = match eps {
        Some(e) => reparameterize(s.graph, mu, logvar, e)?,
        None => mu,
    };

    let res = cfg.stage_resolutions();
    let (lh, lw) = res[res.len() - 1];
    let c_last = cfg.feature_dim();
    let d = s.dense(z, "vae.dec.fc", c_last * lh * lw)?;
    let d = s.graph.relu(d)?;
    let mut h = s.graph.reshape(d, &[n, c_last, lh, lw])?;
    for si in (0..cfg.stages.len()).rev() {
        if !cfg.stages[si].downsample {
            continue;
        }
        let width = if si == 0 {
            cfg.stem_channels
        } else {
            cfg.stages[si - 1].out_channels
        };
        h = s.graph.upsample(h, 2)?;
        h = s.conv_bn(h, &format!("vae.dec.up{si}"), width, (3, 3), 1, true)?;
    }
    if cfg.stem_stride > 1 {
        h = s.graph.upsample(h, cfg.stem_stride)?;
    }
    let r = s.conv(h, "vae.dec.out", cfg.input[0], (1, 1), 1, true)?;
    let recon = s.graph.sigmoid(r)?;

    let dropped = s.dropout(features, cfg.dropout)?;
    let logits = s.dense(dropped, "vae.cls", cfg.num_classes)?;
    Ok(VaeOutput {
        features,
        recon,
        mu,
        logvar,
        z,
        logits,
    })
}

/// Element count over trainable tensors.
pub fn count_parameters<T: Element>(params: &ParamStore<T>) -> usize {
    params.num_parameters()
}

/// A config together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
}

/// Samples per forward pass in batched inference helpers.
const INFER_CHUNK: usize = 32;

impl Model {
    /// Validate `cfg` and create every parameter with seeded initial values.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model {
            cfg,
            params: ParamStore::new(seed),
        };
        let [c, h, w] = model.cfg.input;
        model.run_infer(&Tensor::zeros([1, c, h, w]))?;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Infer-mode `(features, logits)` for one batch.
    fn run_infer(&mut self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut self.params, Mode::Infer, 0);
        let x = s.graph.input(images.clone());
        let (f, l) = match self.cfg.head {
            HeadKind::Classifier => {
                let o = classifier_forward(&mut s, &self.cfg, x)?;
                (o.features, o.logits)
            }
            HeadKind::VaeTwohead => {
                let o = vae_forward(&mut s, &self.cfg, x, None)?;
                (o.features, o.logits)
            }
        };
        Ok((g.value(f).clone(), g.value(l).clone()))
    }

    fn batched(&mut self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = images.shape()[0];
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        for lo in (0..n).step_by(INFER_CHUNK) {
            let part: Vec<Tensor<f32>> = (lo..(lo + INFER_CHUNK).min(n)).map(|i| images.sample(i)).collect();
            let (f, l) = self.run_infer(&Tensor::concat_batch(&part)?)?;
            feats.push(f);
            logits.push(l);
        }
        Ok((Tensor::concat_batch(&feats)?, Tensor::concat_batch(&logits)?))
    }

    /// Class logits in infer mode.
    pub fn logits(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.batched(images)?.1)
    }

    /// Softmax class probabilities in infer mode, normalized in f64.
    pub fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict_f64(images)?.cast())
    }

    pub fn predict_f64(&mut self, images: &Tensor<f32>) -> Result<Tensor<f64>> {
        softmax_rows(&self.logits(images)?.cast::<f64>())
    }

    /// Pooled penultimate features in infer mode.
    pub fn features(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.batched(images)?.0)
    }
}

/// Outcome of [`transfer_encoder`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TransferReport {
    /// Parameters copied (name and shape matched).
    pub matched: usize,
    /// Source parameters with no same-named, same-shaped target.
    pub skipped: Vec<String>,
    /// Target parameters left at their previous values.
    pub untouched: Vec<String>,
    /// Running-statistic buffers copied alongside matched parameters.
    pub buffers: usize,
}

/// Overwrite every `target` parameter (and buffer) whose name and shape
/// match a `source` tensor.
pub fn transfer_encoder(source: &ParamStore<f32>, target: &mut ParamStore<f32>) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    for (name, value) in source.params() {
        match target.param_mut(name) {
            Some(t) if t.shape() == value.shape() => {
                *t = value.clone();
                report.matched += 1;
            }
            _ => report.skipped.push(name.to_string()),
        }
    }
    if report.matched == 0 {
        return Err(Error::Transfer(format!(
            "no parameter of the {} in the source matches the target",
            source.params().count()
        )));
    }
    for (name, value) in source.buffers() {
        if let Some(t) = target.buffer_mut(name) {
            if t.shape() == value.shape() {
                *t = value.clone();
                report.buffers += 1;
            }
        }
    }
    report.untouched = target
        .params()
        .filter(|(n, t)| source.param(n).is_none_or(|s| s.shape() != t.shape()))
        .map(|(n, _)| n.to_string())
        .collect();
    Ok(report)
}
