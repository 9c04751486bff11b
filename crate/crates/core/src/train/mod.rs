//! Losses, optimizers, checkpoints, the training loop and ensembles.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use loss::{label_smooth, vae_total_loss, weighted_ce_loss, VaeLossConfig};
pub use optim::{
    adam_step, clip_global_norm, nesterov_step, poly_lr, GradMap, LrSchedule, OptimizerKind, OptimizerState,
};

use crate::data::{sample_indices, AugmentConfig, Batch, Dataset, Halton, UnitSource, AUG_DIMS};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{classifier_forward, vae_forward, HeadKind, Model};
use crate::nn::{Mode, Session};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Vae,
    Classifier,
}

/// Source of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Halton,
    Prng,
}

impl SamplerKind {
    pub fn source(self, seed: u64) -> UnitSource {
        match self {
            SamplerKind::Halton => UnitSource::Halton(Halton::scrambled(AUG_DIMS, seed)),
            SamplerKind::Prng => UnitSource::Prng { seed, dims: AUG_DIMS },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub max_steps: usize,
    pub batch_size: usize,
    pub balanced: bool,
    pub clip_norm: f64,
    /// Validation and log cadence in steps; the last step always logs.
    pub eval_every: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// KL and classification weights of the VAE objective.
    pub beta: f64,
    pub lambda: f64,
    pub sampler: SamplerKind,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Adam for the VAE phase; Nesterov momentum with polynomial decay for
    /// the classifier phase.
    pub fn for_phase(phase: Phase) -> Self {
        let (optimizer, base_lr) = match phase {
            Phase::Vae => (OptimizerKind::adam(), 1e-3),
            Phase::Classifier => (OptimizerKind::nesterov(), 0.01),
        };
        TrainConfig {
            phase,
            optimizer,
            schedule: LrSchedule {
                base_lr,
                end_lr: 1e-5,
                power: 2.0,
                total_steps: 1000,
            },
            max_steps: 1000,
            batch_size: 16,
            balanced: true,
            clip_norm: 5.0,
            eval_every: 100,
            seed: 0,
            label_smoothing: 0.1,
            beta: 1.0,
            lambda: 1.0,
            sampler: SamplerKind::Halton,
            augment: AugmentConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.max_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("max_steps, batch_size and eval_every must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.beta < 0.0 || self.lambda < 0.0 {
            return bad("beta and lambda must be non-negative".into());
        }
        Ok(())
    }

    fn vae_loss(&self) -> VaeLossConfig {
        VaeLossConfig {
            beta: self.beta,
            lambda: self.lambda,
            epsilon: self.label_smoothing,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_parts: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: PathBuf,
    /// Highest validation binary AUC, when a validation set was given.
    pub best: Option<PathBuf>,
    pub log: PathBuf,
    /// Training-batch loss at every step.
    pub losses: Vec<f64>,
    pub records: Vec<LogRecord>,
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.octc";
pub const BEST_CHECKPOINT: &str = "best.octc";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Batches the data worker may run ahead of the optimizer.
const PREFETCH: usize = 2;

/// Samples per forward pass in evaluation helpers.
const EVAL_CHUNK: usize = 32;

struct StepOutput {
    total: NodeId,
    parts: Vec<(&'static str, NodeId)>,
    bindings: BTreeMap<String, NodeId>,
}

fn forward_step(
    model: &mut Model,
    g: &mut Graph<f32>,
    batch: &Batch,
    cfg: &TrainConfig,
    session_seed: u64,
) -> Result<StepOutput> {
    let mcfg = model.cfg.clone();
    let mut s = Session::new(g, &mut model.params, Mode::Train, session_seed);
    let x = s.graph.input(batch.images.clone());
    let (total, parts) = match cfg.phase {
        Phase::Classifier => {
            let o = classifier_forward(&mut s, &mcfg, x)?;
            let ce = weighted_ce_loss(s.graph, o.logits, &batch.labels, &batch.weights, cfg.label_smoothing)?;
            (ce, vec![("ce", ce)])
        }
        Phase::Vae => {
            let latent = mcfg.latent_dim.expect("validated");
            let eps = s.normal(&[batch.labels.len(), latent]);
            let o = vae_forward(&mut s, &mcfg, x, Some(eps))?;
            let target = s.graph.input(batch.targets.clone());
            let l = vae_total_loss(
                s.graph,
                o.recon,
                target,
                o.mu,
                o.logvar,
                o.logits,
                &batch.labels,
                &batch.weights,
                &cfg.vae_loss(),
            )?;
            (l.total, vec![("mse", l.mse), ("kl", l.kl), ("ce", l.ce)])
        }
    };
    Ok(StepOutput {
        total,
        parts,
        bindings: s.bindings().clone(),
    })
}

fn diverged(step: usize, loss: f64, parts: &BTreeMap<String, f64>, why: &str) -> Error {
    let mut p: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    if !why.is_empty() {
        p.push(why.to_string());
    }
    Error::Diverged {
        step,
        loss,
        parts: p.join(", "),
    }
}

/// Run one training phase, writing `checkpoints/last.octc`,
/// `checkpoints/best.octc` (with a validation set) and `metrics.jsonl`
/// under `out_dir`. Fully determined by the model, data and config.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let want = match cfg.phase {
        Phase::Vae => HeadKind::VaeTwohead,
        Phase::Classifier => HeadKind::Classifier,
    };
    if model.cfg.head != want {
        return Err(Error::Config(format!(
            "phase {:?} needs a {want:?} model, got {:?}",
            cfg.phase, model.cfg.head
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(bad) = data.records.iter().find(|r| r.label >= model.cfg.num_classes) {
        return Err(Error::Config(format!(
            "{}: label {} exceeds num_classes",
            bad.path.display(),
            bad.label
        )));
    }
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mut opt = OptimizerState::new(cfg.optimizer);
    let k = model.cfg.num_classes;
    let (last, best) = (ckpt_dir.join(LAST_CHECKPOINT), ckpt_dir.join(BEST_CHECKPOINT));
    let mut best_auc: Option<f64> = None;
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut records = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        // the batch sequence depends only on the seed, so producing it on
        // another thread changes nothing but latency
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(PREFETCH);
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let source = cfg.sampler.source(cfg.seed);
            let mut sampler_index = 1u64;
            for _ in 0..cfg.max_steps {
                let batch = sample_indices(&data.records, cfg.batch_size, cfg.balanced, k, &mut rng)
                    .and_then(|idx| data.train_batch(&idx, &cfg.augment, &source, sampler_index));
                if let Ok(b) = &batch {
                    sampler_index += b.labels.len() as u64;
                }
                let stop = batch.is_err();
                if tx.send(batch).is_err() || stop {
                    break;
                }
            }
        });

        for step in 0..cfg.max_steps {
            let lr = poly_lr(step, &cfg.schedule);
            let batch = rx.recv().expect("batch producer ended early")?;
            let mut g = Graph::new();
            let session_seed = cfg.seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let out = match forward_step(model, &mut g, &batch, cfg, session_seed) {
                Ok(o) => o,
                Err(Error::NonFinite { op }) => {
                    return Err(diverged(
                        step,
                        f64::NAN,
                        &BTreeMap::new(),
                        &format!("non-finite output of {op}"),
                    ))
                }
                Err(e) => return Err(e),
            };
            let loss = g.value(out.total).item();
            let parts: BTreeMap<String, f64> = out
                .parts
                .iter()
                .map(|(n, id)| (n.to_string(), g.value(*id).item()))
                .collect();
            if !loss.is_finite() {
                return Err(diverged(step, loss, &parts, ""));
            }
            let grads = g.backward(out.total).map_err(|e| match e {
                Error::NonFinite { op } => diverged(step, loss, &parts, &format!("non-finite gradient in {op}")),
                e => e,
            })?;
            let mut gmap: GradMap = out
                .bindings
                .iter()
                .map(|(name, id)| {
                    (
                        name.clone(),
                        grads.get(*id).cloned().expect("every bound parameter has a gradient"),
                    )
                })
                .collect();
            let norm = clip_global_norm(&mut gmap, cfg.clip_norm)?;
            if !norm.is_finite() {
                return Err(diverged(step, loss, &parts, "non-finite gradient norm"));
            }
            opt.apply(&mut model.params, &gmap, lr)?;
            losses.push(loss);
            log::debug!("step {step} lr {lr:.3e} loss {loss:.5} |g| {norm:.3}");

            if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps {
                let metrics = match val {
                    Some(v) => validation_metrics(&mut model.clone(), v, &cfg.augment)?,
                    None => BTreeMap::new(),
                };
                if let Some(&auc) = metrics.get("binary_auc") {
                    if best_auc.is_none_or(|b| auc > b) {
                        best_auc = Some(auc);
                        save_checkpoint(model, &best, step + 1, metrics.clone())?;
                    }
                }
                let rec = LogRecord {
                    step: step + 1,
                    lr,
                    loss,
                    loss_parts: parts,
                    metrics,
                };
                writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
                log::info!("step {} loss {:.5} metrics {:?}", rec.step, rec.loss, rec.metrics);
                records.push(rec);
            }
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_metrics = records.last().map(|r| r.metrics.clone()).unwrap_or_default();
    save_checkpoint(model, &last, cfg.max_steps, final_metrics)?;
    Ok(TrainOutcome {
        last,
        best: best_auc.map(|_| best),
        log: log_path,
        losses,
        records,
    })
}

/// Class probabilities for every record under the evaluation transform.
pub fn predict_dataset(model: &mut Model, data: &Dataset, augment: &AugmentConfig) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for lo in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (lo..(lo + EVAL_CHUNK).min(data.len())).collect();
        parts.push(model.predict(&data.eval_batch(&idx, augment)?.images)?);
    }
    Tensor::concat_batch(&parts)
}

/// Mean squared reconstruction error of a two-head model in infer mode,
/// decoding from the posterior mean.
pub fn reconstruction_mse(model: &mut Model, images: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
    let cfg = model.cfg.clone();
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &mut model.params, Mode::Infer, 0);
    let x = s.graph.input(images.clone());
    let o = vae_forward(&mut s, &cfg, x, None)?;
    let r = g.value(o.recon);
    if r.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_mse",
            expected: r.shape().to_vec(),
            got: targets.shape().to_vec(),
        });
    }
    let sq: f64 = r
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sq / r.numel() as f64)
}

/// Accuracy, macro F1 and binary AUC (plus reconstruction error for the
/// two-head model) on a validation set.
pub fn validation_metrics(model: &mut Model, val: &Dataset, augment: &AugmentConfig) -> Result<BTreeMap<String, f64>> {
    let probs = predict_dataset(model, val, augment)?;
    let report = evaluate(&probs, &val.labels())?;
    let mut m = BTreeMap::new();
    m.insert("accuracy".to_string(), report.accuracy);
    if let Some(v) = report.macro_f1 {
        m.insert("macro_f1".to_string(), v);
    }
    if let Some(v) = report.binary_auc {
        m.insert("binary_auc".to_string(), v);
    }
    if model.cfg.head == HeadKind::VaeTwohead {
        let mut sq = 0.0;
        for lo in (0..val.len()).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (lo..(lo + EVAL_CHUNK).min(val.len())).collect();
            let b = val.eval_batch(&idx, augment)?;
            sq += reconstruction_mse(model, &b.images, &b.targets)? * idx.len() as f64;
        }
        m.insert("recon_mse".to_string(), sq / val.len() as f64);
    }
    Ok(m)
}

/// Uniform mean of per-model probability rows, accumulated in f64.
pub fn average_probabilities(members: &[Tensor<f64>]) -> Result<Tensor<f32>> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("ensemble", "no members"))?;
    let mut acc = vec![0.0f64; first.numel()];
    for (i, m) in members.iter().enumerate() {
        if m.shape() != first.shape() {
            return Err(Error::invalid(
                "ensemble",
                format!(
                    "member {i} predicts shape {:?}, member 0 {:?}",
                    m.shape(),
                    first.shape()
                ),
            ));
        }
        acc.iter_mut().zip(m.data()).for_each(|(a, &v)| *a += v);
    }
    let n = members.len() as f64;
    Tensor::new(
        first.shape().to_vec(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Average softmax probabilities of several models.
pub fn ensemble_predict(models: &mut [Model], images: &Tensor<f32>) -> Result<Tensor<f32>> {
    if let Some(m) = models.iter().find(|m| m.cfg.num_classes != models[0].cfg.num_classes) {
        return Err(Error::Config(format!(
            "ensemble members disagree on class count ({} vs {})",
            m.cfg.num_classes, models[0].cfg.num_classes
        )));
    }
    let probs = models
        .iter_mut()
        .map(|m| m.predict_f64(images))
        .collect::<Result<Vec<_>>>()?;
    average_probabilities(&probs)
}

/// [`ensemble_predict`] over checkpoints, each rebuilt from its own config.
pub fn ensemble_predict_checkpoints(paths: &[PathBuf], images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut models = paths
        .iter()
        .map(|p| load_checkpoint(p)?.to_model())
        .collect::<Result<Vec<_>>>()?;
    ensemble_predict(&mut models, images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_of_two_rows() {
        let a = Tensor::from_f64([1, 2], &[0.6, 0.4]).unwrap();
        let b = Tensor::from_f64([1, 2], &[0.8, 0.2]).unwrap();
        let m = average_probabilities(&[a.clone(), b]).unwrap();
        assert_eq!(m.data(), &[0.7f32, 0.3f32]);
        assert_eq!(average_probabilities(&[a.clone()]).unwrap(), a.cast::<f32>());
        let c = Tensor::from_f64([1, 3], &[0.2, 0.3, 0.5]).unwrap();
        assert!(average_probabilities(&[a, c]).is_err());
        assert!(average_probabilities(&[]).is_err());
    }

    #[test]
    fn config_defaults_validate() {
        TrainConfig::for_phase(Phase::Vae).validate().unwrap();
        let mut c = TrainConfig::for_phase(Phase::Classifier);
        c.validate().unwrap();
        c.clip_norm = 0.0;
        assert!(c.validate().is_err());
    }
}
