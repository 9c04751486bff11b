//! Subcommand bodies. Each writes its artifacts under the `--out`
//! directory with fixed names.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use octscreen::data::{class_id, decode_image, eval_transform, synth_generate, Dataset, SynthSpec, CLASS_NAMES};
use octscreen::gradsuite::{self, OpCheck};
use octscreen::metrics::{evaluate, export_features, occlusion_heatmap};
use octscreen::model::{transfer_encoder, HeadKind, Model};
use octscreen::train::{ensemble_predict, load_checkpoint, train};
use serde::Serialize;

use crate::config::{RunConfig, UsageError};

pub const REPORT_NAME: &str = "report.json";
pub const FEATURES_NAME: &str = "features.csv";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const RUN_CONFIG_NAME: &str = "run_config.json";

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn require_manifest(cfg: &RunConfig) -> Result<&Path> {
    match &cfg.manifest {
        Some(p) => Ok(p),
        None => Err(UsageError("no manifest: pass --manifest or set data.manifest".into()).into()),
    }
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load(path, &cfg.tiers).with_context(|| format!("loading dataset {}", path.display()))?;
    info!("{}: {} images", path.display(), data.len());
    Ok(data)
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ckpt.to_model()
        .with_context(|| format!("rebuilding model from {}", path.display()))
}

fn check_input(model: &Model, cfg: &RunConfig, path: &Path) -> Result<()> {
    let [_, h, w] = model.cfg.input;
    if cfg.augment.crop != (h, w) {
        return Err(UsageError(format!(
            "{} expects {h}x{w} inputs but augment.crop is {:?}",
            path.display(),
            cfg.augment.crop
        ))
        .into());
    }
    Ok(())
}

pub fn synth(out: &Path, n_per_class: usize, size: usize, seed: u64) -> Result<()> {
    let manifest = synth_generate(
        &SynthSpec {
            n_per_class,
            size,
            seed,
        },
        out,
    )?;
    println!(
        "wrote {} images and {}",
        n_per_class * CLASS_NAMES.len(),
        manifest.display()
    );
    Ok(())
}

/// Train the phase in `cfg.train` (VAE pretraining or classifier), optionally
/// starting from another checkpoint's encoder.
pub fn run_training(cfg: &RunConfig, out: &Path, init_from: Option<&Path>) -> Result<()> {
    let manifest = require_manifest(cfg)?;
    create_out(out)?;
    write_json(&out.join(RUN_CONFIG_NAME), cfg)?;
    let data = load_data(manifest, cfg)?;
    let val = cfg.val_manifest.as_deref().map(|p| load_data(p, cfg)).transpose()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    info!("{:?} model with {} parameters", model.cfg.head, model.num_parameters());
    if let Some(src) = init_from {
        let source = load_model(src)?;
        let report = transfer_encoder(&source.params, &mut model.params)
            .with_context(|| format!("transferring from {}", src.display()))?;
        info!(
            "initialized {} parameters and {} buffers from {} ({} left at their initial values)",
            report.matched,
            report.buffers,
            src.display(),
            report.untouched.len()
        );
    }
    let outcome = train(&mut model, &data, val.as_ref(), &cfg.train, out)?;
    if let Some(rec) = outcome.records.last() {
        println!(
            "step {} loss {:.5} {}",
            rec.step,
            rec.loss,
            serde_json::to_string(&rec.metrics)?
        );
    }
    println!("last checkpoint {}", outcome.last.display());
    if let Some(best) = &outcome.best {
        println!("best checkpoint {}", best.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoints: &'a [PathBuf],
    manifest: &'a Path,
    #[serde(flatten)]
    report: octscreen::metrics::Report,
}

/// Metrics report of one checkpoint or the uniform ensemble of several.
pub fn eval(cfg: &RunConfig, checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let manifest = require_manifest(cfg)?;
    if checkpoints.is_empty() {
        bail!(UsageError("eval needs at least one --checkpoint".into()));
    }
    let mut models = checkpoints.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
    for (m, p) in models.iter().zip(checkpoints) {
        check_input(m, cfg, p)?;
    }
    let data = load_data(manifest, cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let batch = data.eval_batch(&all, &cfg.augment)?;
    let probs = ensemble_predict(&mut models, &batch.images)?;
    let report = evaluate(&probs, &batch.labels)?;
    create_out(out)?;
    let path = out.join(REPORT_NAME);
    write_json(
        &path,
        &EvalOutput {
            checkpoints,
            manifest,
            report: report.clone(),
        },
    )?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "n {} accuracy {:.4} sensitivity {} specificity {} binary AUC {} macro F1 {}",
        report.n,
        report.accuracy,
        fmt(report.sensitivity),
        fmt(report.specificity),
        fmt(report.binary_auc),
        fmt(report.macro_f1)
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct HeatmapEntry {
    image: PathBuf,
    stem: String,
    target: String,
    base_probability: f64,
    /// Peak cell centre in crop coordinates, `(y, x)`.
    peak: (f64, f64),
}

/// Occlusion maps for `images`, or for every manifest record when none are
/// listed.
pub fn heatmap(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], class: Option<&str>, out: &Path) -> Result<()> {
    let mut model = load_model(checkpoint)?;
    check_input(&model, cfg, checkpoint)?;
    let target = class
        .map(|c| class_id(c).ok_or_else(|| UsageError(format!("unknown class `{c}`; expected one of {CLASS_NAMES:?}"))))
        .transpose()?;
    let paths: Vec<PathBuf> = if images.is_empty() {
        let manifest = require_manifest(cfg)?;
        load_data(manifest, cfg)?.records.into_iter().map(|r| r.path).collect()
    } else {
        images.to_vec()
    };
    let (patch, stride) = cfg.heatmap_geometry();
    let dir = out.join(HEATMAP_DIR);
    let mut index = Vec::new();
    for path in &paths {
        let img = decode_image(path)?;
        let x = eval_transform(&img, &cfg.augment)?.input;
        let s = x.shape().to_vec();
        let t = match target {
            Some(t) => t,
            None => model.predict(&x.reshape([1, s[0], s[1], s[2]])?)?.argmax_rows()?[0],
        };
        let h = occlusion_heatmap(&mut model, &x, t, patch, stride)?;
        let stem = path
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned());
        h.write(&dir, &stem)?;
        let (r, c) = h.argmax();
        index.push(HeatmapEntry {
            image: path.clone(),
            stem,
            target: CLASS_NAMES.get(t).copied().unwrap_or("?").to_string(),
            base_probability: h.base,
            peak: h.cell_centre(r, c),
        });
    }
    write_json(&dir.join("index.json"), &index)?;
    println!(
        "wrote {} heatmaps (patch {patch}, stride {stride}) to {}",
        index.len(),
        dir.display()
    );
    Ok(())
}

pub fn features(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let manifest = require_manifest(cfg)?;
    let mut model = load_model(checkpoint)?;
    check_input(&model, cfg, checkpoint)?;
    if model.cfg.head != HeadKind::Classifier {
        info!("exporting encoder features of a two-head model");
    }
    let data = load_data(manifest, cfg)?;
    create_out(out)?;
    let path = out.join(FEATURES_NAME);
    let d = export_features(&mut model, &data, &cfg.augment, &path)?;
    println!("wrote {} rows of {d} features to {}", data.len(), path.display());
    Ok(())
}

/// Prints one line per case; returns whether every case passed.
pub fn grad_check(instances: usize, seed: u64, tolerance: f64, case: Option<&str>) -> Result<bool> {
    let results: Vec<OpCheck> = match case {
        Some(c) => vec![gradsuite::check(c, instances, seed, tolerance)?],
        None => gradsuite::run_all(instances, seed, tolerance)?,
    };
    println!(
        "{:<28} {:>9} {:>9} {:>12}  result",
        "case", "checked", "kinks", "max rel err"
    );
    for r in &results {
        println!(
            "{:<28} {:>9} {:>9} {:>12.3e}  {}",
            r.name,
            r.checked,
            r.nonsmooth,
            r.max_rel_err,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = results.iter().all(|r| r.pass);
    println!("{} cases, worst {worst:.3e}, tolerance {tolerance:e}", results.len());
    Ok(pass)
}
