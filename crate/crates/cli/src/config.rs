//! Run configuration: `[section]` / `key = value` files merged with
//! command-line overrides. Every key is listed in `CONFIG.md`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use octscreen::data::{AugmentConfig, TierWeights};
use octscreen::model::{AttentionLinkConfig, HeadKind, ModelConfig, StageConfig};
use octscreen::train::{OptimizerKind, Phase, SamplerKind, TrainConfig};
use serde::Serialize;

/// Bad flags, keys, values or config files. Maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T, UsageError> {
    Err(UsageError(msg.into()))
}

pub const SEED_ENV: &str = "OCT_ENGINE_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct HeatmapConfig {
    /// Defaults to an eighth of the crop side.
    pub patch: Option<usize>,
    /// Defaults to half the patch.
    pub stride: Option<usize>,
}

/// Everything a subcommand needs, validated before any compute.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub tiers: TierWeights,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub heatmap: HeatmapConfig,
}

/// One `section.key = value` setting and where it came from.
#[derive(Clone, Debug)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Read `file` into settings. Keys outside a section are rejected.
pub fn read_file(file: &Path) -> Result<Vec<Setting>, UsageError> {
    let ini = ini::Ini::load_from_file_noescape(file).map_err(|e| match e {
        ini::Error::Io(e) => UsageError(format!("cannot read config {}: {e}", file.display())),
        ini::Error::Parse(e) => UsageError(format!("{}:{}: {}", file.display(), e.line + 1, e.msg)),
    })?;
    let mut out = Vec::new();
    for (section, props) in ini.iter() {
        for (k, v) in props.iter() {
            let Some(section) = section else {
                return usage(format!("{}: key `{k}` appears before any [section]", file.display()));
            };
            out.push(Setting {
                key: format!("{}.{}", section.trim(), k.trim()),
                value: v.trim().to_string(),
                origin: file.display().to_string(),
            });
        }
    }
    Ok(out)
}

/// Parse `section.key=value` from `--set`.
pub fn parse_override(s: &str) -> Result<Setting, UsageError> {
    match s.split_once('=') {
        Some((k, v)) if k.contains('.') => Ok(Setting {
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            origin: "--set".to_string(),
        }),
        _ => usage(format!("--set expects section.key=value, got `{s}`")),
    }
}

fn parse<T: FromStr>(s: &Setting) -> Result<T, UsageError>
where
    T::Err: fmt::Display,
{
    s.value
        .parse()
        .map_err(|e| UsageError(format!("{} ({}): cannot parse `{}`: {e}", s.key, s.origin, s.value)))
}

fn parse_bool(s: &Setting) -> Result<bool, UsageError> {
    match s.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => usage(format!(
            "{} ({}): expected true or false, got `{}`",
            s.key, s.origin, s.value
        )),
    }
}

/// `N` or `HxW`.
fn parse_dims(s: &Setting) -> Result<(usize, usize), UsageError> {
    let bad = || {
        UsageError(format!(
            "{} ({}): expected N or HxW, got `{}`",
            s.key, s.origin, s.value
        ))
    };
    match s.value.split_once(['x', 'X']) {
        Some((h, w)) => Ok((
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = s.value.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

/// `BLOCKSxCHANNELS[f][d]`, comma separated; `f` factorizes the inception
/// convolutions and `d` halves the resolution on entry.
pub fn parse_stages(text: &str) -> Result<Vec<StageConfig>, String> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            let flags_at = item
                .find(|c: char| c.is_ascii_alphabetic() && c != 'x')
                .unwrap_or(item.len());
            let (dims, flags) = item.split_at(flags_at);
            let (b, c) = dims
                .split_once('x')
                .ok_or_else(|| format!("stage `{item}` is not BLOCKSxCHANNELS"))?;
            let num_blocks = b
                .trim()
                .parse()
                .map_err(|_| format!("stage `{item}`: bad block count"))?;
            let out_channels = c
                .trim()
                .parse()
                .map_err(|_| format!("stage `{item}`: bad channel count"))?;
            if let Some(bad) = flags.chars().find(|f| !matches!(f, 'f' | 'd')) {
                return Err(format!("stage `{item}`: unknown flag `{bad}`"));
            }
            Ok(StageConfig {
                num_blocks,
                out_channels,
                factorized: flags.contains('f'),
                downsample: flags.contains('d'),
            })
        })
        .collect()
}

/// `SRC+SRC>TARGET`, semicolon separated; empty for none.
pub fn parse_attention(text: &str) -> Result<Vec<AttentionLinkConfig>, String> {
    text.split(';')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|link| {
            let (srcs, target) = link
                .split_once('>')
                .ok_or_else(|| format!("link `{link}` is not SRC+SRC>TARGET"))?;
            let sources = srcs
                .split('+')
                .map(|s| s.trim().parse().map_err(|_| format!("link `{link}`: bad source `{s}`")))
                .collect::<Result<_, _>>()?;
            let target = target
                .trim()
                .parse()
                .map_err(|_| format!("link `{link}`: bad target"))?;
            Ok(AttentionLinkConfig { sources, target })
        })
        .collect()
}

impl RunConfig {
    /// Defaults for `phase`: the toy model with the matching head and the
    /// phase's optimizer.
    pub fn defaults(phase: Phase) -> Self {
        let head = match phase {
            Phase::Vae => HeadKind::VaeTwohead,
            Phase::Classifier => HeadKind::Classifier,
        };
        RunConfig {
            seed: 0,
            workers: 1,
            manifest: None,
            val_manifest: None,
            tiers: TierWeights::default(),
            model: ModelConfig::toy().with_head(head),
            augment: AugmentConfig::toy(),
            train: TrainConfig::for_phase(phase),
            heatmap: HeatmapConfig::default(),
        }
    }

    /// Defaults, then `settings` in order (later wins), then the seed
    /// fallback chain `--seed` > `run.seed` > `$OCT_ENGINE_SEED` > 0.
    pub fn build(phase: Phase, settings: &[Setting], seed_flag: Option<u64>) -> Result<Self, UsageError> {
        let mut cfg = RunConfig::defaults(phase);
        let mut seen = BTreeMap::new();
        let mut total_steps_set = false;
        let mut seed_set = false;
        let mut adam = (0.9, 0.999, 1e-8);
        let mut momentum = 0.9;
        let mut optimizer = None;
        for s in settings {
            if let Some(prev) = seen.insert(s.key.clone(), s.origin.clone()) {
                if prev == s.origin && s.origin != "--set" {
                    return usage(format!("{}: key `{}` is set twice", s.origin, s.key));
                }
            }
            let t = &mut cfg.train;
            let a = &mut cfg.augment;
            let m = &mut cfg.model;
            match s.key.as_str() {
                "run.seed" => {
                    cfg.seed = parse(s)?;
                    seed_set = true;
                }
                "run.workers" => cfg.workers = parse(s)?,
                "data.manifest" => cfg.manifest = Some(PathBuf::from(&s.value)),
                "data.val_manifest" => cfg.val_manifest = Some(PathBuf::from(&s.value)),
                "data.golden_weight" => cfg.tiers.golden = parse(s)?,
                "data.tfl_weight" => cfg.tiers.tfl = parse(s)?,

                "model.input_size" => {
                    let (h, w) = parse_dims(s)?;
                    m.input = [3, h, w];
                }
                "model.stem_channels" => m.stem_channels = parse(s)?,
                "model.stem_stride" => m.stem_stride = parse(s)?,
                "model.stages" => {
                    m.stages =
                        parse_stages(&s.value).map_err(|e| UsageError(format!("{} ({}): {e}", s.key, s.origin)))?
                }
                "model.attention" => {
                    m.attention_links =
                        parse_attention(&s.value).map_err(|e| UsageError(format!("{} ({}): {e}", s.key, s.origin)))?
                }
                "model.num_classes" => m.num_classes = parse(s)?,
                "model.latent_dim" => m.latent_dim = Some(parse(s)?),
                "model.dropout" => m.dropout = parse(s)?,

                "augment.resize" => a.resize = parse_dims(s)?,
                "augment.crop" => a.crop = parse_dims(s)?,
                "augment.flip_lr_prob" => a.flip_lr_prob = parse(s)?,
                "augment.flip_ud_prob" => a.flip_ud_prob = parse(s)?,
                "augment.hue_delta_max" => a.hue_delta_max = parse(s)?,
                "augment.contrast_min" => a.contrast_range.0 = parse(s)?,
                "augment.contrast_max" => a.contrast_range.1 = parse(s)?,
                "augment.saturation_min" => a.saturation_range.0 = parse(s)?,
                "augment.saturation_max" => a.saturation_range.1 = parse(s)?,
                "augment.mask_prob" => a.mask_prob = parse(s)?,
                "augment.mask_count_min" => a.mask_count_range.0 = parse(s)?,
                "augment.mask_count_max" => a.mask_count_range.1 = parse(s)?,
                "augment.mask_size_min" => a.mask_size_range.0 = parse(s)?,
                "augment.mask_size_max" => a.mask_size_range.1 = parse(s)?,

                "train.optimizer" => {
                    optimizer = Some(match s.value.as_str() {
                        "adam" => "adam",
                        "nesterov" => "nesterov",
                        v => {
                            return usage(format!(
                                "{} ({}): expected adam or nesterov, got `{v}`",
                                s.key, s.origin
                            ))
                        }
                    })
                }
                "train.beta1" => adam.0 = parse(s)?,
                "train.beta2" => adam.1 = parse(s)?,
                "train.adam_eps" => adam.2 = parse(s)?,
                "train.momentum" => momentum = parse(s)?,
                "train.base_lr" => t.schedule.base_lr = parse(s)?,
                "train.end_lr" => t.schedule.end_lr = parse(s)?,
                "train.power" => t.schedule.power = parse(s)?,
                "train.max_steps" => t.max_steps = parse(s)?,
                "train.total_steps" => {
                    t.schedule.total_steps = parse(s)?;
                    total_steps_set = true;
                }
                "train.batch_size" => t.batch_size = parse(s)?,
                "train.balanced" => t.balanced = parse_bool(s)?,
                "train.clip_norm" => t.clip_norm = parse(s)?,
                "train.eval_every" => t.eval_every = parse(s)?,
                "train.label_smoothing" => t.label_smoothing = parse(s)?,
                "train.beta" => t.beta = parse(s)?,
                "train.lambda" => t.lambda = parse(s)?,
                "train.sampler" => {
                    t.sampler = match s.value.as_str() {
                        "halton" => SamplerKind::Halton,
                        "prng" => SamplerKind::Prng,
                        v => return usage(format!("{} ({}): expected halton or prng, got `{v}`", s.key, s.origin)),
                    }
                }

                "heatmap.patch" => cfg.heatmap.patch = Some(parse(s)?),
                "heatmap.stride" => cfg.heatmap.stride = Some(parse(s)?),
                _ => return usage(format!("unknown key `{}` in {}", s.key, s.origin)),
            }
        }

        let current = cfg.train.optimizer;
        let kind = optimizer.unwrap_or(match current {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Nesterov { .. } => "nesterov",
        });
        cfg.train.optimizer = match kind {
            "adam" => OptimizerKind::Adam {
                beta1: adam.0,
                beta2: adam.1,
                eps: adam.2,
            },
            _ => OptimizerKind::Nesterov { momentum },
        };
        if !total_steps_set {
            cfg.train.schedule.total_steps = cfg.train.max_steps;
        }
        cfg.seed = match seed_flag {
            Some(s) => s,
            None if seed_set => cfg.seed,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| UsageError(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        cfg.train.seed = cfg.seed;
        cfg.train.augment = cfg.augment.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let wrap = |what: &str, e: octscreen::Error| UsageError(format!("invalid {what} settings: {e}"));
        self.model.validate().map_err(|e| wrap("[model]", e))?;
        self.augment.validate().map_err(|e| wrap("[augment]", e))?;
        self.train.validate().map_err(|e| wrap("[train]", e))?;
        self.tiers.validate().map_err(|e| wrap("[data]", e))?;
        if self.workers == 0 {
            return usage("run.workers must be at least 1");
        }
        let [_, h, w] = self.model.input;
        if self.augment.crop != (h, w) {
            return usage(format!(
                "augment.crop {:?} must equal model.input_size {:?}",
                self.augment.crop,
                (h, w)
            ));
        }
        if let Some(p) = self.heatmap.patch {
            if p == 0 || p > h.min(w) {
                return usage(format!("heatmap.patch {p} must be in 1..={}", h.min(w)));
            }
        }
        if self.heatmap.stride == Some(0) {
            return usage("heatmap.stride must be positive");
        }
        Ok(())
    }

    /// `(patch, stride)` with defaults filled in.
    pub fn heatmap_geometry(&self) -> (usize, usize) {
        let side = self.augment.crop.0.min(self.augment.crop.1);
        let patch = self.heatmap.patch.unwrap_or((side / 8).max(1));
        (patch, self.heatmap.stride.unwrap_or((patch / 2).max(1)))
    }
}
