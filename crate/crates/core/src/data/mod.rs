//! Manifests, image decoding, class-balanced batching and augmentation.

pub mod augment;
pub mod halton;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{
    augment_train, augment_with, eval_transform, random_mask, standardize, AugmentConfig, Augmented, AUG_DIMS,
};
pub use halton::{Halton, QuasiRandomSampler, UnitSource};
pub use synth::{load_lesions, synth_generate, Lesion, SynthSpec};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Canonical class order.
pub const CLASS_NAMES: [&str; 4] = ["NORMAL", "CNV", "DME", "DRUSEN"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| c.eq_ignore_ascii_case(name.trim()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Multi-annotator labels.
    Golden,
    /// Single-annotator labels.
    Tfl,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Golden => "golden",
            Tier::Tfl => "tfl",
        }
    }
}

/// Per-sample loss weights by annotation tier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierWeights {
    pub golden: f32,
    pub tfl: f32,
}

impl Default for TierWeights {
    fn default() -> Self {
        TierWeights { golden: 1.0, tfl: 0.3 }
    }
}

impl TierWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tfl > 0.0 && self.golden >= self.tfl && self.golden.is_finite()) {
            return Err(Error::Config(format!(
                "tier weights need golden >= tfl > 0, got golden {} tfl {}",
                self.golden, self.tfl
            )));
        }
        Ok(())
    }

    pub fn of(&self, tier: Tier) -> f32 {
        match tier {
            Tier::Golden => self.golden,
            Tier::Tfl => self.tfl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: usize,
    pub tier: Tier,
    pub weight: f32,
}

#[derive(Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    tier: String,
}

/// Parse a `path,label,tier` manifest. Relative paths resolve against the
/// manifest's directory. Errors name the offending line.
pub fn load_manifest(path: &Path, weights: &TierWeights) -> Result<Vec<SampleRecord>> {
    weights.validate()?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        k => parse_err(1, format!("{k:?}")),
    })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["path", "label", "tier"] {
        return Err(parse_err(
            1,
            format!(
                "expected header `path,label,tier`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        let label = class_id(&row.label).ok_or_else(|| {
            parse_err(
                line,
                format!(
                    "unknown label `{}` (expected one of {})",
                    row.label,
                    CLASS_NAMES.join(", ")
                ),
            )
        })?;
        let tier = match row.tier.trim().to_ascii_lowercase().as_str() {
            "golden" => Tier::Golden,
            "tfl" => Tier::Tfl,
            other => {
                return Err(parse_err(
                    line,
                    format!("unknown tier `{other}` (expected golden or tfl)"),
                ))
            }
        };
        let rel = PathBuf::from(row.path.trim());
        let full = if rel.is_absolute() { rel } else { base.join(rel) };
        if !full.is_file() {
            return Err(parse_err(line, format!("image `{}` does not exist", full.display())));
        }
        if !seen.insert(full.clone()) {
            log::warn!("{}:{line}: duplicate path {}", path.display(), full.display());
        }
        records.push(SampleRecord {
            path: full,
            label,
            tier,
            weight: weights.of(tier),
        });
    }
    let counts = class_counts(&records, CLASS_NAMES.len());
    log::info!(
        "{}: {} records, per-class counts {counts:?}",
        path.display(),
        records.len()
    );
    Ok(records)
}

/// Number of records per class id in `0..k`.
pub fn class_counts(records: &[SampleRecord], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for r in records {
        if r.label < k {
            c[r.label] += 1;
        }
    }
    c
}

/// Decoded 8-bit image, `height × width × 3` interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(
                "image",
                format!("{} bytes for {height}x{width}x3", data.len()),
            ));
        }
        Ok(ImageU8 { height, width, data })
    }

    /// Replicate a single grey plane to three channels.
    pub fn from_gray(height: usize, width: usize, grey: &[u8]) -> Result<Self> {
        Self::new(height, width, grey.iter().flat_map(|&v| [v, v, v]).collect())
    }

    /// `3 × H × W` in `[0, 1]`.
    pub fn to_unit_chw(&self) -> Tensor<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0f32; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([3, self.height, self.width], out).expect("sized above")
    }
}

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// Decode a PNG or PGM file of any size; grey images are replicated to
/// three channels.
pub fn read_image(path: &Path) -> Result<ImageU8> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let rgb = img.to_rgb8();
    ImageU8::new(rgb.height() as usize, rgb.width() as usize, rgb.into_raw())
}

/// [`read_image`], rejecting images smaller than [`MIN_SIDE`].
pub fn decode_image(path: &Path) -> Result<ImageU8> {
    let img = read_image(path)?;
    if img.height < MIN_SIDE || img.width < MIN_SIDE {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            msg: format!("{}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}", img.height, img.width),
        });
    }
    Ok(img)
}

/// Records with their decoded images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<ImageU8>,
}

/// One assembled batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Standardized network inputs, `B × 3 × crop × crop`.
    pub images: Tensor<f32>,
    /// The same crops in `[0, 1]` before standardization.
    pub targets: Tensor<f32>,
    pub labels: Vec<usize>,
    pub weights: Vec<f32>,
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn load(manifest: &Path, weights: &TierWeights) -> Result<Self> {
        let records = load_manifest(manifest, weights)?;
        let images = par::map_range(records.len(), |i| decode_image(&records[i].path))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn assemble(&self, indices: &[usize], items: Vec<Result<Augmented>>) -> Result<Batch> {
        let items = items.into_iter().collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Tensor<f32>> = items
            .iter()
            .map(|a| a.input.reshape(prepend1(a.input.shape())))
            .collect::<Result<_>>()?;
        let units: Vec<Tensor<f32>> = items
            .iter()
            .map(|a| a.unit.reshape(prepend1(a.unit.shape())))
            .collect::<Result<_>>()?;
        Ok(Batch {
            images: Tensor::concat_batch(&inputs)?,
            targets: Tensor::concat_batch(&units)?,
            labels: indices.iter().map(|&i| self.records[i].label).collect(),
            weights: indices.iter().map(|&i| self.records[i].weight).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Training transform of `indices`; element `j` uses sampler index
    /// `first + j`, so the result does not depend on thread scheduling.
    pub fn train_batch(
        &self,
        indices: &[usize],
        cfg: &AugmentConfig,
        source: &UnitSource,
        first: u64,
    ) -> Result<Batch> {
        self.check(indices)?;
        let items = par::map_range(indices.len(), |j| {
            augment_with(&self.images[indices[j]], cfg, source, first + j as u64)
        });
        self.assemble(indices, items)
    }

    /// Deterministic evaluation transform of `indices`.
    pub fn eval_batch(&self, indices: &[usize], cfg: &AugmentConfig) -> Result<Batch> {
        self.check(indices)?;
        let items = par::map_range(indices.len(), |j| eval_transform(&self.images[indices[j]], cfg));
        self.assemble(indices, items)
    }

    fn check(&self, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| i >= self.len()) {
            Some(i) => Err(Error::invalid(
                "batch",
                format!("index {i} out of range for {} records", self.len()),
            )),
            None if indices.is_empty() => Err(Error::invalid("batch", "empty batch")),
            None => Ok(()),
        }
    }
}

fn prepend1(s: &[usize]) -> Vec<usize> {
    std::iter::once(1).chain(s.iter().copied()).collect()
}

/// Record indices for one batch. Balanced mode picks a class uniformly in
/// `0..num_classes` and then a record of that class uniformly; otherwise
/// records are drawn uniformly. Draws are with replacement.
pub fn sample_indices<R: Rng + ?Sized>(
    records: &[SampleRecord],
    batch_size: usize,
    balanced: bool,
    num_classes: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if records.is_empty() || batch_size == 0 {
        return Err(Error::invalid("next_batch", "need records and a positive batch size"));
    }
    if !balanced {
        return Ok((0..batch_size).map(|_| rng.random_range(0..records.len())).collect());
    }
    if batch_size < num_classes {
        return Err(Error::invalid(
            "next_batch",
            format!("balanced batch of {batch_size} is smaller than {num_classes} classes"),
        ));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..num_classes).map(|c| (c, Vec::new())).collect();
    for (i, r) in records.iter().enumerate() {
        by_class
            .get_mut(&r.label)
            .ok_or_else(|| Error::invalid("next_batch", format!("label {} outside 0..{num_classes}", r.label)))?
            .push(i);
    }
    if let Some((c, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::invalid("next_batch", format!("class {c} has no records")));
    }
    Ok((0..batch_size)
        .map(|_| {
            let members = &by_class[&rng.random_range(0..num_classes)];
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

/// Draw a batch and augment it, advancing `sampler` by `batch_size`.
pub fn next_batch<R: Rng + ?Sized>(
    data: &Dataset,
    batch_size: usize,
    balanced: bool,
    num_classes: usize,
    rng: &mut R,
    cfg: &AugmentConfig,
    sampler: &mut QuasiRandomSampler,
) -> Result<Batch> {
    let idx = sample_indices(&data.records, batch_size, balanced, num_classes, rng)?;
    let batch = data.train_batch(&idx, cfg, sampler.source(), sampler.index())?;
    sampler.advance(batch_size as u64);
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ids_follow_canonical_order() {
        assert_eq!(class_id("normal"), Some(0));
        assert_eq!(class_id("DRUSEN"), Some(3));
        assert_eq!(class_id("GLAUCOMA"), None);
    }

    #[test]
    fn tier_weights_must_be_ordered() {
        TierWeights::default().validate().unwrap();
        assert!(TierWeights { golden: 0.2, tfl: 0.3 }.validate().is_err());
        assert!(TierWeights { golden: 1.0, tfl: 0.0 }.validate().is_err());
    }

    #[test]
    fn grey_replicates_to_three_channels() {
        let img = ImageU8::from_gray(1, 2, &[10, 200]).unwrap();
        assert_eq!(img.data, vec![10, 10, 10, 200, 200, 200]);
        let t = img.to_unit_chw();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[3], 200.0 / 255.0);
    }
}
