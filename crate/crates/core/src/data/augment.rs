//! Resize, crop, flip, colour jitter, random masking and standardization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::halton::{QuasiRandomSampler, UnitSource};
use super::ImageU8;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest supported number of masks per image.
pub const MAX_MASKS: usize = 16;

// Sampler dimension of each augmentation parameter.
pub const DIM_CROP_Y: usize = 0;
pub const DIM_CROP_X: usize = 1;
pub const DIM_FLIP_LR: usize = 2;
pub const DIM_FLIP_UD: usize = 3;
pub const DIM_HUE: usize = 4;
pub const DIM_CONTRAST: usize = 5;
pub const DIM_SATURATION: usize = 6;
pub const DIM_MASK_GATE: usize = 7;
/// Mask count, then `(height, width, centre y, centre x)` per mask.
pub const DIM_MASKS: usize = 8;
/// Total dimensions consumed per image.
pub const AUG_DIMS: usize = DIM_MASKS + 1 + 4 * MAX_MASKS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskFill {
    /// Per-channel mean of the image being masked.
    #[default]
    PerImageMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub resize: (usize, usize),
    pub crop: (usize, usize),
    pub flip_lr_prob: f64,
    pub flip_ud_prob: f64,
    /// Maximum hue shift as a fraction of the hue circle.
    pub hue_delta_max: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// Probability that an image receives masks at all.
    pub mask_prob: f64,
    pub mask_count_range: (usize, usize),
    /// Mask side as a fraction of the image side.
    pub mask_size_range: (f64, f64),
    pub fill: MaskFill,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize: (256, 256),
            crop: (224, 224),
            flip_lr_prob: 0.5,
            flip_ud_prob: 0.5,
            hue_delta_max: 0.05,
            contrast_range: (0.8, 1.2),
            saturation_range: (0.8, 1.2),
            mask_prob: 1.0,
            mask_count_range: (5, 8),
            mask_size_range: (0.05, 0.2),
            fill: MaskFill::PerImageMean,
        }
    }
}

impl AugmentConfig {
    /// Resize 64, crop 56; otherwise the defaults.
    pub fn toy() -> Self {
        AugmentConfig {
            resize: (64, 64),
            crop: (56, 56),
            ..Default::default()
        }
    }

    /// Every random choice switched off; the train transform then equals
    /// [`eval_transform`] when driven by a midpoint sampler.
    pub fn degenerate(&self) -> Self {
        AugmentConfig {
            flip_lr_prob: 0.0,
            flip_ud_prob: 0.0,
            mask_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("augment: {m}")));
        if self.crop.0 == 0 || self.crop.1 == 0 || self.crop.0 > self.resize.0 || self.crop.1 > self.resize.1 {
            return bad(format!(
                "crop {:?} must be positive and fit in resize {:?}",
                self.crop, self.resize
            ));
        }
        for (k, p) in [
            ("flip_lr_prob", self.flip_lr_prob),
            ("flip_ud_prob", self.flip_ud_prob),
            ("mask_prob", self.mask_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{k} = {p} is not a probability"));
            }
        }
        let (lo, hi) = self.mask_count_range;
        if lo > hi || hi > MAX_MASKS {
            return bad(format!(
                "mask_count_range {:?} must be ordered within [0, {MAX_MASKS}]",
                self.mask_count_range
            ));
        }
        let (a, b) = self.mask_size_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad(format!(
                "mask_size_range {:?} must be ordered within (0, 1]",
                self.mask_size_range
            ));
        }
        if !(0.0..=0.5).contains(&self.hue_delta_max) {
            return bad(format!("hue_delta_max {} outside [0, 0.5]", self.hue_delta_max));
        }
        for (k, (a, b)) in [
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(a >= 0.0 && a <= b && b.is_finite()) {
                return bad(format!("{k} ({a}, {b}) must be ordered and non-negative"));
            }
        }
        Ok(())
    }
}

/// Bilinear resize of a CHW image with half-pixel centres.
pub fn resize_bilinear(img: &Tensor<f32>, (oh, ow): (usize, usize)) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(img)?;
    if (oh, ow) == (h, w) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

fn dims3(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::ShapeMismatch {
            op: "image",
            expected: vec![3, 0, 0],
            got: s.to_vec(),
        }),
    }
}

pub fn crop(img: &Tensor<f32>, y: usize, x: usize, (ch, cw): (usize, usize)) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(img)?;
    if y + ch > h || x + cw > w {
        return Err(Error::invalid(
            "crop",
            format!("{ch}x{cw} at ({y}, {x}) exceeds {h}x{w}"),
        ));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for r in y..y + ch {
            let row = k * h * w + r * w;
            out.extend_from_slice(&d[row + x..row + x + cw]);
        }
    }
    Tensor::new([c, ch, cw], out)
}

/// Offset for a crop with `slack` spare pixels; `u = 0.5` gives the
/// centre crop.
pub fn crop_offset(u: f64, slack: usize) -> usize {
    ((u * (slack + 1) as f64) as usize).min(slack)
}

pub fn flip_lr(img: &mut Tensor<f32>) {
    let w = img.shape()[2];
    img.data_mut().chunks_mut(w).for_each(|row| row.reverse());
}

pub fn flip_ud(img: &mut Tensor<f32>) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for plane in img.data_mut().chunks_mut(h * w) {
        for r in 0..h / 2 {
            let (a, b) = plane.split_at_mut((h - 1 - r) * w);
            a[r * w..(r + 1) * w].swap_with_slice(&mut b[..w]);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    if s == 0.0 {
        return (v, v, v);
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotate hue by `shift` (fraction of the circle) and scale saturation, in
/// HSV. A no-op at `(0, 1)`.
pub fn adjust_hue_saturation(img: &mut Tensor<f32>, shift: f64, saturation: f64) -> Result<()> {
    let (c, h, w) = dims3(img)?;
    if c != 3 {
        return Err(Error::invalid(
            "adjust_hue_saturation",
            format!("needs 3 channels, got {c}"),
        ));
    }
    if shift == 0.0 && saturation == 1.0 {
        return Ok(());
    }
    let n = h * w;
    let d = img.data_mut();
    for i in 0..n {
        let (hh, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let s = (s * saturation as f32).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(hh + shift as f32, s, v);
        d[i] = r;
        d[n + i] = g;
        d[2 * n + i] = b;
    }
    Ok(())
}

/// Scale deviations from the image's mean grey level, clamped to `[0, 1]`.
/// A no-op at factor 1.
pub fn adjust_contrast(img: &mut Tensor<f32>, factor: f64) {
    if factor == 1.0 {
        return;
    }
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.numel() as f64;
    for v in img.data_mut() {
        *v = (mean + factor * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
    }
}

/// Paint axis-aligned rectangles filled with the per-channel image mean.
///
/// `unit(0)` picks the count uniformly in `count_range`; mask `k` reads its
/// height, width and centre from `unit(1 + 4k ..= 4 + 4k)`. Rectangles are
/// clipped to the image and may overlap. Returns the number painted.
pub fn random_mask(
    img: &mut Tensor<f32>,
    count_range: (usize, usize),
    size_range: (f64, f64),
    fill: MaskFill,
    mut unit: impl FnMut(usize) -> f64,
) -> Result<usize> {
    let (c, h, w) = dims3(img)?;
    let (lo, hi) = count_range;
    if lo > hi {
        return Err(Error::invalid(
            "random_mask",
            format!("count range {count_range:?} is not ordered"),
        ));
    }
    let count = lo + ((unit(0) * (hi - lo + 1) as f64) as usize).min(hi - lo);
    if count == 0 {
        return Ok(0);
    }
    let MaskFill::PerImageMean = fill;
    let means: Vec<f32> = img
        .data()
        .chunks(h * w)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64) as f32)
        .collect();
    let side = |u: f64, len: usize| {
        (((size_range.0 + u * (size_range.1 - size_range.0)) * len as f64).round() as usize).max(1)
    };
    let d = img.data_mut();
    for k in 0..count {
        let base = 1 + 4 * k;
        let (mh, mw) = (side(unit(base), h), side(unit(base + 1), w));
        let cy = ((unit(base + 2) * h as f64) as usize).min(h - 1);
        let cx = ((unit(base + 3) * w as f64) as usize).min(w - 1);
        let (y0, x0) = (cy.saturating_sub(mh / 2), cx.saturating_sub(mw / 2));
        let (y1, x1) = ((y0 + mh).min(h), (x0 + mw).min(w));
        for (ch, &m) in means.iter().enumerate().take(c) {
            for y in y0..y1 {
                let row = ch * h * w + y * w;
                d[row + x0..row + x1].fill(m);
            }
        }
    }
    Ok(count)
}

/// [`random_mask`] driven by a PRNG.
pub fn random_mask_rng<R: Rng + ?Sized>(
    img: &mut Tensor<f32>,
    count_range: (usize, usize),
    size_range: (f64, f64),
    fill: MaskFill,
    rng: &mut R,
) -> Result<usize> {
    let units: Vec<f64> = (0..1 + 4 * count_range.1).map(|_| rng.random()).collect();
    random_mask(img, count_range, size_range, fill, |i| units[i])
}

/// `(x − mean) / max(std, 1e-6)` over every element.
pub fn standardize(img: &Tensor<f32>) -> Tensor<f32> {
    let n = img.numel().max(1) as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-6);
    let data = img.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

/// Network input and its unit-range counterpart (the reconstruction
/// target) for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub input: Tensor<f32>,
    pub unit: Tensor<f32>,
}

/// Resize, then centre crop, then standardize. No randomness.
pub fn eval_transform(image: &ImageU8, cfg: &AugmentConfig) -> Result<Augmented> {
    augment_with(image, &cfg.degenerate(), &UnitSource::Constant(0.5), 0)
}

/// The training transform at the sampler's current index.
pub fn augment_train(image: &ImageU8, cfg: &AugmentConfig, sampler: &QuasiRandomSampler) -> Result<Tensor<f32>> {
    Ok(augment_with(image, cfg, sampler.source(), sampler.index())?.input)
}

/// Resize → crop → flips → hue/contrast/saturation → masks → standardize,
/// reading every parameter from `source` at `index` in a fixed dimension
/// layout (see the `DIM_*` constants).
pub fn augment_with(image: &ImageU8, cfg: &AugmentConfig, source: &UnitSource, index: u64) -> Result<Augmented> {
    cfg.validate()?;
    let u = (0..AUG_DIMS)
        .map(|d| source.value(index, d))
        .collect::<Result<Vec<f64>>>()?;
    let lerp = |(a, b): (f64, f64), t: f64| a + t * (b - a);

    let resized = resize_bilinear(&image.to_unit_chw(), cfg.resize)?;
    let (sy, sx) = (cfg.resize.0 - cfg.crop.0, cfg.resize.1 - cfg.crop.1);
    let mut img = crop(
        &resized,
        crop_offset(u[DIM_CROP_Y], sy),
        crop_offset(u[DIM_CROP_X], sx),
        cfg.crop,
    )?;
    if u[DIM_FLIP_LR] < cfg.flip_lr_prob {
        flip_lr(&mut img);
    }
    if u[DIM_FLIP_UD] < cfg.flip_ud_prob {
        flip_ud(&mut img);
    }
    let hue = (2.0 * u[DIM_HUE] - 1.0) * cfg.hue_delta_max;
    let sat = lerp(cfg.saturation_range, u[DIM_SATURATION]);
    adjust_hue_saturation(&mut img, hue, sat)?;
    adjust_contrast(&mut img, lerp(cfg.contrast_range, u[DIM_CONTRAST]));
    if u[DIM_MASK_GATE] < cfg.mask_prob {
        random_mask(&mut img, cfg.mask_count_range, cfg.mask_size_range, cfg.fill, |i| {
            u[DIM_MASKS + i]
        })?;
    }
    Ok(Augmented {
        input: standardize(&img),
        unit: img,
    })
}
