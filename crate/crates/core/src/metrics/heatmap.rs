//! Occlusion-sensitivity heatmaps and penultimate-feature export.

use std::fs;
use std::path::Path;

use image::{ExtendedColorType, ImageFormat};
use serde::Serialize;

use crate::data::{eval_transform, AugmentConfig, Dataset, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Occluded copies evaluated per forward pass.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub target: usize,
    /// Target probability on the unoccluded image.
    pub base: f64,
    /// Probability drop per cell, row-major.
    pub grid: Vec<f64>,
    /// Per-pixel mean drop over the cells covering it, row-major.
    pub full: Vec<f64>,
}

/// Cells along a side of length `side`.
pub fn grid_len(side: usize, patch: usize, stride: usize) -> usize {
    (side - patch) / stride + 1
}

impl Heatmap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.grid[r * self.cols + c]
    }

    /// Row and column of the largest drop (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .grid
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > self.grid[best] { i } else { best });
        (i / self.cols, i % self.cols)
    }

    /// Pixel-space centre `(y, x)` of a cell.
    pub fn cell_centre(&self, r: usize, c: usize) -> (f64, f64) {
        let h = self.patch as f64 / 2.0;
        ((r * self.stride) as f64 + h, (c * self.stride) as f64 + h)
    }

    /// `{stem}_grid.pgm`, `{stem}_full.pgm` (min-max scaled) and
    /// `{stem}_grid.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_pgm(&dir.join(format!("{stem}_grid.pgm")), &self.grid, self.cols, self.rows)?;
        save_pgm(
            &dir.join(format!("{stem}_full.pgm")),
            &self.full,
            self.width,
            self.height,
        )?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in 0..self.rows {
            w.write_record(
                self.grid[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .map(|v| v.to_string()),
            )
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        let path = dir.join(format!("{stem}_grid.csv"));
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }
}

fn save_pgm(path: &Path, values: &[f64], w: usize, h: usize) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u8> = values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    image::save_buffer_with_format(path, &px, w as u32, h as u32, ExtendedColorType::L8, ImageFormat::Pnm).map_err(
        |e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
    )
}

/// Slide a `patch × patch` square filled with the per-channel image mean
/// over `image` (`3 × H × W`, already transformed) at `stride`, recording
/// the drop in the probability of `target`.
pub fn occlusion_heatmap(
    model: &mut Model,
    image: &Tensor<f32>,
    target: usize,
    patch: usize,
    stride: usize,
) -> Result<Heatmap> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => {
            return Err(Error::ShapeMismatch {
                op: "occlusion_heatmap",
                expected: vec![3, 0, 0],
                got: s.to_vec(),
            })
        }
    };
    if patch == 0 || stride == 0 || patch > h || patch > w {
        return Err(Error::invalid(
            "occlusion_heatmap",
            format!("patch {patch} / stride {stride} invalid for a {h}x{w} image"),
        ));
    }
    if target >= model.cfg.num_classes {
        return Err(Error::invalid(
            "occlusion_heatmap",
            format!("target class {target} out of range"),
        ));
    }
    let (rows, cols) = (grid_len(h, patch, stride), grid_len(w, patch, stride));
    let plane = h * w;
    let means: Vec<f32> = image
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    let batched = image.reshape([1, c, h, w])?;
    let base = model.predict(&batched)?.row(0)[target] as f64;

    let cells = rows * cols;
    let mut grid = Vec::with_capacity(cells);
    for lo in (0..cells).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(cells);
        let mut data = Vec::with_capacity((hi - lo) * c * plane);
        for cell in lo..hi {
            let (y0, x0) = ((cell / cols) * stride, (cell % cols) * stride);
            let mut img = image.data().to_vec();
            for (ch, &m) in means.iter().enumerate() {
                for y in y0..y0 + patch {
                    let row = ch * plane + y * w;
                    img[row + x0..row + x0 + patch].fill(m);
                }
            }
            data.extend(img);
        }
        let probs = model.predict(&Tensor::new([hi - lo, c, h, w], data)?)?;
        grid.extend((0..hi - lo).map(|i| base - probs.row(i)[target] as f64));
    }

    // every pixel averages the cells covering it; uncovered edge pixels take
    // the nearest cell
    let mut full = vec![0.0; plane];
    for y in 0..h {
        let ry = (y.saturating_sub(patch - 1)).div_ceil(stride)..=(y / stride).min(rows - 1);
        let ry = if ry.is_empty() { rows - 1..=rows - 1 } else { ry };
        for x in 0..w {
            let rx = (x.saturating_sub(patch - 1)).div_ceil(stride)..=(x / stride).min(cols - 1);
            let rx = if rx.is_empty() { cols - 1..=cols - 1 } else { rx };
            let (mut s, mut n) = (0.0, 0usize);
            for r in ry.clone() {
                for cc in rx.clone() {
                    s += grid[r * cols + cc];
                    n += 1;
                }
            }
            full[y * w + x] = s / n as f64;
        }
    }
    Ok(Heatmap {
        rows,
        cols,
        patch,
        stride,
        height: h,
        width: w,
        target,
        base,
        grid,
        full,
    })
}

/// Write `path,label,f_0..f_{D-1}` rows of pooled features under the
/// evaluation transform. Returns the feature width.
pub fn export_features(model: &mut Model, data: &Dataset, cfg: &AugmentConfig, out_path: &Path) -> Result<usize> {
    let d = model.cfg.feature_dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = ["path".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|i| format!("f_{i}")))
        .collect();
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(fmt)?;
    for lo in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (lo..(lo + CHUNK).min(data.len())).collect();
        let imgs: Vec<Tensor<f32>> = idx
            .iter()
            .map(|&i| {
                let t = eval_transform(&data.images[i], cfg)?.input;
                let s = t.shape().to_vec();
                t.reshape([1, s[0], s[1], s[2]])
            })
            .collect::<Result<_>>()?;
        let feats = model.features(&Tensor::concat_batch(&imgs)?)?;
        for (j, &i) in idx.iter().enumerate() {
            let r = &data.records[i];
            let mut row = vec![
                r.path.display().to_string(),
                CLASS_NAMES.get(r.label).copied().unwrap_or("?").to_string(),
            ];
            row.extend(feats.row(j).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(fmt)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_path, bytes).map_err(|e| Error::io(out_path, e))?;
    Ok(d)
}
