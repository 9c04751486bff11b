//! Synthetic OCT-like B-scans: curved horizontal retinal layers with one
//! class signature each, plus speckle noise.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ExtendedColorType, ImageFormat};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Tier, CLASS_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Ground-truth lesion box in pixel coordinates, `x1`/`y1` exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesion {
    pub path: String,
    pub label: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Lesion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const LESIONS_NAME: &str = "lesions.csv";

/// Every fifth sample of a class is single-annotation.
fn tier_of(i: usize) -> Tier {
    if i % 5 == 4 {
        Tier::Tfl
    } else {
        Tier::Golden
    }
}

/// Thickness (fraction of the side) and brightness of each layer, top down.
const LAYERS: [(f32, f32); 6] = [
    (0.06, 0.65),
    (0.10, 0.35),
    (0.08, 0.22),
    (0.10, 0.15),
    (0.04, 0.85),
    (0.08, 0.35),
];
const BACKGROUND: f32 = 0.06;
const NOISE_STD: f32 = 0.04;

struct Scan {
    s: usize,
    px: Vec<f32>,
    top: f32,
    amp: f32,
    freq: f32,
    phase: f32,
}

impl Scan {
    fn new(s: usize, rng: &mut ChaCha8Rng) -> Self {
        let sf = s as f32;
        let mut scan = Scan {
            s,
            px: vec![BACKGROUND; s * s],
            top: sf * 0.3 + rng.random_range(-sf / 16.0..sf / 16.0),
            amp: rng.random_range(0.0..sf / 32.0),
            freq: rng.random_range(0.5..1.5),
            phase: rng.random_range(0.0..2.0 * PI),
        };
        for y in 0..s {
            for x in 0..s {
                let d = (y as f32 - scan.surface(x as f32)) / sf;
                let mut acc = 0.0;
                for (t, v) in LAYERS {
                    if d >= acc && d < acc + t {
                        scan.px[y * s + x] = v;
                    }
                    acc += t;
                }
            }
        }
        scan
    }

    fn surface(&self, x: f32) -> f32 {
        self.top + self.amp * (2.0 * PI * self.freq * x / self.s as f32 + self.phase).sin()
    }

    /// Upper edge of the bright fifth layer.
    fn rpe(&self, x: f32) -> f32 {
        let above: f32 = LAYERS[..4].iter().map(|l| l.0).sum();
        self.surface(x) + above * self.s as f32
    }

    fn paint(&mut self, mut f: impl FnMut(f32, f32, &mut f32)) {
        let s = self.s;
        for y in 0..s {
            for x in 0..s {
                f(x as f32 + 0.5, y as f32 + 0.5, &mut self.px[y * s + x]);
            }
        }
    }

    fn bbox(&self, label: usize, path: &str, x0: f32, y0: f32, x1: f32, y1: f32) -> Lesion {
        let clip = |v: f32| (v.max(0.0) as usize).min(self.s);
        Lesion {
            path: path.to_string(),
            label,
            x0: clip(x0.floor()),
            y0: clip(y0.floor()),
            x1: clip(x1.ceil()),
            y1: clip(y1.ceil()),
        }
    }
}

fn render(label: usize, s: usize, path: &str, rng: &mut ChaCha8Rng) -> (Vec<u8>, Option<Lesion>) {
    let sf = s as f32;
    let mut scan = Scan::new(s, rng);
    let cx = rng.random_range(0.3 * sf..0.7 * sf);
    let lesion = match label {
        1 => {
            // bright blob pushing up through the RPE
            let rx = rng.random_range(0.10 * sf..0.14 * sf);
            let ry = rng.random_range(0.06 * sf..0.08 * sf);
            let cy = scan.rpe(cx) - 0.5 * ry;
            scan.paint(|x, y, v| {
                if ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0 {
                    *v = 0.95;
                }
            });
            Some(scan.bbox(label, path, cx - rx, cy - ry, cx + rx, cy + ry))
        }
        2 => {
            // dark fluid cavity within the inner layers
            let rx = rng.random_range(0.08 * sf..0.12 * sf);
            let ry = rng.random_range(0.05 * sf..0.07 * sf);
            let cy = scan.surface(cx) + 0.18 * sf;
            scan.paint(|x, y, v| {
                if ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0 {
                    *v = 0.02;
                }
            });
            Some(scan.bbox(label, path, cx - rx, cy - ry, cx + rx, cy + ry))
        }
        3 => {
            // a row of small bumps on top of the RPE
            let n = rng.random_range(3..=4usize);
            let period = 0.08 * sf;
            let r = 0.035 * sf;
            let centres: Vec<(f32, f32)> = (0..n)
                .map(|k| {
                    let x = cx + (k as f32 - (n - 1) as f32 / 2.0) * period;
                    (x, scan.rpe(x))
                })
                .collect();
            scan.paint(|x, y, v| {
                if centres
                    .iter()
                    .any(|&(bx, by)| y <= by + 0.5 && (x - bx).hypot(y - by) <= r)
                {
                    *v = 0.9;
                }
            });
            let top = centres.iter().map(|c| c.1).fold(f32::INFINITY, f32::min) - r;
            let bottom = centres.iter().map(|c| c.1).fold(f32::NEG_INFINITY, f32::max) + LAYERS[4].0 * sf;
            Some(scan.bbox(label, path, centres[0].0 - r, top, centres[n - 1].0 + r, bottom))
        }
        _ => None,
    };
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let bytes = scan
        .px
        .iter()
        .map(|&v| ((v + noise.sample(rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    (bytes, lesion)
}

/// Write `n_per_class` PGM images per class under `out_dir/images`, a
/// `path,label,tier` manifest and a lesion box table. Returns the manifest
/// path.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.size < 16 {
        return Err(Error::Config(format!(
            "synthetic size must be at least 16, got {}",
            spec.size
        )));
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = csv::Writer::from_writer(Vec::new());
    let mut lesions = csv::Writer::from_writer(Vec::new());
    manifest.write_record(["path", "label", "tier"]).map_err(csv_err)?;
    for (label, class) in CLASS_NAMES.iter().enumerate() {
        for i in 0..spec.n_per_class {
            let rel = format!("images/{}_{i:04}.pgm", class.to_lowercase());
            let mut img_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let (bytes, lesion) = render(label, spec.size, &rel, &mut img_rng);
            let path = out_dir.join(&rel);
            image::save_buffer_with_format(
                &path,
                &bytes,
                spec.size as u32,
                spec.size as u32,
                ExtendedColorType::L8,
                ImageFormat::Pnm,
            )
            .map_err(|e| Error::Decode {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            manifest
                .write_record([rel.as_str(), class, tier_of(i).as_str()])
                .map_err(csv_err)?;
            if let Some(l) = lesion {
                lesions.serialize(l).map_err(csv_err)?;
            }
        }
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    for (path, w) in [(&manifest_path, manifest), (&out_dir.join(LESIONS_NAME), lesions)] {
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(manifest_path)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Read a lesion table written by [`synth_generate`].
pub fn load_lesions(path: &Path) -> Result<Vec<Lesion>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}
