//! Desk-scale synthetic segmentation data: colored rectangles and disks on a
//! background, one shape per grid cell so every shape stays visible.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::raster::{read_pgm, read_ppm, write_pgm, write_ppm, Image};
use crate::error::{Error, Result};

/// Fill color per class; class 0 is the background.
pub const PALETTE: [[u8; 3]; 8] = [
    [40, 40, 40],
    [220, 60, 60],
    [60, 200, 80],
    [70, 90, 230],
    [230, 210, 60],
    [200, 80, 220],
    [60, 210, 210],
    [240, 150, 60],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_per_image: usize,
    pub count: usize,
    pub seed: u64,
    /// Amplitude of uniform per-pixel color noise.
    pub noise: u8,
}

impl SyntheticSpec {
    pub fn desk(count: usize, seed: u64) -> Self {
        SyntheticSpec {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_image: 4,
            count,
            seed,
            noise: 24,
        }
    }

    fn grid(&self) -> usize {
        (1..).find(|g| g * g >= self.shapes_per_image).unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > PALETTE.len() {
            return Err(Error::Config(format!(
                "synthetic data supports 2..={} classes, got {}",
                PALETTE.len(),
                self.num_classes
            )));
        }
        let g = self.grid();
        if self.height / g < 6 || self.width / g < 6 {
            return Err(Error::Config(format!(
                "{} shapes do not fit a {}x{} image",
                self.shapes_per_image, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Image,
    pub label: Image,
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

/// Generates item `index`; the RNG stream depends only on `(spec.seed, index)`.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let g = spec.grid();
    let (ch, cw) = ((spec.height / g) as f64, (spec.width / g) as f64);
    let fg = spec.num_classes - 1;
    let offset = rng.random_range(0..fg);
    let mut shapes = Vec::with_capacity(spec.shapes_per_image);
    for j in 0..spec.shapes_per_image {
        let (oy, ox) = ((j / g) as f64 * ch, (j % g) as f64 * cw);
        let class = 1 + (j + offset) % fg;
        // half-extent between a quarter cell and half a cell minus a margin
        let lim = ch.min(cw) / 2.0 - 1.0;
        let a = rng.random_range(ch.min(cw) / 4.0..lim);
        let cy = oy + rng.random_range(1.0 + a..ch - 1.0 - a);
        let cx = ox + rng.random_range(1.0 + a..cw - 1.0 - a);
        let shape = if rng.random_bool(0.5) {
            let b = rng.random_range(ch.min(cw) / 4.0..lim);
            Shape::Rect {
                y0: cy - a,
                x0: cx - b.min(cx - ox - 1.0).min(ox + cw - 1.0 - cx),
                y1: cy + a,
                x1: cx + b.min(cx - ox - 1.0).min(ox + cw - 1.0 - cx),
            }
        } else {
            Shape::Disk { cy, cx, r: a }
        };
        shapes.push((shape, class));
    }
    let (h, w) = (spec.height, spec.width);
    let mut label = vec![0u8; h * w];
    let mut image = vec![0u8; h * w * 3];
    let noise = spec.noise as i16;
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let class = shapes.iter().find(|(s, _)| s.contains(py, px)).map_or(0, |&(_, c)| c);
            label[y * w + x] = class as u8;
            for c in 0..3 {
                let n = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
                image[(y * w + x) * 3 + c] = (PALETTE[class][c] as i16 + n).clamp(0, 255) as u8;
            }
        }
    }
    Ok(Sample {
        image: Image::new(w, h, 3, image)?,
        label: Image::new(w, h, 1, label)?,
    })
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: usize,
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub ignore_index: u8,
    #[serde(default)]
    pub spec: Option<SyntheticSpec>,
    pub items: Vec<ManifestItem>,
}

/// Writes `images/NNNNN.ppm`, `labels/NNNNN.pgm` and `manifest.json` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let items = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(spec, i)?;
            let item = ManifestItem {
                id: i,
                image: format!("images/{i:05}.ppm"),
                label: format!("labels/{i:05}.pgm"),
            };
            write_ppm(dir.join(&item.image), &s.image)?;
            write_pgm(dir.join(&item.label), &s.label)?;
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        num_classes: spec.num_classes,
        ignore_index: 255,
        spec: Some(spec.clone()),
        items,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Sample>)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let samples = manifest
        .items
        .iter()
        .map(|it| {
            let image = read_ppm(dir.join(&it.image))?;
            let label = read_pgm(dir.join(&it.label))?;
            if (image.width, image.height) != (label.width, label.height) {
                return Err(Error::Format(format!("item {} image and label sizes differ", it.id)));
            }
            Ok(Sample { image, label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
