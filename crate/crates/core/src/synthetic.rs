//! Seeded synthetic fundus-like datasets with a planted linear signal.
//!
//! Images are mid-grey squares with uniform pixel noise. The image is divided
//! into 16×16 tiles and label `ℓ` owns tile `ℓ`. A positive sample adds two
//! features to its tile:
//!
//! * a coarse checker of 8×8 quadrants (`+a, −a / −a, +a`);
//! * a 2×2 dot of amplitude `2a` at the tile center.
//!
//! The bilinear 8×8 downscale of a 64×64 image samples pixels 3, 4, 11, 12 of
//! every tile axis and sees only the checker; the 4×4 downscale samples pixels
//! 7 and 8, where the checker averages out, and sees only the dot. The two
//! resolutions therefore carry independent evidence of equal strength about
//! every label: the 8×8 grid reads four cells of `±a`, the 4×4 grid one cell
//! of `2a`.
//! The disease-risk column is the OR of the labels.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMatrix, LabelSchema, SampleRecord};
use crate::imaging::ImageBuffer;
use crate::seeds::{derive, stream};
use crate::{Error, Result};

const TILE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_labels: usize,
    pub prevalence: f64,
    /// Signal amplitude added to a positive tile.
    pub amplitude: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub disease_risk_name: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            image_size: 64,
            n_labels: 4,
            prevalence: 0.3,
            amplitude: 0.06,
            noise: 0.25,
            disease_risk_name: "Disease_Risk".into(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let tiles = (self.image_size / TILE).pow(2);
        if !self.image_size.is_multiple_of(TILE) || self.n_labels == 0 || self.n_labels > tiles {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a multiple of {TILE} with at least {} tiles",
                self.image_size, self.n_labels
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(0.0 < self.prevalence && self.prevalence < 1.0) {
            return Err(Error::InvalidArgument("prevalence must be in (0, 1)".into()));
        }
        if !(self.amplitude >= 0.0 && self.noise >= 0.0 && 3.0 * self.amplitude + self.noise < 0.5) {
            return Err(Error::InvalidArgument(
                "3·amplitude + noise must stay below 0.5 to avoid clipping".into(),
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![self.disease_risk_name.clone()];
        names.extend((1..=self.n_labels).map(|i| format!("L{i}")));
        names
    }
}

pub struct SyntheticDataset {
    pub labels: LabelMatrix,
    pub images: Vec<ImageBuffer>,
}

fn render(cfg: &SyntheticConfig, labels: &[u8], rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    let n = cfg.image_size;
    let per_row = n / TILE;
    let mut data = Vec::with_capacity(n * n * 3);
    for r in 0..n {
        for c in 0..n {
            let tile = (r / TILE) * per_row + c / TILE;
            let mut signal = 0.0;
            if tile < cfg.n_labels && labels[tile] == 1 {
                let (tr, tc) = (r % TILE, c % TILE);
                let checker = if (tr < TILE / 2) == (tc < TILE / 2) { 1.0 } else { -1.0 };
                signal += cfg.amplitude * checker;
                let mid = TILE / 2;
                if (mid - 1..=mid).contains(&tr) && (mid - 1..=mid).contains(&tc) {
                    signal += 2.0 * cfg.amplitude;
                }
            }
            for _ in 0..3 {
                let noise = rng.gen_range(-cfg.noise..=cfg.noise);
                data.push((0.5 + signal + noise).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(n, n, data)
}

/// Generates the dataset; the same config always yields the same images.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let schema = LabelSchema::new(cfg.class_names(), cfg.disease_risk_name.clone())?;
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut images = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, stream::SYNTHETIC, i as u64));
        let marks: Vec<u8> = (0..cfg.n_labels)
            .map(|_| u8::from(rng.gen_bool(cfg.prevalence)))
            .collect();
        let mut labels = vec![u8::from(marks.contains(&1))];
        labels.extend(&marks);
        images.push(render(cfg, &marks, &mut rng)?);
        records.push(SampleRecord {
            sample_id: format!("syn{:05}", i + 1),
            image_path: None,
            labels,
        });
    }
    Ok(SyntheticDataset {
        labels: LabelMatrix::new(schema, records)?,
        images,
    })
}

impl SyntheticDataset {
    /// Writes `images/<id>.png` and `manifest.csv` under `dir`, returning the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let image_dir = dir.join("images");
        for (rec, img) in self.labels.records().iter().zip(&self.images) {
            img.save_png(&image_dir.join(format!("{}.png", rec.sample_id)))?;
        }
        let manifest = dir.join("manifest.csv");
        self.labels.write_manifest(&manifest, "ID")?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::resize_bilinear;

    #[test]
    fn deterministic_and_risk_is_or() {
        let cfg = SyntheticConfig {
            n_samples: 30,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        for rec in a.labels.records() {
            let any = rec.labels[1..].contains(&1);
            assert_eq!(rec.labels[0], u8::from(any));
        }
    }

    #[test]
    fn each_resolution_sees_one_feature() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = render(&cfg, &[1, 0, 0, 0], &mut rng).unwrap();
        let blank = render(&cfg, &[0, 0, 0, 0], &mut rng).unwrap();
        let diff = |size| {
            let a = resize_bilinear(&img, size).unwrap().into_data();
            let b = resize_bilinear(&blank, size).unwrap().into_data();
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
        };
        // 8×8: the four tile cells see ±a of the checker, 3 channels each
        assert!((diff(8) - 12.0 * cfg.amplitude).abs() < 1e-12);
        // 4×4: the tile cell sees only the dot
        assert!((diff(4) - 6.0 * cfg.amplitude).abs() < 1e-12);
    }
}
