//! Desk-scale identity images: each identity is a fixed layout of coloured
//! blobs over a tinted, striped background; each image of it is a slightly
//! shifted, re-lit and noisy rendering of that layout.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::write_ppm;
use super::manifest::{write_manifest, Aspect, ManifestRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug)]
struct Blob {
    cy: f32,
    cx: f32,
    sigma: f32,
    color: [f32; 3],
}

#[derive(Clone, Debug)]
struct IdentityPattern {
    tint: [f32; 3],
    stripe_angle: f32,
    stripe_freq: f32,
    blobs: Vec<Blob>,
}

impl IdentityPattern {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut color = || [rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let tint = color().map(|c| 0.25 + 0.5 * c);
        let blob_colors: Vec<[f32; 3]> = (0..3).map(|_| color()).collect();
        let blobs = blob_colors
            .into_iter()
            .map(|color| Blob {
                cy: rng.random_range(0.15..0.85),
                cx: rng.random_range(0.15..0.85),
                sigma: rng.random_range(0.07..0.14),
                color,
            })
            .collect();
        Self {
            tint,
            stripe_angle: rng.random_range(0.0..std::f32::consts::PI),
            stripe_freq: rng.random_range(2.0..5.0),
            blobs,
        }
    }

    fn render(&self, size: usize, rng: &mut impl Rng) -> Tensor<f32> {
        let max_shift = 1.0 / 16.0;
        let dy = rng.random_range(-max_shift..max_shift);
        let dx = rng.random_range(-max_shift..max_shift);
        let gain = rng.random_range(0.9..1.1f32);
        let noise = Normal::new(0.0f32, 0.03).expect("valid std");
        let (sin, cos) = self.stripe_angle.sin_cos();
        let mut img = Tensor::zeros(&[3, size, size]);
        let plane = size * size;
        for y in 0..size {
            for x in 0..size {
                let v = (y as f32 + 0.5) / size as f32 - dy;
                let u = (x as f32 + 0.5) / size as f32 - dx;
                let stripe = 0.12 * (std::f32::consts::TAU * self.stripe_freq * (u * cos + v * sin)).sin();
                let mut px = self.tint.map(|t| t + stripe);
                for b in &self.blobs {
                    let d2 = (v - b.cy).powi(2) + (u - b.cx).powi(2);
                    let w = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - w) + b.color[c] * w;
                    }
                }
                for c in 0..3 {
                    let val = px[c] * gain + noise.sample(rng);
                    img.data_mut()[c * plane + y * size + x] = val.clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

/// Render `num_ids × imgs_per_id` images as in-memory `(record, image)`
/// pairs; identities are zero-padded numbers starting at 1.
pub fn synth_images(num_ids: usize, imgs_per_id: usize, size: usize, seed: u64) -> Result<Vec<(ManifestRecord, Tensor<f32>)>> {
    if num_ids < 2 || imgs_per_id < 2 {
        return Err(Error::invalid(
            "synth_dataset",
            format!("need at least 2 identities and 2 images each, got {num_ids}×{imgs_per_id}"),
        ));
    }
    if size < 8 {
        return Err(Error::invalid("synth_dataset", "image size must be at least 8"));
    }
    let width = num_ids.to_string().len().max(4);
    let mut out = Vec::with_capacity(num_ids * imgs_per_id);
    for id in 0..num_ids {
        let pattern = IdentityPattern::draw(&mut seed::rng(seed, "identity", id as u64));
        let label = format!("{:0width$}", id + 1);
        for j in 0..imgs_per_id {
            let mut rng = seed::rng(seed, "image", (id * imgs_per_id + j) as u64);
            let img = pattern.render(size, &mut rng);
            let record = ManifestRecord::new(format!("images/{label}_{j:03}.ppm"), label.clone(), Aspect::None);
            out.push((record, img));
        }
    }
    Ok(out)
}

/// Write images and `manifest.csv` under `out_dir`; returns the manifest
/// path.
pub fn synth_dataset(num_ids: usize, imgs_per_id: usize, size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    let items = synth_images(num_ids, imgs_per_id, size, seed)?;
    for (record, img) in &items {
        write_ppm(&out_dir.join(&record.image_path), img)?;
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    let records: Vec<ManifestRecord> = items.into_iter().map(|(r, _)| r).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
