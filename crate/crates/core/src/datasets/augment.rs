use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tensor};
use crate::error::{Error, Result};

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl NormStats {
    /// Channel mean and (population) standard deviation over `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.numel() / 3;
            for c in 0..3 {
                for v in &img.data()[c * plane..(c + 1) * plane] {
                    sum[c] += *v as f64;
                    sq[c] += (*v as f64) * (*v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Data("no images to compute normalization statistics".into()));
        }
        let n = count as f64;
        let mut out = NormStats::default();
        for c in 0..3 {
            let m = sum[c] / n;
            out.mean[c] = m as f32;
            out.std[c] = (sq[c] / n - m * m).max(0.0).sqrt() as f32;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub flip_prob: f64,
    /// Each factor is drawn uniformly from `[1 − s, 1 + s]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

/// Mirror a C×H×W image left-to-right.
pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        for (d, v) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *v;
        }
    }
    out
}

fn gray(img: &[f32], plane: usize, i: usize) -> f32 {
    0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]
}

fn normalize(mut img: Tensor<f32>, stats: &NormStats) -> Result<Tensor<f32>> {
    if stats.std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(Error::Data(format!("normalization std {:?} has a zero channel", stats.std)));
    }
    let plane = img.numel() / 3;
    for (c, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(img)
}

/// Training: random flip, brightness/contrast/saturation jitter, then
/// normalization. Eval: normalization only.
pub fn augment(image: &Tensor<f32>, mode: Mode, stats: &NormStats, jitter: &JitterConfig, seed: u64) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::invalid("augment", format!("expected 3×H×W, got {:?}", image.shape())));
    }
    if mode == Mode::Eval {
        return normalize(image.clone(), stats);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factor = |s: f64| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) as f32 } else { 1.0 };
    let b = factor(jitter.brightness);
    let c = factor(jitter.contrast);
    let s = factor(jitter.saturation);
    let mut img = if rng.random::<f64>() < jitter.flip_prob {
        hflip(image)
    } else {
        image.clone()
    };
    let plane = img.numel() / 3;
    let d = img.data_mut();
    for v in d.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let mean_gray = (0..plane).map(|i| gray(d, plane, i)).sum::<f32>() / plane as f32;
    for v in d.iter_mut() {
        *v = ((*v - mean_gray) * c + mean_gray).clamp(0.0, 1.0);
    }
    for i in 0..plane {
        let g = gray(d, plane, i);
        for ch in 0..3 {
            let v = &mut d[ch * plane + i];
            *v = ((*v - g) * s + g).clamp(0.0, 1.0);
        }
    }
    normalize(img, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::from_fn(&[3, 6, 5], |i| ((i * 13) % 17) as f32 / 17.0)
    }

    #[test]
    fn eval_mode_on_channel_means_is_zero() {
        let stats = NormStats { mean: [0.2, 0.5, 0.7], std: [0.1, 0.3, 0.2] };
        let mut img = Tensor::zeros(&[3, 4, 4]);
        for c in 0..3 {
            img.data_mut()[c * 16..(c + 1) * 16].fill(stats.mean[c]);
        }
        let out = augment(&img, Mode::Eval, &stats, &JitterConfig::default(), 0).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = sample();
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn zero_std_rejected() {
        let stats = NormStats { mean: [0.0; 3], std: [1.0, 0.0, 1.0] };
        assert!(augment(&sample(), Mode::Eval, &stats, &JitterConfig::default(), 0).is_err());
    }

    #[test]
    fn train_mode_is_seeded() {
        let img = sample();
        let st = NormStats::default();
        let j = JitterConfig::default();
        let a = augment(&img, Mode::Train, &st, &j, 3).unwrap();
        assert_eq!(a, augment(&img, Mode::Train, &st, &j, 3).unwrap());
    }

    #[test]
    fn empirical_flip_rate() {
        let img = Tensor::from_fn(&[3, 1, 2], |i| if i % 2 == 0 { 0.25 } else { 0.75 });
        let j = JitterConfig { brightness: 0.0, contrast: 0.0, saturation: 0.0, ..Default::default() };
        let st = NormStats::default();
        let n = 10_000;
        let flips = (0..n)
            .filter(|&s| augment(&img, Mode::Train, &st, &j, s as u64).unwrap().data()[0] > 0.5)
            .count();
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.5).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn jitter_stays_in_range() {
        let st = NormStats::default();
        for seed in 0..20 {
            let out = augment(&sample(), Mode::Train, &st, &JitterConfig::default(), seed).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn norm_stats_of_constant_channels() {
        let mut img = Tensor::zeros(&[3, 2, 2]);
        img.data_mut()[4..8].fill(0.5);
        img.data_mut()[8..12].fill(1.0);
        let s = NormStats::from_images([&img]).unwrap();
        assert_eq!(s.mean, [0.0, 0.5, 1.0]);
        assert_eq!(s.std, [0.0, 0.0, 0.0]);
    }
}
