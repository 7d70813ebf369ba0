//! Synthetic sensor with known noise components.
//!
//! A dark frame is `black + S* + band + read + hot`: a smooth fixed pattern
//! (blurred white noise), a band shared by all channels, per-pixel read noise
//! (Gaussian or Tukey-lambda) and fixed hot pixels. `SimConfig::seed` fixes
//! the structure (fixed pattern, hot pixels, scene); the per-call seed drives
//! temporal noise only.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::darksynth::gaussian_blur;
use crate::error::{Error, Result};
use crate::photon::sample_poisson_signal;
use crate::rng::{domain, substream};
use crate::tensor::{mean, FrameMeta, PlanarImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ReadNoise {
    Gaussian,
    /// Tukey-lambda with shape `lambda`, rescaled to standard deviation
    /// `sigma_read`. Negative shapes give heavier tails than a Gaussian.
    TukeyLambda { lambda: f64 },
}

/// Axis along which the band signal varies. `Columns` means one value per
/// column, constant down the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandAxis {
    Columns,
    Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub iso: u32,
    pub black_level: f64,
    pub white_level: f64,
    pub g_true: f64,
    pub read_noise: ReadNoise,
    pub sigma_read: f64,
    pub sigma_band: f64,
    pub band_axis: BandAxis,
    pub fpn_amplitude: f64,
    /// Blur sigma of the white noise behind the fixed pattern, pixels.
    pub fpn_scale: f64,
    pub hot_pixel_rate: f64,
    pub hot_pixel_amplitude: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 256,
            width: 256,
            iso: 800,
            black_level: 512.0,
            white_level: 16383.0,
            g_true: 1.8,
            read_noise: ReadNoise::Gaussian,
            sigma_read: 3.0,
            sigma_band: 3.0,
            band_axis: BandAxis::Columns,
            fpn_amplitude: 4.0,
            fpn_scale: 100.0,
            hot_pixel_rate: 1e-4,
            hot_pixel_amplitude: 200.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad(format!("empty frame {}x{}x{}", self.channels, self.height, self.width));
        }
        self.meta().validate()?;
        if !(self.g_true > 0.0 && self.g_true.is_finite()) {
            return bad(format!("g_true must be positive, got {}", self.g_true));
        }
        for (name, v) in [
            ("sigma_read", self.sigma_read),
            ("sigma_band", self.sigma_band),
            ("fpn_amplitude", self.fpn_amplitude),
            ("hot_pixel_amplitude", self.hot_pixel_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.hot_pixel_rate) {
            return bad(format!("hot_pixel_rate must lie in [0, 1], got {}", self.hot_pixel_rate));
        }
        if self.fpn_amplitude > 0.0 && !(self.fpn_scale > 0.0 && self.fpn_scale.is_finite()) {
            return bad(format!("fpn_scale must be positive, got {}", self.fpn_scale));
        }
        if let ReadNoise::TukeyLambda { lambda } = self.read_noise {
            if !(lambda > -0.5 && lambda.is_finite()) {
                return bad(format!("Tukey-lambda shape must exceed -0.5 for finite variance, got {lambda}"));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> FrameMeta {
        let mut m = FrameMeta::new(self.iso, self.black_level, self.white_level);
        m.sensor_id = "sensorsim".into();
        m
    }

    /// Row-wise inter-channel correlation of the temporal noise.
    pub fn analytic_icc(&self) -> f64 {
        let (b, r) = (self.sigma_band.powi(2), self.sigma_read.powi(2));
        if b + r > 0.0 {
            b / (b + r)
        } else {
            0.0
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("sim config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("sim config TOML: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }
}

/// Quantities the simulator knows exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Zero-mean fixed pattern `S*` per channel (hot pixels excluded).
    pub fpn: PlanarImage,
    /// Expected per-channel frame mean: black level plus hot-pixel offset.
    pub channel_means: Vec<f64>,
    pub icc_offdiag: f64,
    pub gain: f64,
    pub hot_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSummary {
    pub channel_means: Vec<f64>,
    pub icc_offdiag: f64,
    pub gain: f64,
    pub fpn_std: Vec<f64>,
    pub hot_pixels: usize,
}

impl GroundTruth {
    pub fn summary(&self) -> GroundTruthSummary {
        GroundTruthSummary {
            channel_means: self.channel_means.clone(),
            icc_offdiag: self.icc_offdiag,
            gain: self.gain,
            fpn_std: (0..self.fpn.channels())
                .map(|c| {
                    let p = self.fpn.plane(c);
                    (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt()
                })
                .collect(),
            hot_pixels: self.hot_pixels,
        }
    }
}

/// Variance of the standard Tukey-lambda distribution.
pub fn tukey_lambda_variance(lambda: f64) -> f64 {
    // The closed form cancels catastrophically near 0; bridge linearly to the
    // logistic variance there.
    const NEAR_ZERO: f64 = 1e-2;
    if lambda.abs() < NEAR_ZERO {
        let edge = tukey_lambda_variance(NEAR_ZERO.copysign(lambda));
        let logistic = std::f64::consts::PI.powi(2) / 3.0;
        return logistic + (edge - logistic) * lambda.abs() / NEAR_ZERO;
    }
    let beta_term = (2.0 * ln_gamma(lambda + 1.0) - ln_gamma(2.0 * lambda + 2.0)).exp();
    2.0 / (lambda * lambda) * (1.0 / (1.0 + 2.0 * lambda) - beta_term)
}

/// Quantile function `(u^l - (1-u)^l) / l`, the logistic quantile at `l = 0`.
pub fn tukey_lambda_quantile(u: f64, lambda: f64) -> f64 {
    if lambda.abs() < 1e-12 {
        (u / (1.0 - u)).ln()
    } else {
        (u.powf(lambda) - (1.0 - u).powf(lambda)) / lambda
    }
}

/// Uniform draw strictly inside `(0, 1)`.
fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn read_sampler(cfg: &SimConfig) -> impl Fn(&mut crate::rng::StreamRng) -> f64 {
    let sigma = cfg.sigma_read;
    let family = cfg.read_noise;
    let scale = match family {
        ReadNoise::Gaussian => sigma,
        ReadNoise::TukeyLambda { lambda } => sigma / tukey_lambda_variance(lambda).sqrt(),
    };
    move |rng| match family {
        ReadNoise::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        }
        ReadNoise::TukeyLambda { lambda } => scale * tukey_lambda_quantile(open_unit(rng), lambda),
    }
}

/// Zero-mean fixed pattern with standard deviation `fpn_amplitude` per channel.
fn fixed_pattern(cfg: &SimConfig) -> Result<PlanarImage> {
    let (c_count, h, w) = (cfg.channels, cfg.height, cfg.width);
    if cfg.fpn_amplitude == 0.0 {
        return PlanarImage::zeros(c_count, h, w);
    }
    let mut white = PlanarImage::zeros(c_count, h, w)?;
    for c in 0..c_count {
        let mut rng = substream(cfg.seed, &[domain::SIM_FPN, c as u64]);
        for v in white.plane_mut(c) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    let mut smooth = gaussian_blur(&white, cfg.fpn_scale)?;
    for c in 0..c_count {
        let p = smooth.plane_mut(c);
        let m = mean(p);
        let sd = (p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
        let k = if sd > 0.0 { cfg.fpn_amplitude / sd } else { 0.0 };
        for v in p.iter_mut() {
            *v = (*v - m) * k;
        }
    }
    Ok(smooth)
}

/// Hot-pixel offsets: each pixel independently hot with `hot_pixel_rate`.
fn hot_pixels(cfg: &SimConfig) -> Result<(PlanarImage, usize)> {
    let mut hot = PlanarImage::zeros(cfg.channels, cfg.height, cfg.width)?;
    let mut count = 0;
    if cfg.hot_pixel_rate > 0.0 && cfg.hot_pixel_amplitude > 0.0 {
        for c in 0..cfg.channels {
            let mut rng = substream(cfg.seed, &[domain::SIM_HOT, c as u64]);
            for v in hot.plane_mut(c) {
                if rng.random::<f64>() < cfg.hot_pixel_rate {
                    *v = cfg.hot_pixel_amplitude;
                    count += 1;
                }
            }
        }
    }
    Ok((hot, count))
}

/// Dark frame for temporal-noise seed `seed`, with its metadata and the
/// simulator's ground truth.
pub fn generate_dark(cfg: &SimConfig, seed: u64) -> Result<(PlanarImage, FrameMeta, GroundTruth)> {
    cfg.validate()?;
    let (c_count, h, w) = (cfg.channels, cfg.height, cfg.width);
    let fpn = fixed_pattern(cfg)?;
    let (hot, hot_count) = hot_pixels(cfg)?;

    let band_len = match cfg.band_axis {
        BandAxis::Columns => w,
        BandAxis::Rows => h,
    };
    let mut band_rng = substream(seed, &[domain::SIM_BAND]);
    let band: Vec<f64> = (0..band_len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut band_rng);
            cfg.sigma_band * z
        })
        .collect();

    let read = read_sampler(cfg);
    let mut frame = PlanarImage::filled(c_count, h, w, cfg.black_level)?;
    for c in 0..c_count {
        let (f, hp) = (fpn.plane(c), hot.plane(c));
        frame
            .plane_mut(c)
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(r, row)| {
                let mut rng = substream(seed, &[domain::SIM_READ, c as u64, r as u64]);
                for (x, v) in row.iter_mut().enumerate() {
                    let b = match cfg.band_axis {
                        BandAxis::Columns => band[x],
                        BandAxis::Rows => band[r],
                    };
                    let i = r * w + x;
                    *v += f[i] + b + read(&mut rng) + hp[i];
                }
            });
    }

    let channel_means = (0..c_count).map(|c| cfg.black_level + mean(hot.plane(c))).collect();
    let truth = GroundTruth {
        fpn,
        channel_means,
        icc_offdiag: cfg.analytic_icc(),
        gain: cfg.g_true,
        hot_pixels: hot_count,
    };
    Ok((frame, cfg.meta(), truth))
}

/// A flat region of the synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatPatch {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub level: f64,
}

pub const PATCH_SIZE: usize = 64;
/// Width of the raised-cosine blend between a patch and the background.
pub const PATCH_BLEND: usize = 10;

/// Patch layout of the scene: one per `PATCH_SIZE + 2 PATCH_BLEND` grid
/// cell, at most eight, with distinct levels spread over
/// `[0.05, 0.75]` of the dynamic range.
pub fn scene_patches(cfg: &SimConfig, seed: u64) -> Vec<FlatPatch> {
    let cell = PATCH_SIZE + 2 * PATCH_BLEND;
    let (rows, cols) = (cfg.height / cell, cfg.width / cell);
    let n = (rows * cols).min(8);
    if n == 0 {
        return Vec::new();
    }
    let range = cfg.white_level - cfg.black_level;
    let mut levels: Vec<f64> = (0..n)
        .map(|i| range * (0.05 + 0.70 * i as f64 / (n.max(2) - 1) as f64))
        .collect();
    let mut rng = substream(seed, &[domain::SIM_SCENE, 1]);
    for i in (1..levels.len()).rev() {
        levels.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|i| FlatPatch {
            top: (i / cols) * cell + PATCH_BLEND,
            left: (i % cols) * cell + PATCH_BLEND,
            size: PATCH_SIZE,
            level: levels[i],
        })
        .collect()
}

/// Clean radiance in black-subtracted DN: a smooth background spanning
/// `[0, 0.8 (white - black)]` with flat patches blended in.
pub fn generate_scene(cfg: &SimConfig, seed: u64) -> Result<PlanarImage> {
    cfg.validate()?;
    let (c_count, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut rng = substream(seed, &[domain::SIM_SCENE, 0]);
    // At most about one cycle across the frame keeps curvature far below
    // the shot noise, so the background itself is usable for gain fits.
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let fy = rng.random_range(0.25..1.0) / h as f64;
            let fx = rng.random_range(0.25..1.0) / w as f64;
            (fy, fx, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut bg: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let ramp = 0.5 * (x / w as f64 + y / h as f64);
            let wave: f64 = waves
                .iter()
                .map(|&(fy, fx, ph)| (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                .sum();
            ramp + 0.15 * wave
        })
        .collect();
    let (lo, hi) = bg
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let top = 0.8 * (cfg.white_level - cfg.black_level);
    for v in bg.iter_mut() {
        *v = if hi > lo { (*v - lo) / (hi - lo) * top } else { 0.0 };
    }
    for p in scene_patches(cfg, seed) {
        let b = PATCH_BLEND as f64;
        let (y0, x0) = (p.top - PATCH_BLEND, p.left - PATCH_BLEND);
        for y in y0..p.top + p.size + PATCH_BLEND {
            for x in x0..p.left + p.size + PATCH_BLEND {
                // Distance outside the flat core, 0 inside.
                let dy = (p.top as f64 - y as f64).max(y as f64 - (p.top + p.size - 1) as f64).max(0.0);
                let dx = (p.left as f64 - x as f64).max(x as f64 - (p.left + p.size - 1) as f64).max(0.0);
                let d = (dy.max(dx) / (b + 1.0)).min(1.0);
                let t = 0.5 * (1.0 + (std::f64::consts::PI * d).cos());
                let i = y * w + x;
                bg[i] = t * p.level + (1.0 - t) * bg[i];
            }
        }
    }
    PlanarImage::from_fn(c_count, h, w, |_, y, x| bg[y * w + x])
}

/// Clean scene and its noisy capture: `g Poisson(clean / g)` plus a dark
/// frame with the black level removed, both in black-subtracted DN.
pub fn generate_noisy_pair(cfg: &SimConfig, seed: u64) -> Result<(PlanarImage, PlanarImage)> {
    let clean = generate_scene(cfg, cfg.seed)?;
    let (dark, _, _) = generate_dark(cfg, seed)?;
    let photon_seed = substream(seed, &[domain::SIM_PHOTON]).next_u64();
    let shot = sample_poisson_signal(&clean, cfg.g_true, 1.0, photon_seed)?;
    let black = cfg.black_level;
    let noisy = shot.zip_map(&dark, |s, d| s + d - black)?;
    Ok((clean, noisy))
}
