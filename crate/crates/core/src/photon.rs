//! Signal-dependent (shot) noise: system-gain estimation and Poisson sampling.
//!
//! With `y = g P(x) + n_other`, the variance of an observation grows linearly
//! with its mean level in DN: `Var(y) = g * level + Var(n_other)`. Gain is the
//! slope of a weighted line through (level, variance) groups.
//!
//! All images handled here are in black-level-subtracted DN.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::darksynth::{gaussian_blur, gaussian_kernel};
use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::tensor::{FrameMeta, PlanarImage};

/// Default pseudo-clean blur for single-image estimation, in pixels.
pub const DEFAULT_PSEUDO_SIGMA: f64 = 3.0;
/// Groups with fewer observations are dropped before fitting.
pub const MIN_GROUP_WEIGHT: usize = 100;
/// Fraction of the dynamic range below saturation treated as clipped.
pub const CLIP_MARGIN: f64 = 0.02;
/// Largest accepted blur bias of a patch, in units of the local noise std.
pub const FLATNESS_TOLERANCE: f64 = 0.1;
/// Number of level bins across the dynamic range by default.
pub const DEFAULT_LEVEL_BINS: f64 = 256.0;
/// Poisson means at or above this use the normal approximation.
pub const POISSON_NORMAL_THRESHOLD: f64 = 30.0;

/// Default level-bin width: the dynamic range split into 256 bins.
pub fn default_bin_width(meta: &FrameMeta) -> f64 {
    meta.dynamic_range() / DEFAULT_LEVEL_BINS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSample {
    /// Mean level of the group in DN.
    pub level: f64,
    /// Unbiased variance of the group's deviations, DN^2.
    pub variance: f64,
    /// Observation count.
    pub weight: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceSamples(pub Vec<VarianceSample>);

impl VarianceSamples {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VarianceSample> {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainModel {
    pub iso: u32,
    /// DN per electron.
    pub gain: f64,
    /// Signal-independent variance, DN^2, clamped at zero.
    pub var_intercept: f64,
    pub fit_points: usize,
    pub fit_r2: f64,
}

impl GainModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gain model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: GainModel =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("gain model JSON: {e}")))?;
        if !(model.gain > 0.0) {
            return Err(Error::InvalidInput(format!("gain must be positive, got {}", model.gain)));
        }
        Ok(model)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct GroupAcc {
    n: usize,
    level_sum: f64,
    dev_sum: f64,
    dev_sq_sum: f64,
}

impl GroupAcc {
    fn push(&mut self, level: f64, dev: f64) {
        self.n += 1;
        self.level_sum += level;
        self.dev_sum += dev;
        self.dev_sq_sum += dev * dev;
    }

    fn finish(&self) -> Option<VarianceSample> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let var = ((self.dev_sq_sum - self.dev_sum * self.dev_sum / n) / (n - 1.0)).max(0.0);
        Some(VarianceSample {
            level: self.level_sum / n,
            variance: var,
            weight: self.n,
        })
    }
}

fn finish_groups(groups: BTreeMap<i64, GroupAcc>) -> Result<VarianceSamples> {
    let total = groups.len();
    let samples: Vec<VarianceSample> = groups
        .values()
        .filter(|g| g.n >= MIN_GROUP_WEIGHT)
        .filter_map(GroupAcc::finish)
        .collect();
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} level groups with at least {MIN_GROUP_WEIGHT} observations ({total} groups before filtering), need 2",
            samples.len()
        )));
    }
    Ok(VarianceSamples(samples))
}

fn check_bin_width(bin_width: f64) -> Result<()> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidInput(format!("bin width must be positive, got {bin_width}")));
    }
    Ok(())
}

fn clip_threshold(meta: &FrameMeta) -> f64 {
    meta.dynamic_range() * (1.0 - CLIP_MARGIN)
}

/// Variance groups from a single noisy image.
///
/// A Gaussian blur with `pseudo_sigma` gives a pseudo-clean image. Every
/// overlapping 3x3 patch contributes the deviations of its nine pixels from
/// their pseudo-clean values, grouped by the pseudo-clean value at the patch
/// centre in bins of `bin_width`. Patches touching near-saturated pixels, or
/// close enough to the border for the mirrored blur to bend, are skipped.
///
/// Patches on curved or edged structure are skipped as well: there the blur
/// leaves a bias of about `(sigma^2 / 2) * laplacian`. The Laplacian is taken
/// on a second, twice as wide blur (much less noisy than the pseudo-clean
/// image) and maximized over a `2 sigma` neighbourhood, since it crosses zero
/// right on an edge. A patch is kept only if that bias stays below
/// [`FLATNESS_TOLERANCE`] times a robust noise scale of the channel.
///
/// The blur keeps a small share of each pixel's own noise; group variances
/// are divided by the resulting factor `1 - 2 k0 + sum(k^2)`.
pub fn collect_variance_single(
    noisy: &PlanarImage,
    meta: &FrameMeta,
    pseudo_sigma: f64,
    bin_width: f64,
) -> Result<VarianceSamples> {
    check_bin_width(bin_width)?;
    let (h, w) = (noisy.height(), noisy.width());
    let pseudo = gaussian_blur(noisy, pseudo_sigma)?;
    let coarse = gaussian_blur(noisy, 2.0 * pseudo_sigma)?;
    let taps = gaussian_kernel(pseudo_sigma);
    let reach = (2.0 * pseudo_sigma).ceil() as usize;
    // The coarse blur reaches twice as far as the pseudo-clean one.
    let margin = 2 * taps.len() + reach;
    if h < 2 * margin + 1 || w < 2 * margin + 1 {
        return Err(Error::InsufficientData(format!(
            "{h}x{w} image has no 3x3 patches clear of the {margin}-pixel border"
        )));
    }
    let clip = clip_threshold(meta);
    let bias_scale = 0.5 * pseudo_sigma * pseudo_sigma;
    let mut groups: BTreeMap<i64, GroupAcc> = BTreeMap::new();
    for c in 0..noisy.channels() {
        let y = noisy.plane(c);
        let p = pseudo.plane(c);
        let curvature = max_filter(&abs_laplacian(coarse.plane(c), h, w), h, w, reach);
        let allowed = FLATNESS_TOLERANCE * robust_noise_std(y, p, h, w, margin);
        for r in margin..h - margin {
            for col in margin..w - margin {
                let rows = [(r - 1) * w, r * w, (r + 1) * w];
                let clipped = rows
                    .iter()
                    .any(|&base| y[base + col - 1..=base + col + 1].iter().any(|&v| v >= clip));
                if clipped {
                    continue;
                }
                let i = r * w + col;
                let centre = p[i];
                if bias_scale * curvature[i] > allowed + 1e-9 * (centre.abs() + 1.0) {
                    continue;
                }
                let acc = groups.entry((centre / bin_width).floor() as i64).or_default();
                for &base in &rows {
                    for i in base + col - 1..=base + col + 1 {
                        acc.push(centre, y[i] - p[i]);
                    }
                }
            }
        }
    }
    let factor = blur_noise_factor(&taps);
    let mut samples = finish_groups(groups)?;
    for s in &mut samples.0 {
        s.variance /= factor;
    }
    Ok(samples)
}

/// `|5-point Laplacian|`, zero on the outermost ring.
fn abs_laplacian(q: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 1..h.saturating_sub(1) {
        for col in 1..w - 1 {
            let i = r * w + col;
            out[i] = (q[i - 1] + q[i + 1] + q[i - w] + q[i + w] - 4.0 * q[i]).abs();
        }
    }
    out
}

/// Separable maximum over a `(2 radius + 1)^2` window, clamped at the border.
fn max_filter(v: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        let line = &v[r * w..(r + 1) * w];
        for col in 0..w {
            let (a, b) = (col.saturating_sub(radius), (col + radius + 1).min(w));
            rows[r * w + col] = line[a..b].iter().fold(0.0, |m: f64, &x| m.max(x));
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let (a, b) = (r.saturating_sub(radius), (r + radius + 1).min(h));
        for col in 0..w {
            out[r * w + col] = (a..b).fold(0.0, |m: f64, k| m.max(rows[k * w + col]));
        }
    }
    out
}

/// Robust per-channel noise scale: the median absolute difference of
/// horizontally neighbouring residuals `y - p`, scaled to a Gaussian std.
/// Structure covering less than half the frame does not move it.
fn robust_noise_std(y: &[f64], p: &[f64], h: usize, w: usize, margin: usize) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity((h - 2 * margin) * (w - 2 * margin));
    for r in margin..h - margin {
        for col in margin..w - margin {
            let i = r * w + col;
            d.push(((y[i + 1] - p[i + 1]) - (y[i] - p[i])).abs());
        }
    }
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *median / (0.674_489_75 * std::f64::consts::SQRT_2)
}

/// `Var(x - blur(x)) / Var(x)` for white `x`, away from the border.
fn blur_noise_factor(taps: &[f64]) -> f64 {
    let centre = taps[0];
    let sq_1d = taps[0] * taps[0] + 2.0 * taps[1..].iter().map(|k| k * k).sum::<f64>();
    1.0 - 2.0 * centre * centre + sq_1d * sq_1d
}

/// Variance groups from clean/noisy pairs, bucketed by clean level.
pub fn collect_variance_pairs(
    pairs: &[(PlanarImage, PlanarImage)],
    meta: &FrameMeta,
    bin_width: f64,
) -> Result<VarianceSamples> {
    check_bin_width(bin_width)?;
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no clean/noisy pairs".into()));
    }
    let clip = clip_threshold(meta);
    let mut groups: BTreeMap<i64, GroupAcc> = BTreeMap::new();
    for (clean, noisy) in pairs {
        clean.ensure_same_shape(noisy, "clean/noisy pair")?;
        for (&x, &y) in clean.data().iter().zip(noisy.data()) {
            if x >= clip || y >= clip {
                continue;
            }
            groups
                .entry((x / bin_width).floor() as i64)
                .or_default()
                .push(x, y - x);
        }
    }
    finish_groups(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// Least squares weighted by group size.
    #[default]
    WeightedLeastSquares,
    /// Median of pairwise slopes.
    TheilSen,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits `variance = gain * level + intercept` with the default method.
pub fn fit_gain(samples: &VarianceSamples, iso: u32) -> Result<GainModel> {
    fit_gain_with(samples, iso, FitMethod::WeightedLeastSquares)
}

pub fn fit_gain_with(samples: &VarianceSamples, iso: u32, method: FitMethod) -> Result<GainModel> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!("{} variance samples, need 2", samples.len())));
    }
    let pts = &samples.0;
    let wsum: f64 = pts.iter().map(|s| s.weight as f64).sum();
    if !(wsum > 0.0) {
        return Err(Error::DegenerateFit("all sample weights are zero".into()));
    }
    let xbar = pts.iter().map(|s| s.weight as f64 * s.level).sum::<f64>() / wsum;
    let ybar = pts.iter().map(|s| s.weight as f64 * s.variance).sum::<f64>() / wsum;
    let sxx: f64 = pts.iter().map(|s| s.weight as f64 * (s.level - xbar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateFit("all groups share one level".into()));
    }

    let (slope, intercept) = match method {
        FitMethod::WeightedLeastSquares => {
            let sxy: f64 = pts
                .iter()
                .map(|s| s.weight as f64 * (s.level - xbar) * (s.variance - ybar))
                .sum();
            let slope = sxy / sxx;
            (slope, ybar - slope * xbar)
        }
        FitMethod::TheilSen => {
            let mut slopes = Vec::new();
            for (i, a) in pts.iter().enumerate() {
                for b in &pts[i + 1..] {
                    if b.level != a.level {
                        slopes.push((b.variance - a.variance) / (b.level - a.level));
                    }
                }
            }
            let slope = median(&mut slopes);
            let mut offsets: Vec<f64> = pts.iter().map(|s| s.variance - slope * s.level).collect();
            (slope, median(&mut offsets))
        }
    };
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(Error::DegenerateFit(format!(
            "non-positive slope {slope:.4e}; check the black level or for saturated input"
        )));
    }

    let ss_tot: f64 = pts.iter().map(|s| s.weight as f64 * (s.variance - ybar).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|s| s.weight as f64 * (s.variance - slope * s.level - intercept).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(GainModel {
        iso,
        gain: slope,
        var_intercept: intercept.max(0.0),
        fit_points: pts.len(),
        fit_r2: r2,
    })
}

/// Poisson draw: sequential inversion below [`POISSON_NORMAL_THRESHOLD`],
/// continuity-corrected normal approximation above.
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < POISSON_NORMAL_THRESHOLD {
        let u: f64 = rng.random();
        let mut k = 0u32;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p < f64::MIN_POSITIVE && k as f64 > mean {
                break;
            }
        }
        k as f64
    } else {
        let z: f64 = StandardNormal.sample(rng);
        (mean + mean.sqrt() * z + 0.5).floor().max(0.0)
    }
}

/// Shot-noise realization of a clean image: `g * Poisson(clean / (g * ratio))`.
///
/// `ratio` is the exposure ratio; the output is at the short-exposure level.
/// Each image row draws from its own substream.
pub fn sample_poisson_signal(clean: &PlanarImage, gain: f64, ratio: f64, seed: u64) -> Result<PlanarImage> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidInput(format!("gain must be positive, got {gain}")));
    }
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::InvalidInput(format!("exposure ratio must be >= 1, got {ratio}")));
    }
    if let Some(v) = clean.data().iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "clean signal must be non-negative (black-level subtracted), found {v}"
        )));
    }
    let w = clean.width();
    let scale = gain * ratio;
    let mut out = clean.clone();
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(row, values)| {
            let mut rng = substream(seed, &[domain::POISSON, row as u64]);
            for v in values.iter_mut() {
                *v = gain * sample_poisson(*v / scale, &mut rng);
            }
        });
    Ok(out)
}

/// Noisy image from a clean one: shot noise plus a (synthetic) dark frame
/// with its black level removed, optionally rounded and clipped to the
/// sensor's code range.
pub fn synthesize_noisy(
    clean: &PlanarImage,
    gain: &GainModel,
    synthetic_dark: &PlanarImage,
    meta: &FrameMeta,
    ratio: f64,
    quantize: bool,
    seed: u64,
) -> Result<PlanarImage> {
    clean.ensure_same_shape(synthetic_dark, "clean vs dark frame")?;
    let shot = sample_poisson_signal(clean, gain.gain, ratio, seed)?;
    let black = meta.black_level;
    let (lo, hi) = (-black, meta.white_level - black);
    shot.zip_map(synthetic_dark, |s, d| {
        let y = s + (d - black);
        if quantize {
            y.round().clamp(lo, hi)
        } else {
            y
        }
    })
}
