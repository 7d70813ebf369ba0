//! Realism metrics for synthetic noise: marginal histograms and KLD,
//! row-wise inter-channel correlation, moments and spectral distance.

use serde::{Deserialize, Serialize};

use crate::darksynth::{remove_fixed_pattern, DarkSynthesizer};
use crate::error::{Error, Result};
use crate::spectral::{Complex64, Fft2d};
use crate::tensor::{mean, PlanarImage};

/// Probability floor added to every bin before renormalization.
pub const HISTOGRAM_EPSILON: f64 = 1e-10;
pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Uniform histogram of the finite `values` over `range` with `bins` bins.
/// Samples outside the range land in the first or last bin.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidInput(format!("histogram range [{lo}, {hi}] is empty")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values.iter().filter(|v| v.is_finite()) {
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    let n = counts.iter().sum::<u64>().max(1) as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64 / n + HISTOGRAM_EPSILON).collect();
    let z: f64 = raw.iter().sum();
    let probabilities = raw.into_iter().map(|p| p / z).collect();
    Ok(Histogram {
        edges,
        counts,
        probabilities,
    })
}

/// `KL(p || q)` over the smoothed probabilities.
pub fn kld(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::InvalidInput("KLD needs histograms with identical binning".into()));
    }
    let d: f64 = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum();
    Ok(d.max(0.0))
}

/// Reference range used for residual histograms: `[min, max]` of the values,
/// widened by half a unit when they are all equal.
pub fn value_range(values: &[f64]) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (-0.5, 0.5);
    }
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Per-channel KLD of `candidate` against `reference`, binned over each
/// reference channel's value range.
pub fn channel_kld(reference: &PlanarImage, candidate: &PlanarImage, bins: usize) -> Result<Vec<f64>> {
    reference.ensure_same_shape(candidate, "KLD")?;
    (0..reference.channels())
        .map(|c| {
            let range = value_range(reference.plane(c));
            let p = histogram(reference.plane(c), bins, range)?;
            let q = histogram(candidate.plane(c), bins, range)?;
            kld(&p, &q)
        })
        .collect()
}

/// Symmetric `C x C` correlation matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    /// Image rows that entered the average.
    pub rows_used: usize,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.size;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.size).map(<[f64]>::to_vec).collect()
    }
}

/// Pearson correlation between channels computed on each image row and
/// averaged over rows. Rows where any channel is constant are skipped.
pub fn icc_matrix(img: &PlanarImage) -> Result<CorrelationMatrix> {
    let (c_count, h, w) = img.shape();
    if c_count < 2 {
        return Err(Error::InvalidInput("correlation needs at least 2 channels".into()));
    }
    let mut acc = vec![0.0; c_count * c_count];
    let mut used = 0usize;
    let mut centred = vec![vec![0.0; w]; c_count];
    let mut norms = vec![0.0; c_count];
    for r in 0..h {
        for c in 0..c_count {
            let row = &img.plane(c)[r * w..(r + 1) * w];
            let m = mean(row);
            for (d, &v) in centred[c].iter_mut().zip(row) {
                *d = v - m;
            }
            norms[c] = centred[c].iter().map(|d| d * d).sum::<f64>().sqrt();
        }
        if norms.contains(&0.0) {
            continue;
        }
        used += 1;
        for i in 0..c_count {
            for j in i + 1..c_count {
                let sxy: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                acc[i * c_count + j] += (sxy / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            }
        }
    }
    if used == 0 {
        return Err(Error::DegenerateInput(
            "every row has a constant channel; correlation undefined".into(),
        ));
    }
    let mut values = vec![0.0; c_count * c_count];
    for i in 0..c_count {
        values[i * c_count + i] = 1.0;
        for j in i + 1..c_count {
            let r = acc[i * c_count + j] / used as f64;
            values[i * c_count + j] = r;
            values[j * c_count + i] = r;
        }
    }
    Ok(CorrelationMatrix {
        size: c_count,
        values,
        rows_used: used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    /// Unbiased (n - 1) variance.
    pub variance: f64,
    pub skewness: f64,
    /// Non-excess: 3 for a Gaussian.
    pub kurtosis: f64,
}

/// Moments of a sample. Skewness and kurtosis are 0 for constant input.
pub fn sample_moments(values: &[f64]) -> Moments {
    let n = values.len();
    if n == 0 {
        return Moments {
            mean: 0.0,
            variance: 0.0,
            skewness: 0.0,
            kurtosis: 0.0,
        };
    }
    let mu = mean(values);
    let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mu;
        let d2 = d * d;
        s2 += d2;
        s3 += d2 * d;
        s4 += d2 * d2;
    }
    let nf = n as f64;
    let m2 = s2 / nf;
    let variance = if n > 1 { s2 / (nf - 1.0) } else { 0.0 };
    let (skewness, kurtosis) = if m2 > 0.0 {
        (s3 / nf / m2.powf(1.5), s4 / nf / (m2 * m2))
    } else {
        (0.0, 0.0)
    };
    Moments {
        mean: mu,
        variance,
        skewness,
        kurtosis,
    }
}

pub fn moments(img: &PlanarImage) -> Vec<Moments> {
    (0..img.channels()).map(|c| sample_moments(img.plane(c))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDistance {
    /// L2 distance between unit-norm magnitude spectra, per channel.
    pub per_channel: Vec<f64>,
    /// Root mean square of `per_channel`.
    pub overall: f64,
    /// Radially averaged power spectra, indexed `[channel][radius]`.
    pub psd_reference: Vec<Vec<f64>>,
    pub psd_candidate: Vec<Vec<f64>>,
}

/// Signed frequency of DFT index `k` out of `n`.
fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Annulus index of every bin (natural layout) and the annulus count.
fn annuli(h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut idx = Vec::with_capacity(h * w);
    let mut max = 0;
    for u in 0..h {
        let fu = signed_freq(u, h);
        for v in 0..w {
            let fv = signed_freq(v, w);
            let r = (fu * fu + fv * fv).sqrt().round() as usize;
            max = max.max(r);
            idx.push(r);
        }
    }
    (idx, max + 1)
}

/// Power `|X|^2 / (HW)` averaged over integer-radius annuli around DC.
pub fn radial_psd(spectrum: &[Complex64], h: usize, w: usize) -> Vec<f64> {
    let (idx, n) = annuli(h, w);
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    let scale = 1.0 / (h * w) as f64;
    for (z, &r) in spectrum.iter().zip(&idx) {
        sum[r] += z.norm_sqr() * scale;
        count[r] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect()
}

fn unit_magnitude(spectrum: &[Complex64]) -> Vec<f64> {
    let mag: Vec<f64> = spectrum.iter().map(|z| z.norm()).collect();
    let norm = mag.iter().map(|m| m * m).sum::<f64>().sqrt();
    if norm > 0.0 {
        mag.into_iter().map(|m| m / norm).collect()
    } else {
        mag
    }
}

pub fn spectral_distance(reference: &PlanarImage, candidate: &PlanarImage) -> Result<SpectralDistance> {
    reference.ensure_same_shape(candidate, "spectral distance")?;
    let (c_count, h, w) = reference.shape();
    let fft = Fft2d::new(h, w);
    let mut per_channel = Vec::with_capacity(c_count);
    let mut psd_reference = Vec::with_capacity(c_count);
    let mut psd_candidate = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let a = fft.forward_real(reference.plane(c));
        let b = fft.forward_real(candidate.plane(c));
        let d = unit_magnitude(&a)
            .iter()
            .zip(unit_magnitude(&b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        per_channel.push(d);
        psd_reference.push(radial_psd(&a, h, w));
        psd_candidate.push(radial_psd(&b, h, w));
    }
    let overall = (per_channel.iter().map(|d| d * d).sum::<f64>() / c_count as f64).sqrt();
    Ok(SpectralDistance {
        per_channel,
        overall,
        psd_reference,
        psd_candidate,
    })
}

/// Candidate-versus-reference comparison of two noise residuals.
///
/// Deltas are `candidate - reference`. Correlation fields are `null` when
/// there is a single channel or no usable row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub sigma: Option<f64>,
    pub bins: usize,
    pub channel_labels: Vec<String>,
    pub kld: Vec<f64>,
    pub reference_moments: Vec<Moments>,
    pub candidate_moments: Vec<Moments>,
    pub mean_delta: Vec<f64>,
    pub variance_delta: Vec<f64>,
    pub skewness_delta: Vec<f64>,
    pub kurtosis_delta: Vec<f64>,
    pub icc_reference: Option<Vec<Vec<f64>>>,
    pub icc_candidate: Option<Vec<Vec<f64>>>,
    pub icc_offdiag_delta: Option<f64>,
    pub spectral_l2: Vec<f64>,
    pub spectral_l2_overall: f64,
    pub psd_reference: Vec<Vec<f64>>,
    pub psd_candidate: Vec<Vec<f64>>,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn max_kld(&self) -> f64 {
        self.kld.iter().fold(0.0, |a, &b| a.max(b))
    }
}

fn optional_icc(img: &PlanarImage) -> Option<CorrelationMatrix> {
    if img.channels() < 2 {
        return None;
    }
    icc_matrix(img).ok()
}

/// Compares two residual images directly, without fixed-pattern removal.
pub fn compare_residuals(reference: &PlanarImage, candidate: &PlanarImage, bins: usize) -> Result<ValidationReport> {
    reference.ensure_same_shape(candidate, "validation")?;
    let kld = channel_kld(reference, candidate, bins)?;
    let rm = moments(reference);
    let cm = moments(candidate);
    let delta = |f: fn(&Moments) -> f64| rm.iter().zip(&cm).map(|(r, c)| f(c) - f(r)).collect::<Vec<f64>>();
    let icc_r = optional_icc(reference);
    let icc_c = optional_icc(candidate);
    let icc_offdiag_delta = match (&icc_r, &icc_c) {
        (Some(r), Some(c)) => Some(c.off_diagonal_mean() - r.off_diagonal_mean()),
        _ => None,
    };
    let spectral = spectral_distance(reference, candidate)?;
    Ok(ValidationReport {
        sigma: None,
        bins,
        channel_labels: reference.labels().to_vec(),
        kld,
        mean_delta: delta(|m| m.mean),
        variance_delta: delta(|m| m.variance),
        skewness_delta: delta(|m| m.skewness),
        kurtosis_delta: delta(|m| m.kurtosis),
        reference_moments: rm,
        candidate_moments: cm,
        icc_reference: icc_r.map(|m| m.to_rows()),
        icc_candidate: icc_c.map(|m| m.to_rows()),
        icc_offdiag_delta,
        spectral_l2: spectral.per_channel,
        spectral_l2_overall: spectral.overall,
        psd_reference: spectral.psd_reference,
        psd_candidate: spectral.psd_candidate,
    })
}

/// Removes the fixed pattern from both dark frames at `sigma` and compares
/// the residuals.
pub fn validate_report(reference: &PlanarImage, candidate: &PlanarImage, sigma: f64) -> Result<ValidationReport> {
    validate_report_with_bins(reference, candidate, sigma, DEFAULT_BINS)
}

pub fn validate_report_with_bins(
    reference: &PlanarImage,
    candidate: &PlanarImage,
    sigma: f64,
    bins: usize,
) -> Result<ValidationReport> {
    reference.ensure_same_shape(candidate, "validation")?;
    let r = remove_fixed_pattern(reference, sigma)?.residual;
    let c = remove_fixed_pattern(candidate, sigma)?.residual;
    let mut report = compare_residuals(&r, &c, bins)?;
    report.sigma = Some(sigma);
    Ok(report)
}

/// Per-channel KLD of draw `index` against the reference residual after each
/// of the ascending iteration counts in `ks`; `result[i][c]` is for `ks[i]`.
pub fn kld_versus_iterations(
    synth: &DarkSynthesizer,
    index: u64,
    ks: &[usize],
    bins: usize,
) -> Result<Vec<Vec<f64>>> {
    let reference = &synth.decomposition().residual;
    synth
        .noise_checkpoints(index, ks)?
        .iter()
        .map(|n| channel_kld(reference, n, bins))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darksynth::SynthesisConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_image(c: usize, h: usize, w: usize, seed: u64) -> PlanarImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PlanarImage::from_fn(c, h, w, |_, _, _| StandardNormal.sample(&mut rng)).unwrap()
    }

    #[test]
    fn two_samples_two_bins() {
        let h = histogram(&[0.0, 1.0], 2, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn identical_samples_fill_one_bin() {
        let h = histogram(&[0.3; 50], 8, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 50);
    }

    #[test]
    fn out_of_range_goes_to_edge_bins_and_nan_is_dropped() {
        let h = histogram(&[-5.0, 0.1, 9.0, f64::NAN], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.counts, vec![2, 0, 0, 1]);
    }

    #[test]
    fn histogram_rejects_bad_arguments() {
        assert!(histogram(&[1.0], 1, (0.0, 1.0)).is_err());
        assert!(histogram(&[1.0], 4, (1.0, 1.0)).is_err());
    }

    #[test]
    fn uniform_samples_within_multinomial_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let h = histogram(&v, 16, (0.0, 1.0)).unwrap();
        let p = 1.0 / 16.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        for &q in &h.probabilities {
            assert!((q - p).abs() < 4.0 * sd, "{q}");
        }
    }

    #[test]
    fn kld_closed_form() {
        let p = histogram(&[0.25, 0.75], 2, (0.0, 1.0)).unwrap();
        let q_values: Vec<f64> = std::iter::repeat_n(0.25, 9).chain([0.75]).collect();
        let q = histogram(&q_values, 2, (0.0, 1.0)).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kld(&p, &q).unwrap() - expected).abs() < 1e-8);
        assert!(kld(&p, &p).unwrap() <= 1e-12);
    }

    #[test]
    fn kld_rejects_different_binning() {
        let p = histogram(&[0.5], 2, (0.0, 1.0)).unwrap();
        let q = histogram(&[0.5], 3, (0.0, 1.0)).unwrap();
        assert!(kld(&p, &q).is_err());
    }

    #[test]
    fn kld_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let bins = rng.random_range(2..20);
            let n = rng.random_range(1..60);
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(2)).collect();
            let d = kld(&histogram(&a, bins, (0.0, 1.0)).unwrap(), &histogram(&b, bins, (0.0, 1.0)).unwrap()).unwrap();
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn identical_channels_fully_correlated() {
        let base = normal_image(1, 16, 64, 1);
        let img = PlanarImage::from_fn(2, 16, 64, |_, h, w| base.get(0, h, w)).unwrap();
        let m = icc_matrix(&img).unwrap();
        assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(m.get(1, 1), 1.0);
    }

    #[test]
    fn independent_channels_near_zero() {
        let img = normal_image(4, 256, 512, 2);
        let m = icc_matrix(&img).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
                if i != j {
                    assert!(m.get(i, j).abs() < 0.05);
                }
            }
        }
        assert_eq!(m.rows_used, 256);
    }

    #[test]
    fn degenerate_rows_skipped() {
        let noise = normal_image(2, 4, 32, 3);
        let img = PlanarImage::from_fn(2, 4, 32, |c, h, w| if h == 0 { 1.0 } else { noise.get(c, h, w) }).unwrap();
        assert_eq!(icc_matrix(&img).unwrap().rows_used, 3);
        let flat = PlanarImage::filled(2, 4, 32, 1.0).unwrap();
        assert!(matches!(icc_matrix(&flat), Err(Error::DegenerateInput(_))));
        assert!(icc_matrix(&PlanarImage::zeros(1, 4, 4).unwrap()).is_err());
    }

    #[test]
    fn moment_conventions() {
        let m = sample_moments(&[2.5; 10]);
        assert_eq!((m.mean, m.variance, m.skewness, m.kurtosis), (2.5, 0.0, 0.0, 0.0));
        let m = sample_moments(&[-1.0, 1.0]);
        assert_eq!((m.mean, m.variance, m.skewness), (0.0, 2.0, 0.0));
    }

    #[test]
    fn gaussian_kurtosis_is_three() {
        let img = normal_image(1, 1000, 1000, 5);
        let m = moments(&img)[0];
        assert!((m.kurtosis - 3.0).abs() < 0.05, "{}", m.kurtosis);
        assert!(m.skewness.abs() < 0.01);
    }

    #[test]
    fn spectral_distance_identity_and_phase_draw() {
        let img = normal_image(2, 32, 48, 6);
        assert_eq!(spectral_distance(&img, &img).unwrap().overall, 0.0);
        let cfg = SynthesisConfig {
            sigma: 10.0,
            histogram_matching: false,
            ..Default::default()
        };
        let synth = DarkSynthesizer::new(&img, cfg).unwrap();
        let d = spectral_distance(&synth.decomposition().residual, &synth.synthesize(3).unwrap().noise).unwrap();
        assert!(d.overall < 1e-9, "{}", d.overall);
    }

    #[test]
    fn row_banding_concentrates_psd_at_low_radius() {
        let white = normal_image(1, 256, 256, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let band: Vec<f64> = (0..256).map(|_| StandardNormal.sample(&mut rng)).collect();
        let banded = PlanarImage::from_fn(1, 256, 256, |_, h, _| band[h]).unwrap();
        let d = spectral_distance(&white, &banded).unwrap();
        let (pw, pb) = (&d.psd_reference[0], &d.psd_candidate[0]);
        // Each low annulus holds only a couple of band coefficients, so
        // compare the low-radius band as a whole.
        let (sb, sw): (f64, f64) = (pb[1..=8].iter().sum(), pw[1..=8].iter().sum());
        assert!(sb > 10.0 * sw, "{sb} vs {sw}");
        // All banded energy sits on the zero horizontal-frequency axis.
        let spec = Fft2d::new(256, 256).forward_real(banded.plane(0));
        let off_axis: f64 = (0..256 * 256).filter(|i| i % 256 != 0).map(|i| spec[i].norm_sqr()).sum();
        assert!(off_axis < 1e-12 * spec.iter().map(|z| z.norm_sqr()).sum::<f64>());
    }

    #[test]
    fn radial_psd_of_white_noise_is_flat() {
        let img = normal_image(1, 128, 128, 9);
        let psd = radial_psd(&Fft2d::new(128, 128).forward_real(img.plane(0)), 128, 128);
        let mid = &psd[10..60];
        let avg = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!((avg - 1.0).abs() < 0.05, "{avg}");
    }

    #[test]
    fn self_validation_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = PlanarImage::from_fn(4, 64, 64, |c, h, _| 100.0 + c as f64 + h as f64 * 0.1 + rng.random::<f64>()).unwrap();
        let r = validate_report(&img, &img, 20.0).unwrap();
        assert!(r.kld.iter().all(|&k| k <= 1e-12));
        for d in [&r.mean_delta, &r.variance_delta, &r.skewness_delta, &r.kurtosis_delta, &r.spectral_l2] {
            assert!(d.iter().all(|&v| v == 0.0));
        }
        assert_eq!(r.icc_offdiag_delta, Some(0.0));
        let json = r.to_json();
        let keys = ["\"sigma\"", "\"bins\"", "\"kld\"", "\"icc_offdiag_delta\"", "\"psd_candidate\""];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_channel_report_marks_icc_missing() {
        let img = normal_image(1, 32, 32, 11);
        let r = compare_residuals(&img, &img, 32).unwrap();
        assert!(r.icc_reference.is_none() && r.icc_offdiag_delta.is_none());
        assert!(r.to_json().contains("\"icc_offdiag_delta\": null"));
    }

    #[test]
    fn kld_study_returns_one_row_per_k() {
        let img = normal_image(2, 32, 32, 12);
        let synth = DarkSynthesizer::new(&img, SynthesisConfig { sigma: 8.0, ..Default::default() }).unwrap();
        let rows = kld_versus_iterations(&synth, 0, &[0, 1, 5], 64).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.len() == 2));
        // Histogram matching ends on the spectral step, so KLD is small but not zero.
        assert!(rows[2].iter().all(|&k| k < 0.5));
    }

    proptest! {
        #[test]
        fn histogram_counts_every_finite_sample(v in proptest::collection::vec(-10.0f64..10.0, 0..200), bins in 2usize..40) {
            let h = histogram(&v, bins, (-3.0, 3.0)).unwrap();
            prop_assert_eq!(h.total() as usize, v.len());
            prop_assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn icc_invariant_under_offset_and_positive_scale(seed in 0u64..1000, a in 0.1f64..10.0, b in -50.0f64..50.0) {
            let img = normal_image(3, 8, 32, seed);
            let moved = PlanarImage::from_fn(3, 8, 32, |c, h, w| {
                if c == 1 { a * img.get(c, h, w) + b } else { img.get(c, h, w) }
            }).unwrap();
            let (m0, m1) = (icc_matrix(&img).unwrap(), icc_matrix(&moved).unwrap());
            for (x, y) in m0.values.iter().zip(&m1.values) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn spectral_distance_shift_invariant(seed in 0u64..1000, dy in 0usize..16, dx in 0usize..24) {
            let img = normal_image(2, 16, 24, seed);
            let shifted = PlanarImage::from_fn(2, 16, 24, |c, h, w| img.get(c, (h + dy) % 16, (w + dx) % 24)).unwrap();
            prop_assert!(spectral_distance(&img, &shifted).unwrap().overall < 1e-9);
        }
    }
}
