//! Dark-frame synthesis by spectral sampling.
//!
//! A reference dark frame is split into a smooth fixed pattern `S` (large
//! Gaussian blur), per-channel means and a zero-mean stochastic residual `R`.
//! New residuals keep `|F{R}|` exactly while their phase is randomized, and
//! are then refined by alternating exact histogram matching against `R` with
//! re-imposition of the reference magnitude spectrum. Adding `S` and the
//! means back yields a new dark frame.

mod blur;
mod histmatch;

pub use blur::{gaussian_blur, gaussian_kernel, mirror_index, MIN_EFFECTIVE_SIGMA};
pub use histmatch::{histogram_match, stable_argsort, ArgSorter, RankMatcher};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::spectral::{take_real_part, Complex64, Fft2d, PhaseField};
use crate::tensor::{channel_means, mean, PlanarImage};

pub const DEFAULT_SIGMA: f64 = 50.0;
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Fixed-pattern blur standard deviation, in pixels.
    pub sigma: f64,
    /// Histogram/spectrum refinement rounds.
    pub iterations: usize,
    pub seed: u64,
    /// One phase field for all channels; off draws an independent field per
    /// channel and destroys inter-channel correlation.
    pub shared_phase: bool,
    /// Off skips refinement entirely, leaving the pure phase-randomized draw.
    pub histogram_matching: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            shared_phase: true,
            histogram_matching: true,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// `dark = fixed_pattern + residual + channel_means`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub fixed_pattern: PlanarImage,
    pub residual: PlanarImage,
    pub channel_means: Vec<f64>,
}

impl Decomposition {
    pub fn reconstruct(&self) -> Result<PlanarImage> {
        self.fixed_pattern.add(&self.residual)?.offset_channels(&self.channel_means)
    }

    /// `S + mu`: the smooth per-channel offset map.
    pub fn shading(&self) -> Result<PlanarImage> {
        self.fixed_pattern.offset_channels(&self.channel_means)
    }
}

/// Separates the smooth fixed pattern from the zero-mean stochastic residual.
pub fn remove_fixed_pattern(dark: &PlanarImage, sigma: f64) -> Result<Decomposition> {
    if sigma > 0.0 && sigma < MIN_EFFECTIVE_SIGMA {
        log::warn!(
            "sigma {sigma} is below {MIN_EFFECTIVE_SIGMA}: the blur is the identity and the residual is zero"
        );
    }
    let fixed_pattern = gaussian_blur(dark, sigma)?;
    let mut residual = dark.sub(&fixed_pattern)?;
    let means = channel_means(&residual);
    for (c, &m) in means.iter().enumerate() {
        residual.plane_mut(c).iter_mut().for_each(|v| *v -= m);
    }
    Ok(Decomposition {
        fixed_pattern,
        residual,
        channel_means: means,
    })
}

/// The dark-shading map `S + mu` of a reference frame.
pub fn export_dark_shading(dark: &PlanarImage, sigma: f64) -> Result<PlanarImage> {
    remove_fixed_pattern(dark, sigma)?.shading()
}

/// Everything about a reference residual that synthesis reuses across draws:
/// its spectrum, magnitude and sorted values.
#[derive(Debug, Clone)]
pub struct SpectralPrior {
    decomposition: Decomposition,
    // Spectra are kept in the transposed layout of `Fft2d::forward_transposed`.
    spectrum_t: Vec<Vec<Complex64>>,
    magnitude_t: Vec<Vec<f64>>,
    magnitude: Vec<Vec<f64>>,
    peak: Vec<f64>,
    mu: Vec<f64>,
    matcher: RankMatcher,
    fft: Fft2d,
}

/// Buffers reused by every transform of one draw.
struct Workspace {
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    scratch: Vec<Complex64>,
    sorter: ArgSorter,
}

impl Workspace {
    fn new(fft: &Fft2d) -> Self {
        let n = fft.height() * fft.width();
        Self {
            a: vec![Complex64::default(); n],
            b: vec![Complex64::default(); n],
            scratch: vec![Complex64::default(); fft.scratch_len()],
            sorter: ArgSorter::new(),
        }
    }
}

impl SpectralPrior {
    pub fn new(decomposition: Decomposition) -> Self {
        let r = &decomposition.residual;
        let (h, w) = (r.height(), r.width());
        let fft = Fft2d::new(h, w);
        let mut ws = Workspace::new(&fft);
        let mut spectrum_t = Vec::with_capacity(r.channels());
        for c in 0..r.channels() {
            for (z, &v) in ws.a.iter_mut().zip(r.plane(c)) {
                *z = Complex64::new(v, 0.0);
            }
            fft.forward_transposed(&mut ws.a, &mut ws.b, &mut ws.scratch);
            spectrum_t.push(ws.b.clone());
        }
        let magnitude_t: Vec<Vec<f64>> = spectrum_t.iter().map(|s| s.iter().map(|z| z.norm()).collect()).collect();
        let magnitude = magnitude_t
            .iter()
            .map(|mt| {
                let mut m = vec![0.0; mt.len()];
                for v in 0..w {
                    for u in 0..h {
                        m[u * w + v] = mt[v * h + u];
                    }
                }
                m
            })
            .collect();
        let peak = magnitude_t.iter().map(|m| m.iter().fold(0.0_f64, |a, &b| a.max(b))).collect();
        let matcher = RankMatcher::new(r);
        // The matched plane holds exactly the reference multiset, so its mean
        // is known up front.
        let mu = (0..r.channels()).map(|c| mean(matcher.sorted_reference(c))).collect();
        Self {
            decomposition,
            spectrum_t,
            magnitude_t,
            magnitude,
            peak,
            mu,
            matcher,
            fft,
        }
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.decomposition
    }

    /// `|F{R}|` of channel `c`.
    pub fn reference_magnitude(&self, c: usize) -> &[f64] {
        &self.magnitude[c]
    }

    fn channels(&self) -> usize {
        self.spectrum_t.len()
    }

    fn residual(&self) -> &PlanarImage {
        &self.decomposition.residual
    }

    /// One antisymmetric uniform phase field when `shared`, else one per channel.
    pub fn draw_phase_fields<R: Rng + ?Sized>(&self, shared: bool, rng: &mut R) -> Vec<PhaseField> {
        let (h, w) = (self.fft.height(), self.fft.width());
        let count = if shared { 1 } else { self.channels() };
        (0..count).map(|_| PhaseField::random_uniform(h, w, rng)).collect()
    }

    /// Initial draw `N0 = F^-1{ |R^| exp(i(theta_R + xi)) }`.
    ///
    /// `fields` holds either one field shared by all channels or one per
    /// channel. Returns the draw and the largest discarded imaginary residue.
    pub fn initial_draw(&self, fields: &[PhaseField]) -> Result<(PlanarImage, f64)> {
        let mut ws = Workspace::new(&self.fft);
        let mut out = self.residual().clone();
        let residue = self.initial_draw_into(fields, &mut ws, &mut out)?;
        Ok((out, residue))
    }

    fn initial_draw_into(&self, fields: &[PhaseField], ws: &mut Workspace, out: &mut PlanarImage) -> Result<f64> {
        let c_count = self.channels();
        if fields.len() != 1 && fields.len() != c_count {
            return Err(Error::ShapeMismatch(format!(
                "{} phase fields for {c_count} channels",
                fields.len()
            )));
        }
        let (h, w) = (self.fft.height(), self.fft.width());
        for f in fields {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::ShapeMismatch("phase field size differs from residual".into()));
            }
        }
        let rotations_t: Vec<Vec<Complex64>> = fields
            .iter()
            .map(|f| {
                let xi = f.values();
                let mut rot = vec![Complex64::default(); h * w];
                for v in 0..w {
                    for u in 0..h {
                        rot[v * h + u] = Complex64::from_polar(1.0, xi[u * w + v]);
                    }
                }
                rot
            })
            .collect();
        let mut residue = 0.0_f64;
        for c in 0..c_count {
            let rot = &rotations_t[if rotations_t.len() == 1 { 0 } else { c }];
            // |R^| exp(i(theta + xi)) == R^ exp(i xi), including at zero bins.
            for ((z, s), e) in ws.b.iter_mut().zip(&self.spectrum_t[c]).zip(rot) {
                *z = s * e;
            }
            self.fft.inverse_transposed(&mut ws.b, &mut ws.a, &mut ws.scratch);
            residue = residue.max(take_real_part(&ws.a, self.peak[c], out.plane_mut(c))?);
        }
        Ok(residue)
    }

    /// `iterations` rounds of histogram matching then spectral correction,
    /// applied to channel `c` of `plane` in place.
    fn refine_plane(&self, c: usize, plane: &mut [f64], iterations: usize, ws: &mut Workspace) -> Result<f64> {
        let mu = self.mu[c];
        let mut residue = 0.0_f64;
        for _ in 0..iterations {
            let a = &mut ws.a;
            self.matcher
                .match_with(c, plane, &mut ws.sorter, |i, v| a[i] = Complex64::new(v - mu, 0.0));
            self.fft.forward_transposed(&mut ws.a, &mut ws.b, &mut ws.scratch);
            // Keep the matched sample's phase, restore the reference magnitude.
            for (z, &m) in ws.b.iter_mut().zip(&self.magnitude_t[c]) {
                let norm = z.norm();
                *z = if norm > 0.0 {
                    *z * (m / norm)
                } else {
                    Complex64::new(m, 0.0)
                };
            }
            self.fft.inverse_transposed(&mut ws.b, &mut ws.a, &mut ws.scratch);
            residue = residue.max(take_real_part(&ws.a, self.peak[c], plane)?);
            for v in plane.iter_mut() {
                *v += mu;
            }
        }
        Ok(residue)
    }

    fn refine_in_place(&self, n: &mut PlanarImage, iterations: usize, ws: &mut Workspace) -> Result<f64> {
        let mut residue = 0.0_f64;
        for c in 0..self.channels() {
            residue = residue.max(self.refine_plane(c, n.plane_mut(c), iterations, ws)?);
        }
        Ok(residue)
    }

    /// One round of histogram matching followed by spectral correction.
    pub fn refine_step(&self, n: &PlanarImage) -> Result<(PlanarImage, f64)> {
        self.refine(n, 1)
    }

    /// `iterations` refinement rounds; zero rounds return the input.
    pub fn refine(&self, n: &PlanarImage, iterations: usize) -> Result<(PlanarImage, f64)> {
        if !n.same_shape(self.residual()) {
            return Err(Error::ShapeMismatch("refine input differs from residual shape".into()));
        }
        let mut current = n.clone();
        let residue = self.refine_in_place(&mut current, iterations, &mut Workspace::new(&self.fft))?;
        Ok((current, residue))
    }
}

/// Initial phase-randomized draw `N0` for a decomposition.
pub fn phase_randomize<R: Rng + ?Sized>(
    decomp: &Decomposition,
    config: &SynthesisConfig,
    rng: &mut R,
) -> Result<PlanarImage> {
    let prior = SpectralPrior::new(decomp.clone());
    let fields = prior.draw_phase_fields(config.shared_phase, rng);
    Ok(prior.initial_draw(&fields)?.0)
}

/// `iterations` rounds of histogram matching and spectral correction.
pub fn refine(n: &PlanarImage, decomp: &Decomposition, iterations: usize) -> Result<PlanarImage> {
    if iterations == 0 {
        return Ok(n.clone());
    }
    Ok(SpectralPrior::new(decomp.clone()).refine(n, iterations)?.0)
}

/// A synthesized frame with its diagnostics.
#[derive(Debug, Clone)]
pub struct SynthesizedFrame {
    /// The dark frame `N + S + mu`.
    pub frame: PlanarImage,
    /// The stochastic part `N` alone.
    pub noise: PlanarImage,
    /// Largest imaginary residue discarded by any inverse transform.
    pub max_imag_residue: f64,
}

/// Reusable synthesizer for many frames from one reference dark frame.
///
/// Frame `i` depends only on `(reference, config, i)`, so frames can be
/// produced in any order or in parallel with identical results.
#[derive(Debug, Clone)]
pub struct DarkSynthesizer {
    prior: SpectralPrior,
    config: SynthesisConfig,
}

impl DarkSynthesizer {
    pub fn new(dark: &PlanarImage, config: SynthesisConfig) -> Result<Self> {
        config.validate()?;
        let decomposition = remove_fixed_pattern(dark, config.sigma)?;
        Ok(Self {
            prior: SpectralPrior::new(decomposition),
            config,
        })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.config
    }

    pub fn prior(&self) -> &SpectralPrior {
        &self.prior
    }

    pub fn decomposition(&self) -> &Decomposition {
        self.prior.decomposition()
    }

    fn phase_fields(&self, index: u64) -> Vec<PhaseField> {
        let mut rng = substream(self.config.seed, &[domain::PHASE, index]);
        self.prior.draw_phase_fields(self.config.shared_phase, &mut rng)
    }

    /// Noise fields `N^(k)` for each requested `k`, all from draw `index`.
    /// Checkpoints must be ascending.
    pub fn noise_checkpoints(&self, index: u64, checkpoints: &[usize]) -> Result<Vec<PlanarImage>> {
        if checkpoints.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidInput("checkpoints must be ascending".into()));
        }
        let mut ws = Workspace::new(&self.prior.fft);
        let mut n = self.decomposition().residual.clone();
        self.prior.initial_draw_into(&self.phase_fields(index), &mut ws, &mut n)?;
        let mut done = 0;
        let mut out = Vec::with_capacity(checkpoints.len());
        for &k in checkpoints {
            self.prior.refine_in_place(&mut n, k - done, &mut ws)?;
            done = k;
            out.push(n.clone());
        }
        Ok(out)
    }

    pub fn synthesize(&self, index: u64) -> Result<SynthesizedFrame> {
        let mut ws = Workspace::new(&self.prior.fft);
        let mut noise = self.decomposition().residual.clone();
        let mut residue = self.prior.initial_draw_into(&self.phase_fields(index), &mut ws, &mut noise)?;
        if self.config.histogram_matching {
            residue = residue.max(self.prior.refine_in_place(&mut noise, self.config.iterations, &mut ws)?);
        }
        let d = self.decomposition();
        let frame = noise.add(&d.fixed_pattern)?.offset_channels(&d.channel_means)?;
        Ok(SynthesizedFrame {
            frame,
            noise,
            max_imag_residue: residue,
        })
    }

    /// Dark frame number `index`.
    pub fn frame(&self, index: u64) -> Result<PlanarImage> {
        Ok(self.synthesize(index)?.frame)
    }

    /// Frames for `indices`, computed in parallel on the current rayon pool.
    pub fn frames(&self, indices: &[u64]) -> Result<Vec<PlanarImage>> {
        indices.par_iter().map(|&i| self.frame(i)).collect()
    }
}

/// Full pipeline for a single draw (index 0 of `config.seed`).
pub fn synthesize_dark(dark: &PlanarImage, config: &SynthesisConfig) -> Result<PlanarImage> {
    DarkSynthesizer::new(dark, config.clone())?.frame(0)
}

/// Ways of turning one real dark frame into many noise samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingleFrameStrategy {
    /// Reuse the dark frame unchanged for every sample.
    DirectAdd,
    /// Random `height x width` crops of the dark frame.
    RandomCrop { height: usize, width: usize },
    /// Spectral sampling with refinement.
    Spectral,
}

/// Random `height x width` window of every channel.
pub fn random_crop<R: Rng + ?Sized>(img: &PlanarImage, height: usize, width: usize, rng: &mut R) -> Result<PlanarImage> {
    if height == 0 || width == 0 || height > img.height() || width > img.width() {
        return Err(Error::InvalidInput(format!(
            "crop {height}x{width} does not fit in {}x{}",
            img.height(),
            img.width()
        )));
    }
    let top = rng.random_range(0..=img.height() - height);
    let left = rng.random_range(0..=img.width() - width);
    PlanarImage::from_fn(img.channels(), height, width, |c, h, w| img.get(c, top + h, left + w))?
        .with_labels(img.labels().to_vec())
}

/// Produces noise samples from one reference dark frame under a strategy.
#[derive(Debug, Clone)]
pub struct DarkFrameSource {
    strategy: SingleFrameStrategy,
    dark: PlanarImage,
    seed: u64,
    synthesizer: Option<DarkSynthesizer>,
}

impl DarkFrameSource {
    pub fn new(dark: &PlanarImage, strategy: SingleFrameStrategy, config: SynthesisConfig) -> Result<Self> {
        let synthesizer = match strategy {
            SingleFrameStrategy::Spectral => Some(DarkSynthesizer::new(dark, config.clone())?),
            _ => None,
        };
        Ok(Self {
            strategy,
            dark: dark.clone(),
            seed: config.seed,
            synthesizer,
        })
    }

    pub fn strategy(&self) -> SingleFrameStrategy {
        self.strategy
    }

    pub fn sample(&self, index: u64) -> Result<PlanarImage> {
        match (self.strategy, &self.synthesizer) {
            (SingleFrameStrategy::DirectAdd, _) => Ok(self.dark.clone()),
            (SingleFrameStrategy::RandomCrop { height, width }, _) => {
                let mut rng = substream(self.seed, &[domain::CROP, index]);
                random_crop(&self.dark, height, width, &mut rng)
            }
            (SingleFrameStrategy::Spectral, Some(s)) => s.frame(index),
            (SingleFrameStrategy::Spectral, None) => unreachable!("spectral source always owns a synthesizer"),
        }
    }
}
