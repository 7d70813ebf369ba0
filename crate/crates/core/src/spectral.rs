//! Per-channel 2D DFT, polar decomposition and conjugate-antisymmetric phase
//! fields.
//!
//! Conventions: the forward transform is unnormalized,
//! `X(u,v) = sum x(h,w) exp(-2 pi i (uh/H + vw/W))`, and [`inverse_dft`]
//! carries the `1/(HW)` factor so the pair is an exact inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rustfft::{Fft, FftPlanner};

pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::PlanarImage;

/// Largest plane (H*W) accepted by the O(N^2) reference transforms.
pub const ORACLE_MAX_PIXELS: usize = 4096;

/// Relative tolerance on the imaginary part left by an inverse transform.
const REALNESS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
    labels: Vec<String>,
}

impl SpectrumStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput("spectrum dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{channels}x{height}x{width} spectrum needs {} bins, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("non-finite spectrum bin".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            labels: (0..channels).map(|c| format!("ch{c}")).collect(),
        })
    }

    /// Recombines `magnitude * exp(i * phase)` bin by bin.
    pub fn from_polar(magnitude: &PlanarImage, phase: &PlanarImage) -> Result<Self> {
        magnitude.ensure_same_shape(phase, "from_polar")?;
        let (c, h, w) = magnitude.shape();
        let data = magnitude
            .data()
            .iter()
            .zip(phase.data())
            .map(|(&m, &p)| Complex64::from_polar(m, p))
            .collect();
        let mut s = Self::new(c, h, w, data)?;
        s.labels = magnitude.labels().to_vec();
        Ok(s)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    fn real_image(&self, data: Vec<f64>) -> PlanarImage {
        PlanarImage::from_parts(self.channels, self.height, self.width, data, self.labels.clone())
    }
}

/// Planned forward/inverse transforms for one `H x W` plane size.
#[derive(Clone)]
pub struct Fft2d {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2d")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2d {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Scratch length needed by the `*_with_scratch` transforms.
    pub fn scratch_len(&self) -> usize {
        [&self.row_fwd, &self.row_inv, &self.col_fwd, &self.col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0)
    }

    /// Forward transform of `plane` (clobbered) into `out_t`, which receives
    /// the spectrum in transposed layout: bin `(u, v)` at `v * H + u`.
    pub fn forward_transposed(&self, plane: &mut [Complex64], out_t: &mut [Complex64], scratch: &mut [Complex64]) {
        debug_assert_eq!(plane.len(), self.height * self.width);
        self.row_fwd.process_with_scratch(plane, scratch);
        transpose(plane, out_t, self.height, self.width);
        self.col_fwd.process_with_scratch(out_t, scratch);
    }

    /// Unscaled inverse of a transposed-layout spectrum (clobbered) into
    /// `out` in natural layout.
    pub fn inverse_transposed(&self, spec_t: &mut [Complex64], out: &mut [Complex64], scratch: &mut [Complex64]) {
        debug_assert_eq!(spec_t.len(), self.height * self.width);
        self.col_inv.process_with_scratch(spec_t, scratch);
        transpose(spec_t, out, self.width, self.height);
        self.row_inv.process_with_scratch(out, scratch);
    }

    /// Unnormalized forward transform of one plane, in place.
    pub fn forward(&self, plane: &mut [Complex64]) {
        let mut t = vec![Complex64::default(); plane.len()];
        let mut scratch = vec![Complex64::default(); self.scratch_len()];
        self.forward_transposed(plane, &mut t, &mut scratch);
        transpose(&t, plane, self.width, self.height);
    }

    /// Inverse transform of one plane without any scaling, in place.
    pub fn inverse_unscaled(&self, plane: &mut [Complex64]) {
        let mut t = vec![Complex64::default(); plane.len()];
        let mut scratch = vec![Complex64::default(); self.scratch_len()];
        transpose(plane, &mut t, self.height, self.width);
        self.inverse_transposed(&mut t, plane, &mut scratch);
    }

    /// Forward transform of a real plane.
    pub fn forward_real(&self, plane: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Exact inverse (`1/(HW)` scaling) of one plane, returning the real part
    /// and the largest discarded imaginary magnitude. Fails when that residue
    /// exceeds the realness tolerance relative to the spectrum's scale.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> Result<(Vec<f64>, f64)> {
        let peak = spectrum.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        self.inverse_unscaled(&mut spectrum);
        let mut real = vec![0.0; spectrum.len()];
        let residue = take_real_part(&spectrum, peak, &mut real)?;
        Ok((real, residue))
    }
}

/// Writes `re / N` of an unscaled inverse transform into `out` and returns the
/// largest `|im| / N`. `peak` is the largest bin magnitude of the spectrum
/// that was inverted; a residue above `1e-6 * peak / N` means the spectrum
/// was not Hermitian.
pub fn take_real_part(unscaled: &[Complex64], peak: f64, out: &mut [f64]) -> Result<f64> {
    let n = unscaled.len() as f64;
    let mut residue = 0.0_f64;
    for (o, z) in out.iter_mut().zip(unscaled) {
        residue = residue.max(z.im.abs());
        *o = z.re / n;
    }
    let residue = residue / n;
    let tolerance = REALNESS_TOLERANCE * peak / n;
    if residue > tolerance {
        return Err(Error::SymmetryViolation { residue, tolerance });
    }
    Ok(residue)
}

/// Blocked transpose of a `rows x cols` matrix.
pub fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Unnormalized 2D DFT of every channel.
pub fn forward_dft(img: &PlanarImage) -> SpectrumStack {
    let fft = Fft2d::new(img.height(), img.width());
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        data.extend(fft.forward_real(img.plane(c)));
    }
    SpectrumStack {
        channels: img.channels(),
        height: img.height(),
        width: img.width(),
        data,
        labels: img.labels().to_vec(),
    }
}

/// Output of an inverse transform: the real image plus the largest imaginary
/// magnitude that was discarded, in the same units as the image.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: PlanarImage,
    pub imag_residue: f64,
}

/// Exact inverse of [`forward_dft`].
pub fn inverse_dft(spec: &SpectrumStack) -> Result<Reconstruction> {
    let fft = Fft2d::new(spec.height, spec.width);
    let mut data = Vec::with_capacity(spec.data.len());
    let mut imag_residue = 0.0_f64;
    for c in 0..spec.channels {
        let (real, residue) = fft.inverse_real(spec.plane(c).to_vec())?;
        imag_residue = imag_residue.max(residue);
        data.extend(real);
    }
    Ok(Reconstruction {
        image: spec.real_image(data),
        imag_residue,
    })
}

/// Inverse transform with an additional `1/sqrt(HW)` factor, so that
/// `inverse_dft_normalized(forward_dft(x)) == x / sqrt(HW)`.
pub fn inverse_dft_normalized(spec: &SpectrumStack) -> Result<Reconstruction> {
    let scale = 1.0 / ((spec.height * spec.width) as f64).sqrt();
    let Reconstruction { image, imag_residue } = inverse_dft(spec)?;
    Ok(Reconstruction {
        image: image.map(|v| v * scale)?,
        imag_residue: imag_residue * scale,
    })
}

/// Pointwise modulus.
pub fn magnitude(spec: &SpectrumStack) -> PlanarImage {
    spec.real_image(spec.data.iter().map(|z| z.norm()).collect())
}

/// Argument of a complex value in `(-pi, pi]`, with `arg(0) = 0`.
pub fn principal_arg(z: Complex64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let a = z.im.atan2(z.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Pointwise argument in `(-pi, pi]`.
pub fn phase(spec: &SpectrumStack) -> PlanarImage {
    spec.real_image(spec.data.iter().map(|&z| principal_arg(z)).collect())
}

/// Index of the DFT bin conjugate to `(u, v)`.
#[inline]
pub fn conjugate_bin(u: usize, v: usize, height: usize, width: usize) -> (usize, usize) {
    ((height - u) % height, (width - v) % width)
}

/// A real `H x W` phase-offset field.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    antisymmetric: bool,
}

impl PhaseField {
    /// The all-zero field; trivially antisymmetric.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            antisymmetric: true,
        }
    }

    /// Wraps raw values without any symmetry guarantee.
    pub fn from_raw(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} phase field needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            antisymmetric: false,
        })
    }

    /// Draws i.i.d. offsets from Uniform(-pi, pi] and antisymmetrizes them.
    pub fn random_uniform<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        let raw: Vec<f64> = (0..height * width)
            .map(|_| PI - 2.0 * PI * rng.random::<f64>())
            .collect();
        antisymmetrize_phase(&raw, height, width).expect("length matches by construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_antisymmetric(&self) -> bool {
        self.antisymmetric
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.width + v]
    }
}

/// Makes a raw phase field conjugate-antisymmetric.
///
/// For each conjugate pair the lexicographically smaller bin keeps its value
/// and its partner receives the negation; self-conjugate bins (DC, and the
/// Nyquist row/column for even sizes) are zeroed. Adding such a field to the
/// phase of a real signal's spectrum keeps the inverse transform real.
pub fn antisymmetrize_phase(raw: &[f64], height: usize, width: usize) -> Result<PhaseField> {
    if raw.len() != height * width || height == 0 || width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{height}x{width} phase field needs {} values, got {}",
            height * width,
            raw.len()
        )));
    }
    let mut values = raw.to_vec();
    for u in 0..height {
        for v in 0..width {
            let (cu, cv) = conjugate_bin(u, v, height, width);
            let here = u * width + v;
            let there = cu * width + cv;
            match here.cmp(&there) {
                std::cmp::Ordering::Equal => values[here] = 0.0,
                std::cmp::Ordering::Less => values[there] = -values[here],
                std::cmp::Ordering::Greater => {}
            }
        }
    }
    Ok(PhaseField {
        height,
        width,
        values,
        antisymmetric: true,
    })
}

fn oracle_guard(height: usize, width: usize) -> Result<()> {
    if height * width > ORACLE_MAX_PIXELS {
        return Err(Error::InvalidInput(format!(
            "reference DFT limited to {ORACLE_MAX_PIXELS} pixels per plane, got {height}x{width}"
        )));
    }
    Ok(())
}

fn twiddle(u: usize, h: usize, height: usize, v: usize, w: usize, width: usize, sign: f64) -> Complex64 {
    // Reduce the index products first so the angle stays accurate.
    let turns = ((u * h) % height) as f64 / height as f64 + ((v * w) % width) as f64 / width as f64;
    Complex64::from_polar(1.0, sign * 2.0 * PI * turns)
}

/// Direct double-loop evaluation of the forward DFT definition.
pub fn dft_oracle(img: &PlanarImage) -> Result<SpectrumStack> {
    let (channels, height, width) = img.shape();
    oracle_guard(height, width)?;
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..channels {
        let plane = img.plane(c);
        for u in 0..height {
            for v in 0..width {
                let mut acc = Complex64::default();
                for h in 0..height {
                    for w in 0..width {
                        acc += plane[h * width + w] * twiddle(u, h, height, v, w, width, -1.0);
                    }
                }
                data.push(acc);
            }
        }
    }
    let mut s = SpectrumStack::new(channels, height, width, data)?;
    s.labels = img.labels().to_vec();
    Ok(s)
}

/// Direct evaluation of the inverse DFT (with `1/(HW)`), keeping the complex
/// result so realness can be checked independently of the fast path.
pub fn idft_oracle(spec: &SpectrumStack) -> Result<Vec<Complex64>> {
    let (channels, height, width) = spec.shape();
    oracle_guard(height, width)?;
    let n = (height * width) as f64;
    let mut out = Vec::with_capacity(spec.data.len());
    for c in 0..channels {
        let plane = spec.plane(c);
        for h in 0..height {
            for w in 0..width {
                let mut acc = Complex64::default();
                for u in 0..height {
                    for v in 0..width {
                        acc += plane[u * width + v] * twiddle(u, h, height, v, w, width, 1.0);
                    }
                }
                out.push(acc / n);
            }
        }
    }
    Ok(out)
}
