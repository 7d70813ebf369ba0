use crate::error::{Error, Result};
use crate::tensor::PlanarImage;

/// Below this standard deviation the truncated kernel is a single tap and
/// the blur is the identity.
pub const MIN_EFFECTIVE_SIGMA: f64 = 0.3;

/// Normalized 1D Gaussian taps for offsets `0..=radius`, radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f64> = (0..=radius).map(|k| (-((k * k) as f64) / denom).exp()).collect();
    let total = taps[0] + 2.0 * taps[1..].iter().sum::<f64>();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Reflects an out-of-range index back into `0..n` without repeating the
/// edge sample (`d c b | a b c d | c b a`).
#[inline]
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn blur_rows(src: &[f64], dst: &mut [f64], height: usize, width: usize, taps: &[f64]) {
    let r = taps.len() - 1;
    let mut padded = vec![0.0; width + 2 * r];
    for h in 0..height {
        let row = &src[h * width..(h + 1) * width];
        for (j, p) in padded.iter_mut().enumerate() {
            *p = row[mirror_index(j as isize - r as isize, width)];
        }
        let out = &mut dst[h * width..(h + 1) * width];
        for (w, o) in out.iter_mut().enumerate() {
            let centre = w + r;
            let mut acc = taps[0] * padded[centre];
            for k in 1..=r {
                acc += taps[k] * (padded[centre - k] + padded[centre + k]);
            }
            *o = acc;
        }
    }
}

fn blur_cols(src: &[f64], dst: &mut [f64], height: usize, width: usize, taps: &[f64]) {
    for h in 0..height {
        let out = &mut dst[h * width..(h + 1) * width];
        let centre = &src[h * width..(h + 1) * width];
        for (o, &c) in out.iter_mut().zip(centre) {
            *o = taps[0] * c;
        }
        for (k, &t) in taps.iter().enumerate().skip(1) {
            let up = mirror_index(h as isize - k as isize, height);
            let down = mirror_index((h + k) as isize, height);
            let (a, b) = (&src[up * width..(up + 1) * width], &src[down * width..(down + 1) * width]);
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o += t * (x + y);
            }
        }
    }
}

/// Separable Gaussian blur of every channel with mirror boundaries.
///
/// The kernel is truncated at `ceil(4 sigma)` and renormalized to unit sum.
/// `sigma < 0.3` degenerates to the identity.
pub fn gaussian_blur(img: &PlanarImage, sigma: f64) -> Result<PlanarImage> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("blur sigma must be positive, got {sigma}")));
    }
    if sigma < MIN_EFFECTIVE_SIGMA {
        return Ok(img.clone());
    }
    let taps = gaussian_kernel(sigma);
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    for c in 0..img.channels() {
        blur_rows(img.plane(c), &mut tmp, h, w, &taps);
        blur_cols(&tmp, out.plane_mut(c), h, w, &taps);
    }
    Ok(out)
}
