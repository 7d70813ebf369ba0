//! Planar image tensors, CFA packing and per-channel statistics.
//!
//! A [`PlanarImage`] is a `C x H x W` block of `f64` values stored
//! channel-major and row-major within each channel. Raw mosaics are carried
//! as single-plane images and split into per-site planes with [`pack_cfa`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    labels: Vec<String>,
}

fn default_labels(channels: usize) -> Vec<String> {
    (0..channels).map(|c| format!("ch{c}")).collect()
}

impl PlanarImage {
    /// Builds an image from channel-major data. Every value must be finite.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            labels: default_labels(channels),
        })
    }

    /// Constructor for results of internal arithmetic on finite inputs.
    pub(crate) fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        labels: Vec<String>,
    ) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        debug_assert_eq!(labels.len(), channels);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            channels,
            height,
            width,
            data,
            labels,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    /// Evaluates `f(c, h, w)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Replaces the channel labels. The label count must equal the channel count.
    pub fn with_labels<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} channels",
                labels.len(),
                self.channels
            )));
        }
        self.labels = labels;
        Ok(self)
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

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// Copies the channels in `range` into a new image.
    pub fn channel_range(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.channels {
            return Err(Error::InvalidInput(format!(
                "channel range {range:?} outside 0..{}",
                self.channels
            )));
        }
        let n = self.plane_len();
        let data = self.data[range.start * n..range.end * n].to_vec();
        let labels = self.labels[range.clone()].to_vec();
        Ok(Self::from_parts(range.len(), self.height, self.width, data, labels))
    }

    pub fn same_shape(&self, other: &PlanarImage) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &PlanarImage, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Pointwise `f(self, other)`, keeping this image's labels.
    pub fn zip_map(&self, other: &PlanarImage, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.channels, self.height, self.width, data)
            .and_then(|img| img.with_labels(self.labels.clone()))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.channels, self.height, self.width, data)
            .and_then(|img| img.with_labels(self.labels.clone()))
    }

    pub fn add(&self, other: &PlanarImage) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &PlanarImage) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Adds `offsets[c]` to every value of channel `c`.
    pub fn offset_channels(&self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets for {} channels",
                offsets.len(),
                self.channels
            )));
        }
        let mut out = self.clone();
        for (c, &off) in offsets.iter().enumerate() {
            out.plane_mut(c).iter_mut().for_each(|v| *v += off);
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Acquisition metadata carried alongside a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub iso: u32,
    pub black_level: f64,
    pub white_level: f64,
    pub sensor_id: String,
    pub exposure_tag: String,
}

impl FrameMeta {
    pub fn new(iso: u32, black_level: f64, white_level: f64) -> Self {
        Self {
            iso,
            black_level,
            white_level,
            sensor_id: "unknown".to_string(),
            exposure_tag: "normal".to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iso == 0 {
            return Err(Error::InvalidInput("iso must be positive".into()));
        }
        if !(self.black_level >= 0.0 && self.black_level < self.white_level) {
            return Err(Error::InvalidInput(format!(
                "need 0 <= black_level < white_level, got black={} white={}",
                self.black_level, self.white_level
            )));
        }
        Ok(())
    }

    /// Usable signal range above the black level.
    pub fn dynamic_range(&self) -> f64 {
        self.white_level - self.black_level
    }
}

/// Repeat period of a colour filter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfaPeriod {
    pub py: usize,
    pub px: usize,
    site_labels: Option<Vec<String>>,
}

impl CfaPeriod {
    pub fn new(py: usize, px: usize) -> Result<Self> {
        if py == 0 || px == 0 {
            return Err(Error::InvalidInput(format!("CFA period must be positive, got {py}x{px}")));
        }
        Ok(Self {
            py,
            px,
            site_labels: None,
        })
    }

    /// 2x2 Bayer period in RGGB order: R, Gr, Gb, B.
    pub fn rggb() -> Self {
        Self {
            py: 2,
            px: 2,
            site_labels: Some(["R", "Gr", "Gb", "B"].map(String::from).to_vec()),
        }
    }

    /// 6x6 X-Trans period. Planes are labelled by site position only.
    pub fn xtrans() -> Self {
        Self {
            py: 6,
            px: 6,
            site_labels: None,
        }
    }

    pub fn with_site_labels<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() != self.sites() {
            return Err(Error::ShapeMismatch(format!(
                "{} site labels for a {}x{} period",
                labels.len(),
                self.py,
                self.px
            )));
        }
        self.site_labels = Some(labels);
        Ok(self)
    }

    pub fn sites(&self) -> usize {
        self.py * self.px
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.site_labels {
            Some(l) => l.clone(),
            None => (0..self.py)
                .flat_map(|r| (0..self.px).map(move |c| format!("s{r}_{c}")))
                .collect(),
        }
    }
}

/// Splits a single-plane mosaic into one plane per CFA site.
///
/// Plane `k` at `(h, w)` holds mosaic sample `(h*py + k/px, w*px + k%px)`.
pub fn pack_cfa(mosaic: &PlanarImage, period: &CfaPeriod) -> Result<PlanarImage> {
    if mosaic.channels() != 1 {
        return Err(Error::InvalidInput(format!(
            "mosaic must have one plane, got {}",
            mosaic.channels()
        )));
    }
    let (mh, mw) = (mosaic.height(), mosaic.width());
    if mh % period.py != 0 || mw % period.px != 0 {
        return Err(Error::InvalidInput(format!(
            "mosaic {mh}x{mw} not divisible by period {}x{}",
            period.py, period.px
        )));
    }
    let (h, w) = (mh / period.py, mw / period.px);
    let sites = period.sites();
    let src = mosaic.data();
    let mut data = Vec::with_capacity(sites * h * w);
    for k in 0..sites {
        let (dy, dx) = (k / period.px, k % period.px);
        for r in 0..h {
            let row = (r * period.py + dy) * mw;
            data.extend((0..w).map(|c| src[row + c * period.px + dx]));
        }
    }
    Ok(PlanarImage::from_parts(sites, h, w, data, period.labels()))
}

/// Inverse of [`pack_cfa`].
pub fn unpack_cfa(planes: &PlanarImage, period: &CfaPeriod) -> Result<PlanarImage> {
    let sites = period.sites();
    if planes.channels() != sites {
        return Err(Error::ShapeMismatch(format!(
            "{} planes for a {}x{} period ({sites} sites)",
            planes.channels(),
            period.py,
            period.px
        )));
    }
    let (h, w) = (planes.height(), planes.width());
    let (mh, mw) = (h * period.py, w * period.px);
    let mut data = vec![0.0; mh * mw];
    for k in 0..sites {
        let (dy, dx) = (k / period.px, k % period.px);
        let plane = planes.plane(k);
        for r in 0..h {
            let row = (r * period.py + dy) * mw;
            for c in 0..w {
                data[row + c * period.px + dx] = plane[r * w + c];
            }
        }
    }
    Ok(PlanarImage::from_parts(1, mh, mw, data, vec!["mosaic".to_string()]))
}

/// Arithmetic mean of each plane.
pub fn channel_means(img: &PlanarImage) -> Vec<f64> {
    (0..img.channels()).map(|c| mean(img.plane(c))).collect()
}

/// Pairwise summation keeps the rounding error of large planes at O(log n).
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 128;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let (a, b) = values.split_at(values.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}
