//! Exact rank-based histogram matching.

use crate::error::Result;
use crate::tensor::PlanarImage;

/// Maps an `f64` to a `u64` whose unsigned order equals `f64::total_cmp`.
#[inline]
fn order_key(v: f64) -> u64 {
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

const DIGIT_BITS: u32 = 11;
const BUCKETS: usize = 1 << DIGIT_BITS;
const PASSES: u32 = 64_u32.div_ceil(DIGIT_BITS);

/// Reusable buffers for [`stable_argsort`]-style sorting of many planes.
#[derive(Debug, Default, Clone)]
pub struct ArgSorter {
    keys: Vec<(u64, u32)>,
    scratch: Vec<(u64, u32)>,
}

impl ArgSorter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sorts `values` and returns `(key, index)` pairs in ascending order.
    ///
    /// LSD radix sort on the total-order bit pattern: stable, so equal values
    /// keep ascending index order.
    pub fn sort(&mut self, values: &[f64]) -> &[(u64, u32)] {
        assert!(values.len() <= u32::MAX as usize, "plane too large for u32 ranks");
        self.keys.clear();
        self.keys
            .extend(values.iter().enumerate().map(|(i, &v)| (order_key(v), i as u32)));
        self.scratch.resize(values.len(), (0, 0));
        let mut counts = vec![[0usize; BUCKETS]; PASSES as usize];
        for &(k, _) in &self.keys {
            for (p, hist) in counts.iter_mut().enumerate() {
                hist[((k >> (p as u32 * DIGIT_BITS)) as usize) & (BUCKETS - 1)] += 1;
            }
        }
        for (p, hist) in counts.iter().enumerate() {
            // All keys share this digit: the pass would be the identity.
            if hist.contains(&values.len()) {
                continue;
            }
            let mut offsets = [0usize; BUCKETS];
            let mut run = 0;
            for (o, &c) in offsets.iter_mut().zip(hist.iter()) {
                *o = run;
                run += c;
            }
            let shift = p as u32 * DIGIT_BITS;
            for &item in &self.keys {
                let d = ((item.0 >> shift) as usize) & (BUCKETS - 1);
                self.scratch[offsets[d]] = item;
                offsets[d] += 1;
            }
            std::mem::swap(&mut self.keys, &mut self.scratch);
        }
        &self.keys
    }
}

/// Indices of `values` sorted by value, ties broken by index.
pub fn stable_argsort(values: &[f64]) -> Vec<u32> {
    ArgSorter::new().sort(values).iter().map(|&(_, i)| i).collect()
}

/// Per-channel sorted reference values, reusable across many matches.
#[derive(Debug, Clone)]
pub struct RankMatcher {
    shape: (usize, usize, usize),
    sorted: Vec<Vec<f64>>,
}

impl RankMatcher {
    pub fn new(reference: &PlanarImage) -> Self {
        let sorted = (0..reference.channels())
            .map(|c| {
                let mut v = reference.plane(c).to_vec();
                v.sort_unstable_by(f64::total_cmp);
                v
            })
            .collect();
        Self {
            shape: reference.shape(),
            sorted,
        }
    }

    pub fn sorted_reference(&self, c: usize) -> &[f64] {
        &self.sorted[c]
    }

    /// Assigns the k-th smallest reference value of channel `c` to the
    /// position of the k-th smallest value of `plane`.
    pub fn match_plane(&self, c: usize, plane: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; plane.len()];
        self.match_with(c, plane, &mut ArgSorter::new(), |i, v| out[i] = v);
        out
    }

    /// Like [`match_plane`](Self::match_plane) but hands each `(position,
    /// value)` to `put` instead of allocating an output.
    pub fn match_with<F: FnMut(usize, f64)>(&self, c: usize, plane: &[f64], sorter: &mut ArgSorter, mut put: F) {
        let reference = &self.sorted[c];
        assert_eq!(plane.len(), reference.len(), "plane size differs from reference");
        for (&(_, idx), &v) in sorter.sort(plane).iter().zip(reference) {
            put(idx as usize, v);
        }
    }

    pub fn match_image(&self, src: &PlanarImage) -> Result<PlanarImage> {
        if src.shape() != self.shape {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "histogram match: source {:?} vs reference {:?}",
                src.shape(),
                self.shape
            )));
        }
        let mut out = src.clone();
        for c in 0..src.channels() {
            let matched = self.match_plane(c, src.plane(c));
            out.plane_mut(c).copy_from_slice(&matched);
        }
        Ok(out)
    }
}

/// Exact histogram matching of `src` onto `reference`, channel by channel.
///
/// The output holds exactly the multiset of `reference` values per channel,
/// arranged in the rank order of `src` (ties broken by flat index).
pub fn histogram_match(src: &PlanarImage, reference: &PlanarImage) -> Result<PlanarImage> {
    src.ensure_same_shape(reference, "histogram match")?;
    RankMatcher::new(reference).match_image(src)
}
