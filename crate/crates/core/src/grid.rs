//! Dense grids shared by every stage: score/feature tensors, RGB images,
//! label masks and the per-image set of present classes.
//!
//! Layout is row-major with channels innermost, so the value for
//! `(row, col, ch)` lives at `(row * width + col) * channels + ch`.
//! Background is always channel 0; object classes occupy `1..=K`.

use std::collections::BTreeSet;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Label value for pixels that carry no class.
pub const IGNORE: u8 = 255;

/// Channel index of the background class.
pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Tensor3<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "buffer of {} values cannot hold {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor by evaluating `f(row, col, ch)` for every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Channel vector of the pixel with flat index `p = row * width + col`.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor3<U> {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channels `range` into a new tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.channels || range.start > range.end {
            return Err(Error::dim(format!(
                "channel range {range:?} out of 0..{}",
                self.channels
            )));
        }
        let n = range.len();
        let mut data = Vec::with_capacity(self.pixels() * n);
        for p in 0..self.pixels() {
            data.extend_from_slice(&self.pixel(p)[range.clone()]);
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: n,
            data,
        })
    }

    pub fn same_spatial<U>(&self, other: &Tensor3<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl<T: Float> Tensor3<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Tensor3<f32> {
    pub fn to_f64(&self) -> Tensor3<f64> {
        self.map(f64::from)
    }
}

impl Tensor3<f64> {
    pub fn to_f32(&self) -> Tensor3<f32> {
        self.map(|v| v as f32)
    }
}

/// RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb(Tensor3<f32>);

impl ImageRgb {
    pub fn new(pixels: Tensor3<f32>) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::dim(format!(
                "an RGB image needs 3 channels, got {}",
                pixels.channels()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self(pixels))
    }

    /// Converts 8-bit RGB samples by dividing by 255.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(Tensor3::from_vec(height, width, 3, data)?)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.0
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f32] {
        self.0.pixel(p)
    }

    pub fn as_tensor(&self) -> &Tensor3<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3<f32> {
        self.0
    }
}

/// Per-pixel class indices; [`IGNORE`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn from_vec(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "{} labels cannot fill {height}x{width}",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    /// Checks that every non-ignore label is below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && usize::from(l) >= num_classes)
        {
            Some(l) => Err(Error::Contract(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Pixels that carry a pseudo label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl ValidMask {
    pub fn from_vec(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(format!(
                "{} bits cannot fill {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// True exactly where `labels` is not [`IGNORE`].
    pub fn from_labels(labels: &LabelMask) -> Self {
        Self {
            height: labels.height,
            width: labels.width,
            bits: labels.labels.iter().map(|&l| l != IGNORE).collect(),
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Object classes present in an image. Background is implicitly present.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSet {
    objects: BTreeSet<usize>,
}

impl ClassSet {
    /// Object class indices must be `>= 1`; a stray 0 is accepted and ignored.
    pub fn new(classes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            objects: classes.into_iter().filter(|&c| c != BACKGROUND).collect(),
        }
    }

    /// Every object class `1..num_channels`.
    pub fn all(num_channels: usize) -> Self {
        Self::new(1..num_channels)
    }

    /// Parses a comma-separated index list such as `"1,3"`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut classes = Vec::new();
        for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let c: usize = tok
                .parse()
                .map_err(|_| Error::param(format!("bad class index {tok:?}")))?;
            classes.push(c);
        }
        Ok(Self::new(classes))
    }

    #[inline]
    pub fn contains(&self, class: usize) -> bool {
        class == BACKGROUND || self.objects.contains(&class)
    }

    pub fn objects(&self) -> impl Iterator<Item = usize> + '_ {
        self.objects.iter().copied()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    /// Background followed by the object classes, ascending.
    pub fn channels(&self) -> Vec<usize> {
        std::iter::once(BACKGROUND).chain(self.objects()).collect()
    }

    pub fn check_channels(&self, num_channels: usize) -> Result<()> {
        match self.objects.iter().find(|&&c| c >= num_channels) {
            Some(c) => Err(Error::param(format!(
                "present class {c} out of range for {num_channels} channels"
            ))),
            None => Ok(()),
        }
    }
}

/// Prepends the constant background plane (all ones) as channel 0.
pub fn append_background_plane(scores: &Tensor3<f32>) -> Tensor3<f32> {
    let c = scores.channels();
    let mut data = Vec::with_capacity(scores.pixels() * (c + 1));
    for p in 0..scores.pixels() {
        data.push(1.0);
        data.extend_from_slice(scores.pixel(p));
    }
    Tensor3 {
        height: scores.height,
        width: scores.width,
        channels: c + 1,
        data,
    }
}

/// Removes channel 0.
pub fn strip_background_plane(scores: &Tensor3<f32>) -> Result<Tensor3<f32>> {
    if scores.channels() == 0 {
        return Err(Error::dim("no background channel to strip"));
    }
    scores.slice_channels(1..scores.channels())
}

/// Per-pixel softmax across channels with max-subtraction.
pub fn normalize_scores<T: Float + Send + Sync>(scores: &Tensor3<T>) -> Tensor3<T> {
    let c = scores.channels();
    let mut out = scores.clone();
    if c == 0 {
        return out;
    }
    out.data.par_chunks_mut(c).for_each(|px| {
        let max = px.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = 0.0f64;
        let mut exps = [0.0f64; 64];
        let mut heap;
        let buf: &mut [f64] = if c <= exps.len() {
            &mut exps[..c]
        } else {
            heap = vec![0.0; c];
            &mut heap
        };
        for (e, &v) in buf.iter_mut().zip(px.iter()) {
            *e = (v - max).to_f64().unwrap_or(f64::NEG_INFINITY).exp();
            sum += *e;
        }
        for (v, &e) in px.iter_mut().zip(buf.iter()) {
            *v = T::from(e / sum).unwrap_or_else(T::zero);
        }
    });
    out
}

/// Per-pixel index of the largest channel; ties go to the lowest index.
pub fn argmax_mask<T: Float>(scores: &Tensor3<T>) -> LabelMask {
    let labels = (0..scores.pixels())
        .map(|p| argmax(scores.pixel(p)) as u8)
        .collect();
    LabelMask {
        height: scores.height,
        width: scores.width,
        labels,
    }
}

#[inline]
pub(crate) fn argmax<T: Float>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fails unless every pixel of `probs` sums to one within `tol`.
pub fn check_normalized<T: Float>(probs: &Tensor3<T>, tol: f64) -> Result<()> {
    for p in 0..probs.pixels() {
        let sum: f64 = probs
            .pixel(p)
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .sum();
        if !((sum - 1.0).abs() <= tol) {
            return Err(Error::Contract(format!(
                "pixel {p} of the score map sums to {sum}, expected a normalized map"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_rng_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor3<f32> {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        Tensor3::from_fn(h, w, c, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2000) as f32 / 250.0 - 4.0
        })
    }

    #[test]
    fn background_plane_on_single_pixel() {
        let s = Tensor3::from_vec(1, 1, 1, vec![2.0f32]).unwrap();
        let out = append_background_plane(&s);
        assert_eq!(out.dims(), (1, 1, 2));
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn background_plane_adds_one_channel_of_ones() {
        let s = small_rng_tensor(2, 2, 3, 7);
        let out = append_background_plane(&s);
        assert_eq!(out.channels(), 4);
        for p in 0..4 {
            assert_eq!(out.pixel(p)[0], 1.0);
            assert_eq!(&out.pixel(p)[1..], s.pixel(p));
        }
    }

    #[test]
    fn background_plane_round_trip_is_bit_identical() {
        let s = small_rng_tensor(5, 3, 4, 11);
        let first = append_background_plane(&s);
        let again = append_background_plane(&strip_background_plane(&first).unwrap());
        let a: Vec<u32> = first.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = again.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let two = normalize_scores(&Tensor3::from_vec(1, 1, 2, vec![0.0f32, 0.0]).unwrap());
        assert_eq!(two.data(), &[0.5, 0.5]);
        let four = normalize_scores(&Tensor3::from_vec(1, 1, 4, vec![1.0f32; 4]).unwrap());
        assert_eq!(four.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_two_zero() {
        let m = normalize_scores(&Tensor3::from_vec(1, 1, 2, vec![2.0f32, 0.0]).unwrap());
        // e^2 / (e^2 + 1) = 0.880797077977882...
        assert!((f64::from(m.data()[0]) - 0.880_797_077_977_882).abs() < 5e-5);
        assert!((f64::from(m.data()[1]) - 0.119_202_922_022_118).abs() < 5e-5);
        assert_eq!(format!("{:.4}", m.data()[0]), "0.8808");
        assert_eq!(format!("{:.4}", m.data()[1]), "0.1192");
    }

    #[test]
    fn argmax_rules() {
        let m = argmax_mask(&Tensor3::from_vec(1, 1, 2, vec![0.1f32, 0.9]).unwrap());
        assert_eq!(m.labels(), &[1]);
        let tie = argmax_mask(&Tensor3::from_vec(1, 1, 2, vec![0.5f32, 0.5]).unwrap());
        assert_eq!(tie.labels(), &[0]);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let s = small_rng_tensor(8, 8, 4, 3);
        let m = argmax_mask(&s);
        for p in 0..64 {
            let px = s.pixel(p);
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for (i, &v) in px.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            assert_eq!(m.labels()[p] as usize, best);
        }
    }

    #[test]
    fn class_set_always_has_background() {
        let set = ClassSet::parse_list("3, 1").unwrap();
        assert!(set.contains(0));
        assert!(set.contains(1) && set.contains(3) && !set.contains(2));
        assert_eq!(set.channels(), vec![0, 1, 3]);
        assert!(ClassSet::parse_list("1,x").is_err());
        assert!(set.check_channels(3).is_err());
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor3::from_vec(2, 2, 2, vec![0.0f32; 7]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution_and_keeps_argmax(
            vals in proptest::collection::vec(-30.0f32..30.0, 3 * 3 * 5)
        ) {
            let s = Tensor3::from_vec(3, 3, 5, vals).unwrap();
            let m = normalize_scores(&s);
            for p in 0..9 {
                let sum: f64 = m.pixel(p).iter().map(|&v| f64::from(v)).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(m.pixel(p).iter().all(|&v| v >= 0.0));
            }
            prop_assert_eq!(argmax_mask(&m), argmax_mask(&s));
        }
    }
}
