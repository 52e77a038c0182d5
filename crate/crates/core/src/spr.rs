//! Semantics-augmented pixel refinement.
//!
//! Pixel affinities combine an RGB distance term with a per-class score
//! distance term, each scaled by a local standard deviation:
//!
//! ```text
//! k_c(i, j) = -alpha * |x_i - x_j| / sx(i)^2 - (1 - alpha) * |m_i^c - m_j^c| / sc(i)^2
//! ```
//!
//! A softmax over the neighbors of `i` turns the kernel into row-stochastic
//! weights, and the score map is propagated through those weights `T` times.
//! The neighborhood of a pixel is the union of the eight 3x3-window
//! neighbors at every dilation in `radii`, clipped to the image; the pixel
//! itself is not part of it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    argmax, check_normalized, ClassSet, ImageRgb, LabelMask, Tensor3, ValidMask, IGNORE,
};

/// Tolerance on per-pixel sums when a normalized score map is required.
pub const NORMALIZED_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Standard deviation over each pixel's own neighborhood.
    #[default]
    Local,
    /// One standard deviation per channel over the whole image.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SprParams {
    /// Weight of the color term; `1 - alpha` weighs the class term.
    pub alpha: f64,
    pub radii: Vec<usize>,
    pub iterations: usize,
    /// Per-class threshold as a fraction of that class's maximum score.
    pub theta_frac: f64,
    /// Absolute confidence floor for pseudo labels.
    pub floor: f64,
    pub sigma_floor: f64,
    pub sigma_mode: SigmaMode,
    /// Rebuild affinities from the current map before every iteration.
    pub recompute_affinities: bool,
}

impl Default for SprParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            radii: vec![1, 2, 4, 8, 12, 24],
            iterations: 10,
            theta_frac: 0.6,
            floor: 0.2,
            sigma_floor: 1e-4,
            sigma_mode: SigmaMode::Local,
            recompute_affinities: false,
        }
    }
}

impl SprParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        validate_radii(&self.radii)?;
        if !(self.theta_frac > 0.0 && self.theta_frac <= 1.0) {
            return Err(Error::param(format!(
                "theta must lie in (0, 1], got {}",
                self.theta_frac
            )));
        }
        if !(0.0..1.0).contains(&self.floor) {
            return Err(Error::param(format!(
                "floor must lie in [0, 1), got {}",
                self.floor
            )));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::param("sigma floor must be positive"));
        }
        Ok(())
    }
}

fn validate_radii(radii: &[usize]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::param("radius set is empty"));
    }
    if radii[0] == 0 || radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param(format!(
            "radii must be >= 1 and strictly increasing, got {radii:?}"
        )));
    }
    Ok(())
}

/// Neighbor offsets `(d_row, d_col)`: eight per dilation, in radius order.
pub fn neighbor_offsets(radii: &[usize]) -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(radii.len() * 8);
    for &r in radii {
        let r = r as isize;
        for (dr, dc) in [
            (-r, -r),
            (-r, 0),
            (-r, r),
            (0, -r),
            (0, r),
            (r, -r),
            (r, 0),
            (r, r),
        ] {
            out.push((dr, dc));
        }
    }
    out
}

#[inline]
fn shifted(h: usize, w: usize, row: usize, col: usize, (dr, dc): (isize, isize)) -> Option<usize> {
    let r = row as isize + dr;
    let c = col as isize + dc;
    (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then(|| r as usize * w + c as usize)
}

/// Population variance of every channel over each pixel's neighborhood plus itself.
fn local_variance(values: &Tensor3<f32>, offsets: &[(isize, isize)]) -> Vec<f64> {
    let (h, w, ch) = values.dims();
    let mut out = vec![0.0f64; h * w * ch];
    out.par_chunks_mut(ch.max(1))
        .enumerate()
        .for_each(|(p, var)| {
            if ch == 0 {
                return;
            }
            let (row, col) = (p / w, p % w);
            let members: Vec<usize> = std::iter::once(p)
                .chain(offsets.iter().filter_map(|&o| shifted(h, w, row, col, o)))
                .collect();
            let n = members.len() as f64;
            for (k, v) in var.iter_mut().enumerate() {
                let mean = members
                    .iter()
                    .map(|&q| f64::from(values.pixel(q)[k]))
                    .sum::<f64>()
                    / n;
                *v = members
                    .iter()
                    .map(|&q| (f64::from(values.pixel(q)[k]) - mean).powi(2))
                    .sum::<f64>()
                    / n;
            }
        });
    out
}

fn global_variance(values: &Tensor3<f32>) -> Vec<f64> {
    let (h, w, ch) = values.dims();
    let n = (h * w) as f64;
    let var: Vec<f64> = (0..ch)
        .map(|k| {
            let mean = (0..h * w)
                .map(|p| f64::from(values.pixel(p)[k]))
                .sum::<f64>()
                / n;
            (0..h * w)
                .map(|p| (f64::from(values.pixel(p)[k]) - mean).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    (0..h * w).flat_map(|_| var.iter().copied()).collect()
}

fn variance(values: &Tensor3<f32>, offsets: &[(isize, isize)], mode: SigmaMode) -> Vec<f64> {
    match mode {
        SigmaMode::Local => local_variance(values, offsets),
        SigmaMode::Global => global_variance(values),
    }
}

/// Standard deviation of each channel over every pixel's neighborhood
/// (the union of dilated 3x3 windows, the pixel included), floored at `sigma_floor`.
pub fn local_sigma(
    values: &Tensor3<f32>,
    radii: &[usize],
    sigma_floor: f64,
) -> Result<Tensor3<f32>> {
    validate_radii(radii)?;
    let var = local_variance(values, &neighbor_offsets(radii));
    let data = var
        .iter()
        .map(|v| v.sqrt().max(sigma_floor) as f32)
        .collect();
    Tensor3::from_vec(values.height(), values.width(), values.channels(), data)
}

/// Squared color scale per pixel: total variance of the RGB vector, with
/// the standard deviation floored at `sigma_floor`.
fn color_sigma_sq(image: &ImageRgb, offsets: &[(isize, isize)], params: &SprParams) -> Vec<f64> {
    let var = variance(image.as_tensor(), offsets, params.sigma_mode);
    var.chunks(3)
        .map(|v| {
            let s = v.iter().sum::<f64>().sqrt().max(params.sigma_floor);
            s * s
        })
        .collect()
}

#[inline]
fn color_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Softmax of `logits` written to `out` (same length).
fn softmax_into(logits: &[f64], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max).exp() / sum) as f32;
    }
}

/// Normalized local weights: for pixel `i`, class slot `s` and neighbor
/// offset `n`, the weight with which the neighbor's score flows into `i`.
/// Out-of-image offsets carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    height: usize,
    width: usize,
    offsets: Vec<(isize, isize)>,
    classes: Vec<usize>,
    weights: Vec<f32>,
}

impl AffinityField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Channel index of each slot.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn slot_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Weights over [`AffinityField::offsets`] for pixel `p` and slot `slot`.
    pub fn row(&self, p: usize, slot: usize) -> &[f32] {
        let n = self.offsets.len();
        let start = (p * self.classes.len() + slot) * n;
        &self.weights[start..start + n]
    }

    /// Flat index of the neighbor reached from pixel `p` through offset `n`.
    pub fn neighbor(&self, p: usize, n: usize) -> Option<usize> {
        shifted(
            self.height,
            self.width,
            p / self.width,
            p % self.width,
            self.offsets[n],
        )
    }

    pub fn has_neighbors(&self, p: usize) -> bool {
        (0..self.offsets.len()).any(|n| self.neighbor(p, n).is_some())
    }

    /// Copy of one class slice as a standalone single-slot field.
    pub fn slice(&self, slot: usize) -> AffinityField {
        let n = self.offsets.len();
        let mut weights = Vec::with_capacity(self.height * self.width * n);
        for p in 0..self.height * self.width {
            weights.extend_from_slice(self.row(p, slot));
        }
        AffinityField {
            height: self.height,
            width: self.width,
            offsets: self.offsets.clone(),
            classes: vec![self.classes[slot]],
            weights,
        }
    }
}

fn build_field(
    image: &ImageRgb,
    scores: &Tensor3<f32>,
    present: &ClassSet,
    params: &SprParams,
) -> AffinityField {
    let (h, w) = (image.height(), image.width());
    let offsets = neighbor_offsets(&params.radii);
    let classes = present.channels();
    let n_off = offsets.len();
    let n_slots = classes.len();

    let sx2 = color_sigma_sq(image, &offsets, params);
    let score_var = variance(scores, &offsets, params.sigma_mode);
    let ch = scores.channels();
    let alpha = params.alpha;

    let mut weights = vec![0.0f32; h * w * n_slots * n_off];
    weights
        .par_chunks_mut(n_slots * n_off)
        .enumerate()
        .for_each(|(p, rows)| {
            let (row, col) = (p / w, p % w);
            let nbrs: Vec<(usize, usize)> = offsets
                .iter()
                .enumerate()
                .filter_map(|(n, &o)| shifted(h, w, row, col, o).map(|q| (n, q)))
                .collect();
            if nbrs.is_empty() {
                return;
            }
            let color: Vec<f64> = nbrs
                .iter()
                .map(|&(_, q)| color_distance(image.pixel(p), image.pixel(q)) / sx2[p])
                .collect();
            let mut logits = vec![0.0f64; nbrs.len()];
            let mut probs = vec![0.0f32; nbrs.len()];
            for (slot, &c) in classes.iter().enumerate() {
                let sc = score_var[p * ch + c].sqrt().max(params.sigma_floor);
                let sc2 = sc * sc;
                let si = f64::from(scores.pixel(p)[c]);
                for (k, &(_, q)) in nbrs.iter().enumerate() {
                    let class_term = (si - f64::from(scores.pixel(q)[c])).abs() / sc2;
                    logits[k] = -alpha * color[k] - (1.0 - alpha) * class_term;
                }
                softmax_into(&logits, &mut probs);
                let out = &mut rows[slot * n_off..(slot + 1) * n_off];
                for (k, &(n, _)) in nbrs.iter().enumerate() {
                    out[n] = probs[k];
                }
            }
        });

    AffinityField {
        height: h,
        width: w,
        offsets,
        classes,
        weights,
    }
}

fn check_inputs(image: &ImageRgb, scores: &Tensor3<f32>, present: &ClassSet) -> Result<()> {
    if image.height() != scores.height() || image.width() != scores.width() {
        return Err(Error::dim(format!(
            "image {}x{} and scores {}x{} differ",
            image.height(),
            image.width(),
            scores.height(),
            scores.width()
        )));
    }
    if scores.channels() == 0 {
        return Err(Error::dim("score map has no channels"));
    }
    present.check_channels(scores.channels())
}

/// Joint color and class affinities for every present class (background included).
///
/// `scores` must be a normalized probability map.
pub fn compute_affinities(
    image: &ImageRgb,
    scores: &Tensor3<f32>,
    present: &ClassSet,
    params: &SprParams,
) -> Result<AffinityField> {
    params.validate()?;
    check_inputs(image, scores, present)?;
    check_normalized(scores, NORMALIZED_TOL)?;
    Ok(build_field(image, scores, present, params))
}

/// Color-only affinities: the kernel without its class term, one shared slice.
pub fn color_affinities(image: &ImageRgb, params: &SprParams) -> Result<AffinityField> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let offsets = neighbor_offsets(&params.radii);
    let n_off = offsets.len();
    let sx2 = color_sigma_sq(image, &offsets, params);
    let mut weights = vec![0.0f32; h * w * n_off];
    weights
        .par_chunks_mut(n_off)
        .enumerate()
        .for_each(|(p, out)| {
            let (row, col) = (p / w, p % w);
            let nbrs: Vec<(usize, usize)> = offsets
                .iter()
                .enumerate()
                .filter_map(|(n, &o)| shifted(h, w, row, col, o).map(|q| (n, q)))
                .collect();
            if nbrs.is_empty() {
                return;
            }
            let logits: Vec<f64> = nbrs
                .iter()
                .map(|&(_, q)| -(color_distance(image.pixel(p), image.pixel(q)) / sx2[p]))
                .collect();
            let mut probs = vec![0.0f32; nbrs.len()];
            softmax_into(&logits, &mut probs);
            for (k, &(n, _)) in nbrs.iter().enumerate() {
                out[n] = probs[k];
            }
        });
    Ok(AffinityField {
        height: h,
        width: w,
        offsets,
        classes: vec![0],
        weights,
    })
}

/// In-bounds neighbors of every pixel as `(offset slot, flat index)`, in offset order.
fn neighbor_table(field: &AffinityField) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (field.height, field.width);
    (0..h * w)
        .map(|p| {
            field
                .offsets
                .iter()
                .enumerate()
                .filter_map(|(n, &o)| shifted(h, w, p / w, p % w, o).map(|q| (n, q)))
                .collect()
        })
        .collect()
}

/// One synchronous propagation step for the given `(channel, slot)` pairs.
fn propagate(
    cur: &Tensor3<f32>,
    field: &AffinityField,
    table: &[Vec<(usize, usize)>],
    pairs: &[(usize, usize)],
) -> Tensor3<f32> {
    let ch = cur.channels();
    let src = cur.data();
    let mut next = cur.clone();
    next.data_mut()
        .par_chunks_mut(ch)
        .enumerate()
        .for_each(|(p, out)| {
            let nbrs = &table[p];
            if nbrs.is_empty() {
                return;
            }
            for &(c, slot) in pairs {
                let weights = field.row(p, slot);
                let mut acc = 0.0f64;
                for &(n, q) in nbrs {
                    acc += f64::from(weights[n]) * f64::from(src[q * ch + c]);
                }
                out[c] = acc as f32;
            }
        });
    next
}

fn check_field(scores: &Tensor3<f32>, field: &AffinityField) -> Result<()> {
    if scores.height() != field.height || scores.width() != field.width {
        return Err(Error::dim(format!(
            "affinity field {}x{} does not match scores {}x{}",
            field.height,
            field.width,
            scores.height(),
            scores.width()
        )));
    }
    Ok(())
}

/// Propagates the present channels of `scores` through `field` for `iterations` sweeps.
///
/// Each sweep reads the previous map and writes a fresh one. Channels of
/// absent classes are returned untouched.
pub fn refine(
    scores: &Tensor3<f32>,
    field: &AffinityField,
    present: &ClassSet,
    iterations: usize,
) -> Result<Tensor3<f32>> {
    check_field(scores, field)?;
    present.check_channels(scores.channels())?;
    let pairs = present
        .channels()
        .into_iter()
        .map(|c| {
            field.slot_of(c).map(|s| (c, s)).ok_or_else(|| {
                Error::Contract(format!("affinity field has no slice for class {c}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = neighbor_table(field);
    let mut cur = scores.clone();
    for _ in 0..iterations {
        cur = propagate(&cur, field, &table, &pairs);
    }
    Ok(cur)
}

/// Like [`refine`] but with a signed iteration count, rejecting negatives.
pub fn refine_signed(
    scores: &Tensor3<f32>,
    field: &AffinityField,
    present: &ClassSet,
    iterations: i64,
) -> Result<Tensor3<f32>> {
    let t = usize::try_from(iterations)
        .map_err(|_| Error::param(format!("iteration count must be >= 0, got {iterations}")))?;
    refine(scores, field, present, t)
}

/// Propagates every channel through a single shared slice (color-only refinement).
pub fn refine_shared(
    scores: &Tensor3<f32>,
    field: &AffinityField,
    iterations: usize,
) -> Result<Tensor3<f32>> {
    check_field(scores, field)?;
    let pairs: Vec<(usize, usize)> = (0..scores.channels()).map(|c| (c, 0)).collect();
    let table = neighbor_table(field);
    let mut cur = scores.clone();
    for _ in 0..iterations {
        cur = propagate(&cur, field, &table, &pairs);
    }
    Ok(cur)
}

/// Full refinement of a normalized score map.
pub fn spr(
    image: &ImageRgb,
    scores: &Tensor3<f32>,
    present: &ClassSet,
    params: &SprParams,
) -> Result<Tensor3<f32>> {
    if !params.recompute_affinities {
        let field = compute_affinities(image, scores, present, params)?;
        return refine(scores, &field, present, params.iterations);
    }
    params.validate()?;
    check_inputs(image, scores, present)?;
    check_normalized(scores, NORMALIZED_TOL)?;
    let mut cur = scores.clone();
    for _ in 0..params.iterations {
        // per-class weights do not preserve pixel sums, so later rounds skip the sum check
        let field = build_field(image, &cur, present, params);
        cur = refine(&cur, &field, present, 1)?;
    }
    Ok(cur)
}

/// Pseudo labels from a refined map.
///
/// Each pixel takes its argmax class if that class is present, its score
/// reaches `theta_frac` times the class's maximum over the image, and it
/// reaches `floor`. Every other pixel is [`IGNORE`].
pub fn pseudo_mask(
    refined: &Tensor3<f32>,
    present: &ClassSet,
    params: &SprParams,
) -> Result<(LabelMask, ValidMask)> {
    params.validate()?;
    if present.num_objects() == 0 {
        return Err(Error::param("no object class is present"));
    }
    let ch = refined.channels();
    if ch == 0 || ch > usize::from(IGNORE) {
        return Err(Error::dim(format!("cannot label a map with {ch} channels")));
    }
    present.check_channels(ch)?;

    let mut thresholds = vec![f64::INFINITY; ch];
    for c in present.channels() {
        let max = (0..refined.pixels())
            .map(|p| f64::from(refined.pixel(p)[c]))
            .fold(f64::NEG_INFINITY, f64::max);
        thresholds[c] = params.theta_frac * max;
    }
    let labels = (0..refined.pixels())
        .map(|p| {
            let px = refined.pixel(p);
            let best = argmax(px);
            let score = f64::from(px[best]);
            if present.contains(best) && score >= thresholds[best] && score >= params.floor {
                best as u8
            } else {
                IGNORE
            }
        })
        .collect();
    let mask = LabelMask::from_vec(refined.height(), refined.width(), labels)?;
    let valid = ValidMask::from_labels(&mask);
    Ok((mask, valid))
}
