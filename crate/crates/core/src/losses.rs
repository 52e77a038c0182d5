//! Weak-supervision objective: image-level classification through
//! normalized global weighted pooling, plus pixel-wise and region-wise
//! losses against pseudo masks.
//!
//! Every loss returns its value together with the analytic gradient.
//! Classification and total losses differentiate with respect to the raw
//! score map `S`; pixel and region losses with respect to the probability
//! map they are given. All arithmetic runs in `f64` regardless of the
//! tensor element type.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassSet, LabelMask, Tensor3, ValidMask, IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    /// Stabilizer in the pooling denominator.
    pub epsilon: f64,
    /// Half-width of the square window used by the region loss.
    pub region_radius: usize,
    /// Hinge margin for boundary pairs.
    pub margin: f64,
    /// Probabilities are floored here before any logarithm.
    pub kl_floor: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            region_radius: 3,
            margin: 3.0,
            kl_floor: 1e-8,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be positive"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::param("margin must be positive"));
        }
        if self.region_radius == 0 {
            return Err(Error::param("region radius must be at least 1"));
        }
        if !(self.kl_floor > 0.0 && self.kl_floor < 1.0) {
            return Err(Error::param("kl floor must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Image-level tags for object classes `1..=K`; background is not tagged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageLabels {
    y: Vec<bool>,
}

impl ImageLabels {
    /// `y[k]` tags class `k + 1`.
    pub fn new(y: Vec<bool>) -> Self {
        Self { y }
    }

    pub fn from_present(present: &ClassSet, num_objects: usize) -> Result<Self> {
        present.check_channels(num_objects + 1)?;
        Ok(Self {
            y: (1..=num_objects).map(|c| present.contains(c)).collect(),
        })
    }

    pub fn num_objects(&self) -> usize {
        self.y.len()
    }

    pub fn tagged(&self, class: usize) -> bool {
        class >= 1 && self.y.get(class - 1).copied().unwrap_or(false)
    }
}

/// Loss components and the gradient of `total` with respect to the score map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T = f32> {
    pub cls: f64,
    pub pixel: f64,
    pub region: f64,
    pub lambda: f64,
    pub mask: f64,
    pub total: f64,
    pub grad_scores: Tensor3<T>,
}

impl<T> LossReport<T> {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "cls": self.cls,
            "pixel": self.pixel,
            "region": self.region,
            "lambda": self.lambda,
            "mask": self.mask,
            "total": self.total,
        })
    }
}

fn to_f64<T: Float>(t: &Tensor3<T>) -> Vec<f64> {
    t.data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect()
}

fn from_f64<T: Float>(like: &Tensor3<T>, data: Vec<f64>) -> Tensor3<T> {
    let data = data
        .into_iter()
        .map(|v| T::from(v).unwrap_or_else(T::nan))
        .collect();
    Tensor3::from_vec(like.height(), like.width(), like.channels(), data).expect("same layout")
}

fn softmax64(s: &[f64], c: usize) -> Vec<f64> {
    let mut m = vec![0.0; s.len()];
    for (px, out) in s.chunks(c).zip(m.chunks_mut(c)) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(px) {
            *o = (v - max).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }
    m
}

/// Pulls a probability-space gradient back through the per-pixel softmax.
fn softmax_backward(m: &[f64], g_m: &[f64], c: usize) -> Vec<f64> {
    let mut g = vec![0.0; m.len()];
    for ((mp, gp), out) in m.chunks(c).zip(g_m.chunks(c)).zip(g.chunks_mut(c)) {
        let dot: f64 = mp.iter().zip(gp).map(|(a, b)| a * b).sum();
        for k in 0..c {
            out[k] = mp[k] * (gp[k] - dot);
        }
    }
    g
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax-attended pooling of each channel: `v_c = sum_i m_ic s_ic / (eps + sum_i m_ic)`.
pub fn gwp_class_scores<T: Float>(scores: &Tensor3<T>, params: &LossParams) -> Vec<f64> {
    let c = scores.channels();
    let s = to_f64(scores);
    let m = softmax64(&s, c);
    pooled(&s, &m, c, params.epsilon).0
}

/// Returns `(v, denominators)`.
fn pooled(s: &[f64], m: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut num = vec![0.0; c];
    let mut den = vec![eps; c];
    for (sp, mp) in s.chunks(c).zip(m.chunks(c)) {
        for k in 0..c {
            num[k] += mp[k] * sp[k];
            den[k] += mp[k];
        }
    }
    let v = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    (v, den)
}

fn classification_raw(
    s: &[f64],
    c: usize,
    labels: &ImageLabels,
    params: &LossParams,
) -> (f64, Vec<f64>) {
    let k = (c - 1) as f64;
    let m = softmax64(s, c);
    let (v, den) = pooled(s, &m, c, params.epsilon);

    let mut loss = 0.0;
    let mut g_v = vec![0.0; c];
    for cls in 1..c {
        let y = labels.tagged(cls);
        // -log sigma(v) = softplus(-v), -log(1 - sigma(v)) = softplus(v)
        loss += if y {
            softplus(-v[cls])
        } else {
            softplus(v[cls])
        };
        g_v[cls] = (sigmoid(v[cls]) - if y { 1.0 } else { 0.0 }) / k;
    }
    loss /= k;

    let mut g_m = vec![0.0; s.len()];
    let mut g_direct = vec![0.0; s.len()];
    for (i, (sp, mp)) in s.chunks(c).zip(m.chunks(c)).enumerate() {
        for cls in 1..c {
            g_m[i * c + cls] = g_v[cls] * (sp[cls] - v[cls]) / den[cls];
            g_direct[i * c + cls] = g_v[cls] * mp[cls] / den[cls];
        }
    }
    let mut grad = softmax_backward(&m, &g_m, c);
    grad.iter_mut().zip(&g_direct).for_each(|(g, d)| *g += d);
    (loss, grad)
}

/// Binary cross-entropy between `sigmoid(v_c)` and the image tags, averaged over object classes.
pub fn classification_loss<T: Float>(
    scores: &Tensor3<T>,
    labels: &ImageLabels,
    params: &LossParams,
) -> Result<(f64, Tensor3<T>)> {
    params.validate()?;
    let c = scores.channels();
    if c < 2 {
        return Err(Error::dim(
            "need a background channel and at least one object class",
        ));
    }
    if labels.num_objects() != c - 1 {
        return Err(Error::dim(format!(
            "{} image tags for a map with {} object channels",
            labels.num_objects(),
            c - 1
        )));
    }
    let (loss, grad) = classification_raw(&to_f64(scores), c, labels, params);
    Ok((loss, from_f64(scores, grad)))
}

/// Labeled pixels, checked against the map geometry.
fn supervised_pixels<T: Float>(
    probs: &Tensor3<T>,
    pseudo: &LabelMask,
    valid: &ValidMask,
) -> Result<Vec<Option<usize>>> {
    let (h, w, c) = probs.dims();
    if pseudo.height() != h || pseudo.width() != w || valid.height() != h || valid.width() != w {
        return Err(Error::dim(
            "pseudo mask, valid mask and probabilities must share a shape",
        ));
    }
    pseudo
        .labels()
        .iter()
        .zip(valid.bits())
        .map(|(&l, &ok)| match (ok, l) {
            (false, _) => Ok(None),
            (true, IGNORE) => Err(Error::Contract(
                "valid pixel carries the ignore label".into(),
            )),
            (true, l) if usize::from(l) >= c => Err(Error::Contract(format!(
                "pseudo label {l} out of range for {c} channels"
            ))),
            (true, l) => Ok(Some(usize::from(l))),
        })
        .collect()
}

fn pixel_raw(m: &[f64], c: usize, labels: &[Option<usize>], floor: f64) -> (f64, Vec<f64>) {
    let mut counts = vec![0usize; c];
    for l in labels.iter().flatten() {
        counts[*l] += 1;
    }
    let n_classes = counts.iter().filter(|&&n| n > 0).count();
    let mut grad = vec![0.0; m.len()];
    if n_classes == 0 {
        return (0.0, grad);
    }
    let mut per_class = vec![0.0; c];
    for (i, l) in labels.iter().enumerate() {
        let Some(l) = *l else { continue };
        let p = m[i * c + l];
        per_class[l] += -p.max(floor).ln();
        if p > floor {
            grad[i * c + l] = -1.0 / (n_classes as f64 * counts[l] as f64 * p);
        }
    }
    let loss = per_class
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .sum::<f64>()
        / n_classes as f64;
    (loss, grad)
}

/// Class-balanced cross-entropy over valid pixels: mean of `-log m` within
/// each pseudo class, then mean over the classes that occur.
pub fn pixel_loss<T: Float>(
    probs: &Tensor3<T>,
    pseudo: &LabelMask,
    valid: &ValidMask,
    params: &LossParams,
) -> Result<(f64, Tensor3<T>)> {
    params.validate()?;
    let labels = supervised_pixels(probs, pseudo, valid)?;
    let (loss, grad) = pixel_raw(&to_f64(probs), probs.channels(), &labels, params.kl_floor);
    Ok((loss, from_f64(probs, grad)))
}

/// `KL(p || q)` over floored probabilities, accumulating `coef * dKL` into the two gradients.
fn kl_with_grad(
    p: &[f64],
    q: &[f64],
    floor: f64,
    coef: f64,
    g_p: &mut [f64],
    g_q: &mut [f64],
) -> f64 {
    let mut kl = 0.0;
    for k in 0..p.len() {
        let pf = p[k].max(floor);
        let qf = q[k].max(floor);
        kl += pf * (pf.ln() - qf.ln());
        if coef != 0.0 {
            if p[k] > floor {
                g_p[k] += coef * (pf.ln() - qf.ln() + 1.0);
            }
            if q[k] > floor {
                g_q[k] -= coef * pf / qf;
            }
        }
    }
    kl
}

fn kl(p: &[f64], q: &[f64], floor: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(floor), b.max(floor));
            a * (a.ln() - b.ln())
        })
        .sum()
}

fn region_raw(
    m: &[f64],
    h: usize,
    w: usize,
    c: usize,
    labels: &[Option<usize>],
    params: &LossParams,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; m.len()];
    let n_valid = labels.iter().flatten().count();
    if n_valid == 0 {
        return (0.0, grad);
    }
    let r = params.region_radius as isize;
    let gamma = params.margin;
    let mut loss = 0.0;
    let mut window = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for i in 0..h * w {
        let Some(li) = labels[i] else { continue };
        let (row, col) = ((i / w) as isize, (i % w) as isize);
        window.clear();
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (row + dr, col + dc);
                if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if let Some(lj) = labels[j] {
                    window.push((j, lj == li));
                }
            }
        }
        if window.is_empty() {
            continue;
        }
        let scale = 1.0 / (n_valid as f64 * window.len() as f64);
        let mut acc = 0.0;
        for &(j, same) in &window {
            let (mi, mj) = (&m[i * c..(i + 1) * c], &m[j * c..(j + 1) * c]);
            let d = kl(mj, mi, params.kl_floor);
            let coef = if same {
                acc += d;
                scale
            } else if d < gamma {
                acc += gamma - d;
                -scale
            } else {
                0.0
            };
            if coef != 0.0 {
                let (gi, gj) = split_pair(&mut grad, i, j, c);
                kl_with_grad(mj, mi, params.kl_floor, coef, gj, gi);
            }
        }
        loss += acc / window.len() as f64;
    }
    (loss / n_valid as f64, grad)
}

/// Disjoint mutable views of pixel `i` and pixel `j` (`i != j`).
fn split_pair(g: &mut [f64], i: usize, j: usize, c: usize) -> (&mut [f64], &mut [f64]) {
    if i < j {
        let (a, b) = g.split_at_mut(j * c);
        (&mut a[i * c..(i + 1) * c], &mut b[..c])
    } else {
        let (a, b) = g.split_at_mut(i * c);
        (&mut b[..c], &mut a[j * c..(j + 1) * c])
    }
}

/// Structure-aware loss over square windows of radius `region_radius`.
///
/// Neighbors sharing the center's pseudo label are pulled together by
/// `KL(m_j || m_i)`; neighbors with a different label are pushed apart by
/// `max(0, margin - KL(m_j || m_i))`. Unlabeled neighbors and the center
/// itself are outside the window.
pub fn region_loss<T: Float>(
    probs: &Tensor3<T>,
    pseudo: &LabelMask,
    valid: &ValidMask,
    params: &LossParams,
) -> Result<(f64, Tensor3<T>)> {
    params.validate()?;
    let labels = supervised_pixels(probs, pseudo, valid)?;
    let (h, w, c) = probs.dims();
    let (loss, grad) = region_raw(&to_f64(probs), h, w, c, &labels, params);
    Ok((loss, from_f64(probs, grad)))
}

/// Linear ramp from 0 at step 0 to 1 at `total_steps`.
pub fn lambda_schedule(step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::param("total steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::param(format!(
            "step {step} exceeds total {total_steps}"
        )));
    }
    Ok(step as f64 / total_steps as f64)
}

/// `cls + pixel + lambda * region` with the gradient taken all the way back to `scores`.
///
/// The pixel and region terms are evaluated on `softmax(scores)`.
pub fn total_loss<T: Float>(
    scores: &Tensor3<T>,
    labels: &ImageLabels,
    pseudo: &LabelMask,
    valid: &ValidMask,
    lambda: f64,
    params: &LossParams,
) -> Result<LossReport<T>> {
    params.validate()?;
    if !lambda.is_finite() {
        return Err(Error::param("lambda must be finite"));
    }
    let (cls, g_cls) = classification_loss(scores, labels, params)?;
    let (h, w, c) = scores.dims();
    let sup = supervised_pixels(scores, pseudo, valid)?;
    let s = to_f64(scores);
    let m = softmax64(&s, c);
    let (pixel, g_pixel) = pixel_raw(&m, c, &sup, params.kl_floor);
    let (region, g_region) = region_raw(&m, h, w, c, &sup, params);
    let g_m: Vec<f64> = g_pixel
        .iter()
        .zip(&g_region)
        .map(|(a, b)| a + lambda * b)
        .collect();
    let mut grad = softmax_backward(&m, &g_m, c);
    grad.iter_mut()
        .zip(g_cls.data())
        .for_each(|(g, d)| *g += d.to_f64().unwrap_or(f64::NAN));
    let mask = pixel + lambda * region;
    Ok(LossReport {
        cls,
        pixel,
        region,
        lambda,
        mask,
        total: cls + mask,
        grad_scores: from_f64(scores, grad),
    })
}
