//! Synthetic scenes and degraded score seeds for desk-scale experiments.
//!
//! Scenes use three object classes (`1..=3`) plus background, so score maps
//! have [`SYNTH_CHANNELS`] channels. Every random draw comes from a
//! counter-based stream, which makes a scene a pure function of
//! `(kind, h, w, seed)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize_scores, ClassSet, ImageRgb, LabelMask, Tensor3};
use crate::metrics::ConfusionMatrix;
use crate::rng::{pixel_stream, DOMAIN_SYNTH};
use crate::spr::{pseudo_mask, spr, SprParams};

/// Channels of a synthetic score map: background and three objects.
pub const SYNTH_CHANNELS: usize = 4;

/// Stream ids past any pixel index, reserved for scene-level draws.
const LAYOUT_STREAM: u64 = u64::MAX;
const DEGRADE_STREAM_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    /// Textured objects on a textured background.
    Shapes,
    /// One object painted in two distinct colors on a plain background; one
    /// of the two is close to the background color.
    TwoToneObject,
    /// Flat shapes with salt-and-pepper speckle.
    EdgeNoise,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Self::Shapes),
            "two-tone-object" => Ok(Self::TwoToneObject),
            "edge-noise" => Ok(Self::EdgeNoise),
            other => Err(Error::param(format!(
                "unknown scene kind '{other}' (expected shapes, two-tone-object or edge-noise)"
            ))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shapes => "shapes",
            Self::TwoToneObject => "two-tone-object",
            Self::EdgeNoise => "edge-noise",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageRgb,
    pub gt: LabelMask,
    pub present: ClassSet,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { r0: f32, c0: f32, r1: f32, c1: f32 },
    Ellipse { cr: f32, cc: f32, rr: f32, rc: f32 },
}

impl Shape {
    fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as f32 + 0.5, col as f32 + 0.5);
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => r >= r0 && r < r1 && c >= c0 && c < c1,
            Shape::Ellipse { cr, cc, rr, rc } => {
                let (dr, dc) = ((r - cr) / rr, (c - cc) / rc);
                dr * dr + dc * dc <= 1.0
            }
        }
    }

    fn random(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let (hf, wf) = (h as f32, w as f32);
        let rr = rng.random_range(0.15..0.28) * hf;
        let rc = rng.random_range(0.15..0.28) * wf;
        let cr = rng.random_range(rr..hf - rr);
        let cc = rng.random_range(rc..wf - rc);
        if rng.random_bool(0.5) {
            Shape::Rect {
                r0: cr - rr,
                c0: cc - rc,
                r1: cr + rr,
                c1: cc + rc,
            }
        } else {
            Shape::Ellipse { cr, cc, rr, rc }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

/// A color at least `gap` away from every color in `taken`.
fn distinct_color(taken: &[[f32; 3]], gap: f32, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut best = random_color(rng);
    for _ in 0..64 {
        if taken.iter().all(|&t| color_distance(t, best) >= gap) {
            break;
        }
        best = random_color(rng);
    }
    best
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

pub fn synth(kind: SceneKind, height: usize, width: usize, seed: u64) -> Result<SyntheticScene> {
    if height < 16 || width < 16 {
        return Err(Error::param(format!(
            "synthetic scenes need at least 16x16 pixels, got {height}x{width}"
        )));
    }
    let mut layout = pixel_stream(seed, DOMAIN_SYNTH, LAYOUT_STREAM);
    match kind {
        SceneKind::Shapes => Ok(shapes(height, width, seed, &mut layout, true)),
        SceneKind::EdgeNoise => Ok(shapes(height, width, seed, &mut layout, false)),
        SceneKind::TwoToneObject => Ok(two_tone(height, width, seed, &mut layout)),
    }
}

/// Parses `kind` and builds the scene.
pub fn synth_named(kind: &str, height: usize, width: usize, seed: u64) -> Result<SyntheticScene> {
    synth(kind.parse()?, height, width, seed)
}

fn shapes(
    h: usize,
    w: usize,
    seed: u64,
    layout: &mut ChaCha8Rng,
    textured: bool,
) -> SyntheticScene {
    let n_objects = layout.random_range(1..=3usize);
    let bg = random_color(layout);
    let mut taken = vec![bg];
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = layout.random_range(1..SYNTH_CHANNELS) as u8;
        let color = distinct_color(&taken, 0.45, layout);
        taken.push(color);
        // stripe period and orientation of the object's texture
        let period = layout.random_range(2..5usize);
        let horizontal = layout.random_bool(0.5);
        objects.push((
            Shape::random(h, w, layout),
            class,
            color,
            period,
            horizontal,
        ));
    }
    let bg_period = layout.random_range(2..4usize);

    let mut labels = vec![0u8; h * w];
    let mut data = vec![0.0f32; h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let mut px_rng = pixel_stream(seed, DOMAIN_SYNTH, p as u64);
            let mut color = bg;
            let mut stripe = (row / bg_period + col / bg_period) % 2 == 0;
            // later objects occlude earlier ones
            for &(shape, class, c, period, horizontal) in &objects {
                if shape.contains(row, col) {
                    labels[p] = class;
                    color = c;
                    stripe = if horizontal {
                        row / period % 2 == 0
                    } else {
                        col / period % 2 == 0
                    };
                }
            }
            let out = &mut data[p * 3..p * 3 + 3];
            if textured {
                let shade = if stripe { 0.12 } else { -0.12 };
                let jitter: f32 = px_rng.random_range(-0.04..0.04);
                for k in 0..3 {
                    out[k] = clamp01(color[k] + shade + jitter);
                }
            } else if px_rng.random_bool(0.05) {
                let v = if px_rng.random_bool(0.5) { 1.0 } else { 0.0 };
                out.fill(v);
            } else {
                out.copy_from_slice(&color);
            }
        }
    }
    let present = ClassSet::new(labels.iter().filter(|&&l| l > 0).map(|&l| usize::from(l)));
    SyntheticScene {
        image: ImageRgb::new(Tensor3::from_vec(h, w, 3, data).expect("sized")).expect("clamped"),
        gt: LabelMask::from_vec(h, w, labels).expect("sized"),
        present,
    }
}

fn two_tone(h: usize, w: usize, seed: u64, layout: &mut ChaCha8Rng) -> SyntheticScene {
    let class = layout.random_range(1..SYNTH_CHANNELS) as u8;
    let (hf, wf) = (h as f32, w as f32);
    let rr = layout.random_range(0.25..0.35) * hf;
    let rc = layout.random_range(0.25..0.35) * wf;
    let cr = layout.random_range(rr + 1.0..hf - rr - 1.0);
    let cc = layout.random_range(rc + 1.0..wf - rc - 1.0);
    let shape = Shape::Ellipse { cr, cc, rr, rc };
    let split_rows = layout.random_bool(0.5);
    let bg = random_color(layout);
    // the second tone sits close to the background, so color alone barely separates them
    let mut tone_b = bg;
    for v in tone_b.iter_mut() {
        let step = layout.random_range(0.05..0.09);
        *v = if *v > 0.5 { *v - step } else { *v + step };
    }
    let tone_a = distinct_color(&[bg, tone_b], 0.55, layout);

    let mut labels = vec![0u8; h * w];
    let mut data = vec![0.0f32; h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let mut px_rng = pixel_stream(seed, DOMAIN_SYNTH, p as u64);
            let color = if shape.contains(row, col) {
                labels[p] = class;
                let first = if split_rows {
                    (row as f32 + 0.5) < cr
                } else {
                    (col as f32 + 0.5) < cc
                };
                if first {
                    tone_a
                } else {
                    tone_b
                }
            } else {
                bg
            };
            for k in 0..3 {
                data[p * 3 + k] = clamp01(color[k] + px_rng.random_range(-0.03..0.03));
            }
        }
    }
    SyntheticScene {
        image: ImageRgb::new(Tensor3::from_vec(h, w, 3, data).expect("sized")).expect("clamped"),
        gt: LabelMask::from_vec(h, w, labels).expect("sized"),
        present: ClassSet::new([usize::from(class)]),
    }
}

/// Controlled corruption of a one-hot ground-truth map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Degradation {
    /// Box-blur radius applied to the one-hot planes.
    pub blur: usize,
    /// Amplitude of uniform logit noise.
    pub noise: f32,
    /// Logit scale before the softmax.
    pub gain: f32,
}

impl Default for Degradation {
    fn default() -> Self {
        Self {
            blur: 3,
            noise: 0.5,
            gain: 2.0,
        }
    }
}

fn box_blur(plane: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return plane.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0f32; h * w];
    for row in 0..h {
        for col in 0..w {
            let (mut sum, mut n) = (0.0f32, 0u32);
            for dr in -r..=r {
                for dc in -r..=r {
                    let (rr, cc) = (row as isize + dr, col as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        sum += plane[rr as usize * w + cc as usize];
                        n += 1;
                    }
                }
            }
            out[row * w + col] = sum / n as f32;
        }
    }
    out
}

/// Normalized score seed: one-hot `gt`, blurred, noised, scaled, then softmaxed.
///
/// `noise = 0` and `blur = 0` give a sharpened copy of the ground truth.
pub fn degrade_scores(
    gt: &LabelMask,
    channels: usize,
    degradation: &Degradation,
    seed: u64,
) -> Result<Tensor3<f32>> {
    gt.check_classes(channels)?;
    let (h, w) = (gt.height(), gt.width());
    let mut logits = Tensor3::zeros(h, w, channels);
    for c in 0..channels {
        let onehot: Vec<f32> = gt
            .labels()
            .iter()
            .map(|&l| if usize::from(l) == c { 1.0 } else { 0.0 })
            .collect();
        let blurred = box_blur(&onehot, h, w, degradation.blur);
        for (p, v) in blurred.into_iter().enumerate() {
            logits.data_mut()[p * channels + c] = v;
        }
    }
    if degradation.noise > 0.0 {
        for p in 0..h * w {
            let mut rng = pixel_stream(seed, DOMAIN_SYNTH, DEGRADE_STREAM_BASE + p as u64);
            for v in logits.pixel_mut(p) {
                *v += rng.random_range(-degradation.noise..degradation.noise);
            }
        }
    }
    let gain = degradation.gain;
    Ok(normalize_scores(&logits.map(|v| v * gain)))
}

/// Exact one-hot probabilities of `gt` (a perfect score seed).
pub fn one_hot_scores(gt: &LabelMask, channels: usize) -> Result<Tensor3<f32>> {
    gt.check_classes(channels)?;
    if gt.labels().contains(&crate::grid::IGNORE) {
        return Err(Error::Contract(
            "one-hot seed needs a fully labelled mask".into(),
        ));
    }
    Ok(Tensor3::from_fn(
        gt.height(),
        gt.width(),
        channels,
        |r, c, k| {
            if usize::from(gt.get(r, c)) == k {
                1.0
            } else {
                0.0
            }
        },
    ))
}

/// Pseudo-mask mIoU per alpha, aggregated over all scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub alphas: Vec<f64>,
    pub miou: Vec<f64>,
}

impl AlphaTable {
    /// Two rows: the alphas, then the mIoU values (in percent).
    pub fn to_rows(&self) -> String {
        let head: Vec<String> = self.alphas.iter().map(|a| format!("{a:.2}")).collect();
        let vals: Vec<String> = self
            .miou
            .iter()
            .map(|m| format!("{:.2}", m * 100.0))
            .collect();
        format!("alpha\t{}\nmIoU\t{}\n", head.join("\t"), vals.join("\t"))
    }
}

/// Runs refinement and pseudo-labelling on every scene for every alpha.
///
/// Pixels left unlabelled by the pseudo mask count as background.
pub fn alpha_sweep(
    scenes: &[SyntheticScene],
    seeds: &[Tensor3<f32>],
    alphas: &[f64],
    params: &SprParams,
) -> Result<AlphaTable> {
    if scenes.is_empty() {
        return Err(Error::param("alpha sweep needs at least one scene"));
    }
    if alphas.is_empty() {
        return Err(Error::param("alpha sweep needs at least one alpha"));
    }
    if seeds.len() != scenes.len() {
        return Err(Error::dim(format!(
            "{} score seeds for {} scenes",
            seeds.len(),
            scenes.len()
        )));
    }
    let mut miou = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let p = SprParams {
            alpha,
            ..params.clone()
        };
        let mut cm = ConfusionMatrix::new(seeds[0].channels());
        for (scene, seed) in scenes.iter().zip(seeds) {
            let refined = spr(&scene.image, seed, &scene.present, &p)?;
            let (mask, _) = pseudo_mask(&refined, &scene.present, &p)?;
            cm.accumulate(&mask, &scene.gt)?;
        }
        miou.push(cm.miou()?.mean);
    }
    Ok(AlphaTable {
        alphas: alphas.to_vec(),
        miou,
    })
}
