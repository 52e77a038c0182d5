//! Texture suppression through self-information.
//!
//! Each pixel's surrounding patch is compared against a handful of patches
//! sampled from its Manhattan neighborhood. A Gaussian kernel density
//! estimate over those samples gives the patch's self-information: repetitive
//! texture scores low, unique structure (edges, silhouettes) scores high.
//! Drop probabilities follow a Boltzmann weighting `exp(-I / tau)`, so
//! low-information pixels are zeroed more often.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Tensor3;
use crate::rng::{pixel_stream, DOMAIN_DROP_MASK, DOMAIN_PATCH_SAMPLING};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmParams {
    /// Side of the square patch compared by the density estimate (odd).
    pub patch_side: usize,
    /// Manhattan radius from which neighbor patch centers are drawn.
    pub neighbor_radius: usize,
    pub n_samples: usize,
    pub bandwidth: f64,
    pub temperature: f64,
    /// Mean drop probability after normalization.
    pub target_rate: f64,
    pub seed: u64,
}

impl Default for ScmParams {
    fn default() -> Self {
        Self {
            patch_side: 3,
            neighbor_radius: 7,
            n_samples: 9,
            bandwidth: 1.0,
            temperature: 0.5,
            target_rate: 0.25,
            seed: 0,
        }
    }
}

impl ScmParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.patch_side.is_multiple_of(2) {
            return Err(Error::param(format!(
                "patch side must be odd and positive, got {}",
                self.patch_side
            )));
        }
        if self.neighbor_radius == 0 {
            return Err(Error::param("neighbor radius must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::param("need at least one neighbor sample"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::param(format!(
                "bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.target_rate) {
            return Err(Error::param(format!(
                "target rate must lie in [0, 1], got {}",
                self.target_rate
            )));
        }
        Ok(())
    }

    /// `ln(sqrt(2 pi) h)`: the self-information of a patch identical to all its samples.
    pub fn information_floor(&self) -> f64 {
        ((2.0 * std::f64::consts::PI).sqrt() * self.bandwidth).ln()
    }
}

/// Self-information per pixel, in nats.
///
/// Values are kept in `f64`; [`InfoMap::to_tensor`] narrows them for storage.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl InfoMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("info map length does not match its dimensions"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(
                "info map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn to_tensor(&self) -> Tensor3<f32> {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Tensor3::from_vec(self.height, self.width, 1, data).expect("sized from map")
    }

    pub fn from_tensor(t: &Tensor3<f32>) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::dim(format!(
                "info map must have one channel, got {}",
                t.channels()
            )));
        }
        Self::new(
            t.height(),
            t.width(),
            t.data().iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropProbMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl DropProbMap {
    pub fn to_tensor(&self) -> Tensor3<f32> {
        Tensor3::from_vec(self.height, self.width, 1, self.values.clone()).expect("sized from map")
    }

    pub fn from_tensor(t: &Tensor3<f32>) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::dim("drop probability map must have one channel"));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "drop probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height: t.height(),
            width: t.width(),
            values: t.data().to_vec(),
        })
    }
}

/// `true` marks a dropped pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl DropMask {
    pub fn dropped(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Offsets with Manhattan length in `1..=radius`, in a fixed scan order.
fn manhattan_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        let rem = r - dr.abs();
        for dc in -rem..=rem {
            if dr != 0 || dc != 0 {
                out.push((dr, dc));
            }
        }
    }
    out
}

fn sample_neighbors(
    offsets: &[(isize, isize)],
    height: usize,
    width: usize,
    row: usize,
    col: usize,
    params: &ScmParams,
) -> Vec<(usize, usize)> {
    let candidates: Vec<(usize, usize)> = offsets
        .iter()
        .filter_map(|&(dr, dc)| {
            let r = row as isize + dr;
            let c = col as isize + dc;
            (r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width)
                .then_some((r as usize, c as usize))
        })
        .collect();
    if candidates.len() <= params.n_samples {
        return candidates;
    }
    let mut rng = pixel_stream(
        params.seed,
        DOMAIN_PATCH_SAMPLING,
        (row * width + col) as u64,
    );
    rand::seq::index::sample(&mut rng, candidates.len(), params.n_samples)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Centers of the neighbor patches drawn for pixel `(row, col)`.
///
/// Uniform without replacement over in-bounds offsets; when fewer
/// candidates than `n_samples` exist, all of them are returned.
pub fn sampled_neighbors(
    height: usize,
    width: usize,
    row: usize,
    col: usize,
    params: &ScmParams,
) -> Vec<(usize, usize)> {
    sample_neighbors(
        &manhattan_offsets(params.neighbor_radius),
        height,
        width,
        row,
        col,
        params,
    )
}

/// Squared distance between the patches centered at `a` and `b`, borders replicated.
fn patch_distance_sq(
    grid: &Tensor3<f32>,
    half: isize,
    a: (usize, usize),
    b: (usize, usize),
) -> f64 {
    let (h, w) = (grid.height() as isize, grid.width() as isize);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let mut acc = 0.0f64;
    for dy in -half..=half {
        let ra = clamp(a.0 as isize + dy, h);
        let rb = clamp(b.0 as isize + dy, h);
        for dx in -half..=half {
            let ca = clamp(a.1 as isize + dx, w);
            let cb = clamp(b.1 as isize + dx, w);
            let pa = grid.pixel(ra * grid.width() + ca);
            let pb = grid.pixel(rb * grid.width() + cb);
            for (&x, &y) in pa.iter().zip(pb) {
                let d = f64::from(x) - f64::from(y);
                acc += d * d;
            }
        }
    }
    acc
}

/// Kernel density estimate of each pixel's patch self-information.
pub fn self_information(grid: &Tensor3<f32>, params: &ScmParams) -> Result<InfoMap> {
    params.validate()?;
    let (h, w) = (grid.height(), grid.width());
    if h < params.patch_side || w < params.patch_side {
        return Err(Error::dim(format!(
            "grid {h}x{w} is smaller than one {0}x{0} patch",
            params.patch_side
        )));
    }
    let offsets = manhattan_offsets(params.neighbor_radius);
    let half = (params.patch_side / 2) as isize;
    let floor = params.information_floor();
    let two_h2 = 2.0 * params.bandwidth * params.bandwidth;

    let values = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (row, col) = (p / w, p % w);
            let neighbors = sample_neighbors(&offsets, h, w, row, col, params);
            if neighbors.is_empty() {
                return floor;
            }
            let logits: Vec<f64> = neighbors
                .iter()
                .map(|&q| -patch_distance_sq(grid, half, (row, col), q) / two_h2)
                .collect();
            // -ln( mean(exp(l)) / (sqrt(2 pi) h) ) via log-sum-exp
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            floor + (neighbors.len() as f64).ln() - lse
        })
        .collect();
    InfoMap::new(h, w, values)
}

/// Boltzmann drop probabilities, rescaled so their mean is `target_rate`, clamped to `[0, 1]`.
pub fn drop_probability(info: &InfoMap, params: &ScmParams) -> Result<DropProbMap> {
    params.validate()?;
    if info.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(
            "info map contains non-finite values".into(),
        ));
    }
    if info.values.is_empty() {
        return Ok(DropProbMap {
            height: info.height,
            width: info.width,
            values: Vec::new(),
        });
    }
    // shifting by the minimum cancels in w / mean(w) and keeps exp() in range
    let min = info.values.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = info
        .values
        .iter()
        .map(|&v| (-(v - min) / params.temperature).exp())
        .collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    let values = weights
        .iter()
        .map(|&wt| (params.target_rate * wt / mean).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(DropProbMap {
        height: info.height,
        width: info.width,
        values,
    })
}

/// Drops each pixel independently with its probability.
pub fn sample_drop_mask(probs: &DropProbMap, seed: u64) -> DropMask {
    let bits = probs
        .values
        .par_iter()
        .enumerate()
        .map(|(p, &prob)| {
            let u: f64 = pixel_stream(seed, DOMAIN_DROP_MASK, p as u64).random();
            u < f64::from(prob)
        })
        .collect();
    DropMask {
        height: probs.height,
        width: probs.width,
        bits,
    }
}

/// Zeroes every channel of dropped pixels. No rescaling of survivors.
pub fn apply_drop(grid: &Tensor3<f32>, mask: &DropMask) -> Result<Tensor3<f32>> {
    if grid.height() != mask.height || grid.width() != mask.width {
        return Err(Error::dim(format!(
            "drop mask {}x{} does not match grid {}x{}",
            mask.height,
            mask.width,
            grid.height(),
            grid.width()
        )));
    }
    let mut out = grid.clone();
    for (p, _) in mask.bits.iter().enumerate().filter(|(_, &d)| d) {
        out.pixel_mut(p).fill(0.0);
    }
    Ok(out)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels(a: &Tensor3<f32>, b: &Tensor3<f32>) -> Result<Tensor3<f32>> {
    if !a.same_spatial(b) {
        return Err(Error::dim(format!(
            "cannot concatenate {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for p in 0..a.pixels() {
        data.extend_from_slice(a.pixel(p));
        data.extend_from_slice(b.pixel(p));
    }
    Tensor3::from_vec(a.height(), a.width(), a.channels() + b.channels(), data)
}

/// Everything the shape-cue stage produces for one grid.
#[derive(Debug, Clone)]
pub struct ShapeCues {
    pub info: InfoMap,
    pub probs: DropProbMap,
    pub mask: DropMask,
    /// The input grid with dropped pixels zeroed.
    pub features: Tensor3<f32>,
}

impl ShapeCues {
    pub fn compute(grid: &Tensor3<f32>, params: &ScmParams) -> Result<Self> {
        let info = self_information(grid, params)?;
        let probs = drop_probability(&info, params)?;
        let mask = sample_drop_mask(&probs, params.seed);
        let features = apply_drop(grid, &mask)?;
        Ok(Self {
            info,
            probs,
            mask,
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> Tensor3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(h, w, c, |_, _, _| rng.random::<f32>())
    }

    fn params(bandwidth: f64) -> ScmParams {
        ScmParams {
            bandwidth,
            ..ScmParams::default()
        }
    }

    #[test]
    fn constant_grid_unit_bandwidth() {
        let grid = Tensor3::filled(10, 12, 3, 0.4f32);
        let info = self_information(&grid, &params(1.0)).unwrap();
        let expect = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((expect - 0.918_939).abs() < 1e-6);
        for &v in &info.values {
            assert!((v - expect).abs() <= 1e-9, "{v}");
        }
    }

    #[test]
    fn constant_grid_bandwidth_two() {
        let grid = Tensor3::filled(9, 9, 1, 0.7f32);
        let info = self_information(&grid, &params(2.0)).unwrap();
        let expect = (2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((expect - 1.612_086).abs() < 1e-6);
        for &v in &info.values {
            assert!((v - expect).abs() <= 1e-9);
        }
    }

    #[test]
    fn grid_smaller_than_patch_is_rejected() {
        let grid = Tensor3::filled(2, 8, 1, 0.0f32);
        assert!(matches!(
            self_information(&grid, &ScmParams::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bad_params_are_rejected() {
        let grid = Tensor3::filled(8, 8, 1, 0.0f32);
        for bad in [
            ScmParams {
                patch_side: 2,
                ..ScmParams::default()
            },
            ScmParams {
                n_samples: 0,
                ..ScmParams::default()
            },
            ScmParams {
                bandwidth: 0.0,
                ..ScmParams::default()
            },
            ScmParams {
                temperature: -1.0,
                ..ScmParams::default()
            },
            ScmParams {
                target_rate: 1.5,
                ..ScmParams::default()
            },
        ] {
            assert!(matches!(
                self_information(&grid, &bad),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn neighbor_sampling_respects_radius_and_budget() {
        let p = ScmParams::default();
        let ns = sampled_neighbors(20, 20, 10, 10, &p);
        assert_eq!(ns.len(), 9);
        let mut uniq = ns.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 9, "sampling is without replacement");
        for (r, c) in ns {
            let d = r.abs_diff(10) + c.abs_diff(10);
            assert!((1..=7).contains(&d));
        }
        // 2x2 grid: only three candidates exist
        let tiny = sampled_neighbors(2, 2, 0, 0, &p);
        assert_eq!(tiny.len(), 3);
    }

    /// Straight-line re-derivation: materialize each patch vector, then
    /// evaluate the density estimate term by term.
    fn oracle_info(grid: &Tensor3<f32>, p: &ScmParams) -> Vec<f64> {
        let (h, w, ch) = grid.dims();
        let half = (p.patch_side / 2) as isize;
        let patch = |r: usize, c: usize| -> Vec<f64> {
            let mut v = Vec::new();
            for dy in -half..=half {
                for dx in -half..=half {
                    let rr = (r as isize + dy).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dx).clamp(0, w as isize - 1) as usize;
                    for k in 0..ch {
                        v.push(f64::from(grid.get(rr, cc, k)));
                    }
                }
            }
            v
        };
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let center = patch(r, c);
                let ns = sampled_neighbors(h, w, r, c, p);
                let mut density = 0.0;
                for &(nr, nc) in &ns {
                    let other = patch(nr, nc);
                    let d2: f64 = center
                        .iter()
                        .zip(&other)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    density += (-d2 / (2.0 * p.bandwidth * p.bandwidth)).exp()
                        / ((2.0 * std::f64::consts::PI).sqrt() * p.bandwidth);
                }
                out.push(-(density / ns.len() as f64).ln());
            }
        }
        out
    }

    #[test]
    fn random_grid_matches_straight_line_oracle() {
        let grid = random_grid(16, 16, 1, 42);
        let p = ScmParams {
            seed: 1234,
            ..ScmParams::default()
        };
        let info = self_information(&grid, &p).unwrap();
        let oracle = oracle_info(&grid, &p);
        for (a, b) in info.values.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn constant_info_gives_target_rate_everywhere() {
        let info = InfoMap::new(4, 4, vec![2.3; 16]).unwrap();
        let probs = drop_probability(&info, &ScmParams::default()).unwrap();
        assert!(probs.values.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn texture_half_drops_more_than_edge_half() {
        let values: Vec<f64> = (0..64).map(|i| if i < 32 { 0.92 } else { 3.0 }).collect();
        let info = InfoMap::new(8, 8, values).unwrap();
        let p = ScmParams {
            temperature: 0.5,
            target_rate: 0.2,
            ..ScmParams::default()
        };
        let probs = drop_probability(&info, &p).unwrap();
        assert!(probs.values[0] > probs.values[63]);
        assert!(probs.values[..32].iter().all(|&v| v == probs.values[0]));
    }

    #[test]
    fn mean_matches_target_without_clamping() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..400).map(|_| 1.0 + rng.random::<f64>() * 0.5).collect();
        let info = InfoMap::new(20, 20, values).unwrap();
        let probs = drop_probability(&info, &ScmParams::default()).unwrap();
        assert!(
            probs.values.iter().all(|&v| v > 0.0 && v < 1.0),
            "clamp-free fixture"
        );
        let mean = probs.values.iter().map(|&v| f64::from(v)).sum::<f64>() / 400.0;
        assert!((mean - 0.25).abs() <= 1e-6);
    }

    #[test]
    fn drop_mask_extremes() {
        let zeros = DropProbMap {
            height: 5,
            width: 5,
            values: vec![0.0; 25],
        };
        assert_eq!(sample_drop_mask(&zeros, 3).dropped(), 0);
        let ones = DropProbMap {
            height: 5,
            width: 5,
            values: vec![1.0; 25],
        };
        assert_eq!(sample_drop_mask(&ones, 3).dropped(), 25);
    }

    #[test]
    fn drop_rate_statistics() {
        let probs = DropProbMap {
            height: 256,
            width: 256,
            values: vec![0.25; 256 * 256],
        };
        for seed in [0, 1, 77] {
            let frac = sample_drop_mask(&probs, seed).dropped() as f64 / 65536.0;
            assert!((frac - 0.25).abs() <= 0.01, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn apply_drop_identity_and_full() {
        let grid = random_grid(4, 5, 2, 1);
        let empty = DropMask {
            height: 4,
            width: 5,
            bits: vec![false; 20],
        };
        assert_eq!(apply_drop(&grid, &empty).unwrap(), grid);
        let full = DropMask {
            height: 4,
            width: 5,
            bits: vec![true; 20],
        };
        assert!(apply_drop(&grid, &full)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let wrong = DropMask {
            height: 5,
            width: 4,
            bits: vec![false; 20],
        };
        assert!(matches!(
            apply_drop(&grid, &wrong),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn checkerboard_drop_keeps_half() {
        let (h, w, c) = (5, 7, 3);
        let grid = Tensor3::filled(h, w, c, 1.0f32);
        // drop odd-parity pixels; even-parity ones survive
        let bits = (0..h * w).map(|p| (p / w + p % w) % 2 == 1).collect();
        let out = apply_drop(
            &grid,
            &DropMask {
                height: h,
                width: w,
                bits,
            },
        )
        .unwrap();
        let sum: f32 = out.data().iter().sum();
        assert_eq!(sum as usize, (h * w).div_ceil(2) * c);
    }

    #[test]
    fn concat_layout() {
        let a = random_grid(3, 4, 2, 5);
        let b = random_grid(3, 4, 3, 6);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.dims(), (3, 4, 5));
        assert_eq!(ab.slice_channels(0..2).unwrap(), a);
        assert_eq!(ab.slice_channels(2..5).unwrap(), b);
        let empty = Tensor3::<f32>::zeros(3, 4, 0);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &random_grid(4, 4, 1, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn info_respects_lower_bound(seed in any::<u64>(), h in 3usize..12, w in 3usize..12, bw in 0.2f64..3.0) {
            let grid = random_grid(h, w, 2, seed);
            let p = ScmParams { bandwidth: bw, seed, ..ScmParams::default() };
            let info = self_information(&grid, &p).unwrap();
            let floor = p.information_floor();
            prop_assert!(info.values.iter().all(|&v| v >= floor - 1e-6));
        }

        #[test]
        fn drop_probability_is_monotone(vals in proptest::collection::vec(0.9f64..1.6, 2..50)) {
            let n = vals.len();
            let info = InfoMap::new(1, n, vals.clone()).unwrap();
            let probs = drop_probability(&info, &ScmParams::default()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if vals[i] < vals[j] {
                        prop_assert!(probs.values[i] >= probs.values[j]);
                    }
                }
            }
        }

        #[test]
        fn apply_drop_is_idempotent(seed in any::<u64>(), rate in 0.0f32..1.0) {
            let grid = random_grid(6, 6, 2, seed);
            let probs = DropProbMap { height: 6, width: 6, values: vec![rate; 36] };
            let mask = sample_drop_mask(&probs, seed);
            let once = apply_drop(&grid, &mask).unwrap();
            prop_assert_eq!(apply_drop(&once, &mask).unwrap(), once);
        }
    }

    #[test]
    fn shape_cues_are_deterministic() {
        let grid = random_grid(24, 24, 3, 8);
        let p = ScmParams {
            seed: 5,
            ..ScmParams::default()
        };
        let a = ShapeCues::compute(&grid, &p).unwrap();
        let b = ShapeCues::compute(&grid, &p).unwrap();
        assert_eq!(a.info, b.info);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.features, b.features);
    }
}
