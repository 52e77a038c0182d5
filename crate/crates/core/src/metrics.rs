//! Segmentation metrics: confusion-matrix mIoU and boundary IoU.
//!
//! Boundary IoU compares only the band of each mask lying within distance
//! `d` of that mask's own contour. The band is `mask \ erode(mask, disk(d))`
//! with the image exterior counted as outside every mask, evaluated with an
//! exact Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMask, BACKGROUND, IGNORE};

/// Square matrix of pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not [`IGNORE`]. A predicted
    /// [`IGNORE`] counts as background.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::dim(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            let p = if p == IGNORE {
                BACKGROUND
            } else {
                usize::from(p)
            };
            self.counts[usize::from(g) * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim("confusion matrices of different sizes"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn miou(&self) -> Result<IouReport> {
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        IouReport::from_per_class(per_class)
    }
}

/// Per-class IoU (`None` for classes absent from both masks) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouReport {
    fn from_per_class(per_class: Vec<Option<f64>>) -> Result<Self> {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMean);
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self { per_class, mean })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryParams {
    /// Band width as a fraction of the image diagonal.
    pub d_frac: f64,
    /// Fixed band width in pixels; overrides `d_frac` when set.
    pub d_pixels: Option<u32>,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            d_frac: 0.05,
            d_pixels: None,
        }
    }
}

impl BoundaryParams {
    pub fn with_pixels(d: u32) -> Self {
        Self {
            d_pixels: Some(d),
            ..Self::default()
        }
    }

    /// `ceil(d_frac * sqrt(h^2 + w^2))` unless a fixed width is set.
    pub fn band_width(&self, height: usize, width: usize) -> Result<u32> {
        if let Some(d) = self.d_pixels {
            return Ok(d);
        }
        if !(self.d_frac > 0.0 && self.d_frac.is_finite()) {
            return Err(Error::param(format!(
                "d_frac must be positive, got {}",
                self.d_frac
            )));
        }
        let diag = ((height * height + width * width) as f64).sqrt();
        Ok((self.d_frac * diag).ceil() as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub d: u32,
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
/// Infinite entries of `f` are not sites.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: Option<usize> = None;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(top) = k else {
                k = Some(0);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            };
            let p = v[top];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[top] {
                k = top.checked_sub(1);
                continue;
            }
            v[top + 1] = q;
            z[top + 1] = s;
            z[top + 2] = f64::INFINITY;
            k = Some(top + 1);
            break;
        }
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every cell to the nearest `site`.
pub(crate) fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n + 1], vec![0.0; n + 2]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Pixels of `mask` within Euclidean distance `d` of its contour.
pub fn boundary_band(mask: &[bool], h: usize, w: usize, d: u32) -> Vec<bool> {
    // pad by one so the image exterior acts as background
    let (ph, pw) = (h + 2, w + 2);
    let mut sites = vec![true; ph * pw];
    for r in 0..h {
        for c in 0..w {
            sites[(r + 1) * pw + c + 1] = !mask[r * w + c];
        }
    }
    let dist = squared_edt(&sites, ph, pw);
    let d2 = f64::from(d) * f64::from(d);
    (0..h * w)
        .map(|p| mask[p] && dist[(p / w + 1) * pw + p % w + 1] <= d2)
        .collect()
}

/// Boundary IoU per class over `num_classes` classes, ground-truth [`IGNORE`]
/// pixels excluded and predicted [`IGNORE`] read as background.
pub fn boundary_iou(
    pred: &LabelMask,
    gt: &LabelMask,
    num_classes: usize,
    params: &BoundaryParams,
) -> Result<BoundaryReport> {
    if !pred.same_shape(gt) {
        return Err(Error::dim(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    pred.check_classes(num_classes)?;
    gt.check_classes(num_classes)?;
    let (h, w) = (gt.height(), gt.width());
    let d = params.band_width(h, w)?;
    let evaluated: Vec<bool> = gt.labels().iter().map(|&g| g != IGNORE).collect();
    let pred_class = |p: u8| if p == IGNORE { BACKGROUND as u8 } else { p };

    let per_class = (0..num_classes)
        .map(|c| {
            let c = c as u8;
            let pm: Vec<bool> = pred.labels().iter().map(|&p| pred_class(p) == c).collect();
            let gm: Vec<bool> = gt.labels().iter().map(|&g| g == c).collect();
            if !pm.iter().any(|&b| b) && !gm.iter().any(|&b| b) {
                return None;
            }
            let pb = boundary_band(&pm, h, w, d);
            let gb = boundary_band(&gm, h, w, d);
            let (mut inter, mut union) = (0u64, 0u64);
            for p in 0..h * w {
                if !evaluated[p] {
                    continue;
                }
                inter += u64::from(pb[p] && gb[p]);
                union += u64::from(pb[p] || gb[p]);
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let report = IouReport::from_per_class(per_class)?;
    Ok(BoundaryReport {
        per_class: report.per_class,
        mean: report.mean,
        d,
    })
}

/// Plain mIoU of a single prediction/ground-truth pair.
pub fn pair_miou(pred: &LabelMask, gt: &LabelMask, num_classes: usize) -> Result<IouReport> {
    let mut conf = ConfusionMatrix::new(num_classes);
    conf.accumulate(pred, gt)?;
    conf.miou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, rows: &[&[u8]]) -> LabelMask {
        LabelMask::from_vec(h, w, rows.concat()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = mask(
            4,
            4,
            &[&[0, 0, 1, 1], &[0, 0, 1, 1], &[0, 1, 1, 1], &[0, 0, 0, 1]],
        );
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&gt, &gt).unwrap();
        assert_eq!(conf.total(), 16);
        assert_eq!(conf.get(0, 1) + conf.get(1, 0), 0);
        let r = conf.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn all_ignore_leaves_matrix_unchanged() {
        let gt = LabelMask::filled(3, 3, IGNORE);
        let pred = LabelMask::filled(3, 3, 1);
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&pred, &gt).unwrap();
        assert_eq!(conf, ConfusionMatrix::new(2));
        assert!(matches!(conf.miou(), Err(Error::UndefinedMean)));
    }

    #[test]
    fn hand_counted_fixture() {
        // class 1: 9 TP, 3 FP, 2 FN; one gt pixel ignored
        let gt = mask(
            4,
            4,
            &[
                &[1, 1, 1, 0],
                &[1, 1, 1, 0],
                &[1, 1, 1, 0],
                &[1, 1, 0, IGNORE],
            ],
        );
        let pred = mask(
            4,
            4,
            &[&[1, 1, 1, 1], &[1, 1, 1, 1], &[1, 1, 1, 1], &[0, 0, 0, 1]],
        );
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&pred, &gt).unwrap();
        assert_eq!(conf.get(1, 1), 9);
        assert_eq!(conf.get(0, 1), 3);
        assert_eq!(conf.get(1, 0), 2);
        assert_eq!(conf.get(0, 0), 1);
        assert_eq!(conf.total(), 15);
        let r = conf.miou().unwrap();
        assert!((r.per_class[1].unwrap() - 9.0 / 14.0).abs() < 1e-15);
        assert!((r.per_class[0].unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_class_scores_zero() {
        let gt = mask(1, 4, &[&[1, 1, 0, 0]]);
        let pred = mask(1, 4, &[&[0, 0, 1, 1]]);
        let r = pair_miou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));
    }

    #[test]
    fn ignored_prediction_counts_as_background() {
        let gt = mask(1, 2, &[&[0, 1]]);
        let pred = mask(1, 2, &[&[IGNORE, IGNORE]]);
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&pred, &gt).unwrap();
        assert_eq!(conf.get(0, 0), 1);
        assert_eq!(conf.get(1, 0), 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = LabelMask::filled(2, 3, 0);
        let b = LabelMask::filled(3, 2, 0);
        assert!(matches!(
            ConfusionMatrix::new(2).accumulate(&a, &b),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            boundary_iou(&a, &b, 2, &BoundaryParams::default()),
            Err(Error::Dimension(_))
        ));
    }

    fn brute_sq_dist(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|p| {
                let (r, c) = ((p / w) as f64, (p % w) as f64);
                (0..h * w)
                    .filter(|&q| sites[q])
                    .map(|q| ((q / w) as f64 - r).powi(2) + ((q % w) as f64 - c).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (9, 13);
        let mut s = 12345u32;
        for density in [1, 5, 30] {
            let sites: Vec<bool> = (0..h * w)
                .map(|_| {
                    s = s.wrapping_mul(1_103_515_245).wrapping_add(12345);
                    (s >> 16) % 100 < density
                })
                .collect();
            assert_eq!(squared_edt(&sites, h, w), brute_sq_dist(&sites, h, w));
        }
        assert!(squared_edt(&[false; 6], 2, 3)
            .iter()
            .all(|v| v.is_infinite()));
    }

    #[test]
    fn identical_masks_score_one() {
        let gt = LabelMask::from_fn(20, 20, |r, c| {
            if (5..14).contains(&r) && (3..17).contains(&c) {
                2
            } else {
                0
            }
        });
        for d in [1, 2, 7] {
            let r = boundary_iou(&gt, &gt, 3, &BoundaryParams::with_pixels(d)).unwrap();
            assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0)]);
            assert_eq!(r.mean, 1.0);
        }
    }

    #[test]
    fn huge_band_reduces_to_plain_iou() {
        let gt = LabelMask::from_fn(16, 16, |r, c| if r > 3 && c > 5 { 1 } else { 0 });
        let pred = LabelMask::from_fn(16, 16, |r, c| if r > 5 && c > 2 { 1 } else { 0 });
        let params = BoundaryParams {
            d_frac: 1.0,
            d_pixels: None,
        };
        let b = boundary_iou(&pred, &gt, 2, &params).unwrap();
        assert!(b.d >= 23);
        let m = pair_miou(&pred, &gt, 2).unwrap();
        assert_eq!(b.per_class, m.per_class);
        assert_eq!(b.mean, m.mean);
    }

    #[test]
    fn band_width_rounds_up() {
        let p = BoundaryParams::default();
        // 0.05 * sqrt(500^2 + 375^2) = 31.25
        assert_eq!(p.band_width(375, 500).unwrap(), 32);
        assert_eq!(p.band_width(30, 40).unwrap(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn iou_is_symmetric_and_bounded(
            a in proptest::collection::vec(0u8..3, 64),
            b in proptest::collection::vec(0u8..3, 64),
        ) {
            let pa = LabelMask::from_vec(8, 8, a).unwrap();
            let pb = LabelMask::from_vec(8, 8, b).unwrap();
            let ab = pair_miou(&pa, &pb, 3).unwrap();
            let ba = pair_miou(&pb, &pa, 3).unwrap();
            prop_assert_eq!(&ab.per_class, &ba.per_class);
            for v in ab.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let bab = boundary_iou(&pa, &pb, 3, &BoundaryParams::with_pixels(1)).unwrap();
            let bba = boundary_iou(&pb, &pa, 3, &BoundaryParams::with_pixels(1)).unwrap();
            prop_assert_eq!(&bab.per_class, &bba.per_class);
        }

        #[test]
        fn relabeling_permutes_per_class(
            a in proptest::collection::vec(0u8..3, 36),
            b in proptest::collection::vec(0u8..3, 36),
        ) {
            let perm = [2u8, 0, 1];
            let pa = LabelMask::from_vec(6, 6, a.clone()).unwrap();
            let pb = LabelMask::from_vec(6, 6, b.clone()).unwrap();
            let qa = LabelMask::from_vec(6, 6, a.iter().map(|&l| perm[l as usize]).collect()).unwrap();
            let qb = LabelMask::from_vec(6, 6, b.iter().map(|&l| perm[l as usize]).collect()).unwrap();
            let r = pair_miou(&pa, &pb, 3).unwrap();
            let q = pair_miou(&qa, &qb, 3).unwrap();
            for (c, &to) in perm.iter().enumerate() {
                prop_assert_eq!(r.per_class[c], q.per_class[to as usize]);
            }
            prop_assert!((r.mean - q.mean).abs() < 1e-12);
        }

        #[test]
        fn accumulation_is_additive(
            a in proptest::collection::vec(0u8..3, 16),
            b in proptest::collection::vec(0u8..3, 16),
            c in proptest::collection::vec(0u8..3, 16),
        ) {
            let m = |v: &Vec<u8>| LabelMask::from_vec(4, 4, v.clone()).unwrap();
            let mut whole = ConfusionMatrix::new(3);
            whole.accumulate(&m(&a), &m(&b)).unwrap();
            whole.accumulate(&m(&b), &m(&c)).unwrap();
            let mut x = ConfusionMatrix::new(3);
            x.accumulate(&m(&a), &m(&b)).unwrap();
            let mut y = ConfusionMatrix::new(3);
            y.accumulate(&m(&b), &m(&c)).unwrap();
            x.merge(&y).unwrap();
            prop_assert_eq!(x, whole);
        }
    }
}
