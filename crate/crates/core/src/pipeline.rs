//! Batch orchestration over a directory of (image, scores, labels) triples.
//!
//! Input layout, per item `<stem>`:
//!
//! ```text
//! <stem>.scores.dtf     raw scores, K+1 channels, background first
//! <stem>.png            RGB image
//! <stem>.labels.json    {"present": [1, 3]}
//! <stem>.gt.png         optional ground-truth mask
//! ```
//!
//! Each item writes `<output_dir>/<stem>/` with `refined.dtf`, `pseudo.png`,
//! `info.dtf`, `drop.png`, `loss.json` and, when ground truth exists,
//! `metrics.json`. `summary.json` aggregates everything in input order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::grid::{normalize_scores, ClassSet, ImageRgb, LabelMask, Tensor3};
use crate::io::{
    read_bytes, read_dtf, read_image_png, read_mask_png, write_bool_png, write_bytes, write_dtf,
    write_mask_png,
};
use crate::losses::{total_loss, ImageLabels, LossParams};
use crate::metrics::{boundary_iou, BoundaryParams, ConfusionMatrix};
use crate::shape_cues::{ScmParams, ShapeCues};
use crate::spr::{pseudo_mask, spr, SprParams};

/// Environment variable that overrides [`PipelineConfig::workers`].
pub const THREADS_ENV: &str = "SHAPESEED_THREADS";

const SCORES_SUFFIX: &str = ".scores.dtf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub scm: ScmParams,
    pub spr: SprParams,
    pub loss: LossParams,
    pub boundary: BoundaryParams,
    /// Index 0 names the background.
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    /// Weight of the region loss.
    pub lambda: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("input"),
            output_dir: PathBuf::from("output"),
            scm: ScmParams::default(),
            spr: SprParams::default(),
            loss: LossParams::default(),
            boundary: BoundaryParams::default(),
            class_names: vec!["background".into(), "object".into()],
            seed: 0,
            workers: 0,
            lambda: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.scm.validate()?;
        self.spr.validate()?;
        self.loss.validate()?;
        if self.class_names.len() < 2 {
            return Err(Error::param(
                "class table needs background and at least one object",
            ));
        }
        if self.class_names.len() > 255 {
            return Err(Error::param(
                "at most 254 object classes fit in an 8-bit mask",
            ));
        }
        if !self.lambda.is_finite() {
            return Err(Error::param("lambda must be finite"));
        }
        Ok(())
    }

    fn channels(&self) -> usize {
        self.class_names.len()
    }

    /// Worker count after applying the environment override.
    pub fn effective_workers(&self) -> Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::param(format!(
                    "{THREADS_ENV} must be a non-negative integer, got '{v}'"
                ))
            }),
            Err(_) => Ok(self.workers),
        }
    }
}

#[derive(Debug, Deserialize)]
struct LabelsFile {
    present: Vec<usize>,
}

/// Reads `{"present": [...]}`.
pub fn read_labels_json(path: &Path) -> Result<ClassSet> {
    let bytes = read_bytes(path)?;
    let file: LabelsFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if file.present.contains(&0) {
        return Err(Error::format(
            path,
            "background (0) is implicit and must not be listed",
        ));
    }
    Ok(ClassSet::new(file.present))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values always serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputItem {
    pub stem: String,
    pub dir: PathBuf,
}

impl InputItem {
    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }
}

/// Items in `dir`, sorted by stem.
pub fn discover(dir: &Path) -> Result<Vec<InputItem>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = entry.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(SCORES_SUFFIX)) {
            if !stem.is_empty() {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems
        .into_iter()
        .map(|stem| InputItem {
            stem,
            dir: dir.to_path_buf(),
        })
        .collect())
}

/// Outcome of one item; `error` is set when it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub stem: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Value>,
    /// Valid pseudo-label fraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip)]
    confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_items: usize,
    pub num_failed: usize,
    pub items: Vec<ItemResult>,
    /// mIoU over every item that had ground truth, from a merged confusion matrix.
    pub aggregate: Option<Value>,
}

impl Summary {
    pub fn success(&self) -> bool {
        self.num_failed == 0
    }
}

fn named_ious(per_class: &[Option<f64>], names: &[String]) -> Value {
    let mut map = serde_json::Map::new();
    for (name, v) in names.iter().zip(per_class) {
        map.insert(name.clone(), json!(v));
    }
    Value::Object(map)
}

fn process(item: &InputItem, config: &PipelineConfig) -> Result<ItemResult> {
    let scores = read_dtf(&item.path(SCORES_SUFFIX))?;
    let image = read_image_png(&item.path(".png"))?;
    let present = read_labels_json(&item.path(".labels.json"))?;
    let gt_path = item.path(".gt.png");
    let gt = if gt_path.exists() {
        Some(read_mask_png(&gt_path)?)
    } else {
        None
    };

    let k1 = config.channels();
    if scores.channels() != k1 {
        return Err(Error::dim(format!(
            "{}: scores have {} channels, class table has {k1}",
            item.stem,
            scores.channels()
        )));
    }
    check_image(&image, &scores)?;
    present.check_channels(k1)?;

    let out = config.output_dir.join(&item.stem);
    std::fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;

    let scm = ScmParams {
        seed: config.seed,
        ..config.scm.clone()
    };
    let cues = ShapeCues::compute(image.as_tensor(), &scm)?;
    write_dtf(&out.join("info.dtf"), &cues.info.to_tensor())?;
    write_bool_png(
        &out.join("drop.png"),
        image.height(),
        image.width(),
        &cues.mask.bits,
    )?;

    let probs = normalize_scores(&scores);
    let refined = spr(&image, &probs, &present, &config.spr)?;
    let (mask, valid) = pseudo_mask(&refined, &present, &config.spr)?;
    write_dtf(&out.join("refined.dtf"), &refined)?;
    write_mask_png(&out.join("pseudo.png"), &mask)?;

    let labels = ImageLabels::from_present(&present, k1 - 1)?;
    let report = total_loss(&scores, &labels, &mask, &valid, config.lambda, &config.loss)?;
    let loss = report.to_json();
    write_json(&out.join("loss.json"), &loss)?;

    let coverage = valid.count() as f64 / valid.bits().len() as f64;
    let (metrics, confusion) = match gt {
        Some(gt) => {
            let (m, cm) = evaluate(&mask, &gt, k1, &config.boundary, &config.class_names)?;
            write_json(&out.join("metrics.json"), &m)?;
            (Some(m), Some(cm))
        }
        None => (None, None),
    };
    Ok(ItemResult {
        stem: item.stem.clone(),
        ok: true,
        error: None,
        loss: Some(loss),
        metrics,
        coverage: Some(coverage),
        confusion,
    })
}

fn check_image(image: &ImageRgb, scores: &Tensor3<f32>) -> Result<()> {
    if image.height() != scores.height() || image.width() != scores.width() {
        return Err(Error::dim(format!(
            "image is {}x{} but scores are {}x{}",
            image.height(),
            image.width(),
            scores.height(),
            scores.width()
        )));
    }
    Ok(())
}

/// mIoU and boundary IoU of `pred` against `gt` as a JSON report.
pub fn evaluate(
    pred: &LabelMask,
    gt: &LabelMask,
    num_classes: usize,
    boundary: &BoundaryParams,
    names: &[String],
) -> Result<(Value, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    let iou = cm.miou()?;
    let biou = boundary_iou(pred, gt, num_classes, boundary)?;
    let value = json!({
        "per_class": named_ious(&iou.per_class, names),
        "miou": iou.mean,
        "biou": biou.mean,
        "biou_per_class": named_ious(&biou.per_class, names),
        "d": biou.d,
    });
    Ok((value, cm))
}

/// Runs every item under a pool of the configured size and writes `summary.json`.
///
/// Item failures are recorded, not propagated; only configuration and
/// directory-level problems return `Err`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Summary> {
    config.validate()?;
    let items = discover(&config.input_dir)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|source| Error::Io {
        path: config.output_dir.clone(),
        source,
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers()?)
        .build()
        .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))?;
    let results: Vec<ItemResult> = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                process(item, config).unwrap_or_else(|e| ItemResult {
                    stem: item.stem.clone(),
                    ok: false,
                    error: Some(e.to_string()),
                    loss: None,
                    metrics: None,
                    coverage: None,
                    confusion: None,
                })
            })
            .collect()
    });

    let mut merged: Option<ConfusionMatrix> = None;
    for cm in results.iter().filter_map(|r| r.confusion.as_ref()) {
        match merged.as_mut() {
            Some(m) => m.merge(cm)?,
            None => merged = Some(cm.clone()),
        }
    }
    let aggregate = match merged {
        Some(cm) => {
            let iou = cm.miou()?;
            Some(json!({
                "per_class": named_ious(&iou.per_class, &config.class_names),
                "miou": iou.mean,
            }))
        }
        None => None,
    };
    let summary = Summary {
        num_items: results.len(),
        num_failed: results.iter().filter(|r| !r.ok).count(),
        items: results,
        aggregate,
    };
    let value = serde_json::to_value(&summary).expect("summary serializes");
    write_json(&config.output_dir.join("summary.json"), &value)?;
    Ok(summary)
}

/// Writes one item in the layout [`run_pipeline`] reads.
pub fn write_item(
    dir: &Path,
    stem: &str,
    image: &ImageRgb,
    scores: &Tensor3<f32>,
    present: &ClassSet,
    gt: Option<&LabelMask>,
) -> Result<()> {
    crate::io::write_image_png(&dir.join(format!("{stem}.png")), image)?;
    write_dtf(&dir.join(format!("{stem}{SCORES_SUFFIX}")), scores)?;
    let classes: Vec<usize> = present.objects().collect();
    write_json(
        &dir.join(format!("{stem}.labels.json")),
        &json!({ "present": classes }),
    )?;
    if let Some(gt) = gt {
        write_mask_png(&dir.join(format!("{stem}.gt.png")), gt)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{degrade_scores, synth, Degradation, SceneKind, SYNTH_CHANNELS};

    fn config(input: &Path, output: &Path) -> PipelineConfig {
        PipelineConfig {
            input_dir: input.to_path_buf(),
            output_dir: output.to_path_buf(),
            spr: SprParams {
                radii: vec![1, 2, 4],
                iterations: 3,
                ..SprParams::default()
            },
            class_names: ["background", "a", "b", "c"].map(String::from).to_vec(),
            workers: 1,
            ..PipelineConfig::default()
        }
    }

    fn write_scene(dir: &Path, stem: &str, seed: u64) {
        let s = synth(SceneKind::Shapes, 24, 20, seed).unwrap();
        // raw log-probabilities stand in for network scores
        let probs = degrade_scores(&s.gt, SYNTH_CHANNELS, &Degradation::default(), seed).unwrap();
        let scores = probs.map(|v| v.max(1e-6).ln());
        write_item(dir, stem, &s.image, &scores, &s.present, Some(&s.gt)).unwrap();
    }

    #[test]
    fn empty_directory_gives_empty_summary() {
        let input = tempfile::tempdir().unwrap();
        let output = tempfile::tempdir().unwrap();
        let s = run_pipeline(&config(input.path(), output.path())).unwrap();
        assert_eq!(s.num_items, 0);
        assert!(s.success());
        assert!(output.path().join("summary.json").exists());
    }

    #[test]
    fn one_triple_writes_every_artifact() {
        let input = tempfile::tempdir().unwrap();
        let output = tempfile::tempdir().unwrap();
        write_scene(input.path(), "scene", 1);
        let s = run_pipeline(&config(input.path(), output.path())).unwrap();
        assert!(s.success(), "{:?}", s.items);
        let dir = output.path().join("scene");
        let refined = read_dtf(&dir.join("refined.dtf")).unwrap();
        assert_eq!(refined.dims(), (24, 20, 4));
        let mask = read_mask_png(&dir.join("pseudo.png")).unwrap();
        assert!(mask
            .labels()
            .iter()
            .all(|&l| l < 4 || l == crate::grid::IGNORE));
        assert_eq!(read_dtf(&dir.join("info.dtf")).unwrap().channels(), 1);
        crate::io::read_bool_png(&dir.join("drop.png")).unwrap();
        for name in ["loss.json", "metrics.json"] {
            let v: Value = serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap();
            assert!(v.is_object());
        }
        let v: Value =
            serde_json::from_slice(&std::fs::read(output.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(v["num_items"], 1);
    }

    #[test]
    fn corrupt_item_is_isolated() {
        let input = tempfile::tempdir().unwrap();
        let output = tempfile::tempdir().unwrap();
        write_scene(input.path(), "a", 1);
        write_scene(input.path(), "b", 2);
        std::fs::write(input.path().join("a.scores.dtf"), b"SEGTjunk").unwrap();
        let s = run_pipeline(&config(input.path(), output.path())).unwrap();
        assert_eq!(s.num_items, 2);
        assert_eq!(s.num_failed, 1);
        assert!(!s.items[0].ok && s.items[1].ok);
        assert!(!s.success());
    }

    #[test]
    fn config_round_trips_and_rejects_bad_tables() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(
            PipelineConfig::from_json(&text, Path::new("c.json")).unwrap(),
            c
        );
        let partial = PipelineConfig::from_json(r#"{"seed": 4}"#, Path::new("c.json")).unwrap();
        assert_eq!(partial.seed, 4);
        let bad = PipelineConfig {
            class_names: vec!["background".into()],
            ..PipelineConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
    }
}
