use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use shapeseed::io::{
    read_dtf, read_image_png, read_mask_png, write_bool_png, write_dtf, write_image_png,
    write_mask_png,
};
use shapeseed::pipeline::write_json;
use shapeseed::shape_cues::{drop_probability, sample_drop_mask, self_information, InfoMap};
use shapeseed::spr::SigmaMode;
use shapeseed::synth::{one_hot_scores, SYNTH_CHANNELS};
use shapeseed::{
    alpha_sweep, append_background_plane, boundary_iou, degrade_scores, normalize_scores,
    pseudo_mask, run_pipeline, spr, synth, total_loss, BoundaryParams, ClassSet, ConfusionMatrix,
    Degradation, Error, ImageLabels, LabelMask, LossParams, PipelineConfig, SceneKind, ScmParams,
    SprParams, Tensor3, ValidMask, IGNORE,
};

#[derive(Parser)]
#[command(name = "shapeseed", version, about = "Shape-cue pseudo-mask toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Patch self-information of an image (PNG) or feature grid (.dtf).
    Selfinfo(SelfinfoArgs),
    /// Drop probabilities and a sampled drop mask from an info map.
    Dropmask(DropmaskArgs),
    /// Semantics-augmented refinement of a score map.
    Refine(RefineArgs),
    /// Thresholded pseudo mask from a refined map.
    Pseudomask(PseudomaskArgs),
    /// Loss report (JSON on stdout) for raw scores against a pseudo mask.
    Loss(LossArgs),
    /// mIoU and optionally boundary IoU of a predicted mask.
    Eval(EvalArgs),
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Pseudo-mask mIoU as a function of alpha over synthetic scenes.
    SweepAlpha(SweepArgs),
    /// Run the batch pipeline from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SelfinfoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    radius: usize,
    #[arg(long, default_value_t = 9)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    #[arg(long, default_value_t = 3)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DropmaskArgs {
    #[arg(long)]
    info: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.25)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the probability map.
    #[arg(long)]
    probs_out: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value = "1,2,4,8,12,24")]
    radii: String,
    /// Object classes present in the image, e.g. 1,3.
    #[arg(long)]
    present: String,
    #[arg(long)]
    out: PathBuf,
    /// Scores are already probabilities; skip the softmax.
    #[arg(long)]
    normalized: bool,
    /// Scores lack the background channel; prepend a constant plane.
    #[arg(long)]
    add_background: bool,
    /// Rebuild affinities every iteration.
    #[arg(long)]
    recompute: bool,
    /// Use image-wide instead of local standard deviations.
    #[arg(long)]
    global_sigma: bool,
}

#[derive(Args)]
struct PseudomaskArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    present: String,
    #[arg(long, default_value_t = 0.6)]
    theta: f64,
    #[arg(long, default_value_t = 0.2)]
    floor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    pseudo: PathBuf,
    /// Image-level object tags, e.g. 1,3.
    #[arg(long)]
    labels: String,
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    r3: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Write the gradient with respect to the scores.
    #[arg(long)]
    grad_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Number of classes including background; inferred from the masks if omitted.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    boundary: bool,
    #[arg(long, default_value_t = 0.05)]
    d_frac: f64,
    /// Fixed band width in pixels, overriding --d-frac.
    #[arg(long)]
    d_pixels: Option<u32>,
    /// Per-class table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "shapes")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_img: PathBuf,
    #[arg(long)]
    out_gt: PathBuf,
    /// Degraded raw scores (log-probabilities) for the scene.
    #[arg(long)]
    out_scores: Option<PathBuf>,
    /// `{"present": [...]}` for the scene.
    #[arg(long)]
    out_labels: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "two-tone-object")]
    kind: String,
    #[arg(long, default_value_t = 20)]
    scenes: u64,
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9,1.0")]
    alphas: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    blur: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f32,
    #[arg(long, default_value_t = 2.0)]
    gain: f32,
    /// Seed refinement with exact one-hot ground truth instead of degraded scores.
    #[arg(long)]
    perfect: bool,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

enum Failure {
    Error(Error),
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Selfinfo(a) => selfinfo(a),
        Command::Dropmask(a) => dropmask(a),
        Command::Refine(a) => refine(a),
        Command::Pseudomask(a) => pseudomask(a),
        Command::Loss(a) => loss(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth_cmd(a),
        Command::SweepAlpha(a) => sweep(a),
        Command::Pipeline(a) => pipeline(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(n)) => {
            eprintln!("error: {n} item(s) failed, see summary.json");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_json(v: &Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json values always serialize")
    );
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Error> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Parameter(format!("bad {what} {t:?}")))
        })
        .collect()
}

fn read_grid(path: &Path) -> Result<Tensor3<f32>, Error> {
    if path.extension().is_some_and(|e| e == "dtf") {
        read_dtf(path)
    } else {
        Ok(read_image_png(path)?.into_tensor())
    }
}

fn selfinfo(a: SelfinfoArgs) -> CliResult {
    let params = ScmParams {
        patch_side: a.patch,
        neighbor_radius: a.radius,
        n_samples: a.samples,
        bandwidth: a.bandwidth,
        seed: a.seed,
        ..ScmParams::default()
    };
    let info = self_information(&read_grid(&a.input)?, &params)?;
    write_dtf(&a.out, &info.to_tensor())?;
    Ok(())
}

fn dropmask(a: DropmaskArgs) -> CliResult {
    let params = ScmParams {
        temperature: a.tau,
        target_rate: a.rate,
        seed: a.seed,
        ..ScmParams::default()
    };
    let info = InfoMap::from_tensor(&read_dtf(&a.info)?)?;
    let probs = drop_probability(&info, &params)?;
    let mask = sample_drop_mask(&probs, a.seed);
    write_bool_png(&a.out, mask.height, mask.width, &mask.bits)?;
    if let Some(p) = a.probs_out {
        write_dtf(&p, &probs.to_tensor())?;
    }
    Ok(())
}

fn refine(a: RefineArgs) -> CliResult {
    let image = read_image_png(&a.image)?;
    let mut scores = read_dtf(&a.scores)?;
    if a.add_background {
        scores = append_background_plane(&scores);
    }
    if !a.normalized {
        scores = normalize_scores(&scores);
    }
    let params = SprParams {
        alpha: a.alpha,
        iterations: a.iters,
        radii: parse_list(&a.radii, "radius")?,
        recompute_affinities: a.recompute,
        sigma_mode: if a.global_sigma {
            SigmaMode::Global
        } else {
            SigmaMode::Local
        },
        ..SprParams::default()
    };
    let present = ClassSet::parse_list(&a.present)?;
    let refined = spr(&image, &scores, &present, &params)?;
    write_dtf(&a.out, &refined)?;
    Ok(())
}

fn pseudomask(a: PseudomaskArgs) -> CliResult {
    let refined = read_dtf(&a.scores)?;
    let params = SprParams {
        theta_frac: a.theta,
        floor: a.floor,
        ..SprParams::default()
    };
    let (mask, _) = pseudo_mask(&refined, &ClassSet::parse_list(&a.present)?, &params)?;
    write_mask_png(&a.out, &mask)?;
    Ok(())
}

fn loss(a: LossArgs) -> CliResult {
    let scores = read_dtf(&a.scores)?;
    let pseudo = read_mask_png(&a.pseudo)?;
    let valid = ValidMask::from_labels(&pseudo);
    let present = ClassSet::parse_list(&a.labels)?;
    let k = scores.channels().saturating_sub(1);
    let labels = ImageLabels::from_present(&present, k)?;
    let params = LossParams {
        margin: a.gamma,
        region_radius: a.r3,
        ..LossParams::default()
    };
    let report = total_loss(&scores, &labels, &pseudo, &valid, a.lambda, &params)?;
    if let Some(path) = a.grad_out {
        write_dtf(&path, &report.grad_scores)?;
    }
    print_json(&report.to_json());
    Ok(())
}

fn infer_classes(a: &LabelMask, b: &LabelMask) -> usize {
    a.labels()
        .iter()
        .chain(b.labels())
        .filter(|&&l| l != IGNORE)
        .map(|&l| usize::from(l) + 1)
        .max()
        .unwrap_or(1)
        .max(2)
}

fn eval(a: EvalArgs) -> CliResult {
    let pred = read_mask_png(&a.pred)?;
    let gt = read_mask_png(&a.gt)?;
    let k1 = a.classes.unwrap_or_else(|| infer_classes(&pred, &gt));
    let mut cm = ConfusionMatrix::new(k1);
    cm.accumulate(&pred, &gt)?;
    let iou = cm.miou()?;
    let mut report = json!({ "per_class": iou.per_class, "miou": iou.mean });
    let biou = if a.boundary {
        let params = BoundaryParams {
            d_frac: a.d_frac,
            d_pixels: a.d_pixels,
        };
        let b = boundary_iou(&pred, &gt, k1, &params)?;
        report["biou"] = json!(b.mean);
        report["biou_per_class"] = json!(b.per_class);
        report["d"] = json!(b.d);
        Some(b.per_class)
    } else {
        None
    };
    if let Some(path) = a.csv {
        write_csv(&path, &iou.per_class, biou.as_deref())?;
    }
    print_json(&report);
    Ok(())
}

fn write_csv(path: &Path, iou: &[Option<f64>], biou: Option<&[Option<f64>]>) -> Result<(), Error> {
    let io_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut header = vec!["class", "iou"];
    if biou.is_some() {
        header.push("biou");
    }
    w.write_record(&header).map_err(io_err)?;
    for (c, &v) in iou.iter().enumerate() {
        let mut row = vec![c.to_string(), cell(v)];
        if let Some(b) = biou {
            row.push(cell(b[c]));
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> CliResult {
    let kind: SceneKind = a.kind.parse()?;
    let scene = synth(kind, a.h, a.w, a.seed)?;
    write_image_png(&a.out_img, &scene.image)?;
    write_mask_png(&a.out_gt, &scene.gt)?;
    if let Some(path) = a.out_scores {
        let probs = degrade_scores(&scene.gt, SYNTH_CHANNELS, &Degradation::default(), a.seed)?;
        write_dtf(&path, &probs.map(|v| v.max(1e-6).ln()))?;
    }
    if let Some(path) = a.out_labels {
        let present: Vec<usize> = scene.present.objects().collect();
        write_json(&path, &json!({ "present": present }))?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult {
    let kind: SceneKind = a.kind.parse()?;
    let alphas: Vec<f64> = parse_list(&a.alphas, "alpha")?;
    let degradation = Degradation {
        blur: a.blur,
        noise: a.noise,
        gain: a.gain,
    };
    let mut scenes = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..a.scenes {
        let s = synth(kind, a.h, a.w, a.seed + i)?;
        seeds.push(if a.perfect {
            one_hot_scores(&s.gt, SYNTH_CHANNELS)?
        } else {
            degrade_scores(&s.gt, SYNTH_CHANNELS, &degradation, a.seed + i)?
        });
        scenes.push(s);
    }
    let params = SprParams {
        iterations: a.iters,
        ..SprParams::default()
    };
    let table = alpha_sweep(&scenes, &seeds, &alphas, &params)?;
    print!("{}", table.to_rows());
    if let Some(path) = a.json {
        write_json(
            &path,
            &serde_json::to_value(&table).expect("table serializes"),
        )?;
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> CliResult {
    let config = PipelineConfig::load(&a.config)?;
    let summary = run_pipeline(&config)?;
    eprintln!(
        "{} item(s), {} failed",
        summary.num_items, summary.num_failed
    );
    if summary.success() {
        Ok(())
    } else {
        Err(Failure::Partial(summary.num_failed))
    }
}
