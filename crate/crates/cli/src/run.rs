use std::fs;
use std::path::{Path, PathBuf};

use msreg::evalkit::{
    dice, endpoint_error, make_synthetic_case, pair_metrics, select_atlas, track_sequence, warp_labels,
    SyntheticSpec,
};
use msreg::loss::{nlcc_loss, smoothness_penalty, LossReport, NLCC_EPS};
use msreg::multiscale::{register_multiscale, MultiScaleResult, ScaleInit, ScaleSchedule};
use msreg::optim::{train_population, TrainSpec};
use msreg::regnet::{self, NetParams, CHECKPOINT_VERSION};
use msreg::warp::warp;
use msreg::{Dims, DisplacementField, Image, Mask, Real};
use serde::Serialize;

use crate::config::{Mode, Precision, RunConfig};
use crate::io::{load_tensor, save_tensor, Tensor, TENSOR_VERSION};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Files written by a run.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    tensor_format: u32,
    checkpoint_format: u32,
    config: &'a RunConfig,
    schedule: ScaleSchedule,
}

#[derive(Serialize)]
struct TraceRow {
    scale: String,
    step: usize,
    reconstruction: f64,
    smoothness: f64,
    total: f64,
}

#[derive(Serialize)]
struct MetricRow {
    pair: usize,
    mse: f64,
    nlcc: f64,
}

#[derive(Serialize)]
struct BenchRow {
    case: usize,
    seed: u64,
    epe_mean: f64,
    epe_median: f64,
    epe_max: f64,
    mse: f64,
    nlcc: f64,
}

#[derive(Serialize)]
struct DiceRow {
    class: u32,
    dice: f64,
}

#[derive(Serialize)]
struct AtlasChoice {
    index: usize,
    name: String,
}

#[derive(Serialize)]
struct EvalRow {
    mse: f64,
    nlcc: f64,
    reconstruction: f64,
    smoothness: f64,
    total: f64,
}

struct Out {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Out {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn tensor<T: Real>(&mut self, name: &str, t: Tensor<T>) -> Result<(), CliError> {
        let p = self.path(name);
        save_tensor(&t, &p)?;
        Ok(())
    }

    fn csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<S: Serialize>(&mut self, name: &str, v: &S) -> Result<(), CliError> {
        let p = self.path(name);
        let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(p, s + "\n")?;
        Ok(())
    }
}

/// Runs one mode, writing artifacts and the manifest under `config.out_dir`.
pub fn run(config: &RunConfig) -> Result<RunSummary, CliError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let mut out = Out { dir: config.out_dir.clone(), written: Vec::new() };
    let manifest = Manifest {
        tool: "msreg",
        version: env!("CARGO_PKG_VERSION"),
        tensor_format: TENSOR_VERSION,
        checkpoint_format: CHECKPOINT_VERSION,
        config,
        schedule: config.schedule()?,
    };
    out.json(MANIFEST_FILE, &manifest)?;
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, &mut out)?,
        Precision::F64 => run_typed::<f64>(config, &mut out)?,
    }
    Ok(RunSummary { out_dir: out.dir, artifacts: out.written })
}

fn run_typed<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    log::info!("mode {:?}, precision {}", cfg.mode, T::TYPE_TAG);
    match cfg.mode {
        Mode::Register => register::<T>(cfg, out),
        Mode::Track => track::<T>(cfg, out),
        Mode::Segment => segment::<T>(cfg, out),
        Mode::Benchmark => benchmark::<T>(cfg, out),
        Mode::Train => train::<T>(cfg, out),
        Mode::Eval => eval::<T>(cfg, out),
    }
}

fn image<T: Real>(p: &Path) -> Result<Image<T>, CliError> {
    Ok(load_tensor::<T>(p)?.into_image()?)
}

fn train_spec(cfg: &RunConfig, ndim: usize) -> Result<TrainSpec, CliError> {
    Ok(TrainSpec {
        lambda: cfg.lambda,
        steps: cfg.steps,
        window: cfg.window_for(ndim)?,
        lr: cfg.lr,
        seed: cfg.seed,
    })
}

fn scale_init<T: Real>(cfg: &RunConfig, ndim: usize) -> Result<ScaleInit<T>, CliError> {
    match &cfg.checkpoint {
        Some(p) if cfg.mode != Mode::Train => {
            let params: NetParams<T> = regnet::load_checkpoint(p)?;
            if params.config().ndim != ndim {
                return Err(CliError::Config(format!(
                    "checkpoint is {}D, images are {ndim}D",
                    params.config().ndim
                )));
            }
            Ok(ScaleInit::WarmStart(params))
        }
        _ => Ok(ScaleInit::Fresh(cfg.net_config(ndim)?)),
    }
}

fn trace_rows<T>(r: &MultiScaleResult<T>) -> Vec<TraceRow> {
    r.scales
        .iter()
        .zip(&r.per_scale_traces)
        .flat_map(|(s, trace)| trace.iter().enumerate().map(move |(step, l)| row(s.to_string(), step, l)))
        .collect()
}

fn row(scale: String, step: usize, l: &LossReport) -> TraceRow {
    TraceRow { scale, step, reconstruction: l.reconstruction, smoothness: l.smoothness, total: l.total }
}

fn mask_or_full(cfg: &RunConfig, dims: Dims) -> Result<Mask, CliError> {
    match &cfg.mask {
        Some(p) => {
            let m = load_tensor::<f32>(p)?.into_mask()?;
            if m.dims() != dims {
                return Err(CliError::Config(format!("--mask grid {} does not match images {dims}", m.dims())));
            }
            Ok(m)
        }
        None => Ok(Mask::full(dims)),
    }
}

fn same_grid(a: Dims, b: Dims) -> Result<(), CliError> {
    if a != b {
        return Err(CliError::Config(format!("image grids differ: {a} vs {b}")));
    }
    Ok(())
}

fn register<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let moving: Image<T> = image(cfg.moving.as_deref().expect("validated"))?;
    let fixed: Image<T> = image(cfg.fixed.as_deref().expect("validated"))?;
    same_grid(moving.dims(), fixed.dims())?;
    let ndim = fixed.dims().ndim();
    let r = register_multiscale(&moving, &fixed, &cfg.schedule()?, &train_spec(cfg, ndim)?, scale_init(cfg, ndim)?)?;
    let mask = mask_or_full(cfg, fixed.dims())?;
    let m = pair_metrics(&moving, &fixed, &r.final_field, &mask)?;
    out.tensor("warped.mft", Tensor::Image(warp(&moving, &r.final_field)?))?;
    out.csv("trace.csv", trace_rows(&r))?;
    out.csv("metrics.csv", [MetricRow { pair: 0, mse: m.mse, nlcc: m.nlcc }])?;
    out.tensor("field.mft", Tensor::Field(r.final_field))?;
    Ok(())
}

/// Image files of a directory in name order.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("mft" | "pgm")));
    v.sort();
    Ok(v)
}

fn track<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let paths = list_images(cfg.frames.as_deref().expect("validated"))?;
    if paths.len() < 2 {
        return Err(CliError::Config(format!("--frames holds {} images, need >= 2", paths.len())));
    }
    let frames: Vec<Image<T>> = paths.iter().map(|p| image(p)).collect::<Result<_, _>>()?;
    for f in &frames[1..] {
        same_grid(frames[0].dims(), f.dims())?;
    }
    let dims = frames[0].dims();
    let mask = cfg.mask.as_ref().map(|_| mask_or_full(cfg, dims)).transpose()?;
    let r = track_sequence(&frames, &cfg.schedule()?, &train_spec(cfg, dims.ndim())?, scale_init(cfg, dims.ndim())?, mask.as_ref())?;
    out.csv(
        "metrics.csv",
        r.metrics.iter().enumerate().map(|(pair, m)| MetricRow { pair, mse: m.mse, nlcc: m.nlcc }),
    )?;
    for (k, f) in r.fields.into_iter().enumerate() {
        out.tensor(&format!("field_{k:03}.mft"), Tensor::Field(f))?;
    }
    Ok(())
}

/// `(name, image path, labels path)` of every atlas in `dir`.
fn list_atlases(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let mut v = Vec::new();
    for p in list_images(dir)? {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some(name) = stem.strip_suffix("_image") {
            let labels = dir.join(format!("{name}_labels.mft"));
            if !labels.exists() {
                return Err(CliError::Config(format!("atlas {name} has no {}", labels.display())));
            }
            v.push((name.to_string(), p.clone(), labels));
        }
    }
    if v.is_empty() {
        return Err(CliError::Config(format!("no <name>_image.mft|pgm atlases in {}", dir.display())));
    }
    Ok(v)
}

fn segment<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let test: Image<T> = image(cfg.fixed.as_deref().expect("validated"))?;
    let entries = list_atlases(cfg.atlas_dir.as_deref().expect("validated"))?;
    let atlases: Vec<Image<T>> = entries.iter().map(|(_, p, _)| image(p)).collect::<Result<_, _>>()?;
    for a in &atlases {
        same_grid(test.dims(), a.dims())?;
    }
    let ndim = test.dims().ndim();
    let spec = train_spec(cfg, ndim)?;
    let idx = select_atlas(&test, &atlases, &spec.window)?;
    let (name, _, labels_path) = &entries[idx];
    log::info!("selected atlas {idx} ({name})");
    let atlas_labels = load_tensor::<T>(labels_path)?.into_labels()?;
    same_grid(test.dims(), atlas_labels.dims())?;
    let r = register_multiscale(&atlases[idx], &test, &cfg.schedule()?, &spec, scale_init(cfg, ndim)?)?;
    let warped = warp_labels(&atlas_labels, &r.final_field)?;
    out.json("atlas.json", &AtlasChoice { index: idx, name: name.clone() })?;
    if let Some(p) = &cfg.labels {
        let truth = load_tensor::<T>(p)?.into_labels()?;
        let rows = (1..truth.classes().max(warped.classes()))
            .map(|c| Ok(DiceRow { class: c, dice: dice(&warped, &truth, c)? }))
            .collect::<Result<Vec<_>, CliError>>()?;
        out.csv("dice.csv", rows)?;
    }
    out.csv("trace.csv", trace_rows(&r))?;
    out.tensor::<T>("warped_labels.mft", Tensor::Labels(warped))?;
    out.tensor("field.mft", Tensor::Field(r.final_field))?;
    Ok(())
}

/// Synthetic case `k` of a benchmark or training population.
fn synthetic_spec(cfg: &RunConfig, k: usize) -> SyntheticSpec {
    let smoothness = *cfg.size.iter().min().expect("validated") as f64 / 8.0;
    SyntheticSpec::new(&cfg.size, cfg.max_disp, smoothness, cfg.seed.wrapping_add(k as u64))
}

fn benchmark<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let mut rows = Vec::with_capacity(cfg.cases);
    for k in 0..cfg.cases {
        let s = synthetic_spec(cfg, k);
        let case = make_synthetic_case::<T>(&s)?;
        let ndim = case.base.dims().ndim();
        let r = register_multiscale(&case.base, &case.warped, &schedule, &train_spec(cfg, ndim)?, scale_init(cfg, ndim)?)?;
        let e = endpoint_error(&r.final_field, &case.field, None)?;
        let m = pair_metrics(&case.base, &case.warped, &r.final_field, &Mask::full(case.base.dims()))?;
        log::info!("case {k}: median endpoint error {:.4}", e.median);
        rows.push(BenchRow {
            case: k,
            seed: s.seed,
            epe_mean: e.mean,
            epe_median: e.median,
            epe_max: e.max,
            mse: m.mse,
            nlcc: m.nlcc,
        });
        out.tensor(&format!("case_{k:03}_field.mft"), Tensor::Field(r.final_field))?;
    }
    out.csv("report.csv", rows)
}

fn train<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let images: Vec<(Image<T>, Image<T>)> = match &cfg.frames {
        Some(dir) => {
            let paths = list_images(dir)?;
            let imgs: Vec<Image<T>> = paths.iter().map(|p| image(p)).collect::<Result<_, _>>()?;
            if imgs.len() < 2 {
                return Err(CliError::Config("training needs >= 2 images".into()));
            }
            for im in &imgs[1..] {
                same_grid(imgs[0].dims(), im.dims())?;
            }
            // consecutive images in both directions
            imgs.windows(2)
                .flat_map(|w| [(w[0].clone(), w[1].clone()), (w[1].clone(), w[0].clone())])
                .collect()
        }
        None => (0..cfg.cases)
            .map(|k| make_synthetic_case::<T>(&synthetic_spec(cfg, k)).map(|c| (c.base, c.warped)))
            .collect::<Result<_, _>>()?,
    };
    if images.is_empty() {
        return Err(CliError::Config("no training pairs".into()));
    }
    let ndim = images[0].0.dims().ndim();
    let params = regnet::init_params::<T>(&cfg.net_config(ndim)?, cfg.seed)?;
    let pairs: Vec<(&Image<T>, &Image<T>)> = images.iter().map(|(m, f)| (m, f)).collect();
    let (params, trace) = train_population(params, &pairs, &train_spec(cfg, ndim)?)?;
    out.csv("trace.csv", trace.iter().enumerate().map(|(k, l)| row("1".into(), k, l)))?;
    let ckpt = cfg.checkpoint.clone().expect("validated");
    regnet::save_checkpoint(&params, &ckpt)?;
    out.written.push(ckpt);
    Ok(())
}

fn eval<T: Real>(cfg: &RunConfig, out: &mut Out) -> Result<(), CliError> {
    let moving: Image<T> = image(cfg.moving.as_deref().expect("validated"))?;
    let fixed: Image<T> = image(cfg.fixed.as_deref().expect("validated"))?;
    same_grid(moving.dims(), fixed.dims())?;
    let field: DisplacementField<T> = match &cfg.field {
        Some(p) => load_tensor::<T>(p)?.into_field()?,
        None => {
            let params: NetParams<T> = regnet::load_checkpoint(cfg.checkpoint.as_deref().expect("validated"))?;
            let (f, _) = regnet::predict_field(&params, &fixed, &moving)?;
            out.tensor("field.mft", Tensor::Field(f.clone()))?;
            f
        }
    };
    same_grid(fixed.dims(), field.dims())?;
    let mask = mask_or_full(cfg, fixed.dims())?;
    let m = pair_metrics(&moving, &fixed, &field, &mask)?;
    let window = cfg.window_for(fixed.dims().ndim())?;
    let window: Vec<usize> = window.iter().zip(fixed.dims().extents()).map(|(&w, &e)| w.min(e)).collect();
    let (rec, _) = nlcc_loss(&fixed, &warp(&moving, &field)?, &window, T::c(NLCC_EPS))?;
    let (smooth, _) = smoothness_penalty(&field)?;
    let l = LossReport::new(rec.f64(), smooth.f64(), cfg.lambda);
    out.csv(
        "metrics.csv",
        [EvalRow { mse: m.mse, nlcc: m.nlcc, reconstruction: l.reconstruction, smoothness: l.smoothness, total: l.total }],
    )
}

