//! Command-line front end.
//!
//! Every verb turns its flags into an options record, lays an optional
//! config file over it (file values win), writes the result to
//! `manifest.json` in the output directory and then runs. Exit status is
//! 0 on success, 1 for usage and validation errors and 2 for failures
//! while running.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::annotate::{annotate_record, parse_template, AnnotationRules, SceneInput};
use crate::checkpoint::Checkpoint;
use crate::controlnet::{downsample_cloud, make_semantic_condition, make_sparse_condition, ConditionImage, ControlExample, ControlNet, ControlState};
use crate::engine::ParamStore;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, EvalConfig};
use crate::io::{read_cloud, read_jsonl, read_range_image, write_cloud, write_jsonl, write_range_image};
use crate::nn::UNetConfig;
use crate::rangemap::{normalize, project, unproject, NormalizedImage, PointCloud, RangeImage, SensorConfig};
use crate::sampling::{generate, generate_controlled, load_denoiser};
use crate::schedule::cosine_schedule;
use crate::synthscene::{generate_scene, RandomScene, SceneSpec, LABEL_COUNT};
use crate::textenc::HashTextEncoder;
use crate::training::{lr_at, LossReport, TrainConfig, TrainExample, TrainState};

pub const THREADS_ENV: &str = "T2LDM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "t2ldm", version, about = "Text-to-LiDAR range-map diffusion toolkit")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Verb {
    /// Render random street scenes to point clouds with sidecar annotations.
    Synth(SynthArgs),
    /// Caption box sets with the rule-based annotator.
    Annotate(AnnotateArgs),
    /// Train the denoiser, with or without representation guidance.
    Train(TrainArgs),
    /// Draw point clouds from a trained checkpoint for one prompt.
    Sample(SampleArgs),
    /// Train a control branch on top of a frozen denoiser.
    ControlTrain(ControlTrainArgs),
    /// Densify sparse or semantic inputs with a control checkpoint.
    Upsample(UpsampleArgs),
    /// Keep a farthest-point subset of every input cloud.
    Downsample(DownsampleArgs),
    /// Score generated clouds against a reference set.
    Eval(EvalArgs),
    /// Convert point clouds to range images, or back with `--inverse`.
    Project(ProjectArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SensorArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    fov_up: f64,
    #[arg(long, default_value_t = -30.0, allow_negative_numbers = true)]
    fov_down: f64,
    #[arg(long, default_value_t = 1.0)]
    depth_min: f64,
    #[arg(long, default_value_t = 50.0)]
    depth_max: f64,
}

impl SensorArgs {
    fn config(&self) -> Result<SensorConfig> {
        SensorConfig::new(self.height, self.width, self.fov_up, self.fov_down, self.depth_min, self.depth_max)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt parts, e.g. `quantity,location`.
    #[arg(long, default_value = "quantity")]
    template: String,
    /// No street walls.
    #[arg(long)]
    open_ground: bool,
    #[arg(long)]
    max_cars: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    sensor: SensorArgs,
    #[arg(skip)]
    scene: RandomScene,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct AnnotateArgs {
    /// A directory of scene sidecars or one JSONL file of box sets.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "quantity")]
    template: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(skip)]
    rules: AnnotationRules,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct TrainArgs {
    /// Directory of `.bin` clouds with sidecars.
    #[arg(long)]
    data: PathBuf,
    /// Prompts by scene id, as written by `annotate`; sidecar prompts otherwise.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Train without the guidance network.
    #[arg(long)]
    no_scrg: bool,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[command(flatten)]
    #[serde(flatten)]
    sensor: SensorArgs,
    #[arg(skip)]
    train: Option<TrainConfig>,
    #[arg(skip)]
    unet: Option<UNetConfig>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WeightSet {
    Ema,
    Params,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Empty for unconditional samples.
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    cfg_scale: f64,
    #[arg(long, value_enum, default_value_t = WeightSet::Ema)]
    weights: WeightSet,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ControlTask {
    /// Condition on a farthest-point subsample.
    Upsample,
    /// Condition on per-point semantic labels.
    Semantic,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ControlTrainArgs {
    /// Denoiser checkpoint from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ControlTask::Upsample)]
    task: ControlTask,
    #[arg(long, default_value_t = 4)]
    rate: usize,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 5.0)]
    snr_gamma: f64,
    /// Also feed the noisy image to the control branch.
    #[arg(long)]
    with_noisy_input: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct UpsampleArgs {
    /// Control checkpoint from `control-train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// A `.bin` cloud or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct DownsampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    rate: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Directory for `report.json`; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 50.0)]
    range: f64,
    /// Skip the prompt-matching rate even when prompts are present.
    #[arg(long)]
    no_tbr: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(skip)]
    eval: Option<EvalConfig>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
struct ProjectArgs {
    /// A `.bin` cloud (or `.rmg` image with `--inverse`), or a directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    inverse: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    sensor: SensorArgs,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the verb and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).try_init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.verb) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for input the caller can fix, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::RejectedInput(_) | Error::ShapeMismatch { .. } => 1,
        _ => 2,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize =
        raw.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // A pool built earlier in the same process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::Synth(a) => synth(a),
        Verb::Annotate(a) => annotate(a),
        Verb::Train(a) => train(a),
        Verb::Sample(a) => sample(a),
        Verb::ControlTrain(a) => control_train(a),
        Verb::Upsample(a) => upsample(a),
        Verb::Downsample(a) => downsample(a),
        Verb::Eval(a) => eval(a),
        Verb::Project(a) => project_verb(a),
    }
}

// ---------------------------------------------------------------- options

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Lays the config file over `opts`. JSON files merge objects key by key;
/// other files hold `key = value` lines where dotted keys reach into
/// nested records and values are JSON, comma lists or bare strings.
fn resolve<T: Serialize + DeserializeOwned>(opts: &T, config: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(opts)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("config {}: {e}", path.display())))?;
        let overlay = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text).map_err(|e| bad(format!("config {}: {e}", path.display())))?
        } else {
            kv_overlay(&text)?
        };
        merge(&mut value, overlay);
    }
    serde_json::from_value(value).map_err(|e| bad(format!("options: {e}")))
}

fn kv_overlay(text: &str) -> Result<Value> {
    let mut root = Value::Object(Default::default());
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, v) = line.split_once('=').ok_or_else(|| bad(format!("config line {}: expected key = value", n + 1)))?;
        let v = v.trim();
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| {
            if v.contains(',') {
                Value::Array(v.split(',').map(|p| serde_json::from_str(p.trim()).unwrap_or_else(|_| Value::String(p.trim().into()))).collect())
            } else {
                Value::String(v.into())
            }
        });
        let mut slot = &mut root;
        for part in key.trim().split('.') {
            if !slot.is_object() {
                *slot = Value::Object(Default::default());
            }
            slot = slot.as_object_mut().expect("object").entry(part.to_owned()).or_insert(Value::Null);
        }
        *slot = parsed;
    }
    Ok(root)
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn write_manifest<T: Serialize>(dir: &Path, verb: &str, opts: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = json!({ "verb": verb, "version": env!("CARGO_PKG_VERSION"), "options": opts });
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

// ------------------------------------------------------------- file sets

/// Files with `ext` under `path` (or `path` itself), sorted by name.
fn files_with_ext(path: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(bad(format!("{} does not exist", path.display())));
    }
    let mut files: Vec<PathBuf> =
        fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext)).collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sidecar_path(cloud: &Path) -> PathBuf {
    cloud.with_extension("jsonl")
}

/// First record of the cloud's sidecar, if it has one.
fn read_sidecar(cloud: &Path) -> Result<Option<Value>> {
    let path = sidecar_path(cloud);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(read_jsonl::<Value>(&path)?.into_iter().next())
}

fn sidecar_labels(cloud: &Path) -> Result<Option<Vec<u32>>> {
    match read_sidecar(cloud)?.and_then(|v| v.get("labels").cloned()) {
        Some(v) => Ok(Some(serde_json::from_value(v)?)),
        None => Ok(None),
    }
}

/// Clouds with their file stems; labels are attached when `labels` is set.
fn load_clouds(path: &Path, labels: bool) -> Result<Vec<(String, PathBuf, PointCloud)>> {
    let files = files_with_ext(path, "bin")?;
    if files.is_empty() {
        return Err(bad(format!("no .bin clouds under {}", path.display())));
    }
    files
        .into_iter()
        .map(|f| {
            let mut cloud = read_cloud(&f)?;
            if labels {
                let l = sidecar_labels(&f)?.ok_or_else(|| bad(format!("{} has no labelled sidecar", f.display())))?;
                cloud = PointCloud::with_labels(cloud.points, l)?;
            }
            Ok((stem(&f), f, cloud))
        })
        .collect()
}

// ------------------------------------------------------------------ plots

/// Depth as brightness (near is bright), rows stretched for legibility.
pub fn range_png(img: &RangeImage, path: &Path) -> Result<()> {
    let cfg = &img.config;
    let stretch = (256 / cfg.height.max(1)).clamp(1, 8) as u32;
    let span = (cfg.depth_max - cfg.depth_min).max(f64::EPSILON);
    let out = GrayImage::from_fn(cfg.width as u32, cfg.height as u32 * stretch, |x, y| {
        let d = img.depth[(y / stretch) as usize * cfg.width + x as usize];
        if d <= 0.0 {
            Luma([0])
        } else {
            Luma([(40.0 + 215.0 * (1.0 - ((d - cfg.depth_min) / span).clamp(0.0, 1.0))) as u8])
        }
    });
    out.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Top-down scatter over `±extent` meters, forward pointing up.
pub fn bev_png(cloud: &PointCloud, extent: f64, path: &Path) -> Result<()> {
    const SIDE: u32 = 400;
    let mut out = GrayImage::new(SIDE, SIDE);
    let scale = SIDE as f64 / (2.0 * extent);
    let pixel = |x: f64, y: f64| -> Option<(u32, u32)> {
        let col = (SIDE as f64 / 2.0 - y * scale).floor();
        let row = (SIDE as f64 / 2.0 - x * scale).floor();
        ((0.0..SIDE as f64).contains(&col) && (0.0..SIDE as f64).contains(&row)).then_some((col as u32, row as u32))
    };
    for p in &cloud.points {
        if let Some((c, r)) = pixel(p.x, p.y) {
            out.put_pixel(c, r, Luma([255]));
        }
    }
    let mid = SIDE / 2;
    for d in 0..5 {
        out.put_pixel(mid - 2 + d, mid, Luma([128]));
        out.put_pixel(mid, mid - 2 + d, Luma([128]));
    }
    out.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_cloud_outputs(dir: &Path, name: &str, cloud: &PointCloud, img: &RangeImage) -> Result<()> {
    write_cloud(dir.join(format!("{name}.bin")), cloud)?;
    bev_png(cloud, img.config.depth_max, &dir.join(format!("{name}_bev.png")))?;
    range_png(img, &dir.join(format!("{name}_range.png")))
}

// ------------------------------------------------------------------ verbs

fn synth(mut a: SynthArgs) -> Result<()> {
    if a.open_ground {
        a.scene.street_width = None;
    }
    if let Some(m) = a.max_cars {
        a.scene.cars = (a.scene.cars.0.min(m), m);
    }
    let a = resolve(&a, a.config.as_deref())?;
    let sensor = a.sensor.config()?;
    let template = parse_template(&a.template)?;
    write_manifest(&a.out, "synth", &a)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.scenes {
        let id = format!("{i:06}");
        let spec = SceneSpec::random(sensor, &a.scene, seeds.gen())?;
        let rec = generate_scene(&spec, &template)?;
        write_cloud(a.out.join(format!("{id}.bin")), &rec.cloud)?;
        write_jsonl(a.out.join(format!("{id}.jsonl")), &[rec.sidecar(&id)])?;
    }
    log::info!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let a = resolve(&a, a.config.as_deref())?;
    let template = parse_template(&a.template)?;
    let inputs: Vec<SceneInput> = if a.input.is_dir() {
        files_with_ext(&a.input, "jsonl")?.iter().map(read_jsonl::<SceneInput>).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect()
    } else {
        read_jsonl(&a.input)?
    };
    if inputs.is_empty() {
        return Err(bad(format!("no box sets under {}", a.input.display())));
    }
    let records = inputs.iter().enumerate().map(|(i, s)| annotate_record(s, i, &a.rules, &template)).collect::<Result<Vec<_>>>()?;
    write_manifest(&a.out, "annotate", &a)?;
    write_jsonl(a.out.join("annotations.jsonl"), &records)?;
    log::info!("annotated {} scenes", records.len());
    Ok(())
}

fn prompts_by_id(path: &Path) -> Result<BTreeMap<String, String>> {
    let records: Vec<Value> = read_jsonl(path)?;
    records
        .into_iter()
        .map(|r| match (r.get("id").and_then(Value::as_str), r.get("prompt").and_then(Value::as_str)) {
            (Some(id), Some(p)) => Ok((id.to_owned(), p.to_owned())),
            _ => Err(bad(format!("{}: records need 'id' and 'prompt'", path.display()))),
        })
        .collect()
}

fn sidecar_prompt(cloud: &Path) -> Result<Option<String>> {
    Ok(read_sidecar(cloud)?.and_then(|v| v.get("prompt").and_then(Value::as_str).map(str::to_owned)))
}

fn train(mut a: TrainArgs) -> Result<()> {
    let mut cfg = a.train.take().unwrap_or_else(TrainConfig::desk);
    cfg.seed = a.seed;
    cfg.scrg = !a.no_scrg;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
        cfg.lr_min = cfg.lr_min.min(lr);
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    a.train = Some(cfg);
    if a.unet.is_none() {
        a.unet = Some(UNetConfig { fov_up: a.sensor.fov_up, fov_down: a.sensor.fov_down, ..UNetConfig::desk(a.base_channels) });
    }
    let a = resolve(&a, a.config.as_deref())?;
    let (cfg, unet) = (a.train.clone().expect("filled"), a.unet.clone().expect("filled"));
    cfg.validate()?;
    let sensor = a.sensor.config()?;
    let annotations = a.annotations.as_deref().map(prompts_by_id).transpose()?;
    let encoder = HashTextEncoder::default();
    let data = load_clouds(&a.data, false)?
        .into_iter()
        .map(|(id, path, cloud)| {
            let prompt = match &annotations {
                Some(map) => map.get(&id).cloned().ok_or_else(|| bad(format!("no annotation for scene '{id}'")))?,
                None => sidecar_prompt(&path)?.unwrap_or_default(),
            };
            TrainExample::from_cloud(&cloud, &prompt, &sensor, &encoder)
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&a.out, "train", &a)?;
    let mut state = TrainState::new(unet.clone(), &cfg)?;
    let mut log_file = std::io::BufWriter::new(fs::File::create(a.out.join("loss.csv"))?);
    writeln!(log_file, "{}", LossReport::CSV_HEADER)?;
    let mut write_err = None;
    state.run(&data, &cfg, |r| {
        if let Err(e) = writeln!(log_file, "{}", r.csv_row()) {
            write_err.get_or_insert(e);
        }
        if r.step % 100 == 0 || r.step + 1 == cfg.total_steps {
            log::info!("step {} loss {:.5} lr {:.2e}", r.step, r.total, lr_at(r.step, &cfg));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log_file.flush()?;
    let meta = json!({ "kind": "denoiser", "unet": unet, "train": cfg, "sensor": sensor, "step": state.step });
    let mut ck = Checkpoint::new(meta);
    ck.add_store("params", &state.dn_params);
    ck.add_store("ema", &state.ema);
    ck.save(a.out.join("model.ckpt"))?;
    log::info!("saved {}", a.out.join("model.ckpt").display());
    Ok(())
}

/// Denoiser rebuilt from a training checkpoint.
fn sample(a: SampleArgs) -> Result<()> {
    let a = resolve(&a, a.config.as_deref())?;
    if a.n == 0 {
        return Err(bad("--n must be positive"));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let ns = match a.weights {
        WeightSet::Ema => "ema",
        WeightSet::Params => "params",
    };
    let (dn, params) = load_denoiser(&ck, ns)?;
    let sensor: SensorConfig = ck.meta_field("sensor")?;
    let cfg: TrainConfig = ck.meta_field("train")?;
    let schedule = cosine_schedule(cfg.timesteps)?;
    let condition = HashTextEncoder::default().encode_text(&a.prompt);
    write_manifest(&a.out, "sample", &a)?;
    for i in 0..a.n {
        let seed = a.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64);
        let img = generate(&dn, &params, &sensor, &condition, a.cfg_scale, &schedule, &[seed])?.remove(0);
        let range = crate::rangemap::denormalize(&img, &sensor)?;
        let cloud = unproject(&range);
        let name = format!("sample_{i:03}");
        write_cloud_outputs(&a.out, &name, &cloud, &range)?;
        write_jsonl(a.out.join(format!("{name}.jsonl")), &[json!({ "id": name, "prompt": a.prompt, "seed": seed })])?;
        log::info!("{name}: {} points", cloud.len());
    }
    Ok(())
}

fn condition_for(task: ControlTask, cloud: &PointCloud, rate: usize, sensor: &SensorConfig) -> Result<ConditionImage> {
    match task {
        ControlTask::Upsample => make_sparse_condition(cloud, rate, sensor),
        ControlTask::Semantic => make_semantic_condition(cloud, LABEL_COUNT, sensor),
    }
}

fn control_train(a: ControlTrainArgs) -> Result<()> {
    let a = resolve(&a, a.config.as_deref())?;
    if a.batch == 0 || a.steps == 0 {
        return Err(bad("batch and steps must be positive"));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let (dn, dn_params) = load_denoiser(&ck, "ema")?;
    let sensor: SensorConfig = ck.meta_field("sensor")?;
    let cfg: TrainConfig = ck.meta_field("train")?;
    let data = load_clouds(&a.data, a.task == ControlTask::Semantic)?
        .into_iter()
        .map(|(_, _, cloud)| {
            let target = normalize(&project(&cloud, &sensor)?);
            Ok(ControlExample { condition: condition_for(a.task, &cloud, a.rate, &sensor)?, target })
        })
        .collect::<Result<Vec<_>>>()?;
    let channels = data[0].condition.channels;
    write_manifest(&a.out, "control-train", &a)?;
    let unet = dn.config.clone();
    let mut state = ControlState::new(dn, dn_params, channels, a.with_noisy_input, cfg.timesteps, a.seed)?;
    let mut pick = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(2));
    let mut log_file = std::io::BufWriter::new(fs::File::create(a.out.join("control_loss.csv"))?);
    writeln!(log_file, "step,loss")?;
    for step in 0..a.steps {
        let batch: Vec<ControlExample> = (0..a.batch).map(|_| data[pick.gen_range(0..data.len())].clone()).collect();
        let loss = state.train_step(&batch, a.lr, a.weight_decay, a.snr_gamma)?;
        writeln!(log_file, "{step},{loss:.8}")?;
        if step % 100 == 0 {
            log::info!("control step {step} loss {loss:.5}");
        }
    }
    log_file.flush()?;
    let meta = json!({
        "kind": "control",
        "unet": unet,
        "sensor": sensor,
        "timesteps": cfg.timesteps,
        "task": a.task,
        "rate": a.rate,
        "condition_channels": channels,
        "with_noisy_input": a.with_noisy_input,
        "step": state.step,
    });
    let mut out = Checkpoint::new(meta);
    out.add_store("dn", &state.dn_params);
    out.add_store("control", &state.params);
    out.save(a.out.join("control.ckpt"))?;
    Ok(())
}

fn upsample(a: UpsampleArgs) -> Result<()> {
    let a = resolve(&a, a.config.as_deref())?;
    let ck = Checkpoint::load(&a.ckpt)?;
    if !ck.has_namespace("control") {
        return Err(bad(format!("{} is not a control checkpoint", a.ckpt.display())));
    }
    let (dn, dn_params) = load_denoiser(&ck, "dn")?;
    let sensor: SensorConfig = ck.meta_field("sensor")?;
    let task: ControlTask = ck.meta_field("task")?;
    let schedule = cosine_schedule(ck.meta_field("timesteps")?)?;
    let mut params = ParamStore::new();
    let net = ControlNet::new(&dn, &dn_params, &mut params, ck.meta_field("condition_channels")?, ck.meta_field("with_noisy_input")?, 0)?;
    ck.load_store("control", &mut params)?;
    let inputs = load_clouds(&a.input, task == ControlTask::Semantic)?;
    write_manifest(&a.out, "upsample", &a)?;
    for (i, (name, _, cloud)) in inputs.iter().enumerate() {
        let condition = condition_for(task, cloud, 1, &sensor)?;
        let seed = a.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64);
        let img: NormalizedImage = generate_controlled(&dn, &dn_params, &net, &params, &sensor, &condition, &schedule, seed)?;
        let range = crate::rangemap::denormalize(&img, &sensor)?;
        write_cloud_outputs(&a.out, name, &unproject(&range), &range)?;
    }
    log::info!("wrote {} clouds", inputs.len());
    Ok(())
}

fn downsample(a: DownsampleArgs) -> Result<()> {
    let a = resolve(&a, a.config.as_deref())?;
    let inputs = load_clouds(&a.input, false)?;
    write_manifest(&a.out, "downsample", &a)?;
    for (name, path, cloud) in &inputs {
        let kept = downsample_cloud(cloud, a.rate)?;
        write_cloud(a.out.join(format!("{name}.bin")), &kept)?;
        if let Some(prompt) = sidecar_prompt(path)? {
            write_jsonl(a.out.join(format!("{name}.jsonl")), &[json!({ "id": name, "prompt": prompt })])?;
        }
    }
    Ok(())
}

fn eval(mut a: EvalArgs) -> Result<()> {
    if a.eval.is_none() {
        a.eval = Some(EvalConfig { grid: a.grid, range: a.range, ..EvalConfig::default() });
    }
    let a = resolve(&a, a.config.as_deref())?;
    let cfg = a.eval.clone().expect("filled");
    let gen = load_clouds(&a.gen, false)?;
    let reference: Vec<PointCloud> = load_clouds(&a.reference, false)?.into_iter().map(|(_, _, c)| c).collect();
    let prompts: Option<Vec<String>> = if a.no_tbr { None } else { gen.iter().map(|(_, p, _)| sidecar_prompt(p)).collect::<Result<Option<Vec<_>>>>()? };
    let clouds: Vec<PointCloud> = gen.into_iter().map(|(_, _, c)| c).collect();
    let report = evaluate(&clouds, &reference, prompts.as_deref(), &cfg)?;
    if let Some(out) = &a.out {
        write_manifest(out, "eval", &a)?;
        write_json(&out.join("report.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn project_verb(a: ProjectArgs) -> Result<()> {
    let a = resolve(&a, a.config.as_deref())?;
    let sensor = a.sensor.config()?;
    write_manifest(&a.out, "project", &a)?;
    if a.inverse {
        let files = files_with_ext(&a.input, "rmg")?;
        if files.is_empty() {
            return Err(bad(format!("no .rmg images under {}", a.input.display())));
        }
        for f in files {
            let img = read_range_image(&f, &sensor)?;
            write_cloud_outputs(&a.out, &stem(&f), &unproject(&img), &img)?;
        }
    } else {
        for (name, _, cloud) in load_clouds(&a.input, false)? {
            let img = project(&cloud, &sensor)?;
            write_range_image(a.out.join(format!("{name}.rmg")), &img)?;
            range_png(&img, &a.out.join(format!("{name}_range.png")))?;
            bev_png(&cloud, sensor.depth_max, &a.out.join(format!("{name}_bev.png")))?;
        }
    }
    Ok(())
}
