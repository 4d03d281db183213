mod manifest;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use gs4d_core::buffer::{frame_relpath, Image};
use gs4d_core::deform::{Checkpoint, SceneBounds};
use gs4d_core::metrics::{psnr, ssim, MetricReport, PairMetrics};
use gs4d_core::ply::{read_ply, write_ply, PlyPrecision};
use gs4d_core::rasterizer::{render, RenderOptions};
use gs4d_core::scenegen::{render_ground_truth, MultiViewSequence, RigFile, SceneSpec, RIG_FILE, SEQUENCE_FILE};
use gs4d_core::trainer::{
    anchor_frame, coarse_fit, cold_start_init, num_fine_steps, perturbed_init, fine_step, FitState, IterationLog,
    TrainConfig,
};
use gs4d_core::viewformer::{format_ledger, shape_ledger, LatentSpec};
use manifest::RunManifest;
use serde::de::DeserializeOwned;
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "gs4d", version, about = "Fit, render and evaluate deformable Gaussian scenes")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs, 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic articulated scene and its ground-truth frames.
    GenScene(GenSceneArgs),
    /// Fit a canonical cloud and deformation field to a scene.
    Fit(FitArgs),
    /// Render a checkpoint at chosen views and times.
    Render(RenderArgs),
    /// Score predicted frames against ground truth.
    Eval(EvalArgs),
    /// Print the token shape ledger for a latent layout.
    AuditShapes(AuditArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Scene JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Directory written by `gen-scene`.
    #[arg(long)]
    scene: PathBuf,
    /// Training JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Initial cloud; defaults to the scene's `cloud_anchor.ply`.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Standard deviation of position noise added to the initial cloud.
    #[arg(long, default_value_t = 0.0)]
    init_noise: f64,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Replace the initial cloud with this many gray Gaussians spread over its bounding box.
    #[arg(long)]
    cold_start: Option<usize>,
    /// Stop after the static stage.
    #[arg(long)]
    coarse_only: bool,
    /// Comma-separated view indices to train on; all views by default.
    #[arg(long, value_delimiter = ',')]
    train_views: Option<Vec<usize>>,
    /// JSON-lines log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Camera rig JSON.
    #[arg(long)]
    rig: PathBuf,
    /// Frame index or inclusive range `a..b`; fractional values are allowed.
    #[arg(long)]
    frames: String,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Comma-separated view indices; all rig views by default.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Background color `r,g,b`; read from the rig's `sequence.json` when omitted.
    #[arg(long, value_delimiter = ',')]
    background: Option<Vec<f64>>,
    /// Also write lossless `.f32` dumps.
    #[arg(long)]
    f32: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Latent layout JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Also write the ledger here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error tagged with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<gs4d_core::Error> for Failure {
    fn from(e: gs4d_core::Error) -> Self {
        use gs4d_core::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::ShapeMismatch(_) | E::Json(_) => EXIT_CONFIG,
            E::NonFiniteGaussian { .. } | E::NonFiniteGradient { .. } | E::Numeric(_) => EXIT_NUMERIC,
            E::Io(_) | E::Image(_) | E::Format { .. } => EXIT_IO,
        };
        Failure { code, error: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_IO, error: e.into() }
    }
}

impl Failure {
    fn context(self, msg: String) -> Self {
        Failure { code: self.code, error: self.error.context(msg) }
    }
}

trait WithCode<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn config_error(msg: String) -> Failure {
    Failure { code: EXIT_CONFIG, error: anyhow!(msg) }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval(a),
        Command::AuditShapes(a) => audit_shapes(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Strict JSON config; unknown fields and type errors name the offending field.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).code(EXIT_IO)?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display())).code(EXIT_CONFIG)
}

fn gen_scene(args: GenSceneArgs) -> CmdResult {
    let spec: SceneSpec = read_config(args.config.as_deref())?;
    let mut manifest = RunManifest::new("gen-scene", &spec, Some(spec.scene.seed)).code(EXIT_CONFIG)?;
    if let Some(c) = &args.config {
        manifest.input("config", c);
    }
    manifest.begin("build");
    let (cloud, script, cameras) = spec.build()?;
    manifest.begin("render");
    let seq = render_ground_truth(&cloud, &script, &cameras, spec.num_frames, spec.background)?;
    manifest.begin("write");
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).code(EXIT_IO)?;
    let anchor = script.pose(&cloud, anchor_frame(spec.num_frames), spec.num_frames)?;
    write_ply(&cloud, &out.join("cloud.ply"), PlyPrecision::F64)?;
    write_ply(&anchor, &out.join("cloud_anchor.ply"), PlyPrecision::F64)?;
    fs::write(out.join("script.json"), serde_json::to_string_pretty(&script).code(EXIT_IO)?)?;
    fs::write(out.join("scene.json"), serde_json::to_string_pretty(&spec).code(EXIT_IO)?)?;
    seq.save(out, spec.write_f32)?;
    for name in ["cloud.ply", "cloud_anchor.ply", "script.json", "scene.json", RIG_FILE, SEQUENCE_FILE] {
        manifest.output(name, &out.join(name));
    }
    manifest.note("num_views", seq.num_views());
    manifest.note("num_frames", seq.num_frames());
    manifest.note("num_gaussians", cloud.len());
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn fit(args: FitArgs) -> CmdResult {
    let config: TrainConfig = read_config(args.config.as_deref())?;
    config.validate()?;
    if !(args.init_noise >= 0.0 && args.init_noise.is_finite()) {
        return Err(config_error(format!("--init-noise {} must be a finite non-negative number", args.init_noise)));
    }
    let mut manifest = RunManifest::new("fit", &config, Some(config.seed)).code(EXIT_CONFIG)?;
    manifest.begin("load");
    let mut seq = MultiViewSequence::load(&args.scene)
        .map_err(|e| Failure::from(e).context(format!("loading scene {}", args.scene.display())))?;
    manifest.input("scene", &args.scene);
    if let Some(c) = &args.config {
        manifest.input("config", c);
    }
    if let Some(views) = &args.train_views {
        seq = seq.select_views(views)?;
        manifest.note("train_views", views);
    }
    let init_path = args.init.clone().unwrap_or_else(|| args.scene.join("cloud_anchor.ply"));
    let mut init = read_ply(&init_path)?;
    manifest.input("init", &init_path);
    if let Some(n) = args.cold_start {
        let bounds = SceneBounds::around(&init.positions, 0.0)?;
        init = cold_start_init(&bounds, n, args.init_seed)?;
    }
    if args.init_noise > 0.0 {
        init = perturbed_init(&init, args.init_noise, args.init_seed)?;
    }
    manifest.note("init_noise", args.init_noise);
    manifest.note("init_seed", args.init_seed);

    let mut state = FitState::new(init, seq.num_frames(), &config)?;
    let initial_checksum = state.field.checksum();
    let log_path = args.log.clone().unwrap_or_else(|| sidecar(&args.out, ".log.jsonl"));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display())).code(EXIT_IO)?);
    let mut log_error: Option<std::io::Error> = None;
    let mut last: Option<IterationLog> = None;
    let mut logger = |entry: &IterationLog| {
        if log_error.is_none() {
            let line = serde_json::to_string(entry).map_err(std::io::Error::from);
            if let Err(e) = line.and_then(|l| writeln!(log_file, "{l}")) {
                log_error = Some(e);
            }
        }
        last = Some(entry.clone());
    };

    manifest.begin("coarse");
    let mut run = coarse_fit(&mut state, &seq, &config, &mut logger);
    if run.is_ok() && !args.coarse_only {
        manifest.begin("fine");
        for step in 0..num_fine_steps(seq.num_frames()) {
            run = fine_step(&mut state, &seq, &config, step, &mut logger);
            if run.is_err() {
                break;
            }
        }
    }
    manifest.end();
    drop(logger);
    log_file.flush()?;
    if let Some(e) = log_error {
        return Err(Failure { code: EXIT_IO, error: anyhow::Error::from(e).context("writing training log") });
    }

    // Updates are validated before they are applied, so the state is still
    // the last good one when an iteration fails.
    manifest.begin("save");
    state.checkpoint().save(&args.out)?;
    manifest.output("checkpoint", &args.out);
    manifest.output("log", &log_path);
    manifest.note("iterations", state.iteration);
    manifest.note("num_gaussians", state.cloud.len());
    manifest.note("field_checksum_initial", initial_checksum);
    manifest.note("field_checksum_final", state.field.checksum());
    manifest.note("final_loss", last.as_ref().map(|l| l.total));
    if let Err(e) = &run {
        manifest.status = format!("aborted: {e}");
    }
    manifest.write(&sidecar(&args.out, ".manifest.json"))?;
    run.map_err(|e| Failure::from(e).context(format!("fit aborted; last good checkpoint saved to {}", args.out.display())))
}

/// Parses `a`, or the inclusive range `a..b` walked in `step` increments.
fn parse_frames(spec: &str, step: f64) -> Result<Vec<f64>, Failure> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| config_error(format!("bad frame value `{s}` in --frames")));
    let (a, b) = match spec.split_once("..") {
        Some((a, b)) => (num(a)?, num(b)?),
        None => {
            let a = num(spec)?;
            (a, a)
        }
    };
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(config_error(format!("--frames `{spec}` must be an increasing finite range")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(config_error(format!("--step {step} must be positive")));
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| a + k as f64 * step).collect())
}

/// `frame_007` for whole frames, `frame_002.500` between frames.
fn frame_name(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("frame_{:03}", t as usize)
    } else {
        format!("frame_{t:07.3}")
    }
}

fn render_cmd(args: RenderArgs) -> CmdResult {
    let frames = parse_frames(&args.frames, args.step)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let last = ckpt.num_frames.saturating_sub(1) as f64;
    let outside: Vec<String> = frames.iter().filter(|t| !(0.0..=last).contains(*t)).map(|t| t.to_string()).collect();
    if !outside.is_empty() {
        return Err(config_error(format!(
            "frames {} lie outside the fitted range [0, {last}]; extrapolation is not supported",
            outside.join(", ")
        )));
    }
    let rig_text = fs::read_to_string(&args.rig).with_context(|| format!("reading {}", args.rig.display())).code(EXIT_IO)?;
    let rig: RigFile = serde_json::from_str(&rig_text).with_context(|| format!("invalid rig {}", args.rig.display())).code(EXIT_CONFIG)?;
    let views = args.views.clone().unwrap_or_else(|| (0..rig.cameras.len()).collect());
    if let Some(v) = views.iter().find(|&&v| v >= rig.cameras.len()) {
        return Err(config_error(format!("view {v} out of range for a {}-camera rig", rig.cameras.len())));
    }
    let background = match &args.background {
        Some(b) if b.len() == 3 => [b[0], b[1], b[2]],
        Some(b) => return Err(config_error(format!("--background needs 3 values, got {}", b.len()))),
        None => rig_background(&args.rig)?,
    };
    let config = serde_json::json!({ "frames": frames, "views": views, "background": background });
    let mut manifest = RunManifest::new("render", &config, None).code(EXIT_CONFIG)?;
    manifest.input("checkpoint", &args.ckpt);
    manifest.input("rig", &args.rig);
    manifest.begin("render");
    let options = RenderOptions::with_background(background);
    for &t in &frames {
        let posed = ckpt.pose_at_frame(t)?;
        for &v in &views {
            let img = render(&posed, &rig.cameras[v], &options)?.color;
            let dir = args.out.join(format!("view_{v:02}"));
            img.save_png(&dir.join(format!("{}.png", frame_name(t))))?;
            if args.f32 {
                img.save_f32(&dir.join(format!("{}.f32", frame_name(t))))?;
            }
        }
    }
    manifest.output("frames", &args.out);
    manifest.note("rendered", frames.len() * views.len());
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn rig_background(rig: &Path) -> Result<[f64; 3], Failure> {
    let meta = rig.parent().map(|d| d.join(SEQUENCE_FILE)).filter(|p| p.exists());
    let Some(meta) = meta else { return Ok([0.0; 3]) };
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&meta)?).code(EXIT_CONFIG)?;
    serde_json::from_value(value["background"].clone())
        .with_context(|| format!("bad background in {}", meta.display()))
        .code(EXIT_CONFIG)
}

/// `(view, frame)` pairs found under `dir` in the `view_VV/frame_TTT` layout.
fn scan_frames(dir: &Path) -> Result<BTreeSet<(usize, usize)>, Failure> {
    let mut found = BTreeSet::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display())).code(EXIT_IO)?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(v) = name.to_str().and_then(|n| n.strip_prefix("view_")).and_then(|n| n.parse().ok()) else { continue };
        if !entry.file_type()?.is_dir() {
            continue;
        }
        for file in fs::read_dir(entry.path())? {
            let file = file?.file_name();
            let Some(stem) = file.to_str().and_then(|n| n.strip_suffix(".png").or_else(|| n.strip_suffix(".f32"))) else {
                continue;
            };
            if let Some(t) = stem.strip_prefix("frame_").filter(|s| s.len() == 3).and_then(|s| s.parse().ok()) {
                found.insert((v, t));
            }
        }
    }
    Ok(found)
}

/// Prefers the lossless dump when present.
fn load_frame(dir: &Path, v: usize, t: usize) -> Result<Image, Failure> {
    let raw = dir.join(frame_relpath(v, t, "f32"));
    Ok(if raw.exists() { Image::load_f32(&raw)? } else { Image::load_png(&dir.join(frame_relpath(v, t, "png")))? })
}

fn eval(args: EvalArgs) -> CmdResult {
    let config = serde_json::json!({ "peak": 1.0 });
    let mut manifest = RunManifest::new("eval", &config, None).code(EXIT_CONFIG)?;
    manifest.input("pred", &args.pred);
    manifest.input("gt", &args.gt);
    manifest.begin("scan");
    let gt = scan_frames(&args.gt)?;
    let pred = scan_frames(&args.pred)?;
    if gt.is_empty() {
        return Err(Failure { code: EXIT_IO, error: anyhow!("no frames found under {}", args.gt.display()) });
    }
    let list = |s: Vec<&(usize, usize)>| s.iter().map(|&&(v, t)| frame_relpath(v, t, "png")).collect::<Vec<_>>().join(", ");
    let missing: Vec<_> = gt.difference(&pred).collect();
    let extra: Vec<_> = pred.difference(&gt).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = format!("frame mismatch: prediction has {} frames, ground truth {}", pred.len(), gt.len());
        if !missing.is_empty() {
            msg += &format!("; missing from prediction: {}", list(missing));
        }
        if !extra.is_empty() {
            msg += &format!("; missing from ground truth: {}", list(extra));
        }
        return Err(Failure { code: EXIT_IO, error: anyhow!(msg) });
    }
    manifest.begin("score");
    let mut pairs = Vec::with_capacity(gt.len());
    for &(v, t) in &gt {
        let p = load_frame(&args.pred, v, t)?;
        let g = load_frame(&args.gt, v, t)?;
        pairs.push(PairMetrics { view: v, frame: t, psnr: psnr(&p, &g, 1.0)?, ssim: ssim(&p, &g)? });
    }
    let report = MetricReport::from_pairs(pairs);
    print!("{}", report.table());
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, serde_json::to_string_pretty(&report).code(EXIT_IO)?)?;
    manifest.output("report", &args.out);
    manifest.note("global_ssim", report.global.ssim);
    manifest.note("global_psnr", report.global.psnr);
    manifest.write(&sidecar(&args.out, ".manifest.json"))?;
    Ok(())
}

fn audit_shapes(args: AuditArgs) -> CmdResult {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display())).code(EXIT_IO)?;
    let spec: LatentSpec = serde_json::from_str(&text).with_context(|| format!("invalid spec {}", args.spec.display())).code(EXIT_CONFIG)?;
    let ledger = format_ledger(&shape_ledger(&spec)?);
    print!("{ledger}");
    if let Some(out) = &args.out {
        let mut manifest = RunManifest::new("audit-shapes", &spec, None).code(EXIT_CONFIG)?;
        manifest.input("spec", &args.spec);
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(out, &ledger)?;
        manifest.output("ledger", out);
        manifest.write(&sidecar(out, ".manifest.json"))?;
    }
    Ok(())
}
