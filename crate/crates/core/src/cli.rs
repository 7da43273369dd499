//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coarse_flow::CoarseFlowConfig;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::io;
use crate::mrn::{load_checkpoint, save_checkpoint, Mrn, MrnConfig};
use crate::par;
use crate::pipeline::{self, ComputeLedger, FlowSource, InterpolationRequest, SweepPair};
use crate::train::synthetic::{SceneKind, SyntheticScene, Texture};
use crate::train::trainer::{save_loss_csv, train_toy, CoarseSource, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "m2m", version, about = "Many-to-many splatting frame interpolation")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "M2M_THREADS")]
    pub threads: Option<usize>,
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize frames at the given times between two frames.
    #[command(after_help = "Writes frame_t{i}.png for the i-th time (0-based) and ledger.json with keys \
shared_flops, unshared_flops, unshared_flops_per_step, mrn_invocations, times, coarse_flow_ms, mrn_ms, \
consistency_ms, splat_ms, fuse_ms, fill_ms.")]
    Interpolate(InterpolateArgs),
    /// Count holes left by splatting for several sub-flow counts.
    #[command(after_help = "CSV columns: N,mean_holes,psnr (psnr is empty without --gt).")]
    Holes(HolesArgs),
    /// Train the network on synthetic scenes.
    #[command(after_help = "Config file: one `key = value` per line, `#` starts a comment. Keys: iterations, \
batch_size, lr, weight_decay, grad_clip, crop, t, spatial_flip, temporal_flip, color_jitter, kinds (comma list of \
translation|rotation|zoom|occlusion), coarse (estimated|ground_truth), max_shift, levels, channels (comma \
list), rank, n_flows, flow_downscale, seed. Loss CSV columns: iteration,charbonnier,census,total.")]
    TrainToy(TrainArgs),
    /// Finite-difference gradient checks.
    #[command(after_help = "Prints `name max_rel_error checked` per check; exits 2 if any exceeds the tolerance.")]
    Gradcheck(GradcheckArgs),
    /// Time shared and per-frame work on a synthetic pair.
    #[command(after_help = "Prints one JSON object with keys width, height, times, repeat, shared_ms, \
unshared_ms, unshared_ms_per_frame, ms_per_frame (minimum over repeats).")]
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub frame0: PathBuf,
    #[arg(long)]
    pub frame1: PathBuf,
    /// External `.flo` flow from frame 0 to frame 1 (needs --flow10).
    #[arg(long, requires = "flow10")]
    pub flow01: Option<PathBuf>,
    #[arg(long, requires = "flow01")]
    pub flow10: Option<PathBuf>,
    /// Comma-separated, strictly increasing times in (0, 1).
    #[arg(long, value_delimiter = ',', required = true)]
    pub times: Vec<f64>,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Paint holes magenta instead of filling them.
    #[arg(long)]
    pub no_fill: bool,
    /// Use only the first N sub-flows.
    #[arg(long)]
    pub n_flows: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HolesArgs {
    #[arg(long)]
    pub frame0: PathBuf,
    #[arg(long)]
    pub frame1: PathBuf,
    #[arg(long, requires = "flow10")]
    pub flow01: Option<PathBuf>,
    #[arg(long, requires = "flow01")]
    pub flow10: Option<PathBuf>,
    /// Ground-truth frame at --t for the psnr column.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_flows: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Overrides the config file.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Op,
    Mrn,
    Pipeline,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::Op)]
    pub scope: Scope,
    /// Default 1e-5 for ops, 1e-3 for the composed scopes.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// WxH
    #[arg(long, default_value = "256x256", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub times: usize,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    /// Checkpoint to time; a seeded toy network otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    match par::with_threads(threads, move || execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Interpolate(a) => interpolate(a),
        Command::Holes(a) => holes(a),
        Command::TrainToy(a) => train(a, seed),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed),
        Command::Bench(a) => bench(a, seed),
    }
}

fn flow_source(f01: &Option<PathBuf>, f10: &Option<PathBuf>) -> Result<FlowSource> {
    match (f01, f10) {
        (Some(a), Some(b)) => Ok(FlowSource::External {
            f01: io::read_flo(a)?,
            f10: io::read_flo(b)?,
        }),
        _ => Ok(FlowSource::Estimate(CoarseFlowConfig::default())),
    }
}

fn load_model(path: &Path) -> Result<Mrn<f32>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("model checkpoint {path:?} not found")));
    }
    load_checkpoint(path)
}

#[derive(Serialize)]
struct LedgerFile<'a> {
    times: &'a [f64],
    #[serde(flatten)]
    ledger: &'a ComputeLedger,
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let req = InterpolationRequest {
        i0: io::read_image(&a.frame0)?,
        i1: io::read_image(&a.frame1)?,
        times: a.times.clone(),
        flow: flow_source(&a.flow01, &a.flow10)?,
        model: &model,
        fill_holes: !a.no_fill,
        n_flows: a.n_flows,
    };
    let out = pipeline::interpolate(&req)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, f) in out.frames.iter().enumerate() {
        io::write_image(&a.out.join(format!("frame_t{i}.png")), f)?;
    }
    let json = serde_json::to_string_pretty(&LedgerFile {
        times: &a.times,
        ledger: &out.ledger,
    })
    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(a.out.join("ledger.json"), json)?;
    println!(
        "wrote {} frame(s) to {:?}; network runs: {}",
        out.frames.len(),
        a.out,
        out.ledger.mrn_invocations
    );
    Ok(())
}

fn holes(a: HolesArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let pair = SweepPair {
        i0: io::read_image(&a.frame0)?,
        i1: io::read_image(&a.frame1)?,
        gt: a.gt.as_deref().map(io::read_image).transpose()?,
        t: a.t,
        flow: flow_source(&a.flow01, &a.flow10)?,
    };
    let rows = pipeline::sweep_n_flows(&model, &[pair], &a.n_flows)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    writeln!(f, "N,mean_holes,psnr")?;
    for r in &rows {
        let psnr = r.psnr.map(|p| format!("{p:.4}")).unwrap_or_default();
        writeln!(f, "{},{},{}", r.n_flows, r.mean_holes, psnr)?;
    }
    f.flush()?;
    Ok(())
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_val(key, s.trim())).collect()
}

fn parse_kind(s: &str) -> Result<SceneKind> {
    match s.trim() {
        "translation" => Ok(SceneKind::Translation),
        "rotation" => Ok(SceneKind::Rotation),
        "zoom" => Ok(SceneKind::Zoom),
        "occlusion" => Ok(SceneKind::Occlusion),
        o => Err(Error::InvalidArgument(format!("unknown scene kind {o}"))),
    }
}

/// Applies config entries on top of the toy defaults.
pub fn train_settings(entries: &[(String, String)], seed: u64) -> Result<(TrainConfig, MrnConfig)> {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut model = MrnConfig::toy();
    for (k, v) in entries {
        match k.as_str() {
            "iterations" => cfg.iterations = parse_val(k, v)?,
            "batch_size" => cfg.batch_size = parse_val(k, v)?,
            "lr" => cfg.lr = parse_val(k, v)?,
            "weight_decay" => cfg.weight_decay = parse_val(k, v)?,
            "grad_clip" => cfg.grad_clip = parse_val(k, v)?,
            "crop" => cfg.crop = parse_val(k, v)?,
            "t" => cfg.t = parse_val(k, v)?,
            "spatial_flip" => cfg.spatial_flip = parse_val(k, v)?,
            "temporal_flip" => cfg.temporal_flip = parse_val(k, v)?,
            "color_jitter" => cfg.color_jitter = parse_val(k, v)?,
            "kinds" => cfg.kinds = v.split(',').map(parse_kind).collect::<Result<_>>()?,
            "coarse" => {
                cfg.coarse = match v.as_str() {
                    "estimated" => CoarseSource::Estimated,
                    "ground_truth" => CoarseSource::GroundTruth,
                    o => return Err(Error::InvalidArgument(format!("unknown coarse source {o}"))),
                }
            }
            "max_shift" => cfg.ranges.max_shift = parse_val(k, v)?,
            "seed" => cfg.seed = parse_val(k, v)?,
            "levels" => model.levels = parse_val(k, v)?,
            "channels" => model.channels = parse_list(k, v)?,
            "rank" => model.rank = parse_val(k, v)?,
            "n_flows" => model.n_flows = parse_val(k, v)?,
            "flow_downscale" => model.flow_downscale = parse_val(k, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {k}"))),
        }
    }
    Ok((cfg, model))
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let entries = match &a.config {
        Some(p) => parse_config(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let (mut cfg, model_cfg) = train_settings(&entries, seed)?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    let every = (cfg.iterations / 20).max(1);
    let outcome = train_toy(&cfg, &model_cfg, |r| {
        if r.iteration % every == 0 {
            eprintln!("iter {:>6} loss {:.6}", r.iteration, r.total);
        }
    })?;
    save_checkpoint(&a.out, &outcome.model)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    save_loss_csv(&csv, &outcome.losses)?;
    if let Some(last) = outcome.losses.last() {
        println!("final loss {:.6} after {} iterations", last.total, outcome.losses.len());
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, seed: u64) -> Result<()> {
    let (reports, default_tol) = match a.scope {
        Scope::Op => (gradcheck::op_suite(seed)?, 1e-5),
        Scope::Mrn => (vec![gradcheck::mrn_check(seed)?], 1e-3),
        Scope::Pipeline => (vec![gradcheck::pipeline_check(seed)?], 1e-3),
    };
    let tol = a.tol.unwrap_or(default_tol);
    let mut failed = Vec::new();
    for r in &reports {
        println!("{} {:.3e} {}", r.name, r.max_rel_error, r.checked);
        if !(r.max_rel_error <= tol) {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check above {tol:e}: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub times: usize,
    pub repeat: usize,
    pub shared_ms: f64,
    pub unshared_ms: f64,
    pub unshared_ms_per_frame: f64,
    pub ms_per_frame: f64,
}

/// Evenly spaced times `i / (k + 1)`.
pub fn even_times(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
}

/// Interpolates `k` frames `repeat` times and keeps the fastest shared and
/// unshared stage timings.
pub fn run_bench(model: &Mrn<f32>, w: usize, h: usize, k: usize, repeat: usize, seed: u64) -> Result<BenchReport> {
    if k == 0 || repeat == 0 {
        return Err(Error::InvalidArgument("times and repeat must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = SyntheticScene::translating(Texture::random(&mut rng, 6, 0.02, 0.15), 3.0, 1.0);
    let i0 = scene.render(h, w, 0.0)?;
    let i1 = scene.render(h, w, 1.0)?;
    let f01 = scene.flow01(h, w);
    let f10 = scene.flow10(h, w)?;
    let req = InterpolationRequest {
        i0,
        i1,
        times: even_times(k),
        flow: FlowSource::External { f01, f10 },
        model,
        fill_holes: true,
        n_flows: None,
    };
    let (mut shared, mut unshared, mut total) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for _ in 0..repeat {
        let start = Instant::now();
        let out = pipeline::interpolate(&req)?;
        total = total.min(start.elapsed().as_secs_f64() * 1e3);
        shared = shared.min(out.ledger.shared_ms());
        unshared = unshared.min(out.ledger.unshared_ms());
    }
    Ok(BenchReport {
        width: w,
        height: h,
        times: k,
        repeat,
        shared_ms: shared,
        unshared_ms: unshared,
        unshared_ms_per_frame: unshared / k as f64,
        ms_per_frame: total / k as f64,
    })
}

fn bench(a: BenchArgs, seed: u64) -> Result<()> {
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => Mrn::init(MrnConfig::toy(), seed)?,
    };
    let (w, h) = a.size;
    let report = run_bench(&model, w, h, a.times, a.repeat, seed)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?
    );
    Ok(())
}
