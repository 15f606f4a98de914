//! The `cmdlab` command line. Subcommands talk to each other only through
//! files: a dataset directory, checkpoints and sampled videos.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 invalid
//! configuration, 3 missing input. Failures print one JSON line on stderr.

use std::ffi::OsString;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::autoencoder::Autoencoder;
use crate::checkpoint::{
    autoencoder_checkpoint, denoiser_checkpoint, load_autoencoder, load_checkpoint, load_denoiser, save_checkpoint,
};
use crate::config::{ConfigErrors, ConfigIssue, RunConfig};
use crate::costmodel::{compare_report, CmdConfigs, SamplingSteps};
use crate::data::{export_ppm_frames, gen_moving_shapes, load_dataset, save_dataset, save_video, write_atomic};
use crate::denoisers::{Denoiser, DenoiserKind};
use crate::error::Error;
use crate::gradcheck::grad_check_all;
use crate::params::Init;
use crate::pipeline::{sample_video, Models, SamplerKind};
use crate::training::{no_monitor, prepare_latents, train_autoencoder, train_denoiser_on_latents, write_loss_tsv};
use crate::verify;
use crate::video::ConditionId;

/// Name of the effective-configuration echo written into output directories.
pub const CONFIG_ECHO: &str = "config.json";
pub const AE_CKPT: &str = "autoencoder.ckpt";
pub const CONTENT_CKPT: &str = "content.ckpt";
pub const MOTION_CKPT: &str = "motion.ckpt";
pub const LOSS_TSV: &str = "loss.tsv";

#[derive(Parser, Debug)]
#[command(name = "cmdlab", version, about = "Content-motion latent video diffusion at desk scale")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.motion.max_steps=200`. Values are JSON, else strings.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (falls back to CMDLAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder on a dataset directory.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the content-frame denoiser on latents of a trained autoencoder.
    TrainContent(StageArgs),
    /// Train the motion-latent denoiser on latents of a trained autoencoder.
    TrainMotion(StageArgs),
    /// Generate one clip.
    Sample(SampleArgs),
    /// Compare analytic and numeric gradients of all three networks.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Analytic FLOP and parameter comparison against a monolithic denoiser.
    CostReport {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        /// Include the multi-minute overfit run.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Args, Debug)]
struct StageArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained autoencoder checkpoint.
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encode with the autoencoder's EMA weights.
    #[arg(long)]
    ema: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Directory holding autoencoder.ckpt, content.ckpt and motion.ckpt.
    #[arg(long, default_value = ".")]
    models: PathBuf,
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    motion: Option<PathBuf>,
    #[arg(long)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps_content: Option<usize>,
    #[arg(long)]
    steps_motion: Option<usize>,
    /// Guidance weight for both stages.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    /// Also write one PPM per frame here.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
    /// Sample with EMA weights.
    #[arg(long)]
    ema: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SamplerArg {
    Ddpm,
    Ddim,
}

enum Failure {
    Config(ConfigErrors),
    Missing { path: PathBuf, message: String },
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Missing { .. } => 3,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Failure::Config(e) => json!({
                "error": "config",
                "issues": e.0.iter().map(|i| json!({"key": i.key, "message": i.message})).collect::<Vec<_>>(),
            }),
            Failure::Missing { path, message } => json!({
                "error": "missing_input",
                "path": path.display().to_string(),
                "message": message,
            }),
            Failure::Runtime(m) => json!({"error": "runtime", "message": m}),
        }
    }
}

fn config_failure(key: &str, message: impl Into<String>) -> Failure {
    Failure::Config(ConfigErrors(vec![ConfigIssue {
        key: key.into(),
        message: message.into(),
    }]))
}

/// Maps a library error raised while touching `path`.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| match e {
        Error::Io(io) if io.kind() == ErrorKind::NotFound => Failure::Missing {
            path: path.to_path_buf(),
            message: io.to_string(),
        },
        other => Failure::Runtime(format!("{}: {other}", path.display())),
    }
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code()
        }
    }
}

fn parse_set(raw: &str) -> std::result::Result<(String, Value), Failure> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| config_failure(raw, "expected KEY=VALUE"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.into()));
    Ok((key.trim().to_string(), value))
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let base = match &cli.config {
        Some(path) if !path.exists() => {
            return Err(Failure::Missing {
                path: path.clone(),
                message: "config file not found".into(),
            })
        }
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    let sets = cli.set.iter().map(|s| parse_set(s)).collect::<std::result::Result<Vec<_>, _>>()?;
    base.with_overrides(&sets).map_err(Failure::Config)
}

fn thread_count(cli: &Cli) -> std::result::Result<Option<usize>, Failure> {
    if cli.deterministic {
        return Ok(Some(1));
    }
    if let Some(n) = cli.threads {
        return if n == 0 {
            Err(config_failure("threads", "must be positive"))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var("CMDLAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(config_failure("CMDLAB_THREADS", format!("`{v}` is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    // sample takes its model sections from checkpoints, so only the rest must hold
    cfg.validate().map_err(Failure::Config)?;
    let threads = thread_count(&cli)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Failure::Runtime(e.to_string()))?
    };
    pool.install(|| match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::TrainAe { data, out } => train_ae(&cfg, &data, &out),
        Command::TrainContent(a) => train_stage(&cfg, DenoiserKind::Content, &a),
        Command::TrainMotion(a) => train_stage(&cfg, DenoiserKind::Motion, &a),
        Command::Sample(a) => sample(cfg, &a),
        Command::GradCheck { tol } => grad_check(tol),
        Command::CostReport { out } => cost_report(&cfg, out.as_deref()),
        Command::Verify { full } => verify_suite(full),
    })
}

/// Writes the effective configuration into `dir`.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CONFIG_ECHO), cfg.to_json().as_bytes())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Outcome {
    let d = &cfg.data;
    let clips = gen_moving_shapes(d.seed, d.count, d.frames, d.height, d.width, d.num_classes).map_err(runtime)?;
    save_dataset(&clips, out).map_err(at(out))?;
    echo_config(cfg, out).map_err(at(out))?;
    println!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: &Path) -> std::result::Result<(Vec<crate::video::VideoTensor<f32>>, Vec<usize>), Failure> {
    let (videos, classes) = load_dataset(dir).map_err(at(dir))?;
    let want = cfg.autoencoder.video_shape();
    if let Some(v) = videos.iter().find(|v| v.data().shape() != want) {
        return Err(config_failure(
            "data",
            format!("clips in {} have shape {:?}, the autoencoder expects {want:?}", dir.display(), v.data().shape()),
        ));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= cfg.data.num_classes) {
        return Err(config_failure(
            "data.num_classes",
            format!("dataset holds class {c}, but num_classes = {}", cfg.data.num_classes),
        ));
    }
    Ok((videos, classes))
}

fn train_ae(cfg: &RunConfig, data: &Path, out: &Path) -> Outcome {
    let (videos, _) = load_data(cfg, data)?;
    let tc = &cfg.train.autoencoder;
    let ae = Autoencoder::<f32>::new(cfg.autoencoder.clone(), tc.seed, Init::Default).map_err(runtime)?;
    let t = train_autoencoder(&videos, &ae, tc, &mut no_monitor).map_err(runtime)?;
    let ae = Autoencoder::from_params(cfg.autoencoder.clone(), t.params).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(|e| at(out)(e.into()))?;
    let ckpt = autoencoder_checkpoint(&ae, Some(&t.ema)).map_err(runtime)?;
    save_checkpoint(&ckpt, &out.join(AE_CKPT)).map_err(at(out))?;
    write_loss_tsv(&t.curve, &out.join(LOSS_TSV)).map_err(at(out))?;
    echo_config(cfg, out).map_err(at(out))?;
    let last = t.curve.last().map(|r| r.ema_loss).unwrap_or(f64::NAN);
    println!("trained autoencoder for {} steps, smoothed loss {last:.3e}", t.steps);
    Ok(())
}

fn read_autoencoder(path: &Path, ema: bool) -> std::result::Result<Autoencoder<f32>, Failure> {
    let ckpt = load_checkpoint(path).map_err(at(path))?;
    load_autoencoder(&ckpt, ema).map_err(at(path))
}

fn train_stage(cfg: &RunConfig, kind: DenoiserKind, a: &StageArgs) -> Outcome {
    let ae = read_autoencoder(&a.ae, a.ema)?;
    if ae.config != cfg.autoencoder {
        return Err(config_failure(
            "autoencoder",
            format!("{} was trained with a different autoencoder section", a.ae.display()),
        ));
    }
    let (videos, classes) = load_data(cfg, &a.data)?;
    let (dcfg, tc, name) = match kind {
        DenoiserKind::Content => (&cfg.content, &cfg.train.content, CONTENT_CKPT),
        DenoiserKind::Motion => (&cfg.motion, &cfg.train.motion, MOTION_CKPT),
    };
    let schedule = cfg.schedule.build().map_err(runtime)?;
    let latents = prepare_latents(&ae, &videos, &classes).map_err(runtime)?;
    let d = Denoiser::<f32>::new(kind, dcfg.clone(), cfg.geometry(), tc.seed, Init::Default).map_err(runtime)?;
    let t = train_denoiser_on_latents(&latents, &d, &schedule, tc, &mut no_monitor).map_err(runtime)?;
    let trained = Denoiser { params: t.params, ..d };
    std::fs::create_dir_all(&a.out).map_err(|e| at(&a.out)(e.into()))?;
    let ckpt = denoiser_checkpoint(&trained, Some(&t.ema), &cfg.schedule).map_err(runtime)?;
    save_checkpoint(&ckpt, &a.out.join(name)).map_err(at(&a.out))?;
    write_loss_tsv(&t.curve, &a.out.join(LOSS_TSV)).map_err(at(&a.out))?;
    echo_config(cfg, &a.out).map_err(at(&a.out))?;
    let last = t.curve.last().map(|r| r.ema_loss).unwrap_or(f64::NAN);
    println!("trained {} denoiser for {} steps, smoothed loss {last:.3e}", kind.name(), t.steps);
    Ok(())
}

fn read_denoiser(path: &Path, kind: DenoiserKind, ema: bool) -> std::result::Result<(Denoiser<f32>, crate::diffusion::ScheduleConfig), Failure> {
    let ckpt = load_checkpoint(path).map_err(at(path))?;
    let (d, s) = load_denoiser(&ckpt, ema).map_err(at(path))?;
    if d.kind != kind {
        return Err(config_failure(kind.name(), format!("{} holds a {} denoiser", path.display(), d.kind.name())));
    }
    Ok((d, s))
}

/// Echo path for a sampled file: `v.vtrf` gets `v.config.json` beside it.
pub fn sample_echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{CONFIG_ECHO}"))
}

fn sample(mut cfg: RunConfig, a: &SampleArgs) -> Outcome {
    let pick = |p: &Option<PathBuf>, name| p.clone().unwrap_or_else(|| a.models.join(name));
    let (ae_path, c_path, m_path) = (pick(&a.ae, AE_CKPT), pick(&a.content, CONTENT_CKPT), pick(&a.motion, MOTION_CKPT));
    let ae = read_autoencoder(&ae_path, a.ema)?;
    let (content, c_sched) = read_denoiser(&c_path, DenoiserKind::Content, a.ema)?;
    let (motion, m_sched) = read_denoiser(&m_path, DenoiserKind::Motion, a.ema)?;

    for spec in [&mut cfg.sample.content, &mut cfg.sample.motion] {
        if let Some(g) = a.guidance {
            spec.guidance = g;
        }
        if let Some(e) = a.eta {
            spec.eta = e;
        }
        if let Some(s) = a.sampler {
            spec.kind = match s {
                SamplerArg::Ddpm => SamplerKind::Ddpm,
                SamplerArg::Ddim => SamplerKind::Ddim,
            };
        }
    }
    if let Some(s) = a.steps_content {
        cfg.sample.content.steps = s;
    }
    if let Some(s) = a.steps_motion {
        cfg.sample.motion.steps = s;
    }
    cfg.autoencoder = ae.config.clone();
    cfg.content = content.config.clone();
    cfg.motion = motion.config.clone();
    cfg.schedule = c_sched;

    let cs = c_sched.build().map_err(runtime)?;
    let ms = m_sched.build().map_err(runtime)?;
    let mut issues = Vec::new();
    for (section, spec, sched) in [("sample.content", &cfg.sample.content, &cs), ("sample.motion", &cfg.sample.motion, &ms)] {
        if let Err(e) = spec.validate(section, sched) {
            let msg = e.to_string();
            let key = msg
                .split_whitespace()
                .find(|w| w.starts_with(section))
                .unwrap_or(section)
                .trim_end_matches(':')
                .to_string();
            issues.push(ConfigIssue { key, message: msg });
        }
    }
    let classes = content.config.num_classes;
    let class = match ConditionId::new(a.class, classes) {
        Ok(c) if !c.is_null(classes) => Some(c),
        _ => {
            issues.push(ConfigIssue {
                key: "class".into(),
                message: format!("{} is not a class id of a {classes}-class model", a.class),
            });
            None
        }
    };
    if !issues.is_empty() {
        return Err(Failure::Config(ConfigErrors(issues)));
    }
    let models = Models {
        autoencoder: &ae,
        content: &content,
        content_schedule: &cs,
        motion: &motion,
        motion_schedule: &ms,
    };
    models
        .check_compatible()
        .map_err(|e| config_failure("checkpoints", e.to_string()))?;
    let video = sample_video(&models, class.expect("checked"), &cfg.sample.content, &cfg.sample.motion, a.seed)
        .map_err(runtime)?;

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| at(parent)(e.into()))?;
    }
    save_video(&video, &a.out).map_err(at(&a.out))?;
    write_atomic(&sample_echo_path(&a.out), cfg.to_json().as_bytes()).map_err(at(&a.out))?;
    if let Some(dir) = &a.frames_dir {
        export_ppm_frames(&video, dir).map_err(at(dir))?;
    }
    println!(
        "wrote {} (class {}, seed {}, content {} steps, motion {} steps)",
        a.out.display(),
        a.class,
        a.seed,
        cfg.sample.content.steps,
        cfg.sample.motion.steps
    );
    Ok(())
}

fn grad_check(tol: f64) -> Outcome {
    let reports = grad_check_all(tol).map_err(runtime)?;
    let mut ok = true;
    for (kind, r) in &reports {
        ok &= r.pass;
        println!(
            "{:<12} {}  max rel err {:.3e} ({}), {} probes",
            kind.name(),
            if r.pass { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.worst,
            r.probes
        );
        if let Some(f) = &r.failure {
            println!("{:<12} {f}", "");
        }
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed at tolerance {tol:e}")))
    }
}

/// Builds the report text: the comparison at the configured sizes and a
/// sweep over clip length.
pub fn cost_report_text(cfg: &RunConfig) -> crate::Result<(String, String)> {
    let passes = if cfg.sample.content.guidance > 0.0 || cfg.sample.motion.guidance > 0.0 { 2 } else { 1 };
    let steps = SamplingSteps {
        content: cfg.sample.content.steps as u64,
        motion: cfg.sample.motion.steps as u64,
        baseline: cfg.sample.motion.steps as u64,
        passes,
    };
    let cmd = CmdConfigs {
        autoencoder: cfg.autoencoder.clone(),
        content: cfg.content.clone(),
        motion: cfg.motion.clone(),
    };
    let report = compare_report(&cmd, &cfg.motion, &steps)?;
    let mut tsv = report.to_tsv();
    let mut text = report.to_text();
    text.push_str("\nclip length sweep (baseline / CMD)\nL\tcompression\tsampling_flops\tparams\n");
    tsv.push_str("\n# sweep\nL\tcompression\tsampling_flops\tparams\n");
    for l in [4, 8, 16, 32] {
        let mut c = cmd.clone();
        c.autoencoder.frames = l;
        let r = compare_report(&c, &cfg.motion, &steps)?;
        let get = |n: &str| r.ratio(n).map(|x| x.value()).unwrap_or(f64::NAN);
        let line = format!("{l}\t{:.6}\t{:.6}\t{:.6}\n", get("compression"), get("sampling_flops"), get("params"));
        text.push_str(&line);
        tsv.push_str(&line);
    }
    Ok((tsv, text))
}

fn cost_report(cfg: &RunConfig, out: Option<&Path>) -> Outcome {
    let (tsv, text) = cost_report_text(cfg).map_err(runtime)?;
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| at(dir)(e.into()))?;
        write_atomic(&dir.join("report.tsv"), tsv.as_bytes()).map_err(at(dir))?;
        write_atomic(&dir.join("report.txt"), text.as_bytes()).map_err(at(dir))?;
        echo_config(cfg, dir).map_err(at(dir))?;
    }
    Ok(())
}

fn verify_suite(full: bool) -> Outcome {
    let mut failed = Vec::new();
    for check in verify::checks() {
        if check.long && !full {
            println!("{:<4} SKIP {:<28} pass --full to run", check.id, check.name);
            continue;
        }
        let r = check.run();
        println!("{}", verify::format_row(&r));
        if !r.pass {
            failed.push(r.id);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failed: {}", failed.join(", "))))
    }
}
