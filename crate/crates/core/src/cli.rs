//! Command-line entry point: `synth`, `masks`, `pretrain`, `adapt`, `eval` and `gradcheck`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::backbone::{FileTeacher, TeacherProvider, ToyTeacher};
use crate::cube::{read_cube, read_labels, synth_scene, write_cube, write_labels, HyperCube, SynthSpec};
use crate::error::{Error, Result};
use crate::numerics::Partition;
use crate::pipeline::{
    adapt_head, evaluate_seg, gradient_suite, loss_log, parse_sources, prepare_samples, pretrain, AdaptConfig, Checkpoint,
    LabeledCube, Model, TrainConfig, GRAD_TOLERANCE,
};
use crate::pseudolabel::{stem, target_masks, write_masks, FileSource, PseudoLabeler, SourceTag};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hypervision", version, about = "Hyperspectral backbone pre-training and head-only adaptation")]
struct Cli {
    /// Worker threads for per-file stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate labeled synthetic cubes.
    Synth(SynthArgs),
    /// Generate fused pseudo-masks for every cube in a directory.
    Masks(MasksArgs),
    /// Pre-train a backbone and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Train a linear head over a frozen backbone.
    Adapt(AdaptArgs),
    /// Evaluate an adapted checkpoint on labeled cubes.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    images: u64,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long, default_value_t = 25)]
    bands: usize,
    /// Band-center range in nm as LO-HI.
    #[arg(long, default_value = "600-975")]
    range: String,
    /// Materials including the background.
    #[arg(long, default_value_t = 5)]
    materials: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the material signatures; sets sharing it share class meanings.
    #[arg(long, default_value_t = 0)]
    library_seed: u64,
    /// Index of the first image, for extending a set without overlap.
    #[arg(long, default_value_t = 0)]
    start_index: u64,
}

#[derive(Debug, Args)]
struct FusionArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long)]
    min_area: Option<usize>,
    /// Comma-separated subset of rgb, seq, material.
    #[arg(long)]
    sources: Option<String>,
}

#[derive(Debug, Args)]
struct MasksArgs {
    #[arg(long)]
    cubes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionArgs,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    cubes: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Precomputed `.hvm` masks used instead of the built-in sources.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Precomputed `.hvt` teacher features used instead of the toy teacher.
    #[arg(long)]
    teacher_features: Option<PathBuf>,
    #[arg(long)]
    no_distill: bool,
    #[arg(long)]
    no_pseudo_masks: bool,
    /// Loss log path; defaults to the checkpoint path with a `.jsonl` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    fusion: FusionArgs,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cubes: PathBuf,
    /// Directory of `.hvl` label maps; defaults to the cube directory.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Class count of the head; defaults to the label maps' class count.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cubes: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::NoObjective => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn init_logging() -> CliResult<()> {
    let level = match std::env::var("HV_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return usage(format!("HV_LOG must be quiet, info or debug, got {other:?}")),
    };
    // a second initialization in the same process keeps the first logger
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = init_logging().and_then(|()| {
        if cli.jobs == 0 {
            return usage("--jobs must be at least 1");
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build()
            .map_err(|e| Failure::Runtime(Error::Invalid(e.to_string())))?;
        pool.install(|| dispatch(cli.command))
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Masks(a) => masks(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck => gradcheck(),
    }
}

fn parse_pair<T: std::str::FromStr>(text: &str, sep: char, what: &str) -> CliResult<(T, T)> {
    let parsed = text.split_once(sep).and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
    match parsed {
        Some(p) => Ok(p),
        None => usage(format!("{what} must look like A{sep}B, got {text:?}")),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn with_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Files with the given extension, sorted by name.
fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("no .{ext} files in {}", dir.display())));
    }
    Ok(out)
}

fn load_cubes(dir: &Path) -> Result<Vec<(String, HyperCube)>> {
    let paths = list_files(dir, "hvc")?;
    paths.par_iter().map(|p| Ok((stem(p), read_cube(p)?))).collect()
}

fn load_labeled(cubes: &Path, labels: Option<&Path>) -> Result<Vec<LabeledCube>> {
    let label_dir = labels.unwrap_or(cubes);
    load_cubes(cubes)?
        .into_par_iter()
        .map(|(name, cube)| {
            let labels = read_labels(label_dir.join(format!("{name}.hvl")))?;
            Ok(LabeledCube { name, cube, labels })
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    })
}

fn apply_fusion(config: &mut TrainConfig, f: &FusionArgs) -> CliResult<()> {
    if let Some(t) = f.tau {
        config.fusion.tau = t;
    }
    if let Some(r) = f.r_max {
        config.fusion.r_max = r;
    }
    if let Some(m) = f.min_area {
        config.fusion.min_area = m;
    }
    if let Some(s) = &f.sources {
        config.sources = parse_sources(s).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))
}

fn print_config(config: &TrainConfig) {
    println!("seed = {}", config.seed);
    println!("# resolved configuration");
    print!("{}", config.to_text());
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let (height, width) = parse_pair(&a.size, 'x', "--size")?;
    let wavelength_range = parse_pair(&a.range, '-', "--range")?;
    let base = SynthSpec {
        height,
        width,
        bands: a.bands,
        wavelength_range,
        n_materials: a.materials,
        noise_sigma: a.noise,
        seed: a.seed,
        library_seed: a.library_seed,
    };
    base.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    println!("seed = {}", a.seed);
    println!(
        "images = {}\nsize = {height}x{width}\nbands = {}\nrange = {}-{}\nmaterials = {}\nnoise = {}\nlibrary_seed = {}\nstart_index = {}",
        a.images, a.bands, wavelength_range.0, wavelength_range.1, a.materials, a.noise, a.library_seed, a.start_index
    );
    create_dir(&a.out)?;
    let indices: Vec<u64> = (a.start_index..a.start_index + a.images).collect();
    indices.par_iter().try_for_each(|&i| -> Result<()> {
        let scene = synth_scene(&base.for_image(i))?;
        let name = format!("scene_{i:04}");
        write_cube(&scene.cube, a.out.join(format!("{name}.hvc")))?;
        write_labels(&scene.labels, a.out.join(format!("{name}.hvl")))?;
        write_masks(&scene.masks, a.out.join(format!("{name}.hvm")))
    })?;
    log::info!("wrote {} scenes to {}", a.images, a.out.display());
    Ok(())
}

fn masks(a: MasksArgs) -> CliResult<()> {
    let mut config = load_config(a.config.as_deref())?;
    apply_fusion(&mut config, &a.fusion)?;
    print_config(&config);
    if config.sources.contains(&SourceTag::File) {
        return usage("the file source needs precomputed masks; use pretrain --masks instead");
    }
    let labeler = PseudoLabeler::new(config.sources.clone(), config.fusion);
    let paths = list_files(&a.cubes, "hvc")?;
    create_dir(&a.out)?;
    let written: Vec<bool> = paths
        .par_iter()
        .map(|p| -> Result<bool> {
            let name = stem(p);
            let cube = read_cube(p)?;
            match labeler.target(&name, &cube)? {
                Some(t) => {
                    write_masks(&target_masks(&t)?, a.out.join(format!("{name}.hvm")))?;
                    Ok(true)
                }
                None => {
                    log::warn!("{name}: no candidate masks, nothing written");
                    Ok(false)
                }
            }
        })
        .collect::<Result<_>>()?;
    log::info!("wrote {} of {} mask files", written.iter().filter(|&&w| w).count(), paths.len());
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> CliResult<()> {
    if a.no_distill && a.no_pseudo_masks {
        return usage("--no-distill and --no-pseudo-masks together leave nothing to train");
    }
    let mut config = load_config(a.config.as_deref())?;
    apply_fusion(&mut config, &a.fusion)?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    if a.no_distill {
        config.use_distillation = false;
    }
    if a.no_pseudo_masks {
        config.use_pseudo_masks = false;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    config.check_objective()?;
    print_config(&config);

    let mut labeler = PseudoLabeler::new(config.sources.clone(), config.fusion);
    if let Some(dir) = &a.masks {
        labeler.sources = vec![SourceTag::File];
        labeler.files = Some(FileSource::new(dir));
    }
    let teacher: Box<dyn TeacherProvider> = match &a.teacher_features {
        Some(dir) => Box::new(FileTeacher { dir: dir.clone(), patch: config.patch, dim: config.d_t }),
        None => Box::new(ToyTeacher::new(config.teacher())?),
    };
    let cubes = load_cubes(&a.cubes)?;
    let samples = prepare_samples(
        &cubes,
        config.use_pseudo_masks.then_some(&labeler),
        config.use_distillation.then_some(teacher.as_ref()),
        config.patch,
    )?;
    log::info!("{} of {} cubes usable", samples.len(), cubes.len());
    let out = pretrain(&samples, &config)?;
    with_parent(&a.out)?;
    out.model.checkpoint(&out.store, None)?.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("jsonl"));
    with_parent(&log_path)?;
    fs::write(&log_path, loss_log(&out.log)).map_err(|e| Failure::Runtime(Error::io(&log_path, e)))?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!("l_total: step {} {:.6}, step {} {:.6}", first.step, first.l_total, last.step, last.l_total);
    }
    println!("checkpoint = {}\nloss_log = {}", a.out.display(), log_path.display());
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn adapt(a: AdaptArgs) -> CliResult<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.adapt_steps = s;
    }
    if let Some(lr) = a.lr {
        config.adapt_lr = lr;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    println!("seed = {}\nadapt_steps = {}\nadapt_lr = {}", config.seed, config.adapt_steps, config.adapt_lr);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, store, _) = Model::from_checkpoint(&ckpt)?;
    let data = load_labeled(&a.cubes, a.labels.as_deref())?;
    let ac = AdaptConfig { steps: config.adapt_steps, lr: config.adapt_lr, seed: config.seed, classes: a.classes };
    let adapted = adapt_head(&model, &store, &data, &ac)?;
    with_parent(&a.out)?;
    model.checkpoint(&adapted.store, Some(&adapted.probe))?.save(&a.out)?;
    println!("classes = {}", adapted.probe.classes);
    println!("trainable_parameters = {}", adapted.trainable);
    println!("backbone_sha256 = {}", hex(&adapted.backbone_hash));
    if let Some(l) = adapted.losses.last() {
        println!("final_loss = {l:.6}");
    }
    debug_assert_eq!(adapted.backbone_hash, store.partition_hash(Partition::Backbone));
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    println!("seed = none (evaluation is deterministic)");
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, store, probe) = Model::from_checkpoint(&ckpt)?;
    let probe = probe.ok_or_else(|| Error::Invalid(format!("{} has no adapted head", a.checkpoint.display())))?;
    let data = load_labeled(&a.cubes, a.labels.as_deref())?;
    let report = evaluate_seg(&model, &store, &probe, &data)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(path) = &a.report {
        with_parent(path)?;
        fs::write(path, format!("{json}\n")).map_err(|e| Failure::Runtime(Error::io(path, e)))?;
    }
    Ok(())
}

fn gradcheck() -> CliResult<()> {
    println!("seed = fixed (gradient suite)");
    let groups = gradient_suite()?;
    let mut ok = true;
    for g in &groups {
        ok &= g.passed();
        println!("{:<18} max_rel_err {:.3e} {}", g.group, g.report.max_rel_err, if g.passed() { "ok" } else { "FAIL" });
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Invalid(format!("gradient check above {GRAD_TOLERANCE:e}"))))
    }
}
