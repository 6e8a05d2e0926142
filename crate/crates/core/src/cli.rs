//! Command-line front end: `train`, `fuse`, `eval`, `ablate`, `gradcheck`.
//!
//! Everything here is callable in-process; the `atfuse` binary only forwards
//! its arguments to [`main_with_args`] and exits with the returned code.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{parse_override, ConfigError, RunConfig};
use crate::gradcheck::{grad_check, Scope};
use crate::image::{list_images, load_corpus, load_gray, save_gray, save_png, GrayImage, ImageError, ImagePair};
use crate::metrics::{MetricReport, CSV_HEADER};
use crate::model::{load_checkpoint, save_checkpoint, AtfuseModel, CheckpointError, ModelError, Variant};
use crate::train::{evaluate_loss, train, TrainError, TrainLogRecord, TrainObserver, LOG_HEADER};

pub const THREADS_ENV: &str = "ATFUSE_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 for bad usage or input, 1 for failed checks and runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Image(_) | CliError::Checkpoint(_) => 2,
            CliError::Model(ModelError::Tensor(_)) => 1,
            CliError::Model(_) => 2,
            CliError::Train(
                TrainError::Config(_) | TrainError::Image(_) | TrainError::Model(ModelError::Divisibility { .. }),
            ) => 2,
            CliError::Train(_) | CliError::Io { .. } | CliError::CheckFailed(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "atfuse", version, about = "Infrared/visible image fusion with cross-attention")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Sets both model.seed and train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "atfuse-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a corpus with `ir/` and `vi/` subdirectories.
    Train {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
    },
    /// Fuse one registered pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vi: PathBuf,
        /// Output image (`.png` or PGM); defaults to OUT/fused.pgm.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score fused images against their sources; matched by file stem.
    Eval {
        #[arg(long, value_name = "DIR")]
        fused: PathBuf,
        #[arg(long, value_name = "DIR")]
        ir: PathBuf,
        #[arg(long, value_name = "DIR")]
        vi: PathBuf,
        /// Defaults to OUT/metrics.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and score a grid of variants that share one seed.
    Ablate {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// no_diim, no_aciim, alpha_sweep, gamma_sweep, block_count or all.
        #[arg(long, default_value = "all")]
        study: Study,
    },
    /// Compare backward gradients with central finite differences.
    Gradcheck {
        /// all, ops, blocks, losses or model.
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Builds the effective config: defaults, then `--config`, then `--set`
/// overrides in order, then `--seed`.
pub fn effective_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
        cfg.apply_text(&text)?;
    }
    for o in &global.overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(&k, &v)?;
    }
    if let Some(seed) = global.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Caps the global rayon pool at `ATFUSE_THREADS` workers when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // the pool can only be configured once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command, reports
/// errors on stderr, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Train { corpus } => {
            let cfg = effective_config(g)?;
            let summary = cmd_train(&cfg, &corpus, &g.out)?;
            println!("{summary}");
        }
        Command::Fuse { checkpoint, ir, vi, output } => {
            let output = output.unwrap_or_else(|| g.out.join("fused.pgm"));
            let report = cmd_fuse(&checkpoint, &ir, &vi, &output)?;
            println!("{}: {report}", output.display());
        }
        Command::Eval { fused, ir, vi, csv } => {
            let csv = csv.unwrap_or_else(|| g.out.join("metrics.csv"));
            let rows = cmd_eval(&fused, &ir, &vi, &csv)?;
            println!("{}: {} pairs", csv.display(), rows.len());
        }
        Command::Ablate { corpus, study } => {
            let cfg = effective_config(g)?;
            let results = cmd_ablate(study, &cfg, &corpus, &g.out)?;
            for r in &results {
                println!("{}", r.csv_line());
            }
        }
        Command::Gradcheck { scope, tolerance } => {
            let passed = cmd_gradcheck(scope, tolerance, &mut std::io::stdout())?;
            if !passed {
                return Err(CliError::CheckFailed(format!("gradient check failed at tolerance {tolerance:e}")));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub const EFFECTIVE_CONFIG: &str = "effective.cfg";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.atf";

/// Streams log lines to disk and saves checkpoints on the configured cadence.
struct RunWriter {
    log: BufWriter<fs::File>,
    log_path: PathBuf,
    dir: PathBuf,
    every: usize,
}

impl RunWriter {
    fn create(dir: &Path, every: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log_path = dir.join(TRAIN_LOG);
        let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        let mut log = BufWriter::new(file);
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
        Ok(Self { log, log_path, dir: dir.into(), every })
    }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, record: &TrainLogRecord) -> crate::train::Result<()> {
        writeln!(self.log, "{}", record.csv_line()).map_err(|e| TrainError::Observer(format!("{}: {e}", self.log_path.display())))
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &AtfuseModel) -> crate::train::Result<()> {
        self.log.flush().map_err(|e| TrainError::Observer(format!("{}: {e}", self.log_path.display())))?;
        log::info!("epoch {epoch} done");
        if self.every > 0 && epoch.is_multiple_of(self.every) {
            save_checkpoint(model, self.dir.join(format!("checkpoint_e{epoch:04}.atf")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} steps, total loss {:.6} -> {:.6}, checkpoint {}",
            self.steps,
            self.initial_loss,
            self.final_loss,
            self.checkpoint.display()
        )
    }
}

fn train_into(cfg: &RunConfig, pairs: &[ImagePair], dir: &Path) -> Result<(AtfuseModel, TrainSummary)> {
    write_file(&dir.join(EFFECTIVE_CONFIG), cfg.to_text())?;
    let mut model = AtfuseModel::new(cfg.model)?;
    let mut writer = RunWriter::create(dir, cfg.train.checkpoint_every)?;
    let log = train(&mut model, pairs, &cfg.train, &mut writer)?;
    writer.log.flush().map_err(io_err(&writer.log_path))?;
    let checkpoint = dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&model, &checkpoint)?;
    let summary = TrainSummary {
        steps: log.len(),
        initial_loss: log.first().map_or(f64::NAN, |r| r.total),
        final_loss: log.last().map_or(f64::NAN, |r| r.total),
        checkpoint,
    };
    Ok((model, summary))
}

/// Trains on `corpus` and writes `effective.cfg`, `train_log.csv`, periodic
/// checkpoints and `final.atf` into `out`.
pub fn cmd_train(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<TrainSummary> {
    let pairs: Vec<ImagePair> = load_corpus(corpus)?.into_iter().map(|(_, p)| p).collect();
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} contains no image pairs", corpus.join("ir").display())));
    }
    Ok(train_into(cfg, &pairs, out)?.1)
}

// ---------------------------------------------------------------------------
// fuse

fn save_image(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if png {
        save_png(img, path)?;
    } else {
        save_gray(img, path)?;
    }
    Ok(())
}

/// Fuses one pair in eval mode, writes the image plus a config snapshot
/// beside it, and returns its metrics against the sources.
pub fn cmd_fuse(checkpoint: &Path, ir: &Path, vi: &Path, output: &Path) -> Result<MetricReport> {
    let pair = ImagePair::new(load_gray(ir)?, load_gray(vi)?)?;
    let model = load_checkpoint(checkpoint)?;
    let fused = model.fuse_images(&pair)?;
    save_image(&fused, output)?;
    let snapshot = format!("# checkpoint = {}\n{}", checkpoint.display(), model.config().to_text());
    write_file(&output.with_extension("cfg"), snapshot)?;
    MetricReport::evaluate(&fused, &pair.ir, &pair.vi).map_err(|e| CliError::Usage(e.to_string()))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub report: MetricReport,
}

fn find_source(dir: &Path, name: &str) -> Result<PathBuf> {
    list_images(dir)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| p)
        .ok_or_else(|| CliError::Usage(format!("no source image named {name} in {}", dir.display())))
}

/// Formats metric rows with a trailing `mean` row; no rows gives the header only.
pub fn metrics_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.name, r.report.csv_fields()));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.report).collect();
    if let Some(mean) = MetricReport::mean(&reports) {
        s.push_str(&format!("mean,{}\n", mean.csv_fields()));
    }
    s
}

/// Scores every image in `fused` against same-stem images in `ir` and `vi`.
pub fn cmd_eval(fused: &Path, ir: &Path, vi: &Path, csv: &Path) -> Result<Vec<EvalRow>> {
    let files = list_images(fused)?;
    let rows = files
        .par_iter()
        .map(|(name, path)| {
            let f = load_gray(path)?;
            let pair = ImagePair::new(load_gray(find_source(ir, name)?)?, load_gray(find_source(vi, name)?)?)?;
            let report = MetricReport::evaluate(&f, &pair.ir, &pair.vi).map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
            Ok(EvalRow { name: name.clone(), report })
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(csv, metrics_csv(&rows))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    NoDiim,
    NoAciim,
    AlphaSweep,
    GammaSweep,
    BlockCount,
    All,
}

impl Study {
    pub const EACH: [Study; 5] = [Study::NoDiim, Study::NoAciim, Study::AlphaSweep, Study::GammaSweep, Study::BlockCount];

    pub fn as_str(self) -> &'static str {
        match self {
            Study::NoDiim => "no_diim",
            Study::NoAciim => "no_aciim",
            Study::AlphaSweep => "alpha_sweep",
            Study::GammaSweep => "gamma_sweep",
            Study::BlockCount => "block_count",
            Study::All => "all",
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Study::EACH.into_iter().chain([Study::All]).find(|v| v.as_str() == s).ok_or_else(|| {
            format!("unknown study `{s}` (expected no_diim, no_aciim, alpha_sweep, gamma_sweep, block_count or all)")
        })
    }
}

pub const ALPHA_GRID: [f64; 5] = [0.0, 20.0, 50.0, 80.0, 100.0];
pub const GAMMA_GRID: [f64; 3] = [0.5, 0.75, 1.0];
pub const BLOCK_GRID: [usize; 3] = [1, 2, 3];

/// One cell of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub study: Study,
    pub label: String,
    pub config: RunConfig,
}

/// Variants of `base` for `study`. Module studies include the full model as
/// the reference row. Every run keeps the seeds of `base`.
pub fn ablation_grid(study: Study, base: &RunConfig) -> Vec<AblationRun> {
    let with = |label: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        AblationRun { study, label, config }
    };
    let module = |v: Variant| {
        vec![with("full".into(), &|c| c.model.variant = Variant::Full), with(v.to_string(), &|c| c.model.variant = v)]
    };
    match study {
        Study::NoDiim => module(Variant::NoDiim),
        Study::NoAciim => module(Variant::NoAciim),
        Study::AlphaSweep => ALPHA_GRID.iter().map(|&a| with(format!("alpha={a}"), &|c| c.train.loss.alpha = a)).collect(),
        Study::GammaSweep => GAMMA_GRID.iter().map(|&g| with(format!("gamma={g}"), &|c| c.train.loss.gamma = g)).collect(),
        Study::BlockCount => BLOCK_GRID.iter().map(|&b| with(format!("blocks={b}"), &|c| c.model.fusion_blocks = b)).collect(),
        Study::All => Study::EACH.iter().flat_map(|&s| ablation_grid(s, base)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub run: AblationRun,
    pub seed: u64,
    pub parameters: usize,
    pub l_pixel: f64,
    pub l_texture: f64,
    pub total: f64,
    pub metrics: MetricReport,
    pub checkpoint: PathBuf,
}

pub const ABLATION_HEADER: &str = "study,variant,seed,parameters,l_pixel,l_texture,total,ag,en,sd,sf,qabf";

impl AblationResult {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.run.study,
            self.run.label,
            self.seed,
            self.parameters,
            self.l_pixel,
            self.l_texture,
            self.total,
            self.metrics.csv_fields()
        )
    }
}

fn score(model: &AtfuseModel, run: &AblationRun, pairs: &[ImagePair]) -> Result<(f64, f64, f64, MetricReport)> {
    let loss = evaluate_loss(model, pairs, &run.config.train.loss)?;
    let mut reports = Vec::with_capacity(pairs.len());
    for p in pairs {
        let f = model.fuse_images(p)?;
        reports.push(MetricReport::evaluate(&f, &p.ir, &p.vi).map_err(|e| CliError::Usage(e.to_string()))?);
    }
    let metrics = MetricReport::mean(&reports).unwrap_or_default();
    Ok((loss.l_pixel, loss.l_texture, loss.total, metrics))
}

/// Trains every variant of `study` on `corpus` and scores it on the whole
/// images. Writes `OUT/<study>/<variant>/` run directories and one
/// `OUT/ablation_<study>.csv` per table.
pub fn cmd_ablate(study: Study, base: &RunConfig, corpus: &Path, out: &Path) -> Result<Vec<AblationResult>> {
    let pairs: Vec<ImagePair> = load_corpus(corpus)?.into_iter().map(|(_, p)| p).collect();
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} contains no image pairs", corpus.join("ir").display())));
    }
    let eval_pairs = pairs
        .iter()
        .map(|p| {
            let m = base.model.patch_size;
            Ok(ImagePair::new(p.ir.crop_to_multiple(m)?, p.vi.crop_to_multiple(m)?)?)
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(&out.join(EFFECTIVE_CONFIG), base.to_text())?;
    let runs = ablation_grid(study, base);
    log::info!("ablation {study}: {} runs, seed {}", runs.len(), base.train.seed);
    let results = runs
        .into_par_iter()
        .map(|run| {
            let dir = out.join(run.study.as_str()).join(run.label.replace('=', "_"));
            let (model, summary) = train_into(&run.config, &pairs, &dir)?;
            let (l_pixel, l_texture, total, metrics) = score(&model, &run, &eval_pairs)?;
            Ok(AblationResult {
                seed: run.config.train.seed,
                parameters: model.parameter_count(),
                l_pixel,
                l_texture,
                total,
                metrics,
                checkpoint: summary.checkpoint,
                run,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for s in Study::EACH {
        let rows: Vec<&AblationResult> = results.iter().filter(|r| r.run.study == s).collect();
        if rows.is_empty() {
            continue;
        }
        let mut csv = format!("{ABLATION_HEADER}\n");
        for r in rows {
            csv.push_str(&r.csv_line());
            csv.push('\n');
        }
        write_file(&out.join(format!("ablation_{s}.csv")), csv)?;
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// gradcheck

/// Prints one line per group and returns whether all passed.
pub fn cmd_gradcheck(scope: Scope, tolerance: f64, w: &mut dyn Write) -> Result<bool> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(CliError::Usage(format!("tolerance must be positive, got {tolerance}")));
    }
    let report = grad_check(scope, tolerance).map_err(|e| CliError::CheckFailed(e.to_string()))?;
    let stdout = Path::new("<stdout>");
    write!(w, "{report}").map_err(io_err(stdout))?;
    let failed = report.groups.iter().filter(|g| g.status == crate::gradcheck::GroupStatus::Fail).count();
    writeln!(w, "scope {scope}: {} groups, {failed} failed (tolerance {tolerance:e})", report.groups.len())
        .map_err(io_err(stdout))?;
    Ok(report.passed())
}
