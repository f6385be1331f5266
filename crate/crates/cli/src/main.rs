//! `pvag`: synthesize datasets, preprocess, train, evaluate, sweep and
//! check gradients from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure (non-finite loss or failed gradient check).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use pvag::checkpoint::Checkpoint;
use pvag::classifier::{gradcheck_battery, write_embeddings, EpochMetrics, METRICS_HEADER};
use pvag::config::RunConfig;
use pvag::event_io::{synth_dataset, DatasetManifest, Split};
use pvag::pipeline::{evaluate_run, prepare_split, train_prepared, train_run, AblationAxis, GraphCache, PrepStats};
use pvag::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pvag", version, about = "Point-voxel absorbing graph classifier for event-camera streams")]
struct Cli {
    /// TOML (or .json) run configuration; unset keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for training, or for dataset generation with `synth`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// Graph cache directory [default: <out>/cache].
    #[arg(long, global = true, value_name = "DIR")]
    cache: Option<PathBuf>,
    /// Config override, repeatable; see the key list below.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-object dataset with an 80/20 split.
    Synth {
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value_t = 100)]
        samples_per_class: usize,
    },
    /// Build and cache the graphs of every sample.
    Preprocess {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.agck, metrics.csv and config.toml.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Shorthand for train.epochs; decay epochs at or past it are dropped.
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for train.branch_mode: dual, point_only or voxel_only.
        #[arg(long)]
        branch: Option<String>,
    },
    /// Score a checkpoint on a split; writes confusion.csv and predictions.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train once per value of one setting and tabulate test top-1.
    Ablate {
        /// branch, blocks, voxel_k, voxel_size, max_num_events, sampling or readout.
        #[arg(long)]
        axis: String,
        /// Comma-separated values replacing the axis defaults.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on small random models.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Perturb the analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Write the pre-head read-out vector of every sample in a split.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV [default: <out>/embeddings_<split>.csv].
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// The `--help` epilogue: every config key with its default.
fn config_listing() -> String {
    let mut text = String::from("Config keys (for --set and config files) and defaults:\n");
    for (key, value) in RunConfig::default().entries() {
        text.push_str(&format!("  {key} = {value}\n"));
    }
    text
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_help(config_listing()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from this parser");
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidArgument(format!("split must be train or test, got `{s}`"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn load_manifest(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<DatasetManifest> {
    DatasetManifest::load(flag.as_ref().unwrap_or(&cfg.data.manifest))
}

fn open_cache(cli: &Cli, cfg: &RunConfig) -> Result<GraphCache> {
    let root = cli.cache.clone().unwrap_or_else(|| cli.out.join("cache"));
    GraphCache::open(root, cfg)
}

fn report_prep(stats: &PrepStats, elapsed: std::time::Duration) {
    eprintln!(
        "preprocessing: {} cached, {} built ({} point graphs, {} voxel graphs) in {:.2?}",
        stats.hits(),
        stats.computed(),
        stats.point_graphs(),
        stats.voxel_graphs(),
        elapsed
    );
}

/// Appends one CSV row per epoch as training proceeds.
struct MetricsLog {
    file: BufWriter<File>,
    path: PathBuf,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut log = MetricsLog {
            file: BufWriter::new(file),
            path,
            error: None,
        };
        log.write_line(METRICS_HEADER);
        Ok(log)
    }

    fn write_line(&mut self, line: &str) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{line}").and_then(|_| self.file.flush()) {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.error.take() {
            Some(e) => Err(io_error(&self.path, e)),
            None => Ok(()),
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Synth {
            num_classes,
            samples_per_class,
        } => {
            let mut cfg = resolve_config(cli)?;
            if let Some(n) = num_classes {
                cfg.synth.num_classes = *n;
            }
            let seed = cli.seed.unwrap_or(0);
            create_dir(&cli.out)?;
            let manifest = synth_dataset(&cli.out, &cfg.synth, *samples_per_class, seed)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                manifest.samples.len(),
                manifest.indices(Split::Train).len(),
                manifest.indices(Split::Test).len(),
                cli.out.join("manifest.json").display()
            );
        }
        Command::Preprocess { manifest } => {
            let cfg = resolve_config(cli)?;
            let manifest = load_manifest(&cfg, manifest)?;
            let cache = open_cache(cli, &cfg)?;
            let stats = PrepStats::default();
            let start = Instant::now();
            for split in [Split::Train, Split::Test] {
                prepare_split(&manifest, split, &cfg, Some(&cache), &stats)?;
            }
            report_prep(&stats, start.elapsed());
            println!("cache: {}", cache.dir().display());
        }
        Command::Train {
            manifest,
            epochs,
            branch,
        } => {
            let mut cfg = resolve_config(cli)?;
            if let Some(n) = epochs {
                cfg.train.epochs = *n;
                cfg.train.lr_decay_epochs.retain(|&d| d < *n);
            }
            if let Some(b) = branch {
                cfg.set("train.branch_mode", b)?;
            }
            cfg.validate()?;
            let manifest = load_manifest(&cfg, manifest)?;
            create_dir(&cli.out)?;
            write_file(&cli.out.join("config.toml"), cfg.to_toml())?;
            let cache = open_cache(cli, &cfg)?;
            let stats = PrepStats::default();
            let start = Instant::now();
            let train_set = prepare_split(&manifest, Split::Train, &cfg, Some(&cache), &stats)?;
            let test_set = prepare_split(&manifest, Split::Test, &cfg, Some(&cache), &stats)?;
            report_prep(&stats, start.elapsed());
            let mut metrics = MetricsLog::create(cli.out.join("metrics.csv"))?;
            let run = train_prepared(&cfg, manifest.num_classes, &train_set, &test_set, &mut |m: &EpochMetrics| {
                metrics.write_line(&m.csv_row());
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  lr {:e}",
                    m.epoch, m.train_loss, m.train_top1, m.test_top1, m.lr
                );
            })?;
            metrics.finish()?;
            let path = cli.out.join("checkpoint.agck");
            run.checkpoint.save(&path)?;
            let last = run.metrics.last();
            println!(
                "final test top-1: {:.4}",
                last.map_or(f64::NAN, |m| m.test_top1)
            );
            println!("checkpoint: {}", path.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let ck = load_checkpoint(cli, checkpoint)?;
            let manifest = load_manifest(&ck.config, manifest)?;
            let split = parse_split(split)?;
            let cache = open_cache(cli, &ck.config)?;
            let metrics = evaluate_run(&ck, &manifest, split, Some(&cache), &PrepStats::default())?;
            create_dir(&cli.out)?;
            let mut confusion = Vec::new();
            metrics.write_confusion_csv(&mut confusion).expect("writing to memory");
            write_file(&cli.out.join("confusion.csv"), confusion)?;
            let mut predictions = Vec::new();
            metrics.write_predictions_csv(&mut predictions).expect("writing to memory");
            write_file(&cli.out.join("predictions.csv"), predictions)?;
            println!("samples: {}", metrics.predictions.len());
            println!("top-1: {:.4}", metrics.top1);
            match metrics.top5 {
                Some(t) => println!("top-5: {t:.4}"),
                None => println!("top-5: n/a (fewer than 5 classes)"),
            }
        }
        Command::Ablate {
            axis,
            values,
            manifest,
        } => {
            let cfg = resolve_config(cli)?;
            let axis: AblationAxis = axis.parse()?;
            let values = if values.is_empty() {
                axis.default_values()
            } else {
                values.clone()
            };
            let settings = axis.settings(&cfg, &values)?;
            let manifest = load_manifest(&cfg, manifest)?;
            create_dir(&cli.out)?;
            let mut table = String::from("axis,value,train_top1,test_top1\n");
            for (value, setting) in settings {
                let cache = open_cache(cli, &setting)?;
                let run = train_run(&setting, &manifest, Some(&cache), &PrepStats::default(), &mut |_| {})?;
                let last = run.metrics.last().expect("at least one epoch");
                let row = format!("{},{value},{},{}", axis.name(), last.train_top1, last.test_top1);
                println!("{row}");
                table.push_str(&row);
                table.push('\n');
            }
            write_file(&cli.out.join(format!("ablation_{}.csv", axis.name())), table)?;
        }
        Command::Gradcheck {
            count,
            tolerance,
            epsilon,
            corrupt,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let start = Instant::now();
            let battery = gradcheck_battery(seed, *count, *epsilon, *tolerance, *corrupt)?;
            let mut failed = 0;
            let mut worst: f64 = 0.0;
            for inst in &battery {
                let err = inst.report.max_rel_error();
                worst = worst.max(err);
                let ok = inst.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{} {:<44} params {:>4} nodes {:>2} checked {:>4} max rel err {:.2e}",
                    if ok { "PASS" } else { "FAIL" },
                    inst.name,
                    inst.num_params,
                    inst.max_nodes,
                    inst.report.checked(),
                    err
                );
                if !ok && cli.verbose > 0 {
                    println!("{}", inst.report);
                }
            }
            println!(
                "{}/{} instances passed, worst relative error {worst:.2e}, tolerance {tolerance:e}, {:.2?}",
                battery.len() - failed,
                battery.len(),
                start.elapsed()
            );
            if failed > 0 {
                return Ok(ExitCode::from(3));
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            manifest,
            split,
            output,
        } => {
            let ck = load_checkpoint(cli, checkpoint)?;
            let manifest = load_manifest(&ck.config, manifest)?;
            let split_value = parse_split(split)?;
            let cache = open_cache(cli, &ck.config)?;
            let samples = prepare_split(&manifest, split_value, &ck.config, Some(&cache), &PrepStats::default())?;
            let path = output.clone().unwrap_or_else(|| cli.out.join(format!("embeddings_{split}.csv")));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let mut buf = Vec::new();
            write_embeddings(ck.model(), &samples, &mut buf)?;
            write_file(&path, buf)?;
            println!("wrote {} rows to {}", samples.len(), path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Loads a checkpoint; an explicit `--config` or `--set` must describe the
/// same pipeline.
fn load_checkpoint(cli: &Cli, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if cli.config.is_some() || !cli.set.is_empty() {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => ck.config.clone(),
        };
        cfg.apply_overrides(&cli.set)?;
        ck.check_compatible(&cfg)?;
    }
    Ok(ck)
}
