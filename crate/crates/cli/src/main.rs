//! `cho`: dataset generation, channel training, evaluation and sweeps for
//! channelized Hotelling observers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use cho_core::channels::ChannelMatrix;
use cho_core::evaluation::{BootstrapConfig, RocSummary};
use cho_core::harness::{
    export, generate_data_dir, read_results, run_sweep, train_method, AuditLog, DataDir, ExperimentConfig,
    Method, SweepOptions,
};
use cho_core::harness::data::{split_file_name, MANIFEST_NAME};
use cho_core::imaging::storage::{load_external_dataset, read_dataset, write_dataset, write_manifest};
use cho_core::observers::{build_cho, ObserverModel};
use cho_core::{Error, LabeledDataset, Split};

const EXIT_CONFIG: u8 = 3;
const EXIT_MISSING: u8 = 4;
const EXIT_DIMENSION: u8 = 5;
const EXIT_OTHER: u8 = 6;

#[derive(Parser)]
#[command(name = "cho", version, about = "Channelized Hotelling observer experiments")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the train/validation/test splits and write a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Select hyperparameters and fit channels plus the final observer for one method.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Method,
        /// Training pairs to use (default: all).
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value_t = 0)]
        restart: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Score a stored observer (or channels) on a dataset and report AUC.
    Eval {
        /// `.choom` observer or `.chocm` channel matrix.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory (its test split is scored) or a single `.chods` file.
        #[arg(long)]
        data: PathBuf,
        /// Calibration data when `--model` holds bare channels; defaults to
        /// train + validation of the `--data` directory.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Convert an external image manifest into a dataset directory.
    Import {
        /// Manifest of `image = path label split` lines.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full train/validate/test protocol.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Discard artifacts from earlier runs instead of resuming.
        #[arg(long)]
        fresh: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write channel images and learning-curve tables as plain text.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Export this `.choom`/`.chocm` file instead of a sweep's artifacts.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// An error tagged with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error.chain().find_map(|e| e.downcast_ref::<Error>()).map_or(EXIT_OTHER, classify);
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::DimensionMismatch { .. } => EXIT_DIMENSION,
        Error::Unreadable { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        Error::Io(source) if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_OTHER,
    }
}

fn load_config(path: &Path, common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| {
        let code = match classify(&e) {
            EXIT_MISSING => EXIT_MISSING,
            _ => EXIT_CONFIG,
        };
        Failure { code, error: anyhow::Error::from(e).context(format!("config {}", path.display())) }
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { config, common } => {
            let cfg = load_config(&config, &common)?;
            let dir = match &common.out {
                Some(out) => cho_core::harness::config::resolve_output(out),
                None => cfg.resolved_output_dir().join("data"),
            };
            let pool = rayon_pool(common.threads)?;
            pool.install(|| generate_data_dir(&cfg, &dir))?;
            println!("{}", dir.display());
        }
        Command::Train { config, method, subset, restart, common } => {
            let cfg = load_config(&config, &common)?;
            let trained = train_method(&cfg, method, subset, restart, common.threads)?;
            let out = cfg.resolved_output_dir();
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            let model_path = out.join(format!("{method}.choom"));
            trained.model.save(&model_path)?;
            if let Some(ch) = &trained.model.channels {
                ch.save(&out.join(format!("{method}.chocm")))?;
            }
            let hyper = trained.spec.as_ref().map_or("-".to_string(), |s| s.describe());
            println!("{method} {hyper} validation_auc={} -> {}", trained.validation_auc, model_path.display());
        }
        Command::Eval { model, data, calibration, config, common } => eval(&model, &data, calibration.as_deref(), config.as_deref(), &common)?,
        Command::Import { manifest, out } => {
            let ext = load_external_dataset(&manifest)?;
            let out = cho_core::harness::config::resolve_output(&out);
            let mut entries = BTreeMap::new();
            entries.insert("format".to_string(), "CHODS01".to_string());
            entries.insert("side".to_string(), ext.side.to_string());
            entries.insert("source".to_string(), manifest.display().to_string());
            for (split, ds) in &ext.splits {
                let file = split_file_name(*split);
                write_dataset(&out.join(&file), ds)?;
                entries.insert(split.name().to_string(), file);
                entries.insert(format!("{}_pairs", split.name()), ds.n_pairs().to_string());
            }
            write_manifest(&out.join(MANIFEST_NAME), &entries)?;
            println!("{}", out.display());
        }
        Command::Sweep { config, fresh, common } => {
            let cfg = load_config(&config, &common)?;
            let result = run_sweep(&cfg, &SweepOptions { threads: common.threads, fresh })?;
            let failed = result.rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} rows ({failed} failed) -> {}",
                result.rows.len(),
                result.output_dir.join("results.csv").display()
            );
        }
        Command::Export { config, model, common } => export_cmd(config.as_deref(), model.as_deref(), &common)?,
    }
    Ok(())
}

fn rayon_pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| anyhow::anyhow!("thread pool: {e}").into())
}

/// Loads either a stored observer or a bare channel matrix.
enum Stored {
    Observer(ObserverModel),
    Channels(ChannelMatrix),
}

fn load_stored(path: &Path) -> Result<Stored, Failure> {
    let bytes = cho_core::persist::read_file(path)?;
    if bytes.starts_with(b"CHOOM01\0") {
        Ok(Stored::Observer(ObserverModel::from_bytes(&bytes)?))
    } else if bytes.starts_with(b"CHOCM01\0") {
        Ok(Stored::Channels(ChannelMatrix::from_bytes(&bytes)?))
    } else {
        Err(anyhow::anyhow!("{} is neither an observer nor a channel file", path.display()).into())
    }
}

fn load_split(path: &Path, split: Split) -> Result<LabeledDataset, Failure> {
    if path.is_dir() {
        let dir = DataDir::open(path)?;
        Ok(dir.load(split, &AuditLog::new(None))?)
    } else {
        Ok(read_dataset(path, split)?)
    }
}

fn eval(model: &Path, data: &Path, calibration: Option<&Path>, config: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let cfg = config.map(|c| load_config(c, common)).transpose()?;
    let seed = common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let resamples = cfg.as_ref().map_or(200, |c| c.bootstrap_resamples);
    let test = load_split(data, Split::Test)?;
    let observer = match load_stored(model)? {
        Stored::Observer(o) => o,
        Stored::Channels(ch) => {
            if ch.side() != test.side() {
                return Err(Error::DimensionMismatch {
                    expected: ch.side(),
                    found: test.side(),
                    context: format!("channel side vs {}", data.display()),
                }
                .into());
            }
            let calib = match calibration {
                Some(p) => load_split(p, Split::Train)?,
                None if data.is_dir() => {
                    let train = load_split(data, Split::Train)?;
                    train.concat(&load_split(data, Split::Validation)?)?
                }
                None => {
                    return Err(anyhow::anyhow!("--calibration is required when --model holds channels and --data is a file").into())
                }
            };
            build_cho(&ch, &calib)?
        }
    };
    if observer.side() != test.side() {
        return Err(Error::DimensionMismatch {
            expected: observer.side(),
            found: test.side(),
            context: format!("model side vs {}", data.display()),
        }
        .into());
    }
    let (p, a) = observer.score_by_class(&test)?;
    let summary = RocSummary::compute(&p, &a, &BootstrapConfig { resamples, seed })?;
    if let Some(out) = &common.out {
        let out = cho_core::harness::config::resolve_output(out);
        std::fs::create_dir_all(&out).map_err(Error::from)?;
        summary.write(&out.join("roc_summary.txt"), Some(&out.join("roc_curve.txt")))?;
    }
    println!(
        "auc_empirical={} auc_binormal={} auc_std_error={} snr={}",
        summary.auc_empirical, summary.auc_binormal, summary.auc_std_error, summary.snr
    );
    Ok(())
}

fn export_cmd(config: Option<&Path>, model: Option<&Path>, common: &Common) -> Result<(), Failure> {
    if let Some(model) = model {
        let out = common
            .out
            .as_deref()
            .map(cho_core::harness::config::resolve_output)
            .ok_or_else(|| anyhow::anyhow!("--out is required with --model"))?;
        let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        match load_stored(model)? {
            Stored::Channels(ch) => {
                export::export_channel_images(&ch, &out, &stem)?;
            }
            Stored::Observer(o) => {
                std::fs::create_dir_all(&out).map_err(Error::from)?;
                export::export_template_image(&o, &out.join(format!("{stem}_template.txt")))?;
                if let Some(ch) = &o.channels {
                    export::export_channel_images(ch, &out, &stem)?;
                }
            }
        }
        println!("{}", out.display());
        return Ok(());
    }
    let config = config.ok_or_else(|| anyhow::anyhow!("export needs --config or --model"))?;
    let cfg = load_config(config, &Common { out: None, ..common.clone() })?;
    let sweep_dir = cfg.resolved_output_dir();
    let out = common
        .out
        .as_deref()
        .map(cho_core::harness::config::resolve_output)
        .unwrap_or_else(|| sweep_dir.join("export"));
    let rows = read_results(&sweep_dir.join("results.csv"))?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    export::write_learning_curves(&rows, &out.join("learning_curves.txt"))?;
    let cells = sweep_dir.join("cells");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&cells)
        .with_context(|| format!("listing {}", cells.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "model"))
        .collect();
    entries.sort();
    for path in entries {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cell").to_string();
        let model = ObserverModel::load(&path)?;
        export::export_template_image(&model, &out.join(format!("{stem}_template.txt")))?;
        if let Some(ch) = &model.channels {
            export::export_channel_images(ch, &out.join("channels"), &stem)?;
        }
    }
    println!("{}", out.display());
    Ok(())
}
