//! The train/validate/test sweep over methods and training-subset sizes.
//!
//! Phase one fits channels on each training subset, selects hyperparameters
//! by validation AUC and stores the final observer (calibrated on subset +
//! validation). Only after every cell has finished phase one is the test
//! split read, and phase two scores the stored observers on it. Each cell
//! persists its artifacts atomically under `cells/`, so an interrupted sweep
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Method};
use super::data::{generate_data_dir, AuditLog, DataDir};
use super::fit::{fit_channels, ChannelSpec};
use crate::channels::{lg_channels, pls_channels, AeLoss, ChannelMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{empirical_auc, BootstrapConfig, RocSummary};
use crate::imaging::{estimate_signal, generate_backgrounds, LabeledDataset, SignalEstimate, Split};
use crate::observers::{build_cho, build_ho_cmd, build_ho_direct, ObserverModel};
use crate::persist::{self, format_key_values, parse_key_values};
use crate::rng::{derive_seed, substream, Domain};
use crate::ImageVector;

pub const RESULTS_SCHEMA: &str = "cho sweep results v1";

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Worker threads; 1 is the reference path.
    pub threads: usize,
    /// Discard artifacts of earlier runs instead of resuming.
    pub fresh: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { threads: 1, fresh: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub subset: usize,
    pub restart: usize,
    pub seed: u64,
    pub hyperparameters: String,
    pub channels: usize,
    pub degenerate: bool,
    pub validation_auc: f64,
    pub test_auc_empirical: f64,
    pub test_auc_binormal: f64,
    pub test_auc_std_error: f64,
    pub test_snr: f64,
    pub status: String,
}

impl SweepRow {
    pub const HEADER: &'static str = "method,subset,restart,seed,hyperparameters,channels,degenerate,\
validation_auc,test_auc_empirical,test_auc_binormal,test_auc_std_error,test_snr,status";

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.subset,
            self.restart,
            self.seed,
            self.hyperparameters,
            self.channels,
            self.degenerate,
            self.validation_auc,
            self.test_auc_empirical,
            self.test_auc_binormal,
            self.test_auc_std_error,
            self.test_snr,
            self.status
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.splitn(13, ',').collect();
        if f.len() != 13 {
            return Err(Error::format("results row", format!("expected 13 fields: {line}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("results row", format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| Error::format("results row", format!("bad integer {s:?}")));
        Ok(Self {
            method: f[0].parse()?,
            subset: int(f[1])? as usize,
            restart: int(f[2])? as usize,
            seed: int(f[3])?,
            hyperparameters: f[4].to_string(),
            channels: int(f[5])? as usize,
            degenerate: f[6] == "true",
            validation_auc: num(f[7])?,
            test_auc_empirical: num(f[8])?,
            test_auc_binormal: num(f[9])?,
            test_auc_std_error: num(f[10])?,
            test_snr: num(f[11])?,
            status: f[12].to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTiming {
    pub method: Method,
    pub subset: usize,
    pub restart: usize,
    pub selection_seconds: f64,
    pub scoring_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    pub timings: Vec<CellTiming>,
    pub output_dir: PathBuf,
}

impl SweepResult {
    pub fn rows_for(&self, method: Method, subset: usize) -> impl Iterator<Item = &SweepRow> + '_ {
        self.rows.iter().filter(move |r| r.method == method && r.subset == subset)
    }

    pub fn results_csv(&self) -> String {
        let mut out = format!("# {RESULTS_SCHEMA}; config_hash={}\n{}\n", self.config_hash, SweepRow::HEADER);
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// Median, mean and standard deviation of the test AUCs across restarts.
    pub fn summary_csv(&self) -> String {
        let mut groups: Vec<((Method, usize), Vec<&SweepRow>)> = Vec::new();
        for row in self.rows.iter().filter(|r| r.is_ok()) {
            match groups.iter_mut().find(|(k, _)| *k == (row.method, row.subset)) {
                Some((_, rows)) => rows.push(row),
                None => groups.push(((row.method, row.subset), vec![row])),
            }
        }
        let mut out = format!(
            "# {RESULTS_SCHEMA} summary; config_hash={}\nmethod,subset,restarts,median_auc_binormal,mean_auc_binormal,std_auc_binormal,median_auc_empirical\n",
            self.config_hash
        );
        for ((method, subset), rows) in groups {
            let bin: Vec<f64> = rows.iter().map(|r| r.test_auc_binormal).collect();
            let emp: Vec<f64> = rows.iter().map(|r| r.test_auc_empirical).collect();
            let mean = bin.iter().sum::<f64>() / bin.len() as f64;
            let std = if bin.len() > 1 {
                (bin.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bin.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            out.push_str(&format!(
                "{method},{subset},{},{},{mean},{std},{}\n",
                rows.len(),
                median(&bin),
                median(&emp)
            ));
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("method,subset,restart,selection_seconds,scoring_seconds\n");
        for t in &self.timings {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.3}\n",
                t.method, t.subset, t.restart, t.selection_seconds, t.scoring_seconds
            ));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    method: Method,
    subset: usize,
    restart: usize,
}

impl Cell {
    fn id(&self) -> String {
        format!("{}_k{}_r{}", self.method, self.subset, self.restart)
    }

    fn seed(&self, base: u64) -> u64 {
        let label = derive_seed(self.method as u64, derive_seed(self.subset as u64, self.restart as u64));
        derive_seed(base, label)
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    train: LabeledDataset,
    validation: LabeledDataset,
    pair_order: Vec<usize>,
    backgrounds: OnceLock<Result<Vec<ImageVector>, String>>,
    cells_dir: PathBuf,
}

struct Selection {
    spec: Option<ChannelSpec>,
    validation_auc: f64,
    model: ObserverModel,
}

impl Context<'_> {
    fn subset(&self, k: usize) -> LabeledDataset {
        let mut ds = self.train.select_pairs(&self.pair_order[..k]);
        ds.split = Split::Train;
        ds
    }

    fn backgrounds(&self) -> Result<&[ImageVector]> {
        let cached = self.backgrounds.get_or_init(|| {
            generate_backgrounds(self.cfg.data.background_samples, &self.cfg.simulation(), self.cfg.seed)
                .map_err(|e| e.to_string())
        });
        cached.as_deref().map_err(|e| Error::invalid(e.clone()))
    }

    fn validation_auc(&self, model: &ObserverModel) -> Result<f64> {
        let (p, a) = model.score_by_class(&self.validation)?;
        Ok(empirical_auc(&p, &a))
    }

    fn candidates(&self, cell: &Cell, subset: &LabeledDataset, sig: &SignalEstimate) -> Result<Vec<(ChannelSpec, ChannelMatrix)>> {
        let grids = &self.cfg.grids;
        let center = self.cfg.simulation().signal.center;
        let sorted = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        let prefix = |full: &ChannelMatrix, m: usize| -> Result<ChannelMatrix> {
            let rows = full.matrix().rows(0, m.min(full.channel_count())).into_owned();
            ChannelMatrix::new(rows, full.method, full.side())
        };
        let mut out = Vec::new();
        match cell.method {
            Method::AeTask | Method::AeTraditional => {
                let loss = if cell.method == Method::AeTask { AeLoss::TaskSpecific } else { AeLoss::Traditional };
                let cell_seed = cell.seed(self.cfg.seed);
                let mut idx = 0u64;
                for m in sorted(&grids.ae_channels) {
                    for &lr in &grids.ae_learning_rates {
                        let spec = ChannelSpec::Ae { loss, channels: m, learning_rate: lr, seed: derive_seed(cell_seed, idx) };
                        idx += 1;
                        match fit_channels(&spec, subset, sig, &self.cfg.ae, center) {
                            Ok(ch) => out.push((spec, ch)),
                            Err(e) => log::warn!("{}: {} failed: {e}", cell.id(), spec.describe()),
                        }
                    }
                }
            }
            Method::Pls => {
                let ms = sorted(&grids.pls_channels);
                let full = pls_channels(subset, *ms.last().unwrap())?;
                for m in ms.into_iter().filter(|&m| m <= full.channels.channel_count()) {
                    out.push((ChannelSpec::Pls { channels: m }, prefix(&full.channels, m)?));
                }
            }
            Method::Lg | Method::ConvLg => {
                let ms = sorted(if cell.method == Method::Lg { &grids.lg_channels } else { &grids.conv_lg_channels });
                for &width in &grids.lg_widths {
                    let full_lg = lg_channels(*ms.last().unwrap(), width, subset.side(), center)?;
                    let full = if cell.method == Method::Lg {
                        full_lg
                    } else {
                        crate::channels::conv_lg_channels(&full_lg, sig)?
                    };
                    for &m in &ms {
                        let spec = if cell.method == Method::Lg {
                            ChannelSpec::Lg { channels: m, width }
                        } else {
                            ChannelSpec::ConvLg { channels: m, width }
                        };
                        out.push((spec, prefix(&full, m)?));
                    }
                }
            }
            Method::MatchedFilter => {
                out.push((ChannelSpec::MatchedFilter, crate::channels::matched_filter(sig)?));
            }
            Method::HoDirect | Method::HoCmd => return Err(super::fit::not_channelized(cell.method)),
        }
        Ok(out)
    }

    fn select(&self, cell: &Cell) -> Result<Selection> {
        let subset = self.subset(cell.subset);
        match cell.method {
            Method::HoDirect => {
                let probe = build_ho_direct(&subset)?;
                let validation_auc = self.validation_auc(&probe)?;
                let model = build_ho_direct(&subset.concat(&self.validation)?)?;
                Ok(Selection { spec: None, validation_auc, model })
            }
            Method::HoCmd => {
                let sig = SignalEstimate::oracle(&self.cfg.simulation())?;
                let model = build_ho_cmd(self.backgrounds()?, &sig, &self.cfg.simulation().noise)?;
                let validation_auc = self.validation_auc(&model)?;
                Ok(Selection { spec: None, validation_auc, model })
            }
            _ => {
                let sig = estimate_signal(&subset)?;
                let mut best: Option<(ChannelSpec, ChannelMatrix, f64)> = None;
                for (spec, channels) in self.candidates(cell, &subset, &sig)? {
                    let auc = match build_cho(&channels, &subset).and_then(|m| self.validation_auc(&m)) {
                        Ok(auc) if auc.is_finite() => auc,
                        Ok(_) => continue,
                        Err(e) => {
                            log::warn!("{}: {} not scorable: {e}", cell.id(), spec.describe());
                            continue;
                        }
                    };
                    log::debug!("{}: {} validation AUC {auc}", cell.id(), spec.describe());
                    let better = match &best {
                        None => true,
                        Some((b, _, b_auc)) => {
                            auc > *b_auc || (auc == *b_auc && spec.channel_count() < b.channel_count())
                        }
                    };
                    if better {
                        best = Some((spec, channels, auc));
                    }
                }
                let (spec, channels, validation_auc) =
                    best.ok_or_else(|| Error::invalid("no hyperparameter setting could be evaluated"))?;
                let model = build_cho(&channels, &subset.concat(&self.validation)?)?;
                Ok(Selection { spec: Some(spec), validation_auc, model })
            }
        }
    }

    fn paths(&self, cell: &Cell) -> (PathBuf, PathBuf, PathBuf) {
        let id = cell.id();
        (
            self.cells_dir.join(format!("{id}.model")),
            self.cells_dir.join(format!("{id}.sel")),
            self.cells_dir.join(format!("{id}.row")),
        )
    }

    /// Phase one for one cell; returns immediately when its artifacts exist.
    fn run_selection(&self, cell: &Cell) -> Result<()> {
        let (model_path, sel_path, row_path) = self.paths(cell);
        if row_path.is_file() || sel_path.is_file() {
            return Ok(());
        }
        let started = Instant::now();
        let seed = cell.seed(self.cfg.seed);
        let mut kv = BTreeMap::new();
        kv.insert("seed".to_string(), seed.to_string());
        match self.select(cell) {
            Ok(sel) => {
                sel.model.save(&model_path)?;
                let (desc, m) = match &sel.spec {
                    Some(spec) => (spec.describe(), spec_channels(&sel)),
                    None => ("-".to_string(), sel.model.template.len()),
                };
                kv.insert("status".to_string(), "ok".to_string());
                kv.insert("hyperparameters".to_string(), desc);
                kv.insert("channels".to_string(), m.to_string());
                kv.insert("degenerate".to_string(), sel.model.degenerate.to_string());
                kv.insert("validation_auc".to_string(), sel.validation_auc.to_string());
            }
            Err(e) => {
                log::error!("{}: selection failed: {e}", cell.id());
                kv.insert("status".to_string(), format!("failed: {}", sanitize(&e.to_string())));
            }
        }
        kv.insert("selection_seconds".to_string(), started.elapsed().as_secs_f64().to_string());
        persist::write_atomic(&sel_path, format_key_values("cell selection", &kv).as_bytes())
    }

    /// Phase two for one cell.
    fn run_scoring(&self, cell: &Cell, test: &LabeledDataset) -> Result<()> {
        let (model_path, sel_path, row_path) = self.paths(cell);
        if row_path.is_file() {
            return Ok(());
        }
        let started = Instant::now();
        let sel = read_kv(&sel_path)?;
        let get = |k: &str| sel.get(k).cloned().unwrap_or_default();
        let seed: u64 = get("seed").parse().unwrap_or(0);
        let mut row = SweepRow {
            method: cell.method,
            subset: cell.subset,
            restart: cell.restart,
            seed,
            hyperparameters: get("hyperparameters"),
            channels: get("channels").parse().unwrap_or(0),
            degenerate: get("degenerate") == "true",
            validation_auc: get("validation_auc").parse().unwrap_or(f64::NAN),
            test_auc_empirical: f64::NAN,
            test_auc_binormal: f64::NAN,
            test_auc_std_error: f64::NAN,
            test_snr: f64::NAN,
            status: get("status"),
        };
        if row.hyperparameters.is_empty() {
            row.hyperparameters = "-".to_string();
        }
        if row.is_ok() {
            let boot = BootstrapConfig {
                resamples: self.cfg.bootstrap_resamples,
                seed: derive_seed(seed, 0xB007),
            };
            let scored = ObserverModel::load(&model_path)
                .and_then(|model| model.score_by_class(test))
                .and_then(|(p, a)| RocSummary::compute(&p, &a, &boot));
            match scored {
                Ok(summary) => {
                    row.test_auc_empirical = summary.auc_empirical;
                    row.test_auc_binormal = summary.auc_binormal;
                    row.test_auc_std_error = summary.auc_std_error;
                    row.test_snr = summary.snr;
                }
                Err(e) => row.status = format!("failed: {}", sanitize(&e.to_string())),
            }
        }
        let mut kv = BTreeMap::new();
        kv.insert("row".to_string(), row.to_csv());
        kv.insert("selection_seconds".to_string(), get("selection_seconds"));
        kv.insert("scoring_seconds".to_string(), started.elapsed().as_secs_f64().to_string());
        persist::write_atomic(&row_path, format_key_values("cell result", &kv).as_bytes())
    }
}

fn spec_channels(sel: &Selection) -> usize {
    sel.model.channels.as_ref().map_or(0, |c| c.channel_count())
}

fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], ";")
}

fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = persist::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format("cell record", "not valid UTF-8"))?;
    parse_key_values(&text, "cell record")
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &subset in &cfg.subsets {
            let restarts = if method.is_autoencoder() { cfg.restarts } else { 1 };
            for restart in 0..restarts {
                out.push(Cell { method, subset, restart });
            }
        }
    }
    out
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Opens (generating if needed) the dataset directory and loads the
/// training and validation splits. The test split is left untouched.
fn prepare<'a>(
    cfg: &'a ExperimentConfig,
    pool: &rayon::ThreadPool,
    audit: &AuditLog,
    cells_dir: PathBuf,
) -> Result<(DataDir, Context<'a>)> {
    let data_root = match &cfg.data.data_dir {
        Some(dir) => super::config::resolve_output(dir),
        None => cfg.resolved_output_dir().join("data"),
    };
    if !DataDir::exists(&data_root) {
        log::info!("generating datasets in {}", data_root.display());
        pool.install(|| generate_data_dir(cfg, &data_root))?;
    }
    let data = DataDir::open(&data_root)?;
    if data.side()? != cfg.side {
        return Err(Error::mismatch(cfg.side, data.side()?, "dataset side vs config"));
    }
    audit.record("phase selection")?;
    let train = data.load(Split::Train, audit)?;
    let validation = data.load(Split::Validation, audit)?;
    if let Some(&k) = cfg.subsets.iter().find(|&&k| k > train.n_pairs()) {
        return Err(Error::invalid(format!("subset {k} exceeds {} stored training pairs", train.n_pairs())));
    }
    let mut pair_order: Vec<usize> = (0..train.n_pairs()).collect();
    pair_order.shuffle(&mut substream(cfg.seed, Domain::Shuffle, 0));
    let ctx = Context {
        cfg,
        train,
        validation,
        pair_order,
        backgrounds: OnceLock::new(),
        cells_dir,
    };
    Ok((data, ctx))
}

/// Result of fitting one method on one training subset.
#[derive(Debug, Clone)]
pub struct TrainedMethod {
    /// Selected channel hyperparameters; `None` for the Hotelling observers.
    pub spec: Option<ChannelSpec>,
    pub validation_auc: f64,
    /// Final observer, calibrated on the subset plus the validation split.
    pub model: ObserverModel,
}

/// Runs the grid search of a single sweep cell without touching the test
/// split. `subset` defaults to every stored training pair.
pub fn train_method(
    cfg: &ExperimentConfig,
    method: Method,
    subset: Option<usize>,
    restart: usize,
    threads: usize,
) -> Result<TrainedMethod> {
    let pool = build_pool(threads)?;
    let audit = AuditLog::new(None);
    let (_, ctx) = prepare(cfg, &pool, &audit, cfg.resolved_output_dir().join("cells"))?;
    let k = subset.unwrap_or(ctx.train.n_pairs());
    if k == 0 || k > ctx.train.n_pairs() {
        return Err(Error::invalid(format!("subset {k} outside 1..={}", ctx.train.n_pairs())));
    }
    let cell = Cell { method, subset: k, restart };
    let sel = pool.install(|| ctx.select(&cell))?;
    Ok(TrainedMethod { spec: sel.spec, validation_auc: sel.validation_auc, model: sel.model })
}

/// Runs (or resumes) the sweep described by `cfg` and writes `results.csv`,
/// `summary.csv`, `timings.csv` and `audit.log` into the output directory.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<SweepResult> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    let cells_dir = out.join("cells");
    if opts.fresh && cells_dir.exists() {
        fs::remove_dir_all(&cells_dir)?;
    }
    fs::create_dir_all(&cells_dir)?;
    persist::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let pool = build_pool(opts.threads)?;
    let audit = AuditLog::new(Some(out.join("audit.log")));
    let (data, ctx) = prepare(cfg, &pool, &audit, cells_dir.clone())?;
    let cells = cells(cfg);
    pool.install(|| cells.par_iter().try_for_each(|cell| ctx.run_selection(cell)))?;

    audit.record("phase test")?;
    let test = data.load(Split::Test, &audit)?;
    pool.install(|| cells.par_iter().try_for_each(|cell| ctx.run_scoring(cell, &test)))?;

    let mut rows = Vec::with_capacity(cells.len());
    let mut timings = Vec::with_capacity(cells.len());
    for cell in &cells {
        let (_, _, row_path) = ctx.paths(cell);
        let kv = read_kv(&row_path)?;
        let line = kv.get("row").ok_or_else(|| Error::format("cell record", "missing row"))?;
        rows.push(SweepRow::from_csv(line)?);
        let secs = |k: &str| kv.get(k).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
        timings.push(CellTiming {
            method: cell.method,
            subset: cell.subset,
            restart: cell.restart,
            selection_seconds: secs("selection_seconds"),
            scoring_seconds: secs("scoring_seconds"),
        });
    }
    let result = SweepResult {
        config_hash: cfg.hash(),
        rows,
        timings,
        output_dir: out.clone(),
    };
    persist::write_atomic(&out.join("results.csv"), result.results_csv().as_bytes())?;
    persist::write_atomic(&out.join("summary.csv"), result.summary_csv().as_bytes())?;
    persist::write_atomic(&out.join("timings.csv"), result.timings_csv().as_bytes())?;
    Ok(result)
}

/// Reads the rows of a `results.csv` written by [`run_sweep`].
pub fn read_results(path: &Path) -> Result<Vec<SweepRow>> {
    let bytes = persist::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format("results", "not valid UTF-8"))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty() && !l.starts_with("method,"))
        .map(SweepRow::from_csv)
        .collect()
}

/// Projection matrix helper for callers that want channel responses.
pub fn channel_responses(channels: &ChannelMatrix, ds: &LabeledDataset) -> DMatrix<f64> {
    channels.matrix() * DMatrix::from_column_slice(ds.dim(), ds.len(), ds.pixels())
}
