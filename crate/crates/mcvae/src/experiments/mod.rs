//! Experiment protocols over the trained model: cross-validated survival
//! runs, the modality-combination grid, robustness sweeps, and a
//! statistics report aggregating recorded runs.
//!
//! Every protocol is a pure function of its configuration and seed list:
//! identical inputs reproduce identical run outcomes. Results are stored
//! as one `records.csv` per experiment directory, appended as runs finish
//! and rewritten canonically at the end, so an interrupted campaign can be
//! restarted and picks up where it left off.

mod report;

pub use report::{build_report, write_report, BaselineComparison, ExperimentReport};

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_missingness, generate_cohort, load_cohort, restrict_to_combination, stratified_folds,
    Cohort, FoldPlan, FoldSplit, PatientRecord, RobustScaler, SyntheticSpec, NUM_MODALITIES,
};
use crate::error::{McvaeError, Result};
use crate::model::McvaeModel;
use crate::nn::{stream_rng, Stream};
use crate::training::{build_model, evaluate, train, TrainConfig};

/// Modality-dropout rates swept by the robustness experiment.
pub const DROPOUT_GRID: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];

/// Data missingness levels swept against a fixed training recipe.
pub const MISSINGNESS_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// The eight modality combinations, clinical always included. `C` =
/// clinical, `T` = transcriptomics, `W` = whole-slide imaging, `M` =
/// methylation; order matches the comparison tables.
pub const COMBINATIONS: [(&str, [bool; NUM_MODALITIES]); 8] = [
    ("C", [true, false, false, false]),
    ("C+T", [true, true, false, false]),
    ("C+W", [true, false, true, false]),
    ("C+M", [true, false, false, true]),
    ("C+T+W", [true, true, true, false]),
    ("C+T+M", [true, true, false, true]),
    ("C+W+M", [true, false, true, true]),
    ("C+T+W+M", [true, true, true, true]),
];

/// Where the cohort comes from: an existing file wins over the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    /// Path to a cohort file written by `write_cohort`.
    pub file: Option<PathBuf>,
    /// Generator settings used when no file is given.
    pub generate: SyntheticSpec,
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource {
            file: None,
            generate: SyntheticSpec::default(),
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Cohort> {
        match &self.file {
            Some(path) => {
                let cohort = load_cohort(path, None)?;
                cohort.validate()?;
                Ok(cohort)
            }
            None => generate_cohort(&self.generate),
        }
    }
}

/// Full description of an experiment campaign. Parsed from TOML; every
/// field has a default, so a config file only states what it changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    /// Cross-validation fold count.
    pub folds: usize,
    /// Seed for the fold plan, shared by every run so all configurations
    /// see the same patient splits.
    pub fold_seed: u64,
    /// Training seeds; each (configuration, fold, seed) triple is one run.
    pub seeds: Vec<u64>,
    /// Modality-dropout rates for the dropout sweep.
    pub dropout_grid: Vec<f64>,
    /// Missingness levels for the missingness sweep.
    pub missingness_grid: Vec<f64>,
    /// Root directory; each protocol writes into its own subdirectory.
    pub out_dir: PathBuf,
    /// Parallel training workers.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            folds: 5,
            fold_seed: 0,
            seeds: vec![0, 1, 2],
            dropout_grid: DROPOUT_GRID.to_vec(),
            missingness_grid: MISSINGNESS_GRID.to_vec(),
            out_dir: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset.file.is_none() {
            self.dataset.generate.validate()?;
        }
        if self.folds < 2 {
            return Err(McvaeError::Config(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.seeds.is_empty() {
            return Err(McvaeError::Config("seed list must not be empty".into()));
        }
        let mut uniq: Vec<u64> = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(McvaeError::Config("seed list contains duplicates".into()));
        }
        if self.dropout_grid.is_empty() || self.missingness_grid.is_empty() {
            return Err(McvaeError::Config("sweep grids must not be empty".into()));
        }
        if self.dropout_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(McvaeError::Config(
                "dropout grid rates must lie in [0, 1]".into(),
            ));
        }
        if self.missingness_grid.iter().any(|m| !(0.0..1.0).contains(m)) {
            return Err(McvaeError::Config(
                "missingness grid levels must lie in [0, 1)".into(),
            ));
        }
        if self.workers == 0 {
            return Err(McvaeError::Config("worker count must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a single training run, one row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Which protocol produced the row.
    pub experiment: String,
    /// Configuration within the protocol, e.g. `C+T` or `p=0.3`.
    pub config_id: String,
    pub fold: usize,
    pub seed: u64,
    pub test_cindex: f64,
    pub epochs_trained: usize,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.test_cindex.is_finite() || !(0.0..=1.0).contains(&self.test_cindex) {
            return Err(McvaeError::InvalidArgument(format!(
                "test concordance must lie in [0, 1], got {}",
                self.test_cindex
            )));
        }
        if !self.wall_seconds.is_finite() || self.wall_seconds < 0.0 {
            return Err(McvaeError::InvalidArgument(format!(
                "wall time must be non-negative, got {}",
                self.wall_seconds
            )));
        }
        Ok(())
    }

    /// Identity of the run within its experiment, used for resume.
    pub fn key(&self) -> (String, usize, u64) {
        (self.config_id.clone(), self.fold, self.seed)
    }
}

/// Mean and spread of test concordance for one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct FoldResults {
    pub config_id: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub records: Vec<RunRecord>,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Sort key giving configurations their table order: combinations by
/// grid position, sweep points by numeric value, anything else by name.
pub(crate) fn config_order_key(id: &str) -> (u8, f64, String) {
    if let Some(pos) = COMBINATIONS.iter().position(|(name, _)| *name == id) {
        return (0, pos as f64, String::new());
    }
    for (family, prefix) in [(1u8, "p="), (2u8, "m=")] {
        if let Some(v) = id.strip_prefix(prefix).and_then(|s| s.parse::<f64>().ok()) {
            return (family, v, String::new());
        }
    }
    (3, 0.0, id.to_string())
}

/// Group records by configuration and aggregate each group, in table order.
pub fn aggregate(records: &[RunRecord]) -> Vec<FoldResults> {
    let mut ids: Vec<String> = Vec::new();
    for r in records {
        if !ids.contains(&r.config_id) {
            ids.push(r.config_id.clone());
        }
    }
    ids.sort_by(|a, b| {
        let (fa, va, sa) = config_order_key(a);
        let (fb, vb, sb) = config_order_key(b);
        fa.cmp(&fb).then(va.total_cmp(&vb)).then(sa.cmp(&sb))
    });
    ids.iter()
        .map(|id| {
            let mut group: Vec<RunRecord> = records
                .iter()
                .filter(|r| &r.config_id == id)
                .cloned()
                .collect();
            group.sort_by_key(|r| (r.fold, r.seed));
            let (mean, std) = mean_std(&group.iter().map(|r| r.test_cindex).collect::<Vec<_>>());
            FoldResults {
                config_id: id.clone(),
                n: group.len(),
                mean,
                std,
                records: group,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Results store

/// Append-only results table with crash-tolerant reload. Rows flush as
/// each run completes; `finalize` rewrites the file in canonical order
/// through a temporary sibling so the table on disk is never torn.
pub struct RunStore {
    path: PathBuf,
    inner: Mutex<StoreInner>,
}

struct StoreInner {
    writer: csv::Writer<File>,
    records: Vec<RunRecord>,
}

const RESULTS_FILE: &str = "records.csv";

impl RunStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESULTS_FILE);
        let mut records = Vec::new();
        let exists = path.exists();
        if exists {
            records = read_records_lenient(&path)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record([
                "experiment",
                "config_id",
                "fold",
                "seed",
                "test_cindex",
                "epochs_trained",
                "wall_seconds",
            ])?;
            writer.flush()?;
        }
        Ok(RunStore {
            path,
            inner: Mutex::new(StoreInner { writer, records }),
        })
    }

    pub fn completed(&self) -> HashSet<(String, usize, u64)> {
        let inner = self.inner.lock().expect("results store poisoned");
        inner.records.iter().map(RunRecord::key).collect()
    }

    pub fn append(&self, record: RunRecord) -> Result<()> {
        record.validate()?;
        let mut inner = self.inner.lock().expect("results store poisoned");
        inner.writer.serialize(&record)?;
        inner.writer.flush()?;
        inner.records.push(record);
        Ok(())
    }

    /// Rewrite the table sorted by (configuration, fold, seed) and return
    /// the records. The rewrite goes through a temporary file and a rename.
    pub fn finalize(self) -> Result<Vec<RunRecord>> {
        let inner = self.inner.into_inner().expect("results store poisoned");
        drop(inner.writer);
        let mut records = inner.records;
        records.sort_by(|a, b| {
            let (fa, va, sa) = config_order_key(&a.config_id);
            let (fb, vb, sb) = config_order_key(&b.config_id);
            fa.cmp(&fb)
                .then(va.total_cmp(&vb))
                .then(sa.cmp(&sb))
                .then(a.fold.cmp(&b.fold))
                .then(a.seed.cmp(&b.seed))
        });
        let tmp = self.path.with_extension("csv.tmp");
        {
            let mut writer = csv::Writer::from_path(&tmp)?;
            for r in &records {
                writer.serialize(r)?;
            }
            writer.flush()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(records)
    }
}

/// Read a results table, tolerating a torn or malformed tail: bad rows
/// after the good prefix are dropped with a warning. Duplicate run keys
/// keep their first occurrence.
pub fn read_records_lenient(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out: Vec<RunRecord> = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<RunRecord>() {
        match row {
            Ok(r) => {
                if r.validate().is_err() {
                    log::warn!("dropping out-of-range row in {}: {:?}", path.display(), r);
                    continue;
                }
                if seen.insert(r.key()) {
                    out.push(r);
                }
            }
            Err(e) => {
                log::warn!(
                    "stopping at malformed row in {} (likely an interrupted write): {e}",
                    path.display()
                );
                break;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Runner

/// One pending training run: a configuration's cohort, a fold split, and
/// the per-run training configuration (seed already set).
struct RunTask {
    experiment: String,
    config_id: String,
    fold: usize,
    seed: u64,
    records: Arc<Vec<PatientRecord>>,
    split: FoldSplit,
    cfg: TrainConfig,
    metrics_path: PathBuf,
}

/// Scale-fit on the training fold only, then transform every split with
/// those statistics so no test information leaks into preprocessing.
fn prepare_split(
    records: &[PatientRecord],
    split: &FoldSplit,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>)> {
    let take = |idx: &[usize]| -> Vec<PatientRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    };
    let mut train = take(&split.train);
    let mut val = take(&split.val);
    let mut test = take(&split.test);
    let scaler = RobustScaler::fit(&train)?;
    scaler.transform(&mut train);
    scaler.transform(&mut val);
    scaler.transform(&mut test);
    Ok((train, val, test))
}

fn run_task(task: &RunTask, dims: [usize; NUM_MODALITIES]) -> Result<RunRecord> {
    let started = Instant::now();
    let (train_set, val_set, test_set) = prepare_split(&task.records, &task.split)?;
    let mut model: McvaeModel = build_model(&task.cfg, dims)?;
    let state = train(
        &mut model,
        &train_set,
        &val_set,
        &task.cfg,
        Some(&task.metrics_path),
        None,
    )?;
    let test_eval = evaluate(&model, &test_set)?;
    Ok(RunRecord {
        experiment: task.experiment.clone(),
        config_id: task.config_id.clone(),
        fold: task.fold,
        seed: task.seed,
        test_cindex: test_eval.cindex.value,
        epochs_trained: state.epoch,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// A configuration to expand into (fold, seed) runs: its transformed
/// cohort plus the training configuration template.
struct ConfigSet {
    config_id: String,
    records: Arc<Vec<PatientRecord>>,
    cfg: TrainConfig,
}

fn expand_tasks(
    experiment: &str,
    dir: &Path,
    sets: &[ConfigSet],
    plan: &FoldPlan,
    seeds: &[u64],
) -> Result<Vec<RunTask>> {
    let metrics_dir = dir.join("metrics");
    fs::create_dir_all(&metrics_dir)?;
    let mut tasks = Vec::new();
    for set in sets {
        for (fold, split) in plan.folds.iter().enumerate() {
            for &seed in seeds {
                let mut cfg = set.cfg.clone();
                cfg.seed = seed;
                tasks.push(RunTask {
                    experiment: experiment.to_string(),
                    config_id: set.config_id.clone(),
                    fold,
                    seed,
                    records: Arc::clone(&set.records),
                    split: split.clone(),
                    cfg,
                    metrics_path: metrics_dir
                        .join(format!("{}_f{}_s{}.jsonl", set.config_id, fold, seed)),
                });
            }
        }
    }
    Ok(tasks)
}

/// Run every pending task, append outcomes to the store as they finish,
/// and return the full sorted table. Failed runs become gaps: they are
/// logged, written to `failures.log`, and excluded from the table.
fn execute(
    experiment: &str,
    dir: &Path,
    workers: usize,
    dims: [usize; NUM_MODALITIES],
    tasks: Vec<RunTask>,
) -> Result<Vec<RunRecord>> {
    let store = RunStore::open(dir)?;
    let done = store.completed();
    let total = tasks.len();
    let pending: Vec<RunTask> = tasks
        .into_iter()
        .filter(|t| !done.contains(&(t.config_id.clone(), t.fold, t.seed)))
        .collect();
    log::info!(
        "{experiment}: {} of {total} runs already recorded, {} to run",
        total - pending.len(),
        pending.len()
    );

    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let run_one = |task: &RunTask| {
        let label = format!("{} fold {} seed {}", task.config_id, task.fold, task.seed);
        match run_task(task, dims) {
            Ok(record) => {
                log::info!(
                    "{experiment}: {label} -> C {:.4} in {} epochs ({:.1}s)",
                    record.test_cindex,
                    record.epochs_trained,
                    record.wall_seconds
                );
                if let Err(e) = store.append(record) {
                    failures
                        .lock()
                        .expect("failure log poisoned")
                        .push(format!("{label}: could not record result: {e}"));
                }
            }
            Err(e) => {
                log::warn!("{experiment}: {label} failed: {e}");
                failures
                    .lock()
                    .expect("failure log poisoned")
                    .push(format!("{label}: {e}"));
            }
        }
    };

    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| McvaeError::Config(format!("could not build worker pool: {e}")))?;
        pool.install(|| pending.par_iter().for_each(run_one));
    } else {
        pending.iter().for_each(run_one);
    }

    let failures = failures.into_inner().expect("failure log poisoned");
    if !failures.is_empty() {
        let mut f = File::create(dir.join("failures.log"))?;
        for line in &failures {
            writeln!(f, "{line}")?;
        }
        log::warn!(
            "{experiment}: {} runs failed and are excluded from the table; see failures.log",
            failures.len()
        );
    }
    let records = store.finalize()?;
    if records.is_empty() {
        return Err(McvaeError::InvalidArgument(format!(
            "{experiment}: every run failed; nothing to aggregate"
        )));
    }
    Ok(records)
}

fn write_summary(dir: &Path, experiment: &str, results: &[FoldResults]) -> Result<()> {
    let mut text = format!("{experiment}: test concordance by configuration\n");
    for r in results {
        text.push_str(&format!(
            "  {:<10} {:.3} ± {:.3}  ({} runs)\n",
            r.config_id, r.mean, r.std, r.n
        ));
    }
    fs::write(dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn write_curve(dir: &Path, x_name: &str, xs: &[f64], results: &[FoldResults]) -> Result<()> {
    let mut out = String::from(x_name);
    out.push_str(",mean_cindex,std_cindex,n_runs\n");
    for (x, r) in xs.iter().zip(results) {
        out.push_str(&format!("{x},{},{},{}\n", r.mean, r.std, r.n));
    }
    let tmp = dir.join("curve.csv.tmp");
    fs::write(&tmp, &out)?;
    fs::rename(tmp, dir.join("curve.csv"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Protocols

/// Outcome of a standalone training run.
pub struct SingleRun {
    pub state: crate::training::TrainState,
    pub test: crate::training::Evaluation,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// One training run on the first fold, with a metrics trace and a
/// best-validation checkpoint written under `out_dir/train/`.
pub fn run_single(cfg: &ExperimentConfig) -> Result<SingleRun> {
    cfg.validate()?;
    let cohort = cfg.dataset.load()?;
    let plan = stratified_folds(&cohort.records, cfg.folds, cfg.fold_seed)?;
    let dir = cfg.out_dir.join("train");
    fs::create_dir_all(&dir)?;
    let (train_set, val_set, test_set) = prepare_split(&cohort.records, &plan.folds[0])?;
    let mut run_cfg = cfg.train.clone();
    run_cfg.seed = cfg.seeds[0];
    let mut model = build_model(&run_cfg, cohort.dims)?;
    let metrics_path = dir.join("metrics.jsonl");
    let checkpoint_path = dir.join("model.ckpt");
    let state = train(
        &mut model,
        &train_set,
        &val_set,
        &run_cfg,
        Some(&metrics_path),
        Some(&checkpoint_path),
    )?;
    let test = evaluate(&model, &test_set)?;
    Ok(SingleRun {
        state,
        test,
        metrics_path,
        checkpoint_path,
    })
}

/// Cross-validated survival evaluation: one configuration, every
/// (fold, seed) pair, natural missingness. The headline number is the
/// mean ± std of test concordance over all runs.
pub fn run_survival(cfg: &ExperimentConfig) -> Result<Vec<FoldResults>> {
    cfg.validate()?;
    let cohort = cfg.dataset.load()?;
    let plan = stratified_folds(&cohort.records, cfg.folds, cfg.fold_seed)?;
    let dir = cfg.out_dir.join("survival");
    let sets = vec![ConfigSet {
        config_id: "mcvae".into(),
        records: Arc::new(cohort.records),
        cfg: cfg.train.clone(),
    }];
    let tasks = expand_tasks("survival", &dir, &sets, &plan, &cfg.seeds)?;
    let records = execute("survival", &dir, cfg.workers, cohort.dims, tasks)?;
    let results = aggregate(&records);
    write_summary(&dir, "survival", &results)?;
    Ok(results)
}

/// Modality-combination grid: the eight clinical-anchored subsets, each
/// masked out of both train and test so the model never sees an excluded
/// modality. Patients and fold splits are identical across combinations.
pub fn run_combinations(cfg: &ExperimentConfig) -> Result<Vec<FoldResults>> {
    cfg.validate()?;
    let cohort = cfg.dataset.load()?;
    let plan = stratified_folds(&cohort.records, cfg.folds, cfg.fold_seed)?;
    let dir = cfg.out_dir.join("combinations");
    let sets: Vec<ConfigSet> = COMBINATIONS
        .iter()
        .map(|(name, keep)| {
            Ok(ConfigSet {
                config_id: (*name).to_string(),
                records: Arc::new(restrict_to_combination(&cohort.records, *keep)?),
                cfg: cfg.train.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let tasks = expand_tasks("combinations", &dir, &sets, &plan, &cfg.seeds)?;
    let records = execute("combinations", &dir, cfg.workers, cohort.dims, tasks)?;
    let results = aggregate(&records);
    write_summary(&dir, "combinations", &results)?;
    Ok(results)
}

/// Training-time modality-dropout sweep: one model per rate, all
/// evaluated under the cohort's natural missingness. Emits a plot-ready
/// `curve.csv` of (rate, mean, std).
pub fn run_dropout_sweep(cfg: &ExperimentConfig) -> Result<Vec<FoldResults>> {
    cfg.validate()?;
    let cohort = cfg.dataset.load()?;
    let plan = stratified_folds(&cohort.records, cfg.folds, cfg.fold_seed)?;
    let dir = cfg.out_dir.join("dropout_sweep");
    let shared = Arc::new(cohort.records);
    let sets: Vec<ConfigSet> = cfg
        .dropout_grid
        .iter()
        .map(|&rate| {
            let mut train_cfg = cfg.train.clone();
            train_cfg.p_drop = rate;
            ConfigSet {
                config_id: format!("p={rate}"),
                records: Arc::clone(&shared),
                cfg: train_cfg,
            }
        })
        .collect();
    let tasks = expand_tasks("dropout_sweep", &dir, &sets, &plan, &cfg.seeds)?;
    let records = execute("dropout_sweep", &dir, cfg.workers, cohort.dims, tasks)?;
    let results = aggregate(&records);
    write_summary(&dir, "dropout_sweep", &results)?;
    write_curve(&dir, "dropout_rate", &cfg.dropout_grid, &results)?;
    Ok(results)
}

/// Data-missingness sweep: each level masks that fraction of available
/// non-clinical modalities across the whole cohort (train and test alike)
/// before splitting, while training keeps a fixed modality-dropout rate
/// of 0.3 so the sweep isolates the effect of missing data. The mask
/// realization is a deterministic function of the fold seed and level.
pub fn run_missingness_sweep(cfg: &ExperimentConfig) -> Result<Vec<FoldResults>> {
    cfg.validate()?;
    let cohort = cfg.dataset.load()?;
    let plan = stratified_folds(&cohort.records, cfg.folds, cfg.fold_seed)?;
    let dir = cfg.out_dir.join("missingness_sweep");
    let mut train_cfg = cfg.train.clone();
    train_cfg.p_drop = 0.3;
    let sets: Vec<ConfigSet> = cfg
        .missingness_grid
        .iter()
        .map(|&level| {
            let mask_seed = cfg.fold_seed.wrapping_add((level * 1000.0).round() as u64);
            let mut rng = stream_rng(mask_seed, Stream::ModalityDropout);
            Ok(ConfigSet {
                config_id: format!("m={level}"),
                records: Arc::new(apply_missingness(&cohort.records, level, &mut rng)?),
                cfg: train_cfg.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let availability: Vec<f64> = sets
        .iter()
        .map(|s| {
            s.records.iter().map(|r| r.available_count() as f64).sum::<f64>()
                / s.records.len() as f64
        })
        .collect();
    let tasks = expand_tasks("missingness_sweep", &dir, &sets, &plan, &cfg.seeds)?;
    let records = execute("missingness_sweep", &dir, cfg.workers, cohort.dims, tasks)?;
    let results = aggregate(&records);
    write_summary(&dir, "missingness_sweep", &results)?;
    write_curve(&dir, "missingness_level", &cfg.missingness_grid, &results)?;
    // plot annotation: how many modalities a patient carries on average
    let mut avail_out = String::from("missingness_level,avg_available_modalities\n");
    for (m, a) in cfg.missingness_grid.iter().zip(&availability) {
        avail_out.push_str(&format!("{m},{a:.4}\n"));
    }
    fs::write(dir.join("availability.csv"), avail_out)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CLINICAL;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource {
                file: None,
                generate: SyntheticSpec {
                    n_patients: 48,
                    latent_dim: 3,
                    dims: [4, 6, 6, 6],
                    noise_scales: [0.3; 4],
                    censoring_target: 0.25,
                    missing_rates: [0.0, 0.1, 0.1, 0.1],
                    seed: 11,
                    ..SyntheticSpec::default()
                },
            },
            train: TrainConfig {
                batch_size: 8,
                max_epochs: 3,
                patience: 2,
                learning_rate: 1e-3,
                weight_decay: 1e-4,
                dropout: 0.1,
                p_drop: 0.2,
                beta_max: 0.1,
                warmup_epochs: 3,
                temperature: 0.1,
                d_out: 6,
                hidden: 8,
                seed: 0,
            },
            folds: 2,
            fold_seed: 5,
            seeds: vec![0],
            dropout_grid: vec![0.0, 0.3],
            missingness_grid: vec![0.2, 0.6],
            out_dir: dir.to_path_buf(),
            workers: 1,
        }
    }

    #[test]
    fn survival_protocol_shape_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let results = run_survival(&cfg).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].n, 2); // 2 folds x 1 seed
        assert!(results[0].mean.is_finite());
        assert!(dir.path().join("survival/records.csv").exists());
        assert!(dir.path().join("survival/summary.txt").exists());
        assert!(dir
            .path()
            .join("survival/metrics/mcvae_f0_s0.jsonl")
            .exists());
    }

    #[test]
    fn survival_resume_skips_completed_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let first = run_survival(&cfg).unwrap();
        // wall times are only reproduced if the runs were not re-executed
        let second = run_survival(&cfg).unwrap();
        for (a, b) in first[0].records.iter().zip(&second[0].records) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reruns_reproduce_identical_outcomes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let res_a = run_survival(&tiny_config(dir_a.path())).unwrap();
        let res_b = run_survival(&tiny_config(dir_b.path())).unwrap();
        for (a, b) in res_a[0].records.iter().zip(&res_b[0].records) {
            assert_eq!(a.test_cindex.to_bits(), b.test_cindex.to_bits());
            assert_eq!(a.epochs_trained, b.epochs_trained);
        }
        let trace_a =
            std::fs::read(dir_a.path().join("survival/metrics/mcvae_f1_s0.jsonl")).unwrap();
        let trace_b =
            std::fs::read(dir_b.path().join("survival/metrics/mcvae_f1_s0.jsonl")).unwrap();
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn combinations_emit_all_eight_configurations() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.max_epochs = 2;
        cfg.train.patience = 1;
        let results = run_combinations(&cfg).unwrap();
        let ids: Vec<&str> = results.iter().map(|r| r.config_id.as_str()).collect();
        let expected: Vec<&str> = COMBINATIONS.iter().map(|(n, _)| *n).collect();
        assert_eq!(ids, expected);
        for r in &results {
            assert_eq!(r.n, 2);
        }
    }

    #[test]
    fn dropout_sweep_writes_curve() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.max_epochs = 2;
        cfg.train.patience = 1;
        let results = run_dropout_sweep(&cfg).unwrap();
        assert_eq!(results.len(), 2);
        let curve = std::fs::read_to_string(dir.path().join("dropout_sweep/curve.csv")).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("dropout_rate,"));
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("0.3,"));
    }

    #[test]
    fn missingness_sweep_masks_both_sides_and_reports_availability() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.max_epochs = 2;
        cfg.train.patience = 1;
        let results = run_missingness_sweep(&cfg).unwrap();
        assert_eq!(results.len(), 2);
        let avail =
            std::fs::read_to_string(dir.path().join("missingness_sweep/availability.csv")).unwrap();
        let rows: Vec<&str> = avail.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        let parse = |row: &str| -> f64 { row.split(',').nth(1).unwrap().parse().unwrap() };
        // deeper masking leaves fewer modalities per patient
        assert!(parse(rows[0]) > parse(rows[1]));
        assert!(parse(rows[1]) >= 1.0);
    }

    #[test]
    fn store_tolerates_torn_tail_row() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let rec = RunRecord {
            experiment: "survival".into(),
            config_id: "mcvae".into(),
            fold: 0,
            seed: 0,
            test_cindex: 0.7,
            epochs_trained: 5,
            wall_seconds: 1.0,
        };
        store.append(rec.clone()).unwrap();
        store.finalize().unwrap();
        // simulate a crash mid-append: a torn, incomplete row at the tail
        let path = dir.path().join(RESULTS_FILE);
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("survival,mcvae,1,0,0.6");
        std::fs::write(&path, content).unwrap();
        let loaded = read_records_lenient(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], rec);
    }

    #[test]
    fn store_append_rejects_out_of_range_concordance() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let bad = RunRecord {
            experiment: "survival".into(),
            config_id: "mcvae".into(),
            fold: 0,
            seed: 0,
            test_cindex: 1.2,
            epochs_trained: 5,
            wall_seconds: 1.0,
        };
        assert!(store.append(bad).is_err());
    }

    #[test]
    fn aggregate_orders_configurations_for_tables() {
        let mk = |id: &str, c: f64| RunRecord {
            experiment: "x".into(),
            config_id: id.into(),
            fold: 0,
            seed: 0,
            test_cindex: c,
            epochs_trained: 1,
            wall_seconds: 0.0,
        };
        let recs = vec![
            mk("C+T+W+M", 0.7),
            mk("C", 0.6),
            mk("C+W", 0.65),
            mk("C+T", 0.66),
        ];
        let results = aggregate(&recs);
        let ids: Vec<&str> = results.iter().map(|r| r.config_id.as_str()).collect();
        assert_eq!(ids, ["C", "C+T", "C+W", "C+T+W+M"]);

        let sweep = vec![mk("p=0.9", 0.6), mk("p=0", 0.62), mk("p=0.3", 0.64)];
        let ids: Vec<String> = aggregate(&sweep).iter().map(|r| r.config_id.clone()).collect();
        assert_eq!(ids, ["p=0", "p=0.3", "p=0.9"]);
    }

    #[test]
    fn aggregate_computes_sample_statistics() {
        let mk = |fold: usize, c: f64| RunRecord {
            experiment: "x".into(),
            config_id: "mcvae".into(),
            fold,
            seed: 0,
            test_cindex: c,
            epochs_trained: 1,
            wall_seconds: 0.0,
        };
        let results = aggregate(&[mk(0, 0.6), mk(1, 0.7)]);
        assert_eq!(results.len(), 1);
        assert!((results[0].mean - 0.65).abs() < 1e-12);
        let expected_std = (2.0 * (0.05f64).powi(2)).sqrt() / 1.0_f64.sqrt();
        assert!((results[0].std - expected_std).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_bad_grids_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let good = tiny_config(dir.path());
        assert!(good.validate().is_ok());

        let mut dup = good.clone();
        dup.seeds = vec![1, 1];
        assert!(dup.validate().is_err());

        let mut empty = good.clone();
        empty.dropout_grid.clear();
        assert!(empty.validate().is_err());

        let mut out_of_range = good.clone();
        out_of_range.missingness_grid = vec![1.0];
        assert!(out_of_range.validate().is_err());

        let mut no_workers = good;
        no_workers.workers = 0;
        assert!(no_workers.validate().is_err());
    }

    #[test]
    fn experiment_config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seeds, cfg.seeds);
        assert_eq!(back.train.batch_size, cfg.train.batch_size);
        assert_eq!(back.dataset.generate.n_patients, 48);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let text = "folds = 3\n[train]\nbatch_size = 4\n";
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.folds, 3);
        assert_eq!(cfg.train.batch_size, 4);
        // untouched fields come from the defaults
        assert_eq!(cfg.train.warmup_epochs, TrainConfig::default().warmup_epochs);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert!(cfg.dataset.file.is_none());
        assert_eq!(cfg.dataset.generate.missing_rates[CLINICAL], 0.0);
    }
}
