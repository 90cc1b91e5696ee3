use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::AugmentConfig;
use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::data::{Dataset, DatasetSpec, Split};
use super::train::{evaluate, finetune, train_sparse};
use crate::analysis::{prune_knee, CorrelationReport, KneeOptions, PruneKnee, ThresholdRule};
use crate::arch::{build_network, ArchSpec};
use crate::error::{Error, Result};
use crate::nn::{Network, TrainingConfig};
use crate::prune::{iterative_prune, IterativeConfig, PruneStrategy, PruningCurve};
use crate::sparsity::{collect_gammas, SparsityReport};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const CORRELATION_FILE: &str = "correlation.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const RUN_FILE: &str = "run.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const KNEE_FILE: &str = "knee.json";
pub const GAMMA_FILE: &str = "gammas.csv";
pub const SPARSITY_FILE: &str = "sparsity.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// A full λ sweep: architecture, data, training, pruning and analysis
/// settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_step")]
    pub step_fraction: f64,
    #[serde(default = "default_finetune")]
    pub finetune_epochs: usize,
    #[serde(default = "default_psi")]
    pub psi: f64,
    #[serde(default)]
    pub threshold_rule: ThresholdRule,
    /// Window-3 smoothing of the normalized accuracy before knee search.
    #[serde(default)]
    pub knee_smoothing: bool,
    #[serde(default)]
    pub strategy: PruneStrategy,
    pub dataset: DatasetSpec,
    /// Train and validation fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 2],
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Largest accepted validation-accuracy drop against the λ = 0 run.
    #[serde(default = "default_max_drop")]
    pub max_accuracy_drop: f64,
    /// Stop the grid at the first λ whose drop exceeds the bound.
    #[serde(default = "default_true")]
    pub truncate_on_violation: bool,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

fn default_step() -> f64 {
    0.05
}
fn default_finetune() -> usize {
    5
}
fn default_psi() -> f64 {
    1.0
}
fn default_split() -> [f64; 2] {
    [0.7, 0.3]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_drop() -> f64 {
    0.03
}
fn default_true() -> bool {
    true
}

/// Default λ grid: log-spaced with a leading zero.
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

impl ExperimentConfig {
    pub fn new(arch: ArchSpec, dataset: DatasetSpec) -> Self {
        Self {
            arch,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            training: TrainingConfig::default(),
            step_fraction: default_step(),
            finetune_epochs: default_finetune(),
            psi: default_psi(),
            threshold_rule: ThresholdRule::default(),
            knee_smoothing: false,
            strategy: PruneStrategy::default(),
            dataset,
            split: default_split(),
            seeds: default_seeds(),
            max_accuracy_drop: default_max_drop(),
            truncate_on_violation: true,
            augment: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn knee_options(&self) -> KneeOptions {
        KneeOptions {
            psi: self.psi,
            threshold: self.threshold_rule,
            smooth: self.knee_smoothing,
        }
    }

    pub fn prune_config(&self) -> IterativeConfig {
        IterativeConfig {
            step_fraction: self.step_fraction,
            finetune_epochs: self.finetune_epochs,
            strategy: self.strategy.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.training.validate()?;
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambda_grid values must be finite and >= 0".into());
        }
        if self.lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("lambda_grid must be strictly ascending".into());
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return bad(format!("step_fraction must lie in (0, 1), got {}", self.step_fraction));
        }
        if !(self.psi.is_finite() && self.psi >= 0.0) {
            return bad(format!("psi must be >= 0, got {}", self.psi));
        }
        let [tr, va] = self.split;
        if !(tr > 0.0 && va > 0.0) || ((tr + va) - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {tr} + {va} must be positive and sum to 1"));
        }
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.max_accuracy_drop.is_nan() || self.max_accuracy_drop < 0.0 {
            return bad("max_accuracy_drop must be >= 0".into());
        }
        if self.arch.input_shape != self.dataset.sample_shape() {
            return bad(format!(
                "arch input shape {:?} does not match dataset sample shape {:?}",
                self.arch.input_shape,
                self.dataset.sample_shape()
            ));
        }
        if self.arch.num_classes != self.dataset.num_classes() {
            return bad(format!(
                "arch has {} classes, dataset {}",
                self.arch.num_classes,
                self.dataset.num_classes()
            ));
        }
        if let Some(aug) = &self.augment {
            let [_, bands, frames] = self.dataset.sample_shape();
            aug.validate(bands, frames)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Accuracy drop beyond the configured bound; kept out of the analysis.
    Rejected,
    /// Not run because an earlier λ was rejected.
    Skipped,
    Failed,
}

/// Outcome of one (seed, λ) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub run_index: usize,
    pub lambda: f64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub dir: Option<String>,
    pub best_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Drop of `best_accuracy` against the λ = 0 run of the same seed.
    pub accuracy_drop: Option<f64>,
    pub ws: Option<f64>,
    pub pk: Option<f64>,
    pub knee_found: Option<bool>,
    pub pk_accuracy_loss: Option<f64>,
    /// Largest parameter prune fraction with accuracy loss within the bound.
    pub compression_at_bound: Option<f64>,
    pub curve_complete: Option<bool>,
}

impl RunRecord {
    fn new(seed: u64, run_index: usize, lambda: f64) -> Self {
        Self {
            seed,
            run_index,
            lambda,
            status: RunStatus::Skipped,
            failed_stage: None,
            error: None,
            dir: None,
            best_accuracy: None,
            final_accuracy: None,
            accuracy_drop: None,
            ws: None,
            pk: None,
            knee_found: None,
            pk_accuracy_loss: None,
            compression_at_bound: None,
            curve_complete: None,
        }
    }

    fn fail(&mut self, stage: &str, err: &Error) {
        self.status = RunStatus::Failed;
        self.failed_stage = Some(stage.into());
        self.error = Some(format!("{}: {err}", err.code()));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrelationOutcome {
    Report(CorrelationReport),
    Skipped { skipped: String },
}

impl CorrelationOutcome {
    pub fn report(&self) -> Option<&CorrelationReport> {
        match self {
            CorrelationOutcome::Report(r) => Some(r),
            CorrelationOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub network: String,
    pub variant: String,
    pub method: String,
    pub lambda: f64,
    pub ws: f64,
    pub pk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub runs: Vec<RunRecord>,
    pub scatter: Vec<ScatterRow>,
    pub correlation: CorrelationOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    /// True when every scheduled run completed.
    pub complete: bool,
    pub runs: Vec<RunRecord>,
    pub files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub seeds: Vec<SeedResult>,
    pub manifest: ExperimentManifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

fn run_dir(index: usize, lambda: f64) -> String {
    format!("run_{index:02}_lambda_{lambda:e}")
}

/// Largest parameter prune fraction whose accuracy loss stays within `bound`.
pub fn compression_at(curve: &PruningCurve, bound: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.accuracy_loss <= bound + 1e-9)
        .map(|p| p.param_prune_fraction)
        .fold(0.0, f64::max)
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["network", "variant", "method", "lambda", "ws", "pk"])?;
    for r in rows {
        w.write_record([
            r.network.clone(),
            r.variant.clone(),
            r.method.clone(),
            format!("{:e}", r.lambda),
            format!("{:.6}", r.ws),
            format!("{:.6}", r.pk),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Plain-text table: one row per run with unpruned accuracy, WS, accuracy
/// loss at the knee, compression within the accuracy bound and PK.
pub fn summary_table(runs: &[RunRecord], bound: f64) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let num = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let bound_col = format!("compr@{}%", 100.0 * bound);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>10} {:>9} {:>8} {:>8} {:>11} {:>8} {:>6}  status",
        "lambda", "acc.", "WS", "loss@PK", bound_col, "PK", "knee"
    );
    for r in runs {
        let knee = match r.knee_found {
            Some(true) => "yes",
            Some(false) => "no",
            None => "-",
        };
        let _ = writeln!(
            out,
            "{:>10} {:>9} {:>8} {:>8} {:>11} {:>8} {:>6}  {}",
            format!("{:e}", r.lambda),
            pct(r.best_accuracy),
            num(r.ws),
            pct(r.pk_accuracy_loss),
            pct(r.compression_at_bound),
            pct(r.pk),
            knee,
            serde_json::to_value(r.status)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        );
    }
    out
}

fn correlation_of(rows: &[ScatterRow]) -> CorrelationOutcome {
    if rows.len() < 2 {
        return CorrelationOutcome::Skipped {
            skipped: format!("{} completed run(s); correlation needs at least 2", rows.len()),
        };
    }
    let ws: Vec<f64> = rows.iter().map(|r| r.ws).collect();
    let pk: Vec<f64> = rows.iter().map(|r| r.pk).collect();
    match CorrelationReport::compute(&ws, &pk) {
        Ok(r) => CorrelationOutcome::Report(r),
        Err(e) => CorrelationOutcome::Skipped {
            skipped: format!("{}: {e}", e.code()),
        },
    }
}

struct Stage<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
}

impl Stage<'_> {
    /// Trains, checkpoints, prunes and locates the knee for one λ. Fills
    /// `rec` as stages complete; the returned error names the failed stage.
    fn run(
        &self,
        init: &Network,
        seed: u64,
        dir: &Path,
        rec: &mut RunRecord,
    ) -> std::result::Result<(), (&'static str, Error)> {
        let cfg = self.cfg;
        let training = TrainingConfig {
            lambda: rec.lambda,
            seed: seed ^ rec.run_index as u64,
            ..cfg.training.clone()
        };
        let trained =
            train_sparse(init.clone(), self.data, &training, cfg.augment.as_ref()).map_err(|e| ("train", e))?;
        rec.best_accuracy = Some(trained.best_accuracy);
        rec.final_accuracy = Some(trained.final_accuracy);
        rec.ws = Some(trained.sparsity.ws);
        let meta = CheckpointMeta {
            arch: cfg.arch.clone(),
            lambda: rec.lambda,
            epochs: training.epochs,
            final_accuracy: Some(trained.final_accuracy),
            seed,
            training: Some(training.clone()),
            dataset: Some(cfg.dataset.clone()),
            train_fraction: Some(cfg.split[0]),
            pruned_channels: 0,
        };
        let io = |e| ("write", e);
        save_checkpoint(&trained.network, &meta, &dir.join(CHECKPOINT_DIR)).map_err(io)?;
        write_json(&dir.join(SPARSITY_FILE), &trained.sparsity).map_err(io)?;
        collect_gammas(&trained.network)
            .and_then(|g| g.save_csv(&dir.join(GAMMA_FILE)))
            .map_err(io)?;
        write_json(&dir.join("history.json"), &trained.history).map_err(io)?;

        let data = self.data;
        let outcome = iterative_prune(
            &trained.network,
            &cfg.prune_config(),
            |n| evaluate(n, data, Split::Val),
            |n, epochs| finetune(n, data, &training, epochs),
        )
        .map_err(|e| ("prune", e))?;
        outcome.curve.save_csv(&dir.join(CURVE_FILE)).map_err(io)?;
        rec.curve_complete = Some(outcome.curve.complete);
        rec.compression_at_bound = Some(compression_at(&outcome.curve, cfg.max_accuracy_drop));
        if let Some(msg) = &outcome.curve.failure {
            return Err(("prune", Error::Evaluation(msg.clone())));
        }
        let knee = prune_knee(&outcome.curve, &cfg.knee_options()).map_err(|e| ("knee", e))?;
        write_json(&dir.join(KNEE_FILE), &knee).map_err(io)?;
        rec.pk = Some(knee.pk);
        rec.knee_found = Some(knee.knee_found);
        rec.pk_accuracy_loss = Some(knee.accuracy_loss);
        Ok(())
    }
}

fn scatter_row(cfg: &ExperimentConfig, lambda: f64, ws: f64, pk: f64) -> ScatterRow {
    ScatterRow {
        network: cfg.arch.family.as_str().into(),
        variant: cfg.arch.variant(),
        method: cfg.strategy.kind.as_str().into(),
        lambda,
        ws,
        pk,
    }
}

fn finish_seed(cfg: &ExperimentConfig, seed: u64, runs: Vec<RunRecord>, dir: &Path) -> Result<SeedResult> {
    let scatter: Vec<ScatterRow> = runs
        .iter()
        .filter(|r| r.status == RunStatus::Completed)
        .filter_map(|r| Some(scatter_row(cfg, r.lambda, r.ws?, r.pk?)))
        .collect();
    let correlation = correlation_of(&scatter);
    write_scatter_csv(&dir.join(SCATTER_FILE), &scatter)?;
    write_json(&dir.join(CORRELATION_FILE), &correlation)?;
    write_text(&dir.join(SUMMARY_FILE), &summary_table(&runs, cfg.max_accuracy_drop))?;
    Ok(SeedResult {
        seed,
        runs,
        scatter,
        correlation,
    })
}

fn collect_files(root: &Path) -> Result<Vec<FileEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("walk stays under root");
                if rel == Path::new(MANIFEST_FILE) {
                    continue;
                }
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push(FileEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Runs the full sweep for every seed and writes all artifacts under
/// `out_dir`:
///
/// ```text
/// config.json  manifest.json
/// seed_<s>/scatter.csv  correlation.json  summary.txt
/// seed_<s>/run_<i>_lambda_<λ>/checkpoint/  curve.csv  knee.json  ...
/// ```
///
/// Per-run failures are recorded in the manifest and do not abort the
/// sweep.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    let data = cfg.dataset.load(cfg.split[0])?;
    let stage = Stage { cfg, data: &data };
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let sdir = out_dir.join(seed_dir(seed));
        create_dir(&sdir)?;
        let init: Network = build_network(&cfg.arch, seed)?;
        let mut runs: Vec<RunRecord> = Vec::new();
        let mut baseline: Option<f64> = None;
        let mut stop = false;
        for (i, &lambda) in cfg.lambda_grid.iter().enumerate() {
            let mut rec = RunRecord::new(seed, i, lambda);
            if stop {
                runs.push(rec);
                continue;
            }
            let name = run_dir(i, lambda);
            let dir = sdir.join(&name);
            create_dir(&dir)?;
            rec.dir = Some(format!("{}/{name}", seed_dir(seed)));
            match stage.run(&init, seed, &dir, &mut rec) {
                Ok(()) => rec.status = RunStatus::Completed,
                Err((stage_name, e)) => rec.fail(stage_name, &e),
            }
            if lambda == 0.0 {
                baseline = rec.best_accuracy;
            }
            if let (Some(base), Some(acc)) = (baseline, rec.best_accuracy) {
                rec.accuracy_drop = Some(base - acc);
                if base - acc > cfg.max_accuracy_drop + 1e-12 && rec.status == RunStatus::Completed {
                    rec.status = RunStatus::Rejected;
                    stop = cfg.truncate_on_violation;
                }
            }
            write_json(&dir.join(RUN_FILE), &rec)?;
            runs.push(rec);
        }
        seeds.push(finish_seed(cfg, seed, runs, &sdir)?);
    }
    let runs: Vec<RunRecord> = seeds.iter().flat_map(|s| s.runs.clone()).collect();
    let manifest = ExperimentManifest {
        complete: runs.iter().all(|r| r.status == RunStatus::Completed),
        runs,
        files: collect_files(out_dir)?,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(ExperimentResult { seeds, manifest })
}

/// Re-derives knees, scatter rows and correlations from the curves and
/// sparsity reports of a finished sweep, with new knee options.
pub fn analyze_results(dir: &Path, opts: &KneeOptions) -> Result<Vec<SeedResult>> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ExperimentManifest = serde_json::from_str(&text)?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let mut runs = Vec::new();
        let mut scatter = Vec::new();
        for rec in manifest.runs.iter().filter(|r| r.seed == seed) {
            let mut rec = rec.clone();
            if rec.status == RunStatus::Completed {
                let rdir = dir.join(rec.dir.as_deref().unwrap_or_default());
                let curve = PruningCurve::load_csv(&rdir.join(CURVE_FILE))?;
                let ws_path = rdir.join(SPARSITY_FILE);
                let text = fs::read_to_string(&ws_path).map_err(|e| Error::io(&ws_path, e))?;
                let report: SparsityReport = serde_json::from_str(&text)?;
                let knee: PruneKnee = prune_knee(&curve, opts)?;
                rec.pk = Some(knee.pk);
                rec.knee_found = Some(knee.knee_found);
                rec.pk_accuracy_loss = Some(knee.accuracy_loss);
                scatter.push(scatter_row(&cfg, rec.lambda, report.ws, knee.pk));
            }
            runs.push(rec);
        }
        let correlation = correlation_of(&scatter);
        out.push(SeedResult {
            seed,
            runs,
            scatter,
            correlation,
        });
    }
    Ok(out)
}
