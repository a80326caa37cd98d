//! Experiment grid: the full variant table (sharing mode x index policy x
//! regularizer variant, plus joint baselines), each cell repeated over seeds,
//! with deterministic CSV / JSON emission of the aggregated recall table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, TaskData};
use crate::engine::{
    run_decoupled, run_sequence, DecoupledRecord, EvalPlan, Regularizer, RunRecord, StageEvals,
    TrainConfig, TrainMode,
};
use crate::error::{Error, Result};
use crate::index::{IndexPolicy, QueryDirection};
use crate::model::SharingMode;
use crate::reg::RegScope;

/// One training/evaluation recipe of the variant table.
///
/// `EwcQuery` / `MasQuery` are the decoupled variants: the penalty is applied
/// only to the query branch of each direction, which takes two runs (one per
/// direction) instead of one. They only make sense without reindexing, where
/// the database side stays frozen; `grid()` only emits them there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ft,
    Ewc,
    Mas,
    EwcQuery,
    MasQuery,
    JointWithCtnp,
    JointNoCtnp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ft => "ft",
            Variant::Ewc => "ewc",
            Variant::Mas => "mas",
            Variant::EwcQuery => "ewc-query",
            Variant::MasQuery => "mas-query",
            Variant::JointWithCtnp => "joint-with-ctnp",
            Variant::JointNoCtnp => "joint-no-ctnp",
        }
    }

    pub fn is_decoupled(self) -> bool {
        matches!(self, Variant::EwcQuery | Variant::MasQuery)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub sharing: SharingMode,
    pub policy: IndexPolicy,
    pub variant: Variant,
}

impl GridCell {
    /// Stable identifier used for output directories and log lines.
    pub fn label(&self) -> String {
        format!(
            "{}_{}_{}",
            self.sharing.name(),
            self.policy.name(),
            self.variant.name()
        )
    }

    /// Derives the cell's training config from the grid-wide base config.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.sharing = self.sharing;
        cfg.reg.scope = RegScope::BothBranches;
        match self.variant {
            Variant::Ft => {
                cfg.mode = TrainMode::Continual;
                cfg.regularizer = Regularizer::Ft;
            }
            Variant::Ewc => {
                cfg.mode = TrainMode::Continual;
                cfg.regularizer = Regularizer::Ewc;
            }
            Variant::Mas => {
                cfg.mode = TrainMode::Continual;
                cfg.regularizer = Regularizer::Mas;
            }
            // The decoupled runner overrides the scope per direction.
            Variant::EwcQuery => {
                cfg.mode = TrainMode::Continual;
                cfg.regularizer = Regularizer::Ewc;
            }
            Variant::MasQuery => {
                cfg.mode = TrainMode::Continual;
                cfg.regularizer = Regularizer::Mas;
            }
            Variant::JointWithCtnp => {
                cfg.mode = TrainMode::JointWithCtnp;
                cfg.regularizer = Regularizer::Ft;
            }
            Variant::JointNoCtnp => {
                cfg.mode = TrainMode::JointNoCtnp;
                cfg.regularizer = Regularizer::Ft;
            }
        }
        cfg
    }
}

/// The whole experiment: which cells to run, the shared base config, the
/// recall cutoffs, and how many repetitions (seeds) per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
    pub base: TrainConfig,
    pub ks: Vec<usize>,
    pub repetitions: usize,
}

impl ExperimentGrid {
    /// The full variant table: for each sharing mode, {ft, ewc, mas} under
    /// reindexing and {ft, ewc, ewc-query, mas, mas-query} without, plus the
    /// two joint baselines (upper bounds, not crossed with sharing/policy).
    pub fn full(base: TrainConfig, ks: Vec<usize>, repetitions: usize) -> Self {
        let mut cells = Vec::new();
        for sharing in [SharingMode::NoSharing, SharingMode::ShareTop] {
            for variant in [Variant::Ft, Variant::Ewc, Variant::Mas] {
                cells.push(GridCell {
                    sharing,
                    policy: IndexPolicy::Reindex,
                    variant,
                });
            }
            for variant in [
                Variant::Ft,
                Variant::Ewc,
                Variant::EwcQuery,
                Variant::Mas,
                Variant::MasQuery,
            ] {
                cells.push(GridCell {
                    sharing,
                    policy: IndexPolicy::NoReindex,
                    variant,
                });
            }
        }
        for variant in [Variant::JointWithCtnp, Variant::JointNoCtnp] {
            cells.push(GridCell {
                sharing: SharingMode::NoSharing,
                policy: IndexPolicy::Reindex,
                variant,
            });
        }
        Self {
            cells,
            base,
            ks,
            repetitions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig(
                "grid needs at least one repetition".into(),
            ));
        }
        if self.ks.is_empty() {
            return Err(Error::InvalidConfig("grid needs at least one K".into()));
        }
        for &k in &self.ks {
            if k == 0 {
                return Err(Error::InvalidK(0));
            }
        }
        Ok(())
    }

    /// The seed for repetition `rep` of any cell.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.base.seed + rep as u64
    }

    /// Hash of everything that determines the grid's outcome besides the
    /// input data: cells, base config, cutoffs and repetition count.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("grid serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeKind {
    Known,
    Unknown,
}

impl ScopeKind {
    pub fn name(self) -> &'static str {
        match self {
            ScopeKind::Known => "known",
            ScopeKind::Unknown => "unknown",
        }
    }
}

/// Row key along the task axis: one concrete task, the mean over the
/// known-scope per-task rows, or the pooled unknown-scope query set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKey {
    Task(u16),
    Average,
    Total,
}

impl TaskKey {
    pub fn name(self) -> String {
        match self {
            TaskKey::Task(id) => format!("task-{id}"),
            TaskKey::Average => "average".into(),
            TaskKey::Total => "total".into(),
        }
    }
}

/// One aggregated number of the results table, with the per-repetition
/// values it was averaged from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub direction: QueryDirection,
    pub scope: ScopeKind,
    pub task: TaskKey,
    pub k: usize,
    pub per_rep: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub seeds: Vec<u64>,
    /// Set when the cell failed; `rows` is empty in that case. The grid keeps
    /// going regardless.
    pub error: Option<String>,
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub config_hash: String,
    pub data_hash: String,
    pub base_seed: u64,
    pub repetitions: usize,
    pub ks: Vec<usize>,
    pub cells: Vec<CellResult>,
}

impl ResultsTable {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }
}

/// Final-stage evaluations of one repetition, keyed by direction. A plain run
/// answers both directions; a decoupled pair answers one each.
enum RepOutcome {
    Single(RunRecord),
    Decoupled(DecoupledRecord),
}

impl RepOutcome {
    fn stage_for(&self, direction: QueryDirection) -> Result<&StageEvals> {
        let record = match self {
            RepOutcome::Single(r) => r,
            RepOutcome::Decoupled(d) => match direction {
                QueryDirection::Im2Txt => &d.image_run,
                QueryDirection::Txt2Im => &d.text_run,
            },
        };
        record
            .final_stage()
            .ok_or(Error::EmptyTaskData("run produced no evaluations"))
    }

    fn task_ids(&self) -> &[u16] {
        match self {
            RepOutcome::Single(r) => &r.task_ids,
            RepOutcome::Decoupled(d) => &d.image_run.task_ids,
        }
    }
}

fn recall_of(
    stage: &StageEvals,
    policy: IndexPolicy,
    direction: QueryDirection,
    k: usize,
    task: Option<u16>,
    known_scope: bool,
) -> Result<f64> {
    stage
        .cell(policy, direction, k, task, known_scope)
        .map(|c| c.recall)
        .ok_or(Error::EmptyScope)
}

/// Runs one repetition of a cell and extracts its (direction, scope, task, k)
/// recall values in the fixed row order.
fn run_rep(
    cell: &GridCell,
    cfg: &TrainConfig,
    ks: &[usize],
    tasks: &[TaskData],
) -> Result<Vec<(QueryDirection, ScopeKind, TaskKey, usize, f64)>> {
    let plan = EvalPlan {
        ks: ks.to_vec(),
        policies: vec![cell.policy],
        directions: vec![QueryDirection::Im2Txt, QueryDirection::Txt2Im],
    };
    let outcome = if cell.variant.is_decoupled() {
        RepOutcome::Decoupled(run_decoupled(tasks, cfg, &plan)?)
    } else {
        RepOutcome::Single(run_sequence(tasks, cfg, &plan)?)
    };

    let task_ids = outcome.task_ids().to_vec();
    let mut values = Vec::new();
    for direction in [QueryDirection::Im2Txt, QueryDirection::Txt2Im] {
        let stage = outcome.stage_for(direction)?;
        for &k in ks {
            let mut known_sum = 0.0;
            for &t in &task_ids {
                let r = recall_of(stage, cell.policy, direction, k, Some(t), true)?;
                known_sum += r;
                values.push((direction, ScopeKind::Known, TaskKey::Task(t), k, r));
            }
            values.push((
                direction,
                ScopeKind::Known,
                TaskKey::Average,
                k,
                known_sum / task_ids.len() as f64,
            ));
            for &t in &task_ids {
                let r = recall_of(stage, cell.policy, direction, k, Some(t), false)?;
                values.push((direction, ScopeKind::Unknown, TaskKey::Task(t), k, r));
            }
            let pooled = recall_of(stage, cell.policy, direction, k, None, false)?;
            values.push((direction, ScopeKind::Unknown, TaskKey::Total, k, pooled));
        }
    }
    Ok(values)
}

fn run_cell(grid: &ExperimentGrid, cell: &GridCell, tasks: &[TaskData]) -> CellResult {
    let seeds: Vec<u64> = (0..grid.repetitions).map(|r| grid.rep_seed(r)).collect();
    let mut rows: Vec<ResultRow> = Vec::new();
    for (rep, &seed) in seeds.iter().enumerate() {
        let mut cfg = cell.config(&grid.base);
        cfg.seed = seed;
        let values = match run_rep(cell, &cfg, &grid.ks, tasks) {
            Ok(v) => v,
            Err(e) => {
                return CellResult {
                    cell: *cell,
                    seeds,
                    error: Some(format!("repetition {rep} (seed {seed}): {e}")),
                    rows: Vec::new(),
                }
            }
        };
        if rep == 0 {
            rows = values
                .into_iter()
                .map(|(direction, scope, task, k, r)| ResultRow {
                    direction,
                    scope,
                    task,
                    k,
                    per_rep: vec![r],
                    mean: 0.0,
                })
                .collect();
        } else {
            debug_assert_eq!(rows.len(), values.len());
            for (row, (direction, scope, task, k, r)) in rows.iter_mut().zip(values) {
                debug_assert!(
                    row.direction == direction
                        && row.scope == scope
                        && row.task == task
                        && row.k == k
                );
                row.per_rep.push(r);
            }
        }
    }
    for row in &mut rows {
        row.mean = row.per_rep.iter().sum::<f64>() / row.per_rep.len() as f64;
    }
    CellResult {
        cell: *cell,
        seeds,
        error: None,
        rows,
    }
}

/// Runs every cell of the grid against `data`. Cells run in parallel up to
/// `workers` threads (0 = one per core), each repetition with its own seed
/// and freshly built state. A failing cell is recorded with its error and
/// does not stop the rest.
pub fn run_experiment(grid: &ExperimentGrid, data: &Dataset, workers: usize) -> Result<ResultsTable> {
    grid.validate()?;
    let data_hash = data.content_hash()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let cells: Vec<CellResult> = pool.install(|| {
        grid.cells
            .par_iter()
            .map(|cell| run_cell(grid, cell, &data.tasks))
            .collect()
    });
    Ok(ResultsTable {
        config_hash: grid.config_hash(),
        data_hash,
        base_seed: grid.base.seed,
        repetitions: grid.repetitions,
        ks: grid.ks.clone(),
        cells,
    })
}

/// Renders the table as CSV. Column order (fixed, also documented in the
/// README): sharing, policy, variant, direction, scope, task, k, recall,
/// repetitions. One line per aggregated number, only for cells that
/// succeeded; an all-failed or empty table yields just the header.
pub fn results_to_csv(table: &ResultsTable) -> String {
    let mut out = String::from("sharing,policy,variant,direction,scope,task,k,recall,repetitions\n");
    for cell in &table.cells {
        if cell.error.is_some() {
            continue;
        }
        for row in &cell.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{}",
                cell.cell.sharing.name(),
                cell.cell.policy.name(),
                cell.cell.variant.name(),
                row.direction.name(),
                row.scope.name(),
                row.task.name(),
                row.k,
                row.mean,
                row.per_rep.len(),
            )
            .expect("write to string");
        }
    }
    out
}

pub fn results_to_json(table: &ResultsTable) -> String {
    let mut s = serde_json::to_string_pretty(table).expect("results serialize");
    s.push('\n');
    s
}

pub fn results_from_json(s: &str) -> Result<ResultsTable> {
    serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("results json: {e}")))
}

/// Writes `results.csv` and `results.json` under `dir`, creating it if
/// needed. Emission is a pure function of the table, so re-emitting the same
/// table overwrites both files with identical bytes.
pub fn write_results(table: &ResultsTable, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("results.csv");
    let json_path = dir.join("results.json");
    fs::write(&csv_path, results_to_csv(table))?;
    fs::write(&json_path, results_to_json(table))?;
    Ok((csv_path, json_path))
}
