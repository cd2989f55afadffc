use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic_tasks, load_features_bin, load_features_csv, Dataset};
use crate::error::Result;
use crate::experiment::config::{DatasetSpec, RunConfig};
use crate::ipc::FreezeSet;
use crate::linalg::RngStream;
use crate::lorac::LocationId;
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix};
use crate::netcore::Backbone;
use crate::protocol::{evaluate_row, pretrain_backbone, OrthoTrace, RunState, TaskWork};

const STREAM_DATA: u64 = 0x10;
const STREAM_MODEL: u64 = 0x11;
const STREAM_PRETEXT: u64 = 0x12;

/// The results document.
///
/// Every field is a deterministic function of the configuration; wall-clock
/// timings are kept out of it and reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsDoc {
    pub version: String,
    pub config: RunConfig,
    /// Row `i` holds the accuracies on tasks `1..=i` after learning task `i`.
    /// The last row is measured after classifier adjustment.
    pub accuracy_matrix: AccuracyMatrix,
    /// The last row measured before classifier adjustment.
    pub final_row_without_tap: Vec<f64>,
    pub avg_acc: f64,
    /// Absent for single-task runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub forgetting: Option<f64>,
    /// Work done per task (optimizer steps and samples).
    pub per_task_timings: Vec<TaskWork>,
    pub tap_steps: u64,
    pub freeze_history: Vec<FreezeSet>,
    /// Per row, the fraction of test samples routed to the right task.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task_id_accuracy: Option<Vec<Vec<f64>>>,
    pub ortho_trace: Vec<OrthoTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub task: usize,
    pub location: LocationId,
    pub score: f64,
}

/// One entry of `Q̃ᵀQ̃` over the sealed bases of a location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramRow {
    pub location: LocationId,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Weight movement of a location measured between task snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub task: usize,
    pub location: LocationId,
    /// `‖W_{t+1} − W_t‖_F`.
    pub delta_next: f64,
    /// `‖W_T − W_t‖_F`.
    pub delta_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaRow {
    pub task: usize,
    pub location: LocationId,
    pub index: usize,
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub results: ResultsDoc,
    pub importance: Vec<ImportanceRow>,
    pub gram: Vec<GramRow>,
    pub deltas: Vec<DeltaRow>,
    pub omega: Vec<OmegaRow>,
    /// Wall-clock seconds per task (training plus evaluation).
    pub wall_clock: Vec<f64>,
    pub state: RunState,
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(spec) => {
            let mut rng = RngStream::new(cfg.seed).fork(STREAM_DATA);
            gen_synthetic_tasks(&mut rng, spec)
        }
        DatasetSpec::Csv {
            path,
            test_fraction,
        } => load_features_csv(path, *test_fraction),
        DatasetSpec::Binary {
            path,
            test_fraction,
        } => load_features_bin(path, *test_fraction),
    }
}

/// The base network: orthogonal initialisation, then the pretext phase if configured.
pub fn build_backbone(cfg: &RunConfig, input_dim: usize) -> Result<Backbone> {
    let master = RngStream::new(cfg.seed);
    let mut dims = vec![input_dim];
    dims.extend(&cfg.model.hidden_dims);
    let backbone =
        Backbone::orthogonal(&dims, cfg.model.activation, &mut master.fork(STREAM_MODEL))?;
    match &cfg.model.pretext {
        Some(p) => pretrain_backbone(&backbone, p, &mut master.fork(STREAM_PRETEXT)),
        None => Ok(backbone),
    }
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    run_on_dataset(cfg, &dataset)
}

/// Runs the task stream of `dataset` under `cfg` (its dataset field is only echoed).
pub fn run_on_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<RunArtifacts> {
    cfg.validate()?;
    let backbone = build_backbone(cfg, dataset.input_dim)?;
    let mut state = RunState::new(backbone, cfg.train_config(), cfg.seed)?;
    let choice = state.default_choice();
    let mut matrix = AccuracyMatrix::new();
    let mut tii_rows = Vec::new();
    let mut wall_clock = Vec::new();
    let mut final_row_without_tap = Vec::new();
    let mut tap_steps = 0;
    let t_total = dataset.num_tasks();

    for (i, task) in dataset.tasks.iter().enumerate() {
        let start = Instant::now();
        state.train_task(task)?;
        let seen = &dataset.tasks[..=i];
        let mut row = evaluate_row(&state, seen, choice)?;
        if i + 1 == t_total {
            final_row_without_tap = row.accuracies.clone();
            if state.config().tap.enabled {
                tap_steps = state.adjust_classifier()?;
                row = evaluate_row(&state, seen, choice)?;
            }
        }
        if let Some(tii) = row.task_id_accuracy {
            tii_rows.push(tii);
        }
        matrix.push_row(row.accuracies)?;
        wall_clock.push(start.elapsed().as_secs_f64());
    }

    let avg_acc = average_accuracy(&matrix)?;
    let forgetting = if t_total >= 2 {
        Some(forgetting(&matrix)?)
    } else {
        None
    };
    let results = ResultsDoc {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        accuracy_matrix: matrix,
        final_row_without_tap,
        avg_acc,
        forgetting,
        per_task_timings: state.work().to_vec(),
        tap_steps,
        freeze_history: state.freeze_history().to_vec(),
        task_id_accuracy: (!tii_rows.is_empty()).then_some(tii_rows),
        ortho_trace: state.ortho_trace().to_vec(),
    };
    Ok(RunArtifacts {
        importance: importance_rows(&state),
        gram: gram_rows(&state),
        deltas: delta_rows(&state)?,
        omega: omega_rows(&state),
        results,
        wall_clock,
        state,
    })
}

fn importance_rows(state: &RunState) -> Vec<ImportanceRow> {
    state
        .importance()
        .iter()
        .flat_map(|(task, scores)| {
            scores.iter().map(move |(loc, s)| ImportanceRow {
                task: *task,
                location: *loc,
                score: *s,
            })
        })
        .collect()
}

fn gram_rows(state: &RunState) -> Vec<GramRow> {
    let mut rows = Vec::new();
    for (stack, basis) in state.stacks().iter().zip(state.bases()) {
        if let Some(g) = basis.gram() {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    rows.push(GramRow {
                        location: stack.location(),
                        row: r,
                        col: c,
                        value: g[(r, c)],
                    });
                }
            }
        }
    }
    rows
}

fn delta_rows(state: &RunState) -> Result<Vec<DeltaRow>> {
    let t_total = state.tasks_completed();
    let weights = (1..=t_total)
        .map(|t| state.snapshot_weights(t))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for t in 0..t_total.saturating_sub(1) {
        for (l, stack) in state.stacks().iter().enumerate() {
            rows.push(DeltaRow {
                task: t + 1,
                location: stack.location(),
                delta_next: weights[t + 1][l].sub(&weights[t][l])?.frobenius_norm(),
                delta_final: weights[t_total - 1][l]
                    .sub(&weights[t][l])?
                    .frobenius_norm(),
            });
        }
    }
    Ok(rows)
}

fn omega_rows(state: &RunState) -> Vec<OmegaRow> {
    let mut rows = Vec::new();
    for snap in state.snapshots() {
        for (stack, omega) in state.stacks().iter().zip(&snap.omega) {
            for (index, w) in omega.iter().enumerate() {
                rows.push(OmegaRow {
                    task: snap.task_id,
                    location: stack.location(),
                    index,
                    omega: *w,
                });
            }
        }
    }
    rows
}
