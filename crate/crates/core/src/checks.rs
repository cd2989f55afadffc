//! Built-in verification suites behind the `gradcheck` and `selftest`
//! commands: QR properties, finite-difference gradient checks, hand-computed
//! closed forms and small end-to-end invariants.

use std::sync::Arc;

use serde::Serialize;

use crate::data::{gen_synthetic_tasks, SyntheticSpec};
use crate::error::Result;
use crate::experiment::{run_experiment, DatasetSpec, ModelSpec, RunConfig};
use crate::ipc::{ImportanceTracker, IpcConfig};
use crate::linalg::{mahalanobis_sq, qr_thin, Matrix, RngStream};
use crate::lorac::{ortho_loss_and_grad, LocationId, LoraStack, OrthoBasis};
use crate::metrics::{compute_metrics, AccuracyMatrix};
use crate::netcore::{finite_diff_check, Activation, Backbone, ParamBlock};
use crate::protocol::{PretextConfig, RunState, TapConfig, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    /// Largest error observed (the suite's own measure).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

pub fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.standard_normal()).collect(),
    )
    .expect("finite draws")
}

/// Orthonormality, reconstruction and positive pivots of `qr_thin` on
/// `per_shape` seeded matrices of each shape.
pub fn qr_property_suite(per_shape: usize) -> Result<SuiteReport> {
    let shapes = [(5, 2), (8, 3), (16, 4), (64, 8)];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (si, &(m, n)) in shapes.iter().enumerate() {
        for seed in 0..per_shape {
            let a = random_matrix(&mut RngStream::with_stream(seed as u64, si as u64), m, n);
            let qr = qr_thin(&a)?;
            let orth = qr.q.t_matmul(&qr.q)?.max_abs_diff(&Matrix::identity(n))?;
            let recon = qr.q.matmul(&qr.r)?.sub(&a)?.frobenius_norm() / a.frobenius_norm();
            let pivots_ok = (0..n).all(|i| qr.r[(i, i)] > 0.0)
                && (0..n).all(|i| (0..i).all(|j| qr.r[(i, j)] == 0.0));
            worst = worst
                .max(orth)
                .max(recon)
                .max(if pivots_ok { 0.0 } else { f64::INFINITY });
            count += 1;
        }
    }
    Ok(SuiteReport::new("qr_properties", count, worst, 1e-10))
}

fn fd_blocks_report<F>(name: &str, loss: F, blocks: &[ParamBlock]) -> f64
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let report = finite_diff_check(loss, blocks, FD_STEP, FD_TOLERANCE);
    debug_assert!(!name.is_empty());
    report.max_rel_error()
}

/// `qr_backward` against central differences for `Σ Q` and `‖FᵀQ‖²`.
pub fn qr_backward_suite(per_shape: usize) -> Result<SuiteReport> {
    let shapes = [(5, 2), (8, 3), (16, 4)];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (si, &(m, n)) in shapes.iter().enumerate() {
        for seed in 0..per_shape {
            let mut rng = RngStream::with_stream(1000 + seed as u64, si as u64);
            let a = random_matrix(&mut rng, m, n);
            let fixed = qr_thin(&random_matrix(&mut rng, m, n))?.detach().q;
            let use_sum = seed % 2 == 0;
            let qr = qr_thin(&a)?;
            let cot = if use_sum {
                Matrix::filled(m, n, 1.0)
            } else {
                // ∂‖FᵀQ‖²/∂Q = 2 F Fᵀ Q
                fixed.matmul(&fixed.t_matmul(&qr.q)?)?.scale(2.0)
            };
            let grad = qr.backward(&cot)?;
            let loss = |p: &[Vec<f64>]| {
                let q = qr_thin(&Matrix::new(m, n, p[0].clone()).expect("finite"))
                    .expect("full rank")
                    .q;
                if use_sum {
                    q.as_slice().iter().sum()
                } else {
                    fixed.t_matmul(&q).expect("shapes").frobenius_norm().powi(2)
                }
            };
            let blocks = [ParamBlock {
                name: "A".into(),
                values: a.as_slice().to_vec(),
                analytic: grad.as_slice().to_vec(),
            }];
            worst = worst.max(fd_blocks_report("qr_backward", loss, &blocks));
            count += 1;
        }
    }
    Ok(SuiteReport::new("qr_backward", count, worst, FD_TOLERANCE))
}

/// Orthogonality loss gradient with respect to the current `A`, on 8×2
/// adapters against random 8×2 (or 8×4) sealed bases.
pub fn ortho_grad_suite(instances: usize) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = RngStream::with_stream(2000 + seed as u64, 0);
        let mut stack = LoraStack::new(LocationId::new(0), Arc::new(Matrix::zeros(8, 8)));
        let mut basis = OrthoBasis::new();
        let sealed = 1 + seed % 2;
        for t in 1..=sealed {
            stack.add_task_adapter(t, 2, &mut rng)?;
            stack.seal_task(&mut basis)?;
        }
        stack.add_task_adapter(sealed + 1, 2, &mut rng)?;
        let term = ortho_loss_and_grad(&stack, &basis)?;
        let a0 = stack.current().expect("current").a.clone();
        let loss = |p: &[Vec<f64>]| {
            let mut probe = stack.clone();
            probe.current_mut().expect("current").a =
                Matrix::new(8, 2, p[0].clone()).expect("finite");
            ortho_loss_and_grad(&probe, &basis).expect("full rank").loss
        };
        let blocks = [ParamBlock {
            name: "A".into(),
            values: a0.as_slice().to_vec(),
            analytic: term.grad_a.as_slice().to_vec(),
        }];
        worst = worst.max(fd_blocks_report("ortho", loss, &blocks));
    }
    Ok(SuiteReport::new(
        "ortho_loss_grad",
        instances,
        worst,
        FD_TOLERANCE,
    ))
}

/// A run state in the middle of its second task on a 2-block, width-8
/// network, with every trainable moved away from its initial value so that
/// all gradient paths are exercised. Returns the state and one batch.
pub fn mid_task_instance(
    seed: u64,
    activation: Activation,
) -> Result<(RunState, Matrix, Vec<usize>)> {
    let spec = SyntheticSpec {
        tasks: 2,
        classes_per_task: 3,
        n_train: 6,
        n_test: 2,
        input_dim: 6,
        class_sep: 3.0,
    };
    let mut rng = RngStream::with_stream(seed, 77);
    let ds = gen_synthetic_tasks(&mut rng, &spec)?;
    let backbone = Backbone::orthogonal(&[6, 8, 8], activation, &mut rng)?;
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 1,
        batch_size: 8,
        rank: 2,
        lambda: 0.7,
        ipc: None,
        tii: None,
        ..TrainConfig::default()
    };
    let mut state = RunState::new(backbone, cfg, seed)?;
    state.train_task(&ds.tasks[0])?;
    state.begin_task(&ds.tasks[1])?;
    for key in state.trainable_keys() {
        let current = state.param_values(key)?;
        let moved: Vec<f64> = current
            .iter()
            .map(|v| v + 0.3 * rng.standard_normal())
            .collect();
        state.set_param_values(key, &moved)?;
    }
    let task = &ds.tasks[1];
    let labels = task.local_train_labels();
    let rows: Vec<usize> = (0..10).collect();
    let y = rows.iter().map(|&i| labels[i]).collect();
    Ok((state, task.train_x.select_rows(&rows), y))
}

/// Full objective (cross-entropy plus orthogonality) against central
/// differences over every trainable tensor, cycling through activations.
pub fn total_loss_suite(instances: usize) -> Result<SuiteReport> {
    let activations = [Activation::Tanh, Activation::Softsign, Activation::Identity];
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (state, x, y) =
            mid_task_instance(3000 + seed as u64, activations[seed % activations.len()])?;
        let grads = state.total_loss_and_grads(&x, &y)?;
        let keys = state.trainable_keys();
        let blocks = keys
            .iter()
            .map(|k| {
                Ok(ParamBlock {
                    name: format!("{k:?}"),
                    values: state.param_values(*k)?,
                    analytic: state.grad_for(&grads, *k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = |p: &[Vec<f64>]| {
            let mut probe = state.clone();
            for (k, v) in keys.iter().zip(p) {
                probe.set_param_values(*k, v).expect("trainable");
            }
            probe
                .total_loss_and_grads(&x, &y)
                .expect("valid batch")
                .loss
        };
        worst = worst.max(fd_blocks_report("total", loss, &blocks));
    }
    Ok(SuiteReport::new(
        "total_loss_grad",
        instances,
        worst,
        FD_TOLERANCE,
    ))
}

/// Hand-computed values: duplicated unit column, diagonal Mahalanobis, the
/// two-task metrics case and one IPC step.
pub fn closed_form_suite() -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;

    let mut stack = LoraStack::new(LocationId::new(0), Arc::new(Matrix::zeros(2, 2)));
    let mut basis = OrthoBasis::new();
    let mut rng = RngStream::new(0);
    stack.add_task_adapter(1, 1, &mut rng)?;
    stack.current_mut().expect("current").a = Matrix::from_rows(&[&[1.0], &[0.0]])?;
    stack.seal_task(&mut basis)?;
    stack.add_task_adapter(2, 1, &mut rng)?;
    stack.current_mut().expect("current").a = Matrix::from_rows(&[&[5.0], &[0.0]])?;
    worst = worst.max((ortho_loss_and_grad(&stack, &basis)?.loss - 2f64.sqrt()).abs());

    let f = Matrix::from_rows(&[&[2.0, 0.0]])?;
    let mu = Matrix::from_rows(&[&[0.0, 0.0]])?;
    let sigma = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 1.0]])?;
    worst = worst.max((mahalanobis_sq(&f, &mu, &sigma, 0.0)? - 1.0).abs());

    let m = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]])?;
    let (a, fg) = compute_metrics(&m, 2)?;
    worst = worst.max((a - 0.75).abs()).max((fg - 0.2).abs());

    let mut tracker = ImportanceTracker::new(1);
    let loc = LocationId::new(0);
    tracker.accumulate_step(
        loc,
        &Matrix::filled(1, 1, 2.0),
        &Matrix::filled(1, 1, -3.0),
        &IpcConfig::default(),
    )?;
    let ib = tracker.i_bar(loc).expect("tracked")[(0, 0)];
    let ub = tracker.u_bar(loc).expect("tracked")[(0, 0)];
    worst = worst.max((ib - 0.9).abs()).max((ub - 0.9).abs());

    Ok(SuiteReport::new("closed_forms", 4, worst, 1e-12))
}

/// A short synthetic run used by the end-to-end invariants.
pub fn tiny_run_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            tasks: 3,
            classes_per_task: 2,
            n_train: 30,
            n_test: 10,
            input_dim: 8,
            class_sep: 6.0,
        }),
        model: ModelSpec {
            hidden_dims: vec![8, 8, 8],
            activation: Activation::Tanh,
            pretext: Some(PretextConfig {
                classes: 4,
                samples_per_class: 20,
                epochs: 2,
                ..PretextConfig::default()
            }),
        },
        rank: 2,
        epochs: 3,
        batch_size: 16,
        tap: TapConfig {
            samples_per_class: 32,
            epochs: 2,
            ..TapConfig::default()
        },
        ..RunConfig::default()
    }
}

/// Freeze invariance, snapshot isolation and determinism on tiny runs.
pub fn invariant_suite() -> Result<SuiteReport> {
    let cfg = tiny_run_config(11);
    let a = run_experiment(&cfg)?;
    let b = run_experiment(&cfg)?;
    let mut violations = 0.0;
    let ja = serde_json::to_string(&a.results).expect("serialisable");
    let jb = serde_json::to_string(&b.results).expect("serialisable");
    if ja != jb {
        violations += 1.0;
    }
    // Each frozen location keeps its weight from the freezing task onwards.
    let state = &a.state;
    for fs in state.freeze_history() {
        let at_freeze = state.snapshot_weights(fs.task_id)?;
        for later in fs.task_id + 1..=state.tasks_completed() {
            let w = state.snapshot_weights(later)?;
            for loc in &fs.locations {
                if !w[loc.block].bit_eq(&at_freeze[loc.block]) {
                    violations += 1.0;
                }
            }
        }
    }
    for row in &a.deltas {
        let frozen_since = state
            .freeze_history()
            .iter()
            .find(|fs| fs.locations.contains(&row.location))
            .map(|fs| fs.task_id);
        if frozen_since.is_some_and(|t| row.task >= t) && row.delta_next != 0.0 {
            violations += 1.0;
        }
    }
    Ok(SuiteReport::new("run_invariants", 2, violations, 0.0))
}

pub fn gradcheck_suites(instances: usize) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        qr_backward_suite(instances.div_ceil(3))?,
        ortho_grad_suite(instances)?,
        total_loss_suite(instances)?,
    ])
}

pub fn selftest_suites() -> Result<Vec<SuiteReport>> {
    let mut suites = vec![qr_property_suite(15)?, closed_form_suite()?];
    suites.extend(gradcheck_suites(20)?);
    suites.push(invariant_suite()?);
    Ok(suites)
}
