//! End-to-end behaviour of the continual-learning driver, checked against
//! independent re-computations built from the lower-level public pieces.

use lorac_core::data::{gen_synthetic_tasks, make_batches, Dataset, SyntheticSpec};
use lorac_core::experiment::{build_backbone, build_dataset, run_on_dataset, RunConfig};
use lorac_core::linalg::{Matrix, RngStream};
use lorac_core::netcore::{
    argmax, forward_backward_plain, Activation, AdamConfig, AdamState, Backbone, LinearHead,
    ParamKey, ParamUpdate,
};
use lorac_core::protocol::{
    adapter_stream, batch_stream, evaluate_row, RunState, Shrinkage, TaskChoice, TiiConfig,
    TrainConfig,
};
use lorac_core::Error;

fn dataset(seed: u64, tasks: usize) -> Dataset {
    let spec = SyntheticSpec {
        tasks,
        classes_per_task: 3,
        n_train: 40,
        n_test: 20,
        input_dim: 12,
        class_sep: 5.0,
    };
    gen_synthetic_tasks(&mut RngStream::new(seed), &spec).unwrap()
}

fn backbone(seed: u64) -> Backbone {
    Backbone::orthogonal(
        &[12, 12, 12, 12],
        Activation::Tanh,
        &mut RngStream::new(seed).fork(9),
    )
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        lr: 0.003,
        epochs: 4,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_lambda_single_task_equals_plain_lora_training() {
    let seed = 5;
    let ds = dataset(seed, 1);
    let task = &ds.tasks[0];
    let cfg = TrainConfig {
        lambda: 0.0,
        train_omega: false,
        ipc: None,
        tii: None,
        ..config()
    };
    let mut state = RunState::new(backbone(seed), cfg.clone(), seed).unwrap();
    state.train_task(task).unwrap();

    // Plain loop: fresh adapters, a zero head, Adam over (A, B, head).
    let bb = backbone(seed);
    let mut stacks = bb.lora_stacks();
    let mut rng = adapter_stream(seed, 1);
    for s in &mut stacks {
        s.add_task_adapter(1, cfg.rank, &mut rng).unwrap();
    }
    let mut head = LinearHead::zeros(bb.feature_dim(), task.class_ids.len());
    let labels = task.local_train_labels();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs {
        let mut brng = batch_stream(seed, 1, epoch);
        for batch in make_batches(task.train_x.rows(), cfg.batch_size, &mut brng) {
            let x = task.train_x.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let effective: Vec<Matrix> = stacks
                .iter()
                .map(|s| s.compose_effective().unwrap())
                .collect();
            let pass = forward_backward_plain(&bb, &effective, &head, &x, &y).unwrap();
            let grads: Vec<_> = stacks
                .iter()
                .zip(&pass.weight_grads)
                .map(|(s, g)| s.factor_grads(g).unwrap())
                .collect();
            let mut updates = Vec::new();
            for (block, (s, g)) in stacks.iter_mut().zip(&grads).enumerate() {
                let adapter = s.current_mut().unwrap();
                updates.push(ParamUpdate {
                    key: ParamKey::LoraA { block },
                    values: adapter.a.as_mut_slice(),
                    grad: g.a.as_ref().unwrap().as_slice(),
                    lr: cfg.lr,
                });
                updates.push(ParamUpdate {
                    key: ParamKey::LoraB { block },
                    values: adapter.b.as_mut_slice(),
                    grad: g.b.as_ref().unwrap().as_slice(),
                    lr: cfg.lr,
                });
            }
            updates.push(ParamUpdate {
                key: ParamKey::HeadWeight { task: 0 },
                values: head.weight.as_mut_slice(),
                grad: pass.head.weight.as_slice(),
                lr: cfg.lr,
            });
            updates.push(ParamUpdate {
                key: ParamKey::HeadBias { task: 0 },
                values: head.bias.as_mut_slice(),
                grad: pass.head.bias.as_slice(),
                lr: cfg.lr,
            });
            adam.step(updates).unwrap();
        }
    }

    for (mine, theirs) in state.stacks().iter().zip(&stacks) {
        let (a, b) = (&mine.adapters()[0], &theirs.adapters()[0]);
        assert_eq!(bits(&a.a), bits(&b.a));
        assert_eq!(bits(&a.b), bits(&b.b));
    }
    assert_eq!(bits(&state.heads().head(0).weight), bits(&head.weight));
    assert_eq!(bits(&state.heads().head(0).bias), bits(&head.bias));
}

#[test]
fn snapshots_and_frozen_locations_are_isolated_from_later_tasks() {
    let ds = dataset(11, 5);
    let mut state = RunState::new(backbone(11), config(), 11).unwrap();
    let mut at_completion: Vec<Vec<Vec<u64>>> = Vec::new();
    let mut first_task_tii: Vec<Vec<u64>> = Vec::new();
    for task in &ds.tasks {
        state.train_task(task).unwrap();
        at_completion.push(
            state
                .effective_weights()
                .unwrap()
                .iter()
                .map(bits)
                .collect(),
        );
        if task.task_id == 1 {
            first_task_tii = ds.tasks[0]
                .class_ids
                .iter()
                .flat_map(|c| {
                    let s = state.stats().class(*c).unwrap();
                    [bits(&s.tii_mean), bits(&s.tii_cov)]
                })
                .collect();
        }
        for (t, expected) in at_completion.iter().enumerate() {
            let now: Vec<Vec<u64>> = state
                .snapshot_weights(t + 1)
                .unwrap()
                .iter()
                .map(bits)
                .collect();
            assert_eq!(
                &now,
                expected,
                "snapshot {} drifted after task {}",
                t + 1,
                task.task_id
            );
        }
        for frozen in state.frozen_locations() {
            let since = state
                .freeze_history()
                .iter()
                .find(|f| f.locations.contains(&frozen))
                .unwrap()
                .task_id;
            let now = bits(&state.effective_weights().unwrap()[frozen.block]);
            assert_eq!(now, at_completion[since - 1][frozen.block]);
        }
    }
    let after: Vec<Vec<u64>> = ds.tasks[0]
        .class_ids
        .iter()
        .flat_map(|c| {
            let s = state.stats().class(*c).unwrap();
            [bits(&s.tii_mean), bits(&s.tii_cov)]
        })
        .collect();
    assert_eq!(after, first_task_tii);
    assert_eq!(state.snapshots().len(), ds.num_tasks());
}

/// Nearest class mean under the first task's extractor, by plain Euclidean distance.
fn euclidean_ncm_tasks(state: &RunState, x: &Matrix) -> Vec<usize> {
    let f = state
        .backbone()
        .features(&state.snapshot_weights(1).unwrap(), x)
        .unwrap();
    let classes: Vec<_> = state.stats().classes().collect();
    (0..f.rows())
        .map(|i| {
            let d: Vec<f64> = classes
                .iter()
                .map(|c| {
                    -c.tii_mean
                        .row(0)
                        .iter()
                        .zip(f.row(i))
                        .map(|(m, v)| (m - v).powi(2))
                        .sum::<f64>()
                })
                .collect();
            classes[argmax(&d)].task_id
        })
        .collect()
}

#[test]
fn huge_shrinkage_reduces_task_inference_to_euclidean_ncm() {
    let ds = dataset(21, 3);
    let cfg = TrainConfig {
        tii: Some(TiiConfig {
            shrinkage: Shrinkage::Absolute(1e12),
            ..TiiConfig::default()
        }),
        ..config()
    };
    let mut state = RunState::new(backbone(21), cfg, 21).unwrap();
    for task in &ds.tasks {
        state.train_task(task).unwrap();
    }
    let mut total = 0;
    for task in &ds.tasks {
        let inferred = state.infer_task_id(&task.test_x).unwrap();
        assert_eq!(inferred, euclidean_ncm_tasks(&state, &task.test_x));
        total += inferred.len();
    }
    assert_eq!(total, 3 * 3 * 20);
}

#[test]
fn task_inference_without_statistics_is_a_usage_error() {
    let state = RunState::new(backbone(1), config(), 1).unwrap();
    let x = Matrix::zeros(2, 12);
    assert!(matches!(state.infer_task_id(&x), Err(Error::Usage(_))));
}

#[test]
fn classifier_adjustment_touches_only_the_heads() {
    let ds = dataset(31, 3);
    let mut state = RunState::new(backbone(31), config(), 31).unwrap();
    for task in &ds.tasks {
        state.train_task(task).unwrap();
    }
    let before = state.clone();
    let steps = state.adjust_classifier().unwrap();
    assert!(steps > 0);
    for (a, b) in state.stacks().iter().zip(before.stacks()) {
        assert_eq!(
            bits(&a.compose_effective().unwrap()),
            bits(&b.compose_effective().unwrap())
        );
        assert_eq!(a.omega(), b.omega());
    }
    for (a, b) in state
        .backbone()
        .blocks()
        .iter()
        .zip(before.backbone().blocks())
    {
        assert_eq!(bits(a.weight()), bits(b.weight()));
        assert_eq!(bits(a.bias()), bits(b.bias()));
    }
    let moved = state
        .heads()
        .heads()
        .iter()
        .zip(before.heads().heads())
        .any(|(a, b)| bits(&a.weight) != bits(&b.weight));
    assert!(moved);
}

#[test]
fn single_task_adjustment_keeps_accuracy_within_two_points() {
    // A converged head, so that adjustment has no under-training to make up for.
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 30,
        ..config()
    };
    for seed in 0..3 {
        let ds = dataset(40 + seed, 1);
        let mut state = RunState::new(backbone(40 + seed), cfg.clone(), 40 + seed).unwrap();
        state.train_task(&ds.tasks[0]).unwrap();
        let before = evaluate_row(&state, &ds.tasks, TaskChoice::Infer)
            .unwrap()
            .accuracies[0];
        state.adjust_classifier().unwrap();
        let after = evaluate_row(&state, &ds.tasks, TaskChoice::Infer)
            .unwrap()
            .accuracies[0];
        assert!(
            (after - before).abs() <= 0.02,
            "seed {seed}: {before} -> {after}"
        );
    }
}

#[test]
fn single_task_prediction_is_plain_head_argmax() {
    let ds = dataset(50, 1);
    let mut state = RunState::new(backbone(50), config(), 50).unwrap();
    state.train_task(&ds.tasks[0]).unwrap();
    let x = &ds.tasks[0].test_x;
    let f = state
        .backbone()
        .features(&state.snapshot_weights(1).unwrap(), x)
        .unwrap();
    let logits = state.heads().head(0).logits(&f).unwrap();
    let expected: Vec<usize> = (0..logits.rows())
        .map(|i| ds.tasks[0].class_ids[argmax(logits.row(i))])
        .collect();
    assert_eq!(state.predict(x, TaskChoice::Infer).unwrap(), expected);
}

#[test]
fn two_separable_tasks_are_both_learned() {
    let text = r#"{"dataset": {"synthetic": {"tasks": 2, "class_sep": 10.0}}}"#;
    for seed in 0..3 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::from_json(text).unwrap()
        };
        let ds = build_dataset(&cfg).unwrap();
        let run = run_on_dataset(&cfg, &ds).unwrap();
        let last = run.results.accuracy_matrix.rows().last().unwrap().clone();
        assert!(last.iter().all(|&a| a >= 0.95), "seed {seed}: {last:?}");
    }
}

#[test]
fn inferred_snapshots_beat_deliberately_wrong_ones() {
    // Without freezing every task keeps its own snapshot; with three
    // locations and freezing, snapshots from the third task on coincide and
    // a wrong choice would mostly be harmless.
    let text = r#"{"variant": {"ipc": false}}"#;
    let (mut right, mut wrong) = (0.0, 0.0);
    for seed in 0..5 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::from_json(text).unwrap()
        };
        let ds = build_dataset(&cfg).unwrap();
        let run = run_on_dataset(&cfg, &ds).unwrap();
        let state = &run.state;
        let t = ds.num_tasks();
        for task in &ds.tasks {
            let x = &task.test_x;
            let n = x.rows() as f64;
            let inferred = state.infer_task_id(x).unwrap();
            let shifted: Vec<usize> = inferred.iter().map(|&k| k % t + 1).collect();
            for (tasks, acc) in [(&inferred, &mut right), (&shifted, &mut wrong)] {
                let p = state.predict_with_tasks(x, tasks).unwrap();
                *acc += p.iter().zip(&task.test_y).filter(|(a, b)| a == b).count() as f64 / n;
            }
        }
    }
    let (right, wrong) = (right / 30.0, wrong / 30.0);
    assert!(
        right - wrong > 0.05,
        "inferred {right:.3} vs wrong {wrong:.3}"
    );
}

#[test]
fn orthogonality_loss_descends_within_each_task() {
    let cfg = RunConfig::default();
    let ds = build_dataset(&cfg).unwrap();
    let run = run_on_dataset(&cfg, &ds).unwrap();
    // The first task has an empty basis, so its loss is rounding noise only.
    let traces: Vec<_> = run
        .results
        .ortho_trace
        .iter()
        .filter(|o| o.initial > 1e-9)
        .collect();
    assert!(!traces.is_empty());
    for o in traces {
        assert!(o.last < o.initial, "{o:?}");
    }
}

#[test]
fn unchanging_model_gives_constant_columns() {
    let ds = dataset(60, 4);
    let mut state = RunState::new(backbone(60), config(), 60).unwrap();
    for task in &ds.tasks {
        state.train_task(task).unwrap();
    }
    let rows: Vec<Vec<f64>> = (1..=ds.num_tasks())
        .map(|i| {
            evaluate_row(&state, &ds.tasks[..i], TaskChoice::Infer)
                .unwrap()
                .accuracies
        })
        .collect();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), i + 1);
        assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
        for (tau, a) in row.iter().enumerate() {
            assert_eq!(*a, rows[tau][tau]);
        }
    }
}

#[test]
fn pretext_backbone_depends_only_on_the_seed() {
    let cfg = RunConfig::default();
    let a = build_backbone(&cfg, 32).unwrap();
    let b = build_backbone(&cfg, 32).unwrap();
    for (x, y) in a.blocks().iter().zip(b.blocks()) {
        assert_eq!(bits(x.weight()), bits(y.weight()));
    }
}
