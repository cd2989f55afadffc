//! The continual-learning driver: per-task training with the composed LoRA
//! weights, sealing and freezing at task boundaries, class statistics,
//! pseudo-feature classifier adjustment and two-stage inference.

mod config;
mod eval;
mod pretext;
mod stats;
mod tap;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, TaskSplit};
use crate::error::{Error, Result};
use crate::ipc::{select_freeze_set, FreezeSet, ImportanceTracker};
use crate::linalg::{Matrix, RngStream};
use crate::lorac::{
    apply_freeze, ortho_loss_and_grad, LocationId, LoraStack, OmegaClass, OrthoBasis, StackGrads,
};
use crate::netcore::{
    forward_backward_plain, AdamConfig, AdamState, Backbone, HeadBank, HeadGrad, LinearHead,
    ParamKey, ParamUpdate,
};

pub use config::{
    OmegaRate, Shrinkage, TapConfig, TiiConfig, TiiMode, TrainConfig, SHRINKAGE_FLOOR,
};
pub use eval::{evaluate_row, AccuracyRow, TaskChoice};
pub use pretext::{pretrain_backbone, PretextConfig};
pub use stats::{ClassStats, TaskStats};

/// The parameters in force when a task finished: `ω` copies and adapter
/// counts per location, plus the frozen set at that moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub task_id: usize,
    pub omega: Vec<Vec<f64>>,
    pub adapter_counts: Vec<usize>,
    pub frozen: BTreeSet<LocationId>,
}

/// Orthogonality loss per location at the start and end of a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoTrace {
    pub task_id: usize,
    pub location: LocationId,
    pub initial: f64,
    pub last: f64,
}

/// Deterministic work counters for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskWork {
    pub task_id: usize,
    pub optimizer_steps: u64,
    pub samples_seen: u64,
}

/// Loss and gradients of the full training objective for one batch.
#[derive(Debug, Clone)]
pub struct TotalGrad {
    /// Cross-entropy plus `λ` times the summed orthogonality losses.
    pub loss: f64,
    pub cross_entropy: f64,
    /// Orthogonality loss per location; `None` where it was not evaluated.
    pub ortho: Vec<Option<f64>>,
    pub effective: Vec<Matrix>,
    /// `∂CE/∂W_eff` per location.
    pub weight_grads: Vec<Matrix>,
    /// Gradients of the full objective with respect to each stack's trainables.
    pub stack_grads: Vec<StackGrads>,
    pub head: HeadGrad,
}

// Labels for deriving independent random streams.
const STREAM_ADAPTERS: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_TAP: u64 = 3;

fn stream_label(kind: u64, task: usize, extra: usize) -> u64 {
    (kind << 48) ^ ((task as u64) << 24) ^ extra as u64
}

/// Stream that initialises the adapters of task `task` in a run seeded with `seed`.
pub fn adapter_stream(seed: u64, task: usize) -> RngStream {
    RngStream::new(seed).fork(stream_label(STREAM_ADAPTERS, task, 0))
}

/// Stream that orders the mini-batches of one training epoch.
pub fn batch_stream(seed: u64, task: usize, epoch: usize) -> RngStream {
    RngStream::new(seed).fork(stream_label(STREAM_BATCHES, task, epoch))
}

/// Stream for pseudo-feature sampling after `tasks_completed` tasks.
pub fn tap_stream(seed: u64, tasks_completed: usize) -> RngStream {
    RngStream::new(seed).fork(stream_label(STREAM_TAP, tasks_completed, 0))
}

#[derive(Debug, Clone)]
pub struct RunState {
    backbone: Backbone,
    stacks: Vec<LoraStack>,
    heads: HeadBank,
    bases: Vec<OrthoBasis>,
    snapshots: Vec<TaskSnapshot>,
    stats: TaskStats,
    freeze_history: Vec<FreezeSet>,
    importance: Vec<(usize, BTreeMap<LocationId, f64>)>,
    ortho_trace: Vec<OrthoTrace>,
    work: Vec<TaskWork>,
    config: TrainConfig,
    seed: u64,
}

impl RunState {
    pub fn new(backbone: Backbone, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stacks = backbone.lora_stacks();
        let bases = vec![OrthoBasis::new(); stacks.len()];
        Ok(Self {
            backbone,
            stacks,
            heads: HeadBank::new(),
            bases,
            snapshots: Vec::new(),
            stats: TaskStats::default(),
            freeze_history: Vec::new(),
            importance: Vec::new(),
            ortho_trace: Vec::new(),
            work: Vec::new(),
            config,
            seed,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn stacks(&self) -> &[LoraStack] {
        &self.stacks
    }

    pub fn heads(&self) -> &HeadBank {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut HeadBank {
        &mut self.heads
    }

    pub fn bases(&self) -> &[OrthoBasis] {
        &self.bases
    }

    pub fn snapshots(&self) -> &[TaskSnapshot] {
        &self.snapshots
    }

    pub fn stats(&self) -> &TaskStats {
        &self.stats
    }

    pub fn freeze_history(&self) -> &[FreezeSet] {
        &self.freeze_history
    }

    /// Matrix importance scores computed at the end of each task.
    pub fn importance(&self) -> &[(usize, BTreeMap<LocationId, f64>)] {
        &self.importance
    }

    pub fn ortho_trace(&self) -> &[OrthoTrace] {
        &self.ortho_trace
    }

    pub fn work(&self) -> &[TaskWork] {
        &self.work
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tasks_completed(&self) -> usize {
        self.snapshots.len()
    }

    pub fn frozen_locations(&self) -> BTreeSet<LocationId> {
        self.stacks
            .iter()
            .filter(|s| s.is_frozen())
            .map(LoraStack::location)
            .collect()
    }

    /// Current effective weights of every location.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        self.stacks
            .iter()
            .map(LoraStack::compose_effective)
            .collect()
    }

    /// Effective weights rebuilt from the snapshot of task `task_id` (1-based).
    pub fn snapshot_weights(&self, task_id: usize) -> Result<Vec<Matrix>> {
        let snap = self
            .snapshots
            .get(task_id.wrapping_sub(1))
            .ok_or_else(|| Error::Usage(format!("no snapshot for task {task_id}")))?;
        self.stacks
            .iter()
            .zip(snap.omega.iter().zip(&snap.adapter_counts))
            .map(|(s, (omega, &count))| s.compose_with(omega, count))
            .collect()
    }

    /// Starts task `task`: one fresh adapter per unfrozen location and a
    /// zero-initialised head. Exposed separately from training so gradient
    /// checks can inspect a task in progress.
    pub fn begin_task(&mut self, task: &TaskSplit) -> Result<()> {
        let expected = self.snapshots.len() + 1;
        if task.task_id != expected {
            return Err(Error::Protocol(format!(
                "task {} arrived but task {expected} is next",
                task.task_id
            )));
        }
        if self.heads.len() != self.snapshots.len() {
            return Err(Error::Protocol(format!(
                "task {expected} has already begun"
            )));
        }
        let mut rng = adapter_stream(self.seed, task.task_id);
        for stack in self.stacks.iter_mut().filter(|s| !s.is_frozen()) {
            stack.add_task_adapter(task.task_id, self.config.rank, &mut rng)?;
        }
        self.heads.push(
            LinearHead::zeros(self.backbone.feature_dim(), task.class_ids.len()),
            task.class_ids.clone(),
        )
    }

    /// Full objective on one batch for the head of the task in progress.
    /// `labels` are task-local.
    pub fn total_loss_and_grads(&self, inputs: &Matrix, labels: &[usize]) -> Result<TotalGrad> {
        let head_index = self
            .heads
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Usage("no task in progress".into()))?;
        let effective = self.effective_weights()?;
        let pass = forward_backward_plain(
            &self.backbone,
            &effective,
            self.heads.head(head_index),
            inputs,
            labels,
        )?;
        let mut stack_grads = Vec::with_capacity(self.stacks.len());
        let mut ortho = vec![None; self.stacks.len()];
        let mut loss = pass.loss;
        for (i, (stack, grad_w)) in self.stacks.iter().zip(&pass.weight_grads).enumerate() {
            let mut g = stack.factor_grads(grad_w)?;
            if self.config.lambda > 0.0 && stack.current().is_some() {
                let term = ortho_loss_and_grad(stack, &self.bases[i])?;
                loss += self.config.lambda * term.loss;
                ortho[i] = Some(term.loss);
                if let Some(ga) = g.a.as_mut() {
                    ga.axpy(self.config.lambda, &term.grad_a)?;
                }
            }
            stack_grads.push(g);
        }
        Ok(TotalGrad {
            loss,
            cross_entropy: pass.loss,
            ortho,
            effective,
            weight_grads: pass.weight_grads,
            stack_grads,
            head: pass.head,
        })
    }

    /// Trainable tensors of the task in progress, in a fixed order.
    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for stack in self.stacks.iter().filter(|s| !s.is_frozen()) {
            let block = stack.location().block;
            if stack.current().is_some() {
                keys.push(ParamKey::LoraA { block });
                keys.push(ParamKey::LoraB { block });
            }
            if self.config.train_omega {
                keys.extend((0..stack.omega().len()).map(|index| ParamKey::Omega { block, index }));
            }
        }
        if let Some(task) = self.heads.len().checked_sub(1) {
            keys.push(ParamKey::HeadWeight { task });
            keys.push(ParamKey::HeadBias { task });
        }
        keys
    }

    /// Current values of a trainable tensor.
    pub fn param_values(&self, key: ParamKey) -> Result<Vec<f64>> {
        let missing = || Error::Usage(format!("{key:?} is not a parameter of this run"));
        let stack = |block: usize| self.stacks.get(block).ok_or_else(missing);
        Ok(match key {
            ParamKey::LoraA { block } => stack(block)?
                .current()
                .ok_or_else(missing)?
                .a
                .as_slice()
                .to_vec(),
            ParamKey::LoraB { block } => stack(block)?
                .current()
                .ok_or_else(missing)?
                .b
                .as_slice()
                .to_vec(),
            ParamKey::Omega { block, index } => {
                vec![*stack(block)?.omega().get(index).ok_or_else(missing)?]
            }
            ParamKey::HeadWeight { task } if task < self.heads.len() => {
                self.heads.head(task).weight.as_slice().to_vec()
            }
            ParamKey::HeadBias { task } if task < self.heads.len() => {
                self.heads.head(task).bias.as_slice().to_vec()
            }
            _ => return Err(missing()),
        })
    }

    /// Overwrites a trainable tensor; frozen locations refuse.
    pub fn set_param_values(&mut self, key: ParamKey, values: &[f64]) -> Result<()> {
        let slot = self.param_slot(key)?;
        if slot.len() != values.len() {
            return Err(Error::Shape(format!(
                "{key:?}: {} values for {} entries",
                values.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    fn param_slot(&mut self, key: ParamKey) -> Result<&mut [f64]> {
        let missing = || Error::Usage(format!("{key:?} is not a parameter of this run"));
        match key {
            ParamKey::LoraA { block }
            | ParamKey::LoraB { block }
            | ParamKey::Omega { block, .. } => {
                let stack = self.stacks.get_mut(block).ok_or_else(missing)?;
                let (current, omega) = stack.trainables_mut()?;
                match key {
                    ParamKey::LoraA { .. } => Ok(current.ok_or_else(missing)?.a.as_mut_slice()),
                    ParamKey::LoraB { .. } => Ok(current.ok_or_else(missing)?.b.as_mut_slice()),
                    ParamKey::Omega { index, .. } => {
                        omega.get_mut(index..=index).ok_or_else(missing)
                    }
                    _ => unreachable!(),
                }
            }
            ParamKey::HeadWeight { task } if task < self.heads.len() => {
                Ok(self.heads.heads_mut()[task].weight.as_mut_slice())
            }
            ParamKey::HeadBias { task } if task < self.heads.len() => {
                Ok(self.heads.heads_mut()[task].bias.as_mut_slice())
            }
            _ => Err(missing()),
        }
    }

    /// Gradient of the full objective for `key`, taken from `grads`.
    pub fn grad_for(&self, grads: &TotalGrad, key: ParamKey) -> Result<Vec<f64>> {
        let missing = || Error::Usage(format!("no gradient for {key:?}"));
        Ok(match key {
            ParamKey::LoraA { block } => grads.stack_grads[block]
                .a
                .as_ref()
                .ok_or_else(missing)?
                .as_slice()
                .to_vec(),
            ParamKey::LoraB { block } => grads.stack_grads[block]
                .b
                .as_ref()
                .ok_or_else(missing)?
                .as_slice()
                .to_vec(),
            ParamKey::Omega { block, index } => vec![*grads.stack_grads[block]
                .omega
                .get(index)
                .ok_or_else(missing)?],
            ParamKey::HeadWeight { .. } => grads.head.weight.as_slice().to_vec(),
            ParamKey::HeadBias { .. } => grads.head.bias.as_slice().to_vec(),
            _ => return Err(missing()),
        })
    }

    fn learning_rate(&self, key: ParamKey) -> f64 {
        match key {
            ParamKey::Omega { block, index } => {
                let current = self.stacks[block].omega_class(index) == OmegaClass::Current;
                if current && self.config.omega_current_rate == OmegaRate::Main {
                    self.config.lr
                } else {
                    self.config.lr_hist()
                }
            }
            _ => self.config.lr,
        }
    }

    /// Trains task `task` end to end: adapters and head, importance
    /// tracking, sealing, freezing, snapshot and class statistics.
    pub fn train_task(&mut self, task: &TaskSplit) -> Result<()> {
        self.begin_task(task)?;
        let t = task.task_id;
        let labels = task.local_train_labels();
        let keys = self.trainable_keys();
        let rates: Vec<f64> = keys.iter().map(|k| self.learning_rate(*k)).collect();
        let mut adam = AdamState::new(AdamConfig::with_lr(self.config.lr));
        let mut tracker = self.config.ipc.map(|_| ImportanceTracker::new(t));
        let mut first_ortho: Option<Vec<Option<f64>>> = None;
        let mut last_ortho = Vec::new();
        let mut samples_seen = 0u64;

        for epoch in 0..self.config.epochs {
            let mut rng = batch_stream(self.seed, t, epoch);
            for batch in make_batches(task.train_x.rows(), self.config.batch_size, &mut rng) {
                let x = task.train_x.select_rows(&batch);
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let grads = self.total_loss_and_grads(&x, &y)?;
                if first_ortho.is_none() {
                    first_ortho = Some(grads.ortho.clone());
                }
                last_ortho = grads.ortho.clone();
                if let (Some(tracker), Some(cfg)) = (tracker.as_mut(), self.config.ipc.as_ref()) {
                    for (stack, (w, g)) in self
                        .stacks
                        .iter()
                        .zip(grads.effective.iter().zip(&grads.weight_grads))
                    {
                        if !stack.is_frozen() {
                            tracker.accumulate_step(stack.location(), w, g, cfg)?;
                        }
                    }
                }
                let grad_values = keys
                    .iter()
                    .map(|k| self.grad_for(&grads, *k))
                    .collect::<Result<Vec<_>>>()?;
                self.adam_step(&mut adam, &keys, &rates, &grad_values)?;
                samples_seen += batch.len() as u64;
            }
        }

        for (i, (first, last)) in first_ortho
            .unwrap_or_default()
            .iter()
            .zip(&last_ortho)
            .enumerate()
        {
            if let (Some(initial), Some(last)) = (first, last) {
                self.ortho_trace.push(OrthoTrace {
                    task_id: t,
                    location: LocationId::new(i),
                    initial: *initial,
                    last: *last,
                });
            }
        }
        self.work.push(TaskWork {
            task_id: t,
            optimizer_steps: adam.step_count(),
            samples_seen,
        });
        self.finish_task(task, tracker)
    }

    fn adam_step(
        &mut self,
        adam: &mut AdamState,
        keys: &[ParamKey],
        rates: &[f64],
        grads: &[Vec<f64>],
    ) -> Result<()> {
        // Collect disjoint mutable slices for every trainable tensor.
        let mut slots: BTreeMap<ParamKey, &mut [f64]> = BTreeMap::new();
        let wanted: BTreeSet<ParamKey> = keys.iter().copied().collect();
        for stack in self.stacks.iter_mut().filter(|s| !s.is_frozen()) {
            let block = stack.location().block;
            let (current, omega) = stack.trainables_mut()?;
            if let Some(adapter) = current {
                slots.insert(ParamKey::LoraA { block }, adapter.a.as_mut_slice());
                slots.insert(ParamKey::LoraB { block }, adapter.b.as_mut_slice());
            }
            for (index, w) in omega.iter_mut().enumerate() {
                slots.insert(ParamKey::Omega { block, index }, std::slice::from_mut(w));
            }
        }
        let task = self.heads.len() - 1;
        let head = &mut self.heads.heads_mut()[task];
        slots.insert(ParamKey::HeadWeight { task }, head.weight.as_mut_slice());
        slots.insert(ParamKey::HeadBias { task }, head.bias.as_mut_slice());
        slots.retain(|k, _| wanted.contains(k));

        let mut updates = Vec::with_capacity(keys.len());
        let mut by_key: BTreeMap<ParamKey, (f64, &[f64])> = BTreeMap::new();
        for ((k, lr), g) in keys.iter().zip(rates).zip(grads) {
            by_key.insert(*k, (*lr, g.as_slice()));
        }
        for (key, values) in slots {
            let (lr, grad) = by_key[&key];
            updates.push(ParamUpdate {
                key,
                values,
                grad,
                lr,
            });
        }
        adam.step(updates)
    }

    fn finish_task(&mut self, task: &TaskSplit, tracker: Option<ImportanceTracker>) -> Result<()> {
        let t = task.task_id;
        for (stack, basis) in self.stacks.iter_mut().zip(self.bases.iter_mut()) {
            if stack.current().is_some() {
                stack.seal_task(basis)?;
            }
        }
        if let (Some(tracker), Some(cfg)) = (tracker, self.config.ipc) {
            // Nothing was tracked once every location is frozen.
            let scores = if self.stacks.iter().all(LoraStack::is_frozen) {
                BTreeMap::new()
            } else {
                tracker.matrix_scores()?
            };
            let selection = select_freeze_set(t, &scores, &self.frozen_locations(), &cfg);
            apply_freeze(&mut self.stacks, &selection.locations)?;
            self.importance.push((t, scores));
            self.freeze_history.push(selection);
        }
        self.snapshots.push(TaskSnapshot {
            task_id: t,
            omega: self.stacks.iter().map(|s| s.omega().to_vec()).collect(),
            adapter_counts: self.stacks.iter().map(|s| s.adapters().len()).collect(),
            frozen: self.frozen_locations(),
        });
        self.fit_task_stats(task)
    }

    /// Pseudo-feature classifier adjustment; see [`tap`].
    pub fn adjust_classifier(&mut self) -> Result<u64> {
        tap::adjust_classifier(self, tap_stream(self.seed, self.snapshots.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_tasks, SyntheticSpec};
    use crate::netcore::Activation;

    fn small_setup(config: TrainConfig) -> (RunState, crate::data::Dataset) {
        let spec = SyntheticSpec {
            tasks: 3,
            classes_per_task: 2,
            n_train: 20,
            n_test: 10,
            input_dim: 8,
            class_sep: 6.0,
        };
        let ds = gen_synthetic_tasks(&mut RngStream::new(4), &spec).unwrap();
        let backbone =
            Backbone::orthogonal(&[8, 8, 8], Activation::Tanh, &mut RngStream::new(5)).unwrap();
        (RunState::new(backbone, config, 6).unwrap(), ds)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            rank: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn out_of_order_task_is_protocol_error() {
        let (mut st, ds) = small_setup(quick());
        assert!(matches!(
            st.train_task(&ds.tasks[1]),
            Err(Error::Protocol(_))
        ));
        st.train_task(&ds.tasks[0]).unwrap();
        assert!(matches!(
            st.train_task(&ds.tasks[0]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn one_snapshot_per_task_and_bases_grow_by_rank() {
        let cfg = TrainConfig {
            ipc: None,
            ..quick()
        };
        let (mut st, ds) = small_setup(cfg);
        for task in &ds.tasks {
            st.train_task(task).unwrap();
        }
        assert_eq!(st.snapshots().len(), 3);
        assert!(st.bases().iter().all(|b| b.width() == 6));
        assert_eq!(st.heads().len(), 3);
    }

    #[test]
    fn base_weights_never_change() {
        let (mut st, ds) = small_setup(quick());
        let before: Vec<Matrix> = st
            .backbone()
            .blocks()
            .iter()
            .map(|b| (**b.weight()).clone())
            .collect();
        for task in &ds.tasks {
            st.train_task(task).unwrap();
        }
        for (b, w) in st.backbone().blocks().iter().zip(&before) {
            assert!(b.weight().bit_eq(w));
        }
    }

    #[test]
    fn frozen_omega_cannot_be_set() {
        let (mut st, ds) = small_setup(quick());
        st.train_task(&ds.tasks[0]).unwrap();
        let frozen = *st.frozen_locations().iter().next().unwrap();
        let r = st.set_param_values(
            ParamKey::Omega {
                block: frozen.block,
                index: 0,
            },
            &[2.0],
        );
        assert!(matches!(r, Err(Error::FreezeViolation(_))));
    }

    #[test]
    fn omega_learning_rate_classes() {
        let (mut st, ds) = small_setup(quick());
        st.config.ipc = None;
        st.config.lr = 0.01;
        st.train_task(&ds.tasks[0]).unwrap();
        st.begin_task(&ds.tasks[1]).unwrap();
        assert_eq!(
            st.learning_rate(ParamKey::Omega { block: 0, index: 1 }),
            0.01
        );
        assert!((st.learning_rate(ParamKey::Omega { block: 0, index: 0 }) - 1e-4).abs() < 1e-18);
        st.config.omega_current_rate = OmegaRate::Historical;
        assert!((st.learning_rate(ParamKey::Omega { block: 0, index: 1 }) - 1e-4).abs() < 1e-18);
    }
}
