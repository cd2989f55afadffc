//! Weighted LoRA composition per adapted weight, the QR-based orthogonality
//! penalty between task adapters, and sealing/freezing of locations.
//!
//! Each adapted weight matrix (a *location*) carries a [`LoraStack`]:
//! the frozen base `W₀`, one adapter `ΔW_τ = A_τ B_τ` per task that reached
//! it, and a scalar weight `ω_τ` per adapter. The effective weight is
//! `W₀ + Σ_τ ω_τ A_τ B_τ`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_thin, Matrix, RngStream};

/// Identifies an adapted weight matrix. Every backbone block owns exactly one
/// linear weight, so the block index is the whole key; ordering is by block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LocationId {
    pub block: usize,
}

impl LocationId {
    pub fn new(block: usize) -> Self {
        Self { block }
    }
}

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.weight", self.block)
    }
}

impl FromStr for LocationId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("block")
            .and_then(|rest| rest.strip_suffix(".weight"))
            .and_then(|n| n.parse().ok())
            .map(LocationId::new)
            .ok_or_else(|| Error::Data(format!("bad location id {s:?}")))
    }
}

impl TryFrom<String> for LocationId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LocationId> for String {
    fn from(loc: LocationId) -> Self {
        loc.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub task_id: usize,
    pub trainable: bool,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Matrix {
        // shapes are validated when the adapter is created
        self.a.matmul(&self.b).expect("adapter factors chain")
    }
}

/// Learning-rate class of an `ω` entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaClass {
    /// Weight of the adapter being trained for the current task.
    Current,
    /// Weight of an adapter sealed at an earlier task.
    Historical,
}

#[derive(Debug, Clone)]
pub struct LoraStack {
    location: LocationId,
    base: Arc<Matrix>,
    adapters: Vec<LoraAdapter>,
    omega: Vec<f64>,
    frozen: bool,
}

impl LoraStack {
    pub fn new(location: LocationId, base: Arc<Matrix>) -> Self {
        Self {
            location,
            base,
            adapters: Vec::new(),
            omega: Vec::new(),
            frozen: false,
        }
    }

    pub fn location(&self) -> LocationId {
        self.location
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Adapter currently being trained, if any.
    pub fn current(&self) -> Option<&LoraAdapter> {
        self.adapters.last().filter(|a| a.trainable)
    }

    pub fn current_mut(&mut self) -> Option<&mut LoraAdapter> {
        self.adapters.last_mut().filter(|a| a.trainable)
    }

    pub fn omega_class(&self, index: usize) -> OmegaClass {
        if index + 1 == self.adapters.len() && self.adapters[index].trainable {
            OmegaClass::Current
        } else {
            OmegaClass::Historical
        }
    }

    /// Mutable access to `ω`. Refused once the location is frozen.
    pub fn omega_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::FreezeViolation(format!(
                "{} is frozen; ω is immutable",
                self.location
            )));
        }
        Ok(&mut self.omega)
    }

    /// `W₀ + Σ_τ ω_τ A_τ B_τ`, accumulated in adapter order.
    pub fn compose_effective(&self) -> Result<Matrix> {
        self.compose_with(&self.omega, self.adapters.len())
    }

    /// Composition using the first `count` adapters and the given weights.
    /// Used to rebuild the weight a task snapshot saw.
    pub fn compose_with(&self, omega: &[f64], count: usize) -> Result<Matrix> {
        if count > self.adapters.len() || omega.len() != count {
            return Err(Error::Shape(format!(
                "{}: composing {count} adapters with {} weights ({} present)",
                self.location,
                omega.len(),
                self.adapters.len()
            )));
        }
        let mut w = (*self.base).clone();
        for (adapter, &weight) in self.adapters[..count].iter().zip(omega) {
            let delta = adapter.a.matmul(&adapter.b)?;
            w.axpy(weight, &delta).map_err(|_| {
                Error::Shape(format!(
                    "{}: adapter delta does not match W₀",
                    self.location
                ))
            })?;
        }
        w.ensure_finite("compose_effective")
    }

    /// Appends a fresh adapter for `task_id`: `A` Kaiming-normal with std
    /// `sqrt(2/K)`, `B = 0`, `ω = 1`. The effective weight is unchanged.
    pub fn add_task_adapter(
        &mut self,
        task_id: usize,
        rank: usize,
        rng: &mut RngStream,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::FreezeViolation(format!(
                "cannot add an adapter to frozen location {}",
                self.location
            )));
        }
        if self.current().is_some() {
            return Err(Error::Usage(format!(
                "{} already has an unsealed adapter",
                self.location
            )));
        }
        let (k, d) = self.base.shape();
        if rank == 0 || rank > k {
            return Err(Error::Shape(format!(
                "rank {rank} is invalid for a {k}x{d} weight"
            )));
        }
        let std = (2.0 / k as f64).sqrt();
        let a = Matrix::new(
            k,
            rank,
            (0..k * rank).map(|_| std * rng.standard_normal()).collect(),
        )?;
        self.adapters.push(LoraAdapter {
            a,
            b: Matrix::zeros(rank, d),
            task_id,
            trainable: true,
        });
        self.omega.push(1.0);
        Ok(())
    }

    /// Chain rule from `∂L/∂W_eff` to the stack's trainables.
    ///
    /// Returns gradients for the current adapter's factors (if one is
    /// trainable) and for every `ω` entry.
    pub fn factor_grads(&self, grad_w: &Matrix) -> Result<StackGrads> {
        if grad_w.shape() != self.base.shape() {
            return Err(Error::Shape(format!(
                "{}: weight gradient {}x{} vs weight {}x{}",
                self.location,
                grad_w.rows(),
                grad_w.cols(),
                self.base.rows(),
                self.base.cols()
            )));
        }
        let mut omega = Vec::with_capacity(self.adapters.len());
        for adapter in &self.adapters {
            // ⟨G, A B⟩ = ⟨Aᵀ G, B⟩
            let atg = adapter.a.t_matmul(grad_w)?;
            omega.push(atg.inner(&adapter.b)?);
        }
        let (a, b) = match self.current() {
            Some(cur) => {
                let w = *self.omega.last().expect("current adapter has an ω");
                let ga = grad_w.matmul_t(&cur.b)?.scale(w);
                let gb = cur.a.t_matmul(grad_w)?.scale(w);
                (Some(ga), Some(gb))
            }
            None => (None, None),
        };
        Ok(StackGrads { a, b, omega })
    }

    /// Marks the current adapter sealed and appends the orthonormal factor of
    /// its `A` to `basis`. Returns the `ω` vector at sealing time.
    pub fn seal_task(&mut self, basis: &mut OrthoBasis) -> Result<Vec<f64>> {
        let adapter = self
            .current_mut()
            .ok_or_else(|| Error::Usage("no unsealed adapter to seal (double seal?)".into()))?;
        let q = qr_thin(&adapter.a)?.detach().q;
        basis.append(&q)?;
        adapter.trainable = false;
        Ok(self.omega.clone())
    }

    pub(crate) fn set_frozen(&mut self) {
        self.frozen = true;
    }

    /// Simultaneous access to the current adapter and `ω`, for the optimiser
    /// and gradient checks. Refused once the location is frozen.
    pub(crate) fn trainables_mut(&mut self) -> Result<(Option<&mut LoraAdapter>, &mut [f64])> {
        if self.frozen {
            return Err(Error::FreezeViolation(format!(
                "{} is frozen",
                self.location
            )));
        }
        let current = self.adapters.last_mut().filter(|a| a.trainable);
        Ok((current, &mut self.omega))
    }
}

#[derive(Debug, Clone)]
pub struct StackGrads {
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
    pub omega: Vec<f64>,
}

/// Concatenated orthonormal factors `[Q₁, …, Q_{t−1}]` of sealed adapters.
#[derive(Debug, Clone, Default)]
pub struct OrthoBasis {
    columns: Option<Matrix>,
    block_width: Vec<usize>,
}

impl OrthoBasis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn width(&self) -> usize {
        self.columns.as_ref().map_or(0, |m| m.cols())
    }

    pub fn columns(&self) -> Option<&Matrix> {
        self.columns.as_ref()
    }

    /// Widths of the appended blocks, one per sealed task.
    pub fn blocks(&self) -> &[usize] {
        &self.block_width
    }

    fn append(&mut self, q: &Matrix) -> Result<()> {
        self.columns = Some(match self.columns.take() {
            None => q.clone(),
            Some(existing) => existing.hcat(q)?,
        });
        self.block_width.push(q.cols());
        Ok(())
    }

    /// `Q̃ᵀQ̃` over the sealed blocks.
    pub fn gram(&self) -> Option<Matrix> {
        self.columns
            .as_ref()
            .map(|q| q.t_matmul(q).expect("square gram"))
    }
}

#[derive(Debug, Clone)]
pub struct OrthoTerm {
    pub loss: f64,
    pub grad_a: Matrix,
}

/// `‖Q̃ᵀQ̃ − I‖_F` with `Q̃ = [basis, Q_t]`, `Q_t` the orthonormal factor of
/// the current adapter's `A`, and its gradient with respect to that `A`.
/// The basis is treated as a constant.
pub fn ortho_loss_and_grad(stack: &LoraStack, basis: &OrthoBasis) -> Result<OrthoTerm> {
    let current = stack
        .current()
        .ok_or_else(|| Error::Usage(format!("{} has no trainable adapter", stack.location)))?;
    let qr = qr_thin(&current.a)?;
    let q_tilde = match basis.columns() {
        Some(b) => b.hcat(&qr.q)?,
        None => qr.q.clone(),
    };
    let mut gram = q_tilde.t_matmul(&q_tilde)?;
    for i in 0..gram.rows() {
        gram[(i, i)] -= 1.0;
    }
    let loss = gram.frobenius_norm();
    let (k, r) = current.a.shape();
    if loss == 0.0 {
        return Ok(OrthoTerm {
            loss,
            grad_a: Matrix::zeros(k, r),
        });
    }
    // ∂‖G‖_F/∂Q̃ = 2 Q̃ G / ‖G‖_F for symmetric G; keep the Q_t columns.
    let offset = basis.width();
    let g_block = gram.column_block(offset, offset + r);
    let dq = q_tilde.matmul(&g_block)?.scale(2.0 / loss);
    let grad_a = qr.backward(&dq)?;
    Ok(OrthoTerm { loss, grad_a })
}

/// Marks every listed location frozen. Fails without side effects if any
/// location is unknown.
pub fn apply_freeze(stacks: &mut [LoraStack], freeze_set: &[LocationId]) -> Result<()> {
    for loc in freeze_set {
        if !stacks.iter().any(|s| s.location == *loc) {
            return Err(Error::Usage(format!("unknown location {loc}")));
        }
    }
    for stack in stacks.iter_mut() {
        if freeze_set.contains(&stack.location) {
            stack.set_frozen();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_with_base(base: Matrix) -> LoraStack {
        LoraStack::new(LocationId::new(0), Arc::new(base))
    }

    fn random(rng: &mut RngStream, m: usize, n: usize) -> Matrix {
        Matrix::new(m, n, (0..m * n).map(|_| rng.standard_normal()).collect()).unwrap()
    }

    fn set_current(stack: &mut LoraStack, a: Matrix, b: Matrix) {
        let cur = stack.current_mut().unwrap();
        cur.a = a;
        cur.b = b;
    }

    #[test]
    fn zero_weights_give_base() {
        let mut rng = RngStream::new(1);
        let base = random(&mut rng, 4, 3);
        let mut s = stack_with_base(base.clone());
        s.add_task_adapter(1, 2, &mut rng).unwrap();
        set_current(&mut s, random(&mut rng, 4, 2), random(&mut rng, 2, 3));
        s.omega_mut().unwrap()[0] = 0.0;
        assert!(s.compose_effective().unwrap().bit_eq(&base));
    }

    #[test]
    fn single_outer_product() {
        let mut rng = RngStream::new(1);
        let mut s = stack_with_base(Matrix::zeros(2, 2));
        s.add_task_adapter(1, 1, &mut rng).unwrap();
        set_current(
            &mut s,
            Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            Matrix::from_rows(&[&[0.0, 2.0]]).unwrap(),
        );
        assert_eq!(
            s.compose_effective().unwrap(),
            Matrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]).unwrap()
        );
    }

    #[test]
    fn two_adapters_accumulate_sequentially() {
        let mut rng = RngStream::new(4);
        let base = random(&mut rng, 5, 3);
        let mut s = stack_with_base(base.clone());
        let mut basis = OrthoBasis::new();
        s.add_task_adapter(1, 2, &mut rng).unwrap();
        let (a1, b1) = (random(&mut rng, 5, 2), random(&mut rng, 2, 3));
        set_current(&mut s, a1.clone(), b1.clone());
        s.seal_task(&mut basis).unwrap();
        s.add_task_adapter(2, 2, &mut rng).unwrap();
        let (a2, b2) = (random(&mut rng, 5, 2), random(&mut rng, 2, 3));
        set_current(&mut s, a2.clone(), b2.clone());
        let mut expected = base.add(&a1.matmul(&b1).unwrap()).unwrap();
        expected = expected.add(&a2.matmul(&b2).unwrap()).unwrap();
        assert!(s.compose_effective().unwrap().bit_eq(&expected));
    }

    #[test]
    fn composition_is_linear_in_omega() {
        let mut rng = RngStream::new(6);
        let mut s = stack_with_base(Matrix::zeros(4, 4));
        let mut basis = OrthoBasis::new();
        for t in 1..=3 {
            s.add_task_adapter(t, 2, &mut rng).unwrap();
            set_current(&mut s, random(&mut rng, 4, 2), random(&mut rng, 2, 4));
            s.seal_task(&mut basis).unwrap();
        }
        let omega: Vec<f64> = vec![0.7, -1.3, 2.1];
        let doubled: Vec<f64> = omega.iter().map(|w| 2.0 * w).collect();
        let w1 = s.compose_with(&omega, 3).unwrap();
        let w2 = s.compose_with(&doubled, 3).unwrap();
        // with W₀ = 0 the power-of-two scaling commutes with rounding
        assert!(w2.bit_eq(&w1.scale(2.0)));
    }

    #[test]
    fn append_keeps_effective_weight() {
        let mut rng = RngStream::new(2);
        let mut s = stack_with_base(random(&mut rng, 6, 6));
        let before = s.compose_effective().unwrap();
        s.add_task_adapter(1, 3, &mut rng).unwrap();
        assert!(s.compose_effective().unwrap().bit_eq(&before));
        assert_eq!(s.omega(), &[1.0]);
        assert_eq!(s.current().unwrap().b.max_abs(), 0.0);
    }

    #[test]
    fn frozen_stack_rejects_append_and_omega_edits() {
        let mut rng = RngStream::new(2);
        let mut stacks = vec![stack_with_base(Matrix::identity(3))];
        apply_freeze(&mut stacks, &[LocationId::new(0)]).unwrap();
        assert!(matches!(
            stacks[0].add_task_adapter(1, 1, &mut rng),
            Err(Error::FreezeViolation(_))
        ));
        assert!(matches!(
            stacks[0].omega_mut(),
            Err(Error::FreezeViolation(_))
        ));
        assert!(matches!(
            apply_freeze(&mut stacks, &[LocationId::new(7)]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn kaiming_scale_of_a() {
        let mut rng = RngStream::new(77);
        let k = 50;
        let mut s = stack_with_base(Matrix::zeros(k, 10));
        let mut values = Vec::new();
        let mut basis = OrthoBasis::new();
        let mut task = 1;
        while values.len() < 10_000 {
            s.add_task_adapter(task, 40, &mut rng).unwrap();
            values.extend_from_slice(s.current().unwrap().a.as_slice());
            s.seal_task(&mut basis).unwrap();
            task += 1;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = (2.0 / k as f64).sqrt();
        assert!(
            (std - target).abs() / target < 0.10,
            "std {std} target {target}"
        );
    }

    #[test]
    fn empty_basis_loss_vanishes() {
        let mut rng = RngStream::new(12);
        let mut s = stack_with_base(Matrix::zeros(8, 8));
        s.add_task_adapter(1, 3, &mut rng).unwrap();
        let term = ortho_loss_and_grad(&s, &OrthoBasis::new()).unwrap();
        assert!(term.loss <= 1e-10);
    }

    #[test]
    fn duplicated_unit_column_gives_sqrt_two() {
        let mut rng = RngStream::new(1);
        let mut s = stack_with_base(Matrix::zeros(2, 2));
        let mut basis = OrthoBasis::new();
        s.add_task_adapter(1, 1, &mut rng).unwrap();
        set_current(
            &mut s,
            Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            Matrix::zeros(1, 2),
        );
        s.seal_task(&mut basis).unwrap();
        s.add_task_adapter(2, 1, &mut rng).unwrap();
        set_current(
            &mut s,
            Matrix::from_rows(&[&[5.0], &[0.0]]).unwrap(),
            Matrix::zeros(1, 2),
        );
        let term = ortho_loss_and_grad(&s, &basis).unwrap();
        assert!((term.loss - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_blocks_give_zero_and_overlap_gives_positive() {
        let mut rng = RngStream::new(1);
        let mut s = stack_with_base(Matrix::zeros(3, 2));
        let mut basis = OrthoBasis::new();
        s.add_task_adapter(1, 1, &mut rng).unwrap();
        set_current(
            &mut s,
            Matrix::from_rows(&[&[2.0], &[0.0], &[0.0]]).unwrap(),
            Matrix::zeros(1, 2),
        );
        s.seal_task(&mut basis).unwrap();
        s.add_task_adapter(2, 2, &mut rng).unwrap();
        set_current(
            &mut s,
            Matrix::from_rows(&[&[0.0, 0.0], &[3.0, 1.0], &[0.0, 2.0]]).unwrap(),
            Matrix::zeros(2, 2),
        );
        assert!(ortho_loss_and_grad(&s, &basis).unwrap().loss <= 1e-10);
        set_current(
            &mut s,
            Matrix::from_rows(&[&[2e-5, 0.0], &[3.0, 1.0], &[0.0, 2.0]]).unwrap(),
            Matrix::zeros(2, 2),
        );
        assert!(ortho_loss_and_grad(&s, &basis).unwrap().loss > 0.0);
    }

    #[test]
    fn ortho_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = RngStream::new(100 + seed);
            let mut s = stack_with_base(Matrix::zeros(8, 5));
            let mut basis = OrthoBasis::new();
            s.add_task_adapter(1, 2, &mut rng).unwrap();
            s.seal_task(&mut basis).unwrap();
            s.add_task_adapter(2, 2, &mut rng).unwrap();
            let term = ortho_loss_and_grad(&s, &basis).unwrap();
            let a = s.current().unwrap().a.clone();
            let h = 1e-5;
            let mut numeric = Matrix::zeros(8, 2);
            for idx in 0..16 {
                let eval = |delta: f64| {
                    let mut probe = s.clone();
                    let pa = &mut probe.current_mut().unwrap().a;
                    *pa = a.clone();
                    pa.as_mut_slice()[idx] += delta;
                    ortho_loss_and_grad(&probe, &basis).unwrap().loss
                };
                numeric.as_mut_slice()[idx] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let rel =
                term.grad_a.sub(&numeric).unwrap().frobenius_norm() / numeric.frobenius_norm();
            assert!(rel < 1e-6, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn sealing_grows_basis_and_rejects_double_seal() {
        let mut rng = RngStream::new(3);
        let mut s = stack_with_base(Matrix::zeros(6, 4));
        let mut basis = OrthoBasis::new();
        s.add_task_adapter(1, 2, &mut rng).unwrap();
        s.seal_task(&mut basis).unwrap();
        assert_eq!(basis.width(), 2);
        assert!(matches!(s.seal_task(&mut basis), Err(Error::Usage(_))));
        s.add_task_adapter(2, 2, &mut rng).unwrap();
        s.seal_task(&mut basis).unwrap();
        assert_eq!(basis.width(), 4);
        assert_eq!(basis.blocks(), &[2, 2]);
    }

    #[test]
    fn location_ids_round_trip_through_text() {
        let loc = LocationId::new(12);
        assert_eq!(loc.to_string().parse::<LocationId>().unwrap(), loc);
        assert!("block.weight".parse::<LocationId>().is_err());
    }
}
