//! Meta-gradients through an explicitly unrolled inner loop.
//!
//! The inner optimization is recorded step by step on one tape: each SGD
//! update's gradient is emitted as graph nodes (`backward_graph`), so the
//! post-step parameters remain a differentiable function of the starting
//! point. The meta-gradient of an outer loss is then either the exact
//! derivative through all recorded steps (second order) or the gradient at
//! the adapted parameters only (first order, the FOMAML convention).

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaMode {
    /// Exact dL_outer/dθ₀ through the unrolled steps.
    FullSecondOrder,
    /// dL_outer/dθ^(k): drop derivatives of the inner trajectory.
    FirstOrder,
}

/// Per-step size: a shared scalar rate or a per-parameter vector
/// (e.g. η/(F̂+ε) for preconditioned steps). Treated as a constant when
/// differentiating.
#[derive(Debug, Clone)]
pub enum StepScale {
    Fixed(f64),
    PerParam(Tensor),
}

/// Records SGD from θ₀ as a differentiable graph.
pub struct Unroll {
    pub tape: Tape,
    theta0: NodeId,
    theta: NodeId,
    steps: usize,
}

impl Unroll {
    pub fn new(theta0: Tensor) -> Self {
        let mut tape = Tape::new();
        let id = tape.leaf(theta0);
        Unroll {
            tape,
            theta0: id,
            theta: id,
            steps: 0,
        }
    }

    pub fn theta_node(&self) -> NodeId {
        self.theta
    }

    pub fn theta0_node(&self) -> NodeId {
        self.theta0
    }

    pub fn theta(&self) -> &Tensor {
        self.tape.value(self.theta)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One recorded step θ ← θ − scale ⊙ ∇loss(θ). `build_loss` receives the
    /// tape and the current parameter node and returns a scalar loss node.
    /// Returns the loss value before the step.
    pub fn sgd_step(
        &mut self,
        scale: &StepScale,
        build_loss: impl FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
    ) -> Result<f64> {
        let loss = build_loss(&mut self.tape, self.theta)?;
        let loss_value = self.tape.value(loss).item();
        let grad = self.tape.backward_graph(loss, self.theta)?;
        let update = match scale {
            StepScale::Fixed(eta) => self.tape.scale(grad, *eta),
            StepScale::PerParam(v) => {
                let c = self.tape.constant(v.clone());
                self.tape.mul(grad, c)
            }
        };
        self.theta = self.tape.sub(self.theta, update);
        self.steps += 1;
        self.tape.check_finite()?;
        Ok(loss_value)
    }

    /// Builds the outer loss at the adapted parameters and returns
    /// (outer loss value, meta-gradient) under the chosen mode. With zero
    /// recorded steps both modes coincide with the plain gradient at θ₀.
    pub fn meta_gradient(
        &mut self,
        mode: MetaMode,
        build_outer: impl FnOnce(&mut Tape, NodeId) -> Result<NodeId>,
    ) -> Result<(f64, Tensor)> {
        let outer = build_outer(&mut self.tape, self.theta)?;
        let value = self.tape.value(outer).item();
        let wrt = match mode {
            MetaMode::FullSecondOrder => self.theta0,
            MetaMode::FirstOrder => self.theta,
        };
        let grad = self.tape.backward(outer, wrt)?;
        Ok((value, grad))
    }
}

/// Builds ½·Σθ² on a tape; the canonical toy loss used in tests.
pub fn half_sq_norm(tape: &mut Tape, theta: NodeId) -> Result<NodeId> {
    let sq = tape.mul(theta, theta);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_both_modes_equal_plain_gradient() {
        let theta0 = Tensor::vector(vec![1.5, -2.0]);
        for mode in [MetaMode::FullSecondOrder, MetaMode::FirstOrder] {
            let mut u = Unroll::new(theta0.clone());
            let (_, g) = u.meta_gradient(mode, half_sq_norm).unwrap();
            // d(½Σθ²)/dθ = θ.
            assert_eq!(g.data(), theta0.data());
        }
    }

    /// Inner loss ½θ², one step of rate η: θ¹ = (1−η)θ⁰. Outer loss ½(θ¹)².
    /// Full second order: (1−η)²·θ⁰; first order: (1−η)·θ⁰.
    #[test]
    fn one_step_quadratic_closed_form() {
        let eta = 0.25;
        let theta0 = 1.2;
        for (mode, expect) in [
            (MetaMode::FullSecondOrder, (1.0 - eta) * (1.0 - eta) * theta0),
            (MetaMode::FirstOrder, (1.0 - eta) * theta0),
        ] {
            let mut u = Unroll::new(Tensor::vector(vec![theta0]));
            u.sgd_step(&StepScale::Fixed(eta), half_sq_norm).unwrap();
            assert_eq!(u.theta().data(), &[(1.0 - eta) * theta0]);
            let (_, g) = u.meta_gradient(mode, half_sq_norm).unwrap();
            assert!((g.data()[0] - expect).abs() < 1e-12, "{mode:?}");
        }
    }

    /// k steps on a quadratic contract θ by (1−η)^k; the full meta-gradient
    /// is (1−η)^(2k)·θ⁰.
    #[test]
    fn multi_step_quadratic() {
        let eta = 0.5;
        let k = 4;
        let theta0 = 0.8;
        let mut u = Unroll::new(Tensor::vector(vec![theta0]));
        for _ in 0..k {
            u.sgd_step(&StepScale::Fixed(eta), half_sq_norm).unwrap();
        }
        let shrink = (1.0 - eta) as f64;
        assert!((u.theta().data()[0] - shrink.powi(k) * theta0).abs() < 1e-15);
        let (_, g) = u
            .meta_gradient(MetaMode::FullSecondOrder, half_sq_norm)
            .unwrap();
        assert!((g.data()[0] - shrink.powi(2 * k) * theta0).abs() < 1e-15);
    }

    #[test]
    fn per_param_scale_acts_elementwise() {
        let mut u = Unroll::new(Tensor::vector(vec![1.0, 1.0]));
        let scale = StepScale::PerParam(Tensor::vector(vec![0.5, 0.25]));
        u.sgd_step(&scale, half_sq_norm).unwrap();
        // grad = θ = [1,1]; θ¹ = [1−0.5, 1−0.25].
        assert_eq!(u.theta().data(), &[0.5, 0.75]);
    }
}
