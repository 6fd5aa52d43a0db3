//! Constraint-violation losses and the clipped, projected inner loop that
//! updates the perturbation parameters.

mod harness;

pub use harness::{
    convergence_harness, ConvergenceRow, ConvergenceTrace, HarnessOptions, Quadratic, SmoothLoss,
    SmoothLossProblem, SquaredHinge,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{clip_vector, project_box};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    /// Upper bound `D_j` per cost.
    pub bounds: Vec<f64>,
    /// Inner iterations `W`.
    pub inner_iterations: usize,
    /// Step size `τ`.
    pub step_size: f64,
    /// Clip norm `G`.
    pub clip_norm: f64,
    /// Half-width `B` of the parameter box.
    pub box_half_width: f64,
}

impl ConstraintSpec {
    pub const DEFAULT_CLIP: f64 = 0.5;
    pub const DEFAULT_BOX: f64 = 10.0;

    /// One inner iteration, clip 0.5, box 10.
    pub fn new(bounds: Vec<f64>, step_size: f64) -> Self {
        Self {
            bounds,
            inner_iterations: 1,
            step_size,
            clip_norm: Self::DEFAULT_CLIP,
            box_half_width: Self::DEFAULT_BOX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::invalid("at least one cost bound is required"));
        }
        if let Some(d) = self.bounds.iter().find(|d| !d.is_finite()) {
            return Err(Error::invalid(format!("cost bound {d} is not finite")));
        }
        if self.inner_iterations == 0 {
            return Err(Error::invalid("inner iterations must be at least 1"));
        }
        for (name, v) in [
            ("step size", self.step_size),
            ("clip norm", self.clip_norm),
            ("box half-width", self.box_half_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn cost_count(&self) -> usize {
        self.bounds.len()
    }
}

/// `max(0, x − d)²`.
pub fn squared_hinge<S: Scalar>(x: S, bound: S) -> S {
    let h = (x - bound).max(S::zero());
    h * h
}

fn mean<S: Scalar>(v: &[S], what: &'static str) -> Result<S> {
    if v.is_empty() {
        return Err(Error::EmptyBatch(what));
    }
    Ok(v.iter().copied().sum::<S>() / S::cast(v.len() as f64))
}

/// `max(0, mean Q(s₀, a) − D)²` from the critic values of a batch of initial states.
pub fn empirical_violation_loss_initial<S: Scalar>(q_values: &[S], bound: S) -> Result<S> {
    Ok(squared_hinge(mean(q_values, "initial violation loss")?, bound))
}

/// Batch statistics at one step `t` of finished episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepSlice<S: Scalar = f64> {
    /// Cumulative cost `Σ_{t′≤t} c_{t′}` of each episode.
    pub prefix: Vec<S>,
    /// Cost `c_t` of each episode.
    pub step_cost: Vec<S>,
    /// Critic tail estimate `Q(s_t, a_t)` of each episode.
    pub tail: Vec<S>,
}

impl<S: Scalar> StepSlice<S> {
    /// Estimated episode cost `mean(prefix) − mean(c_t) + mean(tail)`.
    ///
    /// The first two terms are combined first so that at `t = 0` they cancel exactly.
    pub fn estimate(&self) -> Result<S> {
        let n = self.prefix.len();
        if self.step_cost.len() != n || self.tail.len() != n {
            return Err(Error::ShapeMismatch {
                context: "step slice",
                expected: vec![n, n, n],
                found: vec![n, self.step_cost.len(), self.tail.len()],
            });
        }
        let head = mean(&self.prefix, "per-step violation loss")? - mean(&self.step_cost, "per-step violation loss")?;
        Ok(head + mean(&self.tail, "per-step violation loss")?)
    }
}

/// Violation at step `t ∈ [0, T]` using the backward decomposition of the episode cost.
pub fn per_step_violation_loss<S: Scalar>(slice: &StepSlice<S>, bound: S, t: usize, horizon: usize) -> Result<S> {
    if t > horizon {
        return Err(Error::invalid(format!("step {t} outside [0, {horizon}]")));
    }
    Ok(squared_hinge(slice.estimate()?, bound))
}

/// `(prefix_t, tail_t, c_t)` with exact sums over one episode's cost sequence.
pub fn exact_decomposition(costs: &[f64], t: usize) -> Result<(f64, f64, f64)> {
    if t >= costs.len() {
        return Err(Error::invalid(format!("step {t} outside an episode of {} steps", costs.len())));
    }
    let prefix = costs[..=t].iter().sum();
    let tail = costs[t..].iter().sum();
    Ok((prefix, tail, costs[t]))
}

/// `max(L⁰, mean_t Lᵗ)`; just `L⁰` when no per-step values are given.
pub fn combined_violation<S: Scalar>(initial: S, per_step: &[S]) -> S {
    if per_step.is_empty() {
        return initial;
    }
    let m = per_step.iter().copied().sum::<S>() / S::cast(per_step.len() as f64);
    initial.max(m)
}

/// Index of the largest value; the lowest index wins ties.
pub fn select_worst_constraint<S: Scalar>(values: &[S]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("no constraints to select from"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("constraint violations"));
    }
    let mut best = 0;
    for (j, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViolationReport<S: Scalar = f64> {
    pub initial: Vec<S>,
    /// `per_step[j][t]`; empty rows when only the initial estimator is used.
    pub per_step: Vec<Vec<S>>,
    pub combined: Vec<S>,
    pub worst: usize,
}

impl<S: Scalar> ViolationReport<S> {
    pub fn new(initial: Vec<S>, per_step: Vec<Vec<S>>) -> Result<Self> {
        if per_step.len() != initial.len() {
            return Err(Error::ShapeMismatch {
                context: "violation report",
                expected: vec![initial.len()],
                found: vec![per_step.len()],
            });
        }
        if initial.iter().chain(per_step.iter().flatten()).any(|v| !(*v >= S::zero())) {
            return Err(Error::invalid("violation losses must be non-negative"));
        }
        let combined: Vec<S> = initial
            .iter()
            .zip(&per_step)
            .map(|(&l0, row)| combined_violation(l0, row))
            .collect();
        let worst = select_worst_constraint(&combined)?;
        Ok(Self {
            initial,
            per_step,
            combined,
            worst,
        })
    }
}

/// Squared hinge `max(0, mean(x) − D)²` recorded on a tape; `x` may be any shape.
pub fn record_squared_hinge<S: Scalar>(tape: &mut Tape<S>, x: Var, bound: S) -> Var {
    let m = tape.mean(x);
    let shifted = tape.offset(m, -bound);
    let h = tape.relu(shifted);
    tape.square(h)
}

/// Outcome of one projected step.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedStep<S: Scalar = f64> {
    pub phi: Vec<S>,
    /// Gradient norm before clipping.
    pub grad_norm: S,
    pub clipped: bool,
}

/// `Π_box[φ − τ·Clip_G(grad)]`.
pub fn clipped_projected_step<S: Scalar>(
    phi: &[S],
    grad: &[S],
    step_size: S,
    clip_norm: S,
    half_width: S,
) -> Result<ProjectedStep<S>> {
    if phi.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            context: "clipped projected step",
            expected: vec![phi.len()],
            found: vec![grad.len()],
        });
    }
    if !(step_size > S::zero()) {
        return Err(Error::invalid(format!("step size must be positive, got {step_size}")));
    }
    if !(half_width > S::zero()) {
        return Err(Error::invalid(format!("box half-width must be positive, got {half_width}")));
    }
    let c = clip_vector(grad, clip_norm)?;
    let mut next: Vec<S> = phi.iter().zip(&c.grads).map(|(&p, &g)| p - step_size * g).collect();
    project_box(&mut next, half_width);
    Ok(ProjectedStep {
        phi: next,
        grad_norm: c.norm,
        clipped: c.clipped,
    })
}

/// Per-constraint losses of a parameter vector and their gradients.
pub trait ViolationObjective<S: Scalar = f64> {
    fn dim(&self) -> usize;

    /// Violation value of every constraint at `phi`.
    fn losses(&mut self, phi: &[S]) -> Result<Vec<S>>;

    /// Gradient of constraint `j` at `phi`.
    fn gradient(&mut self, phi: &[S], j: usize) -> Result<Vec<S>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerStep<S: Scalar = f64> {
    pub worst: usize,
    pub losses: Vec<S>,
    pub grad_norm: S,
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerLoopResult<S: Scalar = f64> {
    pub phi: Vec<S>,
    pub steps: Vec<InnerStep<S>>,
}

/// `W` rounds of: pick the worst constraint, take a clipped projected step on it.
pub fn run_inner_loop<S: Scalar, O: ViolationObjective<S> + ?Sized>(
    objective: &mut O,
    phi0: &[S],
    spec: &ConstraintSpec,
) -> Result<InnerLoopResult<S>> {
    spec.validate()?;
    if phi0.len() != objective.dim() {
        return Err(Error::ShapeMismatch {
            context: "inner loop parameters",
            expected: vec![objective.dim()],
            found: vec![phi0.len()],
        });
    }
    let mut phi = phi0.to_vec();
    let mut steps = Vec::with_capacity(spec.inner_iterations);
    for _ in 0..spec.inner_iterations {
        let losses = objective.losses(&phi)?;
        if losses.len() != spec.cost_count() {
            return Err(Error::ShapeMismatch {
                context: "inner loop losses",
                expected: vec![spec.cost_count()],
                found: vec![losses.len()],
            });
        }
        let worst = select_worst_constraint(&losses)?;
        let grad = objective.gradient(&phi, worst)?;
        let step = clipped_projected_step(
            &phi,
            &grad,
            S::cast(spec.step_size),
            S::cast(spec.clip_norm),
            S::cast(spec.box_half_width),
        )?;
        phi = step.phi;
        steps.push(InnerStep {
            worst,
            losses,
            grad_norm: step.grad_norm,
            clipped: step.clipped,
        });
    }
    Ok(InnerLoopResult { phi, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(empirical_violation_loss_initial(&[1.0, 3.0], 2.0).unwrap(), 0.0);
        assert_eq!(empirical_violation_loss_initial(&[3.0, 5.0], 2.0).unwrap(), 4.0);
        assert_eq!(empirical_violation_loss_initial(&[0.5], 2.0).unwrap(), 0.0);
        assert!(matches!(
            empirical_violation_loss_initial::<f64>(&[], 1.0),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn per_step_at_zero_matches_initial() {
        let s = StepSlice {
            prefix: vec![0.3, 0.7, 0.1],
            step_cost: vec![0.3, 0.7, 0.1],
            tail: vec![1.9, 2.4, 0.8],
        };
        let a = per_step_violation_loss(&s, 1.0, 0, 25).unwrap();
        let b = empirical_violation_loss_initial(&s.tail, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(per_step_violation_loss(&s, 1.0, 26, 25).is_err());
    }

    #[test]
    fn hand_built_episode() {
        let (p, tail, c) = exact_decomposition(&[1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!((p, tail, c), (3.0, 5.0, 2.0));
        let s = StepSlice {
            prefix: vec![p],
            step_cost: vec![c],
            tail: vec![tail],
        };
        assert_eq!(per_step_violation_loss(&s, 4.0, 1, 3).unwrap(), 4.0);
    }

    #[test]
    fn combined_and_selection() {
        assert_eq!(combined_violation(0.7, &[0.7, 0.7]), 0.7);
        assert_eq!(combined_violation(0.0, &[1.0, 3.0]), 2.0);
        assert_eq!(combined_violation(5.0, &[0.0, 0.0]), 5.0);
        assert_eq!(select_worst_constraint(&[0.1, 0.5, 0.5]).unwrap(), 1);
        assert_eq!(select_worst_constraint(&[0.0, 0.0]).unwrap(), 0);
        assert_eq!(select_worst_constraint(&[3.0]).unwrap(), 0);
    }

    #[test]
    fn step_examples() {
        let s = clipped_projected_step(&[0.0_f64, 0.0], &[3.0, 4.0], 0.1, 0.5, 10.0).unwrap();
        assert!((s.phi[0] + 0.03).abs() < 1e-15 && (s.phi[1] + 0.04).abs() < 1e-15);
        assert!(s.clipped && s.grad_norm == 5.0);
        let s = clipped_projected_step(&[10.0, 1.0], &[-1.0, 0.0], 0.1, 0.5, 10.0).unwrap();
        assert_eq!(s.phi, vec![10.0, 1.0]);
        let s = clipped_projected_step(&[0.2], &[0.0], 0.1, 0.5, 10.0).unwrap();
        assert_eq!(s.phi, vec![0.2]);
        assert!(clipped_projected_step(&[0.0], &[f64::NAN], 0.1, 0.5, 10.0).is_err());
    }

    #[test]
    fn report_picks_combined_maximum() {
        let r = ViolationReport::new(vec![0.0, 0.4], vec![vec![1.0, 3.0], vec![]]).unwrap();
        assert_eq!(r.combined, vec![2.0, 0.4]);
        assert_eq!(r.worst, 0);
        assert!(ViolationReport::new(vec![-1.0], vec![vec![]]).is_err());
    }
}
