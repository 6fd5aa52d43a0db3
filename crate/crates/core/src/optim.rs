//! First-order update rules: global-norm clipping, Adam, and box projection.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of [`clip_by_global_norm`].
#[derive(Clone, Debug)]
pub struct Clipped<T, S> {
    pub grads: T,
    /// Global 2-norm before clipping.
    pub norm: S,
    pub clipped: bool,
}

fn clip_factor<S: Scalar>(norm: S, max_norm: S) -> Result<Option<S>> {
    if !(max_norm > S::zero()) || !max_norm.is_finite() {
        return Err(Error::invalid(format!(
            "maximum gradient norm must be positive, got {max_norm}"
        )));
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((norm > max_norm).then(|| max_norm / norm))
}

/// Rescales a gradient set so its global 2-norm is at most `max_norm`.
///
/// Leaves the set untouched when `‖g‖ ≤ max_norm` and returns `max_norm · g / ‖g‖` otherwise.
pub fn clip_by_global_norm<S: Scalar>(
    grads: &[Tensor<S>],
    max_norm: S,
) -> Result<Clipped<Vec<Tensor<S>>, S>> {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&v| v * v).sum::<S>().sqrt();
    let factor = clip_factor(norm, max_norm)?;
    let grads = match factor {
        Some(k) => grads.iter().map(|g| g.scale(k)).collect(),
        None => grads.to_vec(),
    };
    Ok(Clipped {
        grads,
        norm,
        clipped: factor.is_some(),
    })
}

/// [`clip_by_global_norm`] over a flat vector.
pub fn clip_vector<S: Scalar>(grad: &[S], max_norm: S) -> Result<Clipped<Vec<S>, S>> {
    let norm = grad.iter().map(|&g| g * g).sum::<S>().sqrt();
    let factor = clip_factor(norm, max_norm)?;
    let grads = match factor {
        Some(k) => grad.iter().map(|&g| g * k).collect(),
        None => grad.to_vec(),
    };
    Ok(Clipped {
        grads,
        norm,
        clipped: factor.is_some(),
    })
}

/// Euclidean projection onto `[-half_width, half_width]^d`.
pub fn project_box<S: Scalar>(x: &mut [S], half_width: S) {
    for v in x {
        *v = v.max(-half_width).min(half_width);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar = f64> {
    pub config: AdamConfig,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[&Tensor<S>], config: AdamConfig) -> Self {
        Self {
            config,
            first: params.iter().map(|p| p.zeros_like()).collect(),
            second: params.iter().map(|p| p.zeros_like()).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.second
    }

    /// One descent step `p ← p − α·m̂/(√v̂ + ε)`.
    ///
    /// A gradient set that is identically zero advances (decays) the moments
    /// and the step counter but leaves the parameters where they are.
    pub fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                context: "AdamState::step (parameter count)",
                expected: vec![self.first.len()],
                found: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    context: "AdamState::step",
                    expected: m.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("Adam gradient"));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::cast(c.beta1), S::cast(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let all_zero = grads.iter().all(|g| g.data().iter().all(|&v| v == S::zero()));
        let bias1 = S::one() - b1.powi(self.step as i32);
        let bias2 = S::one() - b2.powi(self.step as i32);
        let (lr, eps) = (S::cast(c.lr), S::cast(c.eps));

        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + one_b1 * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + one_b2 * gi * gi;
                if !all_zero {
                    let m_hat = m.data()[i] / bias1;
                    let v_hat = v.data()[i] / bias2;
                    pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_three_four_to_half_norm() {
        let c = clip_vector(&[3.0_f64, 4.0], 0.5).unwrap();
        assert!(c.clipped);
        assert!((c.grads[0] - 0.3).abs() < 1e-15);
        assert!((c.grads[1] - 0.4).abs() < 1e-15);
        assert_eq!(c.norm, 5.0);
    }

    #[test]
    fn clip_leaves_small_gradient_alone() {
        let c = clip_vector(&[0.1_f64, 0.1], 0.5).unwrap();
        assert!(!c.clipped);
        assert_eq!(c.grads, vec![0.1, 0.1]);
    }

    #[test]
    fn clip_rejects_non_finite_and_bad_bound() {
        assert!(clip_vector(&[f64::NAN, 1.0], 0.5).is_err());
        assert!(clip_vector(&[1.0], 0.0).is_err());
        let t = [Tensor::row(vec![f64::INFINITY])];
        assert!(clip_by_global_norm(&t, 1.0).is_err());
    }

    #[test]
    fn global_norm_spans_tensors() {
        let t = [Tensor::row(vec![3.0_f64]), Tensor::row(vec![4.0])];
        let c = clip_by_global_norm(&t, 1.0).unwrap();
        assert!((c.grads[0].item() - 0.6).abs() < 1e-15);
        assert!((c.grads[1].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient() {
        // m̂ = g, v̂ = g² on the first step, so the move is α·g/(|g| + ε).
        let mut p = Tensor::scalar(1.0_f64);
        let mut adam = AdamState::new(&[&p], AdamConfig::with_lr(0.01));
        adam.step(vec![&mut p], &[Tensor::scalar(2.5)]).unwrap();
        let expected = 1.0 - 0.01 * 2.5 / (2.5 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        let mut q = Tensor::scalar(0.0_f64);
        let mut adam = AdamState::new(&[&q], AdamConfig::with_lr(0.01));
        adam.step(vec![&mut q], &[Tensor::scalar(-1e-3)]).unwrap();
        assert!(q.item() > 0.0 && (q.item() - 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut p = Tensor::scalar(1.0_f64);
        let mut adam = AdamState::new(&[&p], AdamConfig::default());
        adam.step(vec![&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let after_first = p.item();
        let m1 = adam.first_moments()[0].item();
        adam.step(vec![&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.item(), after_first);
        assert!((adam.first_moments()[0].item() - 0.9 * m1).abs() < 1e-15);
        assert_eq!(adam.steps_taken(), 2);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(1, 2);
        let mut adam = AdamState::new(&[&p], AdamConfig::default());
        assert!(adam.step(vec![&mut p], &[Tensor::scalar(1.0)]).is_err());
    }

    #[test]
    fn projection_clamps_each_coordinate() {
        let mut x = vec![-12.0, 3.0, 11.0];
        project_box(&mut x, 10.0);
        assert_eq!(x, vec![-10.0, 3.0, 10.0]);
    }
}
