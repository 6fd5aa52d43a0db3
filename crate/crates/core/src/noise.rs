//! Exploration noise and diagonal-Gaussian policy heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R) -> S {
    S::cast(rng.sample::<f64, _>(StandardNormal))
}

/// Discrete Ornstein-Uhlenbeck process
/// `x ← x + rate·(mean − x)·dt + volatility·√dt·ξ`.
#[derive(Clone, Debug)]
pub struct OuProcess<S: Scalar = f64> {
    state: Vec<S>,
    pub rate: S,
    pub volatility: S,
    pub mean: S,
    pub dt: S,
    rng: ChaCha8Rng,
}

impl<S: Scalar> OuProcess<S> {
    pub fn new(dim: usize, rate: S, volatility: S, mean: S, dt: S, seed: u64) -> Self {
        Self {
            state: vec![mean; dim],
            rate,
            volatility,
            mean,
            dt,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.state.len()
    }

    pub fn state(&self) -> &[S] {
        &self.state
    }

    pub fn set_state(&mut self, x: &[S]) -> Result<()> {
        if x.len() != self.state.len() {
            return Err(Error::ShapeMismatch {
                context: "OuProcess::set_state",
                expected: vec![self.state.len()],
                found: vec![x.len()],
            });
        }
        self.state.copy_from_slice(x);
        Ok(())
    }

    pub fn reset(&mut self) {
        let m = self.mean;
        self.state.iter_mut().for_each(|x| *x = m);
    }

    /// Advances one step and returns the new state.
    pub fn sample(&mut self) -> Vec<S> {
        let drift = self.rate * self.dt;
        let diffusion = self.volatility * self.dt.sqrt();
        for x in self.state.iter_mut() {
            let xi: S = standard_normal(&mut self.rng);
            *x += drift * (self.mean - *x) + diffusion * xi;
        }
        self.state.clone()
    }
}

fn clamp_log_std<S: Scalar>(v: S) -> S {
    v.max(S::cast(LOG_STD_MIN)).min(S::cast(LOG_STD_MAX))
}

/// Log-density of a diagonal Gaussian, summed over the columns of each row.
pub fn gaussian_log_density<S: Scalar>(
    x: &Tensor<S>,
    mean: &Tensor<S>,
    log_std: &Tensor<S>,
) -> Result<Tensor<S>> {
    if x.shape() != mean.shape() || mean.shape() != log_std.shape() {
        return Err(Error::ShapeMismatch {
            context: "gaussian_log_density",
            expected: mean.shape().to_vec(),
            found: log_std.shape().to_vec(),
        });
    }
    let half_log_two_pi = S::cast(0.5 * (2.0 * std::f64::consts::PI).ln());
    let half = S::cast(0.5);
    let d = x.cols();
    let out = (0..x.rows())
        .map(|r| {
            (0..d)
                .map(|c| {
                    let ls = clamp_log_std(log_std.at(r, c));
                    let z = (x.at(r, c) - mean.at(r, c)) / ls.exp();
                    -half * z * z - ls - half_log_two_pi
                })
                .sum()
        })
        .collect();
    Ok(Tensor::column(out))
}

/// Reparameterised draw `mean + exp(log_std)·ξ`, with `log_std` clamped to
/// `[LOG_STD_MIN, LOG_STD_MAX]`. Returns `(sample, log_density)`.
pub fn gaussian_head_sample<S: Scalar, R: Rng + ?Sized>(
    mean: &Tensor<S>,
    log_std: &Tensor<S>,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if mean.shape() != log_std.shape() {
        return Err(Error::ShapeMismatch {
            context: "gaussian_head_sample",
            expected: mean.shape().to_vec(),
            found: log_std.shape().to_vec(),
        });
    }
    let sample = mean.zip_map(log_std, |m, ls| {
        let xi: S = standard_normal(rng);
        m + clamp_log_std(ls).exp() * xi
    });
    let logp = gaussian_log_density(&sample, mean, log_std)?;
    Ok((sample, logp))
}

/// Records `mean + exp(clamp(log_std))·noise` on the tape.
pub fn reparameterized_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    mean: Var,
    log_std: Var,
    noise: Tensor<S>,
) -> Result<Var> {
    let ls = tape.clamp(log_std, S::cast(LOG_STD_MIN), S::cast(LOG_STD_MAX));
    let std = tape.exp(ls);
    let xi = tape.constant(noise);
    let scaled = tape.mul(std, xi)?;
    tape.add(mean, scaled)
}

/// Records the diagonal-Gaussian log-density of `x` on the tape; output is `[n, 1]`.
pub fn log_density_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    mean: Var,
    log_std: Var,
) -> Result<Var> {
    let ls = tape.clamp(log_std, S::cast(LOG_STD_MIN), S::cast(LOG_STD_MAX));
    let inv_std = {
        let neg = tape.scale(ls, -S::one());
        tape.exp(neg)
    };
    let diff = tape.sub(x, mean)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let quad = tape.scale(z2, S::cast(-0.5));
    let per_dim = tape.sub(quad, ls)?;
    let per_dim = tape.offset(per_dim, S::cast(-0.5 * (2.0 * std::f64::consts::PI).ln()));
    Ok(tape.row_sum(per_dim))
}
