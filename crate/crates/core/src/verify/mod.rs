//! Self-checks against independent oracles: finite differences, exact
//! formulas, linear solves and brute force. Shared by the `verify` command and
//! the acceptance tests.

mod e2e;

pub use e2e::{check_end_to_end, run_end_to_end, scaled_ctc_safe, EndToEndOptions, EndToEndReport, SeedOutcome};

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::constraint::{
    exact_decomposition, convergence_harness, HarnessOptions, Quadratic, SmoothLoss, SmoothLossProblem, SquaredHinge,
    StepSlice,
};
use crate::critic::{CentralCritic, TdBatch};
use crate::env::{self, CdsnParams, CtcParams, EnvKind, JointAction};
use crate::error::Result;
use crate::nn::{Activation, Mlp};
use crate::noise::standard_normal;
use crate::optim::{clip_by_global_norm, AdamConfig, AdamState};
use crate::policy::{BaseMode, BaseSource, DecomPolicy, PolicyConfig, Variant};
use crate::tensor::Tensor;
use crate::trainer::{
    deterministic_surrogate, gradient_aggregation_check, stochastic_surrogate, validate_lr_schedule, ActionValue,
    LrSchedule, LrSchedules, PolicyBatch, ScheduleClass,
};

/// Result of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    /// Tolerances held (independent of runtime).
    pub within_tolerance: bool,
    pub observed: String,
    pub bound: String,
    pub elapsed: Duration,
    pub time_limit: Duration,
}

impl CheckOutcome {
    pub fn within_time(&self) -> bool {
        self.elapsed <= self.time_limit
    }

    pub fn passed(&self) -> bool {
        self.within_tolerance && self.within_time()
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<28} observed {} | bound {} | {:.1}s (limit {}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.observed,
            self.bound,
            self.elapsed.as_secs_f64(),
            self.time_limit.as_secs()
        )
    }
}

fn timed(
    id: u8,
    name: &'static str,
    limit_secs: u64,
    body: impl FnOnce() -> Result<(bool, String, String)>,
) -> Result<CheckOutcome> {
    let t0 = Instant::now();
    let (ok, observed, bound) = body()?;
    Ok(CheckOutcome {
        id,
        name,
        within_tolerance: ok,
        observed,
        bound,
        elapsed: t0.elapsed(),
        time_limit: Duration::from_secs(limit_secs),
    })
}

const ACTIVATIONS: [Activation; 4] = [Activation::LeakyRelu, Activation::Elu, Activation::Tanh, Activation::Identity];

/// Signs of every pre-activation that feeds a kinked nonlinearity.
fn kink_pattern(net: &Mlp<f64>, input: &Tensor<f64>) -> Result<Vec<bool>> {
    let mut x = input.clone();
    let mut signs = Vec::new();
    for layer in net.layers() {
        let mut z = x.matmul(&layer.weight)?;
        let cols = z.cols();
        for (k, v) in z.data_mut().iter_mut().enumerate() {
            *v += layer.bias.data()[k % cols];
        }
        if matches!(layer.activation, Activation::LeakyRelu | Activation::Elu) {
            signs.extend(z.data().iter().map(|&v| v > 0.0));
        }
        x = z.map(|v| layer.activation.apply(v));
    }
    Ok(signs)
}

fn weighted_output(net: &Mlp<f64>, input: &Tensor<f64>, weights: &Tensor<f64>) -> Result<f64> {
    let y = net.forward(input)?;
    Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Largest per-coordinate relative error of tape gradients against central
/// differences, over random MLPs. Coordinates whose `±h` probes straddle a
/// kink are skipped and counted.
#[derive(Clone, Debug, PartialEq)]
pub struct AutodiffReport {
    pub networks: usize,
    pub coordinates: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// Relative error with the denominator floored, so that coordinates with a
/// vanishing gradient are judged on an absolute scale.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn autodiff_report(networks: usize, seed: u64, inject_fault: bool) -> Result<AutodiffReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut report = AutodiffReport {
        networks,
        coordinates: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..networks {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=32)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=32));
        }
        let mut net = Mlp::<f64>::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng);
        for layer in net.layers_mut() {
            layer.activation = ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())];
        }
        let rows = rng.random_range(1..=4);
        let input = Tensor::from_rows(rows, sizes[0], (0..rows * sizes[0]).map(|_| rng.random_range(-1.5..1.5)).collect());
        let out = *sizes.last().expect("non-empty sizes");
        let weights = Tensor::from_rows(rows, out, (0..rows * out).map(|_| rng.random_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let vars = net.register(&mut tape, true);
        let x = tape.constant(input.clone());
        let y = vars.forward(&mut tape, x)?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(y, w)?;
        let loss = tape.sum(p);
        let grads = tape.backward(loss)?;
        let mut analytic: Vec<f64> = net.grads(&vars, &grads).iter().flat_map(|g| g.data().to_vec()).collect();
        if inject_fault {
            analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
        }

        let theta = net.flatten();
        let base_pattern = kink_pattern(&net, &input)?;
        for k in 0..theta.len() {
            let mut probe = theta.clone();
            probe[k] = theta[k] + h;
            net.assign_flat(&probe)?;
            let plus = weighted_output(&net, &input, &weights)?;
            let straddles_plus = kink_pattern(&net, &input)? != base_pattern;
            probe[k] = theta[k] - h;
            net.assign_flat(&probe)?;
            let minus = weighted_output(&net, &input, &weights)?;
            let straddles_minus = kink_pattern(&net, &input)? != base_pattern;
            net.assign_flat(&theta)?;
            if straddles_plus || straddles_minus {
                report.skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            report.coordinates += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[k], fd, 1e-4));
        }
    }
    Ok(report)
}

/// Criterion 1: reverse-mode gradients of random MLPs against central differences.
pub fn check_autodiff(seed: u64, inject_fault: bool) -> Result<CheckOutcome> {
    timed(1, "autodiff vs finite diff", 30, || {
        let r = autodiff_report(100, seed, inject_fault)?;
        Ok((
            r.max_rel_error <= 1e-4,
            format!(
                "max rel err {:.2e} over {} coords, {} nets ({} kink-straddling skipped)",
                r.max_rel_error, r.coordinates, r.networks, r.skipped
            ),
            "1e-4".into(),
        ))
    })
}

/// Criterion 2: global-norm clipping against the two-branch formula.
pub fn check_clipping(seed: u64) -> Result<CheckOutcome> {
    timed(2, "gradient clipping", 5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_excess = 0.0f64;
        let mut mismatches = 0usize;
        let mut worst_cos = 1.0f64;
        for _ in 0..10_000 {
            let dim = rng.random_range(2..=64);
            let scale = 10f64.powf(rng.random_range(-12.0..12.0));
            let g_max = 10f64.powf(rng.random_range(-3.0..3.0));
            let raw: Vec<f64> = (0..dim).map(|_| standard_normal::<f64, _>(&mut rng) * scale).collect();
            let split = rng.random_range(1..dim);
            let grads = vec![Tensor::row(raw[..split].to_vec()), Tensor::row(raw[split..].to_vec())];
            let out = clip_by_global_norm(&grads, g_max)?;
            let flat: Vec<f64> = out.grads.iter().flat_map(|t| t.data().to_vec()).collect();

            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expected: Vec<f64> = if norm <= g_max {
                raw.clone()
            } else {
                raw.iter().map(|v| v * (g_max / norm)).collect()
            };
            if flat != expected {
                mismatches += 1;
            }
            let out_norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_excess = worst_excess.max(out_norm / g_max - 1.0);
            let cos = if norm > 0.0 {
                raw.iter().zip(&flat).map(|(a, b)| a * b).sum::<f64>() / (norm * out_norm)
            } else {
                1.0
            };
            worst_cos = worst_cos.min(cos);
        }
        Ok((
            mismatches == 0 && worst_excess <= 1e-12 && worst_cos >= 1.0 - 1e-12,
            format!(
                "{mismatches} formula mismatches, max ‖out‖/G − 1 = {worst_excess:.1e}, min cos = 1 − {:.1e}",
                1.0 - worst_cos
            ),
            "0 mismatches, ‖out‖ ≤ G up to rounding (1e-12 rel), cos ≥ 1 − 1e-12 at scales 1e-12..1e12".into(),
        ))
    })
}

/// Random orthogonal matrix as a product of Householder reflections (row-major).
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q = DMatrix::<f64>::identity(d, d);
    for _ in 0..d {
        let v = DVector::from_fn(d, |_, _| standard_normal::<f64, _>(rng));
        let n2 = v.norm_squared();
        if n2 < 1e-12 {
            continue;
        }
        let h = DMatrix::<f64>::identity(d, d) - (&v * v.transpose()) * (2.0 / n2);
        q = h * q;
    }
    q.transpose().as_slice().to_vec()
}

/// Random problem: SPD quadratics and squared hinges sharing a minimizer
/// inside the box; returns the problem and a random start.
pub fn random_smooth_problem(rng: &mut ChaCha8Rng, half_width: f64, max_eigenvalue: f64) -> Result<(SmoothLossProblem, Vec<f64>)> {
    let d = rng.random_range(1..=8);
    let m = rng.random_range(1..=3);
    let optimum: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8 * half_width..0.8 * half_width)).collect();
    let mut losses: Vec<Box<dyn SmoothLoss>> = Vec::new();
    let quadratics = rng.random_range(1..=m);
    for _ in 0..quadratics {
        let q = random_orthogonal(d, rng);
        let eig: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..max_eigenvalue)).collect();
        let mut a = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                a[r * d + c] = (0..d).map(|k| q[r * d + k] * eig[k] * q[c * d + k]).sum();
            }
        }
        for r in 0..d {
            for c in 0..r {
                let s = 0.5 * (a[r * d + c] + a[c * d + r]);
                a[r * d + c] = s;
                a[c * d + r] = s;
            }
        }
        let top = eig.iter().copied().fold(0.0, f64::max);
        losses.push(Box::new(Quadratic::new(a, optimum.clone(), rng.random_range(0.0..0.5), top)?));
    }
    for _ in quadratics..m {
        // Scaled so that 2‖a‖² stays within the smoothness budget.
        let raw: Vec<f64> = (0..d).map(|_| standard_normal::<f64, _>(rng)).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let len = rng.random_range(0.2..(0.5 * max_eigenvalue).sqrt());
        let normal: Vec<f64> = raw.iter().map(|v| v / n * len).collect();
        let at: f64 = normal.iter().zip(&optimum).map(|(a, p)| a * p).sum();
        losses.push(Box::new(SquaredHinge {
            normal,
            level: at + rng.random_range(0.0..1.0),
        }));
    }
    let phi0 = (0..d).map(|_| rng.random_range(-half_width..half_width)).collect();
    Ok((SmoothLossProblem::new(losses, half_width, optimum)?, phi0))
}

/// Criterion 3: the clipped projected loop on random synthetic problems.
pub fn check_inner_convergence(seed: u64) -> Result<CheckOutcome> {
    timed(3, "clipped projected descent", 120, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = HarnessOptions {
            step_size: 1e-3,
            clip_norm: 1.0,
            epsilon: 1e-2,
            ..HarnessOptions::default()
        };
        let mut failures = 0;
        let mut worst_entry_ratio = 0.0f64;
        let mut worst_terminal = f64::NEG_INFINITY;
        for _ in 0..100 {
            let (problem, phi0) = random_smooth_problem(&mut rng, 5.0, 10.0)?;
            let trace = convergence_harness(&problem, &phi0, &opts)?;
            if !trace.passed() {
                failures += 1;
            }
            if let Some(h) = trace.entry {
                if trace.entry_bound > 0.0 {
                    worst_entry_ratio = worst_entry_ratio.max(h as f64 / trace.entry_bound);
                }
            }
            let width = trace.width_entry.min(trace.width_terminal);
            let excess = trace
                .terminal_losses
                .iter()
                .map(|l| (l - trace.floor) / width)
                .fold(f64::NEG_INFINITY, f64::max);
            worst_terminal = worst_terminal.max(excess);
        }
        Ok((
            failures == 0,
            format!(
                "{failures}/100 failed; max H_obs/bound = {worst_entry_ratio:.3}, max (L_j − C)/width = {worst_terminal:.3}"
            ),
            "H_obs ≤ ‖φ0 − φ*‖²/(2τε), L_j ≤ C + (2ε + τG²)/(2F) under both F".into(),
        ))
    })
}

/// Criterion 4: prefix + tail − c_t reproduces each episode's total cost.
pub fn check_bvf_identity(seed: u64) -> Result<CheckOutcome> {
    timed(4, "backward value identity", 10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut episodes = 0;
        for kind in [EnvKind::CtcSafe, EnvKind::Cdsn] {
            let mut game = env::build(kind, &CtcParams::default(), &CdsnParams::default())?;
            let spec = game.spec().clone();
            let m = spec.cost_count;
            let mut runs: Vec<Vec<Vec<f64>>> = Vec::new();
            for e in 0..500 {
                game.reset(seed.wrapping_add(e));
                let mut costs = vec![Vec::new(); m];
                loop {
                    let a = (0..spec.n_agents)
                        .map(|_| (0..spec.action_dim).map(|_| rng.random_range(spec.action_low..=spec.action_high)).collect())
                        .collect();
                    let out = game.step(&JointAction(a))?;
                    for j in 0..m {
                        costs[j].push(out.team_costs[j]);
                    }
                    if out.done {
                        break;
                    }
                }
                runs.push(costs);
            }
            episodes += runs.len();
            for j in 0..m {
                let horizon = runs[0][j].len();
                for t in 0..horizon {
                    let mut slice = StepSlice::default();
                    let mut total = 0.0;
                    for run in &runs {
                        let c = &run[j];
                        let (prefix, tail, ct) = exact_decomposition(c, t)?;
                        let full: f64 = c.iter().sum();
                        worst = worst.max((prefix + tail - ct - full).abs());
                        slice.prefix.push(prefix);
                        slice.step_cost.push(ct);
                        slice.tail.push(tail);
                        total += full;
                    }
                    let batch = slice.estimate()?;
                    worst = worst.max((batch - total / runs.len() as f64).abs());
                }
            }
        }
        Ok((
            worst <= 1e-12,
            format!("max |Δ| = {worst:.1e} over {episodes} episodes, per episode and batch means"),
            "1e-12".into(),
        ))
    })
}

/// Two-state, two-action chain with a fixed deterministic policy.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    /// `p[s][a]`: probability of landing in state 1.
    pub p1: [[f64; 2]; 2],
    pub reward: [[f64; 2]; 2],
    pub policy: [usize; 2],
    pub gamma: f64,
}

impl Default for TabularMdp {
    fn default() -> Self {
        Self {
            p1: [[0.25, 0.75], [0.5, 1.0]],
            reward: [[1.0, 0.0], [-0.5, 2.0]],
            policy: [1, 0],
            gamma: 0.9,
        }
    }
}

impl TabularMdp {
    /// `Q^π` from `(I − γ P Π) q = r`.
    pub fn analytic_q(&self) -> [[f64; 2]; 2] {
        let idx = |s: usize, a: usize| 2 * s + a;
        let mut m = DMatrix::<f64>::identity(4, 4);
        let mut r = DVector::<f64>::zeros(4);
        for s in 0..2 {
            for a in 0..2 {
                r[idx(s, a)] = self.reward[s][a];
                for (s2, p) in [(0, 1.0 - self.p1[s][a]), (1, self.p1[s][a])] {
                    m[(idx(s, a), idx(s2, self.policy[s2]))] -= self.gamma * p;
                }
            }
        }
        let q = m.lu().solve(&r).expect("I − γPΠ is invertible for γ < 1");
        [[q[0], q[1]], [q[2], q[3]]]
    }

    /// Full batch with exact transition multiplicities (quarters).
    pub fn batch(&self) -> TdBatch<f64> {
        let onehot = |k: usize| if k == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        let (mut s, mut a, mut r, mut s2, mut a2) = (vec![], vec![], vec![], vec![], vec![]);
        for st in 0..2 {
            for ac in 0..2 {
                let ones = (self.p1[st][ac] * 4.0).round() as usize;
                for k in 0..4 {
                    let next = usize::from(k < ones);
                    s.extend(onehot(st));
                    a.extend(onehot(ac));
                    r.push(self.reward[st][ac]);
                    s2.extend(onehot(next));
                    a2.extend(onehot(self.policy[next]));
                }
            }
        }
        let n = r.len();
        TdBatch {
            states: Tensor::from_rows(n, 2, s),
            actions: Tensor::from_rows(n, 2, a),
            rewards: r,
            costs: vec![],
            next_states: Tensor::from_rows(n, 2, s2),
            next_actions: Tensor::from_rows(n, 2, a2),
            done: vec![false; n],
        }
    }
}

/// Trains a small critic by TD on the tabular chain; returns the max error
/// against the analytic values and the number of updates used.
pub fn tabular_critic_error(seed: u64, max_updates: usize) -> Result<(f64, usize)> {
    let mdp = TabularMdp::default();
    let truth = mdp.analytic_q();
    let batch = mdp.batch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut critic = CentralCritic::<f64>::new(2, 2, 0, &[32], Activation::Tanh, &mut rng);
    let mut opt = AdamState::new(&critic.net().params(), AdamConfig::with_lr(3e-3));
    let states = Tensor::from_rows(4, 2, vec![1., 0., 1., 0., 0., 1., 0., 1.]);
    let actions = Tensor::from_rows(4, 2, vec![1., 0., 0., 1., 1., 0., 0., 1.]);
    let error = |c: &CentralCritic<f64>| -> Result<f64> {
        let q = c.q_batch(&states, &actions, None, false)?;
        Ok((0..4).map(|k| (q.data()[k] - truth[k / 2][k % 2]).abs()).fold(0.0, f64::max))
    };
    for u in 1..=max_updates {
        let loss = critic.reward_td_loss(&batch, mdp.gamma)?;
        opt.step(critic.net_mut().params_mut(), &loss.grads)?;
        critic.soft_update(0.05)?;
        if u % 500 == 0 {
            let err = error(&critic)?;
            if err <= 1e-3 {
                return Ok((err, u));
            }
        }
    }
    Ok((error(&critic)?, max_updates))
}

/// Criterion 5: TD on a one-hot MDP reaches the linear-solve `Q`.
pub fn check_tabular_critic(seed: u64) -> Result<CheckOutcome> {
    timed(5, "tabular critic oracle", 60, || {
        let (err, used) = tabular_critic_error(seed, 50_000)?;
        Ok((
            err <= 1e-2,
            format!("max |Q − Q*| = {err:.2e} after {used} updates"),
            "1e-2 within 50000 updates".into(),
        ))
    })
}

/// `−(a − 0.5)²` summed over action coordinates, independent of the state.
#[derive(Clone, Copy, Debug)]
pub struct BanditValue {
    pub optimum: f64,
}

impl ActionValue<f64> for BanditValue {
    fn record_q(&self, tape: &mut Tape<f64>, _states: &Tensor<f64>, actions: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let shifted = tape.offset(actions, -self.optimum);
        let sq = tape.square(shifted);
        let s = tape.row_sum(sq);
        Ok(tape.scale(s, -1.0))
    }
}

fn small_policy(mode: BaseMode, lambda: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<DecomPolicy<f64>> {
    DecomPolicy::new(
        PolicyConfig {
            obs_dim: 3,
            action_dim: 2,
            action_low: -1.0,
            action_high: 1.0,
            neighbors: env::fully_connected(n),
            hidden: vec![8],
            hidden_activation: Activation::Tanh,
            base_mode: mode,
            variant: Variant::A,
            lambda,
        },
        rng,
    )
}

fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

fn vector_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Relative error of the base-policy surrogate gradient against central
/// differences of the surrogate value, on a frozen random batch.
pub fn surrogate_gradient_error(mode: BaseMode, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let mut policy = small_policy(mode, 0.5, n, &mut rng)?;
    let critic = CentralCritic::<f64>::new(4, 2 * n, 0, &[8], Activation::Tanh, &mut rng);
    let rows = 16;
    let obs: Vec<Tensor<f64>> = (0..n).map(|_| random_tensor(rows, 3, -1.0, 1.0, &mut rng)).collect();
    let base: Vec<Tensor<f64>> = (0..n).map(|_| random_tensor(rows, 2, -0.6, 0.6, &mut rng)).collect();
    let batch = PolicyBatch {
        states: random_tensor(rows, 4, -1.0, 1.0, &mut rng),
        obs,
        base,
    };
    // Frozen noise and weights, so the surrogate is a fixed function of θ.
    let (noise, weights) = match mode {
        BaseMode::Deterministic => (None, None),
        BaseMode::Gaussian => {
            let xi = policy.solve_noise(&batch.obs, &batch.base)?;
            let mut tape = Tape::new();
            let rec = policy.record(&mut tape, &batch.obs, BaseSource::Noise { noise: &xi, samples: &batch.base }, false, false)?;
            let q = critic.record_q(&mut tape, &batch.states, rec.joint)?;
            let w = tape.value(q).clone();
            (Some(xi), Some(w))
        }
    };
    let value = |p: &DecomPolicy<f64>| -> Result<crate::trainer::Surrogate<f64>> {
        match (&noise, &weights) {
            (Some(xi), Some(w)) => stochastic_surrogate(p, &critic, &batch, xi, Some(w)),
            _ => deterministic_surrogate(p, &critic, &batch),
        }
    };
    let analytic: Vec<f64> = value(&policy)?
        .grads
        .iter()
        .flatten()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let h = 1e-6;
    let mut fd = Vec::with_capacity(analytic.len());
    for i in 0..n {
        let theta = policy.base_nets()[i].flatten();
        for k in 0..theta.len() {
            let mut probe = theta.clone();
            probe[k] += h;
            policy.base_nets_mut()[i].assign_flat(&probe)?;
            let plus = value(&policy)?.value;
            probe[k] = theta[k] - h;
            policy.base_nets_mut()[i].assign_flat(&probe)?;
            let minus = value(&policy)?.value;
            policy.base_nets_mut()[i].assign_flat(&theta)?;
            fd.push((plus - minus) / (2.0 * h));
        }
    }
    Ok(vector_rel_error(&analytic, &fd))
}

/// Trains a one-agent policy on the bandit `−(a − 0.5)²`; returns the final
/// noise-free action.
pub fn bandit_optimum(mode: BaseMode, seed: u64, steps: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = DecomPolicy::new(
        PolicyConfig {
            obs_dim: 1,
            action_dim: 1,
            action_low: -1.0,
            action_high: 1.0,
            neighbors: vec![vec![]],
            hidden: vec![8],
            hidden_activation: Activation::Tanh,
            base_mode: mode,
            variant: Variant::A,
            lambda: 0.0,
        },
        &mut rng,
    )?;
    let q = BanditValue { optimum: 0.5 };
    let mut opt = AdamState::new(&policy.base_nets()[0].params(), AdamConfig::with_lr(0.01));
    let rows = 32;
    let obs = vec![Tensor::from_rows(rows, 1, vec![1.0; rows])];
    let states = Tensor::from_rows(rows, 1, vec![0.0; rows]);
    for _ in 0..steps {
        let sur = match mode {
            BaseMode::Deterministic => {
                let batch = PolicyBatch {
                    states: states.clone(),
                    obs: obs.clone(),
                    base: vec![Tensor::zeros(rows, 1)],
                };
                deterministic_surrogate(&policy, &q, &batch)?
            }
            BaseMode::Gaussian => {
                let samples = policy.base_batch(&obs, Some(&mut rng))?;
                let batch = PolicyBatch {
                    states: states.clone(),
                    obs: obs.clone(),
                    base: samples,
                };
                let xi = policy.solve_noise(&batch.obs, &batch.base)?;
                stochastic_surrogate(&policy, &q, &batch, &xi, None)?
            }
        };
        let neg: Vec<Tensor<f64>> = sur.grads[0].iter().map(|g| g.scale(-1.0)).collect();
        opt.step(policy.base_nets_mut()[0].params_mut(), &neg)?;
    }
    Ok(policy.act_batch(&[Tensor::row(vec![1.0])], false)?.item())
}

/// Criterion 6: base-policy gradients in both modes, plus a bandit.
pub fn check_surrogate_gradients(seed: u64) -> Result<CheckOutcome> {
    timed(6, "base policy gradient", 120, || {
        let det = surrogate_gradient_error(BaseMode::Deterministic, seed)?;
        let sto = surrogate_gradient_error(BaseMode::Gaussian, seed)?;
        let a_det = bandit_optimum(BaseMode::Deterministic, seed, 5000)?;
        let a_sto = bandit_optimum(BaseMode::Gaussian, seed, 5000)?;
        let ok = det <= 1e-3 && sto <= 1e-3 && (a_det - 0.5).abs() <= 0.02 && (a_sto - 0.5).abs() <= 0.02;
        Ok((
            ok,
            format!("rel err det {det:.1e}, stoch {sto:.1e}; bandit a = {a_det:.4} (det), {a_sto:.4} (stoch)"),
            "rel err 1e-3; a = 0.5 ± 0.02 within 5000 steps".into(),
        ))
    })
}

/// One-step two-agent game on a grid, solved by exhaustive search.
#[derive(Clone, Debug)]
pub struct GridGame {
    /// Row-major `[41 × 41]` payoffs indexed by `(a_1, a_2)` grid positions.
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub bound: f64,
}

pub const GRID_POINTS: usize = 41;

pub fn grid_value(k: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (GRID_POINTS - 1) as f64
}

/// Best `(reward, cost)` among feasible cells, or `None` when none is feasible.
fn best_feasible(cells: impl Iterator<Item = (f64, f64)>, bound: f64) -> Option<(f64, f64)> {
    cells
        .filter(|&(_, c)| c <= bound)
        .fold(None, |best: Option<(f64, f64)>, (r, c)| match best {
            Some((br, bc)) if br > r || (br == r && bc <= c) => Some((br, bc)),
            _ => Some((r, c)),
        })
}

impl GridGame {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let (p1, p2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let coupling = rng.random_range(-1.0..1.0);
        let (c1, c2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut reward = Vec::with_capacity(GRID_POINTS * GRID_POINTS);
        let mut cost = Vec::with_capacity(GRID_POINTS * GRID_POINTS);
        for i in 0..GRID_POINTS {
            for k in 0..GRID_POINTS {
                let (a1, a2) = (grid_value(i), grid_value(k));
                reward.push(-(a1 - p1).powi(2) - (a2 - p2).powi(2) + coupling * a1 * a2);
                cost.push((a1 - c1).powi(2) + (a2 - c2).powi(2));
            }
        }
        let sorted = {
            let mut c = cost.clone();
            c.sort_by(f64::total_cmp);
            c
        };
        let bound = sorted[rng.random_range(GRID_POINTS..sorted.len() / 2)];
        Self { reward, cost, bound }
    }

    fn at(&self, i: usize, k: usize) -> (f64, f64) {
        (self.reward[i * GRID_POINTS + k], self.cost[i * GRID_POINTS + k])
    }

    /// Unrestricted deterministic joint actions.
    pub fn joint_optimum(&self) -> Option<(f64, f64)> {
        best_feasible(
            (0..GRID_POINTS).flat_map(|i| (0..GRID_POINTS).map(move |k| (i, k))).map(|(i, k)| self.at(i, k)),
            self.bound,
        )
    }

    /// Decomposed policies with `λ = 1`: base grid points and perturbation
    /// tables over the same grid; the executed action is the clamped sum
    /// snapped to the grid. In a one-step game only the table entry at the
    /// realized base pair matters, so the search runs over `(b, g)` pairs.
    pub fn decomposed_optimum(&self) -> Option<(f64, f64)> {
        let snap = |x: f64| {
            let x = x.clamp(-1.0, 1.0);
            (((x + 1.0) / 2.0) * (GRID_POINTS - 1) as f64).round() as usize
        };
        let lambda = 1.0;
        let mut cells = Vec::new();
        for b1 in 0..GRID_POINTS {
            for b2 in 0..GRID_POINTS {
                for g1 in 0..GRID_POINTS {
                    let a1 = snap(grid_value(b1) + lambda * grid_value(g1));
                    for g2 in 0..GRID_POINTS {
                        let a2 = snap(grid_value(b2) + lambda * grid_value(g2));
                        cells.push(self.at(a1, a2));
                    }
                }
            }
        }
        best_feasible(cells.into_iter(), self.bound)
    }
}

/// Criterion 7: decomposed policies lose nothing against joint actions.
pub fn check_representation(seed: u64, games: usize) -> Result<CheckOutcome> {
    timed(7, "decomposition brute force", 60, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_r = 0.0f64;
        let mut worst_c = 0.0f64;
        let mut mismatched = 0;
        for _ in 0..games {
            let game = GridGame::random(&mut rng);
            match (game.joint_optimum(), game.decomposed_optimum()) {
                (Some((jr, jc)), Some((dr, dc))) => {
                    worst_r = worst_r.max((jr - dr).abs());
                    worst_c = worst_c.max((jc - dc).abs());
                }
                (None, None) => {}
                _ => mismatched += 1,
            }
        }
        // One grid cell of value: the largest change of either payoff between neighbouring cells.
        let cell = 0.2;
        Ok((
            mismatched == 0 && worst_r <= cell && worst_c <= cell,
            format!("{games} games, max |ΔR| = {worst_r:.2e}, max |ΔC| = {worst_c:.2e}, feasibility mismatches {mismatched}"),
            format!("one grid cell ({cell})"),
        ))
    })
}

/// Criterion 9: arity of the perturbation inputs and the `λ = 0` identity.
pub fn check_variant_arity(seed: u64) -> Result<CheckOutcome> {
    timed(9, "perturbation arity", 10, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let make = |variant: Variant, lambda: f64, rng: &mut ChaCha8Rng| {
            DecomPolicy::<f64>::new(
                PolicyConfig {
                    obs_dim: 3,
                    action_dim: 2,
                    action_low: -1.0,
                    action_high: 1.0,
                    neighbors: env::fully_connected(n),
                    hidden: vec![8],
                    hidden_activation: Activation::LeakyRelu,
                    base_mode: BaseMode::Deterministic,
                    variant,
                    lambda,
                },
                rng,
            )
        };
        let critic = CentralCritic::<f64>::new(4, 2 * n, 0, &[16], Activation::Tanh, &mut rng);
        let rows = 8;
        let batch = PolicyBatch {
            states: random_tensor(rows, 4, -1.0, 1.0, &mut rng),
            obs: (0..n).map(|_| random_tensor(rows, 3, -1.0, 1.0, &mut rng)).collect(),
            base: (0..n).map(|_| Tensor::zeros(rows, 2)).collect(),
        };

        let pn = make(Variant::N, 1.0, &mut rng)?;
        let mn = gradient_aggregation_check(&pn, &critic, &batch)?;
        let n_cross = (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| mn[i][k])
            .fold(0.0, f64::max);
        let pa = make(Variant::A, 1.0, &mut rng)?;
        let ma = gradient_aggregation_check(&pa, &critic, &batch)?;
        let a_cross = (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| ma[i][k])
            .fold(f64::INFINITY, f64::min);

        // Direct sensitivity of a_0 to neighbor base actions.
        let o: Vec<f64> = vec![0.1, -0.3, 0.7];
        let b0 = vec![0.2, -0.1];
        let nb1 = vec![vec![0.5, 0.5], vec![-0.5, 0.1]];
        let nb2 = vec![vec![-0.9, 0.3], vec![0.4, -0.8]];
        let n_same = pn.compose(0, &o, &b0, &nb1)?.action == pn.compose(0, &o, &b0, &nb2)?.action;
        let a_diff = pa.compose(0, &o, &b0, &nb1)?.action != pa.compose(0, &o, &b0, &nb2)?.action;

        let mut identity_err = 0.0f64;
        for variant in [Variant::A, Variant::N, Variant::I] {
            let p0 = make(variant, 0.0, &mut rng)?;
            for _ in 0..100 {
                let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
                let a = p0.compose(0, &o, &b, &nb1)?.action;
                for (x, y) in a.iter().zip(&b) {
                    identity_err = identity_err.max((x - y.clamp(-1.0, 1.0)).abs());
                }
            }
        }
        let ok = n_cross == 0.0 && a_cross > 0.0 && n_same && a_diff && identity_err == 0.0;
        Ok((
            ok,
            format!(
                "N cross-grad max {n_cross:.1e}, A cross-grad min {a_cross:.1e}, N ignores b_j: {n_same}, A reacts: {a_diff}, λ=0 err {identity_err:.1e}"
            ),
            "N cross = 0, A cross > 0, λ=0 gives clamp(b)".into(),
        ))
    })
}

/// The 50-case exponent table: `(p_reward_critic, p_cost_critic, p_base, p_perturb)`,
/// `None` for a constant schedule. Roughly balanced between the three classes.
pub fn schedule_cases() -> Vec<[Option<f64>; 4]> {
    let admissible = [0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0];
    let outside = [0.3, 0.4, 0.5, 1.05, 1.2, 2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let ordered = |rng: &mut ChaCha8Rng| {
        // base > perturb > both critics, all admissible
        let mut idx: Vec<usize> = (0..admissible.len()).collect();
        let mut pick = |rng: &mut ChaCha8Rng| idx.swap_remove(rng.random_range(0..idx.len()));
        let mut three = [pick(rng), pick(rng), pick(rng)];
        three.sort_unstable();
        let critic2 = admissible[rng.random_range(0..=three[0])];
        [Some(admissible[three[0]]), Some(critic2), Some(admissible[three[2]]), Some(admissible[three[1]])]
    };
    let mut cases = Vec::with_capacity(50);
    for _ in 0..17 {
        cases.push(ordered(&mut rng));
    }
    for _ in 0..16 {
        let mut c = ordered(&mut rng);
        for p in c.iter_mut() {
            if rng.random_bool(0.5) {
                *p = None;
            }
        }
        if c.iter().all(Option::is_some) {
            c[rng.random_range(0..4)] = None;
        }
        cases.push(c);
    }
    for k in 0..17 {
        let mut c = ordered(&mut rng);
        match k % 3 {
            0 => c[rng.random_range(0..4)] = Some(outside[rng.random_range(0..outside.len())]),
            1 => c.swap(2, 3),
            _ => {
                let j = rng.random_range(0..2);
                c[j] = c[3].map(|p| (p + 0.05f64).min(1.0));
            }
        }
        if k % 4 == 0 {
            c[rng.random_range(0..4)] = None;
        }
        cases.push(c);
    }
    cases
}

/// Class expected from the rules, written independently of the validator.
pub fn expected_schedule_class(c: &[Option<f64>; 4]) -> ScheduleClass {
    let [rc, cc, base, perturb] = *c;
    let rm = |p: Option<f64>| p.is_none_or(|p| p > 0.5 && p <= 1.0);
    let slower = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => a > b,
        _ => true,
    };
    let violating = !(rm(rc) && rm(cc) && rm(base) && rm(perturb))
        || !slower(base, perturb)
        || !slower(perturb, rc)
        || !slower(perturb, cc);
    if violating {
        ScheduleClass::Violating
    } else if c.iter().any(Option::is_none) {
        ScheduleClass::PracticalNonConforming
    } else {
        ScheduleClass::Conforming
    }
}

/// Criterion 10: schedule classification on the 50-case table.
pub fn check_schedules() -> Result<CheckOutcome> {
    timed(10, "schedule validator", 1, || {
        let to = |p: Option<f64>| match p {
            Some(p) => LrSchedule::Polynomial {
                scale: 1e-3,
                offset: 1.0,
                power: p,
            },
            None => LrSchedule::constant(1e-3),
        };
        let cases = schedule_cases();
        let mut wrong = 0;
        let mut counts = [0usize; 3];
        for c in &cases {
            let s = LrSchedules {
                reward_critic: to(c[0]),
                cost_critic: to(c[1]),
                base: to(c[2]),
                perturb: to(c[3]),
            };
            let got = validate_lr_schedule(&s)?.class();
            let want = expected_schedule_class(c);
            counts[want as usize] += 1;
            if got != want {
                wrong += 1;
            }
        }
        Ok((
            wrong == 0,
            format!(
                "{wrong}/{} misclassified ({} conforming, {} practical, {} violating)",
                cases.len(),
                counts[0],
                counts[1],
                counts[2]
            ),
            "0 misclassified".into(),
        ))
    })
}

/// Every check except the end-to-end run.
pub fn run_quick_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_autodiff(seed, false)?,
        check_clipping(seed)?,
        check_inner_convergence(seed)?,
        check_bvf_identity(seed)?,
        check_tabular_critic(seed)?,
        check_surrogate_gradients(seed)?,
        check_representation(seed, 20)?,
        check_variant_arity(seed)?,
        check_schedules()?,
    ])
}
