//! Exact-loss convergence check for the clipped projected inner loop on
//! synthetic smooth problems with a known optimum.

use std::io::Write;
use std::path::Path;

use super::{clipped_projected_step, select_worst_constraint, ViolationObjective};
use crate::error::{Error, Result};

/// A differentiable, non-negative loss over a flat parameter vector.
pub trait SmoothLoss: Send + Sync {
    fn value(&self, phi: &[f64]) -> f64;

    fn gradient(&self, phi: &[f64]) -> Vec<f64>;

    /// Lipschitz constant of the gradient, `None` when the loss is not smooth.
    fn smoothness(&self) -> Option<f64>;
}

/// `½(φ − c)ᵀA(φ − c) + offset` with symmetric positive semi-definite `A` (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
    pub offset: f64,
    /// Largest eigenvalue of `A`, supplied by the caller.
    pub max_eigenvalue: f64,
}

impl Quadratic {
    pub fn new(curvature: Vec<f64>, center: Vec<f64>, offset: f64, max_eigenvalue: f64) -> Result<Self> {
        let d = center.len();
        if curvature.len() != d * d {
            return Err(Error::ShapeMismatch {
                context: "quadratic curvature",
                expected: vec![d, d],
                found: vec![curvature.len()],
            });
        }
        for i in 0..d {
            for k in 0..i {
                if (curvature[i * d + k] - curvature[k * d + i]).abs() > 1e-12 {
                    return Err(Error::invalid("quadratic curvature must be symmetric"));
                }
            }
        }
        if offset < 0.0 || max_eigenvalue < 0.0 {
            return Err(Error::invalid("quadratic offset and eigenvalue bound must be non-negative"));
        }
        Ok(Self {
            curvature,
            center,
            offset,
            max_eigenvalue,
        })
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        (0..d)
            .map(|i| (0..d).map(|k| self.curvature[i * d + k] * v[k]).sum())
            .collect()
    }

    fn shifted(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().zip(&self.center).map(|(p, c)| p - c).collect()
    }
}

impl SmoothLoss for Quadratic {
    fn value(&self, phi: &[f64]) -> f64 {
        let x = self.shifted(phi);
        let ax = self.apply(&x);
        0.5 * x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>() + self.offset
    }

    fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        self.apply(&self.shifted(phi))
    }

    fn smoothness(&self) -> Option<f64> {
        Some(self.max_eigenvalue)
    }
}

/// `max(0, aᵀφ − b)²`, smooth with constant `2‖a‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct SquaredHinge {
    pub normal: Vec<f64>,
    pub level: f64,
}

impl SquaredHinge {
    fn slack(&self, phi: &[f64]) -> f64 {
        let s: f64 = self.normal.iter().zip(phi).map(|(a, p)| a * p).sum();
        (s - self.level).max(0.0)
    }
}

impl SmoothLoss for SquaredHinge {
    fn value(&self, phi: &[f64]) -> f64 {
        self.slack(phi).powi(2)
    }

    fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        let h = self.slack(phi);
        self.normal.iter().map(|a| 2.0 * h * a).collect()
    }

    fn smoothness(&self) -> Option<f64> {
        Some(2.0 * self.normal.iter().map(|a| a * a).sum::<f64>())
    }
}

/// Losses over a box with a known min-max optimum.
pub struct SmoothLossProblem {
    losses: Vec<Box<dyn SmoothLoss>>,
    half_width: f64,
    optimum: Vec<f64>,
    smoothness: Vec<f64>,
}

impl std::fmt::Debug for SmoothLossProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SmoothLossProblem")
            .field("m", &self.losses.len())
            .field("half_width", &self.half_width)
            .field("optimum", &self.optimum)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

impl SmoothLossProblem {
    /// `optimum` must minimise `max_j L_j` over the box; it is the reference point
    /// for distances and for the floor `C = max_j L_j(optimum)`.
    pub fn new(losses: Vec<Box<dyn SmoothLoss>>, half_width: f64, optimum: Vec<f64>) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::invalid("a problem needs at least one loss"));
        }
        if !(half_width > 0.0) {
            return Err(Error::invalid("box half-width must be positive"));
        }
        if optimum.iter().any(|v| v.abs() > half_width) {
            return Err(Error::invalid("optimum lies outside the box"));
        }
        let mut smoothness = Vec::with_capacity(losses.len());
        for (j, l) in losses.iter().enumerate() {
            match l.smoothness() {
                Some(s) if s.is_finite() && s >= 0.0 => smoothness.push(s),
                _ => return Err(Error::invalid(format!("loss {j} is not smooth"))),
            }
            if l.gradient(&optimum).len() != optimum.len() {
                return Err(Error::invalid(format!("loss {j} has the wrong dimension")));
            }
            if !(l.value(&optimum) >= 0.0) {
                return Err(Error::invalid(format!("loss {j} is negative at the optimum")));
            }
        }
        Ok(Self {
            losses,
            half_width,
            optimum,
            smoothness,
        })
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    pub fn cost_count(&self) -> usize {
        self.losses.len()
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn optimum(&self) -> &[f64] {
        &self.optimum
    }

    pub fn max_smoothness(&self) -> f64 {
        self.smoothness.iter().cloned().fold(0.0, f64::max)
    }

    /// `C = min_φ max_j L_j(φ)`.
    pub fn floor(&self) -> f64 {
        self.values(&self.optimum).into_iter().fold(f64::MIN, f64::max)
    }

    pub fn values(&self, phi: &[f64]) -> Vec<f64> {
        self.losses.iter().map(|l| l.value(phi)).collect()
    }

    pub fn loss(&self, j: usize) -> &dyn SmoothLoss {
        self.losses[j].as_ref()
    }
}

impl ViolationObjective<f64> for SmoothLossProblem {
    fn dim(&self) -> usize {
        self.optimum.len()
    }

    fn losses(&mut self, phi: &[f64]) -> Result<Vec<f64>> {
        Ok(self.values(phi))
    }

    fn gradient(&mut self, phi: &[f64], j: usize) -> Result<Vec<f64>> {
        self.losses
            .get(j)
            .map(|l| l.gradient(phi))
            .ok_or_else(|| Error::invalid(format!("no loss {j}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarnessOptions {
    pub step_size: f64,
    pub clip_norm: f64,
    pub epsilon: f64,
    /// Hard cap on iterations while waiting for entry.
    pub max_iterations: usize,
    /// Iterations run past the entry step before reading the terminal iterate.
    pub extra_iterations: usize,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            clip_norm: 1.0,
            epsilon: 1e-2,
            max_iterations: 2_000_000,
            extra_iterations: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub iteration: usize,
    pub worst: usize,
    pub losses: Vec<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<ConvergenceRow>,
    /// First iteration whose worst loss lies within the region, if any.
    pub entry: Option<usize>,
    /// `‖φ₀ − φ*‖² / (2τε)`.
    pub entry_bound: f64,
    pub floor: f64,
    /// `min(1, G/‖∇L_{j*}‖)` at the entry iterate.
    pub f_entry: f64,
    /// Same quantity at the terminal iterate.
    pub f_terminal: f64,
    pub width_entry: f64,
    pub width_terminal: f64,
    pub terminal_losses: Vec<f64>,
    pub terminal_phi: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn entry_within_bound(&self) -> bool {
        self.entry.is_some_and(|h| h as f64 <= self.entry_bound)
    }

    /// Every terminal loss at most `C + width`, and the worst one at least `C`.
    fn region_holds(&self, width: f64) -> bool {
        let top = self.terminal_losses.iter().cloned().fold(f64::MIN, f64::max);
        self.entry.is_some()
            && top >= self.floor - 1e-12
            && self.terminal_losses.iter().all(|&l| l <= self.floor + width)
    }

    pub fn terminal_region_holds_entry_f(&self) -> bool {
        self.region_holds(self.width_entry)
    }

    pub fn terminal_region_holds_terminal_f(&self) -> bool {
        self.region_holds(self.width_terminal)
    }

    pub fn passed(&self) -> bool {
        self.entry_within_bound() && self.terminal_region_holds_entry_f() && self.terminal_region_holds_terminal_f()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let m = self.terminal_losses.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string(), "j_star".to_string()];
        header.extend((1..=m).map(|j| format!("loss_{j}")));
        header.extend(["grad_norm", "clipped", "dist_to_opt"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.iteration.to_string(), (r.worst + 1).to_string()];
            rec.extend(r.losses.iter().map(|l| l.to_string()));
            rec.push(r.grad_norm.to_string());
            rec.push(u8::from(r.clipped).to_string());
            rec.push(r.distance.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Runs the exact-loss inner loop from `phi0` until the worst loss enters
/// `[C, C + (2ε + τG²)/(2F)]` with `F` taken at that iterate, then keeps going for
/// `extra_iterations` more steps and records the terminal iterate.
pub fn convergence_harness(problem: &SmoothLossProblem, phi0: &[f64], opts: &HarnessOptions) -> Result<ConvergenceTrace> {
    let HarnessOptions {
        step_size: tau,
        clip_norm: g,
        epsilon: eps,
        ..
    } = *opts;
    if phi0.len() != problem.dim() {
        return Err(Error::ShapeMismatch {
            context: "harness start",
            expected: vec![problem.dim()],
            found: vec![phi0.len()],
        });
    }
    if !(tau > 0.0 && g > 0.0 && eps > 0.0) {
        return Err(Error::invalid("step size, clip norm and epsilon must be positive"));
    }
    if tau * problem.max_smoothness() >= 1.0 {
        return Err(Error::invalid("step size too large for the smoothness constant"));
    }
    if phi0.iter().any(|v| v.abs() > problem.half_width()) {
        return Err(Error::invalid("start point lies outside the box"));
    }

    let floor = problem.floor();
    let optimum = problem.optimum();
    let slack = 2.0 * eps + tau * g * g;
    let entry_bound = distance(phi0, optimum).powi(2) / (2.0 * tau * eps);

    let mut rows = Vec::new();
    let mut phi = phi0.to_vec();
    let mut entry: Option<(usize, f64)> = None;
    let mut w = 0usize;
    loop {
        let losses = problem.values(&phi);
        let worst = select_worst_constraint(&losses)?;
        let grad = problem.loss(worst).gradient(&phi);
        let gn = norm(&grad);
        let f = if gn > g { g / gn } else { 1.0 };
        let finished = match entry {
            Some((h, _)) => w >= h + opts.extra_iterations,
            None => {
                if losses[worst] - floor <= slack / (2.0 * f) {
                    entry = Some((w, f));
                    opts.extra_iterations == 0
                } else {
                    false
                }
            }
        };
        if finished {
            let (h, f_entry) = entry.expect("entry recorded before finishing");
            rows.push(ConvergenceRow {
                iteration: w,
                worst,
                losses: losses.clone(),
                grad_norm: gn,
                clipped: gn > g,
                distance: distance(&phi, optimum),
            });
            return Ok(ConvergenceTrace {
                rows,
                entry: Some(h),
                entry_bound,
                floor,
                f_entry,
                f_terminal: f,
                width_entry: slack / (2.0 * f_entry),
                width_terminal: slack / (2.0 * f),
                terminal_losses: losses,
                terminal_phi: phi,
            });
        }
        if w >= opts.max_iterations {
            return Ok(ConvergenceTrace {
                rows,
                entry: None,
                entry_bound,
                floor,
                f_entry: f64::NAN,
                f_terminal: f,
                width_entry: f64::NAN,
                width_terminal: slack / (2.0 * f),
                terminal_losses: losses,
                terminal_phi: phi,
            });
        }
        let step = clipped_projected_step(&phi, &grad, tau, g, problem.half_width())?;
        rows.push(ConvergenceRow {
            iteration: w,
            worst,
            losses,
            grad_norm: step.grad_norm,
            clipped: step.clipped,
            distance: distance(&phi, optimum),
        });
        phi = step.phi;
        w += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Kinked;

    impl SmoothLoss for Kinked {
        fn value(&self, phi: &[f64]) -> f64 {
            phi[0].abs()
        }
        fn gradient(&self, phi: &[f64]) -> Vec<f64> {
            vec![phi[0].signum()]
        }
        fn smoothness(&self) -> Option<f64> {
            None
        }
    }

    fn parabola(center: f64) -> Box<dyn SmoothLoss> {
        // (φ − c)² = ½·2·(φ − c)².
        Box::new(Quadratic::new(vec![2.0], vec![center], 0.0, 2.0).unwrap())
    }

    #[test]
    fn non_smooth_losses_are_rejected() {
        assert!(SmoothLossProblem::new(vec![Box::new(Kinked)], 5.0, vec![0.0]).is_err());
    }

    #[test]
    fn one_dimensional_parabola() {
        let p = SmoothLossProblem::new(vec![parabola(2.0)], 5.0, vec![2.0]).unwrap();
        let opts = HarnessOptions {
            step_size: 0.01,
            clip_norm: 10.0,
            epsilon: 0.01,
            ..HarnessOptions::default()
        };
        let t = convergence_harness(&p, &[0.0], &opts).unwrap();
        assert!((t.entry_bound - 20_000.0).abs() < 1e-9);
        // Unclipped recursion φ_w = 2 − 2·0.98^w; width (0.02 + 1)/2 = 0.51 is first met at w = 51.
        assert_eq!(t.entry, Some(51));
        assert!(t.passed());
    }

    #[test]
    fn start_at_optimum_enters_immediately() {
        let p = SmoothLossProblem::new(vec![parabola(1.0)], 5.0, vec![1.0]).unwrap();
        let t = convergence_harness(&p, &[1.0], &HarnessOptions::default()).unwrap();
        assert_eq!(t.entry, Some(0));
        assert!(t.passed());
    }

    #[test]
    fn csv_has_one_loss_column_per_cost() {
        let p = SmoothLossProblem::new(vec![parabola(1.0), parabola(-1.0)], 5.0, vec![0.0]).unwrap();
        let t = convergence_harness(
            &p,
            &[2.0],
            &HarnessOptions {
                extra_iterations: 3,
                ..HarnessOptions::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,j_star,loss_1,loss_2,grad_norm,clipped,dist_to_opt\n"));
        assert_eq!(text.lines().count(), t.rows.len() + 1);
    }
}
