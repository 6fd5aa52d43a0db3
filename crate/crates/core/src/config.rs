//! Experiment configuration: TOML files, dotted overrides, validation and presets.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{self, CdsnParams, CtcParams, EnvKind};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::policy::{BaseMode, Variant};
use crate::trainer::schedule::{validate_lr_schedule, LrSchedule, LrSchedules, TargetRate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoKind {
    DecomA,
    DecomN,
    DecomI,
    /// Fixed penalty on the summed costs.
    Fp,
    /// Lagrangian relaxation with learned multipliers.
    Lagrangian,
}

impl AlgoKind {
    pub fn decom_variant(self) -> Option<Variant> {
        match self {
            AlgoKind::DecomA => Some(Variant::A),
            AlgoKind::DecomN => Some(Variant::N),
            AlgoKind::DecomI => Some(Variant::I),
            AlgoKind::Fp | AlgoKind::Lagrangian => None,
        }
    }

    pub fn uses_constraint_solver(self) -> bool {
        self.decom_variant().is_some()
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgoKind::DecomA => "decom-a",
            AlgoKind::DecomN => "decom-n",
            AlgoKind::DecomI => "decom-i",
            AlgoKind::Fp => "fp",
            AlgoKind::Lagrangian => "lagrangian",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiOptimizer {
    /// Plain clipped, projected gradient steps.
    Sgd,
    /// Adam on the clipped gradient, followed by the box projection.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: EnvKind,
    /// One bound per cost stream.
    pub bounds: Vec<f64>,
    #[serde(default)]
    pub ctc: CtcParams,
    #[serde(default)]
    pub cdsn: CdsnParams,
}

impl EnvSection {
    pub fn build(&self) -> Result<Box<dyn env::Ccmg>> {
        env::build(self.name, &self.ctc, &self.cdsn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRates {
    pub reward_critic: TargetRate,
    pub cost_critic: TargetRate,
    pub base: TargetRate,
    pub perturb: TargetRate,
    /// Fraction of the episodes over which decaying rates reach their end value.
    pub decay_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSection {
    /// OU mean-reversion rate.
    pub ou_rate: f64,
    /// OU volatility on the base actions, in units of the action half-width.
    pub base_volatility: f64,
    /// OU volatility on the perturbed actions; zero disables it.
    pub perturb_volatility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    pub variant: AlgoKind,
    /// Penalty weight for the fixed-penalty baseline.
    #[serde(default)]
    pub fp_weight: f64,
    /// Multiplier step size for the Lagrangian baseline.
    #[serde(default = "default_multiplier_rate")]
    pub multiplier_rate: f64,
    pub lambda: f64,
    pub base_mode: BaseMode,
    pub inner_iterations: usize,
    pub clip_norm: f64,
    pub box_half_width: f64,
    pub phi_optimizer: PhiOptimizer,
    pub gamma: f64,
    /// Discount used for the cost critics; 1 enables the per-step estimator.
    pub cost_gamma: f64,
    pub per_step_estimator: bool,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Train once every this many episodes.
    pub train_every: usize,
    /// Update iterations per training point.
    pub updates_per_train: usize,
    pub shared_cost_critic: bool,
    pub hidden: Vec<usize>,
    pub actor_activation: Activation,
    pub critic_activation: Activation,
    pub lr: LrSchedules,
    pub targets: TargetRates,
    pub exploration: ExplorationSection,
}

fn default_multiplier_rate() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub output_dir: String,
    #[serde(default = "yes")]
    pub checkpoints: bool,
    /// Write a per-step CSV of the evaluation episodes at each evaluation point.
    #[serde(default)]
    pub dump_trajectories: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub algo: AlgoSection,
    pub run: RunSection,
}

/// A single validation failure.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn check(issues: &mut Vec<ConfigIssue>, ok: bool, path: &str, message: impl Into<String>) {
    if !ok {
        issues.push(ConfigIssue {
            path: path.to_string(),
            message: message.into(),
        });
    }
}

impl ExperimentConfig {
    /// Defaults for one environment, with the DeCOM-A algorithm.
    pub fn preset(kind: EnvKind) -> Self {
        let ctc_lr = LrSchedules {
            reward_critic: LrSchedule::constant(0.001),
            cost_critic: LrSchedule::constant(0.003),
            base: LrSchedule::constant(0.001),
            perturb: LrSchedule::constant(0.003),
        };
        let ctc_targets = TargetRates {
            reward_critic: TargetRate::constant(0.01),
            cost_critic: TargetRate { start: 0.05, end: 0.01 },
            base: TargetRate::constant(0.01),
            perturb: TargetRate { start: 0.05, end: 0.01 },
            decay_fraction: 0.2,
        };
        let ctc_algo = |lambda: f64, shared: bool| AlgoSection {
            variant: AlgoKind::DecomA,
            fp_weight: 0.0,
            multiplier_rate: default_multiplier_rate(),
            lambda,
            base_mode: BaseMode::Deterministic,
            inner_iterations: 1,
            clip_norm: 0.5,
            box_half_width: 10.0,
            phi_optimizer: PhiOptimizer::Sgd,
            gamma: 0.99,
            cost_gamma: 1.0,
            per_step_estimator: true,
            batch_size: 1024,
            buffer_capacity: 1_000_000,
            train_every: 12,
            updates_per_train: 1,
            shared_cost_critic: shared,
            hidden: vec![64, 64],
            actor_activation: Activation::LeakyRelu,
            critic_activation: Activation::LeakyRelu,
            lr: ctc_lr,
            targets: ctc_targets,
            exploration: ExplorationSection {
                ou_rate: 0.15,
                base_volatility: 0.2,
                perturb_volatility: 0.0,
            },
        };
        let run = |episodes: usize, seeds: u64| RunSection {
            episodes,
            seeds: (0..seeds).collect(),
            eval_interval: 500,
            eval_episodes: 20,
            output_dir: format!("runs/{}", kind.name()),
            checkpoints: true,
            dump_trajectories: false,
        };
        match kind {
            EnvKind::CtcSafe => Self {
                env: EnvSection {
                    name: kind,
                    bounds: vec![0.6, 0.8, 1.0],
                    ctc: CtcParams::default(),
                    cdsn: CdsnParams::default(),
                },
                algo: ctc_algo(1.0, true),
                run: run(100_000, 3),
            },
            EnvKind::CtcFair => Self {
                env: EnvSection {
                    name: kind,
                    bounds: vec![0.0],
                    ctc: CtcParams::default(),
                    cdsn: CdsnParams::default(),
                },
                algo: ctc_algo(0.01, false),
                run: run(100_000, 3),
            },
            EnvKind::Cdsn => {
                let episode_len = CdsnParams::default().episode_len;
                Self {
                    env: EnvSection {
                        name: kind,
                        bounds: vec![20.0],
                        ctc: CtcParams::default(),
                        cdsn: CdsnParams::default(),
                    },
                    algo: AlgoSection {
                        base_mode: BaseMode::Gaussian,
                        batch_size: 10 * episode_len,
                        buffer_capacity: 10 * episode_len,
                        train_every: 10,
                        shared_cost_critic: false,
                        actor_activation: Activation::Elu,
                        critic_activation: Activation::Elu,
                        lr: LrSchedules {
                            reward_critic: LrSchedule::constant(0.0001),
                            cost_critic: LrSchedule::constant(0.0001),
                            base: LrSchedule::constant(0.0005),
                            perturb: LrSchedule::constant(0.0003),
                        },
                        targets: TargetRates {
                            reward_critic: TargetRate::constant(0.05),
                            cost_critic: TargetRate::constant(0.05),
                            base: TargetRate::constant(0.03),
                            perturb: TargetRate::constant(0.01),
                            decay_fraction: 0.2,
                        },
                        exploration: ExplorationSection {
                            ou_rate: 0.15,
                            base_volatility: 0.0,
                            perturb_volatility: 0.2,
                        },
                        ..ctc_algo(1.0, false)
                    },
                    run: run(30_000, 5),
                }
            }
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<config>", e.message().to_string()))
    }

    /// Parses `text`, applies `key.path=value` overrides, then deserialises.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::config("<config>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// Canonical TOML rendering; identical configs give identical bytes.
    pub fn resolved(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn cost_count(&self) -> Result<usize> {
        Ok(self.env.build()?.spec().cost_count)
    }

    /// Every violated precondition, with its field path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let a = &self.algo;
        let r = &self.run;
        match self.env.build() {
            Err(e) => check(&mut out, false, "env", e.to_string()),
            Ok(env) => {
                let m = env.spec().cost_count;
                check(
                    &mut out,
                    self.env.bounds.len() == m,
                    "env.bounds",
                    format!("expected {m} bounds (one per cost), found {}", self.env.bounds.len()),
                );
            }
        }
        check(&mut out, self.env.bounds.iter().all(|d| d.is_finite()), "env.bounds", "bounds must be finite");
        check(&mut out, a.lambda >= 0.0 && a.lambda.is_finite(), "algo.lambda", "must be non-negative");
        check(&mut out, a.fp_weight <= 0.0, "algo.fp_weight", "must be zero or negative");
        check(&mut out, a.multiplier_rate > 0.0, "algo.multiplier_rate", "must be positive");
        check(&mut out, a.inner_iterations >= 1, "algo.inner_iterations", "must be at least 1");
        check(&mut out, a.clip_norm > 0.0, "algo.clip_norm", "must be positive");
        check(&mut out, a.box_half_width > 0.0, "algo.box_half_width", "must be positive");
        check(&mut out, (0.0..=1.0).contains(&a.gamma), "algo.gamma", "must lie in [0, 1]");
        check(&mut out, (0.0..=1.0).contains(&a.cost_gamma), "algo.cost_gamma", "must lie in [0, 1]");
        check(&mut out, a.batch_size >= 1, "algo.batch_size", "must be positive");
        check(&mut out, a.buffer_capacity >= a.batch_size, "algo.buffer_capacity", "must hold at least one batch");
        check(&mut out, a.train_every >= 1, "algo.train_every", "must be positive");
        check(&mut out, a.updates_per_train >= 1, "algo.updates_per_train", "must be positive");
        check(&mut out, !a.hidden.is_empty() && a.hidden.iter().all(|&h| h > 0), "algo.hidden", "needs at least one non-empty layer");
        check(
            &mut out,
            !(a.base_mode == BaseMode::Gaussian && a.exploration.base_volatility > 0.0),
            "algo.exploration.base_volatility",
            "a gaussian base explores by sampling; set this to 0",
        );
        for (name, s) in [
            ("reward_critic", a.lr.reward_critic),
            ("cost_critic", a.lr.cost_critic),
            ("base", a.lr.base),
            ("perturb", a.lr.perturb),
        ] {
            if let Err(e) = s.check() {
                check(&mut out, false, &format!("algo.lr.{name}"), e.to_string());
            }
        }
        if let Err(e) = validate_lr_schedule(&a.lr) {
            check(&mut out, false, "algo.lr", e.to_string());
        }
        for (name, t) in [
            ("reward_critic", a.targets.reward_critic),
            ("cost_critic", a.targets.cost_critic),
            ("base", a.targets.base),
            ("perturb", a.targets.perturb),
        ] {
            if let Err(e) = t.check() {
                check(&mut out, false, &format!("algo.targets.{name}"), e.to_string());
            }
        }
        check(
            &mut out,
            (0.0..=1.0).contains(&a.targets.decay_fraction),
            "algo.targets.decay_fraction",
            "must lie in [0, 1]",
        );
        let ex = &a.exploration;
        check(&mut out, ex.ou_rate >= 0.0, "algo.exploration.ou_rate", "must be non-negative");
        check(&mut out, ex.base_volatility >= 0.0, "algo.exploration.base_volatility", "must be non-negative");
        check(&mut out, ex.perturb_volatility >= 0.0, "algo.exploration.perturb_volatility", "must be non-negative");
        check(&mut out, !r.seeds.is_empty(), "run.seeds", "at least one seed is required");
        check(&mut out, r.eval_interval >= 1, "run.eval_interval", "must be positive");
        check(&mut out, !r.output_dir.is_empty(), "run.output_dir", "must not be empty");
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().into_iter().next() {
            None => Ok(()),
            Some(i) => Err(Error::config(i.path, i.message)),
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and falls
/// back to a plain string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key.path=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{k}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for kind in [EnvKind::CtcSafe, EnvKind::CtcFair, EnvKind::Cdsn] {
            let c = ExperimentConfig::preset(kind);
            assert_eq!(c.issues(), vec![], "{kind:?}");
            let text = c.resolved().unwrap();
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.resolved().unwrap(), text);
        }
        assert_eq!(ExperimentConfig::preset(EnvKind::CtcSafe).env.bounds, vec![0.6, 0.8, 1.0]);
    }

    #[test]
    fn overrides_apply_and_reject_garbage() {
        let text = ExperimentConfig::preset(EnvKind::CtcFair).resolved().unwrap();
        let c = ExperimentConfig::from_toml_with_overrides(
            &text,
            &["algo.lambda=0.5".into(), "run.output_dir=out/x".into(), "algo.variant=fp".into()],
        )
        .unwrap();
        assert_eq!(c.algo.lambda, 0.5);
        assert_eq!(c.run.output_dir, "out/x");
        assert_eq!(c.algo.variant, AlgoKind::Fp);
        assert!(ExperimentConfig::from_toml_with_overrides(&text, &["algo.nope=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides(&text, &["algo.lambda".into()]).is_err());
    }

    #[test]
    fn wrong_bound_count_names_the_field() {
        let mut c = ExperimentConfig::preset(EnvKind::CtcSafe);
        c.env.ctc.n_unsafe = 2;
        c.env.bounds = vec![0.6];
        let issues = c.issues();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "env.bounds");
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "env.bounds"));
    }
}
