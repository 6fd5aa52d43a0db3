//! Constrained cooperative Markov games.
//!
//! Every environment reports a team-average reward and `M` team-average cost
//! streams; per-agent values are exposed alongside so callers can check the
//! averaging.

mod cdsn;
mod ctc;

pub use cdsn::{Cdsn, CdsnParams};
pub use ctc::{Ctc, CtcMode, CtcParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of a game instance.
#[derive(Clone, Debug, PartialEq)]
pub struct CcmgSpec {
    pub n_agents: usize,
    pub cost_count: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: f64,
    pub action_high: f64,
    pub episode_len: usize,
    pub gamma: f64,
    pub neighbors: Vec<Vec<usize>>,
}

impl CcmgSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.cost_count == 0 {
            return Err(Error::invalid("a game needs at least one agent and one cost"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if self.action_low >= self.action_high {
            return Err(Error::invalid("empty action box"));
        }
        if self.neighbors.len() != self.n_agents {
            return Err(Error::invalid("neighbor table does not cover every agent"));
        }
        for (i, ns) in self.neighbors.iter().enumerate() {
            if ns.contains(&i) {
                return Err(Error::invalid(format!("agent {i} lists itself as a neighbor")));
            }
            if ns.iter().any(|&j| j >= self.n_agents) || ns.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("neighbor ids of agent {i} must be sorted and in range")));
            }
        }
        Ok(())
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn joint_action_dim(&self) -> usize {
        self.n_agents * self.action_dim
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.action_high - self.action_low)
    }

    pub fn check_agent(&self, id: usize) -> Result<()> {
        if id >= self.n_agents {
            return Err(Error::InvalidAgent {
                id,
                n_agents: self.n_agents,
            });
        }
        Ok(())
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.action_low, self.action_high)
    }
}

/// Per-agent action vectors, indexed by agent id.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAction(pub Vec<Vec<f64>>);

impl JointAction {
    pub fn zeros(spec: &CcmgSpec) -> Self {
        Self(vec![vec![0.0; spec.action_dim]; spec.n_agents])
    }

    pub fn from_flat(spec: &CcmgSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.joint_action_dim() {
            return Err(Error::ShapeMismatch {
                context: "JointAction::from_flat",
                expected: vec![spec.joint_action_dim()],
                found: vec![flat.len()],
            });
        }
        Ok(Self(flat.chunks(spec.action_dim).map(<[f64]>::to_vec).collect()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.concat()
    }

    /// Checks dimensions and clamps every coordinate into the action box.
    pub fn clamped(&self, spec: &CcmgSpec) -> Result<Self> {
        if self.0.len() != spec.n_agents || self.0.iter().any(|a| a.len() != spec.action_dim) {
            return Err(Error::ShapeMismatch {
                context: "joint action",
                expected: vec![spec.n_agents, spec.action_dim],
                found: vec![self.0.len(), self.0.first().map_or(0, Vec::len)],
            });
        }
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint action"));
        }
        Ok(Self(
            self.0
                .iter()
                .map(|a| a.iter().map(|&v| spec.clamp(v)).collect())
                .collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub team_reward: f64,
    pub team_costs: Vec<f64>,
    pub individual_rewards: Vec<f64>,
    /// `individual_costs[i][j]` is cost `j` of agent `i`.
    pub individual_costs: Vec<Vec<f64>>,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl StepOutcome {
    pub(crate) fn from_individual(
        individual_rewards: Vec<f64>,
        individual_costs: Vec<Vec<f64>>,
        next_state: Vec<f64>,
        done: bool,
    ) -> Self {
        let n = individual_rewards.len() as f64;
        let team_reward = individual_rewards.iter().sum::<f64>() / n;
        let m = individual_costs.first().map_or(0, Vec::len);
        let team_costs = (0..m)
            .map(|j| individual_costs.iter().map(|c| c[j]).sum::<f64>() / n)
            .collect();
        Self {
            team_reward,
            team_costs,
            individual_rewards,
            individual_costs,
            next_state,
            done,
        }
    }
}

/// A constrained cooperative Markov game.
pub trait Ccmg: Send {
    fn name(&self) -> &'static str;

    fn spec(&self) -> &CcmgSpec;

    /// Re-initialises the episode deterministically from `seed`; returns the global state.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Out-of-box actions are clamped; stepping past the
    /// horizon is an error.
    fn step(&mut self, action: &JointAction) -> Result<StepOutcome>;

    fn observe(&self, agent: usize) -> Result<Vec<f64>>;

    fn global_state(&self) -> Vec<f64>;

    /// Steps taken in the current episode.
    fn time(&self) -> usize;

    fn neighbor_ids(&self, agent: usize) -> Result<&[usize]> {
        self.spec().check_agent(agent)?;
        Ok(&self.spec().neighbors[agent])
    }

    fn observe_all(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.spec().n_agents).map(|i| self.observe(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CtcSafe,
    CtcFair,
    Cdsn,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CtcSafe => "ctc-safe",
            EnvKind::CtcFair => "ctc-fair",
            EnvKind::Cdsn => "cdsn",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc-safe" => Ok(EnvKind::CtcSafe),
            "ctc-fair" => Ok(EnvKind::CtcFair),
            "cdsn" => Ok(EnvKind::Cdsn),
            _ => Err(Error::invalid(format!("unknown environment `{s}`"))),
        }
    }
}

/// Builds the environment named by `kind` from its parameter section.
pub fn build(kind: EnvKind, ctc: &CtcParams, cdsn: &CdsnParams) -> Result<Box<dyn Ccmg>> {
    Ok(match kind {
        EnvKind::CtcSafe => Box::new(Ctc::new(CtcMode::Safe, ctc.clone())?),
        EnvKind::CtcFair => Box::new(Ctc::new(CtcMode::Fair, ctc.clone())?),
        EnvKind::Cdsn => Box::new(Cdsn::new(cdsn.clone())?),
    })
}

/// Fully connected neighbor table.
pub fn fully_connected(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect()
}

/// Neighbors are the agents within `radius` of each other.
pub fn radius_graph(points: &[[f64; 2]], radius: f64) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            (0..points.len())
                .filter(|&j| j != i && dist(points[i], points[j]) <= radius)
                .collect()
        })
        .collect()
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_connected_has_no_self_loops() {
        let g = fully_connected(4);
        for (i, ns) in g.iter().enumerate() {
            assert_eq!(ns.len(), 3);
            assert!(!ns.contains(&i));
        }
        assert!(fully_connected(1)[0].is_empty());
    }

    #[test]
    fn radius_graph_is_symmetric() {
        let pts = [[0.0, 0.0], [0.3, 0.0], [1.0, 1.0]];
        let g = radius_graph(&pts, 0.5);
        assert_eq!(g, vec![vec![1], vec![0], vec![]]);
    }
}
