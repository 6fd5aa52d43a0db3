//! Directional sensor network with continuous angle adjustments.
//!
//! Sensors sit at fixed points and rotate by the commanded number of degrees
//! each step. An object is captured by a sensor when it lies within the
//! sensing radius and within the half field of view of the sensor heading.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dist, fully_connected, radius_graph, Ccmg, CcmgSpec, JointAction, StepOutcome};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdsnParams {
    pub sensors: Vec<[f64; 2]>,
    pub n_objects: usize,
    pub episode_len: usize,
    pub gamma: f64,
    pub max_turn_deg: f64,
    pub half_fov_deg: f64,
    pub sensing_radius: f64,
    pub object_speed: f64,
    /// Weight of the individual capture count; the global coverage ratio gets the rest.
    pub individual_weight: f64,
    pub neighbor_radius: Option<f64>,
}

impl Default for CdsnParams {
    fn default() -> Self {
        Self {
            sensors: vec![[-0.5, -0.5], [0.5, -0.5], [0.0, 0.0], [-0.5, 0.5], [0.5, 0.5]],
            n_objects: 4,
            episode_len: 101,
            gamma: 0.99,
            max_turn_deg: 5.0,
            half_fov_deg: 30.0,
            sensing_radius: 0.5,
            object_speed: 0.03,
            individual_weight: 0.5,
            neighbor_radius: None,
        }
    }
}

impl CdsnParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.sensors.is_empty() || self.n_objects == 0 || self.episode_len == 0 {
            return bad("cdsn needs sensors, objects and a positive horizon");
        }
        if !(self.max_turn_deg > 0.0) || !(self.sensing_radius > 0.0) {
            return bad("turn limit and sensing radius must be positive");
        }
        if !(0.0 < self.half_fov_deg && self.half_fov_deg <= 180.0) {
            return bad("half field of view must lie in (0, 180]");
        }
        if !(0.0..=1.0).contains(&self.individual_weight) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("individual_weight and gamma must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub(crate) fn wrap_deg(a: f64) -> f64 {
    let r = (a + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cdsn {
    params: CdsnParams,
    spec: CcmgSpec,
    rng: ChaCha8Rng,
    t: usize,
    angles: Vec<f64>,
    objects: Vec<[f64; 2]>,
    velocities: Vec<[f64; 2]>,
}

impl Cdsn {
    pub fn new(params: CdsnParams) -> Result<Self> {
        params.validate()?;
        let n = params.sensors.len();
        let k = params.n_objects;
        let neighbors = match params.neighbor_radius {
            Some(r) => radius_graph(&params.sensors, r),
            None => fully_connected(n),
        };
        let spec = CcmgSpec {
            n_agents: n,
            cost_count: 1,
            obs_dim: 3 + 4 * k,
            state_dim: 2 * n + 4 * k + 1,
            action_dim: 1,
            action_low: -params.max_turn_deg,
            action_high: params.max_turn_deg,
            episode_len: params.episode_len,
            gamma: params.gamma,
            neighbors,
        };
        let mut env = Self {
            params,
            spec,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            angles: vec![0.0; n],
            objects: vec![],
            velocities: vec![],
        };
        env.reset(0);
        Ok(env)
    }

    pub fn params(&self) -> &CdsnParams {
        &self.params
    }

    /// Sensor headings in degrees.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn objects(&self) -> &[[f64; 2]] {
        &self.objects
    }

    /// Bearing of `p` from sensor `i` relative to its heading, in degrees.
    fn relative_bearing(&self, i: usize, p: [f64; 2]) -> f64 {
        let s = self.params.sensors[i];
        let bearing = (p[1] - s[1]).atan2(p[0] - s[0]).to_degrees();
        wrap_deg(bearing - self.angles[i])
    }

    pub fn captures(&self, i: usize, k: usize) -> bool {
        let p = self.objects[k];
        dist(p, self.params.sensors[i]) <= self.params.sensing_radius
            && self.relative_bearing(i, p).abs() <= self.params.half_fov_deg
    }
}

impl Ccmg for Cdsn {
    fn name(&self) -> &'static str {
        "cdsn"
    }

    fn spec(&self) -> &CcmgSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        let n = self.spec.n_agents;
        self.angles = (0..n).map(|_| wrap_deg(self.rng.random_range(-180.0..180.0))).collect();
        let k = self.params.n_objects;
        self.objects = (0..k)
            .map(|_| [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)])
            .collect();
        let speed = self.params.object_speed;
        self.velocities = (0..k)
            .map(|_| {
                let th = self.rng.random_range(-PI..PI);
                [speed * th.cos(), speed * th.sin()]
            })
            .collect();
        self.global_state()
    }

    fn step(&mut self, action: &JointAction) -> Result<StepOutcome> {
        if self.t >= self.spec.episode_len {
            return Err(Error::invalid("step called on a finished episode"));
        }
        let action = action.clamped(&self.spec)?;
        let n = self.spec.n_agents;
        for (angle, a) in self.angles.iter_mut().zip(&action.0) {
            *angle = wrap_deg(*angle + a[0]);
        }
        for (p, v) in self.objects.iter_mut().zip(self.velocities.iter_mut()) {
            for d in 0..2 {
                p[d] += v[d];
                if p[d] > 1.0 {
                    p[d] = 2.0 - p[d];
                    v[d] = -v[d];
                } else if p[d] < -1.0 {
                    p[d] = -2.0 - p[d];
                    v[d] = -v[d];
                }
            }
        }
        let k = self.objects.len();
        let captured: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..k).map(|o| self.captures(i, o)).collect())
            .collect();
        let covered = (0..k).filter(|&o| captured.iter().any(|c| c[o])).count();
        let global = covered as f64 / k as f64;
        let w = self.params.individual_weight;
        let rewards = captured
            .iter()
            .map(|c| w * c.iter().filter(|&&x| x).count() as f64 + (1.0 - w) * global)
            .collect();
        let costs = action.0.iter().map(|a| vec![a[0].abs()]).collect();
        self.t += 1;
        let done = self.t >= self.spec.episode_len;
        Ok(StepOutcome::from_individual(rewards, costs, self.global_state(), done))
    }

    fn observe(&self, agent: usize) -> Result<Vec<f64>> {
        self.spec.check_agent(agent)?;
        let rad = self.angles[agent].to_radians();
        let mut o = vec![rad.sin(), rad.cos(), self.t as f64 / self.spec.episode_len as f64];
        let s = self.params.sensors[agent];
        for &p in &self.objects {
            let d = dist(p, s);
            if d <= self.params.sensing_radius {
                let rel = self.relative_bearing(agent, p).to_radians();
                o.extend_from_slice(&[1.0, rel.sin(), rel.cos(), d]);
            } else {
                o.extend_from_slice(&[0.0; 4]);
            }
        }
        Ok(o)
    }

    fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.spec.state_dim);
        for a in &self.angles {
            let r = a.to_radians();
            s.push(r.sin());
            s.push(r.cos());
        }
        for (p, v) in self.objects.iter().zip(&self.velocities) {
            s.extend_from_slice(p);
            s.extend_from_slice(v);
        }
        s.push(self.t as f64 / self.spec.episode_len as f64);
        s
    }

    fn time(&self) -> usize {
        self.t
    }
}
