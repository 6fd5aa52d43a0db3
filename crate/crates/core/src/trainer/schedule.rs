//! Learning-rate schedules, their timescale check, and target-rate decay.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { rate: f64 },
    /// `scale · (k + offset)^(−power)` at update `k = 0, 1, …`.
    Polynomial { scale: f64, offset: f64, power: f64 },
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        LrSchedule::Constant { rate }
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::invalid(format!("constant rate must be positive, got {rate}")));
                }
            }
            LrSchedule::Polynomial { scale, offset, power } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::invalid(format!("polynomial scale must be positive, got {scale}")));
                }
                if !(offset > 0.0 && offset.is_finite()) {
                    return Err(Error::invalid(format!("polynomial offset must be positive, got {offset}")));
                }
                if !(power > 0.0 && power.is_finite()) {
                    return Err(Error::invalid(format!("polynomial power must be positive, got {power}")));
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, k: u64) -> f64 {
        match *self {
            LrSchedule::Constant { rate } => rate,
            LrSchedule::Polynomial { scale, offset, power } => scale * (k as f64 + offset).powf(-power),
        }
    }

    fn power(&self) -> Option<f64> {
        match *self {
            LrSchedule::Constant { .. } => None,
            LrSchedule::Polynomial { power, .. } => Some(power),
        }
    }
}

/// One schedule per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedules {
    pub reward_critic: LrSchedule,
    pub cost_critic: LrSchedule,
    pub base: LrSchedule,
    pub perturb: LrSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    RewardCritic,
    CostCritic,
    Base,
    Perturb,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::RewardCritic => "reward_critic",
            Group::CostCritic => "cost_critic",
            Group::Base => "base",
            Group::Perturb => "perturb",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleIssue {
    /// Constant rate: usable in practice, outside the two-timescale analysis.
    Constant(Group),
    /// Power outside `(0.5, 1]`.
    RobbinsMonro { group: Group, power: f64 },
    /// `slower` must decay strictly faster than `faster`.
    Ordering { slower: Group, faster: Group },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleClass {
    Conforming,
    PracticalNonConforming,
    Violating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleReport {
    pub issues: Vec<ScheduleIssue>,
}

impl ScheduleReport {
    pub fn class(&self) -> ScheduleClass {
        if self.issues.is_empty() {
            ScheduleClass::Conforming
        } else if self.issues.iter().all(|i| matches!(i, ScheduleIssue::Constant(_))) {
            ScheduleClass::PracticalNonConforming
        } else {
            ScheduleClass::Violating
        }
    }

    pub fn is_conforming(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ScheduleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.class() {
            ScheduleClass::Conforming => return f.write_str("conforming"),
            ScheduleClass::PracticalNonConforming => f.write_str("practical, non-conforming")?,
            ScheduleClass::Violating => f.write_str("violating")?,
        }
        for issue in &self.issues {
            match issue {
                ScheduleIssue::Constant(g) => write!(f, "; {g} constant")?,
                ScheduleIssue::RobbinsMonro { group, power } => {
                    write!(f, "; {group} power {power} outside (0.5, 1]")?
                }
                ScheduleIssue::Ordering { slower, faster } => {
                    write!(f, "; {slower} must decay faster than {faster}")?
                }
            }
        }
        Ok(())
    }
}

/// Checks that polynomial schedules are square-summable but not summable and
/// that base ≺ perturbation ≺ critics in timescale. Orderings are only
/// compared between polynomial schedules; constant groups are flagged instead.
pub fn validate_lr_schedule(s: &LrSchedules) -> Result<ScheduleReport> {
    let groups = [
        (Group::RewardCritic, s.reward_critic),
        (Group::CostCritic, s.cost_critic),
        (Group::Base, s.base),
        (Group::Perturb, s.perturb),
    ];
    let mut issues = Vec::new();
    for (g, sch) in groups {
        sch.check().map_err(|e| Error::invalid(format!("{g}: {e}")))?;
        match sch.power() {
            None => issues.push(ScheduleIssue::Constant(g)),
            Some(p) if !(p > 0.5 && p <= 1.0) => issues.push(ScheduleIssue::RobbinsMonro { group: g, power: p }),
            Some(_) => {}
        }
    }
    let pairs = [
        (Group::Base, s.base, Group::Perturb, s.perturb),
        (Group::Perturb, s.perturb, Group::RewardCritic, s.reward_critic),
        (Group::Perturb, s.perturb, Group::CostCritic, s.cost_critic),
    ];
    for (sg, slow, fg, fast) in pairs {
        if let (Some(ps), Some(pf)) = (slow.power(), fast.power()) {
            if ps <= pf {
                issues.push(ScheduleIssue::Ordering { slower: sg, faster: fg });
            }
        }
    }
    Ok(ScheduleReport { issues })
}

/// Soft-update rate moving linearly from `start` to `end` over the first
/// `decay_fraction` of training, then held.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRate {
    pub start: f64,
    pub end: f64,
}

impl TargetRate {
    pub fn constant(rate: f64) -> Self {
        Self { start: rate, end: rate }
    }

    pub fn check(&self) -> Result<()> {
        for v in [self.start, self.end] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("target rate {v} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn at(&self, episode: usize, total: usize, decay_fraction: f64) -> f64 {
        let horizon = decay_fraction * total as f64;
        if self.start == self.end || horizon <= 0.0 {
            return self.end;
        }
        let x = episode as f64 / horizon;
        if x >= 1.0 {
            return self.end;
        }
        self.start + (self.end - self.start) * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(p: f64) -> LrSchedule {
        LrSchedule::Polynomial {
            scale: 1e-3,
            offset: 1.0,
            power: p,
        }
    }

    fn set(eta: LrSchedule, zeta: LrSchedule, theta: LrSchedule, phi: LrSchedule) -> LrSchedules {
        LrSchedules {
            reward_critic: eta,
            cost_critic: zeta,
            base: theta,
            perturb: phi,
        }
    }

    #[test]
    fn classification_examples() {
        let r = validate_lr_schedule(&set(poly(0.6), poly(0.6), poly(0.9), poly(0.75))).unwrap();
        assert_eq!(r.class(), ScheduleClass::Conforming);
        let c = LrSchedule::constant(1e-3);
        let r = validate_lr_schedule(&set(c, c, c, c)).unwrap();
        assert_eq!(r.class(), ScheduleClass::PracticalNonConforming);
        assert!(r.to_string().starts_with("practical, non-conforming"));
        let r = validate_lr_schedule(&set(poly(0.6), poly(0.6), poly(0.4), poly(0.75))).unwrap();
        assert_eq!(r.class(), ScheduleClass::Violating);
        assert!(r.issues.contains(&ScheduleIssue::RobbinsMonro {
            group: Group::Base,
            power: 0.4
        }));
        assert!(validate_lr_schedule(&set(poly(0.6), poly(0.6), LrSchedule::constant(-1.0), poly(0.7))).is_err());
    }

    #[test]
    fn polynomial_rate_and_target_decay() {
        assert!((poly(1.0).rate(9) - 1e-4).abs() < 1e-15);
        let t = TargetRate { start: 0.05, end: 0.01 };
        assert_eq!(t.at(0, 100, 0.2), 0.05);
        assert!((t.at(10, 100, 0.2) - 0.03).abs() < 1e-15);
        assert_eq!(t.at(50, 100, 0.2), 0.01);
    }
}
