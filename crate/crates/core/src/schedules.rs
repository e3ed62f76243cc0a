//! Step-indexed schedules for the ABC slope `r`, the tanh scale `alpha` and
//! the learning rate.
//!
//! Every value is a closed-form function of the step index; no state is
//! carried between steps. Named policy kinds carry the published defaults and
//! every numeric field can be overridden.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    AbcRetrievalCifar,
    AbcRetrievalNus,
    AbcImagenet,
    TanhRetrieval,
    TanhImagenet,
    Constant,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::AbcRetrievalCifar,
        PolicyKind::AbcRetrievalNus,
        PolicyKind::AbcImagenet,
        PolicyKind::TanhRetrieval,
        PolicyKind::TanhImagenet,
        PolicyKind::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::AbcRetrievalCifar => "abc-retrieval-cifar",
            PolicyKind::AbcRetrievalNus => "abc-retrieval-nus",
            PolicyKind::AbcImagenet => "abc-imagenet",
            PolicyKind::TanhRetrieval => "tanh-retrieval",
            PolicyKind::TanhImagenet => "tanh-imagenet",
            PolicyKind::Constant => "constant",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule policy kind `{s}`")))
    }
}

/// What a policy drives; fixes the allowed direction of change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    R,
    Alpha,
    Lr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepUnit {
    Epoch,
    Iteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Rule {
    Constant,
    /// `initial * factor^floor(step / interval)`.
    Staircase {
        factor: f64,
        interval: u64,
    },
    /// `initial * (1 + slope * s)^exponent`, `s` = step rounded down to a
    /// multiple of `hold`.
    Power {
        slope: f64,
        exponent: f64,
        hold: u64,
    },
    /// `initial * factor^(number of milestones <= step)`.
    Milestones {
        factor: f64,
        milestones: Vec<u64>,
    },
}

/// Replaces the value with `value` from step `start` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub value: f64,
    pub start: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub kind: PolicyKind,
    pub quantity: Quantity,
    pub unit: StepUnit,
    /// For epoch-unit policies driven by iteration count: iterations per
    /// (pseudo-)epoch. `None` uses the trainer's epoch counter.
    pub iterations_per_epoch: Option<u64>,
    pub initial: f64,
    pub rule: Rule,
    pub floor: Option<f64>,
    pub cap: Option<f64>,
    pub terminal: Option<Terminal>,
}

pub const CIFAR_R_FLOOR: f64 = 0.002;
pub const NUS_R_FLOOR: f64 = 0.1662;
pub const IMAGENET_ALPHA_CAP: f64 = 9.401;
pub const RETRIEVAL_LR: f64 = 1e-4;

fn sqrt_tenth() -> f64 {
    0.1f64.sqrt()
}

impl SchedulePolicy {
    fn base(
        kind: PolicyKind,
        quantity: Quantity,
        unit: StepUnit,
        initial: f64,
        rule: Rule,
    ) -> Self {
        SchedulePolicy {
            kind,
            quantity,
            unit,
            iterations_per_epoch: None,
            initial,
            rule,
            floor: None,
            cap: None,
            terminal: None,
        }
    }

    /// Default `r` schedule of a policy kind.
    pub fn r(kind: PolicyKind) -> Result<Self> {
        use PolicyKind::*;
        let q = Quantity::R;
        Ok(match kind {
            AbcRetrievalCifar => SchedulePolicy {
                floor: Some(CIFAR_R_FLOOR),
                ..Self::base(
                    kind,
                    q,
                    StepUnit::Epoch,
                    1.0,
                    Rule::Staircase {
                        factor: 0.95,
                        interval: 1,
                    },
                )
            },
            AbcRetrievalNus => SchedulePolicy {
                floor: Some(NUS_R_FLOOR),
                iterations_per_epoch: Some(1000),
                ..Self::base(
                    kind,
                    q,
                    StepUnit::Epoch,
                    1.0,
                    Rule::Staircase {
                        factor: 0.94,
                        interval: 1,
                    },
                )
            },
            // Clamped (r = 0) from the 17th epoch, i.e. 0-based epochs 16-19.
            AbcImagenet => SchedulePolicy {
                terminal: Some(Terminal {
                    value: 0.0,
                    start: 16,
                }),
                ..Self::base(
                    kind,
                    q,
                    StepUnit::Epoch,
                    0.1,
                    Rule::Staircase {
                        factor: sqrt_tenth(),
                        interval: 4,
                    },
                )
            },
            Constant => Self::base(kind, q, StepUnit::Epoch, 1.0, Rule::Constant),
            TanhRetrieval | TanhImagenet => {
                return Err(Error::Config(format!(
                    "policy kind `{kind}` has no r schedule"
                )))
            }
        })
    }

    /// Default `alpha` schedule of a policy kind.
    pub fn alpha(kind: PolicyKind) -> Result<Self> {
        use PolicyKind::*;
        let q = Quantity::Alpha;
        Ok(match kind {
            TanhRetrieval => Self::base(
                kind,
                q,
                StepUnit::Iteration,
                1.0,
                Rule::Power {
                    slope: 0.005,
                    exponent: 0.5,
                    hold: 1,
                },
            ),
            TanhImagenet => SchedulePolicy {
                cap: Some(IMAGENET_ALPHA_CAP),
                ..Self::base(
                    kind,
                    q,
                    StepUnit::Epoch,
                    1.0,
                    Rule::Power {
                        slope: 15.0,
                        exponent: 0.4,
                        hold: 2,
                    },
                )
            },
            Constant => Self::base(kind, q, StepUnit::Iteration, 1.0, Rule::Constant),
            AbcRetrievalCifar | AbcRetrievalNus | AbcImagenet => {
                return Err(Error::Config(format!(
                    "policy kind `{kind}` has no alpha schedule"
                )))
            }
        })
    }

    /// Default learning-rate schedule of a policy kind.
    pub fn lr(kind: PolicyKind) -> Result<Self> {
        use PolicyKind::*;
        let q = Quantity::Lr;
        Ok(match kind {
            AbcRetrievalCifar | TanhRetrieval => Self::base(
                kind,
                q,
                StepUnit::Iteration,
                RETRIEVAL_LR,
                Rule::Staircase {
                    factor: 0.6,
                    interval: 4000,
                },
            ),
            AbcRetrievalNus | Constant => {
                Self::base(kind, q, StepUnit::Iteration, RETRIEVAL_LR, Rule::Constant)
            }
            AbcImagenet => Self::base(
                kind,
                q,
                StepUnit::Epoch,
                0.01,
                Rule::Staircase {
                    factor: sqrt_tenth(),
                    interval: 4,
                },
            ),
            TanhImagenet => Self::base(
                kind,
                q,
                StepUnit::Epoch,
                0.001,
                Rule::Milestones {
                    factor: 0.1,
                    milestones: vec![10, 16],
                },
            ),
        })
    }

    pub fn for_quantity(quantity: Quantity, kind: PolicyKind) -> Result<Self> {
        match quantity {
            Quantity::R => Self::r(kind),
            Quantity::Alpha => Self::alpha(kind),
            Quantity::Lr => Self::lr(kind),
        }
    }

    /// Checks ranges and that the policy moves in its quantity's direction:
    /// `r` and the learning rate never increase, `alpha` never decreases.
    pub fn validate(&self) -> Result<()> {
        let name = format!("{:?} schedule `{}`", self.quantity, self.kind);
        let fail = |msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if !self.initial.is_finite() || self.initial < 0.0 {
            return fail("initial value must be finite and >= 0");
        }
        if self.quantity == Quantity::Alpha && self.initial <= 0.0 {
            return fail("alpha must stay > 0");
        }
        let shrinking = self.quantity != Quantity::Alpha;
        match &self.rule {
            Rule::Constant => {}
            Rule::Staircase { factor, interval } => {
                if *interval == 0 {
                    return fail("interval must be >= 1");
                }
                if !(*factor > 0.0) || (shrinking && *factor > 1.0) || (!shrinking && *factor < 1.0)
                {
                    return fail("decay factor points the wrong way");
                }
            }
            Rule::Milestones { factor, milestones } => {
                if !(*factor > 0.0) || (shrinking && *factor > 1.0) || (!shrinking && *factor < 1.0)
                {
                    return fail("decay factor points the wrong way");
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return fail("milestones must be strictly increasing");
                }
            }
            Rule::Power {
                slope,
                exponent,
                hold,
            } => {
                if *hold == 0 {
                    return fail("hold must be >= 1");
                }
                if !(*slope >= 0.0)
                    || !exponent.is_finite()
                    || (slope * exponent < 0.0)
                    || (shrinking == (slope * exponent > 0.0))
                {
                    return fail("power rule points the wrong way");
                }
            }
        }
        if let (Some(lo), Some(hi)) = (self.floor, self.cap) {
            if lo > hi {
                return fail("floor exceeds cap");
            }
        }
        if let Some(t) = self.terminal {
            if !t.value.is_finite()
                || t.value < 0.0
                || (self.quantity == Quantity::Alpha && t.value <= 0.0)
            {
                return fail("terminal value out of range");
            }
        }
        if self.iterations_per_epoch == Some(0) {
            return fail("iterations_per_epoch must be >= 1");
        }
        Ok(())
    }

    /// Step index this policy reads at a given trainer position.
    pub fn step_for(&self, epoch: u64, iteration: u64) -> u64 {
        match (self.unit, self.iterations_per_epoch) {
            (StepUnit::Iteration, _) => iteration,
            (StepUnit::Epoch, Some(n)) => iteration / n,
            (StepUnit::Epoch, None) => epoch,
        }
    }

    /// Closed-form value at `step` (in this policy's unit).
    pub fn value_at(&self, step: u64) -> f64 {
        let raw = match &self.rule {
            Rule::Constant => self.initial,
            Rule::Staircase { factor, interval } => {
                self.initial * factor.powi((step / interval).min(i32::MAX as u64) as i32)
            }
            Rule::Power {
                slope,
                exponent,
                hold,
            } => {
                let s = (step / hold * hold) as f64;
                self.initial * (1.0 + slope * s).powf(*exponent)
            }
            Rule::Milestones { factor, milestones } => {
                let n = milestones.iter().filter(|&&m| m <= step).count();
                self.initial * factor.powi(n as i32)
            }
        };
        let mut v = raw;
        if let Some(floor) = self.floor {
            if v < floor {
                v = floor;
            }
        }
        if let Some(cap) = self.cap {
            if v > cap {
                v = cap;
            }
        }
        match self.terminal {
            Some(t) if step >= t.start => t.value,
            _ => v,
        }
    }
}

/// `r` at (0-based) epoch `epoch`.
pub fn r_at(policy: &SchedulePolicy, epoch: u64) -> f64 {
    policy.value_at(epoch)
}

/// `alpha` at `step` (iteration or epoch index, per policy).
pub fn alpha_at(policy: &SchedulePolicy, step: u64) -> f64 {
    policy.value_at(step)
}

pub fn lr_at(policy: &SchedulePolicy, step: u64) -> f64 {
    policy.value_at(step)
}

/// Multipliers `(r, lr)` that together shrink the update of every layer in
/// front of ABC by `1/k`: gradients there scale with `r`, so `lr * r` drops
/// by `1/sqrt(k) * 1/sqrt(k)`.
pub fn coupled_decay(k: f64) -> Result<(f64, f64)> {
    if !(k > 1.0) || !k.is_finite() {
        return Err(Error::param(format!("coupled decay needs k > 1, got {k}")));
    }
    let m = 1.0 / k.sqrt();
    Ok((m, m))
}

/// The three schedules of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub r: SchedulePolicy,
    pub alpha: SchedulePolicy,
    pub lr: SchedulePolicy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: u64,
    pub iteration: u64,
    pub r: f64,
    pub alpha: f64,
    pub lr: f64,
}

impl Schedules {
    pub fn state_at(&self, epoch: u64, iteration: u64) -> ScheduleState {
        ScheduleState {
            epoch,
            iteration,
            r: self.r.value_at(self.r.step_for(epoch, iteration)),
            alpha: self.alpha.value_at(self.alpha.step_for(epoch, iteration)),
            lr: self.lr.value_at(self.lr.step_for(epoch, iteration)),
        }
    }
}

/// Schedule selection as written in a configuration file: a kind name plus
/// optional overrides for every numeric field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: Option<PolicyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<StepUnit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_per_epoch: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_start: Option<u64>,
}

impl PolicySpec {
    pub fn of_kind(kind: PolicyKind) -> Self {
        PolicySpec {
            kind: Some(kind),
            ..Default::default()
        }
    }

    /// Applies the overrides on top of the kind's defaults.
    pub fn resolve(&self, quantity: Quantity, default_kind: PolicyKind) -> Result<SchedulePolicy> {
        let kind = self.kind.unwrap_or(default_kind);
        let mut p = SchedulePolicy::for_quantity(quantity, kind)?;
        let misplaced = |field: &str| {
            Error::Config(format!(
                "`{field}` does not apply to the {quantity:?} schedule of kind `{kind}`"
            ))
        };
        if let Some(u) = self.unit {
            p.unit = u;
        }
        if let Some(n) = self.iterations_per_epoch {
            p.iterations_per_epoch = Some(n);
        }
        if let Some(v) = self.initial {
            p.initial = v;
        }
        match &mut p.rule {
            Rule::Staircase { factor, interval } => {
                if let Some(f) = self.factor {
                    *factor = f;
                }
                if let Some(i) = self.interval {
                    *interval = i;
                }
            }
            Rule::Milestones { factor, milestones } => {
                if let Some(f) = self.factor {
                    *factor = f;
                }
                if let Some(m) = &self.milestones {
                    *milestones = m.clone();
                }
            }
            Rule::Power {
                slope,
                exponent,
                hold,
            } => {
                if let Some(s) = self.slope {
                    *slope = s;
                }
                if let Some(e) = self.exponent {
                    *exponent = e;
                }
                if let Some(h) = self.hold {
                    *hold = h;
                }
            }
            Rule::Constant => {}
        }
        let rule_fields: [(&str, bool); 6] = [
            (
                "factor",
                self.factor.is_some()
                    && !matches!(p.rule, Rule::Staircase { .. } | Rule::Milestones { .. }),
            ),
            (
                "interval",
                self.interval.is_some() && !matches!(p.rule, Rule::Staircase { .. }),
            ),
            (
                "milestones",
                self.milestones.is_some() && !matches!(p.rule, Rule::Milestones { .. }),
            ),
            (
                "slope",
                self.slope.is_some() && !matches!(p.rule, Rule::Power { .. }),
            ),
            (
                "exponent",
                self.exponent.is_some() && !matches!(p.rule, Rule::Power { .. }),
            ),
            (
                "hold",
                self.hold.is_some() && !matches!(p.rule, Rule::Power { .. }),
            ),
        ];
        if let Some((field, _)) = rule_fields.iter().find(|(_, bad)| *bad) {
            return Err(misplaced(field));
        }
        if let Some(v) = self.floor {
            p.floor = Some(v);
        }
        if let Some(v) = self.cap {
            p.cap = Some(v);
        }
        match (self.terminal_value, self.terminal_start) {
            (None, None) => {}
            (value, start) => {
                let base = p.terminal.unwrap_or(Terminal {
                    value: 0.0,
                    start: u64::MAX,
                });
                let t = Terminal {
                    value: value.unwrap_or(base.value),
                    start: start.unwrap_or(base.start),
                };
                if t.start == u64::MAX {
                    return Err(misplaced("terminal_value without terminal_start"));
                }
                p.terminal = Some(t);
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Fully populated spec describing `policy`, for config echoes.
    pub fn from_policy(policy: &SchedulePolicy) -> Self {
        let mut s = PolicySpec {
            kind: Some(policy.kind),
            unit: Some(policy.unit),
            iterations_per_epoch: policy.iterations_per_epoch,
            initial: Some(policy.initial),
            floor: policy.floor,
            cap: policy.cap,
            terminal_value: policy.terminal.map(|t| t.value),
            terminal_start: policy.terminal.map(|t| t.start),
            ..Default::default()
        };
        match &policy.rule {
            Rule::Constant => {}
            Rule::Staircase { factor, interval } => {
                s.factor = Some(*factor);
                s.interval = Some(*interval);
            }
            Rule::Power {
                slope,
                exponent,
                hold,
            } => {
                s.slope = Some(*slope);
                s.exponent = Some(*exponent);
                s.hold = Some(*hold);
            }
            Rule::Milestones { factor, milestones } => {
                s.factor = Some(*factor);
                s.milestones = Some(milestones.clone());
            }
        }
        s
    }
}
