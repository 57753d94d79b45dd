//! Parameter updates: plain SGD, back-matching scaling, LARS and LSALR, with
//! (Nesterov) momentum and weight decay.
//!
//! Per layer the order is fixed: `g = dW + lambda W`, then the rule's
//! modification of `g`, then `v = mu v + g` and the weight update.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backmatch::{factor_walk, FactorStep};
use crate::error::{Error, Result};
use crate::network::{Network, ParamGrad};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Sgd,
    BackMatch,
    Lars,
    Lsalr,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Sgd, Rule::BackMatch, Rule::Lars, Rule::Lsalr];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Sgd => "sgd",
            Rule::BackMatch => "backmatch",
            Rule::Lars => "lars",
            Rule::Lsalr => "lsalr",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rule '{s}'")))
    }
}

/// Learning-rate multipliers by epoch (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Schedule {
    /// Multiply by `factor` at every `every`-th epoch.
    Periodic { every: usize, factor: f64 },
    /// Multiply by each listed factor from its epoch on.
    Milestones { milestones: Vec<(usize, f64)> },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::constant()
    }
}

impl Schedule {
    pub fn constant() -> Self {
        Schedule::Milestones { milestones: Vec::new() }
    }

    fn validate(&self) -> Result<()> {
        let bad_factor = |f: f64| !(f > 0.0) || !f.is_finite();
        match self {
            Schedule::Periodic { every, factor } => {
                if *every == 0 || bad_factor(*factor) {
                    return Err(Error::InvalidArgument(format!(
                        "periodic schedule needs every >= 1 and factor > 0, got {every}, {factor}"
                    )));
                }
            }
            Schedule::Milestones { milestones } => {
                if let Some((e, f)) = milestones.iter().find(|(_, f)| bad_factor(*f)) {
                    return Err(Error::InvalidArgument(format!(
                        "milestone at epoch {e} has multiplier {f}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `base` times every multiplier triggered at or before `epoch`, applied in order.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Periodic { every, factor } => {
                (0..epoch / every).fold(base, |rate, _| rate * factor)
            }
            Schedule::Milestones { milestones } => {
                let mut sorted: Vec<&(usize, f64)> = milestones.iter().collect();
                sorted.sort_by_key(|(e, _)| *e);
                sorted
                    .into_iter()
                    .filter(|(e, _)| *e <= epoch)
                    .fold(base, |rate, (_, f)| rate * f)
            }
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub rule: Rule,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn new(rule: Rule, learning_rate: f64) -> Self {
        OptimizerConfig {
            rule,
            learning_rate,
            momentum: 0.0,
            nesterov: true,
            weight_decay: 0.0,
            schedule: Schedule::constant(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.schedule.validate()
    }
}

/// `m * s` of every parametric layer in a walk, bottom-up.
pub fn layer_factors(walk: &[FactorStep]) -> Vec<f64> {
    walk.iter()
        .rev()
        .filter(|s| s.scale.is_some())
        .map(|s| s.m_output * s.sharing)
        .collect()
}

pub fn scheduled_rate(config: &OptimizerConfig, epoch: usize) -> f64 {
    config.schedule.rate(config.learning_rate, epoch)
}

/// Result of a rule's gradient modification.
#[derive(Debug, Clone, PartialEq)]
pub struct Modified {
    pub grad: Tensor,
    /// Set when a norm-based rule met a zero gradient and passed it through.
    pub zero_gradient: bool,
}

/// Applies `rule` to a (post-decay) layer gradient. `backmatch_scale` is
/// `1 / (m * s)` for the layer and is only read by the back-matching rule.
pub fn modified_gradient(
    rule: Rule,
    raw: &Tensor,
    weights: &Tensor,
    backmatch_scale: Option<f64>,
) -> Result<Modified> {
    let pass = |zero_gradient| Modified {
        grad: raw.clone(),
        zero_gradient,
    };
    let grad_norm = raw.norm();
    Ok(match rule {
        Rule::Sgd => pass(false),
        Rule::BackMatch => {
            let scale = backmatch_scale.ok_or_else(|| {
                Error::InvalidArgument("back-matching rule needs the layer's factor".into())
            })?;
            Modified {
                grad: raw.scale(scale),
                zero_gradient: false,
            }
        }
        Rule::Lars | Rule::Lsalr if grad_norm == 0.0 => pass(true),
        Rule::Lars => Modified {
            grad: raw.scale(weights.norm() / grad_norm),
            zero_gradient: false,
        },
        Rule::Lsalr => Modified {
            grad: raw.scale(1.0 + (1.0 + 1.0 / grad_norm).ln()),
            zero_gradient: false,
        },
    })
}

/// One zero-initialized momentum buffer per parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityState {
    buffers: Vec<(usize, Tensor)>,
}

impl VelocityState {
    pub fn new(network: &Network) -> Self {
        let buffers = network
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weights().map(|w| (i, Tensor::zeros(w.shape()))))
            .collect();
        VelocityState { buffers }
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.buffers.iter().find(|(i, _)| *i == layer).map(|(_, v)| v)
    }

    pub fn buffers(&self) -> &[(usize, Tensor)] {
        &self.buffers
    }
}

/// What one optimizer step observed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub learning_rate: f64,
    /// Frobenius norm of each layer's raw gradient, bottom-up.
    pub grad_norms: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    velocity: VelocityState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, network: &Network) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            velocity: VelocityState::new(network),
            config,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn velocity(&self) -> &VelocityState {
        &self.velocity
    }

    /// Updates every parametric layer of `network` from its raw gradient.
    pub fn step(&mut self, network: &mut Network, grads: &[ParamGrad], epoch: usize) -> Result<StepReport> {
        self.step_with(network, grads, epoch, None)
    }

    /// As [`Optimizer::step`], reusing a factor walk already computed from
    /// the current (pre-update) weights.
    pub fn step_with(
        &mut self,
        network: &mut Network,
        grads: &[ParamGrad],
        epoch: usize,
        walk: Option<&[FactorStep]>,
    ) -> Result<StepReport> {
        let cfg = &self.config;
        let eta = scheduled_rate(cfg, epoch);
        let owned;
        let walk = match walk {
            Some(w) => Some(w),
            None if cfg.rule == Rule::BackMatch => {
                owned = factor_walk(network)?;
                Some(owned.as_slice())
            }
            None => None,
        };
        let step_for = |layer: usize| walk.and_then(|w| w.iter().find(|s| s.layer == layer));
        let mut report = StepReport {
            learning_rate: eta,
            grad_norms: Vec::with_capacity(grads.len()),
            warnings: Vec::new(),
        };

        for pg in grads {
            let layer = network
                .layers_mut()
                .get_mut(pg.layer)
                .ok_or_else(|| Error::InvalidArgument(format!("no layer {}", pg.layer)))?;
            let weights = layer
                .weights_mut()
                .ok_or_else(|| Error::InvalidArgument(format!("layer {} has no weights", pg.layer)))?;
            if weights.shape() != pg.grad.shape() {
                return Err(Error::dim(
                    "Optimizer::step",
                    format!("layer {}: weights {:?}, grad {:?}", pg.layer, weights.shape(), pg.grad.shape()),
                ));
            }
            report.grad_norms.push(pg.grad.norm());

            let mut g = pg.grad.clone();
            if cfg.weight_decay > 0.0 {
                g.axpy_in_place(cfg.weight_decay, weights)?;
            }
            let scale = step_for(pg.layer).and_then(|s| s.scale);
            if cfg.rule == Rule::BackMatch && scale.is_none() {
                return Err(Error::InvalidArgument(format!("no factor for layer {}", pg.layer)));
            }
            let modified = modified_gradient(cfg.rule, &g, weights, scale)?;
            if modified.zero_gradient {
                report
                    .warnings
                    .push(format!("layer {}: zero gradient, {} scaling skipped", pg.layer, cfg.rule));
            }
            let g = modified.grad;

            let (_, v) = self
                .velocity
                .buffers
                .iter_mut()
                .find(|(i, _)| *i == pg.layer)
                .ok_or_else(|| Error::InvalidArgument(format!("no velocity for layer {}", pg.layer)))?;
            v.scale_in_place(cfg.momentum);
            v.axpy_in_place(1.0, &g)?;
            let update = if cfg.nesterov {
                let mut u = g;
                u.axpy_in_place(cfg.momentum, v)?;
                u
            } else {
                v.clone()
            };
            weights.axpy_in_place(-eta, &update)?;
            if weights.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("weights of layer {} after update", pg.layer)));
            }
        }
        Ok(report)
    }
}
