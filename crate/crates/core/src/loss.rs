//! Constraint-aware loss: terminal CPA and budget-consumption penalties and
//! the penalty-weighted action/RTG regression objective.
//!
//! Every trajectory gets one penalty `P = P_cpa * P_bc` from its terminal
//! statistics. `P_cpa` is `(cpa_T / C)^alpha1` once `cpa_T` strictly exceeds
//! the threshold and `1` otherwise; `P_bc = bc_T^alpha2`. All training
//! samples cut from a trajectory regress with weight `P`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::auction::EpisodeLog;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// How the total penalty is finalised.
///
/// `Literal` is the plain product. `Clamped` floors it at 1, so trajectories
/// that spend little are never down-weighted below an unweighted sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    #[default]
    Literal,
    Clamped,
}

impl fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyMode::Literal => "literal",
            PenaltyMode::Clamped => "clamped",
        })
    }
}

impl FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(PenaltyMode::Literal),
            "clamped" => Ok(PenaltyMode::Clamped),
            other => Err(Error::Config(format!("unknown penalty mode {other:?}"))),
        }
    }
}

/// Sample weighting of the training objective: penalty-weighted (`cl`) or
/// plain unweighted regression (`mse`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    #[serde(rename = "cl")]
    ConstraintAware,
    #[serde(rename = "mse")]
    PlainMse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::ConstraintAware => "cl",
            LossKind::PlainMse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl" => Ok(LossKind::ConstraintAware),
            "mse" => Ok(LossKind::PlainMse),
            other => Err(Error::Config(format!("unknown loss {other:?}, expected cl or mse"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    /// CPA violation threshold; `None` uses the campaign's CPA constraint.
    pub theta: Option<f64>,
    pub mode: PenaltyMode,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            alpha1: 2.0,
            alpha2: 2.0,
            theta: None,
            mode: PenaltyMode::Literal,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 1.0 && self.alpha2 > 1.0) {
            return Err(Error::Config(format!(
                "penalty exponents must exceed 1, got alpha1={} alpha2={}",
                self.alpha1, self.alpha2
            )));
        }
        if let Some(theta) = self.theta {
            if !(theta > 0.0) {
                return Err(Error::Config(format!("theta must be > 0, got {theta}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBreakdown {
    pub cpa_t: f64,
    pub bc_t: f64,
    pub p_cpa: f64,
    pub p_bc: f64,
    pub p_total: f64,
    pub mode: PenaltyMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub rtg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { rtg_weight: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtg_weight > 0.0 && self.rtg_weight.is_finite()) {
            return Err(Error::Config(format!("rtg_weight must be > 0, got {}", self.rtg_weight)));
        }
        Ok(())
    }
}

/// Terminal CPA from raw outcomes; zero when nothing converted.
pub fn compute_cpa(log: &EpisodeLog) -> f64 {
    let (mut cost, mut value) = (0.0, 0.0);
    for o in log.steps.iter().flat_map(|s| &s.outcomes) {
        if o.won {
            cost += o.cost;
            value += o.realized_value;
        }
    }
    cpa_from_totals(cost, value)
}

pub fn cpa_from_totals(cost: f64, value: f64) -> f64 {
    if value > 0.0 {
        cost / value
    } else {
        0.0
    }
}

pub fn penalty_cpa(cpa_t: f64, cpa_threshold: f64, cfg: &PenaltyConfig) -> f64 {
    let theta = cfg.theta.unwrap_or(cpa_threshold);
    if cpa_t > theta {
        (cpa_t / cpa_threshold).powf(cfg.alpha1)
    } else {
        1.0
    }
}

/// Fraction of the budget spent by the end of the episode.
pub fn budget_consumption(total_cost: f64, budget: f64) -> Result<f64> {
    if !(budget > 0.0) {
        return Err(Error::Domain(format!("budget consumption needs budget > 0, got {budget}")));
    }
    Ok(total_cost / budget)
}

pub fn penalty_bc(bc_t: f64, alpha2: f64) -> f64 {
    bc_t.powf(alpha2)
}

pub fn total_penalty_from_totals(
    total_cost: f64,
    total_value: f64,
    budget: f64,
    cpa_threshold: f64,
    cfg: &PenaltyConfig,
) -> Result<PenaltyBreakdown> {
    cfg.validate()?;
    let cpa_t = cpa_from_totals(total_cost, total_value);
    let bc_t = budget_consumption(total_cost, budget)?;
    let p_cpa = penalty_cpa(cpa_t, cpa_threshold, cfg);
    let p_bc = penalty_bc(bc_t, cfg.alpha2);
    let product = p_cpa * p_bc;
    let p_total = match cfg.mode {
        PenaltyMode::Literal => product,
        PenaltyMode::Clamped => product.max(1.0),
    };
    Ok(PenaltyBreakdown {
        cpa_t,
        bc_t,
        p_cpa,
        p_bc,
        p_total,
        mode: cfg.mode,
    })
}

pub fn total_penalty(log: &EpisodeLog, cfg: &PenaltyConfig) -> Result<PenaltyBreakdown> {
    let (mut cost, mut value) = (0.0, 0.0);
    for o in log.steps.iter().flat_map(|s| &s.outcomes) {
        if o.won {
            cost += o.cost;
            value += o.realized_value;
        }
    }
    total_penalty_from_totals(cost, value, log.campaign.budget, log.campaign.cpa_threshold, cfg)
}

/// `(1/N) sum_n P_n (pred_n - target_n)^2` over valid positions, where `N`
/// counts the valid positions. `pred` may have any shape; the slices follow
/// its row-major order.
pub fn weighted_mse(g: &mut Graph, pred: Var, target: &[f64], penalties: &[f64], valid: &[bool]) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let n = g.value(pred).numel();
    if target.len() != n || penalties.len() != n || valid.len() != n {
        return Err(Error::dim(
            "weighted_mse",
            format!(
                "prediction has {n} elements; targets {}, penalties {}, mask {}",
                target.len(),
                penalties.len(),
                valid.len()
            ),
        ));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Contract("every position is masked; loss is undefined".into()));
    }
    let weights: Vec<f64> = penalties
        .iter()
        .zip(valid)
        .map(|(&p, &v)| if v { p / count as f64 } else { 0.0 })
        .collect();
    let target = g.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let weights = g.constant(Tensor::new(shape, weights)?);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, weights)?;
    g.sum(weighted)
}

pub fn action_loss(g: &mut Graph, pred: Var, target: &[f64], penalties: &[f64], valid: &[bool]) -> Result<Var> {
    weighted_mse(g, pred, target, penalties, valid)
}

pub fn rtg_loss(g: &mut Graph, pred: Var, target: &[f64], penalties: &[f64], valid: &[bool]) -> Result<Var> {
    weighted_mse(g, pred, target, penalties, valid)
}

/// `L_a + lambda * L_r`
pub fn total_loss(g: &mut Graph, action: Var, rtg: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let scaled = g.scale(rtg, cfg.rtg_weight)?;
    g.add(action, scaled)
}
