//! Single-slot GSP auction simulator and campaign environment.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

/// Number of state features produced by [`compute_state_features`].
pub const STATE_DIM: usize = 7;

pub type StateVector = [f64; STATE_DIM];

/// Campaign constants and the impression generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub budget: f64,
    pub cpa_threshold: f64,
    pub horizon: usize,
    pub impressions_per_step: usize,
    /// Log-normal location/scale of impression conversion values.
    pub value_log_mu: f64,
    pub value_log_sigma: f64,
    /// Log-normal location/scale of the highest competing bid.
    pub competition_log_mu: f64,
    pub competition_log_sigma: f64,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            budget: 1500.0,
            cpa_threshold: 1.0,
            horizon: 48,
            impressions_per_step: 200,
            value_log_mu: 0.0,
            value_log_sigma: 0.5,
            competition_log_mu: 0.0,
            competition_log_sigma: 0.6,
            seed: 0,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!("budget must be a finite value >= 0, got {}", self.budget)));
        }
        if !(self.cpa_threshold > 0.0 && self.cpa_threshold.is_finite()) {
            return Err(Error::Config(format!("CPA threshold must be > 0, got {}", self.cpa_threshold)));
        }
        if self.horizon == 0 || self.impressions_per_step == 0 {
            return Err(Error::Config("horizon and impressions_per_step must be >= 1".into()));
        }
        if !(self.value_log_sigma > 0.0 && self.competition_log_sigma > 0.0) {
            return Err(Error::Config("log-normal scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpressionOpportunity {
    pub value: f64,
    pub competing_bid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub won: bool,
    pub cost: f64,
    pub realized_value: f64,
}

impl AuctionOutcome {
    const LOST: AuctionOutcome = AuctionOutcome {
        won: false,
        cost: 0.0,
        realized_value: 0.0,
    };
}

/// One decision step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: f64,
    pub impressions: Vec<ImpressionOpportunity>,
    pub outcomes: Vec<AuctionOutcome>,
    /// Sum of realized value over the step's impressions.
    pub reward: f64,
    pub cost: f64,
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub campaign: CampaignConfig,
    pub steps: Vec<StepRecord>,
    pub cumulative_cost: f64,
    pub cumulative_value: f64,
}

impl EpisodeLog {
    pub fn new(campaign: CampaignConfig) -> Self {
        Self {
            campaign,
            steps: Vec::with_capacity(campaign.horizon),
            cumulative_cost: 0.0,
            cumulative_value: 0.0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.campaign.horizon
    }

    pub fn actions(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// `b = lambda * v`
pub fn bid_from_action(lambda: f64, value: f64) -> Result<f64> {
    if !(lambda >= 0.0 && value >= 0.0) || !lambda.is_finite() || !value.is_finite() {
        return Err(Error::Domain(format!("bid needs lambda >= 0 and value >= 0, got ({lambda}, {value})")));
    }
    Ok(lambda * value)
}

/// Unified bidding parameter `lambda0 + lambda1 * C`.
pub fn linear_action(lambda0: f64, lambda1: f64, cpa_threshold: f64) -> f64 {
    lambda0 + lambda1 * cpa_threshold
}

/// Resolves one second-price auction. A bid wins only when it strictly
/// exceeds the competing bid; ties lose.
pub fn run_gsp_auction(bid: f64, opp: &ImpressionOpportunity) -> Result<AuctionOutcome> {
    if !(bid >= 0.0 && bid.is_finite()) {
        return Err(Error::Domain(format!("bid must be finite and >= 0, got {bid}")));
    }
    if !(opp.value >= 0.0 && opp.competing_bid >= 0.0 && opp.value.is_finite() && opp.competing_bid.is_finite()) {
        return Err(Error::Domain(format!("invalid opportunity {opp:?}")));
    }
    if bid > opp.competing_bid {
        Ok(AuctionOutcome {
            won: true,
            cost: opp.competing_bid,
            realized_value: opp.value,
        })
    } else {
        Ok(AuctionOutcome::LOST)
    }
}

/// State observed before acting at step `t`, built from steps `< t`:
///
/// `[remaining budget, (T - t) / T, last-step win rate, last-step cost per win,
///   cumulative cost / value, budget consumed fraction, last action]`
pub fn compute_state_features(log: &EpisodeLog, t: usize) -> Result<StateVector> {
    let horizon = log.campaign.horizon;
    if t > horizon || t > log.steps.len() {
        return Err(Error::Index {
            index: t,
            bound: horizon.min(log.steps.len()) + 1,
        });
    }
    let (mut spend, mut value) = (0.0, 0.0);
    for s in &log.steps[..t] {
        spend += s.cost;
        value += s.reward;
    }
    let budget = log.campaign.budget;
    let mut state = [0.0; STATE_DIM];
    state[0] = budget - spend;
    state[1] = (horizon - t) as f64 / horizon as f64;
    if let Some(last) = t.checked_sub(1).map(|k| &log.steps[k]) {
        if !last.outcomes.is_empty() {
            state[2] = last.wins as f64 / last.outcomes.len() as f64;
        }
        if last.wins > 0 {
            state[3] = last.cost / last.wins as f64;
        }
        state[6] = last.action;
    }
    if value > 0.0 {
        state[4] = spend / value;
    }
    if budget > 0.0 {
        state[5] = spend / budget;
    }
    Ok(state)
}

/// Source of per-step bidding parameters.
pub trait BidPolicy {
    /// Returns `lambda_t` given the log of steps `< t`.
    fn act(&mut self, t: usize, log: &EpisodeLog) -> Result<f64>;
}

impl<F: FnMut(usize, &EpisodeLog) -> f64> BidPolicy for F {
    fn act(&mut self, t: usize, log: &EpisodeLog) -> Result<f64> {
        Ok(self(t, log))
    }
}

/// Draws the impressions of step `t`. Values and competing bids depend only
/// on the campaign seed, so different policies face identical traffic.
pub fn draw_impressions(cfg: &CampaignConfig, t: usize) -> Result<Vec<ImpressionOpportunity>> {
    let values = LogNormal::new(cfg.value_log_mu, cfg.value_log_sigma)
        .map_err(|e| Error::Config(format!("value distribution: {e}")))?;
    let competition = LogNormal::new(cfg.competition_log_mu, cfg.competition_log_sigma)
        .map_err(|e| Error::Config(format!("competition distribution: {e}")))?;
    let mut rng = stream(cfg.seed, &[0xA0C7, t as u64]);
    Ok((0..cfg.impressions_per_step)
        .map(|_| ImpressionOpportunity {
            value: values.sample(&mut rng),
            competing_bid: competition.sample(&mut rng),
        })
        .collect())
}

/// Rolls a policy through all `horizon` steps. Auctions within a step are
/// resolved in arrival order; a win whose cost would push cumulative spend
/// above the budget is forced to a loss.
pub fn simulate_episode(policy: &mut dyn BidPolicy, cfg: &CampaignConfig) -> Result<EpisodeLog> {
    cfg.validate()?;
    let mut log = EpisodeLog::new(*cfg);
    for t in 0..cfg.horizon {
        let lambda = policy.act(t, &log)?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Policy { step: t, value: lambda });
        }
        let impressions = draw_impressions(cfg, t)?;
        let mut outcomes = Vec::with_capacity(impressions.len());
        let (mut cost, mut reward, mut wins) = (0.0, 0.0, 0);
        // Running totals in arrival order, so the gate compares the exact sum.
        let mut spent = log.cumulative_cost;
        let mut gained = log.cumulative_value;
        for opp in &impressions {
            let mut out = run_gsp_auction(bid_from_action(lambda, opp.value)?, opp)?;
            if out.won && spent + out.cost > cfg.budget {
                out = AuctionOutcome::LOST;
            }
            if out.won {
                cost += out.cost;
                reward += out.realized_value;
                spent += out.cost;
                gained += out.realized_value;
                wins += 1;
            }
            outcomes.push(out);
        }
        log.cumulative_cost = spent;
        log.cumulative_value = gained;
        log.steps.push(StepRecord {
            action: lambda,
            impressions,
            outcomes,
            reward,
            cost,
            wins,
        });
    }
    Ok(log)
}

/// A KPI constraint of the evaluation score. The simulator records cost and
/// conversion value only, so every KPI is a cost-per-value ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiConstraint {
    pub name: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub beta: f64,
    pub kpis: Vec<KpiConstraint>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self::cpa(1.0, 2.0)
    }
}

impl ScoreConfig {
    /// CPA-only scoring with the given threshold.
    pub fn cpa(threshold: f64, beta: f64) -> Self {
        Self {
            beta,
            kpis: vec![KpiConstraint {
                name: "cpa".into(),
                threshold,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("score exponent must be > 0, got {}", self.beta)));
        }
        if self.kpis.is_empty() || self.kpis.iter().any(|k| !(k.threshold > 0.0)) {
            return Err(Error::Config("score needs at least one KPI with a positive threshold".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub total_value: f64,
    pub total_cost: f64,
    pub cost_rate: f64,
    pub penalties: Vec<(String, f64)>,
    pub min_penalty: f64,
    pub score: f64,
}

/// `score = (sum o_i v_i) * min_j min((C_j / cost_rate)^beta, 1)`.
/// Zero conversions give score 0 with penalty reported as 1.
pub fn compute_score(log: &EpisodeLog, sc: &ScoreConfig) -> Result<ScoreReport> {
    sc.validate()?;
    let (mut cost, mut value) = (0.0, 0.0);
    for out in log.steps.iter().flat_map(|s| &s.outcomes) {
        if out.won {
            cost += out.cost;
            value += out.realized_value;
        }
    }
    Ok(score_from_totals(cost, value, sc))
}

pub(crate) fn score_from_totals(cost: f64, value: f64, sc: &ScoreConfig) -> ScoreReport {
    let cost_rate = if value > 0.0 { cost / value } else { 0.0 };
    let penalties: Vec<(String, f64)> = sc
        .kpis
        .iter()
        .map(|k| {
            let p = if value > 0.0 && cost_rate > 0.0 {
                (k.threshold / cost_rate).powf(sc.beta).min(1.0)
            } else {
                1.0
            };
            (k.name.clone(), p)
        })
        .collect();
    let min_penalty = penalties.iter().map(|(_, p)| *p).fold(1.0, f64::min);
    ScoreReport {
        total_value: value,
        total_cost: cost,
        cost_rate,
        penalties,
        min_penalty,
        score: value * min_penalty,
    }
}

/// Noisy linear behaviour policy `max(lambda0 + lambda1 * C + noise, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub lambda0: f64,
    pub lambda1: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDataConfig {
    pub num_episodes: usize,
    /// Per-episode budget is drawn uniformly from `B * [1 - spread, 1 + spread]`.
    pub budget_spread: f64,
    pub mixture: Vec<LinearPolicy>,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        let grid = [
            (0.0, 0.1),
            (0.1, 0.2),
            (0.0, 0.5),
            (0.2, 0.6),
            (0.0, 1.0),
            (0.5, 1.0),
            (0.0, 2.0),
            (1.0, 2.0),
            (0.0, 3.0),
            (1.0, 4.0),
        ];
        Self {
            num_episodes: 100,
            budget_spread: 0.5,
            mixture: grid
                .iter()
                .map(|&(lambda0, lambda1)| LinearPolicy {
                    lambda0,
                    lambda1,
                    noise_std: 0.15,
                })
                .collect(),
        }
    }
}

/// Behaviour-policy episodes of mixed quality for offline training.
///
/// Episode `e` uses campaign seed `derive(cfg.seed, e)`, a behaviour policy
/// drawn uniformly from the mixture and a jittered budget.
pub fn generate_synthetic_dataset(cfg: &CampaignConfig, data: &SyntheticDataConfig) -> Result<Vec<EpisodeLog>> {
    cfg.validate()?;
    if data.mixture.is_empty() {
        return Err(Error::Config("policy mixture is empty".into()));
    }
    if data.num_episodes == 0 {
        return Err(Error::Config("num_episodes must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&data.budget_spread) {
        return Err(Error::Config(format!("budget_spread must lie in [0, 1), got {}", data.budget_spread)));
    }
    (0..data.num_episodes)
        .map(|e| {
            let mut rng = stream(cfg.seed, &[0xDA7A, e as u64]);
            let policy = data.mixture[rng.random_range(0..data.mixture.len())];
            let factor = 1.0 + data.budget_spread * (2.0 * rng.random::<f64>() - 1.0);
            let campaign = CampaignConfig {
                budget: cfg.budget * factor,
                seed: derive_seed(cfg.seed, &[0xE915, e as u64]),
                ..*cfg
            };
            let noise = Normal::new(0.0, policy.noise_std.max(0.0))
                .map_err(|e| Error::Config(format!("policy noise: {e}")))?;
            let base = linear_action(policy.lambda0, policy.lambda1, campaign.cpa_threshold);
            let mut act = |_t: usize, _log: &EpisodeLog| (base + noise.sample(&mut rng)).max(0.0);
            simulate_episode(&mut act, &campaign)
        })
        .collect()
}
