//! Bidder behavior models and the deviation-sweep harness.

use serde::{Deserialize, Serialize};

use crate::market::MarketLog;
use crate::mechanisms::{rank_and_allocate, MechanismKind, RankingRule, SimulationResult};

/// Stage-wise tolerance and reaction of an ε-risk-averse bidder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskAverseParams {
    /// Accepted band half-width around ratio 1.
    pub epsilon: f64,
    /// Largest relative bid change per stage.
    pub step_cap: f64,
    /// Consecutive violating stages before withdrawing.
    pub patience: u32,
}

impl Default for RiskAverseParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_cap: 0.1,
            patience: 3,
        }
    }
}

impl RiskAverseParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.step_cap) {
            return Err(format!("step_cap must lie in [0, 1), got {}", self.step_cap));
        }
        if self.patience == 0 {
            return Err("patience must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    #[default]
    Truthful,
    RiskAverse(RiskAverseParams),
}

/// What a bidder observes about one finished stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageObservation {
    /// `tCPA / CPA` for the stage; `None` when the stage had no conversions.
    pub ratio: Option<f64>,
    pub paid: f64,
}

/// One risk-averse reaction to a stage outcome. Returns `(new_bid, new_streak)`.
///
/// A stage without conversions counts as a violation (treated as ratio 0)
/// when the bidder paid something, and is ignored otherwise.
pub fn risk_averse_update(
    bid: f64,
    ratio: Option<f64>,
    paid: f64,
    params: &RiskAverseParams,
    streak: u32,
) -> (f64, u32) {
    let ratio = match ratio {
        Some(r) => r,
        None if paid > 0.0 => 0.0,
        None => return (bid, streak),
    };
    if (1.0 - params.epsilon..=1.0 + params.epsilon).contains(&ratio) {
        return (bid, 0);
    }
    let streak = streak + 1;
    if streak >= params.patience {
        return (0.0, streak);
    }
    let factor = ratio.clamp(1.0 - params.step_cap, 1.0 + params.step_cap);
    (bid * factor, streak)
}

/// Running state of one bidder inside a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub spec: AgentSpec,
    pub tcpa: f64,
    pub bid: f64,
    pub streak: u32,
}

impl AgentState {
    pub fn new(spec: AgentSpec, tcpa: f64) -> Self {
        Self {
            spec,
            tcpa,
            bid: tcpa,
            streak: 0,
        }
    }

    pub fn withdrawn(&self) -> bool {
        self.bid == 0.0
    }

    pub fn end_stage(&mut self, obs: StageObservation) {
        if let AgentSpec::RiskAverse(params) = &self.spec {
            if self.withdrawn() {
                return;
            }
            let (bid, streak) = risk_averse_update(self.bid, obs.ratio, obs.paid, params, self.streak);
            self.bid = bid;
            self.streak = streak;
        }
    }
}

/// `|b / tCPA - 1|`.
pub fn drift(bid: f64, tcpa: f64) -> f64 {
    (bid / tcpa - 1.0).abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub per_bidder: Vec<f64>,
    pub withdrawn: Vec<bool>,
    pub mean_drift: f64,
    pub withdrawals: usize,
}

/// Final-bid drift from truthful bidding and withdrawal count.
pub fn bid_drift_metric(result: &SimulationResult) -> DriftReport {
    let per_bidder: Vec<f64> = result
        .final_bids
        .iter()
        .zip(&result.tcpa)
        .map(|(&b, &t)| drift(b, t))
        .collect();
    let withdrawn: Vec<bool> = result.final_bids.iter().map(|&b| b == 0.0).collect();
    let mean_drift = if per_bidder.is_empty() {
        0.0
    } else {
        per_bidder.iter().sum::<f64>() / per_bidder.len() as f64
    };
    DriftReport {
        withdrawals: withdrawn.iter().filter(|&&w| w).count(),
        per_bidder,
        withdrawn,
        mean_drift,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationRow {
    pub beta: f64,
    pub bid: f64,
    pub expected_utility: f64,
    pub expected_conversions: f64,
    pub expected_payment: f64,
    /// `None` when the bidder wins nothing at this bid.
    pub expected_cpa: Option<f64>,
}

/// Expected-value outcomes for bidder `bidder` bidding `beta * tCPA` while
/// everyone else bids truthfully. No sampling: `ȳ = x·ctr`, `z̄ = ȳ·cvr`.
pub fn deviation_sweep(
    market: &MarketLog,
    kind: MechanismKind,
    ranking: RankingRule,
    bidder: usize,
    betas: &[f64],
) -> Vec<DeviationRow> {
    let tcpa = market.tcpa();
    let mut spec = market.empty_round();
    let mut scores = vec![0.0; market.num_bidders()];
    betas
        .iter()
        .map(|&beta| {
            let mut bids = tcpa.to_vec();
            bids[bidder] = beta * tcpa[bidder];
            let (mut utility, mut conv, mut pay) = (0.0, 0.0, 0.0);
            for n in 0..market.num_rounds() {
                market.round_into(n, &mut spec);
                for (m, s) in scores.iter_mut().enumerate() {
                    *s = ranking.score(bids[m], spec.ctr(m, 0), spec.cvr(m, 0));
                }
                let alloc = rank_and_allocate(&scores, market.num_slots());
                if let Some(k) = alloc.slot_of(bidder) {
                    let y_bar = spec.ctr(bidder, k);
                    let z_bar = y_bar * spec.cvr(bidder, k);
                    utility += spec.value(bidder, k) * z_bar;
                    conv += z_bar;
                    pay += match kind {
                        MechanismKind::Cfp => bids[bidder] * y_bar * spec.cvr(bidder, k),
                        // every other rule charges tCPA per expected conversion
                        _ => tcpa[bidder] * z_bar,
                    };
                }
            }
            DeviationRow {
                beta,
                bid: bids[bidder],
                expected_utility: utility,
                expected_conversions: conv,
                expected_payment: pay,
                expected_cpa: (conv > 0.0).then(|| pay / conv),
            }
        })
        .collect()
}
