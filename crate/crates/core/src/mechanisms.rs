//! Allocation, payment rules and the N-round simulation engine.
//!
//! Every mechanism shares the same allocation (top-K by ranking score) and the
//! same outcome streams; only payments differ. CFP and DFP price clicks
//! online, CPA bills conversions as they happen, and Pacing is repriced after
//! the run from whole-run totals.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentSpec, AgentState, StageObservation};
use crate::controllers::{
    stage_pacing_oracle, ClickContext, ControllerError, ControllerState, PaymentController, StageClose,
};
use crate::market::{potential_outcome, Allocation, MarketError, MarketLog, StagePlan};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("mechanism configuration: {0}")]
    Config(String),
    #[error("controller fault at round {round}: {source}")]
    Controller {
        round: usize,
        #[source]
        source: ControllerError,
        partial: Box<SimulationResult>,
    },
    #[error("payment contract violated: {0}")]
    Payment(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    #[serde(rename = "CFP")]
    Cfp,
    #[serde(rename = "DFP")]
    Dfp,
    #[serde(rename = "CPA_OFFLINE")]
    CpaOffline,
    #[serde(rename = "PACING_OFFLINE")]
    PacingOffline,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 4] = [Self::CpaOffline, Self::PacingOffline, Self::Cfp, Self::Dfp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Cfp => "CFP",
            Self::Dfp => "DFP",
            Self::CpaOffline => "CPA_OFFLINE",
            Self::PacingOffline => "PACING_OFFLINE",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MechanismKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CFP" => Ok(Self::Cfp),
            "DFP" => Ok(Self::Dfp),
            "CPA" | "CPA_OFFLINE" => Ok(Self::CpaOffline),
            "PACING" | "PACING_OFFLINE" => Ok(Self::PacingOffline),
            other => Err(format!("unknown mechanism `{other}`")),
        }
    }
}

/// Ranking-score rules. Each must be weakly increasing in the bid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingRule {
    /// `b·ctr·cvr`, the expected spend per impression.
    #[default]
    ExpectedSpend,
    /// `b·ctr`.
    BidCtr,
}

impl RankingRule {
    pub const ALL: [RankingRule; 2] = [Self::ExpectedSpend, Self::BidCtr];

    #[inline]
    pub fn score(&self, bid: f64, ctr: f64, cvr: f64) -> f64 {
        match self {
            Self::ExpectedSpend => bid * ctr * cvr,
            Self::BidCtr => bid * ctr,
        }
    }
}

/// Default ranking score `b·ctr·cvr`.
pub fn ranking_score(bid: f64, ctr: f64, cvr: f64) -> f64 {
    RankingRule::ExpectedSpend.score(bid, ctr, cvr)
}

/// Gives slot `k` to the bidder with the k-th highest positive score.
/// Ties go to the lower bidder index.
pub fn rank_and_allocate(scores: &[f64], num_slots: usize) -> Allocation {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&m| scores[m] > 0.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut slots = vec![None; num_slots];
    for (slot, m) in slots.iter_mut().zip(order) {
        *slot = Some(m);
    }
    Allocation::new(scores.len(), slots).expect("distinct bidders by construction")
}

/// CFP: `b·y·cvr`.
pub fn cfp_payment(bid: f64, click: bool, cvr: f64) -> f64 {
    if click {
        bid * cvr
    } else {
        0.0
    }
}

/// Offline CPA: `z·tCPA`.
pub fn cpa_offline_payment(conversion: bool, tcpa: f64) -> f64 {
    if conversion {
        tcpa
    } else {
        0.0
    }
}

/// Offline pacing: every click pays `Ẑ_N·tCPA / Ŷ_N`.
pub fn pacing_offline_payment(click: bool, total_conversions: u64, total_clicks: u64, tcpa: f64) -> Result<f64, SimError> {
    if !click {
        return Ok(0.0);
    }
    if total_clicks == 0 {
        return Err(SimError::Payment("click recorded for a bidder with zero total clicks".into()));
    }
    Ok(total_conversions as f64 * tcpa / total_clicks as f64)
}

/// When conversions become visible to a DFP controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "rounds")]
pub enum FeedbackDelay {
    /// Released once, at the end of each stage.
    #[default]
    StageEnd,
    /// Additionally released `L` rounds after the click within the stage;
    /// `Rounds(0)` shows a click's conversion before it is priced.
    Rounds(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    #[serde(default)]
    pub ranking: RankingRule,
    /// Controller identifier; present iff `kind` is DFP.
    #[serde(default)]
    pub controller: Option<String>,
    #[serde(default)]
    pub feedback: FeedbackDelay,
}

impl MechanismConfig {
    pub fn new(kind: MechanismKind) -> Self {
        Self {
            kind,
            ranking: RankingRule::default(),
            controller: (kind == MechanismKind::Dfp).then(|| "debt".to_string()),
            feedback: FeedbackDelay::default(),
        }
    }

    pub fn dfp(controller: &str) -> Self {
        Self {
            controller: Some(controller.to_string()),
            ..Self::new(MechanismKind::Dfp)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match (self.kind, &self.controller) {
            (MechanismKind::Dfp, None) => Err(SimError::Config("DFP requires a controller".into())),
            (MechanismKind::Dfp, Some(_)) => Ok(()),
            (kind, Some(c)) => Err(SimError::Config(format!("{kind} takes no controller (got `{c}`)"))),
            _ => Ok(()),
        }
    }
}

/// Running per-bidder accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BidderLedger {
    pub bid: f64,
    pub tcpa: f64,
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    /// Conversions fed back to the platform (stage-end releases).
    pub visible_conversions: u64,
    pub expected_clicks: f64,
    pub expected_conversions: f64,
    /// CFP-expected spend `Σ b·ȳ·cvr`.
    pub expected_payment: f64,
    pub payment: f64,
    pub last_nonzero_payment: f64,
    pub utility: f64,
}

/// Per (stage, bidder) aggregates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageStat {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    pub payment: f64,
    pub expected_clicks: f64,
    pub expected_conversions: f64,
}

/// One allocated (round, slot).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpressionRecord {
    pub round: usize,
    pub stage: usize,
    pub bidder: usize,
    pub slot: usize,
    pub score: f64,
    pub click: bool,
    pub conversion: bool,
    pub payment: f64,
    pub bid: f64,
    pub cvr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub mechanism: MechanismKind,
    pub num_bidders: usize,
    pub num_slots: usize,
    pub stage_plan: StagePlan,
    pub tcpa: Vec<f64>,
    pub records: Vec<ImpressionRecord>,
    pub ledgers: Vec<BidderLedger>,
    /// `stage_stats[t][m]`.
    pub stage_stats: Vec<Vec<StageStat>>,
    /// Bid in force during each stage, `bid_history[t][m]`.
    pub bid_history: Vec<Vec<f64>>,
    pub final_bids: Vec<f64>,
    /// Stages fully simulated (less than the plan after a controller fault).
    pub completed_stages: usize,
}

pub const ROUNDS_HEADER: [&str; 9] = ["round", "stage", "bidder", "slot", "score", "click", "conversion", "payment", "bid"];
pub const SUMMARY_HEADER: [&str; 13] = [
    "bidder",
    "tcpa",
    "final_bid",
    "impressions",
    "clicks",
    "conversions",
    "expected_clicks",
    "expected_conversions",
    "expected_payment",
    "payment",
    "utility",
    "cpa",
    "mean_stage_clicks",
];

impl SimulationResult {
    /// Per-click payments of `bidder` in round order.
    pub fn click_payments(&self, bidder: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.bidder == bidder && r.click)
            .map(|r| r.payment)
            .collect()
    }

    /// Average clicks per completed stage.
    pub fn mean_stage_clicks(&self, bidder: usize) -> f64 {
        let t = self.completed_stages.max(1);
        self.stage_stats[..self.completed_stages]
            .iter()
            .map(|s| s[bidder].clicks)
            .sum::<u64>() as f64
            / t as f64
    }

    pub fn write_rounds_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        self.write_rounds_csv_filtered(writer, |_| true)
    }

    /// [`Self::write_rounds_csv`] restricted to records passing `keep`.
    pub fn write_rounds_csv_filtered<W: Write>(
        &self,
        writer: W,
        keep: impl Fn(&ImpressionRecord) -> bool,
    ) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(ROUNDS_HEADER)?;
        for r in self.records.iter().filter(|r| keep(r)) {
            w.write_record(&[
                r.round.to_string(),
                r.stage.to_string(),
                r.bidder.to_string(),
                r.slot.to_string(),
                r.score.to_string(),
                u8::from(r.click).to_string(),
                u8::from(r.conversion).to_string(),
                r.payment.to_string(),
                r.bid.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SUMMARY_HEADER)?;
        for (m, l) in self.ledgers.iter().enumerate() {
            let cpa = if l.conversions > 0 {
                (l.payment / l.conversions as f64).to_string()
            } else {
                String::new()
            };
            w.write_record(&[
                m.to_string(),
                self.tcpa[m].to_string(),
                self.final_bids[m].to_string(),
                l.impressions.to_string(),
                l.clicks.to_string(),
                l.conversions.to_string(),
                l.expected_clicks.to_string(),
                l.expected_conversions.to_string(),
                l.expected_payment.to_string(),
                l.payment.to_string(),
                l.utility.to_string(),
                cpa,
                self.mean_stage_clicks(m).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One allocated cell with its market data and sampled outcome. Outcomes
/// depend only on the allocation, so they are drawn while planning.
struct PlannedCell {
    slot: usize,
    bidder: usize,
    score: f64,
    ctr: f64,
    cvr: f64,
    value: f64,
    click: bool,
    conversion: bool,
}

struct PendingConversion {
    visible_at: usize,
    conversion: bool,
    cvr: f64,
}

/// Runs `N` rounds of `mech` on `market`.
///
/// Per stage: bids are fixed, the allocation for every round of the stage is
/// planned (so DFP knows each bidder's expected click schedule), outcomes are
/// sampled round by round, payments are made, and at the boundary the stage
/// feedback is released and agents update their bids. Pacing prices are
/// applied after the last stage.
pub fn run_auction(
    market: &MarketLog,
    mech: &MechanismConfig,
    agents: &[AgentSpec],
    mut controller: Option<&mut dyn PaymentController>,
) -> Result<SimulationResult, SimError> {
    mech.validate()?;
    let m_count = market.num_bidders();
    let k_count = market.num_slots();
    if agents.len() != m_count {
        return Err(SimError::Config(format!("{} agents for {} bidders", agents.len(), m_count)));
    }
    if mech.kind == MechanismKind::Dfp && controller.is_none() {
        return Err(SimError::Config("DFP run without a payment controller".into()));
    }
    for a in agents {
        if let AgentSpec::RiskAverse(p) = a {
            p.validate().map_err(SimError::Config)?;
        }
    }
    let plan = market.stage_plan().clone();
    let tcpa = market.tcpa().to_vec();
    let streams = market.streams();

    let mut agent_states: Vec<AgentState> = agents.iter().zip(&tcpa).map(|(s, &t)| AgentState::new(*s, t)).collect();
    let mut ledgers: Vec<BidderLedger> = tcpa
        .iter()
        .map(|&t| BidderLedger {
            bid: t,
            tcpa: t,
            ..Default::default()
        })
        .collect();
    let mut result = SimulationResult {
        mechanism: mech.kind,
        num_bidders: m_count,
        num_slots: k_count,
        stage_plan: plan.clone(),
        tcpa: tcpa.clone(),
        records: Vec::new(),
        ledgers: Vec::new(),
        stage_stats: Vec::with_capacity(plan.num_stages()),
        bid_history: Vec::with_capacity(plan.num_stages()),
        final_bids: Vec::new(),
        completed_stages: 0,
    };

    let is_dfp = mech.kind == MechanismKind::Dfp;
    let hindsight = controller.as_ref().is_some_and(|c| c.settles_in_hindsight());
    let mut ctrl_states: Vec<ControllerState> = tcpa
        .iter()
        .map(|&t| ControllerState {
            tcpa: t,
            bid: t,
            ..Default::default()
        })
        .collect();
    let mut pending: Vec<VecDeque<PendingConversion>> = (0..m_count).map(|_| VecDeque::new()).collect();

    let mut spec = market.empty_round();
    let mut scores = vec![0.0; m_count];
    // cumulative clicks/conversions, used for the pacing feedback to agents
    let mut cum_pacing = vec![(0u64, 0u64); m_count];

    for stage in 0..plan.num_stages() {
        let bounds = plan.bounds(stage);
        let stage_len = bounds.len();
        let bids: Vec<f64> = agent_states.iter().map(|a| a.bid).collect();
        for (l, &b) in ledgers.iter_mut().zip(&bids) {
            l.bid = b;
        }
        result.bid_history.push(bids.clone());

        // plan the stage
        let mut plans = Vec::with_capacity(stage_len);
        let mut expected_clicks = vec![0.0; m_count];
        let mut expected_convs = vec![0.0; m_count];
        let mut last_round = vec![None; m_count];
        for n in bounds.clone() {
            market.round_into(n, &mut spec);
            for (m, s) in scores.iter_mut().enumerate() {
                *s = mech.ranking.score(bids[m], spec.ctr(m, 0), spec.cvr(m, 0));
            }
            let allocation = rank_and_allocate(&scores, k_count);
            let cells: Vec<PlannedCell> = allocation
                .filled()
                .map(|(k, m)| {
                    let (click, conversion) = potential_outcome(&spec, &streams, m, k);
                    PlannedCell {
                        slot: k,
                        bidder: m,
                        score: scores[m],
                        ctr: spec.ctr(m, k),
                        cvr: spec.cvr(m, k),
                        value: spec.value(m, k),
                        click,
                        conversion,
                    }
                })
                .collect();
            for c in &cells {
                expected_clicks[c.bidder] += c.ctr;
                expected_convs[c.bidder] += c.ctr * c.cvr;
                last_round[c.bidder] = Some(n);
            }
            plans.push(cells);
        }

        if is_dfp {
            for (m, s) in ctrl_states.iter_mut().enumerate() {
                s.bid = bids[m];
                s.stage_paid = 0.0;
                s.visible_conversions = 0.0;
                s.pending_expected = 0.0;
                s.stage_clicks = 0;
                s.remaining_expected_clicks = expected_clicks[m];
                s.expected_stage_clicks = expected_clicks[m];
                s.expected_stage_conversions = expected_convs[m];
                s.stage_expected_conversions = 0.0;
                s.stage_expected_payment = 0.0;
                s.final_click = false;
                s.active = false;
                pending[m].clear();
            }
            if let Some(c) = controller.as_deref_mut() {
                c.begin_stage(stage);
            }
        }

        let mut stats = vec![StageStat::default(); m_count];
        let stage_first_record = result.records.len();

        for (offset, n) in bounds.clone().enumerate() {
            let round_plan = &plans[offset];

            if is_dfp {
                for (m, queue) in pending.iter_mut().enumerate() {
                    while queue.front().is_some_and(|p| p.visible_at <= n) {
                        let p = queue.pop_front().expect("checked");
                        let s = &mut ctrl_states[m];
                        s.visible_conversions += f64::from(u8::from(p.conversion));
                        s.pending_expected = (s.pending_expected - p.cvr).max(0.0);
                    }
                }
            }

            for cell in round_plan {
                let (k, m) = (cell.slot, cell.bidder);
                let (ctr, cvr, click, conversion) = (cell.ctr, cell.cvr, cell.click, cell.conversion);
                let bid = bids[m];

                let payment = match mech.kind {
                    MechanismKind::Cfp => cfp_payment(bid, click, cvr),
                    MechanismKind::CpaOffline => cpa_offline_payment(conversion, tcpa[m]),
                    MechanismKind::PacingOffline => 0.0,
                    MechanismKind::Dfp => {
                        let s = &mut ctrl_states[m];
                        s.final_click = last_round[m] == Some(n);
                        s.click_cvr = cvr;
                        let mut price = 0.0;
                        if click {
                            s.active = true;
                            match mech.feedback {
                                FeedbackDelay::StageEnd => s.pending_expected += cvr,
                                FeedbackDelay::Rounds(0) => s.visible_conversions += f64::from(u8::from(conversion)),
                                FeedbackDelay::Rounds(lag) => {
                                    s.pending_expected += cvr;
                                    pending[m].push_back(PendingConversion {
                                        visible_at: n + lag as usize,
                                        conversion,
                                        cvr,
                                    });
                                }
                            }
                            let ctx = ClickContext {
                                bidder: m,
                                round: n,
                                stage,
                                round_in_stage: offset,
                                stage_len,
                                states: &ctrl_states,
                                ledger: &ledgers[m],
                            };
                            let c = controller.as_deref_mut().expect("checked above");
                            match c.price_click(&ctx) {
                                Ok(p) if p.is_finite() && p >= 0.0 => price = p,
                                Ok(p) => {
                                    return Err(fault(result, ledgers, agent_states, n, ControllerError::InvalidPayment(p)));
                                }
                                Err(e) => return Err(fault(result, ledgers, agent_states, n, e)),
                            }
                        }
                        let s = &mut ctrl_states[m];
                        s.remaining_expected_clicks = (s.remaining_expected_clicks - ctr).max(0.0);
                        s.stage_expected_conversions += ctr * cvr;
                        s.stage_expected_payment += bid * ctr * cvr;
                        if click {
                            s.stage_paid += price;
                            s.stage_clicks += 1;
                            if price > 0.0 {
                                s.last_payment = price;
                            }
                        }
                        price
                    }
                };

                let l = &mut ledgers[m];
                l.impressions += 1;
                l.expected_clicks += ctr;
                l.expected_conversions += ctr * cvr;
                l.expected_payment += bid * ctr * cvr;
                l.clicks += u64::from(click);
                l.conversions += u64::from(conversion);
                l.utility += if conversion { cell.value } else { 0.0 };
                l.payment += payment;
                if payment > 0.0 {
                    l.last_nonzero_payment = payment;
                }
                let st = &mut stats[m];
                st.impressions += 1;
                st.clicks += u64::from(click);
                st.conversions += u64::from(conversion);
                st.payment += payment;
                st.expected_clicks += ctr;
                st.expected_conversions += ctr * cvr;

                result.records.push(ImpressionRecord {
                    round: n,
                    stage,
                    bidder: m,
                    slot: k,
                    score: cell.score,
                    click,
                    conversion,
                    payment,
                    bid,
                    cvr,
                });
            }
        }

        // stage boundary: feedback release
        for (l, st) in ledgers.iter_mut().zip(&stats) {
            l.visible_conversions += st.conversions;
        }
        if is_dfp {
            if hindsight {
                let clicks: Vec<u64> = stats.iter().map(|s| s.clicks).collect();
                let convs: Vec<u64> = stats.iter().map(|s| s.conversions).collect();
                let prices = stage_pacing_oracle(&clicks, &convs, &tcpa);
                for r in &mut result.records[stage_first_record..] {
                    if r.click {
                        r.payment = prices[r.bidder];
                    }
                }
                for m in 0..m_count {
                    let paid = clicks[m] as f64 * prices[m];
                    ledgers[m].payment += paid - stats[m].payment;
                    stats[m].payment = paid;
                    ctrl_states[m].stage_paid = paid;
                    if prices[m] > 0.0 {
                        ledgers[m].last_nonzero_payment = prices[m];
                        ctrl_states[m].last_payment = prices[m];
                    }
                }
            }
            let true_convs: Vec<u64> = stats.iter().map(|s| s.conversions).collect();
            if let Some(c) = controller.as_deref_mut() {
                let close = StageClose {
                    stage,
                    states: &ctrl_states,
                    true_conversions: &true_convs,
                };
                if let Err(e) = c.end_stage(&close) {
                    let last = bounds.end - 1;
                    result.stage_stats.push(stats);
                    return Err(fault(result, ledgers, agent_states, last, e));
                }
            }
            for (m, s) in ctrl_states.iter_mut().enumerate() {
                let residual = true_convs[m] as f64 * s.tcpa + s.carried_debt - s.stage_paid;
                s.carried_debt = residual.max(0.0);
            }
        }

        // agents react to the stage
        for m in 0..m_count {
            let st = &stats[m];
            let paid = if mech.kind == MechanismKind::PacingOffline {
                let c = &mut cum_pacing[m];
                c.0 += st.clicks;
                c.1 += st.conversions;
                if c.0 == 0 {
                    0.0
                } else {
                    st.clicks as f64 * c.1 as f64 * tcpa[m] / c.0 as f64
                }
            } else {
                st.payment
            };
            let ratio = (st.conversions > 0).then(|| st.conversions as f64 * tcpa[m] / paid);
            agent_states[m].end_stage(StageObservation { ratio, paid });
        }

        result.stage_stats.push(stats);
        result.completed_stages = stage + 1;
    }

    if mech.kind == MechanismKind::PacingOffline {
        reprice_pacing(&mut result, &mut ledgers)?;
    }

    result.final_bids = agent_states.iter().map(|a| a.bid).collect();
    result.ledgers = ledgers;
    Ok(result)
}

fn fault(
    mut result: SimulationResult,
    ledgers: Vec<BidderLedger>,
    agents: Vec<AgentState>,
    round: usize,
    source: ControllerError,
) -> SimError {
    result.final_bids = agents.iter().map(|a| a.bid).collect();
    result.ledgers = ledgers;
    SimError::Controller {
        round,
        source,
        partial: Box::new(result),
    }
}

fn reprice_pacing(result: &mut SimulationResult, ledgers: &mut [BidderLedger]) -> Result<(), SimError> {
    let prices: Vec<f64> = ledgers
        .iter()
        .map(|l| if l.clicks == 0 { 0.0 } else { l.conversions as f64 * l.tcpa / l.clicks as f64 })
        .collect();
    for r in &mut result.records {
        let l = &ledgers[r.bidder];
        r.payment = pacing_offline_payment(r.click, l.conversions, l.clicks, l.tcpa)?;
    }
    for (m, l) in ledgers.iter_mut().enumerate() {
        l.payment = l.clicks as f64 * prices[m];
        if prices[m] > 0.0 {
            l.last_nonzero_payment = prices[m];
        }
    }
    for stage in &mut result.stage_stats {
        for (m, st) in stage.iter_mut().enumerate() {
            st.payment = st.clicks as f64 * prices[m];
        }
    }
    Ok(())
}
