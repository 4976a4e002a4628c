//! Ratio tables, payment fluctuation, the click-volume bound and the
//! CFP-τ rollup.
//!
//! Quartiles use linear interpolation on sorted data at position
//! `p·(n−1)`; variances are population variances; logs are natural.

use std::io::Write;

use rand_distr::{Binomial, Distribution};
use serde::Serialize;
use thiserror::Error;

use crate::mechanisms::SimulationResult;
use crate::rng::{stream, Domain};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid query: {0}")]
    Query(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub upper: f64,
    pub lower: f64,
    pub mean: f64,
}

/// Upper/lower quartiles and mean; `None` for an empty sample.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary {
        upper: quantile(&v, 0.75)?,
        lower: quantile(&v, 0.25)?,
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioEntry {
    pub bidder: usize,
    pub stage: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    pub entries: Vec<RatioEntry>,
    pub summary: Option<Summary>,
}

pub const RATIO_HEADER: [&str; 3] = ["bidder", "stage", "ratio"];
pub const SUMMARY_HEADER: [&str; 5] = ["mechanism", "metric", "upper", "lower", "mean"];

impl RatioTable {
    pub fn from_entries(entries: Vec<RatioEntry>) -> Self {
        let ratios: Vec<f64> = entries.iter().map(|e| e.ratio).collect();
        Self {
            summary: summarize(&ratios),
            entries,
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.ratio).collect()
    }

    /// Mean `|ratio − 1|`; `None` when empty.
    pub fn mean_abs_error(&self) -> Option<f64> {
        (!self.entries.is_empty())
            .then(|| self.entries.iter().map(|e| (e.ratio - 1.0).abs()).sum::<f64>() / self.entries.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RATIO_HEADER)?;
        for e in &self.entries {
            w.write_record(&[e.bidder.to_string(), e.stage.to_string(), e.ratio.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `Ẑ·tCPA / P̂` when the window has at least one conversion.
pub fn stage_ratio(conversions: u64, tcpa: f64, paid: f64) -> Option<f64> {
    (conversions >= 1).then(|| conversions as f64 * tcpa / paid)
}

/// Per (bidder, stage) `tCPA / CPA` for every stage with a conversion.
pub fn cpa_ratio_table(result: &SimulationResult) -> RatioTable {
    cfp_tau_rollup(result, 1)
}

/// Stage index ranges of the τ-rollup: consecutive groups of `tau` stages,
/// a trailing partial group folded into the last full one.
pub fn rollup_groups(num_stages: usize, tau: usize) -> Vec<std::ops::Range<usize>> {
    let tau = tau.max(1);
    if num_stages == 0 {
        return Vec::new();
    }
    let full = (num_stages / tau).max(1);
    (0..full)
        .map(|g| {
            let end = if g + 1 == full { num_stages } else { (g + 1) * tau };
            g * tau..end
        })
        .collect()
}

/// `(Ẑ, P̂)` per merged group and bidder, `totals[group][bidder]`.
pub fn rollup_totals(result: &SimulationResult, tau: usize) -> Vec<Vec<(u64, f64)>> {
    let stages = &result.stage_stats[..result.completed_stages];
    rollup_groups(stages.len(), tau)
        .into_iter()
        .map(|g| {
            (0..result.num_bidders)
                .map(|m| {
                    stages[g.clone()]
                        .iter()
                        .fold((0, 0.0), |(z, p), s| (z + s[m].conversions, p + s[m].payment))
                })
                .collect()
        })
        .collect()
}

/// Ratio table over super-stages of `tau` consecutive stages. `tau = 1`
/// reproduces [`cpa_ratio_table`]; `tau ≥ T` gives one whole-run ratio per
/// bidder.
pub fn cfp_tau_rollup(result: &SimulationResult, tau: usize) -> RatioTable {
    let mut entries = Vec::new();
    for (g, row) in rollup_totals(result, tau).iter().enumerate() {
        for (m, &(z, paid)) in row.iter().enumerate() {
            if let Some(ratio) = stage_ratio(z, result.tcpa[m], paid) {
                entries.push(RatioEntry { bidder: m, stage: g, ratio });
            }
        }
    }
    RatioTable::from_entries(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BidderFluctuation {
    pub bidder: usize,
    pub clicks: usize,
    pub variance: f64,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationTable {
    pub per_bidder: Vec<BidderFluctuation>,
    pub variance: Option<Summary>,
    pub range: Option<Summary>,
}

pub const FLUCTUATION_HEADER: [&str; 4] = ["bidder", "clicks", "variance", "range"];

impl FluctuationTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(FLUCTUATION_HEADER)?;
        for b in &self.per_bidder {
            w.write_record(&[b.bidder.to_string(), b.clicks.to_string(), b.variance.to_string(), b.range.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Population variance and max−min of `values`.
pub fn variance_and_range(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (var, hi - lo)
}

/// Var(p) and R(p) of each bidder's clicked-impression payments divided by
/// tCPA. Bidders without clicks are left out.
pub fn payment_fluctuation(result: &SimulationResult) -> FluctuationTable {
    let mut payments: Vec<Vec<f64>> = vec![Vec::new(); result.num_bidders];
    for r in result.records.iter().filter(|r| r.click) {
        payments[r.bidder].push(r.payment / result.tcpa[r.bidder]);
    }
    let per_bidder: Vec<BidderFluctuation> = payments
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(m, p)| {
            let (variance, range) = variance_and_range(p);
            BidderFluctuation {
                bidder: m,
                clicks: p.len(),
                variance,
                range,
            }
        })
        .collect();
    let vars: Vec<f64> = per_bidder.iter().map(|b| b.variance).collect();
    let ranges: Vec<f64> = per_bidder.iter().map(|b| b.range).collect();
    FluctuationTable {
        variance: summarize(&vars),
        range: summarize(&ranges),
        per_bidder,
    }
}

/// Mean `|p − p_last| / p_last` over consecutive clicks of `bidder` with a
/// prior nonzero payment.
pub fn mean_relative_payment_change(result: &SimulationResult, bidder: usize) -> Option<f64> {
    let (mut last, mut sum, mut n) = (0.0, 0.0, 0usize);
    for p in result.click_payments(bidder) {
        if last > 0.0 {
            sum += (p - last).abs() / last;
            n += 1;
        }
        if p > 0.0 {
            last = p;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChernoffQuery {
    pub epsilon: f64,
    /// Largest conversion rate in the market.
    pub eta: f64,
}

impl ChernoffQuery {
    pub fn new(epsilon: f64, eta: f64) -> Result<Self, AnalysisError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(AnalysisError::Query(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(AnalysisError::Query(format!("eta must lie in (0, 1], got {eta}")));
        }
        Ok(Self { epsilon, eta })
    }
}

/// Clicks needed for ε-TIC with probability at least `1 − ε`:
/// `⌈(2+ε)·ln(1/ε) / (ε²·η)⌉`. Returns 0 (with a warning) for `ε ≥ 1`.
pub fn chernoff_min_clicks(q: &ChernoffQuery) -> u64 {
    let e = q.epsilon;
    if e >= 1.0 {
        log::warn!("epsilon {e} ≥ 1: the ε-band is vacuous, no clicks required");
        return 0;
    }
    ((2.0 + e) * (1.0 / e).ln() / (e * e * q.eta)).ceil() as u64
}

/// Fraction of entries outside `[1−ε, 1+ε]`; `None` for an empty table.
pub fn etic_violation_rate(table: &RatioTable, epsilon: f64) -> Option<f64> {
    if table.entries.is_empty() {
        return None;
    }
    let out = table
        .entries
        .iter()
        .filter(|e| !(e.ratio >= 1.0 - epsilon && e.ratio <= 1.0 + epsilon))
        .count();
    Some(out as f64 / table.entries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChernoffCheck {
    pub clicks: u64,
    pub violation_rate: f64,
    /// The bound the rate is checked against (`ε`).
    pub bound: f64,
}

impl ChernoffCheck {
    pub fn holds(&self) -> bool {
        self.violation_rate <= self.bound
    }
}

/// Monte Carlo of the click-volume bound: draw `Ẑ ~ Binomial(Ŷ, cvr)` at the
/// threshold volume and count trials whose `Ẑ / (Ŷ·cvr)` leaves the ε-band.
pub fn chernoff_empirical_check(cvr: f64, epsilon: f64, trials: usize, seed: u64) -> Result<ChernoffCheck, AnalysisError> {
    let q = ChernoffQuery::new(epsilon, cvr)?;
    chernoff_check_at(chernoff_min_clicks(&q), cvr, epsilon, trials, seed)
}

/// [`chernoff_empirical_check`] at an explicit click volume.
pub fn chernoff_check_at(clicks: u64, cvr: f64, epsilon: f64, trials: usize, seed: u64) -> Result<ChernoffCheck, AnalysisError> {
    ChernoffQuery::new(epsilon, cvr)?;
    if trials == 0 {
        return Err(AnalysisError::Query("trials must be positive".into()));
    }
    if clicks == 0 {
        return Ok(ChernoffCheck {
            clicks,
            violation_rate: 0.0,
            bound: epsilon,
        });
    }
    let dist = Binomial::new(clicks, cvr).map_err(|e| AnalysisError::Query(e.to_string()))?;
    let mut rng = stream(seed, Domain::Aux, 0x00c4_e2f0);
    let expected = clicks as f64 * cvr;
    let mut out = 0usize;
    for _ in 0..trials {
        let z = dist.sample(&mut rng) as f64;
        let ratio = z / expected;
        if !(ratio >= 1.0 - epsilon && ratio <= 1.0 + epsilon) {
            out += 1;
        }
    }
    Ok(ChernoffCheck {
        clicks,
        violation_rate: out as f64 / trials as f64,
        bound: epsilon,
    })
}

/// Mean `|ratio − 1|` of the τ-rollup for each τ.
pub fn tau_sweep(result: &SimulationResult, taus: &[usize]) -> Vec<(usize, Option<f64>)> {
    taus.iter().map(|&t| (t, cfp_tau_rollup(result, t).mean_abs_error())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mechanism: String,
    pub metric: String,
    pub upper: f64,
    pub lower: f64,
    pub mean: f64,
}

impl SummaryRow {
    pub fn new(mechanism: &str, metric: &str, s: Option<Summary>) -> Self {
        let s = s.unwrap_or(Summary {
            upper: f64::NAN,
            lower: f64::NAN,
            mean: f64::NAN,
        });
        Self {
            mechanism: mechanism.to_string(),
            metric: metric.to_string(),
            upper: s.upper,
            lower: s.lower,
            mean: s.mean,
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.mechanism.clone(),
            r.metric.clone(),
            r.upper.to_string(),
            r.lower.to_string(),
            r.mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{MechanismKind, StageStat};
    use crate::market::StagePlan;
    use approx::assert_abs_diff_eq;

    fn result_with(stats: Vec<Vec<StageStat>>, tcpa: Vec<f64>) -> SimulationResult {
        let t = stats.len();
        SimulationResult {
            mechanism: MechanismKind::Cfp,
            num_bidders: tcpa.len(),
            num_slots: 1,
            stage_plan: StagePlan::uniform(t, 1),
            tcpa: tcpa.clone(),
            records: Vec::new(),
            ledgers: Vec::new(),
            stage_stats: stats,
            bid_history: Vec::new(),
            final_bids: tcpa,
            completed_stages: t,
        }
    }

    fn stat(z: u64, p: f64) -> StageStat {
        StageStat {
            conversions: z,
            payment: p,
            clicks: z.max(1),
            ..Default::default()
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let r = result_with(vec![vec![stat(50, 95.0)]], vec![2.0]);
        let t = cpa_ratio_table(&r);
        assert_abs_diff_eq!(t.entries[0].ratio, 2.0 / 1.9, epsilon = 1e-12);
    }

    #[test]
    fn zero_conversion_stages_are_skipped() {
        let r = result_with(vec![vec![stat(0, 3.0)], vec![stat(2, 2.0)]], vec![1.0]);
        let t = cpa_ratio_table(&r);
        assert_eq!(t.entries.len(), 1);
        assert_eq!(t.entries[0].stage, 1);
    }

    #[test]
    fn quartile_rule() {
        let s = summarize(&[1.2, 0.9, 1.1, 1.0]).unwrap();
        assert_abs_diff_eq!(s.mean, 1.05, epsilon = 1e-15);
        assert_abs_diff_eq!(s.lower, 0.975, epsilon = 1e-15);
        assert_abs_diff_eq!(s.upper, 1.125, epsilon = 1e-15);
        assert!(summarize(&[]).is_none());
        assert_eq!(quantile(&[3.0], 0.25), Some(3.0));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_and_range(&[0.5, 0.5, 0.5]), (0.0, 0.0));
        assert_eq!(variance_and_range(&[0.0, 1.0]), (0.25, 1.0));
    }

    #[test]
    fn chernoff_examples() {
        assert_eq!(chernoff_min_clicks(&ChernoffQuery::new(1.0, 0.3).unwrap()), 0);
        assert_eq!(chernoff_min_clicks(&ChernoffQuery::new(0.1, 0.05).unwrap()), 9671);
        assert_eq!(chernoff_min_clicks(&ChernoffQuery::new(0.2, 0.1).unwrap()), 886);
        assert!(ChernoffQuery::new(0.0, 0.1).is_err());
        assert!(ChernoffQuery::new(0.1, 1.5).is_err());
    }

    #[test]
    fn violation_rate_examples() {
        let t = |v: &[f64]| {
            RatioTable::from_entries(
                v.iter()
                    .enumerate()
                    .map(|(i, &ratio)| RatioEntry { bidder: 0, stage: i, ratio })
                    .collect(),
            )
        };
        assert_eq!(etic_violation_rate(&t(&[1.0, 1.0]), 0.1), Some(0.0));
        assert_abs_diff_eq!(etic_violation_rate(&t(&[0.85, 1.0, 1.2]), 0.1).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(etic_violation_rate(&t(&[]), 0.1), None);
        assert_abs_diff_eq!(etic_violation_rate(&t(&[1.0, 1.1, 0.9]), 0.0).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn rollup_examples() {
        let r = result_with(vec![vec![stat(1, 2.2)], vec![stat(3, 5.8)]], vec![2.0]);
        let t = cfp_tau_rollup(&r, 2);
        assert_eq!(t.entries.len(), 1);
        assert_abs_diff_eq!(t.entries[0].ratio, 1.0, epsilon = 1e-12);
        assert_eq!(cfp_tau_rollup(&r, 1), cpa_ratio_table(&r));
        // τ beyond the stage count merges everything
        assert_eq!(cfp_tau_rollup(&r, 9), t);
    }

    #[test]
    fn rollup_groups_fold_the_tail() {
        assert_eq!(rollup_groups(7, 3), vec![0..3, 3..7]);
        assert_eq!(rollup_groups(6, 3), vec![0..3, 3..6]);
        assert_eq!(rollup_groups(2, 5), vec![0..2]);
        assert_eq!(rollup_groups(4, 1), vec![0..1, 1..2, 2..3, 3..4]);
    }

    #[test]
    fn empirical_check_examples() {
        let c = chernoff_empirical_check(0.3, 1.0, 1000, 1).unwrap();
        assert_eq!((c.clicks, c.violation_rate), (0, 0.0));
        let c = chernoff_empirical_check(0.1, 0.2, 10_000, 2).unwrap();
        assert!(c.holds(), "{c:?}");
        let c = chernoff_check_at(1, 0.01, 0.05, 10_000, 3).unwrap();
        assert!(c.violation_rate > 0.99, "{c:?}");
    }
}
