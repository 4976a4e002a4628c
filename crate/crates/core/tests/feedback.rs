//! DFP with conversions fed back inside the stage. These runs share the
//! sparse-click markets of the acceptance suite but let the debt controller
//! see each click's conversion before pricing it (`Rounds(0)`) or a few
//! rounds later.

mod common;

use autobid_core::agents::bid_drift_metric;
use autobid_core::mechanisms::{FeedbackDelay, MechanismKind};
use common::*;

#[test]
fn immediate_feedback_keeps_sparse_bidders_in_band() {
    let cfg = sparse();
    let agents = cfg.agent_specs();
    let (mut inside, mut total) = (0, 0);
    let (mut dfp_err, mut cfp_err) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let market = cfg.market_log(seed).unwrap();
        let dfp = ratios_for_volume(&run_debt(&market, FeedbackDelay::Rounds(0), &agents), 100.0, 150.0);
        let cfp = ratios_for_volume(&run_kind(&market, MechanismKind::Cfp, &agents), 100.0, 150.0);
        let (i, n) = in_band(&dfp, 0.1);
        inside += i;
        total += n;
        dfp_err.extend(abs_errors(&dfp));
        cfp_err.extend(abs_errors(&cfp));
    }
    let frac = inside as f64 / total as f64;
    assert!(total > 100, "{total} entries");
    assert!(frac >= 0.9, "{inside}/{total} in band");
    assert!(mean(&dfp_err) < mean(&cfp_err));
}

#[test]
fn in_band_fraction_shrinks_with_feedback_lag() {
    let cfg = sparse();
    let agents = cfg.agent_specs();
    let market = cfg.market_log(0).unwrap();
    let frac = |fb| {
        let (i, n) = in_band(&ratios_for_volume(&run_debt(&market, fb, &agents), 0.0, f64::INFINITY), 0.1);
        i as f64 / n as f64
    };
    let (f0, f50, end) = (
        frac(FeedbackDelay::Rounds(0)),
        frac(FeedbackDelay::Rounds(50)),
        frac(FeedbackDelay::StageEnd),
    );
    assert!(f0 > f50 && f50 > end, "{f0} {f50} {end}");
}

#[test]
fn immediate_feedback_keeps_risk_averse_bidders_truthful() {
    let cfg = sparse();
    let agents = risk_averse(cfg.market.num_bidders);
    let mut ordered = 0;
    for seed in 0..10 {
        let market = cfg.market_log(seed).unwrap();
        let dfp = bid_drift_metric(&run_debt(&market, FeedbackDelay::Rounds(0), &agents));
        let cfp = bid_drift_metric(&run_kind(&market, MechanismKind::Cfp, &agents));
        assert_eq!(cfp.withdrawals, cfg.market.num_bidders, "seed {seed}");
        if dfp.mean_drift < cfp.mean_drift {
            ordered += 1;
        }
    }
    assert!(ordered >= 9, "{ordered}/10");
}
