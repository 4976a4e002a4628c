//! Property tests over randomized markets and inputs.

use autobid_core::analysis::{
    cfp_tau_rollup, chernoff_min_clicks, cpa_ratio_table, rollup_totals, ChernoffQuery,
};
use autobid_core::agents::AgentSpec;
use autobid_core::controllers::{debt_controller_step, ControllerState};
use autobid_core::market::{
    apply_feedback_delay, generate_market, sample_round, Interval, MarketConfig, StagePlan,
};
use autobid_core::mechanisms::{rank_and_allocate, run_auction, MechanismConfig, MechanismKind};
use autobid_core::ppo::{gae, ppo_clip_loss, returns, td_errors};
use proptest::prelude::*;

fn market_config(m: usize, k: usize, stages: Vec<usize>, seed: u64) -> MarketConfig {
    MarketConfig {
        num_bidders: m,
        num_rounds: stages.iter().sum(),
        num_slots: k,
        stage_plan: StagePlan::new(stages),
        ctr_range: Interval::new(0.1, 0.9),
        cvr_range: Interval::new(0.05, 0.1),
        value_range: Interval::new(0.5, 2.0),
        tcpa_range: Interval::new(0.5, 3.0),
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outcomes_nest(m in 1usize..6, k in 1usize..4, stages in prop::collection::vec(1usize..6, 1..4), seed in any::<u64>()) {
        let cfg = market_config(m, k, stages, seed);
        let market = generate_market(&cfg).unwrap();
        let streams = market.streams();
        for n in 0..market.num_rounds() {
            let spec = market.round(n);
            let scores: Vec<f64> = (0..m).map(|b| market.tcpa()[b] * spec.ctr(b, 0) * spec.cvr(b, 0)).collect();
            let alloc = rank_and_allocate(&scores, k);
            let o = sample_round(&spec, &alloc, &streams).unwrap();
            for i in 0..m * k {
                prop_assert!(o.z[i] <= o.y[i] && o.y[i] <= o.x[i]);
            }
        }
    }

    #[test]
    fn raising_a_bid_never_worsens_the_slot(scores in prop::collection::vec(0.0f64..5.0, 2..8), who in 0usize..8, bump in 0.0f64..3.0, k in 1usize..5) {
        let who = who % scores.len();
        let before = rank_and_allocate(&scores, k).slot_of(who);
        let mut raised = scores.clone();
        raised[who] += bump;
        let after = rank_and_allocate(&raised, k).slot_of(who);
        match (before, after) {
            (Some(b), Some(a)) => prop_assert!(a <= b),
            (Some(_), None) => prop_assert!(false, "lost the slot after raising the bid"),
            _ => {}
        }
    }

    #[test]
    fn debt_payment_within_cap(
        tcpa in 0.1f64..5.0,
        paid in 0.0f64..50.0,
        visible in 0.0f64..20.0,
        pending in 0.0f64..5.0,
        remaining in 0.0f64..200.0,
        carried in 0.0f64..10.0,
        last in any::<bool>(),
        cap in 1.0f64..20.0,
    ) {
        let s = ControllerState {
            tcpa,
            bid: tcpa,
            stage_paid: paid,
            visible_conversions: visible,
            pending_expected: pending,
            remaining_expected_clicks: remaining,
            carried_debt: carried,
            final_click: last,
            ..Default::default()
        };
        let p = debt_controller_step(&s, cap);
        prop_assert!(p >= 0.0 && p <= cap * tcpa, "payment {p}");
    }

    #[test]
    fn feedback_is_constant_within_a_stage(m in 1usize..4, stages in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
        let cfg = market_config(m, m, stages, seed);
        let market = generate_market(&cfg).unwrap();
        let streams = market.streams();
        let plan = market.stage_plan().clone();
        let outcomes: Vec<_> = (0..market.num_rounds())
            .map(|n| {
                let spec = market.round(n);
                let alloc = rank_and_allocate(&vec![1.0; m], m);
                sample_round(&spec, &alloc, &streams).unwrap()
            })
            .collect();
        for t in 0..plan.num_stages() {
            let b = plan.bounds(t);
            let first = apply_feedback_delay(&outcomes, &plan, b.start).visible_conversions;
            for n in b.clone() {
                prop_assert_eq!(&apply_feedback_delay(&outcomes, &plan, n).visible_conversions, &first);
            }
            let after = apply_feedback_delay(&outcomes, &plan, b.end);
            prop_assert_eq!(after.visible_conversions, after.true_conversions);
        }
    }

    #[test]
    fn chernoff_threshold_is_monotone(e1 in 0.01f64..0.99, e2 in 0.01f64..0.99, h1 in 0.001f64..1.0, h2 in 0.001f64..1.0) {
        let (elo, ehi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let (hlo, hhi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
        let q = |e, h| chernoff_min_clicks(&ChernoffQuery::new(e, h).unwrap());
        prop_assert!(q(ehi, hlo) <= q(elo, hlo));
        prop_assert!(q(elo, hhi) <= q(elo, hlo));
    }

    #[test]
    fn rollup_preserves_totals(stages in prop::collection::vec(3usize..12, 1..10), tau in 1usize..12, seed in any::<u64>()) {
        let cfg = market_config(3, 2, stages, seed);
        let market = generate_market(&cfg).unwrap();
        let r = run_auction(&market, &MechanismConfig::new(MechanismKind::Cfp), &[AgentSpec::Truthful; 3], None).unwrap();
        let groups = rollup_totals(&r, tau);
        for m in 0..3 {
            let z: u64 = groups.iter().map(|g| g[m].0).sum();
            let p: f64 = groups.iter().map(|g| g[m].1).sum();
            prop_assert_eq!(z, r.ledgers[m].conversions);
            prop_assert!((p - r.ledgers[m].payment).abs() <= 1e-9 * (1.0 + p.abs()));
        }
        if tau == 1 {
            prop_assert_eq!(cfp_tau_rollup(&r, 1), cpa_ratio_table(&r));
        }
    }

    #[test]
    fn gae_full_horizon_is_return_minus_value(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..30)) {
        let (rewards, values): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let adv = gae(&td_errors(&rewards, &values, 1.0), 1.0, 1.0);
        let g = returns(&rewards, 1.0);
        for i in 0..adv.len() {
            prop_assert!((adv[i] - (g[i] - values[i])).abs() <= 1e-9 * (1.0 + g[i].abs()));
        }
    }

    #[test]
    fn unit_ratio_clip_loss_is_negative_mean_advantage(a in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let ones = vec![1.0; a.len()];
        let want = -a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!((ppo_clip_loss(&ones, &a, 0.2) - want).abs() < 1e-12);
    }
}
