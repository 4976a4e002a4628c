//! PPO payment controller for DFP.
//!
//! One shared Gaussian policy prices every click: it sees the clicked
//! bidder's features, samples a pre-squash action `g`, and pays
//! `softplus(g) · bid · cvr`. A separate critic estimates state values.
//! Episodes are stages; the terminal value is zero.

pub mod net;
mod train;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use net::{Activation, Adam, Mlp, Tape};
pub use train::{
    evaluate, load_checkpoint, save_checkpoint, train, CurveRow, Episode, PpoController, TrainEnv, TrainOutcome,
    Trajectory, CURVE_HEADER,
    write_curve_csv,
};

use crate::controllers::{debt_controller_step, expected_conversion_estimate, ControllerState};
use crate::mechanisms::BidderLedger;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("non-finite network output")]
    NonFinite,
    #[error("rl configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Sim(#[from] Box<crate::mechanisms::SimError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub zeta: f64,
    /// Denominator guard as a fraction of each bidder's tCPA.
    pub xi: f64,
    pub alphas: [f64; 3],
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Steps collected before each update.
    pub rollout_steps: usize,
    pub hidden: Vec<usize>,
    pub sigma_floor: f64,
    /// Lower bound on the `r¹` sum inside the log.
    pub reward_floor: f64,
    /// Normalize advantages within each minibatch.
    pub normalize_advantages: bool,
    /// Initial bias of the policy's log-σ output.
    pub init_log_sigma: f64,
    pub updates: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            zeta: 0.1,
            xi: 1e-3,
            alphas: [1.0, 0.5, 0.01],
            learning_rate: 3e-4,
            epochs: 4,
            minibatch: 64,
            rollout_steps: 512,
            hidden: vec![64, 64],
            sigma_floor: 1e-3,
            reward_floor: 1e-3,
            normalize_advantages: true,
            init_log_sigma: -1.0,
            updates: 200,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |k: &str, v: f64| PpoError::Config(format!("`{k}` out of range: {v}"));
        for (k, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(k, v));
            }
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(bad("clip", self.clip));
        }
        if !(self.xi > 0.0) {
            return Err(bad("xi", self.xi));
        }
        if !(self.reward_floor > 0.0) {
            return Err(bad("reward_floor", self.reward_floor));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(bad("sigma_floor", self.sigma_floor));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(bad("learning_rate", self.learning_rate));
        }
        if !self.zeta.is_finite() || self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(PpoError::Config("`zeta` and `alphas` must be finite".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_steps == 0 {
            return Err(PpoError::Config("`epochs`, `minibatch` and `rollout_steps` must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(PpoError::Config("`hidden` needs at least one nonzero width".into()));
        }
        Ok(())
    }
}

pub const FEATURE_NAMES: [&str; 14] = [
    "click",
    "stage_clicks",
    "visible_conversions",
    "expected_conversions",
    "estimated_conversions",
    "paid_ratio",
    "expected_paid_ratio",
    "cumulative_paid_ratio",
    "last_payment",
    "progress",
    "remaining_clicks",
    "carried_debt",
    "debt_action",
    "repeat_action",
];
pub const FEATURE_WIDTH: usize = FEATURE_NAMES.len();

/// Debt-controller cap used for the `debt_multiplier` feature.
const FEATURE_DEBT_CAP: f64 = 10.0;
const MULTIPLIER_MIN: f64 = 1e-3;
const MULTIPLIER_MAX: f64 = 20.0;
const MAX_SIGMA: f64 = 10.0;

/// Fixed-width normalized state of one bidder at one round.
///
/// Counts are divided by their stage expectations (floored at 1), money by
/// the estimated stage target `Ẑ_est·tCPA + ξ`, the last payment by tCPA.
/// The last two entries are the pre-squash actions that would pay the debt
/// controller's price and repeat the last payment.
pub fn build_state_features(
    state: &ControllerState,
    ledger: &BidderLedger,
    clicked: bool,
    round_in_stage: usize,
    stage_len: usize,
    xi: f64,
) -> Vec<f64> {
    let tcpa = state.tcpa.max(f64::MIN_POSITIVE);
    let z_est = expected_conversion_estimate(state);
    let target = z_est * state.tcpa + xi;
    let exp_clicks = state.expected_stage_clicks.max(1.0);
    let exp_convs = state.expected_stage_conversions.max(1.0);
    let cumulative_target = (ledger.visible_conversions as f64 + z_est) * state.tcpa + xi;
    let unit = state.bid * state.click_cvr;
    // pre-squash actions that would pay the debt step or repeat the last payment
    let (debt_action, repeat_action) = if unit > 0.0 {
        (
            inverse_softplus(debt_controller_step(state, FEATURE_DEBT_CAP) / unit),
            inverse_softplus(state.last_payment / unit),
        )
    } else {
        (inverse_softplus(0.0), inverse_softplus(0.0))
    };
    vec![
        f64::from(u8::from(clicked)),
        state.stage_clicks as f64 / exp_clicks,
        state.visible_conversions / exp_convs,
        state.stage_expected_conversions / exp_convs,
        z_est / exp_convs,
        state.stage_paid / target,
        state.stage_expected_payment / target,
        ledger.payment / cumulative_target,
        state.last_payment / tcpa,
        if stage_len == 0 { 0.0 } else { round_in_stage as f64 / stage_len as f64 },
        state.remaining_expected_clicks / exp_clicks,
        state.carried_debt / tcpa,
        debt_action,
        repeat_action,
    ]
}

/// `−ln max(Σ |paid / (target + ξ) − 1|, floor)` over `(paid, target, ξ)`
/// triples.
pub fn plt_reward<I: IntoIterator<Item = (f64, f64, f64)>>(terms: I, floor: f64) -> f64 {
    let s: f64 = terms.into_iter().map(|(p, t, xi)| (p / (t + xi) - 1.0).abs()).sum();
    -s.max(floor).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub zeta: f64,
    /// Guard as a fraction of tCPA.
    pub xi: f64,
    pub floor: f64,
}

impl RlConfig {
    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            zeta: self.zeta,
            xi: self.xi,
            floor: self.reward_floor,
        }
    }
}

/// `−|p − p_last| / p_last`, zero without a prior nonzero payment.
pub fn smoothness_reward(payment: f64, last: f64) -> f64 {
    if last > 0.0 {
        -(payment - last).abs() / last
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reward {
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
}

/// Reward after bidder `bidder` is charged `payment`. The `r¹` sum runs
/// over bidders active in the stage, with targets `Ẑ_est·tCPA`.
pub fn compute_reward(states: &[ControllerState], bidder: usize, payment: f64, params: &RewardParams) -> Reward {
    let terms = states.iter().enumerate().filter(|(m, s)| s.active || *m == bidder).map(|(m, s)| {
        let paid = s.stage_paid + if m == bidder { payment } else { 0.0 };
        (paid, expected_conversion_estimate(s) * s.tcpa, params.xi * s.tcpa)
    });
    let r1 = plt_reward(terms, params.floor);
    let r2 = smoothness_reward(payment, states[bidder].last_payment);
    Reward {
        r1,
        r2,
        total: r1 + params.zeta * r2,
    }
}

/// `r¹` at stage close, using the true stage conversions.
pub fn terminal_plt_reward(states: &[ControllerState], true_conversions: &[u64], params: &RewardParams) -> f64 {
    plt_reward(
        states
            .iter()
            .zip(true_conversions)
            .filter(|(s, _)| s.active)
            .map(|(s, &z)| (s.stage_paid, z as f64 * s.tcpa, params.xi * s.tcpa)),
        params.floor,
    )
}

/// `softplus⁻¹(m)` with `m` clamped to `[10⁻³, 20]`.
pub fn inverse_softplus(m: f64) -> f64 {
    let m = if m.is_nan() { MULTIPLIER_MIN } else { m.clamp(MULTIPLIER_MIN, MULTIPLIER_MAX) };
    m + (-(-m).exp()).ln_1p()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `σ = clamp(exp(log σ), floor, MAX)`; also returns whether σ moved with
/// its input (for gradients).
fn sigma_of(log_sigma: f64, floor: f64) -> (f64, bool) {
    let s = log_sigma.exp();
    if s <= floor {
        (floor, false)
    } else if s >= MAX_SIGMA {
        (MAX_SIGMA, false)
    } else {
        (s, true)
    }
}

pub fn gaussian_log_prob(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    /// Payment multiplier `softplus(g)`.
    pub multiplier: f64,
    /// Pre-squash sample.
    pub pre_squash: f64,
    pub log_prob: f64,
    pub mean: f64,
    pub sigma: f64,
}

/// Samples (or, without an rng, takes the mean of) the policy's Gaussian.
pub fn policy_act(
    policy: &Mlp,
    features: &[f64],
    sigma_floor: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Action, PpoError> {
    let out = policy.forward(features);
    let (mean, log_sigma) = (out[0], out[1]);
    if !mean.is_finite() || !log_sigma.is_finite() {
        return Err(PpoError::NonFinite);
    }
    let (sigma, _) = sigma_of(log_sigma, sigma_floor);
    let g = match rng {
        Some(r) => {
            let e: f64 = StandardNormal.sample(r);
            mean + sigma * e
        }
        None => mean,
    };
    Ok(Action {
        multiplier: softplus(g),
        pre_squash: g,
        log_prob: gaussian_log_prob(g, mean, sigma),
        mean,
        sigma,
    })
}

pub fn value_estimate(critic: &Mlp, features: &[f64]) -> Result<f64, PpoError> {
    let v = critic.forward(features)[0];
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PpoError::NonFinite)
    }
}

/// `δ_n = r_n + γV_{n+1} − V_n` with `V` past the end taken as 0.
pub fn td_errors(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    (0..rewards.len())
        .map(|n| {
            let next = values.get(n + 1).copied().unwrap_or(0.0);
            rewards[n] + gamma * next - values[n]
        })
        .collect()
}

/// `A_n = δ_n + γλ·A_{n+1}`, zero past the end.
pub fn gae(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for n in (0..deltas.len()).rev() {
        acc = deltas[n] + gamma * lambda * acc;
        out[n] = acc;
    }
    out
}

/// Discounted returns `G_n = Σ_j γ^j r_{n+j}`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for n in (0..rewards.len()).rev() {
        acc = rewards[n] + gamma * acc;
        out[n] = acc;
    }
    out
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

/// `−mean(min(ρA, clip(ρ, 1−κ, 1+κ)·A))`.
pub fn ppo_clip_loss(ratios: &[f64], advantages: &[f64], clip: f64) -> f64 {
    assert_eq!(ratios.len(), advantages.len());
    -mean(
        ratios
            .iter()
            .zip(advantages)
            .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - clip, 1.0 + clip) * a)),
    )
}

/// `∂/∂ρ` of one step's clipped surrogate term (before the `−1/B` factor).
fn clip_surrogate_slope(ratio: f64, adv: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    if ratio * adv <= clipped * adv || (ratio > 1.0 - clip && ratio < 1.0 + clip) {
        adv
    } else {
        0.0
    }
}

pub fn critic_loss(values: &[f64], returns: &[f64]) -> f64 {
    assert_eq!(values.len(), returns.len());
    mean(values.iter().zip(returns).map(|(v, g)| (v - g) * (v - g)))
}

/// Mean Gaussian differential entropy `½ln(2πe σ²)`.
pub fn policy_entropy(log_sigmas: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    mean(log_sigmas.iter().map(|ls| c + ls))
}

/// `α₁Lθ + α₂Lμ − α₃H` (entropy as an exploration bonus).
pub fn combined_loss(actor: f64, critic: f64, entropy: f64, alphas: [f64; 3]) -> f64 {
    alphas[0] * actor + alphas[1] * critic - alphas[2] * entropy
}

/// Training samples for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub features: &'a [Vec<f64>],
    pub pre_squash: &'a [f64],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.entropy.is_finite() && self.total.is_finite()
    }
}

/// Combined loss over `idx` and its gradients, accumulated into
/// `grad_policy` / `grad_critic` (which must be zeroed by the caller).
pub fn combined_loss_grad(
    policy: &Mlp,
    critic: &Mlp,
    batch: &LossBatch<'_>,
    idx: &[usize],
    cfg: &RlConfig,
    grad_policy: &mut [f64],
    grad_critic: &mut [f64],
) -> LossReport {
    let b = idx.len().max(1) as f64;
    let [a1, a2, a3] = cfg.alphas;
    let mut tape = Tape::default();
    let (mut actor, mut crit, mut ent) = (0.0, 0.0, 0.0);
    let ent_const = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let (adv_mean, adv_scale) = if cfg.normalize_advantages && idx.len() > 1 {
        let m = idx.iter().map(|&i| batch.advantages[i]).sum::<f64>() / b;
        let var = idx.iter().map(|&i| (batch.advantages[i] - m).powi(2)).sum::<f64>() / b;
        (m, 1.0 / (var.sqrt() + 1e-8))
    } else {
        (0.0, 1.0)
    };
    for &i in idx {
        let x = &batch.features[i];
        policy.forward_tape(x, &mut tape);
        let (mu, ls) = (tape.output()[0], tape.output()[1]);
        let (sigma, sigma_live) = sigma_of(ls, cfg.sigma_floor);
        let g = batch.pre_squash[i];
        let logp = gaussian_log_prob(g, mu, sigma);
        let ratio = (logp - batch.old_log_probs[i]).exp();
        let adv = (batch.advantages[i] - adv_mean) * adv_scale;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        actor -= (ratio * adv).min(clipped * adv) / b;
        ent += (ent_const + sigma.ln()) / b;

        // dL/dlogp through the clipped surrogate
        let dlogp = -clip_surrogate_slope(ratio, adv, cfg.clip) * ratio / b * a1;
        let diff = g - mu;
        let dmu = dlogp * diff / (sigma * sigma);
        let dsigma = dlogp * (diff * diff / (sigma * sigma * sigma) - 1.0 / sigma);
        let mut dls = if sigma_live { dsigma * sigma } else { 0.0 };
        if sigma_live {
            dls -= a3 / b;
        }
        policy.backward(&tape, &[dmu, dls], grad_policy);

        critic.forward_tape(x, &mut tape);
        let v = tape.output()[0];
        let err = v - batch.returns[i];
        crit += err * err / b;
        critic.backward(&tape, &[a2 * 2.0 * err / b], grad_critic);
    }
    LossReport {
        actor,
        critic: crit,
        entropy: ent,
        total: combined_loss(actor, crit, ent, cfg.alphas),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use approx::assert_abs_diff_eq;

    #[test]
    fn td_examples() {
        assert_eq!(td_errors(&[1.0], &[0.0], 1.0), vec![1.0]);
        assert_eq!(td_errors(&[1.0], &[2.0], 0.5), vec![-1.0]);
        assert_eq!(td_errors(&[0.0, 1.0], &[1.0, 1.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn gae_examples() {
        assert_eq!(gae(&[1.0], 0.9, 0.3), vec![1.0]);
        assert_eq!(gae(&[1.0, 1.0], 1.0, 1.0), vec![2.0, 1.0]);
        assert_eq!(gae(&[1.0, 1.0], 0.5, 0.5), vec![1.25, 1.0]);
    }

    #[test]
    fn returns_examples() {
        assert_eq!(returns(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(returns(&[1.0, 1.0, 1.0], 0.0), vec![1.0, 1.0, 1.0]);
        assert_eq!(returns(&[1.0, 2.0], 0.5), vec![2.0, 2.0]);
    }

    #[test]
    fn clip_loss_examples() {
        assert_eq!(ppo_clip_loss(&[1.0], &[1.0], 0.2), -1.0);
        assert_eq!(ppo_clip_loss(&[1.5], &[1.0], 0.2), -1.2);
        assert_abs_diff_eq!(ppo_clip_loss(&[0.5], &[-1.0], 0.2), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn critic_loss_examples() {
        assert_eq!(critic_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(critic_loss(&[0.0], &[2.0]), 4.0);
        assert_eq!(critic_loss(&[1.0, 3.0], &[2.0, 2.0]), 1.0);
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(policy_entropy(&[0.0]), 1.418938533204673, epsilon = 1e-12);
        let d = policy_entropy(&[2f64.ln()]) - policy_entropy(&[0.0]);
        assert_abs_diff_eq!(d, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(1.0, 2.0, 5.0, [1.0, 1.0, 0.0]), 3.0);
        assert_eq!(combined_loss(7.0, 7.0, 2.0, [0.0, 0.0, 1.0]), -2.0);
        assert_abs_diff_eq!(combined_loss(1.0, 2.0, 1.0, [1.0, 0.5, 0.01]), 1.99, epsilon = 1e-15);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(plt_reward([(2.0, 1.0, 0.0)], 1e-3), 0.0);
        assert_abs_diff_eq!(plt_reward([(1.1, 1.0, 0.0)], 1e-3), 2.302585092994046, epsilon = 1e-9);
        assert_abs_diff_eq!(plt_reward([(1.0, 1.0, 0.0)], 1e-3), -(1e-3f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(0.1 * smoothness_reward(1.2, 1.0), -0.02, epsilon = 1e-15);
        assert_eq!(smoothness_reward(1.2, 0.0), 0.0);

        let s = ControllerState {
            tcpa: 1.0,
            bid: 1.0,
            stage_paid: 1.5,
            visible_conversions: 1.0,
            active: true,
            ..Default::default()
        };
        let p = RewardParams { zeta: 0.1, xi: 0.0, floor: 1e-3 };
        let r = compute_reward(&[s], 0, 0.5, &p);
        assert_eq!(r.r1, 0.0);
        assert_eq!(r.r2, 0.0);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn inactive_bidders_do_not_count() {
        let clicked = ControllerState {
            tcpa: 1.0,
            bid: 1.0,
            pending_expected: 1.0,
            active: true,
            ..Default::default()
        };
        let idle = ControllerState {
            tcpa: 1.0,
            bid: 1.0,
            visible_conversions: 5.0,
            ..Default::default()
        };
        let p = RewardParams { zeta: 0.0, xi: 0.0, floor: 1e-3 };
        let a = compute_reward(&[clicked.clone()], 0, 1.1, &p);
        let b = compute_reward(&[clicked, idle], 0, 1.1, &p);
        assert_abs_diff_eq!(a.r1, b.r1, epsilon = 1e-15);
    }

    #[test]
    fn fresh_features_are_zero() {
        let s = ControllerState {
            tcpa: 2.0,
            bid: 2.0,
            ..Default::default()
        };
        let f = build_state_features(&s, &BidderLedger::default(), false, 0, 10, 2e-3);
        assert_eq!(f.len(), FEATURE_WIDTH);
        let n = FEATURE_WIDTH - 2;
        assert!(f[..n].iter().all(|&v| v == 0.0), "{f:?}");
        // no click cvr yet: both action features sit at the lower clamp
        assert_eq!(f[n], inverse_softplus(0.0));
        assert_eq!(f[n + 1], inverse_softplus(0.0));
    }

    #[test]
    fn paid_at_target_feature_is_near_one() {
        let s = ControllerState {
            tcpa: 2.0,
            bid: 2.0,
            visible_conversions: 3.0,
            stage_paid: 6.0,
            ..Default::default()
        };
        let f = build_state_features(&s, &BidderLedger::default(), true, 0, 10, 1e-3);
        assert_abs_diff_eq!(f[5], 6.0 / 6.001, epsilon = 1e-15);
    }

    /// Hand-normalized mid-stage state.
    #[test]
    fn scripted_features() {
        let s = ControllerState {
            tcpa: 2.0,
            bid: 2.0,
            stage_paid: 0.6,
            visible_conversions: 0.0,
            pending_expected: 0.5,
            remaining_expected_clicks: 5.0,
            stage_clicks: 5,
            carried_debt: 1.0,
            expected_stage_clicks: 10.0,
            expected_stage_conversions: 1.0,
            stage_expected_conversions: 0.45,
            stage_expected_payment: 0.9,
            last_payment: 0.2,
            click_cvr: 0.1,
            active: true,
            final_click: false,
        };
        let ledger = BidderLedger {
            payment: 3.0,
            visible_conversions: 1,
            ..Default::default()
        };
        let f = build_state_features(&s, &ledger, true, 4, 8, 0.002);
        // target = 0.5·2 + 0.002; debt = 1.0 − 0.6 + 1.0 = 1.4 over 5 clicks
        let expect = [
            1.0,
            0.5,
            0.0,
            0.45,
            0.5,
            0.6 / 1.002,
            0.9 / 1.002,
            3.0 / 3.002,
            0.1,
            0.5,
            0.5,
            0.5,
            inverse_softplus(1.4),
            inverse_softplus(1.0),
        ];
        for (k, (a, b)) in f.iter().zip(expect).enumerate() {
            assert!((a - b).abs() < 1e-12, "{}: {a} vs {b}", FEATURE_NAMES[k]);
        }
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for m in [1e-3, 0.1, 0.69, 1.0, 3.0, 19.0] {
            assert_abs_diff_eq!(softplus(inverse_softplus(m)), m, epsilon = 1e-12);
        }
        assert_eq!(inverse_softplus(100.0), inverse_softplus(20.0));
    }

    #[test]
    fn deterministic_action_is_softplus_of_mean() {
        let mut rng = stream(3, Domain::Aux, 0);
        let policy = net::random_net(&[FEATURE_WIDTH, 8, 2], Activation::Tanh, &mut rng);
        let x = vec![0.5; FEATURE_WIDTH];
        let a = policy_act(&policy, &x, 1e-3, None).unwrap();
        assert_eq!(a.pre_squash, a.mean);
        assert!(a.multiplier > 0.0);
        assert_abs_diff_eq!(a.multiplier, softplus(a.mean), epsilon = 0.0);
        let expected = -(a.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_abs_diff_eq!(a.log_prob, expected, epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut rng = stream(3, Domain::Aux, 0);
        let policy = net::random_net(&[FEATURE_WIDTH, 8, 2], Activation::Tanh, &mut rng);
        let x = vec![0.1; FEATURE_WIDTH];
        let a = policy_act(&policy, &x, 1e-3, Some(&mut stream(5, Domain::Aux, 9))).unwrap();
        let b = policy_act(&policy, &x, 1e-3, Some(&mut stream(5, Domain::Aux, 9))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn floored_sigma_has_no_entropy_gradient() {
        let mut policy = Mlp::zeros(&[2, 2], Activation::Identity);
        let lsb = policy.bias_offset(0) + 1;
        policy.params_mut()[lsb] = -30.0;
        let critic = Mlp::zeros(&[2, 1], Activation::Identity);
        let cfg = RlConfig {
            alphas: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        let feats = vec![vec![0.3, 0.4], vec![1.0, -1.0]];
        let batch = LossBatch {
            features: &feats,
            pre_squash: &[0.0, 0.0],
            old_log_probs: &[0.0, 0.0],
            advantages: &[0.0, 0.0],
            returns: &[0.0, 0.0],
        };
        let mut gp = vec![0.0; policy.params().len()];
        let mut gc = vec![0.0; critic.params().len()];
        let r = combined_loss_grad(&policy, &critic, &batch, &[0, 1], &cfg, &mut gp, &mut gc);
        assert_abs_diff_eq!(r.entropy, policy_entropy(&[1e-3f64.ln(); 2]), epsilon = 1e-12);
        assert!(gp.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_critic_value() {
        let critic = Mlp::zeros(&[FEATURE_WIDTH, 4, 1], Activation::Tanh);
        assert_eq!(value_estimate(&critic, &[1.0; FEATURE_WIDTH]).unwrap(), 0.0);
    }
}
