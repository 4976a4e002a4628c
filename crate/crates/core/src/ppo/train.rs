//! Rollout collection inside the DFP engine, PPO updates, checkpoints.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{
    build_state_features, combined_loss_grad, compute_reward, gae, policy_act, returns, td_errors,
    terminal_plt_reward, value_estimate, Activation, Adam, LossBatch, LossReport, Mlp, PpoError, RlConfig,
    FEATURE_WIDTH,
};
use crate::agents::AgentSpec;
use crate::controllers::{ClickContext, ControllerError, PaymentController, StageClose};
use crate::market::{generate_market, MarketConfig, MarketLog};
use crate::mechanisms::{run_auction, MechanismConfig, SimError, SimulationResult};
use crate::rng::{stream, Domain};

pub const CURVE_HEADER: [&str; 6] = ["update", "mean_reward", "mean_abs_ratio_err", "actor_loss", "critic_loss", "entropy"];
const CHECKPOINT_MAGIC: &str = "autobid-ppo-checkpoint 1";

/// One episode's rollout. `deltas`, `advantages` and `returns` are filled by
/// [`Trajectory::finalize`] from `rewards` and `values`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub features: Vec<Vec<f64>>,
    pub multipliers: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// The smoothness part `r²` of each reward, kept for the terminal rewrite.
    pub smoothness: Vec<f64>,
    pub values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn finalize(&mut self, gamma: f64, lambda: f64) {
        self.deltas = td_errors(&self.rewards, &self.values, gamma);
        self.advantages = gae(&self.deltas, gamma, lambda);
        self.returns = returns(&self.rewards, gamma);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub bidder: usize,
    pub stage: usize,
    pub trajectory: Trajectory,
    /// `|tCPA/CPA − 1|` for the stage, when it had conversions and payments.
    pub ratio_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub update: usize,
    pub mean_reward: f64,
    pub mean_abs_ratio_err: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

pub fn write_curve_csv<W: Write>(rows: &[CurveRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CURVE_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.update.to_string(),
            r.mean_reward.to_string(),
            r.mean_abs_ratio_err.to_string(),
            r.actor_loss.to_string(),
            r.critic_loss.to_string(),
            r.entropy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
struct Trainer {
    act_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    opt_policy: Adam,
    opt_critic: Adam,
    open: Vec<Trajectory>,
    buffer: Vec<Episode>,
    buffer_steps: usize,
    curve: Vec<CurveRow>,
    skipped_batches: usize,
}

/// DFP controller backed by the shared policy. In training mode it samples
/// actions, records episodes and runs PPO updates as rollouts fill; in
/// evaluation mode it acts deterministically.
#[derive(Debug, Clone)]
pub struct PpoController {
    pub config: RlConfig,
    pub policy: Mlp,
    pub critic: Mlp,
    trainer: Option<Trainer>,
}

fn sizes(cfg: &RlConfig, out: usize) -> Vec<usize> {
    let mut s = vec![FEATURE_WIDTH];
    s.extend(&cfg.hidden);
    s.push(out);
    s
}

impl PpoController {
    /// Freshly initialized networks, deterministic in `config.seed`.
    pub fn new(config: RlConfig) -> Self {
        let mut rng = stream(config.seed, Domain::Aux, 0);
        let mut policy = Mlp::init(&sizes(&config, 2), Activation::Tanh, &mut rng, 0.01);
        let last = config.hidden.len();
        let ls = policy.bias_offset(last) + 1;
        policy.params_mut()[ls] = config.init_log_sigma;
        let critic = Mlp::init(&sizes(&config, 1), Activation::Tanh, &mut rng, 1.0);
        Self {
            config,
            policy,
            critic,
            trainer: None,
        }
    }

    pub fn with_networks(config: RlConfig, policy: Mlp, critic: Mlp) -> Self {
        Self {
            config,
            policy,
            critic,
            trainer: None,
        }
    }

    pub fn start_training(&mut self) {
        let seed = self.config.seed;
        self.trainer = Some(Trainer {
            act_rng: stream(seed, Domain::Aux, 1),
            shuffle_rng: stream(seed, Domain::Aux, 2),
            opt_policy: Adam::new(self.policy.params().len(), self.config.learning_rate),
            opt_critic: Adam::new(self.critic.params().len(), self.config.learning_rate),
            open: Vec::new(),
            buffer: Vec::new(),
            buffer_steps: 0,
            curve: Vec::new(),
            skipped_batches: 0,
        });
    }

    /// Leaves training mode, returning the curve collected so far.
    pub fn stop_training(&mut self) -> Vec<CurveRow> {
        self.trainer.take().map(|t| t.curve).unwrap_or_default()
    }

    pub fn is_training(&self) -> bool {
        self.trainer.is_some()
    }

    pub fn updates_done(&self) -> usize {
        self.trainer.as_ref().map_or(0, |t| t.curve.len())
    }

    pub fn skipped_batches(&self) -> usize {
        self.trainer.as_ref().map_or(0, |t| t.skipped_batches)
    }

    fn update(&mut self) {
        let cfg = &self.config;
        let t = self.trainer.as_mut().expect("training mode");
        let episodes = std::mem::take(&mut t.buffer);
        t.buffer_steps = 0;

        let mut feats = Vec::new();
        let (mut g, mut lp, mut adv, mut ret, mut rew) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut ratio_errs = Vec::new();
        for e in &episodes {
            let tr = &e.trajectory;
            feats.extend(tr.features.iter().cloned());
            g.extend(&tr.pre_squash);
            lp.extend(&tr.log_probs);
            adv.extend(&tr.advantages);
            ret.extend(&tr.returns);
            rew.extend(&tr.rewards);
            ratio_errs.extend(e.ratio_error);
        }
        let batch = LossBatch {
            features: &feats,
            pre_squash: &g,
            old_log_probs: &lp,
            advantages: &adv,
            returns: &ret,
        };
        let mut gp = vec![0.0; self.policy.params().len()];
        let mut gc = vec![0.0; self.critic.params().len()];
        let mut idx: Vec<usize> = (0..rew.len()).collect();
        let before: LossReport = combined_loss_grad(&self.policy, &self.critic, &batch, &idx, cfg, &mut gp, &mut gc);

        for _ in 0..cfg.epochs {
            idx.shuffle(&mut t.shuffle_rng);
            for chunk in idx.chunks(cfg.minibatch) {
                gp.iter_mut().for_each(|x| *x = 0.0);
                gc.iter_mut().for_each(|x| *x = 0.0);
                let rep = combined_loss_grad(&self.policy, &self.critic, &batch, chunk, cfg, &mut gp, &mut gc);
                if !rep.is_finite() || gp.iter().chain(&gc).any(|x| !x.is_finite()) {
                    log::warn!("skipping minibatch with non-finite loss");
                    t.skipped_batches += 1;
                    continue;
                }
                t.opt_policy.step(self.policy.params_mut(), &gp);
                t.opt_critic.step(self.critic.params_mut(), &gc);
            }
        }

        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        t.curve.push(CurveRow {
            update: t.curve.len(),
            mean_reward: mean(&rew),
            mean_abs_ratio_err: mean(&ratio_errs),
            actor_loss: before.actor,
            critic_loss: before.critic,
            entropy: before.entropy,
        });
    }
}

impl PaymentController for PpoController {
    fn name(&self) -> &str {
        "ppo"
    }

    fn price_click(&mut self, ctx: &ClickContext<'_>) -> Result<f64, ControllerError> {
        let s = ctx.state();
        let cfg = &self.config;
        let feats = build_state_features(s, ctx.ledger, true, ctx.round_in_stage, ctx.stage_len, cfg.xi * s.tcpa);
        let training = self.trainer.as_mut();
        let fault = |e: PpoError| ControllerError::Training(e.to_string());
        let action = policy_act(&self.policy, &feats, cfg.sigma_floor, training.map(|t| &mut t.act_rng)).map_err(fault)?;
        let payment = action.multiplier * s.bid * s.click_cvr;
        if let Some(t) = self.trainer.as_mut() {
            let value = value_estimate(&self.critic, &feats).map_err(fault)?;
            let reward = compute_reward(ctx.states, ctx.bidder, payment, &cfg.reward_params());
            if t.open.len() <= ctx.bidder {
                t.open.resize_with(ctx.states.len(), Trajectory::default);
            }
            let tr = &mut t.open[ctx.bidder];
            tr.features.push(feats);
            tr.multipliers.push(action.multiplier);
            tr.pre_squash.push(action.pre_squash);
            tr.log_probs.push(action.log_prob);
            tr.rewards.push(reward.total);
            tr.smoothness.push(reward.r2);
            tr.values.push(value);
        }
        Ok(payment)
    }

    fn end_stage(&mut self, close: &StageClose<'_>) -> Result<(), ControllerError> {
        let cfg = self.config.clone();
        let Some(t) = self.trainer.as_mut() else {
            return Ok(());
        };
        let terminal = terminal_plt_reward(close.states, close.true_conversions, &cfg.reward_params());
        for (m, tr) in t.open.iter_mut().enumerate() {
            if tr.is_empty() {
                continue;
            }
            let mut tr = std::mem::take(tr);
            let last = tr.len() - 1;
            tr.rewards[last] = terminal + cfg.zeta * tr.smoothness[last];
            tr.finalize(cfg.gamma, cfg.lambda);
            let s = &close.states[m];
            let z = close.true_conversions[m];
            let ratio_error = (z >= 1 && s.stage_paid > 0.0).then(|| (z as f64 * s.tcpa / s.stage_paid - 1.0).abs());
            t.buffer_steps += tr.len();
            t.buffer.push(Episode {
                bidder: m,
                stage: close.stage,
                trajectory: tr,
                ratio_error,
            });
        }
        if t.buffer_steps >= cfg.rollout_steps && t.curve.len() < cfg.updates {
            self.update();
        }
        Ok(())
    }
}

/// The DFP simulation a policy is trained in. Each pass over the market
/// uses a fresh outcome seed (`market.seed + pass`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEnv {
    pub market: MarketConfig,
    pub mechanism: MechanismConfig,
    pub agents: Vec<AgentSpec>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub controller: PpoController,
    pub curve: Vec<CurveRow>,
    pub skipped_batches: usize,
}

pub fn train(env: &TrainEnv, config: &RlConfig) -> Result<TrainOutcome, PpoError> {
    config.validate()?;
    env.mechanism.validate().map_err(|e| PpoError::Sim(Box::new(e)))?;
    let mut ctrl = PpoController::new(config.clone());
    if config.updates == 0 {
        return Ok(TrainOutcome {
            controller: ctrl,
            curve: Vec::new(),
            skipped_batches: 0,
        });
    }
    ctrl.start_training();
    let mut pass = 0u64;
    while ctrl.updates_done() < config.updates {
        let mut cfg = env.market.clone();
        cfg.seed = env.market.seed.wrapping_add(pass);
        let market = generate_market(&cfg).map_err(|e| PpoError::Sim(Box::new(e.into())))?;
        let before = ctrl.trainer.as_ref().map_or(0, |t| t.buffer_steps + t.curve.len());
        run_auction(&market, &env.mechanism, &env.agents, Some(&mut ctrl)).map_err(|e| PpoError::Sim(Box::new(e)))?;
        let after = ctrl.trainer.as_ref().map_or(0, |t| t.buffer_steps + t.curve.len());
        if before == after {
            return Err(PpoError::Config("training environment produced no clicks".into()));
        }
        pass += 1;
    }
    let skipped_batches = ctrl.skipped_batches();
    let curve = ctrl.stop_training();
    Ok(TrainOutcome {
        controller: ctrl,
        curve,
        skipped_batches,
    })
}

/// Runs `market` with a deterministic copy of `controller`.
pub fn evaluate(
    market: &MarketLog,
    mechanism: &MechanismConfig,
    agents: &[AgentSpec],
    controller: &PpoController,
) -> Result<SimulationResult, SimError> {
    let mut c = PpoController::with_networks(controller.config.clone(), controller.policy.clone(), controller.critic.clone());
    run_auction(market, mechanism, agents, Some(&mut c))
}

/// Text checkpoint:
///
/// ```text
/// autobid-ppo-checkpoint 1
/// config <RlConfig as one JSON line>
/// policy <activation> <layer sizes…>
/// <one parameter per line, layer by layer: weights row-major, then biases>
/// critic <activation> <layer sizes…>
/// <parameters>
/// ```
pub fn save_checkpoint<W: Write>(controller: &PpoController, mut w: W) -> Result<(), PpoError> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    let json = serde_json::to_string(&controller.config).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
    writeln!(w, "config {json}")?;
    for (name, net) in [("policy", &controller.policy), ("critic", &controller.critic)] {
        let sizes: Vec<String> = net.sizes().iter().map(|s| s.to_string()).collect();
        writeln!(w, "{name} {} {}", net.activation().as_str(), sizes.join(" "))?;
        for p in net.params() {
            writeln!(w, "{p}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(reader: R) -> Result<PpoController, PpoError> {
    let bad = |m: String| PpoError::Checkpoint(m);
    let mut lines = reader.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), PpoError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(PpoError::Checkpoint(format!("unexpected end of file, expected {what}"))),
        }
    };
    let (_, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(bad(format!("unrecognized header `{}`", magic.trim())));
    }
    let (ln, cfg_line) = next("config")?;
    let json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| bad(format!("line {ln}: expected `config`")))?;
    let config: RlConfig = serde_json::from_str(json).map_err(|e| bad(format!("line {ln}: {e}")))?;
    let mut nets = Vec::new();
    for name in ["policy", "critic"] {
        let (ln, head) = next(name)?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(name) {
            return Err(bad(format!("line {ln}: expected `{name}`")));
        }
        let act = parts
            .next()
            .and_then(Activation::parse)
            .ok_or_else(|| bad(format!("line {ln}: bad activation")))?;
        let sizes: Vec<usize> = parts
            .map(|p| p.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {ln}: {e}")))?;
        if sizes.len() < 2 || sizes[0] != FEATURE_WIDTH {
            return Err(bad(format!("line {ln}: layer sizes must start with the feature width {FEATURE_WIDTH}")));
        }
        let n = super::net::param_count(&sizes);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, l) = next("parameter")?;
            let v: f64 = l.trim().parse().map_err(|e| bad(format!("line {ln}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("line {ln}: non-finite parameter")));
            }
            params.push(v);
        }
        nets.push(Mlp::from_params(&sizes, act, params).expect("count checked"));
    }
    let critic = nets.pop().expect("two nets");
    let policy = nets.pop().expect("two nets");
    if policy.output_width() != 2 || critic.output_width() != 1 {
        return Err(bad("policy must output 2 values and critic 1".into()));
    }
    Ok(PpoController::with_networks(config, policy, critic))
}
