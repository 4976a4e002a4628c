//! Config-driven experiment runner: simulations, analysis tables, PPO
//! training and plot-data export.
//!
//! Artifact layout of `run_experiment`:
//!
//! ```text
//! <out>/manifest.json
//! <out>/chernoff.csv                       epsilon,eta,min_clicks,trials,violation_rate
//! <out>/seed_<s>/cfp_tau.csv               tau,groups,entries,mean_abs_err,nonincreasing
//! <out>/seed_<s>/<label>/rounds.csv        round,stage,bidder,slot,score,click,conversion,payment,bid
//! <out>/seed_<s>/<label>/summary.csv       per-bidder totals
//! <out>/seed_<s>/<label>/ratios.csv        bidder,stage,ratio
//! <out>/seed_<s>/<label>/table.csv         mechanism,metric,upper,lower,mean
//! <out>/seed_<s>/<label>/fluctuation.csv   bidder,clicks,variance,range
//! <out>/seed_<s>/<label>/etic.csv          epsilon,entries,violation_rate
//! <out>/seed_<s>/<label>/drift.csv         bidder,tcpa,final_bid,drift,withdrawn
//! ```
//!
//! `rounds.csv` can be cut down to clicked impressions or skipped with
//! `rounds_csv = "clicks" | "none"`.
//!
//! `<label>` is the mechanism name, suffixed with the controller for DFP
//! (`DFP-debt`). A controller fault leaves the partial CSVs plus an `ERROR`
//! file in the run directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{bid_drift_metric, AgentSpec};
use crate::analysis::{
    cfp_tau_rollup, chernoff_empirical_check, chernoff_min_clicks, cpa_ratio_table, etic_violation_rate,
    mean_relative_payment_change, payment_fluctuation, write_summary_csv, AnalysisError, ChernoffQuery, SummaryRow,
};
use crate::controllers::{DebtController, OracleController, PaymentController};
use crate::market::{generate_market, Interval, MarketConfig, MarketError, MarketLog, StagePlan};
use crate::mechanisms::{
    run_auction, FeedbackDelay, MechanismConfig, MechanismKind, RankingRule, SimError, SimulationResult,
};
use crate::ppo::{
    load_checkpoint, save_checkpoint, train, write_curve_csv, PpoController, PpoError, RlConfig, TrainEnv,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing artifact file {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("controller fault in {dir}: {message}")]
    ControllerFault { dir: PathBuf, message: String },
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Market section. `stage_plan` may be replaced by the `stages` ×
/// `rounds_per_stage` shorthand; `num_rounds` defaults to the plan's total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub num_bidders: usize,
    pub num_slots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_plan: Option<StagePlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_per_stage: Option<usize>,
    pub ctr_range: Interval,
    pub cvr_range: Interval,
    pub value_range: Interval,
    pub tcpa_range: Interval,
    /// Replay log (`round,bidder,slot,ctr,cvr,value[,click,conversion]`),
    /// relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
}

impl MarketSection {
    pub fn to_config(&self, seed: u64) -> Result<MarketConfig> {
        let plan = match (&self.stage_plan, self.stages, self.rounds_per_stage) {
            (Some(p), None, None) => p.clone(),
            (None, Some(t), Some(r)) => StagePlan::uniform(t, r),
            _ => {
                return Err(ExperimentError::Config(
                    "market: give either `stage_plan` or both `stages` and `rounds_per_stage`".into(),
                ))
            }
        };
        let cfg = MarketConfig {
            num_bidders: self.num_bidders,
            num_rounds: self.num_rounds.unwrap_or(plan.total_rounds()),
            num_slots: self.num_slots,
            stage_plan: plan,
            ctr_range: self.ctr_range,
            cvr_range: self.cvr_range,
            value_range: self.value_range,
            tcpa_range: self.tcpa_range,
            seed,
        };
        cfg.validate().map_err(|e| ExperimentError::Config(format!("market: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub epsilons: Vec<f64>,
    pub taus: Vec<usize>,
    /// Write the click-threshold report with a Monte Carlo check.
    pub chernoff: bool,
    pub chernoff_trials: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1],
            taus: vec![1, 2, 4, 8],
            chernoff: true,
            chernoff_trials: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    /// Per-click cap of the debt controller, in multiples of tCPA.
    pub debt_cap: f64,
    /// PPO checkpoint for the `ppo` controller, relative to the config file.
    /// Without one the policy is trained from the `rl` section first.
    pub checkpoint: Option<PathBuf>,
    /// Outcome seed of the first training pass; later passes count up.
    pub train_market_seed: u64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            debt_cap: 10.0,
            checkpoint: None,
            train_market_seed: 1000,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Which impressions go into `rounds.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundsCsv {
    #[default]
    All,
    /// Clicked impressions only.
    Clicks,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rounds_csv: RoundsCsv,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub market: MarketSection,
    pub mechanisms: Vec<MechanismConfig>,
    /// One spec for every bidder, or one per bidder.
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl: Option<RlConfig>,
    #[serde(default)]
    pub controllers: ControllerSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub const DESK_PRESET: &str = include_str!("../presets/desk.toml");
pub const SPARSE_PRESET: &str = include_str!("../presets/sparse.toml");
pub const TOY_PRESET: &str = include_str!("../presets/toy.toml");

/// Built-in configs by name: `desk`, `sparse`, `toy`.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let text = match name {
        "desk" => DESK_PRESET,
        "sparse" => SPARSE_PRESET,
        "toy" => TOY_PRESET,
        _ => return None,
    };
    Some(ExperimentConfig::from_toml(text, Path::new(".")).expect("built-in preset parses"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let market = self.market.to_config(0)?;
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed required".into());
        }
        if self.mechanisms.is_empty() {
            return bad("mechanisms: at least one mechanism required".into());
        }
        for (i, m) in self.mechanisms.iter().enumerate() {
            m.validate().map_err(|e| ExperimentError::Config(format!("mechanisms[{i}]: {e}")))?;
            match m.controller.as_deref() {
                None | Some("debt") | Some("oracle") => {}
                Some("ppo") => {
                    if self.rl.is_none() && self.controllers.checkpoint.is_none() {
                        return bad(format!("mechanisms[{i}]: controller `ppo` needs an `rl` section or controllers.checkpoint"));
                    }
                }
                Some(other) => return bad(format!("mechanisms[{i}].controller: unknown controller `{other}`")),
            }
        }
        if !(self.agents.is_empty() || self.agents.len() == 1 || self.agents.len() == market.num_bidders) {
            return bad(format!(
                "agents: expected 1 or {} entries, got {}",
                market.num_bidders,
                self.agents.len()
            ));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if let AgentSpec::RiskAverse(p) = a {
                p.validate().map_err(|e| ExperimentError::Config(format!("agents[{i}]: {e}")))?;
            }
        }
        if let Some(rl) = &self.rl {
            rl.validate().map_err(|e| ExperimentError::Config(format!("rl: {e}")))?;
        }
        if !(self.controllers.debt_cap > 0.0) {
            return bad("controllers.debt_cap must be positive".into());
        }
        if self.analysis.epsilons.iter().any(|&e| !(e > 0.0)) {
            return bad("analysis.epsilons must be positive".into());
        }
        if self.analysis.taus.contains(&0) {
            return bad("analysis.taus must be at least 1".into());
        }
        Ok(())
    }

    pub fn agent_specs(&self) -> Vec<AgentSpec> {
        let m = self.market.num_bidders;
        match self.agents.len() {
            0 => vec![AgentSpec::Truthful; m],
            1 => vec![self.agents[0]; m],
            _ => self.agents.clone(),
        }
    }

    /// SHA-256 of the normalized config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Market for one seed, generated or replayed.
    pub fn market_log(&self, seed: u64) -> Result<MarketLog> {
        let cfg = self.market.to_config(seed)?;
        match &self.market.replay {
            None => Ok(generate_market(&cfg)?),
            Some(p) => {
                let path = self.resolve(p);
                let f = File::open(&path).map_err(io_err(&path))?;
                Ok(MarketLog::from_csv(std::io::BufReader::new(f), &cfg)?)
            }
        }
    }

    /// DFP environment for training the `ppo` controller.
    pub fn train_env(&self) -> Result<TrainEnv> {
        let feedback = self
            .mechanisms
            .iter()
            .find(|m| m.kind == MechanismKind::Dfp)
            .map(|m| m.feedback)
            .unwrap_or_default();
        Ok(TrainEnv {
            market: self.market.to_config(self.controllers.train_market_seed)?,
            mechanism: MechanismConfig {
                feedback,
                ..MechanismConfig::dfp("ppo")
            },
            agents: self.agent_specs(),
        })
    }
}

/// Overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Keep only mechanisms whose label or kind matches (case-insensitive).
    pub mechanism: Option<String>,
}

/// Directory label: the mechanism, plus the controller and any in-stage
/// feedback delay for DFP (`DFP-debt`, `DFP-debt-r20`).
pub fn mechanism_label(m: &MechanismConfig) -> String {
    let mut label = m.kind.to_string();
    if let Some(c) = &m.controller {
        label = format!("{label}-{c}");
    }
    if let FeedbackDelay::Rounds(l) = m.feedback {
        label = format!("{label}-r{l}");
    }
    if m.ranking != RankingRule::default() {
        label = format!("{label}-{}", serde_json::to_value(m.ranking).expect("unit variant").as_str().unwrap_or("rank"));
    }
    label
}

fn matches_filter(m: &MechanismConfig, filter: &Option<String>) -> bool {
    filter.as_ref().is_none_or(|f| {
        f.eq_ignore_ascii_case(&mechanism_label(m)) || f.eq_ignore_ascii_case(m.kind.as_str())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mechanism: String,
    pub dir: PathBuf,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub mechanisms: Vec<String>,
    pub runs: Vec<RunRecord>,
    /// Seconds since the Unix epoch. The only nondeterministic field.
    pub created_unix: u64,
}

pub const MANIFEST: &str = "manifest.json";

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn ppo_controller(cfg: &ExperimentConfig, cache: &mut Option<PpoController>) -> Result<PpoController> {
    if cache.is_none() {
        let ctrl = match &cfg.controllers.checkpoint {
            Some(p) => {
                let path = cfg.resolve(p);
                let f = File::open(&path).map_err(io_err(&path))?;
                load_checkpoint(std::io::BufReader::new(f))?
            }
            None => {
                let rl = cfg.rl.as_ref().ok_or_else(|| ExperimentError::Config("rl section missing".into()))?;
                train(&cfg.train_env()?, rl)?.controller
            }
        };
        *cache = Some(ctrl);
    }
    let c = cache.as_ref().expect("cached above");
    Ok(PpoController::with_networks(c.config.clone(), c.policy.clone(), c.critic.clone()))
}

/// Runs one mechanism on `market` with the controller it names.
pub fn simulate(
    cfg: &ExperimentConfig,
    market: &MarketLog,
    mech: &MechanismConfig,
    ppo_cache: &mut Option<PpoController>,
) -> std::result::Result<SimulationResult, ExperimentError> {
    let agents = cfg.agent_specs();
    let mut debt = DebtController {
        cap_multiple: cfg.controllers.debt_cap,
    };
    let mut oracle = OracleController;
    let mut ppo;
    let ctrl: Option<&mut dyn PaymentController> = match mech.controller.as_deref() {
        None => None,
        Some("debt") => Some(&mut debt),
        Some("oracle") => Some(&mut oracle),
        Some("ppo") => {
            ppo = ppo_controller(cfg, ppo_cache)?;
            Some(&mut ppo)
        }
        Some(other) => return Err(ExperimentError::Config(format!("unknown controller `{other}`"))),
    };
    Ok(run_auction(market, mech, &agents, ctrl)?)
}

/// Writes every per-run table for `result` into `dir`.
pub fn write_run_tables(cfg: &ExperimentConfig, result: &SimulationResult, label: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    match cfg.rounds_csv {
        RoundsCsv::All => result.write_rounds_csv(create(&dir.join("rounds.csv"))?)?,
        RoundsCsv::Clicks => result.write_rounds_csv_filtered(create(&dir.join("rounds.csv"))?, |r| r.click)?,
        RoundsCsv::None => {}
    }
    result.write_summary_csv(create(&dir.join("summary.csv"))?)?;
    let ratios = cpa_ratio_table(result);
    ratios.write_csv(create(&dir.join("ratios.csv"))?)?;
    let fluct = payment_fluctuation(result);
    fluct.write_csv(create(&dir.join("fluctuation.csv"))?)?;
    write_summary_csv(
        &[
            SummaryRow::new(label, "tcpa_cpa", ratios.summary),
            SummaryRow::new(label, "var_p", fluct.variance),
            SummaryRow::new(label, "range_p", fluct.range),
        ],
        create(&dir.join("table.csv"))?,
    )?;

    let mut w = csv::Writer::from_writer(create(&dir.join("etic.csv"))?);
    w.write_record(["epsilon", "entries", "violation_rate"])?;
    for &eps in &cfg.analysis.epsilons {
        let rate = etic_violation_rate(&ratios, eps).map_or("undefined".to_string(), |r| r.to_string());
        w.write_record(&[eps.to_string(), ratios.entries.len().to_string(), rate])?;
    }
    w.flush().map_err(io_err(dir))?;

    let drift = bid_drift_metric(result);
    let mut w = csv::Writer::from_writer(create(&dir.join("drift.csv"))?);
    w.write_record(["bidder", "tcpa", "final_bid", "drift", "withdrawn"])?;
    for m in 0..result.num_bidders {
        w.write_record(&[
            m.to_string(),
            result.tcpa[m].to_string(),
            result.final_bids[m].to_string(),
            drift.per_bidder[m].to_string(),
            drift.withdrawn[m].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(())
}

fn write_tau_sweep(result: &SimulationResult, taus: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["tau", "groups", "entries", "mean_abs_err", "nonincreasing"])?;
    let mut prev: Option<f64> = None;
    for &tau in taus {
        let table = cfp_tau_rollup(result, tau);
        let err = table.mean_abs_error();
        let ok = match (prev, err) {
            (Some(p), Some(e)) => e <= p,
            _ => true,
        };
        w.write_record(&[
            tau.to_string(),
            crate::analysis::rollup_groups(result.completed_stages, tau).len().to_string(),
            table.entries.len().to_string(),
            err.map_or("undefined".to_string(), |e| e.to_string()),
            ok.to_string(),
        ])?;
        if err.is_some() {
            prev = err;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_chernoff(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<()> {
    let eta = cfg.market.cvr_range.hi;
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["epsilon", "eta", "min_clicks", "trials", "violation_rate"])?;
    for &eps in &cfg.analysis.epsilons {
        let clicks = chernoff_min_clicks(&ChernoffQuery::new(eps, eta)?);
        let check = chernoff_empirical_check(eta, eps, cfg.analysis.chernoff_trials.max(1), seed)?;
        w.write_record(&[
            eps.to_string(),
            eta.to_string(),
            clicks.to_string(),
            cfg.analysis.chernoff_trials.to_string(),
            check.violation_rate.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Runs every seed × mechanism and writes the artifact directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let out = opts.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.output_dir));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let seeds = opts.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let mechs: Vec<&MechanismConfig> = cfg.mechanisms.iter().filter(|m| matches_filter(m, &opts.mechanism)).collect();
    if mechs.is_empty() {
        return Err(ExperimentError::Config(format!(
            "--mechanism {}: no configured mechanism matches",
            opts.mechanism.as_deref().unwrap_or("")
        )));
    }
    let mut manifest = Manifest {
        tool: "autobid".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        seeds: seeds.clone(),
        mechanisms: mechs.iter().map(|m| mechanism_label(m)).collect(),
        runs: Vec::new(),
        created_unix: 0,
    };
    let mut ppo_cache = None;
    let mut fault = None;
    'seeds: for &seed in &seeds {
        let market = cfg.market_log(seed)?;
        let seed_dir = out.join(format!("seed_{seed}"));
        for mech in &mechs {
            let label = mechanism_label(mech);
            let dir = seed_dir.join(&label);
            let rel = dir.strip_prefix(&out).unwrap_or(&dir).to_path_buf();
            match simulate(cfg, &market, mech, &mut ppo_cache) {
                Ok(result) => {
                    write_run_tables(cfg, &result, &label, &dir)?;
                    if mech.kind == MechanismKind::Cfp && !cfg.analysis.taus.is_empty() {
                        write_tau_sweep(&result, &cfg.analysis.taus, &seed_dir.join("cfp_tau.csv"))?;
                    }
                    manifest.runs.push(RunRecord {
                        seed,
                        mechanism: label,
                        dir: rel,
                        status: "ok".into(),
                    });
                }
                Err(ExperimentError::Sim(SimError::Controller { round, source, partial })) => {
                    write_run_tables(cfg, &partial, &label, &dir)?;
                    let message = format!("controller fault at round {round}: {source}");
                    let mut f = create(&dir.join("ERROR"))?;
                    writeln!(f, "{message}").map_err(io_err(&dir))?;
                    f.flush().map_err(io_err(&dir))?;
                    manifest.runs.push(RunRecord {
                        seed,
                        mechanism: label,
                        dir: rel,
                        status: "error".into(),
                    });
                    fault = Some(ExperimentError::ControllerFault { dir, message });
                    break 'seeds;
                }
                Err(e) => return Err(e),
            }
        }
    }
    if cfg.analysis.chernoff && fault.is_none() {
        write_chernoff(cfg, seeds[0], &out.join("chernoff.csv"))?;
    }
    manifest.created_unix = now_unix();
    let path = out.join(MANIFEST);
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.flush().map_err(io_err(&path))?;
    match fault {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Writes the market log of every seed as `market_seed_<s>.csv`.
pub fn generate_command(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let out = opts.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.output_dir));
    let seeds = opts.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    seeds
        .iter()
        .map(|&s| {
            let path = out.join(format!("market_seed_{s}.csv"));
            let mut w = create(&path)?;
            cfg.market_log(s)?.write_csv(&mut w)?;
            w.flush().map_err(io_err(&path))?;
            Ok(path)
        })
        .collect()
}

/// Per-seed comparison of a trained policy with the untrained one and the
/// debt controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub seed: u64,
    pub untrained_err: f64,
    pub trained_err: f64,
    pub debt_err: f64,
    pub trained_fluctuation: f64,
    pub debt_fluctuation: f64,
}

pub const EVAL_HEADER: [&str; 6] = [
    "seed",
    "untrained_err",
    "trained_err",
    "debt_err",
    "trained_fluctuation",
    "debt_fluctuation",
];

/// Mean relative click-to-click payment change over bidders with at least
/// two priced clicks.
pub fn mean_payment_fluctuation(result: &SimulationResult) -> f64 {
    let v: Vec<f64> = (0..result.num_bidders)
        .filter_map(|m| mean_relative_payment_change(result, m))
        .collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate_policy(cfg: &ExperimentConfig, trained: &PpoController, seeds: &[u64]) -> Result<Vec<EvalRow>> {
    let env = cfg.train_env()?;
    let untrained = PpoController::new(trained.config.clone());
    let debt_mech = MechanismConfig {
        controller: Some("debt".into()),
        ..env.mechanism.clone()
    };
    let err = |r: &SimulationResult| cpa_ratio_table(r).mean_abs_error().unwrap_or(f64::NAN);
    seeds
        .iter()
        .map(|&seed| {
            let market = cfg.market_log(seed)?;
            let a = crate::ppo::evaluate(&market, &env.mechanism, &env.agents, &untrained)?;
            let b = crate::ppo::evaluate(&market, &env.mechanism, &env.agents, trained)?;
            let mut debt = DebtController {
                cap_multiple: cfg.controllers.debt_cap,
            };
            let c = run_auction(&market, &debt_mech, &env.agents, Some(&mut debt))?;
            Ok(EvalRow {
                seed,
                untrained_err: err(&a),
                trained_err: err(&b),
                debt_err: err(&c),
                trained_fluctuation: mean_payment_fluctuation(&b),
                debt_fluctuation: mean_payment_fluctuation(&c),
            })
        })
        .collect()
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAL_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.seed.to_string(),
            r.untrained_err.to_string(),
            r.trained_err.to_string(),
            r.debt_err.to_string(),
            r.trained_fluctuation.to_string(),
            r.debt_fluctuation.to_string(),
        ])?;
    }
    w.flush().map_err(|e| ExperimentError::Io {
        path: PathBuf::from("eval.csv"),
        source: e,
    })?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub eval: PathBuf,
    pub controller: PpoController,
    pub eval_rows: Vec<EvalRow>,
}

/// Trains the `ppo` controller on the config's DFP environment and writes
/// `checkpoint.txt`, `curve.csv` and `eval.csv` (held-out seeds).
pub fn train_command(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainArtifacts> {
    let mut rl = cfg
        .rl
        .clone()
        .ok_or_else(|| ExperimentError::Config("rl: section required for training".into()))?;
    if let Some(s) = opts.seed {
        rl.seed = s;
    }
    let out = opts.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.output_dir));
    let outcome = train(&cfg.train_env()?, &rl)?;
    let checkpoint = out.join("checkpoint.txt");
    let mut w = create(&checkpoint)?;
    save_checkpoint(&outcome.controller, &mut w)?;
    w.flush().map_err(io_err(&checkpoint))?;
    let curve = out.join("curve.csv");
    write_curve_csv(&outcome.curve, create(&curve)?)?;
    let eval_rows = evaluate_policy(cfg, &outcome.controller, &cfg.seeds)?;
    let eval = out.join("eval.csv");
    write_eval_csv(&eval_rows, create(&eval)?)?;
    Ok(TrainArtifacts {
        checkpoint,
        curve,
        eval,
        controller: outcome.controller,
        eval_rows,
    })
}

#[derive(Debug, Deserialize)]
struct RatioRow {
    bidder: usize,
    stage: usize,
    ratio: f64,
}

#[derive(Debug, Deserialize)]
struct TauRow {
    tau: usize,
    mean_abs_err: String,
}

#[derive(Debug, Deserialize)]
struct SummaryCsvRow {
    bidder: usize,
    tcpa: f64,
    mean_stage_clicks: f64,
}

#[derive(Debug, Deserialize)]
struct RoundRow {
    bidder: usize,
    click: u8,
    payment: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.is_file() {
        return Err(ExperimentError::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Sparse bidders are those averaging this many clicks per stage.
pub const SPARSE_CLICKS: (f64, f64) = (100.0, 150.0);

/// Plot-data files under `<dir>/report/`:
///
/// - `stage_quartiles.csv` `seed,mechanism,stage,lower,median,upper,mean`
/// - `cfp_tau_errors.csv` `seed,series,mean_abs_err` (CFP-τ rows plus every run)
/// - `sparse_ratios.csv` `seed,mechanism,bidder,stage,ratio` for sparse bidders
/// - `click_payments.csv` `seed,mechanism,bidder,click,payment,normalized`
///   for the first seed's busiest sparse-range bidder (busiest overall if none)
pub fn report_command(dir: &Path) -> Result<Vec<PathBuf>> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(ExperimentError::Missing(mpath));
    }
    let manifest: Manifest = serde_json::from_reader(File::open(&mpath).map_err(io_err(&mpath))?)?;
    let runs: Vec<&RunRecord> = manifest.runs.iter().filter(|r| r.status == "ok").collect();
    let report = dir.join("report");
    let quartiles = report.join("stage_quartiles.csv");
    let tau_errors = report.join("cfp_tau_errors.csv");
    let sparse = report.join("sparse_ratios.csv");
    let payments = report.join("click_payments.csv");

    let mut w_quartiles = csv::Writer::from_writer(create(&quartiles)?);
    w_quartiles.write_record(["seed", "mechanism", "stage", "lower", "median", "upper", "mean"])?;
    let mut w_tau = csv::Writer::from_writer(create(&tau_errors)?);
    w_tau.write_record(["seed", "series", "mean_abs_err"])?;
    let mut w_sparse = csv::Writer::from_writer(create(&sparse)?);
    w_sparse.write_record(["seed", "mechanism", "bidder", "stage", "ratio"])?;
    let mut w_payments = csv::Writer::from_writer(create(&payments)?);
    w_payments.write_record(["seed", "mechanism", "bidder", "click", "payment", "normalized"])?;

    let mut payments_bidder: Option<(u64, usize)> = None;
    let mut seen_tau = std::collections::BTreeSet::new();
    for run in &runs {
        let rdir = dir.join(&run.dir);
        let ratios: Vec<RatioRow> = read_rows(&rdir.join("ratios.csv"))?;
        let summary: Vec<SummaryCsvRow> = read_rows(&rdir.join("summary.csv"))?;
        let seed = run.seed.to_string();

        let mut by_stage: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &ratios {
            by_stage.entry(r.stage).or_default().push(r.ratio);
        }
        for (stage, mut v) in by_stage {
            v.sort_by(f64::total_cmp);
            let q = |p| crate::analysis::quantile(&v, p).unwrap_or(f64::NAN).to_string();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            w_quartiles.write_record(&[seed.clone(), run.mechanism.clone(), stage.to_string(), q(0.25), q(0.5), q(0.75), mean.to_string()])?;
        }

        let err = ratios.iter().map(|r| (r.ratio - 1.0).abs()).sum::<f64>() / ratios.len().max(1) as f64;
        w_tau.write_record(&[seed.clone(), run.mechanism.clone(), err.to_string()])?;
        if seen_tau.insert(run.seed) {
            let tpath = dir.join(format!("seed_{}", run.seed)).join("cfp_tau.csv");
            if tpath.is_file() {
                for t in read_rows::<TauRow>(&tpath)? {
                    w_tau.write_record(&[seed.clone(), format!("CFP-{}", t.tau), t.mean_abs_err])?;
                }
            }
        }

        let sparse: Vec<usize> = summary
            .iter()
            .filter(|s| s.mean_stage_clicks >= SPARSE_CLICKS.0 && s.mean_stage_clicks <= SPARSE_CLICKS.1)
            .map(|s| s.bidder)
            .collect();
        for r in ratios.iter().filter(|r| sparse.contains(&r.bidder)) {
            w_sparse.write_record(&[seed.clone(), run.mechanism.clone(), r.bidder.to_string(), r.stage.to_string(), r.ratio.to_string()])?;
        }

        let chosen = match payments_bidder {
            Some((s, b)) if s == run.seed => Some(b),
            Some(_) => None,
            None => {
                let pool: Vec<&SummaryCsvRow> = summary.iter().filter(|s| sparse.contains(&s.bidder)).collect();
                let pool = if pool.is_empty() { summary.iter().collect() } else { pool };
                let b = pool
                    .iter()
                    .max_by(|a, b| a.mean_stage_clicks.total_cmp(&b.mean_stage_clicks).then(b.bidder.cmp(&a.bidder)))
                    .map(|s| s.bidder);
                payments_bidder = b.map(|b| (run.seed, b));
                b
            }
        };
        if let Some(b) = chosen {
            let tcpa = summary.iter().find(|s| s.bidder == b).map_or(1.0, |s| s.tcpa);
            let rounds: Vec<RoundRow> = read_rows(&rdir.join("rounds.csv"))?;
            for (i, r) in rounds.iter().filter(|r| r.bidder == b && r.click == 1).enumerate() {
                w_payments.write_record(&[
                    seed.clone(),
                    run.mechanism.clone(),
                    b.to_string(),
                    i.to_string(),
                    r.payment.to_string(),
                    (r.payment / tcpa).to_string(),
                ])?;
            }
        }
    }
    for (w, p) in [(w_quartiles, &quartiles), (w_tau, &tau_errors), (w_sparse, &sparse), (w_payments, &payments)] {
        w.into_inner()
            .map_err(|e| ExperimentError::Io {
                path: p.clone(),
                source: e.into_error(),
            })?
            .flush()
            .map_err(io_err(p))?;
    }
    Ok(vec![quartiles, tau_errors, sparse, payments])
}
