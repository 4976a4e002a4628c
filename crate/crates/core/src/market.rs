//! Synthetic auction environments and stochastic click/conversion sampling.
//!
//! A [`MarketLog`] describes `N` rounds of a `K`-slot auction among `M`
//! bidders. Generated logs are lazy: each [`RoundSpec`] is recomputed on demand
//! from its counter-addressed stream (see [`crate::rng`]), so a desk-scale
//! market with millions of (round, bidder, slot) cells never has to be held in
//! memory. Replayed logs (CSV) are stored explicitly.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain, StreamFactory};

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid market configuration: {0}")]
    Config(String),
    #[error("allocation violates slot constraints: {0}")]
    Allocation(String),
    #[error("round index {index} out of range (0..{len})")]
    RoundOutOfRange { index: usize, len: usize },
    #[error("replay log: {0}")]
    Replay(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MarketError> = std::result::Result<T, E>;

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self { lo: v[0], hi: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(v: Interval) -> Self {
        [v.lo, v.hi]
    }
}

/// Partition of the `N` rounds into consecutive stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct StagePlan {
    lengths: Vec<usize>,
    // starts[t] = first round of stage t; starts[T] = N
    starts: Vec<usize>,
}

impl StagePlan {
    pub fn new(lengths: Vec<usize>) -> Self {
        let mut starts = Vec::with_capacity(lengths.len() + 1);
        let mut acc = 0;
        starts.push(0);
        for &l in &lengths {
            acc += l;
            starts.push(acc);
        }
        Self { lengths, starts }
    }

    /// `stages` stages of `rounds_per_stage` rounds each.
    pub fn uniform(stages: usize, rounds_per_stage: usize) -> Self {
        Self::new(vec![rounds_per_stage; stages])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn num_stages(&self) -> usize {
        self.lengths.len()
    }

    pub fn total_rounds(&self) -> usize {
        *self.starts.last().unwrap_or(&0)
    }

    pub fn len_of(&self, stage: usize) -> usize {
        self.lengths[stage]
    }

    /// Rounds belonging to `stage`.
    pub fn bounds(&self, stage: usize) -> Range<usize> {
        self.starts[stage]..self.starts[stage + 1]
    }

    /// True when `round` is the last round of its stage.
    pub fn is_stage_end(&self, round: usize) -> bool {
        self.starts[1..].binary_search(&(round + 1)).is_ok()
    }

    /// Stage index containing `round`.
    pub fn stage_of(&self, round: usize) -> Result<usize> {
        let n = self.total_rounds();
        if round >= n {
            return Err(MarketError::RoundOutOfRange { index: round, len: n });
        }
        // number of stage ends <= round; zero-length stages are skipped over
        Ok(self.starts[1..].partition_point(|&end| end <= round))
    }
}

impl From<Vec<usize>> for StagePlan {
    fn from(v: Vec<usize>) -> Self {
        Self::new(v)
    }
}

impl From<StagePlan> for Vec<usize> {
    fn from(p: StagePlan) -> Self {
        p.lengths
    }
}

/// Free function form of [`StagePlan::stage_of`].
pub fn stage_of(round_index: usize, plan: &StagePlan) -> Result<usize> {
    plan.stage_of(round_index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub num_bidders: usize,
    pub num_rounds: usize,
    pub num_slots: usize,
    pub stage_plan: StagePlan,
    pub ctr_range: Interval,
    pub cvr_range: Interval,
    pub value_range: Interval,
    pub tcpa_range: Interval,
    #[serde(default)]
    pub seed: u64,
}

impl MarketConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MarketError::Config(msg));
        if self.num_bidders == 0 || self.num_rounds == 0 || self.num_slots == 0 {
            return bad("num_bidders, num_rounds and num_slots must be positive".into());
        }
        if self.stage_plan.total_rounds() != self.num_rounds {
            return bad(format!(
                "stage_plan sums to {} but num_rounds is {}",
                self.stage_plan.total_rounds(),
                self.num_rounds
            ));
        }
        for (name, r) in [("ctr_range", self.ctr_range), ("cvr_range", self.cvr_range)] {
            if !r.is_valid() || r.lo <= 0.0 || r.hi > 1.0 {
                return bad(format!("{name} must be a nonempty interval inside (0, 1], got [{}, {}]", r.lo, r.hi));
            }
        }
        if self.cvr_range.hi > self.ctr_range.lo {
            return bad(format!(
                "cvr_range upper bound {} exceeds ctr_range lower bound {}",
                self.cvr_range.hi, self.ctr_range.lo
            ));
        }
        if !self.value_range.is_valid() || self.value_range.lo < 0.0 {
            return bad("value_range must be a nonempty nonnegative interval".into());
        }
        if !self.tcpa_range.is_valid() || self.tcpa_range.lo <= 0.0 {
            return bad("tcpa_range must be a nonempty positive interval".into());
        }
        Ok(())
    }
}

/// Common-knowledge parameters of one auction round, indexed `[bidder * K + slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSpec {
    pub index: usize,
    pub num_bidders: usize,
    pub num_slots: usize,
    pub ctr: Vec<f64>,
    pub cvr: Vec<f64>,
    pub value: Vec<f64>,
    /// Replayed `(click, conversion)` potential outcomes; overrides sampling.
    pub forced: Option<Vec<(bool, bool)>>,
}

impl RoundSpec {
    fn empty(num_bidders: usize, num_slots: usize) -> Self {
        let cells = num_bidders * num_slots;
        Self {
            index: 0,
            num_bidders,
            num_slots,
            ctr: vec![0.0; cells],
            cvr: vec![0.0; cells],
            value: vec![0.0; cells],
            forced: None,
        }
    }

    #[inline]
    pub fn cell(&self, bidder: usize, slot: usize) -> usize {
        bidder * self.num_slots + slot
    }

    #[inline]
    pub fn ctr(&self, bidder: usize, slot: usize) -> f64 {
        self.ctr[self.cell(bidder, slot)]
    }

    #[inline]
    pub fn cvr(&self, bidder: usize, slot: usize) -> f64 {
        self.cvr[self.cell(bidder, slot)]
    }

    #[inline]
    pub fn value(&self, bidder: usize, slot: usize) -> f64 {
        self.value[self.cell(bidder, slot)]
    }
}

#[derive(Clone)]
enum Source {
    Generated(StreamFactory),
    Replayed(Vec<RoundSpec>),
}

/// The full `N`-round environment plus bidder targets.
#[derive(Clone)]
pub struct MarketLog {
    config: MarketConfig,
    tcpa: Vec<f64>,
    source: Source,
}

impl std::fmt::Debug for MarketLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarketLog")
            .field("config", &self.config)
            .field("tcpa", &self.tcpa)
            .field("replayed", &matches!(self.source, Source::Replayed(_)))
            .finish()
    }
}

impl PartialEq for MarketLog {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tcpa.len() == other.tcpa.len()
            && self.tcpa.iter().zip(&other.tcpa).all(|(a, b)| a.to_bits() == b.to_bits())
            && (0..self.num_rounds()).all(|n| rounds_bit_equal(&self.round(n), &other.round(n)))
    }
}

fn rounds_bit_equal(a: &RoundSpec, b: &RoundSpec) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.index == b.index
        && bits(&a.ctr) == bits(&b.ctr)
        && bits(&a.cvr) == bits(&b.cvr)
        && bits(&a.value) == bits(&b.value)
        && a.forced == b.forced
}

/// Builds a synthetic market. Deterministic in `config.seed`.
pub fn generate_market(config: &MarketConfig) -> Result<MarketLog> {
    config.validate()?;
    let streams = StreamFactory::new(config.seed);
    let tcpa = draw_tcpas(config, &streams);
    Ok(MarketLog {
        config: config.clone(),
        tcpa,
        source: Source::Generated(streams),
    })
}

fn draw_tcpas(config: &MarketConfig, streams: &StreamFactory) -> Vec<f64> {
    (0..config.num_bidders)
        .map(|m| {
            let mut r = streams.stream(Domain::Bidder, m as u64);
            rng::uniform_in(&mut r, config.tcpa_range.lo, config.tcpa_range.hi)
        })
        .collect()
}

fn generate_round_into(config: &MarketConfig, streams: &StreamFactory, n: usize, out: &mut RoundSpec) {
    let (m_count, k_count) = (config.num_bidders, config.num_slots);
    out.index = n;
    out.forced = None;
    // one stream per round keeps rounds independently addressable
    let mut r = streams.stream(Domain::Round, n as u64);
    for m in 0..m_count {
        let base = m * k_count;
        let ctrs = &mut out.ctr[base..base + k_count];
        for c in ctrs.iter_mut() {
            *c = rng::uniform_in(&mut r, config.ctr_range.lo, config.ctr_range.hi);
        }
        // slot CTRs must be weakly decreasing in slot index
        ctrs.sort_by(|a, b| b.total_cmp(a));
        let cvr = rng::uniform_in(&mut r, config.cvr_range.lo, config.cvr_range.hi);
        let value = rng::uniform_in(&mut r, config.value_range.lo, config.value_range.hi);
        out.cvr[base..base + k_count].fill(cvr);
        out.value[base..base + k_count].fill(value);
    }
}

impl MarketLog {
    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    pub fn num_bidders(&self) -> usize {
        self.config.num_bidders
    }

    pub fn num_rounds(&self) -> usize {
        self.config.num_rounds
    }

    pub fn num_slots(&self) -> usize {
        self.config.num_slots
    }

    pub fn stage_plan(&self) -> &StagePlan {
        &self.config.stage_plan
    }

    pub fn tcpa(&self) -> &[f64] {
        &self.tcpa
    }

    /// Seed of the outcome streams.
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn streams(&self) -> StreamFactory {
        StreamFactory::new(self.config.seed)
    }

    pub fn is_replayed(&self) -> bool {
        matches!(self.source, Source::Replayed(_))
    }

    /// Replaces the bidder targets (e.g. from an experiment file).
    pub fn with_tcpa(mut self, tcpa: Vec<f64>) -> Result<Self> {
        if tcpa.len() != self.config.num_bidders || tcpa.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(MarketError::Config(format!(
                "expected {} positive tCPA values, got {:?}",
                self.config.num_bidders, tcpa
            )));
        }
        self.tcpa = tcpa;
        Ok(self)
    }

    pub fn round(&self, n: usize) -> RoundSpec {
        let mut spec = RoundSpec::empty(self.config.num_bidders, self.config.num_slots);
        self.round_into(n, &mut spec);
        spec
    }

    /// Writes round `n` into a reusable buffer.
    pub fn round_into(&self, n: usize, out: &mut RoundSpec) {
        assert!(n < self.config.num_rounds, "round {n} out of range");
        match &self.source {
            Source::Generated(streams) => {
                if out.num_bidders != self.config.num_bidders || out.num_slots != self.config.num_slots {
                    *out = RoundSpec::empty(self.config.num_bidders, self.config.num_slots);
                }
                generate_round_into(&self.config, streams, n, out)
            }
            Source::Replayed(rounds) => out.clone_from(&rounds[n]),
        }
    }

    pub fn empty_round(&self) -> RoundSpec {
        RoundSpec::empty(self.config.num_bidders, self.config.num_slots)
    }

    /// Largest CVR over every (bidder, round, slot) cell.
    pub fn max_cvr(&self) -> f64 {
        let mut buf = self.empty_round();
        let mut best = 0.0f64;
        for n in 0..self.num_rounds() {
            self.round_into(n, &mut buf);
            best = buf.cvr.iter().copied().fold(best, f64::max);
        }
        best
    }

    /// Exports the log as `round,bidder,slot,ctr,cvr,value,click,conversion`.
    ///
    /// Click/conversion columns hold the potential outcome of each cell, i.e.
    /// what [`sample_round`] would produce if that cell were allocated. A
    /// replay of the exported file therefore reproduces the outcome streams.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPLAY_HEADER)?;
        let streams = self.streams();
        let mut spec = self.empty_round();
        for n in 0..self.num_rounds() {
            self.round_into(n, &mut spec);
            for m in 0..spec.num_bidders {
                for k in 0..spec.num_slots {
                    let (click, conv) = potential_outcome(&spec, &streams, m, k);
                    w.write_record(&[
                        n.to_string(),
                        m.to_string(),
                        k.to_string(),
                        spec.ctr(m, k).to_string(),
                        spec.cvr(m, k).to_string(),
                        spec.value(m, k).to_string(),
                        u8::from(click).to_string(),
                        u8::from(conv).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a replay log. Dimensions and stage plan come from `config`, whose
    /// seed also determines the tCPA draws (override with [`Self::with_tcpa`]).
    pub fn from_csv<R: Read>(reader: R, config: &MarketConfig) -> Result<Self> {
        if config.num_bidders == 0 || config.num_slots == 0 || config.num_rounds == 0 {
            return Err(MarketError::Config("replay dimensions must be positive".into()));
        }
        if config.stage_plan.total_rounds() != config.num_rounds {
            return Err(MarketError::Config("stage_plan must sum to num_rounds".into()));
        }
        let (m_count, k_count, n_count) = (config.num_bidders, config.num_slots, config.num_rounds);
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let required = ["round", "bidder", "slot", "ctr", "cvr", "value"];
        let mut idx = [0usize; 6];
        for (i, name) in required.iter().enumerate() {
            idx[i] = col(name).ok_or_else(|| MarketError::Replay(format!("missing column `{name}`")))?;
        }
        let click_col = col("click");
        let conv_col = col("conversion");
        if click_col.is_some() != conv_col.is_some() {
            return Err(MarketError::Replay("click and conversion columns must appear together".into()));
        }
        let has_outcomes = click_col.is_some();

        let mut rounds: Vec<RoundSpec> = (0..n_count)
            .map(|n| {
                let mut s = RoundSpec::empty(m_count, k_count);
                s.index = n;
                if has_outcomes {
                    s.forced = Some(vec![(false, false); m_count * k_count]);
                }
                s
            })
            .collect();
        let mut seen = vec![false; n_count * m_count * k_count];

        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim();
            let parse_usize = |i: usize, what: &str| {
                field(i)
                    .parse::<usize>()
                    .map_err(|_| MarketError::Replay(format!("row {}: bad {what} `{}`", line + 2, field(i))))
            };
            let parse_f64 = |i: usize, what: &str| {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| MarketError::Replay(format!("row {}: bad {what} `{}`", line + 2, field(i))))
            };
            let parse_flag = |i: usize, what: &str| match field(i) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(MarketError::Replay(format!("row {}: bad {what} `{other}`", line + 2))),
            };
            let n = parse_usize(idx[0], "round")?;
            let m = parse_usize(idx[1], "bidder")?;
            let k = parse_usize(idx[2], "slot")?;
            if n >= n_count || m >= m_count || k >= k_count {
                return Err(MarketError::Replay(format!(
                    "row {}: cell ({n},{m},{k}) outside configured dimensions ({n_count},{m_count},{k_count})",
                    line + 2
                )));
            }
            let ctr = parse_f64(idx[3], "ctr")?;
            let cvr = parse_f64(idx[4], "cvr")?;
            let value = parse_f64(idx[5], "value")?;
            if !(0.0..=1.0).contains(&ctr) || !(0.0..=1.0).contains(&cvr) || !(value >= 0.0) {
                return Err(MarketError::Replay(format!("row {}: probabilities must lie in [0,1]", line + 2)));
            }
            let spec = &mut rounds[n];
            let cell = spec.cell(m, k);
            spec.ctr[cell] = ctr;
            spec.cvr[cell] = cvr;
            spec.value[cell] = value;
            if let (Some(ci), Some(vi)) = (click_col, conv_col) {
                let click = parse_flag(ci, "click")?;
                let conv = parse_flag(vi, "conversion")?;
                if conv && !click {
                    return Err(MarketError::Replay(format!("row {}: conversion without click", line + 2)));
                }
                spec.forced.as_mut().expect("allocated above")[cell] = (click, conv);
            }
            let key = (n * m_count + m) * k_count + k;
            if seen[key] {
                return Err(MarketError::Replay(format!("row {}: duplicate cell ({n},{m},{k})", line + 2)));
            }
            seen[key] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let k = missing % k_count;
            let m = (missing / k_count) % m_count;
            let n = missing / (k_count * m_count);
            return Err(MarketError::Replay(format!("missing cell ({n},{m},{k})")));
        }
        for spec in &rounds {
            for m in 0..m_count {
                for k in 1..k_count {
                    if spec.ctr(m, k) > spec.ctr(m, k - 1) {
                        return Err(MarketError::Replay(format!(
                            "round {}: bidder {m} slot CTRs are not weakly decreasing",
                            spec.index
                        )));
                    }
                }
            }
        }
        let streams = StreamFactory::new(config.seed);
        let tcpa = if config.tcpa_range.is_valid() && config.tcpa_range.lo > 0.0 {
            draw_tcpas(config, &streams)
        } else {
            return Err(MarketError::Config("tcpa_range must be a nonempty positive interval".into()));
        };
        Ok(Self {
            config: config.clone(),
            tcpa,
            source: Source::Replayed(rounds),
        })
    }
}

pub const REPLAY_HEADER: [&str; 8] = ["round", "bidder", "slot", "ctr", "cvr", "value", "click", "conversion"];

/// Slot-to-bidder assignment for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    num_bidders: usize,
    slots: Vec<Option<usize>>,
}

impl Allocation {
    pub fn empty(num_bidders: usize, num_slots: usize) -> Self {
        Self {
            num_bidders,
            slots: vec![None; num_slots],
        }
    }

    /// `slots[k]` is the bidder holding slot `k`, if any.
    pub fn new(num_bidders: usize, slots: Vec<Option<usize>>) -> Result<Self> {
        let mut used = vec![false; num_bidders];
        for (k, holder) in slots.iter().enumerate() {
            if let Some(m) = *holder {
                if m >= num_bidders {
                    return Err(MarketError::Allocation(format!("slot {k} assigned to unknown bidder {m}")));
                }
                if used[m] {
                    return Err(MarketError::Allocation(format!("bidder {m} holds more than one slot")));
                }
                used[m] = true;
            }
        }
        Ok(Self { num_bidders, slots })
    }

    /// From a 0/1 matrix `x[m][k]`.
    pub fn from_matrix(x: &[Vec<u8>]) -> Result<Self> {
        let num_bidders = x.len();
        let num_slots = x.first().map_or(0, Vec::len);
        let mut slots = vec![None; num_slots];
        for (m, row) in x.iter().enumerate() {
            if row.len() != num_slots {
                return Err(MarketError::Allocation("ragged allocation matrix".into()));
            }
            if row.iter().map(|&v| v as usize).sum::<usize>() > 1 {
                return Err(MarketError::Allocation(format!("bidder {m} holds more than one slot")));
            }
            for (k, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(MarketError::Allocation("entries must be 0 or 1".into()));
                }
                if v == 1 {
                    if slots[k].is_some() {
                        return Err(MarketError::Allocation(format!("slot {k} held by two bidders")));
                    }
                    slots[k] = Some(m);
                }
            }
        }
        Ok(Self { num_bidders, slots })
    }

    pub fn num_bidders(&self) -> usize {
        self.num_bidders
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn slot_of(&self, bidder: usize) -> Option<usize> {
        self.slots.iter().position(|s| *s == Some(bidder))
    }

    /// Iterates `(slot, bidder)` over filled slots in slot order.
    pub fn filled(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots.iter().enumerate().filter_map(|(k, s)| s.map(|m| (k, m)))
    }
}

/// Realized outcomes of one round, indexed `[bidder * K + slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub num_bidders: usize,
    pub num_slots: usize,
    pub x: Vec<bool>,
    pub y: Vec<bool>,
    pub z: Vec<bool>,
    pub p: Vec<f64>,
}

impl RoundOutcome {
    #[inline]
    fn cell(&self, m: usize, k: usize) -> usize {
        m * self.num_slots + k
    }

    pub fn allocated(&self, m: usize, k: usize) -> bool {
        self.x[self.cell(m, k)]
    }

    pub fn click(&self, m: usize, k: usize) -> bool {
        self.y[self.cell(m, k)]
    }

    pub fn conversion(&self, m: usize, k: usize) -> bool {
        self.z[self.cell(m, k)]
    }

    pub fn conversions_of(&self, m: usize) -> u64 {
        (0..self.num_slots).filter(|&k| self.conversion(m, k)).count() as u64
    }
}

/// Potential `(click, conversion)` of cell `(m, k)`: two uniforms from the
/// cell's outcome stream, both always drawn.
pub fn potential_outcome(spec: &RoundSpec, streams: &StreamFactory, m: usize, k: usize) -> (bool, bool) {
    let cell = spec.cell(m, k);
    if let Some(forced) = &spec.forced {
        return forced[cell];
    }
    let index = ((spec.index * spec.num_bidders + m) * spec.num_slots + k) as u64;
    let mut r = streams.stream(Domain::Outcome, index);
    let u_click = rng::unit_f64(&mut r);
    let u_conv = rng::unit_f64(&mut r);
    let click = u_click < spec.ctr[cell];
    (click, click && u_conv < spec.cvr[cell])
}

/// Samples clicks and conversions for the allocated cells of one round.
/// Payments are left at zero.
pub fn sample_round(spec: &RoundSpec, allocation: &Allocation, streams: &StreamFactory) -> Result<RoundOutcome> {
    if allocation.num_bidders() != spec.num_bidders || allocation.slots().len() != spec.num_slots {
        return Err(MarketError::Allocation(format!(
            "allocation is {}x{} but round is {}x{}",
            allocation.num_bidders(),
            allocation.slots().len(),
            spec.num_bidders,
            spec.num_slots
        )));
    }
    let cells = spec.num_bidders * spec.num_slots;
    let mut out = RoundOutcome {
        num_bidders: spec.num_bidders,
        num_slots: spec.num_slots,
        x: vec![false; cells],
        y: vec![false; cells],
        z: vec![false; cells],
        p: vec![0.0; cells],
    };
    for (k, m) in allocation.filled() {
        let cell = spec.cell(m, k);
        let (click, conv) = potential_outcome(spec, streams, m, k);
        out.x[cell] = true;
        out.y[cell] = click;
        out.z[cell] = conv;
    }
    Ok(out)
}

/// Conversions visible to the platform versus the truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackView {
    pub visible_conversions: Vec<u64>,
    pub true_conversions: Vec<u64>,
}

/// Feedback as of the start of `current_round`: visible counts equal the true
/// cumulative conversions at the last completed stage boundary.
pub fn apply_feedback_delay(outcomes: &[RoundOutcome], plan: &StagePlan, current_round: usize) -> FeedbackView {
    let m_count = outcomes.first().map_or(0, |o| o.num_bidders);
    let mut truth = vec![0u64; m_count];
    let mut visible = vec![0u64; m_count];
    let horizon = current_round.min(outcomes.len());
    for (n, o) in outcomes[..horizon].iter().enumerate() {
        for (m, t) in truth.iter_mut().enumerate() {
            *t += o.conversions_of(m);
        }
        if n < plan.total_rounds() && plan.is_stage_end(n) {
            visible.clone_from(&truth);
        }
    }
    FeedbackView {
        visible_conversions: visible,
        true_conversions: truth,
    }
}
