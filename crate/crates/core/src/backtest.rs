//! Backtesting harness: strategies, wealth recursion, comparison reports and
//! their file rendering.
//!
//! A strategy deciding period `t` only ever receives a view of the panel
//! truncated to periods `0 .. t`, so look-ahead is impossible by construction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{Agent, AgentParameters, Architecture, Hyperparameters, TradeRecord};
use crate::baselines;
use crate::error::{Error, Result};
use crate::market::{bootstrap_select, fluctuation, state_tensor, AssetPanel, StateTensor};
use crate::pattern::{rlos_portfolio, RlosParams};
use crate::weights::PortfolioWeights;

/// What a strategy may see when deciding period `period`.
#[derive(Debug, Clone)]
pub struct Past {
    panel: Option<AssetPanel>,
    assets: usize,
    period: usize,
}

impl Past {
    fn new(panel: &AssetPanel, period: usize) -> Result<Self> {
        Ok(Self {
            panel: if period == 0 { None } else { Some(panel.head(period)?) },
            assets: panel.assets(),
            period,
        })
    }

    /// Periods `0 .. period`, or `None` at period 0.
    pub fn panel(&self) -> Option<&AssetPanel> {
        self.panel.as_ref()
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn period(&self) -> usize {
        self.period
    }
}

/// A portfolio decision rule driven period by period.
pub trait Strategy: Send {
    fn name(&self) -> &str;

    /// Periods of history the strategy needs before its first real decision.
    fn required_warmup(&self) -> usize {
        0
    }

    /// Called once before the first decision with the periods preceding it.
    fn prepare(&mut self, _panel: &AssetPanel, _before: usize) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, past: &Past) -> Result<PortfolioWeights>;

    /// Called after period `period` is realized; `through` covers `0 ..= period`.
    fn observe(&mut self, _through: &AssetPanel, _period: usize, _held: &PortfolioWeights) -> Result<()> {
        Ok(())
    }
}

pub struct NaiveAverage;

impl Strategy for NaiveAverage {
    fn name(&self) -> &str {
        "naive_average"
    }

    fn decide(&mut self, past: &Past) -> Result<PortfolioWeights> {
        baselines::naive_average(past.assets())
    }
}

/// Uniform at period 0, then the previous period's winner.
pub struct FollowWinner;

impl Strategy for FollowWinner {
    fn name(&self) -> &str {
        "follow_winner"
    }

    fn decide(&mut self, past: &Past) -> Result<PortfolioWeights> {
        match past.panel() {
            None => PortfolioWeights::uniform(past.assets()),
            Some(p) => Ok(baselines::follow_winner(&fluctuation(p, past.period() - 1)?)),
        }
    }
}

/// Uniform at period 0, then the previous period's loser.
pub struct FollowLoser;

impl Strategy for FollowLoser {
    fn name(&self) -> &str {
        "follow_loser"
    }

    fn decide(&mut self, past: &Past) -> Result<PortfolioWeights> {
        match past.panel() {
            None => PortfolioWeights::uniform(past.assets()),
            Some(p) => Ok(baselines::follow_loser(&fluctuation(p, past.period() - 1)?)),
        }
    }
}

/// The pattern-matching ensemble; uniform until three periods exist.
pub struct Rlos(pub RlosParams);

impl Strategy for Rlos {
    fn name(&self) -> &str {
        "rlos"
    }

    fn required_warmup(&self) -> usize {
        self.0.max_span + 1
    }

    fn decide(&mut self, past: &Past) -> Result<PortfolioWeights> {
        match past.panel() {
            Some(p) if past.period() >= 3 => rlos_portfolio(p, past.period(), &self.0),
            _ => PortfolioWeights::uniform(past.assets()),
        }
    }
}

struct Pending {
    period: usize,
    state: StateTensor,
    advice: PortfolioWeights,
    predicted_return: f64,
}

/// The CNN trader fed with RLOS advice, optionally training online.
pub struct Rlosrl {
    rlos: RlosParams,
    agent: Agent,
    train: bool,
    warm_start: bool,
    pending: Option<Pending>,
}

impl Rlosrl {
    pub fn new(rlos: RlosParams, agent: Agent, train: bool, warm_start: bool) -> Self {
        Self {
            rlos,
            agent,
            train,
            warm_start,
            pending: None,
        }
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }

    fn history(&self) -> usize {
        self.agent.params().architecture().history
    }

    /// Trades and trains over periods `from .. to` without tracking wealth.
    pub fn train_over(&mut self, panel: &AssetPanel, from: usize, to: usize) -> Result<()> {
        let saved = self.train;
        self.train = true;
        let result = (|| {
            for t in from.max(self.required_warmup())..to {
                let w = self.decide(&Past::new(panel, t)?)?;
                self.observe(&panel.head(t + 1)?, t, &w)?;
            }
            Ok(())
        })();
        self.train = saved;
        result
    }
}

impl Strategy for Rlosrl {
    fn name(&self) -> &str {
        "rlosrl"
    }

    fn required_warmup(&self) -> usize {
        (self.rlos.max_span + 1).max(self.history()).max(3)
    }

    fn prepare(&mut self, panel: &AssetPanel, before: usize) -> Result<()> {
        if self.warm_start {
            self.train_over(panel, 0, before)?;
        }
        Ok(())
    }

    fn decide(&mut self, past: &Past) -> Result<PortfolioWeights> {
        self.pending = None;
        let t = past.period();
        let p = match past.panel() {
            Some(p) if t >= 3 && t >= self.history() => p,
            _ => return PortfolioWeights::uniform(past.assets()),
        };
        let advice = rlos_portfolio(p, t, &self.rlos)?;
        let state = state_tensor(p, t, self.history())?;
        let (action, predicted_return) = self.agent.decide(&state, &advice)?;
        self.pending = Some(Pending {
            period: t,
            state,
            advice,
            predicted_return,
        });
        Ok(action)
    }

    fn observe(&mut self, through: &AssetPanel, period: usize, held: &PortfolioWeights) -> Result<()> {
        let Some(p) = self.pending.take() else {
            return Ok(());
        };
        debug_assert_eq!(p.period, period);
        let rec = TradeRecord::new(
            period,
            p.state,
            p.advice,
            held.clone(),
            p.predicted_return,
            fluctuation(through, period)?,
        )?;
        self.agent.remember(rec);
        if self.train {
            self.agent.train()?;
        }
        Ok(())
    }
}

/// Serializable strategy description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    NaiveAverage,
    FollowWinner,
    FollowLoser,
    Rlos {
        params: RlosParams,
    },
    Rlosrl {
        params: RlosParams,
        architecture: Architecture,
        hyperparameters: Hyperparameters,
        /// Starting weights; freshly initialized from `seed` when absent.
        #[serde(skip)]
        initial: Option<AgentParameters>,
        train: bool,
        warm_start: bool,
        seed: u64,
    },
}

impl StrategySpec {
    pub fn name(&self) -> &'static str {
        match self {
            StrategySpec::NaiveAverage => "naive_average",
            StrategySpec::FollowWinner => "follow_winner",
            StrategySpec::FollowLoser => "follow_loser",
            StrategySpec::Rlos { .. } => "rlos",
            StrategySpec::Rlosrl { .. } => "rlosrl",
        }
    }

    /// A fresh strategy instance; `salt` varies the agent's replay stream.
    pub fn build(&self, salt: u64) -> Result<Box<dyn Strategy>> {
        Ok(match self {
            StrategySpec::NaiveAverage => Box::new(NaiveAverage),
            StrategySpec::FollowWinner => Box::new(FollowWinner),
            StrategySpec::FollowLoser => Box::new(FollowLoser),
            StrategySpec::Rlos { params } => Box::new(Rlos(*params)),
            StrategySpec::Rlosrl {
                params,
                architecture,
                hyperparameters,
                initial,
                train,
                warm_start,
                seed,
            } => {
                let weights = match initial {
                    Some(p) if p.architecture() == architecture => p.clone(),
                    Some(_) => {
                        return Err(Error::Checkpoint(
                            "initial parameters do not match the configured architecture".into(),
                        ))
                    }
                    None => AgentParameters::init(architecture.clone(), *seed)?,
                };
                let agent = Agent::new(weights, hyperparameters.clone(), seed.wrapping_add(salt))?;
                Box::new(Rlosrl::new(*params, agent, *train, *warm_start))
            }
        })
    }
}

/// Wealth path of one strategy over a span, starting from `S_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub strategy: String,
    pub start: usize,
    /// `S_0 … S_n`.
    pub wealth: Vec<f64>,
    /// Weights held in each period.
    pub weights: Vec<PortfolioWeights>,
    /// `log(b_tᵀX_t)` per period.
    pub log_returns: Vec<f64>,
}

impl EquityCurve {
    pub fn final_wealth(&self) -> f64 {
        *self.wealth.last().expect("wealth starts at S_0")
    }

    pub fn mean_log_return(&self) -> f64 {
        if self.log_returns.is_empty() {
            0.0
        } else {
            self.log_returns.iter().sum::<f64>() / self.log_returns.len() as f64
        }
    }

    /// Largest relative fall from a running peak.
    pub fn max_drawdown(&self) -> f64 {
        let mut peak = f64::NEG_INFINITY;
        let mut worst = 0.0f64;
        for s in &self.wealth {
            peak = peak.max(*s);
            worst = worst.max(1.0 - s / peak);
        }
        worst
    }
}

/// Half-open period range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.start, self.end)
    }
}

/// Drives `strategy` over `span`, compounding from `S_0 = 1`.
pub fn run_backtest(strategy: &mut dyn Strategy, panel: &AssetPanel, span: Span, warmup: usize) -> Result<EquityCurve> {
    if span.end > panel.periods() || span.start > span.end {
        return Err(Error::InvalidArgument(format!(
            "span {} does not fit a panel of {} periods",
            span.label(),
            panel.periods()
        )));
    }
    if span.start < warmup {
        return Err(Error::InvalidArgument(format!(
            "span starts at {} before the warmup of {warmup} periods",
            span.start
        )));
    }
    if warmup < strategy.required_warmup() {
        return Err(Error::InvalidArgument(format!(
            "strategy `{}` needs a warmup of {} periods, got {warmup}",
            strategy.name(),
            strategy.required_warmup()
        )));
    }
    strategy.prepare(panel, span.start)?;
    let d = panel.assets();
    let mut curve = EquityCurve {
        strategy: strategy.name().to_string(),
        start: span.start,
        wealth: vec![1.0],
        weights: Vec::with_capacity(span.end - span.start),
        log_returns: Vec::with_capacity(span.end - span.start),
    };
    for t in span.start..span.end {
        let b = strategy.decide(&Past::new(panel, t)?)?;
        if b.len() != d {
            return Err(Error::InvalidDecision {
                strategy: curve.strategy.clone(),
                period: t,
                reason: format!("{} weights for {d} assets", b.len()),
            });
        }
        let x = fluctuation(panel, t)?;
        let growth = b.dot(x.as_slice());
        if !(growth > 0.0 && growth.is_finite()) {
            return Err(Error::InvalidDecision {
                strategy: curve.strategy.clone(),
                period: t,
                reason: format!("portfolio growth {growth}"),
            });
        }
        strategy.observe(&panel.head(t + 1)?, t, &b)?;
        let last = *curve.wealth.last().expect("nonempty");
        curve.wealth.push(last * growth);
        curve.log_returns.push(growth.ln());
        curve.weights.push(b);
    }
    Ok(curve)
}

/// Summary of one (strategy, span, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: String,
    pub span: Span,
    pub seed: u64,
    pub final_wealth: f64,
    pub mean_log_return: f64,
    pub max_drawdown: f64,
    /// Fraction of periods whose log return beats the naive average's.
    pub win_rate: f64,
    pub curve: EquityCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub strategies: Vec<String>,
    pub spans: Vec<Span>,
    pub seeds: Vec<u64>,
    /// Ordered by span, then seed, then strategy.
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSettings {
    /// Assets drawn per bootstrap sample; the whole panel when absent.
    pub bootstrap_assets: Option<usize>,
    /// Periods required before every span.
    pub warmup: usize,
}

/// Runs every strategy on every (span, seed) cell. Seed `s` draws the
/// bootstrap universe; cells run in parallel and are collected in order.
pub fn compare(
    strategies: &[StrategySpec],
    panel: &AssetPanel,
    spans: &[Span],
    seeds: &[u64],
    settings: &CompareSettings,
) -> Result<Report> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one strategy and one seed".into()));
    }
    let jobs: Vec<(Span, u64)> = spans
        .iter()
        .flat_map(|s| seeds.iter().map(move |seed| (*s, *seed)))
        .collect();
    let k = settings.bootstrap_assets.unwrap_or(panel.assets());
    let cells: Vec<Result<Vec<Cell>>> = jobs
        .par_iter()
        .map(|&(span, seed)| {
            let universe = match settings.bootstrap_assets {
                Some(_) => bootstrap_select(panel, k, seed)?,
                None => panel.clone(),
            };
            let naive = run_backtest(&mut NaiveAverage, &universe, span, settings.warmup)?;
            strategies
                .iter()
                .map(|spec| {
                    let mut s = spec.build(seed)?;
                    let curve = run_backtest(s.as_mut(), &universe, span, settings.warmup)?;
                    let wins = curve
                        .log_returns
                        .iter()
                        .zip(&naive.log_returns)
                        .filter(|(a, b)| a > b)
                        .count();
                    Ok(Cell {
                        strategy: spec.name().to_string(),
                        span,
                        seed,
                        final_wealth: curve.final_wealth(),
                        mean_log_return: curve.mean_log_return(),
                        max_drawdown: curve.max_drawdown(),
                        win_rate: if curve.log_returns.is_empty() {
                            0.0
                        } else {
                            wins as f64 / curve.log_returns.len() as f64
                        },
                        curve,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(jobs.len() * strategies.len());
    for c in cells {
        out.extend(c?);
    }
    Ok(Report {
        strategies: strategies.iter().map(|s| s.name().to_string()).collect(),
        spans: spans.to_vec(),
        seeds: seeds.to_vec(),
        cells: out,
    })
}

const SUMMARY_HEADER: &str = "strategy,span,seed,final_wealth,mean_log_return,max_drawdown,win_rate";

fn summary_csv(report: &Report) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.strategy,
            c.span.label(),
            c.seed,
            c.final_wealth,
            c.mean_log_return,
            c.max_drawdown,
            c.win_rate
        );
    }
    s
}

fn summary_text(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "strategies: {}", report.strategies.join(" "));
    let _ = writeln!(
        s,
        "spans: {}",
        report.spans.iter().map(|sp| sp.label()).collect::<Vec<_>>().join(" ")
    );
    let _ = writeln!(
        s,
        "seeds: {}",
        report.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
    );
    let _ = writeln!(
        s,
        "\n{:<14} {:>11} {:>8} {:>14} {:>16} {:>13} {:>9}",
        "strategy", "span", "seed", "final_wealth", "mean_log_return", "max_drawdown", "win_rate"
    );
    for c in &report.cells {
        let _ = writeln!(
            s,
            "{:<14} {:>11} {:>8} {:>14.6} {:>16.8} {:>13.6} {:>9.4}",
            c.strategy,
            c.span.label(),
            c.seed,
            c.final_wealth,
            c.mean_log_return,
            c.max_drawdown,
            c.win_rate
        );
    }
    s
}

fn curve_csv(curve: &EquityCurve) -> String {
    let d = curve.weights.first().map_or(0, |w| w.len());
    let mut s = String::from("step,period,wealth,log_return");
    for a in 0..d {
        let _ = write!(s, ",w{a}");
    }
    s.push('\n');
    let _ = write!(s, "0,,{},", curve.wealth[0]);
    s.push_str(&",".repeat(d));
    s.push('\n');
    for (i, (w, r)) in curve.weights.iter().zip(&curve.log_returns).enumerate() {
        let _ = write!(s, "{},{},{},{}", i + 1, curve.start + i, curve.wealth[i + 1], r);
        for v in w.as_slice() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn span_svg(report: &Report, span: Span) -> String {
    let (w, h, m) = (800.0, 420.0, 50.0);
    let cells: Vec<&Cell> = report.cells.iter().filter(|c| c.span == span).collect();
    let steps = cells.iter().map(|c| c.curve.wealth.len()).max().unwrap_or(1).max(2) - 1;
    let lo = cells
        .iter()
        .flat_map(|c| c.curve.wealth.iter())
        .cloned()
        .fold(1.0, f64::min);
    let hi = cells
        .iter()
        .flat_map(|c| c.curve.wealth.iter())
        .cloned()
        .fold(1.0, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let x = |i: usize| m + (w - 2.0 * m) * i as f64 / steps as f64;
    let y = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / range;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">Total wealth, periods {}</text>"#,
        w / 2.0,
        span.label()
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for (v, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
            m - 4.0,
            y(v) + 4.0,
            label
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">period</text>"#,
        w / 2.0,
        h - m + 30.0
    );
    for c in &cells {
        let k = report.strategies.iter().position(|n| *n == c.strategy).unwrap_or(0);
        let points: Vec<String> = c
            .curve
            .wealth
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{} seed {}</title></polyline>"#,
            PALETTE[k % PALETTE.len()],
            points.join(" "),
            c.strategy,
            c.seed
        );
    }
    for (k, name) in report.strategies.iter().enumerate() {
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            m + 10.0,
            ly,
            PALETTE[k % PALETTE.len()],
            m + 26.0,
            ly + 5.0,
            name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

/// Writes the summary (CSV and text), one equity CSV per cell and one SVG
/// chart per span. Returns the written paths in a fixed order.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut files = vec![
        write_file(dir, "summary.csv", &summary_csv(report))?,
        write_file(dir, "summary.txt", &summary_text(report))?,
    ];
    for c in &report.cells {
        let name = format!("curve_{}_{}_{}.csv", c.strategy, c.span.label(), c.seed);
        files.push(write_file(dir, &name, &curve_csv(&c.curve))?);
    }
    for span in &report.spans {
        files.push(write_file(dir, &format!("span_{}.svg", span.label()), &span_svg(report, *span))?);
    }
    Ok(files)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `manifest.csv` (`file,sha256`) for `files`, named relative to `dir`.
pub fn write_manifest(dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let mut s = String::from("file,sha256\n");
    for f in files {
        let name = f.strip_prefix(dir).unwrap_or(f).display().to_string();
        let _ = writeln!(s, "{},{}", name, file_digest(f)?);
    }
    write_file(dir, "manifest.csv", &s)
}
