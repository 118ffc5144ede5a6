//! Run configuration.
//!
//! The file is TOML: flat `key = value` pairs grouped under `[data]`,
//! `[strategies]`, `[rlos]`, `[agent]` and `[backtest]` headers, plus a
//! top-level `output_dir`. Every key is optional; omitted keys take the
//! defaults below. Unknown keys are rejected.
//!
//! ```toml
//! output_dir = "out"
//!
//! [data]
//! generator = "meanrevert"   # const | iid | trend | meanrevert; or set `path`
//! assets = 10
//! periods = 300
//! seed = 1
//!
//! [strategies]
//! names = ["naive_average", "follow_winner", "follow_loser", "rlos", "rlosrl"]
//!
//! [rlos]
//! max_span = 20
//! threshold = 0.0
//! min_return = 0.0
//!
//! [agent]
//! lambda = 50.0
//! momentum = 0.9
//! learning_rates = [[0, 1e-2], [50000, 1e-3], [100000, 1e-4]]
//!
//! [backtest]
//! spans = [[30, 230]]
//! seeds = [1]
//! warmup = 21
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentParameters, Architecture, Hyperparameters, LearningRateSchedule};
use crate::allocation::{ConstraintSet, SolverOptions};
use crate::backtest::{CompareSettings, Span, StrategySpec};
use crate::error::{Error, Result};
use crate::market::{load_panel, AssetPanel, PanelFormat};
use crate::oracle::load_distribution;
use crate::pattern::RlosParams;
use crate::synthetic::{self, GeneratorSpec};

pub const STRATEGY_NAMES: [&str; 5] = ["naive_average", "follow_winner", "follow_loser", "rlos", "rlosrl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// OHLCV CSV file; takes precedence over the generator.
    pub path: Option<PathBuf>,
    pub generator: String,
    pub assets: usize,
    pub periods: usize,
    pub seed: u64,
    /// Distribution file for the `iid` generator.
    pub distribution: Option<PathBuf>,
    pub amplitude: f64,
    pub drift: f64,
    pub noise: f64,
    pub regime_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            generator: "meanrevert".into(),
            assets: 10,
            periods: 300,
            seed: 1,
            distribution: None,
            amplitude: 0.02,
            drift: 0.01,
            noise: 0.005,
            regime_length: 1,
        }
    }
}

impl DataConfig {
    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        Ok(match self.generator.as_str() {
            "const" => GeneratorSpec::Const {
                assets: self.assets,
                periods: self.periods,
            },
            "iid" => {
                let path = self
                    .distribution
                    .as_ref()
                    .ok_or_else(|| Error::Config("the iid generator needs data.distribution".into()))?;
                GeneratorSpec::Iid {
                    dist: load_distribution(path)?,
                    periods: self.periods,
                }
            }
            "trend" => GeneratorSpec::Trend {
                assets: self.assets,
                periods: self.periods,
                drift: self.drift,
                noise: self.noise,
            },
            "meanrevert" => GeneratorSpec::MeanRevert {
                assets: self.assets,
                periods: self.periods,
                amplitude: self.amplitude,
                regime_length: self.regime_length,
                noise: self.noise,
            },
            other => return Err(Error::Config(format!("unknown generator `{other}`"))),
        })
    }

    pub fn panel(&self) -> Result<AssetPanel> {
        match &self.path {
            Some(p) => load_panel(p, PanelFormat::Csv),
            None => synthetic::generate(&self.generator_spec()?, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategiesConfig {
    pub names: Vec<String>,
}

impl Default for StrategiesConfig {
    fn default() -> Self {
        Self {
            names: STRATEGY_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlosConfig {
    pub max_span: usize,
    pub threshold: f64,
    pub min_return: f64,
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub solver_seed: u64,
}

impl Default for RlosConfig {
    fn default() -> Self {
        let p = RlosParams::default();
        Self {
            max_span: p.max_span,
            threshold: p.threshold,
            min_return: p.constraints.min_return(),
            restarts: p.solver.restarts,
            tolerance: p.solver.tolerance,
            max_iterations: p.solver.max_iterations,
            solver_seed: p.solver.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub history: usize,
    pub channels: Vec<usize>,
    pub width: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub c: f64,
    pub lambda: f64,
    pub momentum: f64,
    /// `[first_step, rate]` pairs.
    pub learning_rates: Vec<(u64, f64)>,
    pub batch_size: usize,
    pub checkpoint: Option<PathBuf>,
    pub train: bool,
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        let a = Architecture::default();
        let h = Hyperparameters::default();
        Self {
            history: a.history,
            channels: a.channels,
            width: a.width,
            hidden: a.hidden,
            alpha: h.alpha,
            beta: h.beta,
            sigma: h.sigma,
            c: h.c,
            lambda: h.lambda,
            momentum: h.momentum,
            learning_rates: h.schedule.0,
            batch_size: h.batch_size,
            checkpoint: None,
            train: true,
            warm_start: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// `[start, end)` pairs.
    pub spans: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
    pub bootstrap_assets: Option<usize>,
    pub warmup: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            spans: vec![(30, 300)],
            seeds: vec![1],
            bootstrap_assets: None,
            warmup: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub strategies: StrategiesConfig,
    pub rlos: RlosConfig,
    pub agent: AgentConfig,
    pub backtest: BacktestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            strategies: StrategiesConfig::default(),
            rlos: RlosConfig::default(),
            agent: AgentConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.data.path);
        resolve(&mut cfg.data.distribution);
        resolve(&mut cfg.agent.checkpoint);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as TOML, every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.data.path, &self.data.distribution, &self.agent.checkpoint]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("{}: file not found", p.display())));
            }
        }
        if self.data.path.is_none() {
            self.data.generator_spec()?;
        }
        for n in &self.strategies.names {
            if !STRATEGY_NAMES.contains(&n.as_str()) {
                return Err(Error::Config(format!("unknown strategy `{n}`")));
            }
        }
        if self.strategies.names.is_empty() {
            return Err(Error::Config("no strategies listed".into()));
        }
        self.hyperparameters().validate()?;
        self.architecture().validate()?;
        ConstraintSet::new(self.rlos.min_return)?;
        if self.rlos.max_span < 2 {
            return Err(Error::Config("rlos.max_span must be at least 2".into()));
        }
        if self.backtest.seeds.is_empty() {
            return Err(Error::Config("backtest.seeds is empty".into()));
        }
        if let Some((s, e)) = self.backtest.spans.iter().find(|(s, e)| s > e || *s < self.backtest.warmup) {
            return Err(Error::Config(format!(
                "span [{s}, {e}) must satisfy warmup {} <= start <= end",
                self.backtest.warmup
            )));
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        let a = &self.agent;
        Hyperparameters {
            alpha: a.alpha,
            beta: a.beta,
            sigma: a.sigma,
            c: a.c,
            lambda: a.lambda,
            momentum: a.momentum,
            schedule: LearningRateSchedule(a.learning_rates.clone()),
            batch_size: a.batch_size,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            history: self.agent.history,
            channels: self.agent.channels.clone(),
            width: self.agent.width,
            hidden: self.agent.hidden,
        }
    }

    pub fn rlos_params(&self) -> Result<RlosParams> {
        let r = &self.rlos;
        Ok(RlosParams {
            max_span: r.max_span,
            threshold: r.threshold,
            constraints: ConstraintSet::new(r.min_return)?,
            solver: SolverOptions {
                restarts: r.restarts,
                tolerance: r.tolerance,
                max_iterations: r.max_iterations,
                seed: r.solver_seed,
            },
        })
    }

    /// Strategy specs in configured order; `initial` seeds the agent.
    pub fn strategy_specs(&self, initial: Option<AgentParameters>) -> Result<Vec<StrategySpec>> {
        let params = self.rlos_params()?;
        self.strategies
            .names
            .iter()
            .map(|n| {
                Ok(match n.as_str() {
                    "naive_average" => StrategySpec::NaiveAverage,
                    "follow_winner" => StrategySpec::FollowWinner,
                    "follow_loser" => StrategySpec::FollowLoser,
                    "rlos" => StrategySpec::Rlos { params },
                    "rlosrl" => StrategySpec::Rlosrl {
                        params,
                        architecture: self.architecture(),
                        hyperparameters: self.hyperparameters(),
                        initial: initial.clone(),
                        train: self.agent.train,
                        warm_start: self.agent.warm_start,
                        seed: self.agent.seed,
                    },
                    other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
                })
            })
            .collect()
    }

    pub fn spans(&self) -> Vec<Span> {
        self.backtest.spans.iter().map(|(s, e)| Span::new(*s, *e)).collect()
    }

    pub fn compare_settings(&self) -> CompareSettings {
        CompareSettings {
            bootstrap_assets: self.backtest.bootstrap_assets,
            warmup: self.backtest.warmup,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::from_toml("[agent]\nlambda = 20.0\nmomentum = 0.5\n").unwrap();
        assert_eq!(cfg.hyperparameters().lambda, 20.0);
        assert_eq!(cfg.hyperparameters().momentum, 0.5);
        assert!(RunConfig::from_toml("[agent]\nlamda = 2.0\n").is_err());
    }

    #[test]
    fn validation_names_missing_files() {
        let mut cfg = RunConfig::default();
        cfg.data.path = Some(PathBuf::from("/nonexistent/prices.csv"));
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("/nonexistent/prices.csv"), "{err}");
        let mut cfg = RunConfig::default();
        cfg.agent.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.backtest.spans = vec![(5, 10)];
        assert!(cfg.validate().is_err());
    }
}
