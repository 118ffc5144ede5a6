//! Exact log-optimal computations on finite distributions.
//!
//! Everything here is enumeration over a discrete support, so the quantities
//! are exact up to floating point and the optimizer tolerance. Logarithms are
//! natural throughout; information is measured in nats.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{self, clip_psd, MomentEstimate};
use crate::error::{Error, Result};
use crate::rng;
use crate::solver::{self, AscentSettings, Objective};
use crate::weights::PortfolioWeights;

/// Probabilities tolerated off one.
pub const PROB_TOLERANCE: f64 = 1e-12;
/// Support points lighter than this are ignored in divergences.
pub const NEGLIGIBLE_PROB: f64 = 1e-15;
const RESTARTS: usize = 9;
const SOLVER_SEED: u64 = 0x0a11;

/// Finite-support distribution of the fluctuation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    support: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidArgument("empty support".into()));
        }
        if support.len() != probs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} support points, {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        let d = support[0].len();
        if d == 0 || support.iter().any(|x| x.len() != d) {
            return Err(Error::ShapeMismatch("support points differ in length".into()));
        }
        if support.iter().flatten().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidArgument("support entries must be positive and finite".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(Self { support, probs })
    }

    /// The point mass at `x`.
    pub fn point(x: Vec<f64>) -> Result<Self> {
        Self::new(vec![x], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim()];
        for (x, p) in self.support.iter().zip(&self.probs) {
            for (m, v) in mu.iter_mut().zip(x) {
                *m += p * v;
            }
        }
        mu
    }

    /// Population covariance `E[(X − μ)(X − μ)ᵀ]`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mu = self.mean();
        let mut s = DMatrix::<f64>::zeros(d, d);
        for (x, p) in self.support.iter().zip(&self.probs) {
            for i in 0..d {
                for j in 0..=i {
                    s[(i, j)] += p * (x[i] - mu[i]) * (x[j] - mu[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                s[(j, i)] = s[(i, j)];
            }
        }
        s
    }

    /// Exact mean and covariance as a moment estimate.
    pub fn moments(&self) -> Result<MomentEstimate> {
        MomentEstimate::new(
            DVector::from_vec(self.mean()),
            clip_psd(self.covariance()),
            self.support.len(),
        )
    }

    /// Index of the support point selected by a uniform draw `u ∈ [0, 1)`.
    pub(crate) fn locate(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// Points with probability above [`NEGLIGIBLE_PROB`], identical points merged.
    fn atoms(&self) -> Vec<(Vec<f64>, f64)> {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
        for (x, p) in self.support.iter().zip(&self.probs) {
            let key = bits(x);
            match index.get(&key) {
                Some(&k) => out[k].1 += p,
                None => {
                    index.insert(key, out.len());
                    out.push((x.clone(), *p));
                }
            }
        }
        out.retain(|(_, p)| *p >= NEGLIGIBLE_PROB);
        out
    }
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Side information `Y` with finitely many labels and the conditional law of `X`
/// under each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJointDistribution {
    y_values: Vec<String>,
    y_probs: Vec<f64>,
    cond: Vec<DiscreteDistribution>,
}

impl DiscreteJointDistribution {
    pub fn new(y_values: Vec<String>, y_probs: Vec<f64>, cond: Vec<DiscreteDistribution>) -> Result<Self> {
        if y_values.is_empty() || y_values.len() != y_probs.len() || y_values.len() != cond.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels, {} label probabilities, {} conditionals",
                y_values.len(),
                y_probs.len(),
                cond.len()
            )));
        }
        let d = cond[0].dim();
        if cond.iter().any(|c| c.dim() != d) {
            return Err(Error::ShapeMismatch("conditionals differ in dimension".into()));
        }
        if y_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("label probabilities must be nonnegative".into()));
        }
        let total: f64 = y_probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::InvalidArgument(format!("label probabilities sum to {total}")));
        }
        Ok(Self {
            y_values,
            y_probs,
            cond,
        })
    }

    pub fn dim(&self) -> usize {
        self.cond[0].dim()
    }

    pub fn y_values(&self) -> &[String] {
        &self.y_values
    }

    pub fn y_probs(&self) -> &[f64] {
        &self.y_probs
    }

    pub fn conditionals(&self) -> &[DiscreteDistribution] {
        &self.cond
    }

    /// Law of `X` alone; identical support points across labels are merged.
    pub fn marginal(&self) -> DiscreteDistribution {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut support: Vec<Vec<f64>> = Vec::new();
        let mut probs: Vec<f64> = Vec::new();
        for (c, py) in self.cond.iter().zip(&self.y_probs) {
            for (x, p) in c.support.iter().zip(&c.probs) {
                let key = bits(x);
                match index.get(&key) {
                    Some(&k) => probs[k] += py * p,
                    None => {
                        index.insert(key, support.len());
                        support.push(x.clone());
                        probs.push(py * p);
                    }
                }
            }
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        DiscreteDistribution { support, probs }
    }
}

/// `Σ_k p_k log(bᵀx_k)`.
pub fn expected_log_return(b: &PortfolioWeights, dist: &DiscreteDistribution) -> Result<f64> {
    if b.len() != dist.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} assets",
            b.len(),
            dist.dim()
        )));
    }
    Ok(log_value(b.as_slice(), dist))
}

fn log_value(b: &[f64], dist: &DiscreteDistribution) -> f64 {
    dist.support
        .iter()
        .zip(&dist.probs)
        .filter(|(_, p)| **p > 0.0)
        .map(|(x, p)| p * dot(b, x).ln())
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct ExpectedLog<'a>(&'a DiscreteDistribution);

impl Objective for ExpectedLog<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, b: &[f64]) -> f64 {
        log_value(b, self.0)
    }

    fn gradient(&self, b: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; b.len()];
        for (x, p) in self.0.support.iter().zip(&self.0.probs) {
            let r = p / dot(b, x);
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += r * xi;
            }
        }
        g
    }

    fn hessian(&self, b: &[f64]) -> DMatrix<f64> {
        let d = b.len();
        let mut h = DMatrix::<f64>::zeros(d, d);
        for (x, p) in self.0.support.iter().zip(&self.0.probs) {
            let r = p / dot(b, x).powi(2);
            for i in 0..d {
                for j in 0..d {
                    h[(i, j)] -= r * x[i] * x[j];
                }
            }
        }
        h
    }
}

/// The log-optimal portfolio `b*` of `dist`, to within `tol` in expected log return.
pub fn glos_optimal(dist: &DiscreteDistribution, tol: f64) -> Result<PortfolioWeights> {
    let settings = AscentSettings {
        restarts: RESTARTS,
        tolerance: tol.max(f64::EPSILON),
        max_iterations: 5000,
        seed: SOLVER_SEED,
    };
    PortfolioWeights::normalized(solver::maximize(&ExpectedLog(dist), None, &settings))
}

/// `Σ_k p_k (bᵀx_k)/(b*ᵀx_k)`; at most one when `b*` is log-optimal.
pub fn relative_wealth(b: &PortfolioWeights, b_star: &PortfolioWeights, dist: &DiscreteDistribution) -> f64 {
    dist.support
        .iter()
        .zip(&dist.probs)
        .map(|(x, p)| p * b.dot(x) / b_star.dot(x))
        .sum()
}

/// `Σ p log(p/q)` over the atoms of `p`; infinite when `q` misses an atom of `p`.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
    let q_atoms: HashMap<Vec<u64>, f64> = q.atoms().into_iter().map(|(x, w)| (bits(&x), w)).collect();
    p.atoms()
        .into_iter()
        .map(|(x, w)| match q_atoms.get(&bits(&x)) {
            Some(v) => w * (w / v).ln(),
            None => f64::INFINITY,
        })
        .sum()
}

/// Value of side information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationGain {
    /// `ΔV_y` per label: the log-return increase from knowing `Y = y`.
    pub per_y_gain: Vec<f64>,
    /// `E[ΔV_Y]`.
    pub expected_gain: f64,
    /// `I(X; Y)` in nats.
    pub mutual_information: f64,
    /// `KL(F(X|Y=y) ‖ F(X))` per label.
    pub per_y_kl: Vec<f64>,
}

pub fn information_gain(joint: &DiscreteJointDistribution, tol: f64) -> Result<InformationGain> {
    let marginal = joint.marginal();
    let b_x = glos_optimal(&marginal, tol)?;
    let mut per_y_gain = Vec::with_capacity(joint.cond.len());
    let mut per_y_kl = Vec::with_capacity(joint.cond.len());
    for c in &joint.cond {
        let b_y = glos_optimal(c, tol)?;
        per_y_gain.push(log_value(b_y.as_slice(), c) - log_value(b_x.as_slice(), c));
        per_y_kl.push(kl_divergence(c, &marginal));
    }
    let weighted = |v: &[f64]| -> f64 {
        v.iter()
            .zip(&joint.y_probs)
            .filter(|(_, p)| **p >= NEGLIGIBLE_PROB)
            .map(|(g, p)| g * p)
            .sum()
    };
    Ok(InformationGain {
        expected_gain: weighted(&per_y_gain),
        mutual_information: weighted(&per_y_kl),
        per_y_gain,
        per_y_kl,
    })
}

/// A competitor that picks weights each period from the outcomes seen so far.
pub trait SequencePolicy: Sync {
    fn weights(&self, period: usize, history: &[&[f64]]) -> PortfolioWeights;
}

/// The same weights every period.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub PortfolioWeights);

impl SequencePolicy for ConstantPolicy {
    fn weights(&self, _period: usize, _history: &[&[f64]]) -> PortfolioWeights {
        self.0.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub horizon: usize,
    /// `log(S_n / S_n*)` per trial.
    pub log_ratios: Vec<f64>,
    /// Fraction of trials with `S_n > n² S_n*`.
    pub exceed_fraction: f64,
    /// Mean of `(1/n) log(S_n / S_n*)`.
    pub mean_rate: f64,
}

/// Monte Carlo comparison of a competitor against the log-optimal portfolio.
///
/// Trial `j` draws from substream `j` of `seed`, so results do not depend on
/// thread scheduling.
pub fn superiority_trial(
    dist: &DiscreteDistribution,
    competitor: &dyn SequencePolicy,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<TrialStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let b_star = glos_optimal(dist, 1e-12)?;
    let log_ratios: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng::substream(seed, j as u64);
            let draws: Vec<usize> = (0..n).map(|_| dist.locate(rng::unit_f64(&mut rng))).collect();
            let mut history: Vec<&[f64]> = Vec::with_capacity(n);
            let mut log_ratio = 0.0;
            for &k in &draws {
                let x = dist.support[k].as_slice();
                let b = competitor.weights(history.len(), &history);
                log_ratio += b.dot(x).ln() - b_star.dot(x).ln();
                history.push(x);
            }
            log_ratio
        })
        .collect();
    let threshold = 2.0 * (n as f64).ln();
    let exceed = log_ratios.iter().filter(|r| **r > threshold).count();
    let mean_rate = log_ratios.iter().sum::<f64>() / (trials as f64 * n as f64);
    Ok(TrialStats {
        horizon: n,
        exceed_fraction: exceed as f64 / trials as f64,
        mean_rate,
        log_ratios,
    })
}

/// Expected log return minus the Allocation Utility at the exact moments.
pub fn taylor_gap(b: &PortfolioWeights, dist: &DiscreteDistribution) -> Result<f64> {
    let exact = expected_log_return(b, dist)?;
    Ok(exact - allocation::allocation_utility(b, &dist.moments()?)?)
}

fn parse_numbers(fields: &[&str], path: &Path, line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("not a number: {:?}", f.trim()),
            })
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split(',').collect()))
    })
}

fn rows_to_distribution(rows: Vec<Vec<f64>>, path: &Path, line: usize) -> Result<DiscreteDistribution> {
    let (probs, support): (Vec<f64>, Vec<Vec<f64>>) = rows.into_iter().map(|r| (r[0], r[1..].to_vec())).unzip();
    DiscreteDistribution::new(support, probs).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })
}

/// Reads `prob,x1,…,xd` rows. Blank lines and lines starting with `#` are skipped.
pub fn parse_distribution(text: &str, path: &Path) -> Result<DiscreteDistribution> {
    let mut rows = Vec::new();
    let mut last = 0;
    for (line, fields) in content_lines(text) {
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "expected prob,x1,...,xd".into(),
            });
        }
        rows.push(parse_numbers(&fields, path, line)?);
        last = line;
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no support rows".into(),
        });
    }
    rows_to_distribution(rows, path, last)
}

/// Reads groups of `prob,x1,…,xd` rows, each opened by a `label,prob` header.
///
/// A header is a two-field line whose first field does not parse as a number.
pub fn parse_joint(text: &str, path: &Path) -> Result<DiscreteJointDistribution> {
    let mut labels = Vec::new();
    let mut y_probs = Vec::new();
    let mut groups: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for (line, fields) in content_lines(text) {
        let is_header = fields.len() == 2 && fields[0].trim().parse::<f64>().is_err();
        if is_header {
            labels.push(fields[0].trim().to_string());
            y_probs.push(parse_numbers(&fields[1..], path, line)?[0]);
            groups.push((line, Vec::new()));
            continue;
        }
        let Some((_, rows)) = groups.last_mut() else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "support row before the first label header".into(),
            });
        };
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "expected prob,x1,...,xd".into(),
            });
        }
        rows.push(parse_numbers(&fields, path, line)?);
    }
    let mut cond = Vec::with_capacity(groups.len());
    for (line, rows) in groups {
        if rows.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "label without support rows".into(),
            });
        }
        cond.push(rows_to_distribution(rows, path, line)?);
    }
    DiscreteJointDistribution::new(labels, y_probs, cond).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn load_distribution(path: &Path) -> Result<DiscreteDistribution> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_distribution(&text, path)
}

pub fn load_joint(path: &Path) -> Result<DiscreteJointDistribution> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_joint(&text, path)
}
