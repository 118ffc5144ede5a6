//! Numerical checks of the log-optimal theory, run by the `oracle` command.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::allocation::{allocation_utility, robustness_bound, MomentEstimate};
use crate::error::Result;
use crate::oracle::{
    expected_log_return, glos_optimal, information_gain, relative_wealth, superiority_trial, taylor_gap,
    ConstantPolicy, DiscreteDistribution, DiscreteJointDistribution,
};
use crate::rng::{self, EngineRng};
use crate::weights::PortfolioWeights;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn uniform(rng: &mut EngineRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::unit_f64(rng)
}

/// Distribution over `outcomes` points in `[0.5, 2]^d` with random weights.
pub fn random_distribution(rng: &mut EngineRng, d: usize, outcomes: usize) -> DiscreteDistribution {
    let support = (0..outcomes)
        .map(|_| (0..d).map(|_| uniform(rng, 0.5, 2.0)).collect())
        .collect();
    let mut probs = rng::simplex_point(rng, outcomes);
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    DiscreteDistribution::new(support, probs).expect("generated distribution is valid")
}

/// Joint with 2–3 labels over 2–3 assets. With `independent`, every label
/// shares one conditional law.
pub fn random_joint(rng: &mut EngineRng, independent: bool) -> DiscreteJointDistribution {
    let d = 2 + rng::uniform_index(rng, 2);
    let labels = 2 + rng::uniform_index(rng, 2);
    let outcomes = 2 + rng::uniform_index(rng, 2);
    let shared = random_distribution(rng, d, outcomes);
    let cond = (0..labels)
        .map(|_| {
            if independent {
                shared.clone()
            } else {
                let outcomes = 2 + rng::uniform_index(rng, 2);
                random_distribution(rng, d, outcomes)
            }
        })
        .collect();
    let y_probs = rng::simplex_point(rng, labels);
    let total: f64 = y_probs.iter().sum();
    DiscreteJointDistribution::new(
        (0..labels).map(|i| format!("y{i}")).collect(),
        y_probs.iter().map(|p| p / total).collect(),
        cond,
    )
    .expect("generated joint is valid")
}

/// Side information bounds on `trials` random joints plus independent ones.
pub fn check_information_benefit(trials: usize, seed: u64) -> Result<CheckResult> {
    let outcomes: Vec<Result<(bool, f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng::substream(seed, j as u64);
            let independent = j % 10 == 0;
            let g = information_gain(&random_joint(&mut rng, independent), 1e-12)?;
            let mut ok = g.expected_gain <= g.mutual_information + 1e-9;
            for (gain, kl) in g.per_y_gain.iter().zip(&g.per_y_kl) {
                ok &= *gain >= -1e-9 && *gain <= kl + 1e-9;
            }
            if independent {
                ok &= g.expected_gain.abs() <= 1e-9 && g.mutual_information.abs() <= 1e-12;
            }
            Ok((ok, g.expected_gain, g.mutual_information))
        })
        .collect();
    let mut failures = 0;
    let mut worst_slack = f64::INFINITY;
    for o in outcomes {
        let (ok, gain, mi) = o?;
        failures += usize::from(!ok);
        worst_slack = worst_slack.min(mi - gain);
    }
    Ok(CheckResult {
        name: "information benefit: 0 <= dV_y <= KL, dV <= I(X;Y)".into(),
        passed: failures == 0,
        detail: format!("{trials} joints, {failures} failures, min I - dV = {worst_slack:.3e}"),
    })
}

/// Markov tail `Pr(S_n > n² S_n*) ≤ 1/n²` against the all-in-one-asset competitor.
pub fn check_long_term_superiority(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let dist = DiscreteDistribution::new(vec![vec![2.0, 0.5], vec![0.5, 2.0]], vec![0.5, 0.5])?;
    let competitor = ConstantPolicy(PortfolioWeights::one_hot(2, 0)?);
    let mut out = Vec::new();
    for n in [10usize, 50, 200] {
        let s = superiority_trial(&dist, &competitor, n, trials, seed)?;
        let bound = 1.0 / (n * n) as f64;
        let mut passed = s.exceed_fraction <= bound;
        if n == 200 {
            passed &= s.mean_rate < 0.0;
        }
        out.push(CheckResult {
            name: format!("long-term superiority, n = {n}"),
            passed,
            detail: format!(
                "Pr(S_n > n^2 S_n*) = {:.3e} <= {bound:.3e}, mean (1/n) log(S_n/S_n*) = {:.4}",
                s.exceed_fraction, s.mean_rate
            ),
        });
    }
    Ok(out)
}

/// Random PSD matrix `AAᵀ·scale + floor·I`.
pub fn random_psd(rng: &mut EngineRng, d: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| uniform(rng, -1.0, 1.0));
    &a * a.transpose() * scale + DMatrix::identity(d, d) * floor
}

/// Covariance robustness bound on `trials` random perturbations.
pub fn check_robustness_bound(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut failures = 0;
    let mut max_ratio = 0.0f64;
    for j in 0..trials {
        let mut rng = rng::substream(seed, j as u64);
        let d = 2 + rng::uniform_index(&mut rng, 4);
        let mu = DVector::from_fn(d, |_, _| uniform(&mut rng, 0.95, 1.1));
        let eps = 1e-3;
        let sigma = random_psd(&mut rng, d, 0.01, d as f64 * eps);
        let e = DMatrix::from_fn(d, d, |_, _| uniform(&mut rng, -eps, eps));
        let e = (&e + e.transpose()) * 0.5;
        let sigma_hat = &sigma + &e;
        let b = PortfolioWeights::new(rng::simplex_point(&mut rng, d))
            .or_else(|_| PortfolioWeights::normalized(rng::simplex_point(&mut rng, d)))?;
        let c = b.dot(mu.as_slice()) * uniform(&mut rng, 0.5, 1.0);
        let truth = MomentEstimate::new(mu.clone(), sigma.clone(), 0)?;
        let estimate = MomentEstimate::new(mu, sigma_hat.clone(), 0)?;
        let gap = (allocation_utility(&b, &estimate)? - allocation_utility(&b, &truth)?).abs();
        let bound = robustness_bound(&b, c, &(sigma - sigma_hat))?;
        failures += usize::from(gap > bound);
        if bound > 0.0 {
            max_ratio = max_ratio.max(gap / bound);
        }
    }
    Ok(CheckResult {
        name: "covariance robustness bound".into(),
        passed: failures == 0,
        detail: format!("{trials} perturbations, {failures} violations, max gap/bound = {max_ratio:.3}"),
    })
}

/// Jensen: `E log(bᵀX) ≤ log(bᵀμ)`, and the log-optimal relative wealth
/// bound `E[bᵀX / b*ᵀX] ≤ 1`.
pub fn check_bounds(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut jensen_failures = 0;
    let mut ratio_failures = 0;
    let mut max_ratio = 0.0f64;
    for j in 0..trials {
        let mut rng = rng::substream(seed ^ 0x1e44a, j as u64);
        let d = 2 + rng::uniform_index(&mut rng, 2);
        let outcomes = 2 + rng::uniform_index(&mut rng, 3);
        let dist = random_distribution(&mut rng, d, outcomes);
        let b = PortfolioWeights::normalized(rng::simplex_point(&mut rng, d))?;
        let mean_growth = b.dot(&dist.mean()).ln();
        jensen_failures += usize::from(expected_log_return(&b, &dist)? > mean_growth + 1e-12);
        let b_star = glos_optimal(&dist, 1e-12)?;
        let r = relative_wealth(&b, &b_star, &dist);
        max_ratio = max_ratio.max(r);
        ratio_failures += usize::from(r > 1.0 + 1e-9);
    }
    Ok(vec![
        CheckResult {
            name: "Jensen: E log(b'X) <= log(b'mu)".into(),
            passed: jensen_failures == 0,
            detail: format!("{trials} instances, {jensen_failures} violations"),
        },
        CheckResult {
            name: "log-optimal relative wealth E[b'X / b*'X] <= 1".into(),
            passed: ratio_failures == 0,
            detail: format!("{trials} instances, {ratio_failures} violations, max = {max_ratio:.12}"),
        },
    ])
}

/// Second-order expansion error on tight and wide two-point markets.
pub fn check_taylor() -> Result<CheckResult> {
    let tight = DiscreteDistribution::new(vec![vec![1.01, 0.99], vec![0.99, 1.01]], vec![0.5, 0.5])?;
    let wide = DiscreteDistribution::new(vec![vec![2.0, 0.5], vec![0.5, 2.0]], vec![0.5, 0.5])?;
    let mut worst_tight = 0.0f64;
    for i in 0..=10 {
        let b = PortfolioWeights::normalized(vec![i as f64, (10 - i) as f64])?;
        worst_tight = worst_tight.max(taylor_gap(&b, &tight)?.abs());
    }
    let wide_gap = taylor_gap(&PortfolioWeights::one_hot(2, 0)?, &wide)?.abs();
    Ok(CheckResult {
        name: "Taylor approximation of expected log return".into(),
        passed: worst_tight <= 1e-5 && wide_gap > 1e-3,
        detail: format!("max |gap| at spread 0.01 = {worst_tight:.2e}, |gap| at spread 1.5 = {wide_gap:.2e}"),
    })
}

/// Every check, in display order.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_bounds(trials, seed)?;
    out.push(check_information_benefit(trials, seed)?);
    out.extend(check_long_term_superiority(trials.max(1), seed)?);
    out.push(check_robustness_bound(trials, seed)?);
    out.push(check_taylor()?);
    Ok(out)
}

/// Fixed-width pass/fail table.
pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  result  detail\n", "check");
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {:<6}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let results = run_all(40, 3).unwrap();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        let table = render_table(&results);
        assert_eq!(table.lines().count(), results.len() + 1);
    }
}
