//! Allocation Utility: the quadratic surrogate of expected log return,
//! its constrained maximizer, KKT verification and the covariance
//! robustness bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{self, AscentSettings, HalfSpace, Objective};
use crate::weights::PortfolioWeights;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;

/// Mean vector and covariance matrix of the fluctuation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    sample_count: usize,
}

impl MomentEstimate {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, sample_count: usize) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::ShapeMismatch("empty mean vector".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "covariance is {}x{}, mean has {d} entries",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if mu.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(Error::InvalidArgument("mean entries must be positive and finite".into()));
        }
        if sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("covariance entries must be finite".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let min_eig = min_eigenvalue(&sigma);
        if min_eig < -PSD_TOL {
            return Err(Error::NotPsd(min_eig));
        }
        Ok(Self {
            mu,
            sigma,
            sample_count,
        })
    }

    /// Sample mean and unbiased sample covariance of at least two observations,
    /// with negative eigenvalues floored at zero.
    pub fn from_samples(samples: &[&[f64]]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "sample covariance needs at least 2 observations, got {n}"
            )));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::ShapeMismatch("observations differ in length".into()));
        }
        let mut mu = DVector::<f64>::zeros(d);
        for s in samples {
            for (i, v) in s.iter().enumerate() {
                mu[i] += v;
            }
        }
        mu /= n as f64;
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for s in samples {
            for i in 0..d {
                let di = s[i] - mu[i];
                for j in 0..=i {
                    sigma[(i, j)] += di * (s[j] - mu[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = sigma[(i, j)] / (n - 1) as f64;
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        Self::new(mu, clip_psd(sigma), n)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Floors negative eigenvalues at zero and re-symmetrizes.
pub(crate) fn clip_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|v| *v == 0.0) {
        return m;
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|l| *l >= 0.0) {
        return m;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&r + r.transpose()) * 0.5
}

/// Feasible region: the simplex (`l1_budget = 1`, no short sales) intersected
/// with `bᵀμ ≥ min_return`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    min_return: f64,
    l1_budget: f64,
}

impl ConstraintSet {
    pub fn new(min_return: f64) -> Result<Self> {
        if !min_return.is_finite() || min_return < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "minimal return must be finite and nonnegative, got {min_return}"
            )));
        }
        Ok(Self {
            min_return,
            l1_budget: 1.0,
        })
    }

    pub fn min_return(&self) -> f64 {
        self.min_return
    }

    pub fn l1_budget(&self) -> f64 {
        self.l1_budget
    }
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            min_return: 0.0,
            l1_budget: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Number of starts (uniform point plus random simplex points).
    pub restarts: usize,
    /// Stop when an ascent step changes the utility by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Seed for the random starts.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            tolerance: 1e-10,
            max_iterations: 5000,
            seed: 0x5eed,
        }
    }
}

impl SolverOptions {
    fn settings(&self) -> AscentSettings {
        AscentSettings {
            restarts: self.restarts,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            seed: self.seed,
        }
    }
}

/// `log(bᵀμ) − bᵀΣb / (2(bᵀμ)²)`.
pub fn allocation_utility(b: &PortfolioWeights, m: &MomentEstimate) -> Result<f64> {
    if b.len() != m.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} assets",
            b.len(),
            m.dim()
        )));
    }
    let u = b.dot(m.mu.as_slice());
    if u <= 0.0 {
        return Err(Error::NonPositiveReturn(u));
    }
    Ok(utility_value(b.as_slice(), &m.mu, &m.sigma))
}

fn quad_form(sigma: &DMatrix<f64>, b: &[f64]) -> f64 {
    let d = b.len();
    let mut v = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += sigma[(i, j)] * b[j];
        }
        v += b[i] * row;
    }
    v
}

fn utility_value(b: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let u: f64 = b.iter().zip(mu.iter()).map(|(x, m)| x * m).sum();
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    u.ln() - quad_form(sigma, b) / (2.0 * u * u)
}

/// `∇M = μ/u − Σb/u² + vμ/u³` with `u = bᵀμ`, `v = bᵀΣb`.
fn utility_gradient(b: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Vec<f64> {
    let d = b.len();
    let u: f64 = b.iter().zip(mu.iter()).map(|(x, m)| x * m).sum();
    let sb: Vec<f64> = (0..d).map(|i| (0..d).map(|j| sigma[(i, j)] * b[j]).sum()).collect();
    let v: f64 = b.iter().zip(&sb).map(|(x, s)| x * s).sum();
    (0..d)
        .map(|i| mu[i] / u - sb[i] / (u * u) + v * mu[i] / (u * u * u))
        .collect()
}

struct Utility<'a> {
    mu: &'a DVector<f64>,
    sigma: &'a DMatrix<f64>,
}

impl Objective for Utility<'_> {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn value(&self, b: &[f64]) -> f64 {
        utility_value(b, self.mu, self.sigma)
    }

    fn gradient(&self, b: &[f64]) -> Vec<f64> {
        utility_gradient(b, self.mu, self.sigma)
    }

    /// `−(1 + 3v/u²) μμᵀ/u² − Σ/u² + 2(Σb μᵀ + μ bᵀΣ)/u³`.
    fn hessian(&self, b: &[f64]) -> DMatrix<f64> {
        let d = b.len();
        let u: f64 = b.iter().zip(self.mu.iter()).map(|(x, m)| x * m).sum();
        let bv = DVector::from_column_slice(b);
        let sb = self.sigma * &bv;
        let v = bv.dot(&sb);
        let mut h = DMatrix::<f64>::zeros(d, d);
        let u2 = u * u;
        let u3 = u2 * u;
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] = -(1.0 + 3.0 * v / u2) * self.mu[i] * self.mu[j] / u2
                    - self.sigma[(i, j)] / u2
                    + 2.0 * (sb[i] * self.mu[j] + self.mu[i] * sb[j]) / u3;
            }
        }
        h
    }
}

/// Maximizes the Allocation Utility over the simplex with `bᵀμ ≥ c`.
///
/// A covariance that is exactly zero reduces the problem to maximizing
/// `bᵀμ`; the answer is then the vertex of the largest mean, lowest index on
/// ties.
pub fn optimize_allocation(
    m: &MomentEstimate,
    cons: &ConstraintSet,
    opts: &SolverOptions,
) -> Result<PortfolioWeights> {
    let d = m.dim();
    let mu = m.mu.as_slice();
    let max_mu = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_mu = mu.iter().cloned().fold(f64::INFINITY, f64::min);
    if cons.min_return > max_mu {
        return Err(Error::Infeasible {
            min_return: cons.min_return,
            max_mu,
        });
    }
    let min_eig = min_eigenvalue(&m.sigma);
    if min_eig < -PSD_TOL {
        return Err(Error::NotPsd(min_eig));
    }
    if m.sigma.iter().all(|s| *s == 0.0) {
        return PortfolioWeights::one_hot(d, crate::weights::argmax(mu));
    }
    let half = (cons.min_return > min_mu).then_some(HalfSpace {
        normal: mu,
        floor: cons.min_return,
    });
    let obj = Utility {
        mu: &m.mu,
        sigma: &m.sigma,
    };
    let b = solver::maximize(&obj, half, &opts.settings());
    PortfolioWeights::normalized(b)
}

/// Max-norm violation of the first-order optimality conditions at `b`.
///
/// With free set `F = {i : b_i > 0}` and gradient `g`, stationarity reads
/// `g_i = α − βμ_i` on `F` and `g_j ≤ α − βμ_j` off `F`, with `β ≥ 0` allowed
/// only when `bᵀμ = c` binds. Multipliers come from a least-squares fit on
/// `F`; the result is the largest equality residual or inequality violation.
pub fn kkt_residual(b: &PortfolioWeights, m: &MomentEstimate, cons: &ConstraintSet) -> f64 {
    let w = b.as_slice();
    let mu = m.mu.as_slice();
    let g = utility_gradient(w, &m.mu, &m.sigma);
    let free: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 1e-12).collect();
    let bound: Vec<usize> = (0..w.len()).filter(|&i| w[i] <= 1e-12).collect();
    let u = b.dot(mu);
    let binding = cons.min_return > 0.0 && u - cons.min_return <= 1e-9 * cons.min_return.max(1.0);

    let violation = |alpha: f64, beta: f64| -> f64 {
        let eq = free
            .iter()
            .map(|&i| (g[i] - alpha + beta * mu[i]).abs())
            .fold(0.0, f64::max);
        let ineq = bound
            .iter()
            .map(|&j| (g[j] - alpha + beta * mu[j]).max(0.0))
            .fold(0.0, f64::max);
        eq.max(ineq).max((-beta).max(0.0))
    };

    let alpha0 = free.iter().map(|&i| g[i]).sum::<f64>() / free.len().max(1) as f64;
    let mut best = violation(alpha0, 0.0);
    if !binding {
        return best;
    }

    if free.len() >= 2 {
        // least squares for g_F = α·1 − β·μ_F
        let n = free.len() as f64;
        let mean_mu = free.iter().map(|&i| mu[i]).sum::<f64>() / n;
        let mean_g = alpha0;
        let sxx: f64 = free.iter().map(|&i| (mu[i] - mean_mu).powi(2)).sum();
        if sxx > 1e-30 {
            let sxy: f64 = free.iter().map(|&i| (mu[i] - mean_mu) * (g[i] - mean_g)).sum();
            let beta = (-sxy / sxx).max(0.0);
            let alpha = mean_g + beta * mean_mu;
            best = best.min(violation(alpha, beta));
        }
    } else if let Some(&i) = free.first() {
        // one free coordinate: α = g_i + βμ_i exactly; choose the smallest β
        // that makes every bound coordinate dual feasible
        let beta = bound
            .iter()
            .filter(|&&j| mu[j] < mu[i])
            .map(|&j| (g[j] - g[i]) / (mu[i] - mu[j]))
            .fold(0.0, f64::max);
        best = best.min(violation(g[i] + beta * mu[i], beta));
    }
    best
}

/// `(1/(2c²)) · (Σ|b̂_i|)² · max_i Σ_j |σ_ij|` for `sigma_err = Σ − Σ̂`.
pub fn robustness_bound(b_hat: &PortfolioWeights, c: f64, sigma_err: &DMatrix<f64>) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("bound needs c > 0, got {c}")));
    }
    let d = b_hat.len();
    if sigma_err.nrows() != d || sigma_err.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "error matrix is {}x{}, portfolio has {d} assets",
            sigma_err.nrows(),
            sigma_err.ncols()
        )));
    }
    let max_row = (0..d)
        .map(|i| (0..d).map(|j| sigma_err[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let l1 = b_hat.l1_norm();
    Ok(l1 * l1 * max_row / (2.0 * c * c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(mu: &[f64], sigma: &[f64]) -> MomentEstimate {
        let d = mu.len();
        MomentEstimate::new(
            DVector::from_column_slice(mu),
            DMatrix::from_row_slice(d, d, sigma),
            0,
        )
        .unwrap()
    }

    fn w(v: &[f64]) -> PortfolioWeights {
        PortfolioWeights::new(v.to_vec()).unwrap()
    }

    #[test]
    fn utility_trivial_cases() {
        let m = moments(&[1.0], &[0.0]);
        assert_eq!(allocation_utility(&w(&[1.0]), &m).unwrap(), 0.0);
        let m = moments(&[1.1, 0.9], &[0.04, 0.0, 0.0, 0.04]);
        let u = allocation_utility(&w(&[0.5, 0.5]), &m).unwrap();
        assert!((u - (-0.01)).abs() < 1e-15, "{u}");
    }

    #[test]
    fn moment_validation() {
        let bad_sym = MomentEstimate::new(
            DVector::from_column_slice(&[1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            0,
        );
        assert!(bad_sym.is_err());
        let not_psd = MomentEstimate::new(
            DVector::from_column_slice(&[1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            0,
        );
        assert!(matches!(not_psd, Err(Error::NotPsd(_))));
        let neg_mu = MomentEstimate::new(
            DVector::from_column_slice(&[-1.0]),
            DMatrix::zeros(1, 1),
            0,
        );
        assert!(neg_mu.is_err());
    }

    #[test]
    fn sample_moments_are_unbiased() {
        let a = [1.0, 2.0];
        let b = [3.0, 2.0];
        let m = MomentEstimate::from_samples(&[&a, &b]).unwrap();
        assert_eq!(m.mu().as_slice(), &[2.0, 2.0]);
        assert_eq!(m.sigma()[(0, 0)], 2.0);
        assert_eq!(m.sigma()[(1, 1)], 0.0);
        assert_eq!(m.sample_count(), 2);
        assert!(MomentEstimate::from_samples(&[&a]).is_err());
    }

    #[test]
    fn symmetric_assets_split_evenly() {
        let m = moments(&[1.1, 1.1], &[0.01, 0.0, 0.0, 0.01]);
        let b = optimize_allocation(&m, &ConstraintSet::default(), &SolverOptions::default()).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-9, "{b}");
        assert!(kkt_residual(&b, &m, &ConstraintSet::default()) <= 1e-9);
    }

    #[test]
    fn zero_covariance_picks_best_mean() {
        let m = moments(&[1.2, 1.0], &[0.0; 4]);
        let b = optimize_allocation(&m, &ConstraintSet::default(), &SolverOptions::default()).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 0.0]);
        let m = moments(&[1.1, 1.1], &[0.0; 4]);
        let b = optimize_allocation(&m, &ConstraintSet::default(), &SolverOptions::default()).unwrap();
        assert_eq!(b.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn infeasible_floor_is_rejected() {
        let m = moments(&[1.1, 1.0], &[0.01, 0.0, 0.0, 0.01]);
        let cons = ConstraintSet::new(1.2).unwrap();
        assert!(matches!(
            optimize_allocation(&m, &cons, &SolverOptions::default()),
            Err(Error::Infeasible { .. })
        ));
        assert!(ConstraintSet::new(-0.1).is_err());
    }

    #[test]
    fn binding_floor_is_respected() {
        // unconstrained optimum leans on the low-variance asset
        let m = moments(&[1.10, 1.01], &[0.25, 0.0, 0.0, 0.0001]);
        let free = optimize_allocation(&m, &ConstraintSet::default(), &SolverOptions::default()).unwrap();
        let cons = ConstraintSet::new(1.08).unwrap();
        assert!(free.dot(m.mu().as_slice()) < 1.08);
        let b = optimize_allocation(&m, &cons, &SolverOptions::default()).unwrap();
        assert!(b.dot(m.mu().as_slice()) >= 1.08 - 1e-9);
        assert!(kkt_residual(&b, &m, &cons) <= 1e-6, "{}", kkt_residual(&b, &m, &cons));
        // floor at the top mean forces the vertex
        let cons = ConstraintSet::new(1.10).unwrap();
        let b = optimize_allocation(&m, &cons, &SolverOptions::default()).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-9);
        assert!(kkt_residual(&b, &m, &cons) <= 1e-6);
    }

    #[test]
    fn kkt_detects_non_optimum() {
        let m = moments(&[1.1, 1.1], &[0.01, 0.0, 0.0, 0.01]);
        let r = kkt_residual(&w(&[0.9, 0.1]), &m, &ConstraintSet::default());
        // |g_1 - g_2| / 2 = 0.01 * 0.8 / (2 * 1.21)
        assert!((r - 0.008 / 2.42).abs() < 1e-12, "{r}");
        assert!(r > 1e-3);
    }

    #[test]
    fn robustness_bound_cases() {
        let b = w(&[0.3, 0.7]);
        assert_eq!(robustness_bound(&b, 1.0, &DMatrix::zeros(2, 2)).unwrap(), 0.0);
        let e = DMatrix::from_row_slice(2, 2, &[0.05, -0.05, 0.02, 0.01]);
        assert!((robustness_bound(&b, 1.0, &e).unwrap() - 0.05).abs() < 1e-15);
        let tripled = robustness_bound(&b, 1.0, &(&e * 3.0)).unwrap();
        assert!((tripled - 0.15).abs() < 1e-15);
        assert!(robustness_bound(&b, 0.0, &e).is_err());
    }

    #[test]
    fn psd_clipping_floors_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = clip_psd(m);
        assert!(min_eigenvalue(&c) >= -1e-12);
    }
}
