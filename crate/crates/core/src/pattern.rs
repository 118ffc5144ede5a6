//! Pattern matching on market backgrounds.
//!
//! The background of period `i` over span `n` is the `d × n` matrix of
//! fluctuation vectors for periods `i-n .. i-1`. Periods whose backgrounds
//! correlate with the current one above a threshold supply the samples for
//! the moment estimate, one estimate per span; the per-span optimal
//! portfolios are blended by their in-sample log wealth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{optimize_allocation, ConstraintSet, MomentEstimate, SolverOptions};
use crate::error::{Error, Result};
use crate::market::{fluctuation, AssetPanel};
use crate::weights::PortfolioWeights;

/// Fluctuation ratios for periods `i-n .. i-1`, row-major `d × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundMatrix {
    values: Vec<f64>,
    assets: usize,
    span: usize,
    anchor: usize,
}

impl BackgroundMatrix {
    pub fn from_rows(rows: &[Vec<f64>], anchor: usize) -> Result<Self> {
        let assets = rows.len();
        let span = rows.first().map_or(0, Vec::len);
        if assets == 0 || span == 0 || rows.iter().any(|r| r.len() != span) {
            return Err(Error::ShapeMismatch("background rows must be nonempty and equal length".into()));
        }
        Ok(Self {
            values: rows.concat(),
            assets,
            span,
            anchor,
        })
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn get(&self, asset: usize, column: usize) -> f64 {
        self.values[asset * self.span + column]
    }

    /// Row-major flattening.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

pub fn background(panel: &AssetPanel, i: usize, n: usize) -> Result<BackgroundMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("background span must be at least 1".into()));
    }
    if i < n {
        return Err(Error::InsufficientHistory { t: i, need: n });
    }
    let columns = (i - n..i)
        .map(|t| fluctuation(panel, t))
        .collect::<Result<Vec<_>>>()?;
    let d = panel.assets();
    let mut values = Vec::with_capacity(d * n);
    for a in 0..d {
        values.extend(columns.iter().map(|x| x.as_slice()[a]));
    }
    Ok(BackgroundMatrix {
        values,
        assets: d,
        span: n,
        anchor: i,
    })
}

/// Pearson correlation of two equal-length sequences; 0 when either has zero
/// variance.
fn pearson(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut n, mut sa, mut sb) = (0usize, 0.0, 0.0);
    for (x, y) in a.clone().zip(b.clone()) {
        n += 1;
        sa += x;
        sb += y;
    }
    if n == 0 {
        return 0.0;
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Pearson correlation of the two backgrounds flattened row-major.
pub fn similarity(a: &BackgroundMatrix, b: &BackgroundMatrix) -> Result<f64> {
    if a.assets != b.assets || a.span != b.span {
        return Err(Error::ShapeMismatch(format!(
            "backgrounds are {}x{} and {}x{}",
            a.assets, a.span, b.assets, b.span
        )));
    }
    Ok(pearson(a.values.iter().copied(), b.values.iter().copied()))
}

/// Periods whose background correlates with the anchor's above the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarSet {
    pub anchor: usize,
    pub span: usize,
    pub threshold: f64,
    pub indices: Vec<usize>,
}

impl SimilarSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Fluctuation vectors of periods `0 .. k`, period-major.
struct History {
    xs: Vec<Vec<f64>>,
}

impl History {
    fn new(panel: &AssetPanel, k: usize) -> Result<Self> {
        let xs = (0..k)
            .map(|t| fluctuation(panel, t).map(|x| x.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { xs })
    }

    /// Background of period `i`, walked column by column. Pearson correlation
    /// does not depend on the walk order as long as both sides share it.
    fn walk(&self, i: usize, n: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        self.xs[i - n..i].iter().flat_map(|x| x.iter().copied())
    }

    fn similar(&self, k: usize, n: usize, threshold: f64) -> Vec<usize> {
        (n..k)
            .filter(|&i| pearson(self.walk(i, n), self.walk(k, n)) > threshold)
            .collect()
    }
}

/// `{ i : n ≤ i < k, similarity(background(i, n), background(k, n)) > ρ }`.
pub fn similar_set(panel: &AssetPanel, k: usize, n: usize, threshold: f64) -> Result<SimilarSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("background span must be at least 1".into()));
    }
    if k < n + 1 {
        return Err(Error::InsufficientHistory { t: k, need: n + 1 });
    }
    let history = History::new(panel, k)?;
    Ok(SimilarSet {
        anchor: k,
        span: n,
        threshold,
        indices: history.similar(k, n, threshold),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlosParams {
    /// Largest background span `N`; spans `2..=N` are ensembled.
    pub max_span: usize,
    /// Similarity threshold `ρ`.
    pub threshold: f64,
    pub constraints: ConstraintSet,
    pub solver: SolverOptions,
}

impl Default for RlosParams {
    fn default() -> Self {
        Self {
            max_span: 20,
            threshold: 0.0,
            constraints: ConstraintSet::default(),
            solver: SolverOptions::default(),
        }
    }
}

/// Per-span optimum and its ensemble weight (in-sample log wealth).
#[derive(Debug, Clone, PartialEq)]
pub struct SpanEstimate {
    pub span: usize,
    pub set_size: usize,
    pub portfolio: PortfolioWeights,
    pub weight: f64,
}

/// Per-span estimates for trading period `k`, ascending by span. Spans
/// with fewer than two similar periods (or an infeasible return floor) are
/// skipped.
pub fn span_estimates(panel: &AssetPanel, k: usize, params: &RlosParams) -> Result<Vec<SpanEstimate>> {
    if k < 3 {
        return Err(Error::InsufficientHistory { t: k, need: 3 });
    }
    let history = History::new(panel, k)?;
    let spans: Vec<usize> = (2..=params.max_span).filter(|&n| k > n).collect();
    let results: Vec<Result<Option<SpanEstimate>>> = spans
        .par_iter()
        .map(|&n| {
            let set = history.similar(k, n, params.threshold);
            if set.len() < 2 {
                return Ok(None);
            }
            let samples: Vec<&[f64]> = set.iter().map(|&i| history.xs[i].as_slice()).collect();
            let moments = MomentEstimate::from_samples(&samples)?;
            let portfolio = match optimize_allocation(&moments, &params.constraints, &params.solver) {
                Ok(b) => b,
                Err(Error::Infeasible { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let weight = samples.iter().map(|x| portfolio.dot(x).ln()).sum();
            Ok(Some(SpanEstimate {
                span: n,
                set_size: set.len(),
                portfolio,
                weight,
            }))
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        if let Some(e) = r? {
            out.push(e);
        }
    }
    Ok(out)
}

/// RLOS portfolio for trading period `k` using data strictly before `k`.
///
/// The blend `Σ w⁽ⁿ⁾ b⁽ⁿ⁾ / Σ w⁽ⁿ⁾` falls back to uniform weights when no span
/// qualifies or `Σ w⁽ⁿ⁾ ≤ 1e-9`; otherwise negative entries are clipped and
/// the vector renormalized.
pub fn rlos_portfolio(panel: &AssetPanel, k: usize, params: &RlosParams) -> Result<PortfolioWeights> {
    let estimates = span_estimates(panel, k, params)?;
    blend(&estimates, panel.assets())
}

pub(crate) fn blend(estimates: &[SpanEstimate], d: usize) -> Result<PortfolioWeights> {
    let total: f64 = estimates.iter().map(|e| e.weight).sum();
    if estimates.is_empty() || !(total > 1e-9) {
        return PortfolioWeights::uniform(d);
    }
    let mut combined = vec![0.0; d];
    for e in estimates {
        for (c, b) in combined.iter_mut().zip(e.portfolio.as_slice()) {
            *c += e.weight * b;
        }
    }
    combined.iter_mut().for_each(|c| *c /= total);
    PortfolioWeights::normalized(combined)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bg(values: &[f64]) -> BackgroundMatrix {
        BackgroundMatrix::from_rows(&[values.to_vec()], 0).unwrap()
    }

    #[test]
    fn background_indexing() {
        let ratios = vec![vec![1.1, 0.9, 1.2, 1.0, 1.05]];
        let p = AssetPanel::from_fluctuations(&ratios).unwrap();
        let b = background(&p, 4, 3).unwrap();
        let expect = [0.9, 1.2, 1.0];
        for (j, e) in expect.iter().enumerate() {
            assert!((b.get(0, j) - e).abs() < 1e-12);
        }
        assert!(matches!(background(&p, 2, 3), Err(Error::InsufficientHistory { .. })));

        let p = AssetPanel::from_fluctuations(&[vec![1.0; 8], vec![1.0; 8]]).unwrap();
        let b = background(&p, 5, 2).unwrap();
        assert_eq!(b.anchor(), 5);
        assert!(b.as_slice().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn similarity_values() {
        let a = bg(&[1.0, 2.0, 3.0, 4.0]);
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let r = bg(&[4.0, 3.0, 2.0, 1.0]);
        assert!((similarity(&a, &r).unwrap() + 1.0).abs() < 1e-15);
        let c = bg(&[1.0, 2.0, 3.0, 5.0]);
        // cov 6.5 / sqrt(5 * 8.75)
        let expect = 6.5 / (5.0f64 * 8.75).sqrt();
        assert!((similarity(&a, &c).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.9827).abs() < 1e-4);
        let flat = bg(&[1.0; 4]);
        assert_eq!(similarity(&a, &flat).unwrap(), 0.0);
        assert!(similarity(&a, &bg(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn threshold_one_and_flat_market_give_empty_sets() {
        let ratios: Vec<Vec<f64>> = (0..2)
            .map(|a| (0..30).map(|t| 1.0 + 0.01 * (((t * 7 + a * 3) % 5) as f64 - 2.0)).collect())
            .collect();
        let p = AssetPanel::from_fluctuations(&ratios).unwrap();
        assert!(similar_set(&p, 25, 3, 1.0).unwrap().is_empty());
        let flat = AssetPanel::from_fluctuations(&vec![vec![1.0; 30]; 2]).unwrap();
        assert!(similar_set(&flat, 25, 3, 0.0).unwrap().is_empty());
        assert!(matches!(
            similar_set(&flat, 3, 3, 0.0),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn no_qualifying_span_falls_back_to_uniform() {
        let flat = AssetPanel::from_fluctuations(&vec![vec![1.0; 30]; 4]).unwrap();
        let b = rlos_portfolio(&flat, 20, &RlosParams::default()).unwrap();
        assert_eq!(b.as_slice(), &[0.25; 4]);
        assert!(rlos_portfolio(&flat, 2, &RlosParams::default()).is_err());
    }

    #[test]
    fn single_span_passes_through() {
        let e = SpanEstimate {
            span: 2,
            set_size: 3,
            portfolio: PortfolioWeights::new(vec![0.2, 0.8]).unwrap(),
            weight: 0.37,
        };
        let b = blend(std::slice::from_ref(&e), 2).unwrap();
        assert!((b[0] - 0.2).abs() < 1e-15 && (b[1] - 0.8).abs() < 1e-15);
        let neg = SpanEstimate { weight: -0.1, ..e };
        assert_eq!(blend(&[neg], 2).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn mixed_sign_blend_is_clipped_onto_simplex() {
        let a = SpanEstimate {
            span: 2,
            set_size: 2,
            portfolio: PortfolioWeights::new(vec![1.0, 0.0]).unwrap(),
            weight: 1.0,
        };
        let b = SpanEstimate {
            span: 3,
            set_size: 2,
            portfolio: PortfolioWeights::new(vec![0.0, 1.0]).unwrap(),
            weight: -0.5,
        };
        // raw blend (2, -1) clips to (1, 0)
        assert_eq!(blend(&[a, b], 2).unwrap().as_slice(), &[1.0, 0.0]);
    }
}
