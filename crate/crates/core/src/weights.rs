use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum-to-one invariant.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Long-only portfolio weights: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PortfolioWeights(Vec<f64>);

impl PortfolioWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidWeights(format!("entry {i} = {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!("entries sum to {sum}")));
        }
        Ok(Self(weights))
    }

    /// Clips negative entries to zero and rescales to unit sum.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        for w in weights.iter_mut() {
            if !w.is_finite() {
                return Err(Error::InvalidWeights(format!("non-finite entry {w}")));
            }
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidWeights("no positive mass".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Self::new(weights)
    }

    pub fn uniform(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("asset count must be at least 1".into()));
        }
        Ok(Self(vec![1.0 / d as f64; d]))
    }

    /// All mass on asset `index`.
    pub fn one_hot(d: usize, index: usize) -> Result<Self> {
        if index >= d {
            return Err(Error::InvalidArgument(format!(
                "one-hot index {index} out of range for {d} assets"
            )));
        }
        let mut w = vec![0.0; d];
        w[index] = 1.0;
        Ok(Self(w))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Portfolio gross return `bᵀx`.
    pub fn dot(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.0.len(), x.len());
        self.0.iter().zip(x).map(|(b, x)| b * x).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|w| w.abs()).sum()
    }
}

impl Index<usize> for PortfolioWeights {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for PortfolioWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PortfolioWeights> for Vec<f64> {
    fn from(w: PortfolioWeights) -> Self {
        w.0
    }
}

impl fmt::Display for PortfolioWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, w) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{w:.6}")?;
        }
        write!(f, ")")
    }
}

/// Index of the largest entry, ties broken toward the lowest index.
pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry, ties broken toward the lowest index.
pub(crate) fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v < x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_vectors() {
        assert!(PortfolioWeights::new(vec![]).is_err());
        assert!(PortfolioWeights::new(vec![0.5, 0.6]).is_err());
        assert!(PortfolioWeights::new(vec![1.5, -0.5]).is_err());
        assert!(PortfolioWeights::new(vec![f64::NAN, 1.0]).is_err());
        assert!(PortfolioWeights::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn normalized_clips_and_rescales() {
        let w = PortfolioWeights::normalized(vec![2.0, -1.0, 2.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.0, 0.5]);
        assert!(PortfolioWeights::normalized(vec![-1.0, 0.0]).is_err());
    }

    #[test]
    fn arg_extrema_tie_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmin(&[1.0, 0.5, 0.5]), 1);
    }
}
