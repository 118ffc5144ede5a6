//! Comparison strategies. The momentum rules look back one period only.

use crate::error::Result;
use crate::market::FluctuationVector;
use crate::weights::{argmax, argmin, PortfolioWeights};

/// Equal weight on every asset.
pub fn naive_average(d: usize) -> Result<PortfolioWeights> {
    PortfolioWeights::uniform(d)
}

/// Everything on the previous period's best asset, lowest index on ties.
pub fn follow_winner(prev: &FluctuationVector) -> PortfolioWeights {
    PortfolioWeights::one_hot(prev.len(), argmax(prev.as_slice())).expect("argmax is in range")
}

/// Everything on the previous period's worst asset, lowest index on ties.
pub fn follow_loser(prev: &FluctuationVector) -> PortfolioWeights {
    PortfolioWeights::one_hot(prev.len(), argmin(prev.as_slice())).expect("argmin is in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(v: &[f64]) -> FluctuationVector {
        FluctuationVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn naive_average_examples() {
        assert_eq!(naive_average(1).unwrap().as_slice(), &[1.0]);
        assert_eq!(naive_average(4).unwrap().as_slice(), &[0.25; 4]);
        assert!((naive_average(100).unwrap().as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(naive_average(0).is_err());
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(follow_winner(&x(&[1.2, 1.0])).as_slice(), &[1.0, 0.0]);
        assert_eq!(follow_winner(&x(&[1.0, 1.0])).as_slice(), &[1.0, 0.0]);
        assert_eq!(follow_winner(&x(&[0.9, 1.1, 1.05])).as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(follow_loser(&x(&[1.2, 1.0])).as_slice(), &[0.0, 1.0]);
        assert_eq!(follow_loser(&x(&[1.0, 1.0])).as_slice(), &[1.0, 0.0]);
        assert_eq!(follow_loser(&x(&[0.9, 1.1, 1.05])).as_slice(), &[1.0, 0.0, 0.0]);
    }
}
