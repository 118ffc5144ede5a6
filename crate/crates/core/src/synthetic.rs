//! Seeded synthetic markets.
//!
//! Each generator produces per-period close/open ratios and builds the panel
//! with [`AssetPanel::from_fluctuations`]. Noise is Gaussian from
//! `rand_distr::Normal` driven by [`rng::seeded`].

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::AssetPanel;
use crate::oracle::DiscreteDistribution;
use crate::rng;

/// Ratios are floored here so prices stay positive under heavy noise.
const MIN_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorSpec {
    /// Every ratio is 1.
    Const { assets: usize, periods: usize },
    /// Every period is an independent draw of the whole vector from `dist`.
    Iid {
        dist: DiscreteDistribution,
        periods: usize,
    },
    /// Asset 0 gains `drift` every period; the others wander with `noise`
    /// standard deviation and never beat asset 0.
    Trend {
        assets: usize,
        periods: usize,
        drift: f64,
        noise: f64,
    },
    /// Two regimes alternate every `regime_length` periods. In the first,
    /// even assets gain `amplitude` and odd assets lose it; the second is the
    /// mirror image. Noise is added on top.
    MeanRevert {
        assets: usize,
        periods: usize,
        amplitude: f64,
        regime_length: usize,
        noise: f64,
    },
}

impl GeneratorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            GeneratorSpec::Const { .. } => "const",
            GeneratorSpec::Iid { .. } => "iid",
            GeneratorSpec::Trend { .. } => "trend",
            GeneratorSpec::MeanRevert { .. } => "meanrevert",
        }
    }

    pub fn constant(assets: usize, periods: usize) -> Self {
        GeneratorSpec::Const { assets, periods }
    }

    pub fn trend(assets: usize, periods: usize) -> Self {
        GeneratorSpec::Trend {
            assets,
            periods,
            drift: 0.01,
            noise: 0.005,
        }
    }

    pub fn mean_revert(assets: usize, periods: usize) -> Self {
        GeneratorSpec::MeanRevert {
            assets,
            periods,
            amplitude: 0.02,
            regime_length: 1,
            noise: 0.005,
        }
    }
}

fn check_shape(assets: usize, periods: usize) -> Result<()> {
    if assets == 0 || periods == 0 {
        return Err(Error::InvalidArgument(format!(
            "generator needs at least one asset and one period, got {assets}x{periods}"
        )));
    }
    Ok(())
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(format!("noise level {sd}: {e}")))
}

/// Ratio matrix `ratios[a][t]` for `spec`.
pub fn generate_ratios(spec: &GeneratorSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::seeded(seed);
    match spec {
        GeneratorSpec::Const { assets, periods } => {
            check_shape(*assets, *periods)?;
            Ok(vec![vec![1.0; *periods]; *assets])
        }
        GeneratorSpec::Iid { dist, periods } => {
            check_shape(dist.dim(), *periods)?;
            let mut ratios = vec![Vec::with_capacity(*periods); dist.dim()];
            for _ in 0..*periods {
                let x = &dist.support()[dist.locate(rng::unit_f64(&mut rng))];
                for (row, v) in ratios.iter_mut().zip(x) {
                    row.push(*v);
                }
            }
            Ok(ratios)
        }
        GeneratorSpec::Trend {
            assets,
            periods,
            drift,
            noise,
        } => {
            check_shape(*assets, *periods)?;
            if !(*drift > 0.0) {
                return Err(Error::InvalidArgument(format!("drift must be positive, got {drift}")));
            }
            let eps = normal(*noise)?;
            let leader = 1.0 + drift;
            let mut ratios = vec![vec![leader; *periods]];
            for _ in 1..*assets {
                let row = (0..*periods)
                    .map(|_| (1.0 + eps.sample(&mut rng)).clamp(MIN_RATIO, leader * (1.0 - 1e-6)))
                    .collect();
                ratios.push(row);
            }
            Ok(ratios)
        }
        GeneratorSpec::MeanRevert {
            assets,
            periods,
            amplitude,
            regime_length,
            noise,
        } => {
            check_shape(*assets, *periods)?;
            if *regime_length == 0 {
                return Err(Error::InvalidArgument("regime length must be at least 1".into()));
            }
            let eps = normal(*noise)?;
            let mut ratios = vec![Vec::with_capacity(*periods); *assets];
            for t in 0..*periods {
                let flip = (t / regime_length) % 2 == 1;
                for (a, row) in ratios.iter_mut().enumerate() {
                    let sign = if (a % 2 == 0) != flip { 1.0 } else { -1.0 };
                    row.push((1.0 + sign * amplitude + eps.sample(&mut rng)).max(MIN_RATIO));
                }
            }
            Ok(ratios)
        }
    }
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<AssetPanel> {
    AssetPanel::from_fluctuations(&generate_ratios(spec, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::fluctuation;

    #[test]
    fn constant_market_is_flat() {
        let p = generate(&GeneratorSpec::constant(3, 5), 0).unwrap();
        for t in 0..5 {
            assert!(fluctuation(&p, t).unwrap().as_slice().iter().all(|x| (*x - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn trend_leader_always_wins() {
        let p = generate(&GeneratorSpec::trend(4, 50), 9).unwrap();
        for t in 0..50 {
            let x = fluctuation(&p, t).unwrap();
            let x = x.as_slice();
            assert!(x[1..].iter().all(|v| *v < x[0]));
        }
    }

    #[test]
    fn mean_revert_alternates() {
        let spec = GeneratorSpec::MeanRevert {
            assets: 2,
            periods: 6,
            amplitude: 0.05,
            regime_length: 2,
            noise: 0.0,
        };
        let r = generate_ratios(&spec, 1).unwrap();
        assert_eq!(r[0], vec![1.05, 1.05, 0.95, 0.95, 1.05, 1.05]);
        assert_eq!(r[1], vec![0.95, 0.95, 1.05, 1.05, 0.95, 0.95]);
    }

    #[test]
    fn iid_draws_from_support() {
        let dist = DiscreteDistribution::new(vec![vec![2.0, 0.5], vec![0.5, 2.0]], vec![0.5, 0.5]).unwrap();
        let r = generate_ratios(&GeneratorSpec::Iid { dist, periods: 200 }, 4).unwrap();
        let ups = r[0].iter().filter(|v| **v == 2.0).count();
        assert!(r[0].iter().zip(&r[1]).all(|(a, b)| a * b == 1.0));
        assert!((60..140).contains(&ups));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = GeneratorSpec::mean_revert(5, 40);
        assert_eq!(generate(&spec, 3).unwrap(), generate(&spec, 3).unwrap());
        assert_ne!(generate(&spec, 3).unwrap(), generate(&spec, 4).unwrap());
    }
}
