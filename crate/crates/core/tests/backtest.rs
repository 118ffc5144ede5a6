use rlos::backtest::{compare, emit_report, file_digest, run_backtest, CompareSettings, Rlos, Span, StrategySpec};
use rlos::config::{RunConfig, STRATEGY_NAMES};
use rlos::oracle::{expected_log_return, glos_optimal, DiscreteDistribution};
use rlos::market::fluctuation;
use rlos::pattern::RlosParams;
use rlos::synthetic::{generate, GeneratorSpec};

fn all_strategies() -> Vec<StrategySpec> {
    let mut cfg = RunConfig::default();
    cfg.strategies.names = STRATEGY_NAMES.iter().map(|s| s.to_string()).collect();
    cfg.strategy_specs(None).unwrap()
}

#[test]
fn compare_is_deterministic_down_to_the_report_bytes() {
    let panel = generate(&GeneratorSpec::mean_revert(5, 90), 4).unwrap();
    let spans = [Span::new(21, 60), Span::new(21, 90)];
    let settings = CompareSettings { bootstrap_assets: Some(3), warmup: 21 };
    let specs = all_strategies();
    let first = compare(&specs, &panel, &spans, &[1, 2], &settings).unwrap();
    let second = compare(&specs, &panel, &spans, &[1, 2], &settings).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.cells.len(), spans.len() * 2 * specs.len());

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files_a = emit_report(&first, a.path()).unwrap();
    let files_b = emit_report(&second, b.path()).unwrap();
    assert_eq!(files_a.len(), files_b.len());
    for (fa, fb) in files_a.iter().zip(&files_b) {
        assert_eq!(fa.file_name(), fb.file_name());
        assert_eq!(file_digest(fa).unwrap(), file_digest(fb).unwrap(), "{}", fa.display());
    }
}

#[test]
fn rlos_growth_approaches_the_log_optimum_on_iid_markets() {
    let dist = DiscreteDistribution::new(
        vec![vec![1.06, 0.97, 1.0], vec![0.95, 1.05, 1.01], vec![1.02, 1.0, 0.98]],
        vec![0.4, 0.35, 0.25],
    )
    .unwrap();
    let b_star = glos_optimal(&dist, 1e-12).unwrap();
    let best = expected_log_return(&b_star, &dist).unwrap();
    let periods = 500;
    let panel = generate(&GeneratorSpec::Iid { dist, periods }, 12).unwrap();
    let span = Span::new(21, periods);
    let curve = run_backtest(&mut Rlos(RlosParams::default()), &panel, span, 21).unwrap();
    let realized = curve.mean_log_return();

    let path_mean = |b: &rlos::PortfolioWeights| {
        (span.start..span.end)
            .map(|t| b.dot(fluctuation(&panel, t).unwrap().as_slice()).ln())
            .sum::<f64>()
            / (span.end - span.start) as f64
    };
    let oracle_path = path_mean(&b_star);
    let uniform_path = path_mean(&rlos::PortfolioWeights::uniform(3).unwrap());
    // Same draws for both, so the gap measures estimation error only.
    assert!(realized > uniform_path, "rlos {realized} uniform {uniform_path}");
    assert!(oracle_path > 0.5 * best);
    assert!(realized > 0.75 * oracle_path, "rlos {realized} oracle {oracle_path}");
}
