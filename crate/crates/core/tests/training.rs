use rlos::agent::{forward, Agent, AgentParameters, Architecture, Hyperparameters, TradeRecord};
use rlos::market::{fluctuation, state_tensor};
use rlos::pattern::{rlos_portfolio, RlosParams};
use rlos::synthetic::{generate, GeneratorSpec};

fn stored_agent(seed: u64) -> Agent {
    let panel = generate(&GeneratorSpec::mean_revert(4, 50), 3).unwrap();
    let arch = Architecture::default();
    let params = AgentParameters::init(arch.clone(), seed).unwrap();
    let rlos = RlosParams { max_span: 8, ..RlosParams::default() };
    let mut agent = Agent::new(params, Hyperparameters::default(), seed).unwrap();
    for t in arch.history..panel.periods() {
        let state = state_tensor(&panel, t, arch.history).unwrap();
        let advice = rlos_portfolio(&panel, t, &rlos).unwrap();
        let (action, r) = forward(agent.params(), &state, &advice).unwrap();
        let x = fluctuation(&panel, t).unwrap();
        agent.remember(TradeRecord::new(t, state, advice, action, r, x).unwrap());
    }
    agent
}

#[test]
fn training_on_a_frozen_store_reduces_the_loss() {
    let mut agent = stored_agent(5);
    let losses: Vec<f64> = (0..500).map(|_| agent.train().unwrap()).collect();
    let tail = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < losses[0], "first {} trailing {}", losses[0], tail);
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn replayed_training_is_reproducible() {
    let run = || {
        let mut agent = stored_agent(9);
        let losses: Vec<f64> = (0..30).map(|_| agent.train().unwrap()).collect();
        (losses, agent.curve_csv(), agent.into_params())
    };
    let (l1, c1, p1) = run();
    let (l2, c2, p2) = run();
    assert_eq!(l1, l2);
    assert_eq!(c1, c2);
    assert_eq!(p1.values(), p2.values());
}
