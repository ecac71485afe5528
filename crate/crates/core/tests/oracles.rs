use pgdag_core::autodiff::evaluate_loss;
use pgdag_core::reference::oracle::{ddqn_fixture, oracle_loss, random_stubs};
use pgdag_core::reference::{self, GRAPH_NAMES};

fn interpret(name: &str, stubs: &reference::oracle::Stubs) -> f64 {
    let g = reference::graph(name).unwrap();
    evaluate_loss(&g, &stubs.store, &stubs.bindings, &stubs.hp, &stubs.actions, None).unwrap().0
}

#[test]
fn interpreter_matches_oracles() {
    for name in GRAPH_NAMES {
        for rows in [1, 7, 32] {
            for seed in 0..100 {
                let stubs = random_stubs(name, seed, rows).unwrap();
                let want = oracle_loss(name, &stubs).unwrap();
                let got = interpret(name, &stubs);
                assert!(
                    (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
                    "{name} rows={rows} seed={seed}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn ddqn_fixture_loss() {
    let got = interpret("ddqn", &ddqn_fixture());
    assert!((got - 0.1225).abs() < 1e-12);
}
