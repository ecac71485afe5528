use pgdag_core::autodiff::{backward, evaluate_loss};
use pgdag_core::graph::NodeKind;
use pgdag_core::nn::{mlp_init, ParameterStore};
use pgdag_core::reference::oracle::{random_stubs, STUB_STATE_DIM};
use pgdag_core::reference::{self, GRAPH_NAMES};
use pgdag_core::rng;
use rand::Rng;

const STEP: f64 = 1e-5;

/// Replaces the affine stubs with seeded MLPs whose weights are all
/// perturbed, so zero-initialized output layers do not hide gradients.
fn mlp_store(stubs: &ParameterStore, graph: &pgdag_core::Graph, seed: u64, actions: &pgdag_core::envs::ActionSpace) -> ParameterStore {
    let mut store = ParameterStore::new();
    let mut r = rng::rng_from(&[seed, 99]);
    for node in graph.nodes() {
        if let NodeKind::Parameter { store_key, signature } = &node.kind {
            if store.contains(store_key) {
                continue;
            }
            assert!(stubs.contains(store_key));
            let mut net = mlp_init(seed ^ rng::hash_str(store_key), *signature, STUB_STATE_DIM, actions).unwrap();
            for w in &mut net.params {
                *w += r.random_range(-0.1..0.1);
            }
            store.insert(store_key.clone(), net);
        }
    }
    store
}

#[test]
fn reverse_mode_matches_central_differences() {
    for name in GRAPH_NAMES {
        let g = reference::graph(name).unwrap();
        for seed in 0..3 {
            let stubs = random_stubs(name, seed, 7).unwrap();
            let store = mlp_store(&stubs.store, &g, seed, &stubs.actions);
            let keys: Vec<String> = store.keys().map(str::to_string).collect();
            let key_refs: Vec<&str> = keys.iter().map(String::as_str).collect();
            let loss_at = |s: &ParameterStore| {
                evaluate_loss(&g, s, &stubs.bindings, &stubs.hp, &stubs.actions, None).unwrap().0
            };
            let (_, mut tape) = evaluate_loss(&g, &store, &stubs.bindings, &stubs.hp, &stubs.actions, None).unwrap();
            let grads = backward(&g, &store, &mut tape, &key_refs).unwrap();
            let mut r = rng::rng_from(&[seed, 7]);
            for key in &keys {
                let n = store.get(key).unwrap().num_params();
                let mut ad = Vec::new();
                let mut fd = Vec::new();
                for _ in 0..10 {
                    let i = r.random_range(0..n);
                    let mut plus = store.clone();
                    plus.get_mut(key).unwrap().params[i] += STEP;
                    let mut minus = store.clone();
                    minus.get_mut(key).unwrap().params[i] -= STEP;
                    fd.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP));
                    ad.push(grads[key][i]);
                }
                let err = ad.iter().zip(&fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
                let scale = 1.0 + fd.iter().map(|f| f.abs()).fold(0.0, f64::max);
                assert!(err / scale < 1e-5, "{name} seed {seed} store {key}: ad {ad:?} fd {fd:?}");
            }
        }
    }
}
