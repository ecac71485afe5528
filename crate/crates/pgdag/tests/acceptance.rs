//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run a subset with
//! `cargo test -p pgdag --test acceptance -- A1 A3`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use pgdag_core::autodiff::{backward, evaluate_loss, AutodiffError, Bindings, NoiseContext};
use pgdag_core::envs::{self, eval_score, ActionSpace, BatchMode, Transition, TransitionBatch};
use pgdag_core::evolution::{self, acceptable, EvolutionConfig, GraphContext, Individual, IterationRecord, Scorer};
use pgdag_core::graph::{validate, ActionKind, DType, NodeKind, OpRegistry};
use pgdag_core::nn::{mlp_init, ParameterStore};
use pgdag_core::ops::{clip, eval_primitive, squashing, sum_and_discount, OpError, OpId};
use pgdag_core::reference::oracle::{oracle_loss, random_stubs, STUB_STATE_DIM};
use pgdag_core::reference::{self, AlgorithmSpec, GRAPH_NAMES};
use pgdag_core::rng::{self, Rng};
use pgdag_core::trainer::{algorithm_defaults, init_store, train_agent};
use pgdag_core::{HyperParams, Value};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: "A1", title: "oracle equivalence", limit: Duration::from_secs(10), run: a1_oracles },
        Criterion { id: "A2", title: "gradient correctness", limit: Duration::from_secs(60), run: a2_gradients },
        Criterion { id: "A3", title: "operator properties", limit: Duration::from_secs(30), run: a3_operators },
        Criterion { id: "A4", title: "desk-scale training", limit: Duration::from_secs(15 * 60), run: a4_training },
        Criterion { id: "A5", title: "mutation robustness", limit: Duration::from_secs(5 * 60), run: a5_mutations },
        Criterion { id: "A6", title: "evolution invariants", limit: Duration::from_secs(10 * 60), run: a6_evolution },
        Criterion { id: "A7", title: "score normalization", limit: Duration::from_secs(10), run: a7_scoring },
    ];
    // cargo passes harness flags such as --nocapture; only bare ids filter
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w.eq_ignore_ascii_case(c.id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = (c.run)();
        let took = start.elapsed();
        let in_time = took <= c.limit;
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {:<22} {}  {} [{:.1} s, limit {} s{}]",
            c.id,
            c.title,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            c.limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / got.abs().max(want.abs())
    }
}

// A1: interpreter vs the straight-line loss formulas.
fn a1_oracles() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut worst = (0.0f64, String::new());
    let mut cases = 0;
    for name in GRAPH_NAMES {
        let g = reference::graph(name).expect("reference graph");
        for rows in [1, 7, 32] {
            for seed in 0..100 {
                let s = random_stubs(name, seed, rows).expect("stubs");
                let want = oracle_loss(name, &s).expect("oracle");
                let got = match evaluate_loss(&g, &s.store, &s.bindings, &s.hp, &s.actions, None) {
                    Ok((l, _)) => l,
                    Err(e) => return Outcome::new(false, format!("{name} rows={rows} seed={seed}: {e}")),
                };
                let e = rel_err(got, want);
                if e.is_nan() || e > worst.0 {
                    worst = (e, format!("{name} rows={rows} seed={seed}"));
                }
                cases += 1;
            }
        }
    }
    Outcome::new(worst.0 <= TOL, format!("{cases} cases, max rel err {:.2e} ({}), tol {TOL:.0e}", worst.0, worst.1))
}

/// Seeded MLPs for every store a graph reads, with all weights perturbed so
/// zero-initialized output layers do not hide gradients.
fn mlp_store(g: &pgdag_core::Graph, seed: u64, actions: &ActionSpace) -> ParameterStore {
    let mut store = ParameterStore::new();
    let mut r = rng::rng_from(&[seed, 99]);
    for node in g.nodes() {
        if let NodeKind::Parameter { store_key, signature } = &node.kind {
            if store.contains(store_key) {
                continue;
            }
            let mut net = mlp_init(seed ^ rng::hash_str(store_key), *signature, STUB_STATE_DIM, actions).expect("mlp");
            for w in &mut net.params {
                *w += r.random_range(-0.1..0.1);
            }
            store.insert(store_key.clone(), net);
        }
    }
    store
}

// A2: reverse mode vs central differences on real MLP stores.
fn a2_gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    // Coordinates whose derivative is this small are compared absolutely:
    // central differences cannot resolve a relative error below roughly
    // (rounding error of the loss) / STEP.
    const FLOOR: f64 = 1e-4;
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    for name in GRAPH_NAMES {
        let g = reference::graph(name).expect("reference graph");
        let s = random_stubs(name, 0, 7).expect("stubs");
        let store = mlp_store(&g, 0, &s.actions);
        let keys: Vec<String> = store.keys().map(str::to_string).collect();
        let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
        let loss_at = |st: &ParameterStore| evaluate_loss(&g, st, &s.bindings, &s.hp, &s.actions, None).map(|x| x.0);
        let (_, mut tape) = match evaluate_loss(&g, &store, &s.bindings, &s.hp, &s.actions, None) {
            Ok(x) => x,
            Err(e) => return Outcome::new(false, format!("{name}: {e}")),
        };
        let grads = match backward(&g, &store, &mut tape, &refs) {
            Ok(x) => x,
            Err(e) => return Outcome::new(false, format!("{name}: {e}")),
        };
        let mut r = rng::rng_from(&[rng::hash_str(name), 7]);
        for key in &keys {
            let n = store.get(key).expect("store").num_params();
            for _ in 0..10 {
                let i = r.random_range(0..n);
                let mut plus = store.clone();
                plus.get_mut(key).expect("store").params[i] += STEP;
                let mut minus = store.clone();
                minus.get_mut(key).expect("store").params[i] -= STEP;
                let fd = (loss_at(&plus).expect("loss") - loss_at(&minus).expect("loss")) / (2.0 * STEP);
                let ad = grads[key][i];
                let e = (ad - fd).abs() / ad.abs().max(fd.abs()).max(FLOOR);
                if e.is_nan() || e > worst.0 {
                    worst = (e, format!("{name}/{key}[{i}] ad={ad:.6e} fd={fd:.6e}"));
                }
                coords += 1;
            }
        }
    }
    Outcome::new(worst.0 <= TOL, format!("{coords} coordinates, max rel err {:.2e} ({}), tol {TOL:.0e}", worst.0, worst.1))
}

// A3: operator properties.
fn a3_operators() -> Outcome {
    let mut r = rng::rng_from(&[3]);
    let mut notes = Vec::new();
    let mut ok = true;

    // SumAndDiscount vs the O(l^2) definition
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let l = r.random_range(0..=256);
        let b: f64 = r.random_range(0.0..=1.0);
        let v: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
        let fast = sum_and_discount(&v, b);
        for i in 0..l {
            let slow: f64 = (i..l).map(|k| b.powi((k - i) as i32) * v[k]).sum();
            worst = worst.max((fast[i] - slow).abs());
        }
    }
    ok &= worst <= 1e-12;
    notes.push(format!("discount err {worst:.1e}"));

    // clip: bounds and idempotence
    let mut clip_ok = true;
    for _ in 0..10_000 {
        let x = r.random_range(-1e3..1e3);
        let lo = r.random_range(-10.0..10.0);
        let hi = lo + r.random_range(0.0..10.0);
        let c = clip(x, lo, hi).expect("ordered bounds");
        clip_ok &= lo <= c && c <= hi && clip(c, lo, hi) == Ok(c);
    }
    clip_ok &= clip(0.0, 1.0, -1.0).is_err();
    ok &= clip_ok;
    notes.push(format!("clip {}", if clip_ok { "ok" } else { "violated" }));

    // squashing stays inside (-1, 1)
    let mut squash_ok = true;
    for _ in 0..10_000 {
        let (mu, ls, xi) = (r.random_range(-5.0..5.0), r.random_range(-3.0..1.0), r.random_range(-4.0..4.0));
        let a = squashing(&[mu], &[ls], &[xi])[0];
        squash_ok &= a > -1.0 && a < 1.0;
    }
    ok &= squash_ok;
    notes.push(format!("squash {}", if squash_ok { "ok" } else { "left (-1,1)" }));

    // categorical probabilities sum to one
    let mut cat = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..12);
        let head = Value::new(DType::ListR, Some(1), n, (0..n).map(|_| r.random_range(-30.0..30.0)).collect());
        let total: f64 = (0..n)
            .map(|i| {
                let a = Value::new(DType::Z, Some(1), 1, vec![i as f64]);
                eval_primitive(OpId::Prob, &[&head, &a], ActionKind::Discrete).expect("prob").data[0]
            })
            .sum();
        cat = cat.max((total - 1.0).abs());
    }
    ok &= cat <= 1e-12;
    notes.push(format!("categorical err {cat:.1e}"));

    // squashed 1-D density integrates to one (midpoint rule)
    let mut dens = 0.0f64;
    for (mu, ls) in [(0.0, 0.0), (0.5, -0.5), (-1.0, -1.0), (1.2, 0.3)] {
        let n = 100_000;
        let h = 2.0 / n as f64;
        let head = Value::new(DType::ListR, Some(1), 2, vec![mu, ls]);
        let mass: f64 = (0..n)
            .map(|k| {
                let a = Value::new(DType::Z, Some(1), 1, vec![-1.0 + (k as f64 + 0.5) * h]);
                eval_primitive(OpId::SquashedProb, &[&head, &a], ActionKind::Continuous).expect("density").data[0] * h
            })
            .sum();
        dens = dens.max((mass - 1.0).abs());
    }
    ok &= dens <= 1e-4;
    notes.push(format!("density err {dens:.1e}"));
    Outcome::new(ok, notes.join(", "))
}

fn mean_last(returns: &[f64], m: usize) -> f64 {
    let k = returns.len().saturating_sub(m);
    let tail = &returns[k..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Mean return over the final 20 episodes for each seed.
fn cartpole_runs(alg: &str) -> Result<Vec<f64>, String> {
    let spec = reference::build(alg).map_err(|e| e.to_string())?;
    let (hp, budget) = algorithm_defaults(alg);
    let budget = pgdag_core::trainer::TrainBudget { total_steps: 50_000, ..budget };
    (0..5u64)
        .map(|seed| {
            let rep = train_agent(&spec, "cartpole", &budget, &hp, seed, &mut |_| {}).map_err(|e| e.to_string())?;
            if let Some(f) = rep.failure {
                return Err(format!("{alg} seed {seed}: {f}"));
            }
            Ok(mean_last(&rep.returns, 20))
        })
        .collect()
}

// A4: DDQN and VPG on CartPole, 50k steps, 5 seeds.
fn a4_training() -> Outcome {
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join("/");
    let (ddqn, vpg) = match (cartpole_runs("ddqn"), cartpole_runs("vpg")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, e),
    };
    let d = ddqn.iter().filter(|&&x| x >= 150.0).count();
    let v = vpg.iter().filter(|&&x| x >= 120.0).count();
    Outcome::new(
        d >= 3 && v >= 3,
        format!("ddqn {} ({d}/5 >= 150), vpg {} ({v}/5 >= 120), need 3/5", fmt(&ddqn), fmt(&vpg)),
    )
}

fn random_batch(desc: &envs::EnvDescriptor, rows: usize, r: &mut Rng) -> TransitionBatch {
    let width = match &desc.actions {
        ActionSpace::Discrete(_) => 1,
        ActionSpace::Continuous { low, .. } => low.len(),
    };
    let mut b = TransitionBatch::new(desc.state_dim, width, BatchMode::IidReplay);
    for _ in 0..rows {
        let a = match &desc.actions {
            ActionSpace::Discrete(n) => vec![r.random_range(0..*n) as f64],
            ActionSpace::Continuous { low, high } => low.iter().zip(high).map(|(l, h)| r.random_range(*l..=*h)).collect(),
        };
        let done = r.random_bool(0.1);
        b.push(&Transition {
            s: (0..desc.state_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            a,
            r: r.random_range(-1.0..1.0),
            terminated: done,
            end: done,
            s_next: (0..desc.state_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
        })
        .expect("conforming transition");
    }
    b
}

// A5: every mutation validates; random graphs run on conforming batches.
fn a5_mutations() -> Outcome {
    let registry = OpRegistry::default();
    let ddqn = reference::build("ddqn").expect("ddqn");
    let mut r = rng::rng_from(&[5]);
    let mut parent = ddqn.clone();
    let mut invalid = 0;
    let mut invalid_notes = Vec::new();
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..10_000 {
        // random walks of length 100 from the DDQN seed
        if i % 100 == 0 {
            parent = ddqn.clone();
        }
        match evolution::mutate(&parent, &registry, &mut r, 20) {
            Ok(child) => {
                let g = &child.spec.losses[child.loss].graph;
                if !validate(g, &registry).ok || !acceptable(g, &registry) {
                    invalid += 1;
                    invalid_notes.push(format!("mutation {i} ({}) invalid", child.mutation));
                }
                let k = child.mutation.to_string();
                *kinds.entry(k.split_whitespace().next().unwrap_or("").to_string()).or_default() += 1;
                parent = child.spec;
            }
            Err(e) => {
                invalid += 1;
                invalid_notes.push(format!("mutation {i}: {e}"));
            }
        }
    }

    // random graphs across every algorithm's first loss
    let mut faults = Vec::new();
    let mut domain = 0;
    let algs: Vec<AlgorithmSpec> = reference::ALGORITHMS.iter().map(|a| reference::build(a).expect("spec")).collect();
    for i in 0..1000u64 {
        let spec = &algs[i as usize % algs.len()];
        let ctx = GraphContext::for_spec(spec, 0);
        let g = match evolution::random_graph(&ctx, &registry, &mut r, "random") {
            Ok(g) => g,
            Err(e) => {
                faults.push(format!("generation: {e}"));
                continue;
            }
        };
        if !validate(&g, &registry).ok {
            faults.push(format!("graph {i} does not validate"));
            continue;
        }
        let desc = envs::descriptor(if spec.actions == ActionKind::Discrete { "cartpole" } else { "pendulum" })
            .expect("env");
        let spec = spec.with_graph(0, g.clone());
        let store = init_store(&spec, desc.state_dim, &desc.actions, i).expect("store");
        let rows = r.random_range(1..=32);
        let hp = HyperParams::default();
        let mut bind = Bindings::from_batch(&random_batch(&desc, rows, &mut r), &hp);
        for sym in ["adv", "rtg"] {
            bind.set(sym, Value::scalars((0..rows).map(|_| r.random_range(-1.0..1.0)).collect()));
        }
        let noise = NoiseContext::new(i, 0, 0);
        let res = evaluate_loss(&g, &store, &bind, &hp, &desc.actions, Some(&noise)).and_then(|(_, mut tape)| {
            let keys: Vec<&str> = store.keys().collect();
            backward(&g, &store, &mut tape, &keys).map(|_| ())
        });
        match res {
            Ok(()) => {}
            // value-domain outcomes, not type or shape faults: overflow on
            // random weights, and Clip bounds that cross at run time
            Err(AutodiffError::NonFiniteLoss(_)) => domain += 1,
            Err(AutodiffError::Op { source: OpError::InvalidBounds { .. }, .. }) => domain += 1,
            Err(e) => faults.push(format!("graph {i}: {e}")),
        }
    }
    let kinds = kinds.iter().map(|(k, n)| format!("{k}:{n}")).collect::<Vec<_>>().join(" ");
    let mut detail = format!(
        "10000 mutations, {invalid} invalid ({kinds}); 1000 random graphs, {} faults, {domain} value-domain errors",
        faults.len()
    );
    for f in faults.iter().take(5) {
        detail.push_str(&format!("; {f}"));
    }
    for m in invalid_notes.iter().take(3) {
        detail.push_str(&format!("; {m}"));
    }
    Outcome::new(invalid == 0 && faults.is_empty(), detail)
}

#[derive(PartialEq)]
struct RunTrace {
    history: Vec<String>,
    population: Vec<(u64, u64, Option<u64>)>,
    best: (u64, Option<u64>),
}

fn evolution_run(cfg: &EvolutionConfig, violations: &mut Vec<String>) -> Result<RunTrace, String> {
    let registry = OpRegistry::default();
    let warm = evolution::warm_start_specs(cfg).map_err(|e| e.to_string())?;
    let scorer = Scorer::new(cfg, algorithm_defaults("ddqn").0).map_err(|e| e.to_string())?;
    let initial = evolution::init_population(cfg, &warm, &registry, &scorer).map_err(|e| e.to_string())?;
    let mut prev: Vec<(u64, u64)> = initial.iter().map(|i| (i.id, i.birth)).collect();
    let mut last_best = f64::NEG_INFINITY;
    let mut observer = |rec: &IterationRecord, pop: &[Individual]| {
        let it = rec.iteration;
        if pop.len() != cfg.population {
            violations.push(format!("iteration {it}: population {}", pop.len()));
        }
        if let (Some(id), Some(birth)) = (rec.removed, rec.removed_birth) {
            let min_birth = prev.iter().map(|&(_, b)| b).min().unwrap_or(0);
            if birth != min_birth || !prev.iter().any(|&(i, b)| i == id && b == birth) {
                violations.push(format!("iteration {it}: removed {id} born {birth}, oldest born {min_birth}"));
            }
        }
        if rec.best_score < last_best {
            violations.push(format!("iteration {it}: best fell from {last_best} to {}", rec.best_score));
        }
        last_best = rec.best_score;
        prev = pop.iter().map(|i| (i.id, i.birth)).collect();
    };
    let run = evolution::evolve(cfg, &warm, &registry, &scorer, &mut observer).map_err(|e| e.to_string())?;
    // best-ever individual is at least as good as everyone still alive
    let alive_best = run.population.iter().filter_map(|i| i.score).fold(f64::NEG_INFINITY, f64::max);
    if run.best.score.unwrap_or(f64::NEG_INFINITY) < alive_best {
        violations.push("best-ever below a living individual".into());
    }
    Ok(RunTrace {
        history: run.history.iter().map(|h| serde_json::to_string(h).expect("record")).collect(),
        population: run.population.iter().map(|i| (i.id, i.birth, i.score.map(f64::to_bits))).collect(),
        best: (run.best.id, run.best.score.map(f64::to_bits)),
    })
}

// A6: population size, aging, monotone best and reproducibility.
fn a6_evolution() -> Outcome {
    let cfg = EvolutionConfig {
        population: 10,
        tournament: 3,
        iterations: 200,
        env_set: vec!["bandit".into(), "cartpole-short".into()],
        seed: 6,
        ..EvolutionConfig::default()
    };
    let mut violations = Vec::new();
    let first = match evolution_run(&cfg, &mut violations) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, e),
    };
    let second = match evolution_run(&cfg, &mut violations) {
        Ok(t) => t,
        Err(e) => return Outcome::new(false, e),
    };
    let same = first == second;
    let inserted = first.history.iter().filter(|h| h.contains("\"inserted\":true")).count();
    let mut detail = format!(
        "200 iterations x2, {inserted} inserted, {} violations, reproducible {same}",
        violations.len()
    );
    if let Some(v) = violations.first() {
        detail.push_str(&format!("; first: {v}"));
    }
    Outcome::new(violations.is_empty() && same && first.history.len() == 200, detail)
}

// A7: normalized score fixtures and range under fuzzing.
fn a7_scoring() -> Outcome {
    let (lo, hi) = (-3.0, 7.0);
    let fixtures = [
        (vec![hi; 20], 1.0),
        (vec![lo; 20], 0.0),
        ([vec![hi; 10], vec![lo; 10]].concat(), 0.5),
    ];
    let mut ok = fixtures.iter().all(|(rs, want)| eval_score(rs, lo, hi) == Ok(*want));
    let mut r = rng::rng_from(&[7]);
    let mut outside = 0;
    for _ in 0..100_000 {
        let a: f64 = r.random_range(-1e4..1e4);
        let b = a + r.random_range(1e-6..1e4);
        let n = r.random_range(1..50);
        let rs: Vec<f64> = (0..n)
            .map(|_| match r.random_range(0..10) {
                0 => f64::INFINITY,
                1 => f64::NEG_INFINITY,
                2 => f64::NAN,
                _ => r.random_range(-1e6..1e6),
            })
            .collect();
        match eval_score(&rs, a, b) {
            Ok(s) if (0.0..=1.0).contains(&s) => {}
            _ => outside += 1,
        }
    }
    ok &= outside == 0;
    Outcome::new(ok, format!("3 fixtures exact, 100000 fuzz cases, {outside} outside [0, 1]"))
}
