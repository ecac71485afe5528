//! The five CLI commands. Each returns its summary line; `main` prints it
//! and maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pgdag_core::autodiff::{evaluate_loss, NoiseContext};
use pgdag_core::envs;
use pgdag_core::evolution::{self, Individual, IterationRecord, Scorer};
use pgdag_core::graph::{to_dot, validate, OpRegistry, Severity};
use pgdag_core::reference::{self, AlgorithmSpec};
use pgdag_core::trainer::{train_agent, Metric};
use pgdag_core::Graph;

use crate::checkpoint::save_store;
use crate::config::{read_config_file, resolve, ConfigError, Overrides, RunConfig};
use crate::fixture::parse_fixture;
use crate::graph_file::{parse_graph, serialize_graph, FormatError};
use crate::metrics::MetricsWriter;
use crate::parallel::ParallelScorer;

/// Iterations between population checkpoints in `evolve`.
pub const CHECKPOINT_EVERY: u64 = 50;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: graph is invalid")]
    Invalid { path: PathBuf },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    /// 2 for unreadable or unparsable input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Format { .. } => 2,
            _ => 1,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read { path: path.into(), source })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write { path: path.into(), source })
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Write { path: path.into(), source })
}

pub fn load_graph(path: &Path) -> Result<Graph, CliError> {
    parse_graph(&read(path)?).map_err(|source| CliError::Format { path: path.into(), source })
}

/// Shortest decimal that survives 12 significant digits, so values such
/// as 0.12250000000000001 print as 0.1225.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let s = format!("{:.11e}", x);
    let v: f64 = s.parse().expect("formatted float parses");
    v.to_string()
}

/// Validates `path`, printing diagnostics to stderr. Invalid graphs are an
/// error after the diagnostics have been written.
pub fn validate_cmd(path: &Path) -> Result<String, CliError> {
    let g = load_graph(path)?;
    let report = validate(&g, &OpRegistry::default());
    let mut warnings = 0;
    for d in &report.diagnostics {
        let level = match d.severity {
            Severity::Error => "error",
            Severity::Warning => {
                warnings += 1;
                "warning"
            }
        };
        match d.node {
            Some(n) => eprintln!("{level}: node {}: {}", n.0, d.message),
            None => eprintln!("{level}: {}", d.message),
        }
    }
    let errors = report.errors().count();
    if !report.ok {
        println!("command=validate ok=false errors={errors} warnings={warnings} nodes={}", g.len());
        return Err(CliError::Invalid { path: path.into() });
    }
    Ok(format!("command=validate ok=true errors=0 warnings={warnings} nodes={}", g.len()))
}

/// DOT rendering of a valid graph, written to `out` or returned for stdout.
pub fn render_cmd(path: &Path, out: Option<&Path>) -> Result<(String, Option<String>), CliError> {
    let g = load_graph(path)?;
    let report = validate(&g, &OpRegistry::default());
    if !report.ok {
        for d in report.errors() {
            eprintln!("error: {}", d.message);
        }
        return Err(CliError::Invalid { path: path.into() });
    }
    let dot = to_dot(&g);
    let summary = format!("command=render graph={} nodes={}", g.name, g.len());
    match out {
        Some(p) => {
            write(p, &dot)?;
            Ok((format!("{summary} out={}", p.display()), None))
        }
        None => Ok((summary, Some(dot))),
    }
}

/// Loss of a graph on a batch fixture. Noise the fixture does not bind is
/// drawn from `seed`.
pub fn eval_loss_cmd(path: &Path, fixture: &Path, seed: u64) -> Result<String, CliError> {
    let g = load_graph(path)?;
    if !validate(&g, &OpRegistry::default()).ok {
        return Err(CliError::Invalid { path: path.into() });
    }
    let f = parse_fixture(&read(fixture)?).map_err(|source| CliError::Format { path: fixture.into(), source })?;
    let noise = NoiseContext::new(seed, 0, 0);
    let (loss, _) = evaluate_loss(&g, &f.store, &f.bindings, &f.hp, &f.actions, Some(&noise))
        .map_err(|e| CliError::Run(format!("evaluation failed: {e}")))?;
    Ok(format!("command=eval-loss graph={} loss={}", g.name, fmt_num(loss)))
}

/// A reference algorithm name or a graph file wrapped in its algorithm.
pub fn load_spec(name: &str) -> Result<AlgorithmSpec, CliError> {
    if reference::ALGORITHMS.contains(&name) {
        return reference::build(name).map_err(|e| CliError::Run(e.to_string()));
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(CliError::Run(format!(
            "`{name}` is neither a graph file nor one of {}",
            reference::ALGORITHMS.join(", ")
        )));
    }
    let g = load_graph(path)?;
    evolution::spec_from_graph(&g).map_err(|e| CliError::Run(e.to_string()))
}

fn write_config(cfg: &RunConfig) -> Result<(), CliError> {
    mkdir(&cfg.out)?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    write(&cfg.out.join("config.json"), text + "\n")
}

pub fn resolve_config(config: Option<&Path>, flags: &Overrides, fallback: &str) -> Result<RunConfig, CliError> {
    let file = config.map(read_config_file).transpose()?;
    Ok(resolve(file.as_ref(), flags, fallback)?)
}

/// Trains one agent and writes config.json, metrics.csv, metrics.jsonl and
/// weights.json into `cfg.out`.
pub fn train_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = load_spec(&cfg.algorithm)?;
    let desc = envs::descriptor(&cfg.env).map_err(|e| CliError::Run(e.to_string()))?;
    write_config(cfg)?;
    let wpath = |p: &str| cfg.out.join(p);
    let mut metrics = MetricsWriter::create(&cfg.out, &spec.name, desc.id, desc.r_min, desc.r_max)
        .map_err(|source| CliError::Write { path: wpath("metrics.csv"), source })?;
    let mut last_log = 0;
    let mut observer = |m: Metric<'_>| {
        if let Metric::Episode { step, episode, ret, .. } = m {
            if step >= last_log + 5000 {
                last_log = step;
                log::info!("step {step} episode {episode} return {ret:.1}");
            }
        }
        metrics.record(&m);
    };
    let report = train_agent(&spec, &cfg.env, &cfg.budget, &cfg.hyper, cfg.seed, &mut observer)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let episodes = metrics.episodes();
    metrics.finish().map_err(|source| CliError::Write { path: wpath("metrics.jsonl"), source })?;
    write(&wpath("weights.json"), save_store(&report.store) + "\n")?;
    if let Some(e) = &report.failure {
        log::warn!("training stopped early: {e}");
    }
    let last = report.last_returns(cfg.budget.eval_episodes);
    let mean = if last.is_empty() { 0.0 } else { last.iter().sum::<f64>() / last.len() as f64 };
    let score = envs::eval_score(&last, desc.r_min, desc.r_max).unwrap_or(0.0);
    Ok(format!(
        "command=train algorithm={} env={} seed={} steps={} episodes={episodes} mean_return={} score={} failed={} out={}",
        spec.name,
        desc.id,
        cfg.seed,
        report.steps,
        fmt_num(mean),
        fmt_num(score),
        report.failed(),
        cfg.out.display()
    ))
}

fn write_spec(dir: &Path, stem: &str, spec: &AlgorithmSpec) -> Result<(), CliError> {
    for (k, g) in spec.graphs().enumerate() {
        let name = if k == 0 { format!("{stem}.graph.json") } else { format!("{stem}-{k}.graph.json") };
        write(&dir.join(name), serialize_graph(g))?;
    }
    Ok(())
}

fn checkpoint_population(dir: &Path, it: u64, pop: &[Individual]) -> Result<(), CliError> {
    mkdir(dir)?;
    for ind in pop {
        write_spec(dir, &format!("iter{it:05}-id{:05}", ind.id), &ind.spec)?;
    }
    Ok(())
}

/// Runs regularized evolution and writes config.json, history.jsonl,
/// population checkpoints and best.graph.json into `cfg.out`.
pub fn evolve_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let ev = &cfg.evolution;
    ev.check().map_err(|e| CliError::Run(e.to_string()))?;
    let warm = evolution::warm_start_specs(ev).map_err(|e| CliError::Run(e.to_string()))?;
    let scorer = Scorer::new(ev, cfg.hyper).map_err(|e| CliError::Run(e.to_string()))?;
    let evaluator = ParallelScorer::new(scorer, cfg.workers).map_err(|e| CliError::Run(e.to_string()))?;
    write_config(cfg)?;
    let hpath = cfg.out.join("history.jsonl");
    let file = fs::File::create(&hpath).map_err(|source| CliError::Write { path: hpath.clone(), source })?;
    let mut history = BufWriter::new(file);
    let pop_dir = cfg.out.join("population");
    let mut io_error: Option<CliError> = None;
    let mut inserted = 0usize;
    let mut observer = |rec: &IterationRecord, pop: &[Individual]| {
        if io_error.is_some() {
            return;
        }
        inserted += rec.inserted as usize;
        log::info!(
            "iteration {} parent {} status {:?} score {:?} best {}",
            rec.iteration,
            rec.parent,
            rec.status,
            rec.score,
            rec.best_score
        );
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        if let Err(source) = history.write_all(line.as_bytes()).and_then(|_| history.flush()) {
            io_error = Some(CliError::Write { path: hpath.clone(), source });
            return;
        }
        if rec.iteration % CHECKPOINT_EVERY == 0 {
            if let Err(e) = checkpoint_population(&pop_dir, rec.iteration, pop) {
                io_error = Some(e);
            }
        }
    };
    let registry = OpRegistry::default();
    let run = evolution::evolve(ev, &warm, &registry, &evaluator, &mut observer)
        .map_err(|e| CliError::Run(e.to_string()))?;
    if let Some(e) = io_error {
        return Err(e);
    }
    write_spec(&cfg.out, "best", &run.best.spec)?;
    let mut s = String::new();
    write!(
        s,
        "command=evolve iterations={} population={} inserted={inserted} best_id={} best_score={} workers={} out={}",
        run.history.len(),
        run.population.len(),
        run.best.id,
        run.best.score.map_or("none".into(), fmt_num),
        evaluator.workers(),
        cfg.out.display()
    )
    .expect("string write");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(0.12250000000000001), "0.1225");
        assert_eq!(fmt_num(3.0), "3");
        assert_eq!(fmt_num(-1.5e-20), "-0.000000000000000000015");
        assert_eq!(fmt_num(f64::NAN), "NaN");
    }

    #[test]
    fn exit_codes() {
        let e = CliError::Format { path: "x".into(), source: FormatError::at(1, "bad") };
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::Invalid { path: "x".into() }.exit_code(), 1);
    }
}
