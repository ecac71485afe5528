//! Candidate evaluation on a rayon pool. Jobs run in any order but results
//! come back in job order, so a run does not depend on the worker count.

use pgdag_core::evolution::{Assessment, Evaluator, Scorer};
use pgdag_core::reference::AlgorithmSpec;
use rayon::prelude::*;
use rayon::ThreadPool;

pub struct ParallelScorer {
    scorer: Scorer,
    pool: ThreadPool,
}

impl ParallelScorer {
    /// `workers == 0` uses one thread per core.
    pub fn new(scorer: Scorer, workers: usize) -> Result<ParallelScorer, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        Ok(ParallelScorer { scorer, pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Evaluator for ParallelScorer {
    fn assess(&self, jobs: &[(&AlgorithmSpec, u64)], gate: bool) -> Vec<Assessment> {
        // A single candidate parallelizes across its environment tasks.
        if let [(spec, seed)] = jobs {
            return vec![self.pool.install(|| self.assess_tasks(spec, *seed, gate))];
        }
        self.pool.install(|| jobs.par_iter().map(|(spec, seed)| self.scorer.assess_one(spec, *seed, gate)).collect())
    }
}

impl ParallelScorer {
    fn assess_tasks(&self, spec: &AlgorithmSpec, seed: u64, gate: bool) -> Assessment {
        let s = &self.scorer;
        let (hurdle_score, passed_hurdle) = if gate { s.hurdle(spec, seed) } else { (None, true) };
        if !passed_hurdle {
            return Assessment { hurdle_score, passed_hurdle, per_env: Vec::new(), failed: false };
        }
        let per_env: Vec<_> = (0..s.tasks.len()).into_par_iter().map(|i| s.env_score(spec, i, seed)).collect();
        let failed = per_env.iter().any(Scorer::is_failure);
        Assessment { hurdle_score, passed_hurdle, per_env, failed }
    }
}
