//! Training metric sinks: a per-episode CSV and a JSON-lines log that also
//! carries loss values.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use pgdag_core::envs::eval_score;
use pgdag_core::trainer::Metric;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRow<'a> {
    pub candidate_id: &'a str,
    pub env_id: &'a str,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub normalized_return: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct JsonRecord<'a> {
    step: usize,
    episode: usize,
    #[serde(rename = "return")]
    ret: Option<f64>,
    loss_name: Option<&'a str>,
    loss_value: Option<f64>,
}

/// Writes `metrics.csv` and `metrics.jsonl`. Loss values are logged once
/// every `loss_every` updates per loss to keep files small.
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    candidate: String,
    env: String,
    r_min: f64,
    r_max: f64,
    episodes: usize,
    loss_every: usize,
    loss_seen: std::collections::BTreeMap<String, usize>,
    error: Option<io::Error>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, candidate: &str, env: &str, r_min: f64, r_max: f64) -> io::Result<MetricsWriter> {
        Ok(MetricsWriter {
            csv: csv::Writer::from_path(dir.join("metrics.csv")).map_err(io::Error::other)?,
            jsonl: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            candidate: candidate.to_string(),
            env: env.to_string(),
            r_min,
            r_max,
            episodes: 0,
            loss_every: 100,
            loss_seen: Default::default(),
            error: None,
        })
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    /// Records one metric. IO errors are kept and reported by [`finish`].
    ///
    /// [`finish`]: MetricsWriter::finish
    pub fn record(&mut self, m: &Metric<'_>) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = self.write(m) {
            self.error = Some(e);
        }
    }

    fn write(&mut self, m: &Metric<'_>) -> io::Result<()> {
        match *m {
            Metric::Episode { step, episode, ret, length } => {
                self.episodes += 1;
                let normalized_return = eval_score(&[ret], self.r_min, self.r_max).unwrap_or(0.0);
                self.csv
                    .serialize(EpisodeRow {
                        candidate_id: &self.candidate,
                        env_id: &self.env,
                        episode,
                        ret,
                        normalized_return,
                        steps: length,
                    })
                    .map_err(io::Error::other)?;
                let rec = JsonRecord { step, episode, ret: Some(ret), loss_name: None, loss_value: None };
                writeln!(self.jsonl, "{}", serde_json::to_string(&rec)?)
            }
            Metric::Loss { step, loss, value, .. } => {
                let n = self.loss_seen.entry(loss.to_string()).or_insert(0);
                *n += 1;
                if (*n - 1) % self.loss_every != 0 {
                    return Ok(());
                }
                let rec = JsonRecord {
                    step,
                    episode: self.episodes,
                    ret: None,
                    loss_name: Some(loss),
                    loss_value: value.is_finite().then_some(value),
                };
                writeln!(self.jsonl, "{}", serde_json::to_string(&rec)?)
            }
        }
    }

    pub fn finish(mut self) -> io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.csv.flush()?;
        self.jsonl.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "ddqn", "cartpole", 0.0, 200.0).unwrap();
        w.record(&Metric::Loss { step: 3, loss: "ddqn", value: 0.5, grad_norm: 1.0 });
        w.record(&Metric::Loss { step: 4, loss: "ddqn", value: 0.4, grad_norm: 1.0 });
        w.record(&Metric::Episode { step: 10, episode: 0, ret: 50.0, length: 50 });
        w.finish().unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "candidate_id,env_id,episode,return,normalized_return,steps");
        assert_eq!(lines.next().unwrap(), "ddqn,cartpole,0,50.0,0.25,50");
        let jl = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let recs: Vec<serde_json::Value> = jl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0]["loss_name"], "ddqn");
        assert_eq!(recs[1]["return"], 50.0);
    }
}
