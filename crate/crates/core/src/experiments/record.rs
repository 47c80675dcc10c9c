use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;
use crate::error::{Error, Result};

/// Version of the CSV and JSON output layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub repetition: usize,
    /// Episode index; 0 for exploration runs.
    pub episode: usize,
    /// Time step or exploration iteration (1-based for iterations).
    pub step: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    /// The solver returned a certified plan at this step.
    pub feasible: bool,
    /// Shifts since the last adopted plan.
    pub plan_age: usize,
    /// The state or the commanded input violated the constraints.
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub repetition: usize,
    pub episode: usize,
    /// Accumulated squared goal distance; absent for failed rollouts.
    pub cost: Option<f64>,
    pub failed: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    pub repetition: usize,
    pub iteration: usize,
    pub mutual_information: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub total_steps: usize,
    pub infeasible_steps: usize,
    pub safety_violations: usize,
    pub rollouts: usize,
    pub failed_rollouts: usize,
    pub failure_ratio: f64,
    /// Mean cost of successful rollouts per episode index.
    pub episode_cost_means: Vec<Option<f64>>,
    pub final_episode_cost: Option<f64>,
    /// Mean mutual information over repetitions per iteration.
    pub mi_means: Vec<f64>,
    pub final_mi: Option<f64>,
}

impl RunSummary {
    pub fn compute(
        kind: ExperimentKind,
        config_hash: &str,
        seed: u64,
        steps: &[StepRecord],
        episodes: &[EpisodeRecord],
        mi: &[MiRecord],
    ) -> Self {
        let rollouts = episodes.len();
        let failed = episodes.iter().filter(|e| e.failed).count();
        let n_eps = episodes.iter().map(|e| e.episode + 1).max().unwrap_or(0);
        let episode_cost_means: Vec<Option<f64>> = (0..n_eps)
            .map(|k| {
                let c: Vec<f64> = episodes
                    .iter()
                    .filter(|e| e.episode == k && !e.failed)
                    .filter_map(|e| e.cost)
                    .collect();
                (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
            })
            .collect();
        let n_it = mi.iter().map(|m| m.iteration + 1).max().unwrap_or(0);
        let mi_means: Vec<f64> = (0..n_it)
            .map(|i| {
                let v: Vec<f64> = mi.iter().filter(|m| m.iteration == i).map(|m| m.mutual_information).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            kind,
            config_hash: config_hash.to_string(),
            seed,
            total_steps: steps.len(),
            infeasible_steps: steps.iter().filter(|s| !s.feasible).count(),
            safety_violations: steps.iter().filter(|s| s.violation).count(),
            rollouts,
            failed_rollouts: failed,
            failure_ratio: if rollouts == 0 {
                0.0
            } else {
                failed as f64 / rollouts as f64
            },
            final_episode_cost: episode_cost_means.last().copied().flatten(),
            episode_cost_means,
            final_mi: mi_means.last().copied(),
            mi_means,
        }
    }
}

/// Complete output of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    /// Configuration as TOML.
    pub config: String,
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
    pub mi_trace: Vec<MiRecord>,
}

impl RunRecord {
    pub fn summary(&self) -> RunSummary {
        RunSummary::compute(
            self.kind,
            &self.config_hash,
            self.seed,
            &self.steps,
            &self.episodes,
            &self.mi_trace,
        )
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_steps_csv<W: Write>(w: W, hash: &str, steps: &[StepRecord]) -> Result<()> {
    let p = steps.first().map_or(0, |s| s.state.len());
    let q = steps.first().map_or(0, |s| s.input.len());
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["config_hash", "repetition", "episode", "step"].iter().map(|s| s.to_string()).collect();
    header.extend((0..p).map(|i| format!("x{i}")));
    header.extend((0..q).map(|i| format!("u{i}")));
    header.extend(["feasible", "plan_age", "violation"].iter().map(|s| s.to_string()));
    wr.write_record(&header)?;
    for s in steps {
        let mut row = vec![
            hash.to_string(),
            s.repetition.to_string(),
            s.episode.to_string(),
            s.step.to_string(),
        ];
        row.extend(s.state.iter().map(|v| fmt(*v)));
        row.extend(s.input.iter().map(|v| fmt(*v)));
        row.extend([s.feasible.to_string(), s.plan_age.to_string(), s.violation.to_string()]);
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::InvalidInput(format!("cannot parse CSV field {s:?}")))
}

/// Reads a step log and returns the embedded config hash with the records.
pub fn read_steps_csv<R: Read>(r: R) -> Result<(Option<String>, Vec<StepRecord>)> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let p = header.iter().filter(|h| h.starts_with('x')).count();
    let q = header.iter().filter(|h| h.starts_with('u')).count();
    let mut hash = None;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        hash.get_or_insert_with(|| rec[0].to_string());
        let state = (0..p).map(|i| parse(&rec[4 + i])).collect::<Result<Vec<f64>>>()?;
        let input = (0..q).map(|i| parse(&rec[4 + p + i])).collect::<Result<Vec<f64>>>()?;
        out.push(StepRecord {
            repetition: parse(&rec[1])?,
            episode: parse(&rec[2])?,
            step: parse(&rec[3])?,
            state,
            input,
            feasible: parse(&rec[4 + p + q])?,
            plan_age: parse(&rec[5 + p + q])?,
            violation: parse(&rec[6 + p + q])?,
        });
    }
    Ok((hash, out))
}

pub fn write_episodes_csv<W: Write>(w: W, hash: &str, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["config_hash", "repetition", "episode", "cost", "failed", "steps"])
        ?;
    for e in episodes {
        wr.write_record([
            hash.to_string(),
            e.repetition.to_string(),
            e.episode.to_string(),
            e.cost.map(fmt).unwrap_or_default(),
            e.failed.to_string(),
            e.steps.to_string(),
        ])
        ?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_episodes_csv<R: Read>(r: R) -> Result<Vec<EpisodeRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(EpisodeRecord {
            repetition: parse(&rec[1])?,
            episode: parse(&rec[2])?,
            cost: if rec[3].is_empty() { None } else { Some(parse(&rec[3])?) },
            failed: parse(&rec[4])?,
            steps: parse(&rec[5])?,
        });
    }
    Ok(out)
}

pub fn write_mi_csv<W: Write>(w: W, hash: &str, mi: &[MiRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["config_hash", "repetition", "iteration", "mutual_information"])
        ?;
    for m in mi {
        wr.write_record([
            hash.to_string(),
            m.repetition.to_string(),
            m.iteration.to_string(),
            fmt(m.mutual_information),
        ])
        ?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_mi_csv<R: Read>(r: R) -> Result<Vec<MiRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(MiRecord {
            repetition: parse(&rec[1])?,
            iteration: parse(&rec[2])?,
            mutual_information: parse(&rec[3])?,
        });
    }
    Ok(out)
}

/// Files written by [`emit_results`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub steps: PathBuf,
    pub episodes: PathBuf,
    pub mi: PathBuf,
    pub summary: PathBuf,
    pub config: PathBuf,
}

impl OutputFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            steps: dir.join("steps.csv"),
            episodes: dir.join("episode_costs.csv"),
            mi: dir.join("mi_trace.csv"),
            summary: dir.join("summary.json"),
            config: dir.join("config.toml"),
        }
    }
}

/// Writes the step log, the plot-ready series, the JSON summary and the
/// configuration to `dir`.
pub fn emit_results(record: &RunRecord, dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir)?;
    let files = OutputFiles::in_dir(dir);
    let h = &record.config_hash;
    write_steps_csv(fs::File::create(&files.steps)?, h, &record.steps)?;
    write_episodes_csv(fs::File::create(&files.episodes)?, h, &record.episodes)?;
    write_mi_csv(fs::File::create(&files.mi)?, h, &record.mi_trace)?;
    let json = serde_json::to_string_pretty(&record.summary())?;
    fs::write(&files.summary, json + "\n")?;
    fs::write(&files.config, format!("# config_hash = \"{h}\"\n{}", record.config))?;
    Ok(files)
}

/// Recomputes the summary from the CSV files in `dir`.
pub fn summary_from_csv(dir: &Path, kind: ExperimentKind, seed: u64) -> Result<RunSummary> {
    let files = OutputFiles::in_dir(dir);
    let (hash, steps) = read_steps_csv(fs::File::open(&files.steps)?)?;
    let episodes = read_episodes_csv(fs::File::open(&files.episodes)?)?;
    let mi = read_mi_csv(fs::File::open(&files.mi)?)?;
    Ok(RunSummary::compute(kind, &hash.unwrap_or_default(), seed, &steps, &episodes, &mi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> RunRecord {
        RunRecord {
            kind: ExperimentKind::EpisodicRl,
            config_hash: "abc".into(),
            seed: 3,
            config: "seed = 3\n".into(),
            steps: vec![
                StepRecord {
                    repetition: 0,
                    episode: 0,
                    step: 0,
                    state: vec![0.1, -0.2],
                    input: vec![0.3],
                    feasible: true,
                    plan_age: 0,
                    violation: false,
                },
                StepRecord {
                    repetition: 0,
                    episode: 0,
                    step: 1,
                    state: vec![1.0 / 3.0, 2.0],
                    input: vec![-1e-17],
                    feasible: false,
                    plan_age: 1,
                    violation: false,
                },
            ],
            episodes: vec![
                EpisodeRecord {
                    repetition: 0,
                    episode: 0,
                    cost: Some(12.5),
                    failed: false,
                    steps: 2,
                },
                EpisodeRecord {
                    repetition: 1,
                    episode: 0,
                    cost: None,
                    failed: true,
                    steps: 1,
                },
            ],
            mi_trace: vec![MiRecord {
                repetition: 0,
                iteration: 0,
                mutual_information: 0.25,
            }],
        }
    }

    #[test]
    fn summary_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record();
        emit_results(&rec, dir.path()).unwrap();
        let again = summary_from_csv(dir.path(), rec.kind, rec.seed).unwrap();
        assert_eq!(again, rec.summary());
        let (_, steps) = read_steps_csv(fs::File::open(dir.path().join("steps.csv")).unwrap()).unwrap();
        assert_eq!(steps, rec.steps);
        assert_eq!(rec.summary().failure_ratio, 0.5);
        assert_eq!(rec.summary().final_episode_cost, Some(12.5));
    }

    #[test]
    fn config_hash_in_every_file() {
        let dir = tempfile::tempdir().unwrap();
        emit_results(&record(), dir.path()).unwrap();
        for f in ["steps.csv", "episode_costs.csv", "mi_trace.csv", "summary.json", "config.toml"] {
            let text = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.contains("abc"), "{f}");
        }
    }
}
