//! Seed-parallel experiment runs with an ordered, append-only metric stream.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use anyhow::{Context, Result};
use ngvi::diagnostics::v2_bound;
use ngvi::optim::{run_ngd, run_sgd, MetricOptions, MetricPoint, NgdConfig, SgdConfig};
use ngvi::{Dataset, Error, McSpec, ModelSpec, Schedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, EstimatorChoice, ExperimentConfig, Method, ModelChoice};
use crate::data::{load_csv, synth, CsvOptions};

/// One row of the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub wall_time: Option<f64>,
    pub neg_elbo: Option<f64>,
    pub kl: Option<f64>,
    pub kl_avg: Option<f64>,
    pub nlpd: Option<f64>,
}

pub const METRIC_HEADER: [&str; 8] = ["run_id", "seed", "iteration", "wall_time", "neg_elbo", "kl", "kl_avg", "nlpd"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub completed: usize,
    pub failure: Option<String>,
    pub records: Vec<MetricRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub runs: usize,
    pub neg_elbo: Option<Stat>,
    pub kl: Option<Stat>,
    pub kl_avg: Option<Stat>,
    pub nlpd: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub iteration: usize,
    pub mean_kl_avg: f64,
    /// `V₂ / (k + 1)` for the average `ω̄_k`.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub v2: f64,
    pub rows: Vec<BoundRow>,
    pub all_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: String,
    pub detail: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub completed: usize,
    pub failure: Option<String>,
    pub last: Option<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub n: usize,
    pub d: usize,
    pub seeds: Vec<SeedSummary>,
    pub per_iteration: Vec<IterationStats>,
    pub bound: Option<BoundSummary>,
    pub findings: Vec<Finding>,
}

/// A prepared problem: model, data, and the weights the data came from when synthetic.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub truth: Option<ngvi::linalg::Vector>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Problem> {
    let (data, truth) = match &cfg.data {
        DataSource::Synthetic { n, d, seed, noise_var } => {
            let s = synth(
                cfg.model.kind,
                *n,
                *d,
                *seed,
                noise_var.unwrap_or(cfg.model.noise_var),
                cfg.model.prior_var,
            )?;
            (s.dataset, Some(s.truth))
        }
        DataSource::Csv {
            path,
            target,
            categorical,
            standardize,
        } => {
            let opts = CsvOptions {
                target: target.clone(),
                categorical: categorical.clone(),
                standardize: *standardize,
                model: cfg.model.kind,
            };
            (load_csv(path, &opts).with_context(|| format!("loading {}", path.display()))?.dataset, None)
        }
    };
    let spec = cfg.model_spec(data.d())?;
    Ok(Problem { spec, data, truth })
}

fn metric_options(cfg: &ExperimentConfig, seed: u64) -> MetricOptions {
    MetricOptions {
        cadence: cfg.cadence.0,
        neg_elbo: cfg.full_metrics,
        nlpd: cfg.full_metrics,
        mc: McSpec::new(cfg.metric_samples, seed ^ 0x9e37_79b9_7f4a_7c15),
    }
}

/// Runs one seed; a domain exit ends the run early and is reported in the outcome.
pub fn run_seed(cfg: &ExperimentConfig, problem: &Problem, run_id: &str, seed: u64) -> Result<SeedOutcome> {
    let metrics = metric_options(cfg, seed);
    let (points, completed, failure) = match cfg.optimizer {
        Method::Ngd => {
            let mut ngd = NgdConfig::new(cfg.ngd_estimator(), cfg.schedule.0, cfg.iterations, seed);
            ngd.keep_iterates = false;
            ngd.metrics = metrics;
            let trace = run_ngd(&problem.spec, &problem.data, &ngd)?;
            (trace.metrics, trace.completed, trace.failure)
        }
        Method::Sgd => {
            let sgd = SgdConfig {
                gradient: cfg.sgd_gradient(),
                schedule: cfg.schedule.0,
                iterations: cfg.iterations,
                seed,
                init: None,
                metrics,
            };
            let trace = run_sgd(&problem.spec, &problem.data, &sgd)?;
            (trace.metrics, trace.completed, trace.failure)
        }
    };
    let records = points
        .into_iter()
        .map(|p: MetricPoint| MetricRecord {
            run_id: run_id.to_owned(),
            seed,
            iteration: p.t,
            wall_time: cfg.record_wall_time.then_some(p.elapsed),
            neg_elbo: p.neg_elbo,
            kl: p.kl,
            kl_avg: p.kl_avg,
            nlpd: p.nlpd,
        })
        .collect();
    Ok(SeedOutcome {
        seed,
        completed,
        failure: failure.map(|e: Error| e.to_string()),
        records,
    })
}

/// CSV metric writer that flushes after every completed run, so an interrupted experiment
/// leaves a parseable prefix.
pub struct MetricWriter {
    inner: csv::Writer<File>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        inner.write_record(METRIC_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write_run(&mut self, outcome: &SeedOutcome) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &outcome.records {
            self.inner.write_record([
                r.run_id.clone(),
                r.seed.to_string(),
                r.iteration.to_string(),
                opt(r.wall_time),
                opt(r.neg_elbo),
                opt(r.kl),
                opt(r.kl_avg),
                opt(r.nlpd),
            ])?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

/// Parses a metric stream written by [`MetricWriter`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub struct ExperimentOutput {
    pub summary: Summary,
    pub outcomes: Vec<SeedOutcome>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j);
    }
    Ok(b.build()?)
}

/// Runs `f` for every seed on a pool of at most `jobs` threads and hands the results to
/// `sink` in seed order as soon as each prefix is complete.
pub fn for_each_seed_ordered<T, F, S>(seeds: &[u64], jobs: Option<usize>, f: F, mut sink: S) -> Result<()>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
    S: FnMut(T) -> Result<()>,
{
    let pool = thread_pool(jobs)?;
    let (tx, rx) = mpsc::channel::<(usize, Result<T>)>();
    std::thread::scope(|scope| {
        let f = &f;
        scope.spawn(move || {
            pool.install(|| {
                seeds.par_iter().enumerate().for_each_with(tx, |tx, (i, &seed)| {
                    let _ = tx.send((i, f(seed)));
                });
            });
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, res) in rx {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&next) {
                sink(res?)?;
                next += 1;
            }
        }
        Ok(())
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let problem = prepare(cfg)?;
    let hash = cfg.hash();
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    let metrics_path = cfg.output.join("metrics.csv");
    let summary_path = cfg.output.join("summary.json");
    let mut writer = MetricWriter::create(&metrics_path)?;
    let prefix = &hash[..12];
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for_each_seed_ordered(
        &cfg.seeds,
        cfg.jobs,
        |seed| run_seed(cfg, &problem, &format!("{prefix}-{seed}"), seed),
        |outcome| {
            if let Some(f) = &outcome.failure {
                log::warn!("seed {} stopped after {} iterations: {f}", outcome.seed, outcome.completed);
            }
            writer.write_run(&outcome)?;
            outcomes.push(outcome);
            Ok(())
        },
    )?;
    let summary = summarize(cfg, &problem, &outcomes)?;
    write_summary(&summary_path, &summary)?;
    Ok(ExperimentOutput {
        summary,
        outcomes,
        metrics_path,
        summary_path,
    })
}

pub fn write_summary<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// The convergence bound applies to NGD with the `2/(2+t)` schedule and subsampled
/// linear-regression gradients.
fn bound_applies(cfg: &ExperimentConfig) -> bool {
    cfg.model.kind == ModelChoice::Linreg
        && cfg.optimizer == Method::Ngd
        && cfg.estimator == EstimatorChoice::Subsample
        && cfg.schedule.0 == Schedule::TwoOverTwoPlusT
}

pub fn summarize(cfg: &ExperimentConfig, problem: &Problem, outcomes: &[SeedOutcome]) -> Result<Summary> {
    let hash = cfg.hash();
    let mut by_iter: BTreeMap<usize, Vec<&MetricRecord>> = BTreeMap::new();
    for o in outcomes {
        for r in &o.records {
            by_iter.entry(r.iteration).or_default().push(r);
        }
    }
    let per_iteration: Vec<IterationStats> = by_iter
        .iter()
        .map(|(&iteration, recs)| {
            let col = |f: fn(&MetricRecord) -> Option<f64>| {
                let v: Vec<f64> = recs.iter().filter_map(|r| f(r)).collect();
                Stat::of(&v)
            };
            IterationStats {
                iteration,
                runs: recs.len(),
                neg_elbo: col(|r| r.neg_elbo),
                kl: col(|r| r.kl),
                kl_avg: col(|r| r.kl_avg),
                nlpd: col(|r| r.nlpd),
            }
        })
        .collect();

    let mut findings = Vec::new();
    for o in outcomes {
        if let Some(f) = &o.failure {
            findings.push(Finding {
                kind: "domain-exit".into(),
                detail: format!("seed {} after {} iterations: {f}", o.seed, o.completed),
                config_hash: hash.clone(),
            });
        }
    }

    let bound = if bound_applies(cfg) {
        let m = cfg.batch_size.unwrap_or(1);
        let v2 = v2_bound(&problem.data, &problem.spec.prior, cfg.model.noise_var, m)?.v2;
        let rows: Vec<BoundRow> = per_iteration
            .iter()
            .filter(|s| s.iteration > 0 && s.runs == outcomes.len())
            .filter_map(|s| {
                let mean = s.kl_avg?.mean;
                let bound = v2 / (s.iteration as f64 + 1.0);
                Some(BoundRow {
                    iteration: s.iteration,
                    mean_kl_avg: mean,
                    bound,
                    holds: mean <= bound,
                })
            })
            .collect();
        for r in rows.iter().filter(|r| !r.holds) {
            findings.push(Finding {
                kind: "bound-violation".into(),
                detail: format!(
                    "iteration {}: mean KL of the average {} exceeds V2/(k+1) = {}",
                    r.iteration, r.mean_kl_avg, r.bound
                ),
                config_hash: hash.clone(),
            });
        }
        let all_hold = rows.iter().all(|r| r.holds);
        Some(BoundSummary { v2, rows, all_hold })
    } else {
        None
    };

    Ok(Summary {
        name: cfg.name.clone(),
        config_hash: hash,
        config: cfg.clone(),
        n: problem.data.n(),
        d: problem.data.d(),
        seeds: outcomes
            .iter()
            .map(|o| SeedSummary {
                seed: o.seed,
                completed: o.completed,
                failure: o.failure.clone(),
                last: o.records.last().cloned(),
            })
            .collect(),
        per_iteration,
        bound,
        findings,
    })
}
