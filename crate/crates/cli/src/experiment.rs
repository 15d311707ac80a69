//! Experiment matrix: demonstration sets, one training per (task, method,
//! demo count), and seeded evaluation rollouts under scene variants.
//!
//! Every random stream is derived from the master seed by label, and the
//! worker pool only changes scheduling, so results do not depend on it.

use std::collections::BTreeMap;
use std::sync::Arc;

use ofa::dataset::{build_samples, Method, SampleOptions};
use ofa::env::expert::{scripted_expert, Demonstration};
use ofa::env::render::{Background, BackgroundVariant};
use ofa::env::rollout::execute_rollout;
use ofa::env::scene::build_scene;
use ofa::policy::{train, LossRecord, PolicyParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{derive_seed, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Table1,
    Fig5a,
    Fig5b,
    Table2,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::Table1, Experiment::Fig5a, Experiment::Fig5b, Experiment::Table2];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Fig5a => "fig5a",
            Experiment::Fig5b => "fig5b",
            Experiment::Table2 => "table2",
        }
    }

    pub fn parse(s: &str) -> Option<Experiment> {
        Experiment::ALL.into_iter().find(|e| e.name() == s)
    }
}

pub const IN_DISTRIBUTION: &str = "in-distribution";
pub const OUTSIDE: &str = "outside-rect";

/// Scene perturbation applied to evaluation placements.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub offset: [f64; 2],
    pub background: Background,
}

impl Variant {
    pub fn in_distribution(cfg: &RunConfig) -> Self {
        Variant { name: IN_DISTRIBUTION.into(), offset: cfg.scene.offset, background: cfg.scene.background }
    }

    pub fn outside(cfg: &RunConfig, task: &str) -> Result<Self, CliError> {
        let spec = ofa::env::task(task)?;
        let shift = if spec.bimanual() { cfg.experiment.outside_offset_bimanual } else { cfg.experiment.outside_offset };
        Ok(Variant { name: OUTSIDE.into(), offset: [cfg.scene.offset[0] + shift[0], cfg.scene.offset[1] + shift[1]], background: cfg.scene.background })
    }

    pub fn background(cfg: &RunConfig, variant: BackgroundVariant) -> Self {
        Variant { name: variant.name().into(), offset: cfg.scene.offset, background: Background { variant, base: cfg.scene.background.base } }
    }
}

/// One evaluation rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub experiment: String,
    pub task: String,
    pub template: String,
    pub method: String,
    pub demos: usize,
    pub variant: String,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub failure_reason: String,
    pub steps: usize,
}

/// Success count of one (task, method, demo count, variant) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub task: String,
    pub template: String,
    pub method: String,
    pub demos: usize,
    pub variant: String,
    pub successes: usize,
    pub evals: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub rollouts: Vec<RolloutRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutput {
    /// Success rate (percent) of a cell, if it was evaluated.
    pub fn rate(&self, task: &str, method: Method, demos: usize, variant: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.task == task && r.method == method.name() && r.demos == demos && r.variant == variant)
            .map(|r| 100.0 * r.rate)
    }

    /// Mean success rate (percent) over `tasks`.
    pub fn mean_rate(&self, tasks: &[String], method: Method, demos: usize, variant: &str) -> Option<f64> {
        let rates: Option<Vec<f64>> = tasks.iter().map(|t| self.rate(t, method, demos, variant)).collect();
        rates.map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Validated demonstrations of one task in generation order.
#[derive(Clone, Debug)]
pub struct DemoSet {
    pub task: String,
    pub demos: Vec<Demonstration>,
    pub attempts: usize,
}

/// Runs the scripted expert on successive derived seeds until `count` demonstrations are
/// accepted. Returns what was collected plus an error if the attempt budget ran out.
pub fn generate_demos(cfg: &RunConfig, task: &str, count: usize, master: u64, workers: usize) -> (DemoSet, Option<CliError>) {
    let budget = count * cfg.experiment.attempts_per_demo;
    let mut set = DemoSet { task: task.to_string(), demos: Vec::new(), attempts: 0 };
    let chunk = workers.max(1);
    while set.demos.len() < count && set.attempts < budget {
        let batch: Vec<usize> = (set.attempts..(set.attempts + chunk).min(budget)).collect();
        let results: Vec<_> = batch
            .par_iter()
            .map(|&attempt| {
                let seed = derive_seed(master, &["demo", task, &attempt.to_string()]);
                build_scene(&cfg.scene(task, seed)).and_then(|scene| scripted_expert(&scene, &cfg.rig, &cfg.expert, seed))
            })
            .collect();
        for (attempt, r) in batch.iter().zip(results) {
            set.attempts = attempt + 1;
            match r {
                Ok(d) => set.demos.push(d),
                Err(e) => log::warn!("{task}: demonstration attempt {attempt} rejected: {e}"),
            }
            if set.demos.len() == count {
                break;
            }
        }
    }
    let err = (set.demos.len() < count).then(|| {
        CliError::data(format!("{task}: only {} of {count} demonstrations after {} scene attempts", set.demos.len(), set.attempts))
    });
    (set, err)
}

/// One policy per arm, trained on the first `n` demonstrations.
#[derive(Clone, Debug)]
pub struct TrainedPolicies {
    pub policies: Vec<PolicyParams>,
    pub curves: Vec<Vec<LossRecord>>,
    pub samples: Vec<usize>,
}

pub fn train_policies(cfg: &RunConfig, demos: &[Demonstration], method: Method, master: u64) -> Result<TrainedPolicies, CliError> {
    let first = demos.first().ok_or_else(|| CliError::data("no demonstrations to train on"))?;
    let task = first.scene.task.name;
    let mut out = TrainedPolicies { policies: Vec::new(), curves: Vec::new(), samples: Vec::new() };
    for arm in 0..first.episodes.len() {
        let episodes: Vec<_> = demos.iter().map(|d| d.episodes[arm].clone()).collect();
        let (samples, _) = build_samples(&episodes, &SampleOptions { k: cfg.policy.k, method, crop: cfg.crop() })?;
        let mut pcfg = cfg.policy.clone();
        pcfg.seed = derive_seed(master, &["train", task, method.name(), &demos.len().to_string(), &arm.to_string()]);
        let (mut params, curve) = train(&pcfg, &samples)?;
        params.tags.insert("task".into(), task.to_string());
        params.tags.insert("method".into(), method.name().into());
        params.tags.insert("arm".into(), arm.to_string());
        params.tags.insert("demos".into(), demos.len().to_string());
        params.tags.insert("config_digest".into(), cfg.digest());
        out.samples.push(samples.len());
        out.policies.push(params);
        out.curves.push(curve);
    }
    Ok(out)
}

pub fn eval_scene_seed(master: u64, task: &str, episode: usize) -> u64 {
    derive_seed(master, &["eval", task, &episode.to_string()])
}

pub fn rollout_seed(master: u64, task: &str, episode: usize) -> u64 {
    derive_seed(master, &["rollout", task, &episode.to_string()])
}

/// Runs `evals` rollouts of `policies` on derived evaluation scenes under `variant`.
/// Scenes and perception noise depend only on (task, episode), so every method sees the same placements.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &RunConfig,
    experiment: &str,
    task: &str,
    method: Method,
    demos: usize,
    policies: &[PolicyParams],
    variant: &Variant,
    evals: usize,
    master: u64,
) -> Result<Vec<RolloutRow>, CliError> {
    let template = ofa::env::task(task)?.template().name().to_string();
    (0..evals)
        .into_par_iter()
        .map(|i| {
            let seed = eval_scene_seed(master, task, i);
            let mut sc = cfg.scene(task, seed);
            sc.offset = variant.offset;
            sc.background = variant.background;
            let scene = build_scene(&sc)?;
            let r = execute_rollout(&scene, policies, method, &cfg.rig, &cfg.rollout(rollout_seed(master, task, i)))?;
            Ok(RolloutRow {
                experiment: experiment.to_string(),
                task: task.to_string(),
                template: template.clone(),
                method: method.name().into(),
                demos,
                variant: variant.name.clone(),
                episode: i,
                seed,
                success: r.success,
                failure_reason: r.failure.name().into(),
                steps: r.steps,
            })
        })
        .collect()
}

pub fn summarize(rows: &[RolloutRow]) -> Vec<SummaryRow> {
    let mut cells: Vec<SummaryRow> = Vec::new();
    for r in rows {
        let found = cells.iter_mut().find(|c| {
            c.experiment == r.experiment && c.task == r.task && c.method == r.method && c.demos == r.demos && c.variant == r.variant
        });
        let cell = match found {
            Some(c) => c,
            None => {
                cells.push(SummaryRow {
                    experiment: r.experiment.clone(),
                    task: r.task.clone(),
                    template: r.template.clone(),
                    method: r.method.clone(),
                    demos: r.demos,
                    variant: r.variant.clone(),
                    successes: 0,
                    evals: 0,
                    rate: 0.0,
                });
                cells.last_mut().expect("just pushed")
            }
        };
        cell.evals += 1;
        cell.successes += usize::from(r.success);
        cell.rate = cell.successes as f64 / cell.evals as f64;
    }
    cells
}

type PolicyKey = (String, Method, usize);

/// Shares demonstration sets and trained policies across experiments in one process.
pub struct Lab {
    pub cfg: RunConfig,
    pub master: u64,
    pool: rayon::ThreadPool,
    demos: BTreeMap<String, DemoSet>,
    policies: BTreeMap<PolicyKey, Arc<TrainedPolicies>>,
}

impl Lab {
    pub fn new(cfg: RunConfig, master: u64) -> Result<Self, CliError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build().map_err(|e| CliError::infra(e.to_string()))?;
        Ok(Lab { cfg, master, pool, demos: BTreeMap::new(), policies: BTreeMap::new() })
    }

    fn ensure_demos(&mut self, tasks: &[String], count: usize) -> Result<(), CliError> {
        for task in tasks {
            if self.demos.get(task).is_some_and(|d| d.demos.len() >= count) {
                continue;
            }
            let workers = self.pool.current_num_threads();
            let (set, err) = self.pool.install(|| generate_demos(&self.cfg, task, count, self.master, workers));
            log::info!("{task}: {} demonstrations from {} attempts", set.demos.len(), set.attempts);
            if let Some(e) = err {
                return Err(e);
            }
            self.demos.insert(task.clone(), set);
        }
        Ok(())
    }

    fn ensure_policies(&mut self, jobs: &[PolicyKey]) -> Result<(), CliError> {
        let missing: Vec<&PolicyKey> = jobs.iter().filter(|k| !self.policies.contains_key(*k)).collect();
        let cfg = &self.cfg;
        let demos = &self.demos;
        let master = self.master;
        let trained: Vec<Result<TrainedPolicies, CliError>> = self.pool.install(|| {
            missing
                .par_iter()
                .map(|(task, method, n)| {
                    let set = demos.get(task).ok_or_else(|| CliError::infra(format!("{task}: demonstrations not generated")))?;
                    log::info!("training {} on {task} with {n} demonstrations", method.name());
                    train_policies(cfg, &set.demos[..*n], *method, master)
                })
                .collect()
        });
        for (key, t) in missing.into_iter().zip(trained) {
            self.policies.insert(key.clone(), Arc::new(t?));
        }
        Ok(())
    }

    pub fn policies(&self, task: &str, method: Method, n: usize) -> Option<&Arc<TrainedPolicies>> {
        self.policies.get(&(task.to_string(), method, n))
    }

    pub fn run(&mut self, experiment: Experiment) -> Result<ExperimentOutput, CliError> {
        let ex = self.cfg.experiment.clone();
        let (methods, counts) = match experiment {
            Experiment::Table2 => (ex.data_methods.clone(), ex.demo_counts.clone()),
            _ => (ex.methods.clone(), vec![ex.demos]),
        };
        self.ensure_demos(&ex.tasks, counts.iter().copied().max().unwrap_or(ex.demos))?;
        let mut jobs: Vec<PolicyKey> = Vec::new();
        for t in &ex.tasks {
            for &m in &methods {
                jobs.extend(counts.iter().map(|&n| (t.clone(), m, n)));
            }
        }
        self.ensure_policies(&jobs)?;

        let mut rows = Vec::new();
        for task in &ex.tasks {
            let variants = match experiment {
                Experiment::Table1 | Experiment::Table2 => vec![Variant::in_distribution(&self.cfg)],
                Experiment::Fig5a => vec![Variant::in_distribution(&self.cfg), Variant::outside(&self.cfg, task)?],
                Experiment::Fig5b => std::iter::once(Variant::in_distribution(&self.cfg))
                    .chain(ex.unseen_backgrounds.iter().map(|&b| Variant::background(&self.cfg, b)))
                    .collect(),
            };
            for &m in &methods {
                for &n in &counts {
                    let trained = self.policies(task, m, n).expect("trained above").clone();
                    for v in &variants {
                        let r = self.pool.install(|| {
                            evaluate(&self.cfg, experiment.name(), task, m, n, &trained.policies, v, ex.evals, self.master)
                        })?;
                        rows.extend(r);
                    }
                }
            }
        }
        let summary = summarize(&rows);
        Ok(ExperimentOutput { rollouts: rows, summary })
    }
}
