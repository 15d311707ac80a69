//! The four operator commands. Each writes its artifacts under an output
//! directory and records the configuration digest and seed next to them.

use std::path::Path;
use std::sync::Arc;

use ofa::dataset::{build_samples, read_dataset, write_dataset, write_episode, DatasetIndex, Episode, FrameStore, Method, SampleOptions};
use ofa::env::build_scene;
use ofa::env::render::{Background, BackgroundVariant};
use ofa::env::rollout::execute_rollout_recorded;
use ofa::policy::{load_params, save_params, train, write_loss_csv, PolicyParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::experiment::{eval_scene_seed, rollout_seed, summarize, Experiment, Lab, RolloutRow, SummaryRow, Variant, IN_DISTRIBUTION};
use crate::report::{markdown, write_csv, write_text};
use crate::{derive_seed, CliError};

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::infra(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::infra(e.to_string()))?;
    write_text(path, &text)
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(cfg.workers()).build().map_err(|e| CliError::infra(e.to_string()))
}

/// Generates `count` validated demonstrations of `task` into `out`. On attempt
/// exhaustion the accepted ones are still written before the error is returned.
pub fn gen_demos(cfg: &RunConfig, task: &str, count: usize, seed: u64, out: &Path, frames: bool) -> Result<DatasetIndex, CliError> {
    ofa::env::task(task)?;
    let pool = pool(cfg)?;
    let workers = pool.current_num_threads();
    let (set, err) = pool.install(|| crate::experiment::generate_demos(cfg, task, count, seed, workers));
    let episodes: Vec<Episode> = set.demos.into_iter().flat_map(|d| d.episodes).collect();
    let index = pool.install(|| write_dataset(out, &episodes, frames, &cfg.digest()))?;
    log::info!("{task}: wrote {} episodes ({} steps) to {}", index.episodes.len(), index.total_steps, out.display());
    match err {
        Some(e) => Err(e),
        None => Ok(index),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config_digest: String,
    pub seed: u64,
    pub task: String,
    pub method: Method,
    pub episodes: usize,
    pub samples: Vec<usize>,
    pub final_loss: Vec<f64>,
    pub config: RunConfig,
}

/// Trains one policy per arm on the dataset at `data`; writes `policy_arm{i}.bin`,
/// `loss_arm{i}.csv` and `train.toml` into `out`.
pub fn train_cmd(cfg: &RunConfig, data: &Path, method: Method, seed: u64, out: &Path) -> Result<TrainManifest, CliError> {
    let episodes = read_dataset(data, None)?;
    let first = episodes.first().ok_or_else(|| CliError::data(format!("{}: dataset has no episodes", data.display())))?;
    let task = first.task.clone();
    if episodes.iter().any(|e| e.task != task) {
        return Err(CliError::data(format!("{}: dataset mixes tasks", data.display())));
    }
    let arms = first.scene.arms.len();
    create_dir(out)?;
    let mut manifest = TrainManifest {
        config_digest: cfg.digest(),
        seed,
        task: task.clone(),
        method,
        episodes: episodes.len(),
        samples: Vec::new(),
        final_loss: Vec::new(),
        config: cfg.clone(),
    };
    for arm in 0..arms {
        let mine: Vec<Episode> = episodes.iter().filter(|e| e.arm == arm).cloned().collect();
        let (samples, _) = build_samples(&mine, &SampleOptions { k: cfg.policy.k, method, crop: cfg.crop() })?;
        let mut pcfg = cfg.policy.clone();
        pcfg.seed = derive_seed(seed, &["train", &task, method.name(), &arm.to_string()]);
        let (mut params, curve) = train(&pcfg, &samples)?;
        params.tags.insert("task".into(), task.clone());
        params.tags.insert("method".into(), method.name().into());
        params.tags.insert("arm".into(), arm.to_string());
        params.tags.insert("seed".into(), seed.to_string());
        params.tags.insert("config_digest".into(), manifest.config_digest.clone());
        save_params(&out.join(format!("policy_arm{arm}.bin")), &params)?;
        write_loss_csv(&out.join(format!("loss_arm{arm}.csv")), &curve)?;
        manifest.samples.push(samples.len());
        manifest.final_loss.push(curve.last().map_or(f64::NAN, |r| r.total));
    }
    write_toml(&out.join("train.toml"), &manifest)?;
    Ok(manifest)
}

/// Loads `policy_arm0.bin`, `policy_arm1.bin`, ... from `dir` in order.
pub fn load_policies(dir: &Path) -> Result<Vec<PolicyParams>, CliError> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("policy_arm{}.bin", out.len()));
        if !p.exists() {
            break;
        }
        out.push(load_params(&p)?);
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no policy_arm0.bin", dir.display())));
    }
    Ok(out)
}

fn policy_method(policies: &[PolicyParams], dir: &Path) -> Result<Method, CliError> {
    let tag = policies[0].tags.get("method").ok_or_else(|| CliError::data(format!("{}: parameters carry no method tag", dir.display())))?;
    Ok(Method::parse(tag)?)
}

/// Name of an evaluation variant, e.g. `in-distribution` or `offset-0.000-0.170/textured-1`.
pub fn variant_name(offset: [f64; 2], background: BackgroundVariant, base: &Variant) -> String {
    if offset == base.offset && background == base.background.variant {
        IN_DISTRIBUTION.to_string()
    } else {
        format!("offset{:+.3}{:+.3}/{}", offset[0], offset[1], background.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RolloutManifest {
    config_digest: String,
    task: String,
    method: Method,
    variant: String,
    episode: usize,
    scene_seed: u64,
    rollout_seed: u64,
    success: bool,
    failure_reason: String,
    steps: usize,
    /// Row-major rotation then translation, world frame.
    object_pose: [f64; 12],
    wrist_pose: [f64; 12],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_digest: String,
    pub seed: u64,
    pub params: String,
    pub summary: SummaryRow,
}

/// Evaluates stored policies for `episodes` rollouts under a placement offset and
/// background. Writes one directory per rollout, `results.csv` and `summary.toml`.
#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    cfg: &RunConfig,
    params: &Path,
    task: &str,
    episodes: usize,
    offset: [f64; 2],
    background: BackgroundVariant,
    seed: u64,
    out: &Path,
) -> Result<EvalSummary, CliError> {
    let spec = ofa::env::task(task)?;
    let policies = load_policies(params)?;
    let method = policy_method(&policies, params)?;
    let base = Variant::in_distribution(cfg);
    let variant = Variant {
        name: variant_name(offset, background, &base),
        offset,
        background: Background { variant: background, base: cfg.scene.background.base },
    };
    let digest = cfg.digest();
    let demos: usize = policies[0].tags.get("demos").and_then(|d| d.parse().ok()).unwrap_or(0);
    create_dir(out)?;
    let pool = pool(cfg)?;
    let rows: Vec<RolloutRow> = pool.install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|i| {
                let scene_seed = eval_scene_seed(seed, task, i);
                let r_seed = rollout_seed(seed, task, i);
                let mut sc = cfg.scene(task, scene_seed);
                sc.offset = variant.offset;
                sc.background = variant.background;
                let scene = Arc::new(build_scene(&sc)?);
                let rec = execute_rollout_recorded(&scene, &policies, method, &cfg.rig, &cfg.rollout(r_seed))?;
                let dir = out.join(format!("rollout_{i:04}"));
                for arm in 0..scene.arms.len() {
                    let ep = Episode {
                        task: task.to_string(),
                        arm,
                        scene: scene.clone(),
                        rig: cfg.rig,
                        pre_manip_pose: rec.pre_manip[arm],
                        approach: rec.approach[arm].clone(),
                        steps: rec.steps[arm].clone(),
                        frames: FrameStore::Absent,
                    };
                    write_episode(&dir.join(format!("arm_{arm}")), &ep, false, &digest)?;
                }
                let res = &rec.result;
                write_toml(
                    &dir.join("result.toml"),
                    &RolloutManifest {
                        config_digest: digest.clone(),
                        task: task.to_string(),
                        method,
                        variant: variant.name.clone(),
                        episode: i,
                        scene_seed,
                        rollout_seed: r_seed,
                        success: res.success,
                        failure_reason: res.failure.name().into(),
                        steps: res.steps,
                        object_pose: res.object_pose.to_array(),
                        wrist_pose: res.wrist_pose.to_array(),
                    },
                )?;
                Ok(RolloutRow {
                    experiment: "eval".into(),
                    task: task.to_string(),
                    template: spec.template().name().into(),
                    method: method.name().into(),
                    demos,
                    variant: variant.name.clone(),
                    episode: i,
                    seed: scene_seed,
                    success: res.success,
                    failure_reason: res.failure.name().into(),
                    steps: res.steps,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    write_csv(&out.join("results.csv"), &rows)?;
    let summary = summarize(&rows).into_iter().next().ok_or_else(|| CliError::config("episodes must be positive"))?;
    let s = EvalSummary { config_digest: digest, seed, params: params.display().to_string(), summary };
    write_toml(&out.join("summary.toml"), &s)?;
    Ok(s)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ReproduceManifest {
    config_digest: String,
    seed: u64,
    experiments: Vec<Experiment>,
    files: Vec<String>,
}

/// Runs the listed experiments sharing demonstrations and trained policies, writing
/// `{name}_rollouts.csv`, `{name}_summary.csv` and `{name}.md` for each, plus `report.md`.
pub fn reproduce(cfg: &RunConfig, experiments: &[Experiment], seed: u64, out: &Path) -> Result<Vec<(Experiment, crate::experiment::ExperimentOutput)>, CliError> {
    create_dir(out)?;
    let digest = cfg.digest();
    let mut lab = Lab::new(cfg.clone(), seed)?;
    let mut files = Vec::new();
    let mut report = String::new();
    let mut results = Vec::new();
    for &e in experiments {
        log::info!("running {}", e.name());
        let res = lab.run(e)?;
        let md = markdown(e, &res, seed, &digest);
        let names = [format!("{}_rollouts.csv", e.name()), format!("{}_summary.csv", e.name()), format!("{}.md", e.name())];
        write_csv(&out.join(&names[0]), &res.rollouts)?;
        write_csv(&out.join(&names[1]), &res.summary)?;
        write_text(&out.join(&names[2]), &md)?;
        files.extend(names);
        report.push_str(&md);
        report.push('\n');
        results.push((e, res));
    }
    write_text(&out.join("report.md"), &report)?;
    files.push("report.md".into());
    write_toml(&out.join("reproduce.toml"), &ReproduceManifest { config_digest: digest, seed, experiments: experiments.to_vec(), files })?;
    Ok(results)
}
