//! Layered run configuration: built-in defaults, then config files in order,
//! then `--set key=value` overrides. Unknown keys are rejected.

use std::path::Path;

use ofa::camera::CropConfig;
use ofa::dataset::Method;
use ofa::env::expert::ExpertConfig;
use ofa::env::render::{Background, BackgroundVariant};
use ofa::env::rollout::RolloutConfig;
use ofa::env::scene::{PlacementRect, RigConfig, SceneConfig};
use ofa::policy::PolicyConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    pub policy: PolicyConfig,
    /// Hand-focus crop geometry; the output size follows `policy.image_size`.
    pub crop: CropSettings,
    /// Scripted demonstrator, including the perception noise and planner shared with rollouts.
    pub expert: ExpertConfig,
    pub rollout: RolloutSettings,
    pub rig: RigConfig,
    pub scene: SceneSettings,
    pub experiment: ExperimentConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSettings {
    pub scale: f64,
    pub min_size: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSettings {
    pub max_steps: usize,
    pub aggregation_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSettings {
    pub placement: Option<PlacementRect>,
    pub offset: [f64; 2],
    pub background: Background,
    pub yaw_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One task per mechanical template.
    pub tasks: Vec<String>,
    pub methods: Vec<Method>,
    pub demos: usize,
    pub evals: usize,
    pub demo_counts: Vec<usize>,
    pub data_methods: Vec<Method>,
    /// Placement shift that moves a single-arm task's rectangle fully outside the training one.
    pub outside_offset: [f64; 2],
    pub outside_offset_bimanual: [f64; 2],
    pub unseen_backgrounds: Vec<BackgroundVariant>,
    /// Scene attempts allowed per requested demonstration.
    pub attempts_per_demo: usize,
    /// Worker threads; 0 means one per available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let crop = CropConfig::default();
        let rollout = RolloutConfig::default();
        RunConfig {
            task: "grasp_cup".into(),
            seed: 0,
            policy: PolicyConfig::desk(),
            crop: CropSettings { scale: crop.scale, min_size: crop.min_size },
            expert: ExpertConfig::default(),
            rollout: RolloutSettings { max_steps: rollout.max_steps, aggregation_decay: rollout.aggregation_decay },
            rig: RigConfig::default(),
            scene: SceneSettings { placement: None, offset: [0.0, 0.0], background: Background::default(), yaw_range: 0.1 },
            experiment: ExperimentConfig {
                tasks: ["grasp_cup", "hold_scanner", "pinch_toy", "lift_tray"].map(String::from).to_vec(),
                methods: Method::ALL.to_vec(),
                demos: 30,
                evals: 20,
                demo_counts: vec![10, 20, 30],
                data_methods: vec![Method::Ofa, Method::Act],
                outside_offset: [0.0, -0.17],
                outside_offset_bimanual: [0.0, -0.09],
                unseen_backgrounds: vec![BackgroundVariant::Textured1, BackgroundVariant::Textured2],
                attempts_per_demo: 3,
                workers: 0,
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then each file in order, then each override.
    pub fn load(files: &[impl AsRef<Path>], overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = Value::try_from(RunConfig::default()).map_err(|e| CliError::config(e.to_string()))?;
        for f in files {
            let path = f.as_ref();
            let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let layer: Table = text.parse().map_err(|e: toml::de::Error| CliError::config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut tree, Value::Table(layer));
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.policy.validate().map_err(CliError::from)?;
        ofa::env::task(&self.task).map_err(CliError::from)?;
        for t in &self.experiment.tasks {
            ofa::env::task(t).map_err(CliError::from)?;
        }
        if self.experiment.evals == 0 || self.experiment.demos == 0 || self.experiment.attempts_per_demo == 0 {
            return Err(CliError::config("experiment demos, evals and attempts_per_demo must be positive"));
        }
        if self.experiment.demo_counts.iter().any(|&n| n == 0 || n > self.experiment.demos) {
            return Err(CliError::config("demo_counts must lie in 1..=experiment.demos"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization of the merged configuration.
    /// The worker count only changes scheduling, so it is left out.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.experiment.workers = 0;
        let text = toml::to_string(&canonical).expect("configuration serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig { scale: self.crop.scale, min_size: self.crop.min_size, size: self.policy.image_size }
    }

    pub fn rollout(&self, seed: u64) -> RolloutConfig {
        RolloutConfig {
            max_steps: self.rollout.max_steps,
            noise: self.expert.noise,
            offset_frame: self.expert.offset_frame,
            planner: self.expert.planner,
            crop: self.crop(),
            aggregation_decay: self.rollout.aggregation_decay,
            seed,
            dt: self.expert.dt,
        }
    }

    pub fn scene(&self, task: &str, seed: u64) -> SceneConfig {
        SceneConfig {
            task: task.to_string(),
            placement: self.scene.placement,
            offset: self.scene.offset,
            background: self.scene.background,
            yaw_range: self.scene.yaw_range,
            seed,
        }
    }

    pub fn workers(&self) -> usize {
        match self.experiment.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Table(b), Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// `a.b.c=value`; the value is parsed as a TOML literal, falling back to a bare string.
fn apply_override(tree: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::config(format!("override `{spec}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut node = tree;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| CliError::config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    Err(CliError::config(format!("empty override key in `{spec}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_digest_is_stable() {
        let a = RunConfig::load(&[] as &[&Path], &[]).unwrap();
        assert_eq!(a, RunConfig::default());
        assert_eq!(a.digest(), RunConfig::default().digest());
        assert_eq!(a.digest().len(), 64);
        let mut b = a.clone();
        b.experiment.workers = 3;
        assert_eq!(b.digest(), a.digest());
    }

    #[test]
    fn layers_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.toml");
        std::fs::write(&f, "task = \"pinch_toy\"\n[policy]\nsteps = 50\n").unwrap();
        let c = RunConfig::load(&[&f], &["policy.steps=7".into(), "experiment.tasks=[\"grasp_cup\"]".into()]).unwrap();
        assert_eq!(c.task, "pinch_toy");
        assert_eq!(c.policy.steps, 7);
        assert_eq!(c.policy.batch_size, PolicyConfig::desk().batch_size);
        assert_eq!(c.experiment.tasks, vec!["grasp_cup".to_string()]);
        assert_ne!(c.digest(), RunConfig::default().digest());
        let bg = RunConfig::load(&[] as &[&Path], &["scene.background.variant=textured-1".into()]).unwrap();
        assert_eq!(bg.scene.background.variant, BackgroundVariant::Textured1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for o in ["policy.stepz=3", "nonsense=1", "task=\"fly\"", "policy.k=0", "experiment.demo_counts=[40]"] {
            let e = RunConfig::load(&[] as &[&Path], &[o.to_string()]).unwrap_err();
            assert_eq!(e.code, crate::EXIT_CONFIG, "{o}");
        }
    }
}
