//! Run configuration: one TOML file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use matforge::diffusion::ScheduleKind;
use matforge::net::Architecture;
use matforge::render::{RenderConfig, DEFAULT_IRRADIANCE};
use matforge::rl::AdvantageMode;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub schedule: ScheduleSection,
    pub net: Architecture,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub environments: EnvironmentSection,
    pub render: RenderConfig,
    pub reward: RewardSection,
    pub prompts: PromptSection,
    pub rl: RlSection,
    pub sample: SampleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Side of the packed 2x2 grid in pixels; each map is half of it.
    pub resolution: usize,
    /// Parent directory of the timestamped run directories.
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub zero_snr: bool,
    pub sampler_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_examples: usize,
    pub val_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub checkpoint_every: usize,
    pub val_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    pub count: usize,
    pub lights: usize,
    pub irradiance: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub corpus_materials: usize,
    pub heldout_materials: usize,
    pub lightings: usize,
    pub degradation: f64,
    pub annotated_materials: usize,
    pub threshold_real: f64,
    pub threshold_generated: f64,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
    pub lambda_mse: f64,
    pub lambda_tv: f64,
    pub knn_k: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub near_duplicates: usize,
    pub near_duplicate_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub candidates_per_category: usize,
    pub keep: usize,
    pub samples_per_prompt: usize,
    /// Training prompts per category when `rl-finetune` gets no prompt file.
    pub train_per_category: usize,
    pub heldout_per_category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Realism,
    Luminance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlSection {
    pub reward: RewardKind,
    pub epochs: usize,
    pub trajectories: usize,
    pub minibatch: usize,
    pub accumulation: usize,
    pub clip: f64,
    pub lr: f64,
    pub advantage: AdvantageMode,
    pub lora_rank: usize,
    pub eval_samples: usize,
    pub images_per_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub per_category: usize,
    pub views: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection {
                seed: 0,
                resolution: 32,
                out: PathBuf::from("runs"),
            },
            schedule: ScheduleSection {
                steps: 1000,
                kind: ScheduleKind::Linear,
                zero_snr: true,
                sampler_steps: 50,
            },
            net: Architecture {
                channels: vec![16, 32, 64],
                blocks_per_level: 1,
                ..Default::default()
            },
            data: DataSection {
                train_examples: 2000,
                val_examples: 64,
            },
            diffusion: DiffusionSection {
                steps: 600,
                batch: 16,
                lr: 1e-3,
                warmup: 100,
                checkpoint_every: 100,
                val_every: 100,
            },
            environments: EnvironmentSection {
                count: 200,
                lights: 8,
                irradiance: DEFAULT_IRRADIANCE,
            },
            render: RenderConfig::default(),
            reward: RewardSection {
                corpus_materials: 400,
                heldout_materials: 200,
                lightings: 10,
                degradation: 1.0,
                annotated_materials: 100,
                threshold_real: 0.2,
                threshold_generated: 0.4,
                classifier_lr: 1e-3,
                classifier_epochs: 200,
                lambda_mse: 1.0,
                lambda_tv: 100.0,
                knn_k: 4,
                lr: 1e-3,
                batch: 64,
                epochs: 200,
                near_duplicates: 50,
                near_duplicate_sigma: 0.02,
            },
            prompts: PromptSection {
                candidates_per_category: 8,
                keep: 16,
                samples_per_prompt: 4,
                train_per_category: 2,
                heldout_per_category: 1,
            },
            rl: RlSection {
                reward: RewardKind::Realism,
                epochs: 20,
                trajectories: 16,
                minibatch: 8,
                accumulation: 2,
                clip: 0.1,
                lr: 1e-2,
                advantage: AdvantageMode::PerPrompt,
                lora_rank: 4,
                eval_samples: 24,
                images_per_epoch: 4,
            },
            sample: SampleSection { per_category: 4, views: 4 },
        }
    }
}

/// Dotted paths of every leaf key in `v`.
fn leaf_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_keys(child, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn lookup<'a>(v: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(v, |node, key| node.as_table()?.get(key))
}

impl RunConfig {
    /// Parses a config, reporting every key missing relative to the full
    /// schema before any other error.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))?;
        let reference = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut keys = Vec::new();
        leaf_keys(&reference, "", &mut keys);
        let missing: Vec<String> = keys.into_iter().filter(|k| lookup(&value, k).is_none()).collect();
        if !missing.is_empty() {
            return Err(CliError::Config(format!("missing config keys: {}", missing.join(", "))));
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let r = self.run.resolution;
        let quantum = 2 * self.net.min_side();
        if r < 16 || r % quantum != 0 {
            return bad(format!("run.resolution {r} must be at least 16 and a multiple of {quantum}"));
        }
        if self.schedule.sampler_steps == 0 || self.schedule.sampler_steps > self.schedule.steps {
            return bad(format!("schedule.sampler_steps must lie in 1..={}", self.schedule.steps));
        }
        if self.net.num_categories != matforge::data::CATEGORIES.len() {
            return bad(format!("net.num_categories must be {}", matforge::data::CATEGORIES.len()));
        }
        if self.data.train_examples == 0 || self.data.val_examples == 0 {
            return bad("data.train_examples and data.val_examples must be positive".into());
        }
        if self.diffusion.checkpoint_every == 0 || self.diffusion.val_every == 0 {
            return bad("diffusion.checkpoint_every and diffusion.val_every must be positive".into());
        }
        if self.environments.count == 0 || self.environments.lights == 0 {
            return bad("environments.count and environments.lights must be positive".into());
        }
        let rw = &self.reward;
        if rw.annotated_materials == 0 || rw.annotated_materials > rw.corpus_materials || rw.lightings == 0 || rw.heldout_materials == 0 {
            return bad("reward corpus sizes must be positive with annotated_materials <= corpus_materials".into());
        }
        if self.sample.views == 0 || self.sample.views > self.environments.count {
            return bad(format!("sample.views must lie in 1..={}", self.environments.count));
        }
        Ok(())
    }

    pub fn map_res(&self) -> usize {
        self.run.resolution / 2
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.run.resolution, self.run.resolution]
    }
}
