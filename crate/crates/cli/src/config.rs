//! Run configuration: one TOML file with sections, flag overrides, and a
//! fully-resolved copy persisted next to every run's outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use artiqc::artefact::ArtefactKind;
use artiqc::toytrain::TrainConfig;
use artiqc::uncmath::EpsilonSchedule;
use serde::{Deserialize, Serialize};

/// Environment variable overriding the output root (the only env override).
pub const OUT_ROOT_ENV: &str = "ARTIQC_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomSection,
    pub artefacts: ArtefactSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub count_train: usize,
    pub count_test: usize,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtefactSection {
    /// global probability that a training sample carries any artefact
    pub rate: f64,
    /// decoupled artefact modes, in channel order
    pub kinds: Vec<String>,
    pub geometric: bool,
    pub bias_field: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations_task: usize,
    pub iterations_teacher: usize,
    pub iterations_student: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub width: usize,
    pub epsilon_initial: f64,
    pub epsilon_floor: f64,
    pub plateau_window: usize,
    pub plateau_threshold: f64,
    pub consistency_lambda: f64,
    pub student_kind_probability: f64,
    /// initialize teacher/student trunks from the frozen task model
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// fraction of the test set kept as clean controls
    pub control_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("artiqc_run"),
            phantom: PhantomSection {
                count_train: 500,
                count_test: 126,
                shape: [48, 48, 4],
            },
            artefacts: ArtefactSection {
                rate: 0.5,
                kinds: ArtefactKind::DECOUPLED.iter().map(|k| k.name().to_string()).collect(),
                geometric: false,
                bias_field: true,
            },
            train: TrainSection {
                iterations_task: 1500,
                iterations_teacher: 1200,
                iterations_student: 1500,
                learning_rate: 1e-4,
                batch_size: 2,
                width: 8,
                epsilon_initial: 0.05,
                epsilon_floor: 1e-3,
                plateau_window: 200,
                plateau_threshold: 0.01,
                consistency_lambda: 0.1,
                student_kind_probability: 0.35,
                warm_start: true,
            },
            evaluate: EvaluateSection { control_fraction: 1.0 / 7.0 },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.artefacts.rate) {
            bail!("artefacts.rate {} outside [0,1]", self.artefacts.rate);
        }
        if !(0.0..=1.0).contains(&self.evaluate.control_fraction) {
            bail!("evaluate.control_fraction outside [0,1]");
        }
        for name in &self.artefacts.kinds {
            let kind = ArtefactKind::from_name(name)
                .with_context(|| format!("unknown artefact kind {name:?}"))?;
            if !ArtefactKind::DECOUPLED.contains(&kind) {
                bail!("{name} is not a decoupled artefact mode");
            }
        }
        if self.phantom.shape[0] % 2 != 0 || self.phantom.shape[1] % 2 != 0 {
            bail!("phantom shape x/y must be even for the 2-level model");
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn decoupled_kinds(&self) -> Vec<ArtefactKind> {
        self.artefacts
            .kinds
            .iter()
            .map(|n| ArtefactKind::from_name(n).expect("validated"))
            .collect()
    }

    pub fn phantom_shape(&self) -> (usize, usize, usize) {
        (self.phantom.shape[0], self.phantom.shape[1], self.phantom.shape[2])
    }

    /// Training config for one stage.
    pub fn train_config(&self, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epsilon: EpsilonSchedule {
                epsilon: self.train.epsilon_initial,
                floor: self.train.epsilon_floor,
                plateau_window: self.train.plateau_window,
                plateau_threshold: self.train.plateau_threshold,
            },
            width: self.train.width,
            aug_kinds: self.decoupled_kinds(),
            artefact_rate: self.artefacts.rate,
            student_kind_probability: self.train.student_kind_probability,
            use_geometric: self.artefacts.geometric,
            use_bias_field: self.artefacts.bias_field,
            consistency_lambda: self.train.consistency_lambda,
            warm_start: self.train.warm_start,
            seed: self.seed,
            phantom_shape: self.phantom_shape(),
        }
    }

    /// Serialized resolved config (written next to outputs and hashed for
    /// provenance).
    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    /// Resolves an output directory against the env-var output root.
    pub fn resolve_out_dir(dir: &Path) -> PathBuf {
        if dir.is_absolute() {
            return dir.to_path_buf();
        }
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir.to_path_buf(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\nnot_a_key = 3\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn bad_kind_rejected() {
        let mut cfg = RunConfig::default();
        cfg.artefacts.kinds.push("zipper".into());
        assert!(cfg.validate().is_err());
        let mut cfg2 = RunConfig::default();
        cfg2.artefacts.kinds = vec!["geometric".into()];
        assert!(cfg2.validate().is_err());
    }
}
