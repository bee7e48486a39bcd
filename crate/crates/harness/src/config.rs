//! Experiment configuration: a single JSON document per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use advpoison_core::adv::{PgdConfig, TrainConfig};
use advpoison_core::data::{sha256_hex, ImageShape};
use advpoison_core::engine::{Arch, Precision};
use advpoison_core::targeted::{CraftMode, TargetSpec};
use advpoison_core::untargeted::{RemConfig, StickerTrainConfig};
use advpoison_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Class-conditional Gaussian images; the first `n_train` rows train,
    /// the remaining `n_test` rows are held out.
    Synthetic {
        n_train: usize,
        n_test: usize,
        shape: ImageShape,
        classes: usize,
        separation: f64,
        seed: u64,
    },
    /// Directories written by `save_dataset`.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Linear,
    Mlp {
        hidden: Vec<usize>,
    },
    TinyCnn {
        channels: usize,
        kernel: usize,
    },
    /// Text form, e.g. `"input 1x8x8; conv 4 k3 p1; relu; flatten; dense 2"`.
    Custom {
        layers: String,
    },
}

impl ArchSpec {
    pub fn build(&self, input: ImageShape, classes: usize) -> Result<Arch> {
        let arch = match self {
            ArchSpec::Linear => Arch::linear(input, classes),
            ArchSpec::Mlp { hidden } => Arch::mlp(input, hidden, classes),
            ArchSpec::TinyCnn { channels, kernel } => Arch::tiny_cnn(input, *channels, *kernel, classes),
            ArchSpec::Custom { layers } => {
                let arch: Arch = layers.parse()?;
                if arch.input != input {
                    return Err(Error::Config(format!(
                        "architecture input {} does not match data shape {input}",
                        arch.input
                    )));
                }
                arch
            }
        };
        let plan = arch.plan()?;
        if plan.class_count != classes {
            return Err(Error::Config(format!(
                "architecture has {} outputs for {classes} classes",
                plan.class_count
            )));
        }
        Ok(arch)
    }
}

/// PGD settings; the step size defaults to a quarter of the radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdSpec {
    #[serde(default = "default_pgd_steps")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "default_true")]
    pub random_init: bool,
}

fn default_pgd_steps() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl Default for PgdSpec {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: None,
            random_init: true,
        }
    }
}

impl PgdSpec {
    pub fn at(&self, eps: f64) -> PgdConfig {
        PgdConfig {
            steps: self.steps,
            step_size: self.step_size.unwrap_or(eps / 4.0),
            random_init: self.random_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub epsilon0: f64,
    #[serde(default)]
    pub pgd: PgdSpec,
    pub train: TrainConfig,
}

impl LearnerSpec {
    pub fn pgd_config(&self) -> PgdConfig {
        self.pgd.at(self.epsilon0)
    }
}

fn default_lambda() -> f64 {
    0.01
}

fn default_opt_step() -> f64 {
    0.01
}

fn default_poison_batch() -> usize {
    512
}

fn default_modes() -> Vec<CraftMode> {
    vec![CraftMode::Robust]
}

fn default_full() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedSpec {
    /// One poison set per trial and radius; several radii give LD-vs-ε.
    pub epsilons: Vec<f64>,
    pub rho: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub iters: usize,
    #[serde(default = "default_opt_step")]
    pub opt_step: f64,
    #[serde(default = "default_poison_batch")]
    pub batch: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<CraftMode>,
    /// Training of the attacker's surrogate: adversarial at the learner's
    /// radius for `robust`, standard for `wb`.
    pub surrogate: TrainConfig,
    pub surrogate_seed: u64,
    /// Continue victim training to twice the best-robust epoch and record
    /// the target's logit differences there.
    #[serde(default)]
    pub overfit_probe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickerAttackSpec {
    pub mask_area: f64,
    #[serde(default = "default_full")]
    pub rho: f64,
    pub train: StickerTrainConfig,
    /// Generator architecture; the learner's when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ArchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemAttackSpec {
    pub epsilon: f64,
    /// Inner radius the generator is trained against; the learner's ε0
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon0: Option<f64>,
    #[serde(default = "default_full")]
    pub rho: f64,
    pub train: RemConfig,
    /// Per-image descent used to write the noise.
    pub poison: PgdConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ArchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    None,
    Targeted(TargetedSpec),
    Sticker(StickerAttackSpec),
    Rem(RemAttackSpec),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Targeted(_) => "targeted",
            AttackSpec::Sticker(_) => "sticker",
            AttackSpec::Rem(_) => "rem",
        }
    }
}

/// One poison set: its seed and, for targeted attacks, its target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    /// Class the targeted poison rows are drawn from; the adversarial class
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_class: Option<usize>,
}

impl Trial {
    pub fn base_class(&self) -> Option<usize> {
        self.base_class.or(self.target.map(|t| t.y_adv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Documents settings that are too large to run here; `run` refuses it.
    #[serde(default)]
    pub reference_only: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default)]
    pub precision: Precision,
    pub dataset: DatasetSource,
    pub arch: ArchSpec,
    pub learner: LearnerSpec,
    pub attack: AttackSpec,
    pub trials: Vec<Trial>,
    /// Victims trained on every poison set, each paired with a clean control
    /// of the same seed.
    pub victim_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn check_radius(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{what} = {v} outside [0,1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative dataset paths are taken from the config's directory.
        if let DatasetSource::Files { train, test } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Check radii, seeds and targets; dataset-dependent checks (class
    /// counts, target indices) happen once the data is loaded.
    pub fn validate(&self) -> Result<()> {
        check_radius("epsilon0", self.learner.epsilon0)?;
        self.learner.train.validate()?;
        if self.learner.epsilon0 > 0.0 {
            self.learner.pgd_config().validate()?;
        }
        if self.victim_seeds.is_empty() {
            return Err(Error::Config("victim_seeds must not be empty".into()));
        }
        if let DatasetSource::Synthetic { n_train, n_test, .. } = self.dataset {
            if n_train == 0 || n_test == 0 {
                return Err(Error::Config("synthetic dataset needs train and test rows".into()));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.trials {
            if !seen.insert(t.seed) {
                return Err(Error::Config(format!("trial seed {} listed twice", t.seed)));
            }
        }
        match &self.attack {
            AttackSpec::None => {}
            AttackSpec::Targeted(t) => {
                if t.epsilons.is_empty() || t.modes.is_empty() {
                    return Err(Error::Config("targeted attack needs epsilons and modes".into()));
                }
                for &e in &t.epsilons {
                    check_radius("epsilon", e)?;
                }
                if !(t.rho > 0.0 && t.rho <= 1.0) {
                    return Err(Error::Config(format!("rho {} outside (0,1]", t.rho)));
                }
                t.surrogate.validate()?;
                if self.trials.is_empty() {
                    return Err(Error::Config("targeted attack needs at least one trial".into()));
                }
                if let Some(t) = self.trials.iter().find(|t| t.target.is_none()) {
                    return Err(Error::Config(format!("trial {} has no target", t.seed)));
                }
            }
            AttackSpec::Sticker(s) => {
                if !(s.mask_area > 0.0 && s.mask_area < 1.0) {
                    return Err(Error::Config(format!("mask_area {} outside (0,1)", s.mask_area)));
                }
                if !(s.rho > 0.0 && s.rho <= 1.0) {
                    return Err(Error::Config(format!("rho {} outside (0,1]", s.rho)));
                }
                s.train.validate()?;
                if self.trials.is_empty() {
                    return Err(Error::Config("sticker attack needs at least one trial".into()));
                }
            }
            AttackSpec::Rem(r) => {
                check_radius("epsilon", r.epsilon)?;
                if let Some(e0) = r.epsilon0 {
                    check_radius("rem epsilon0", e0)?;
                }
                if !(r.rho > 0.0 && r.rho <= 1.0) {
                    return Err(Error::Config(format!("rho {} outside (0,1]", r.rho)));
                }
                r.train.validate()?;
                r.poison.validate()?;
                if self.trials.is_empty() {
                    return Err(Error::Config("rem attack needs at least one trial".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Keep only the trial with this seed.
    pub fn select_trial(&mut self, seed: u64) -> Result<()> {
        if self.trials.is_empty() {
            self.trials.push(Trial {
                seed,
                target: None,
                base_class: None,
            });
            return Ok(());
        }
        self.trials.retain(|t| t.seed == seed);
        if self.trials.is_empty() {
            return Err(Error::Config(format!("no trial with seed {seed}")));
        }
        Ok(())
    }
}

pub const PROFILE_NAMES: [&str; 3] = ["targeted-desk", "untargeted-desk", "reference"];

/// Built-in profiles shipped with the binary.
pub fn profile(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        "targeted-desk" => include_str!("../profiles/targeted-desk.json"),
        "untargeted-desk" => include_str!("../profiles/untargeted-desk.json"),
        "reference" => include_str!("../profiles/reference.json"),
        other => {
            return Err(Error::Config(format!(
                "unknown profile {other:?}; available: {}",
                PROFILE_NAMES.join(", ")
            )))
        }
    };
    ExperimentConfig::from_json(text)
}
