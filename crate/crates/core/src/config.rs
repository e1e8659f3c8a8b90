//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::encoders::BackendConfig;
use crate::error::{Error, Result};
use crate::flowmatch::{FlowConfig, TrainConfig};
use crate::latent::AutoencoderConfig;
use crate::signal::SignalConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub epochs: usize,
    pub eval_every: usize,
    /// Validation items used per evaluation.
    pub eval_items: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { epochs: 250, eval_every: 50, eval_items: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: "data/corpus".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Embedding width `D` shared by every encoder.
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub signal: SignalConfig,
    pub autoencoder: AutoencoderConfig,
    pub align: AlignConfig,
    pub generation: TrainConfig,
    pub joint: TrainConfig,
    pub lambda: f64,
    pub flow: FlowConfig,
    pub backend: BackendConfig,
    pub agents: crate::agents::AgentConfig,
    pub griffin_lim_iters: usize,
    pub ablation: AblationConfig,
    pub parallel: bool,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dim: 512,
            n_train: 2048,
            n_val: 256,
            signal: SignalConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            align: AlignConfig::default(),
            generation: TrainConfig::generation(),
            joint: TrainConfig::joint(),
            lambda: 0.1,
            flow: FlowConfig::default(),
            backend: BackendConfig::default(),
            agents: Default::default(),
            griffin_lim_iters: 60,
            ablation: AblationConfig::default(),
            parallel: true,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.flow.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.align.optimizer.validate()?;
        self.autoencoder.optimizer.validate()?;
        let epochs = [
            ("autoencoder", self.autoencoder.epochs),
            ("align", self.align.epochs),
            ("gen", self.generation.epochs),
            ("joint", self.joint.epochs),
        ];
        for (name, e) in epochs {
            if e == 0 {
                return Err(Error::Config(format!("{name} epochs must be at least 1")));
            }
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("corpus splits must be non-empty".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.griffin_lim_iters == 0 {
            return Err(Error::Config("griffin_lim_iters must be at least 1".into()));
        }
        if self.ablation.eval_every == 0 || self.ablation.eval_items == 0 {
            return Err(Error::Config("ablation cadence and size must be positive".into()));
        }
        self.agents.validate()?;
        Ok(())
    }

    pub fn execution(&self) -> crate::exec::Execution {
        if self.parallel {
            crate::exec::Execution::Parallel
        } else {
            crate::exec::Execution::Sequential
        }
    }

    /// Short digest of the configuration, stored in checkpoint headers.
    /// Output locations and the execution mode do not affect results and
    /// are left out.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { paths: Paths::default(), parallel: true, ..self.clone() };
        let json = serde_json::to_vec(&canonical).unwrap_or_default();
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_schedule() {
        let c = RunConfig::default();
        assert_eq!((c.align.epochs, c.generation.epochs, c.joint.epochs), (50, 250, 100));
        assert_eq!(c.generation.batch_size, 24);
        assert_eq!(c.generation.optimizer.lr, 1e-4);
        assert_eq!(c.lambda, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "joint": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.joint.epochs, 3);
        assert_eq!(c.joint.batch_size, 24);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 7}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c = RunConfig { lambda: -1.0, ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.generation.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!(RunConfig::default().hash(), RunConfig::default().hash());
    }
}
