//! Per-stage checkpoints and loss logs under the checkpoint directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmflow_core::align::AdapterStack;
use mmflow_core::checkpoint::Checkpoint;
use mmflow_core::config::RunConfig;
use mmflow_core::flowmatch::VectorFieldNet;
use mmflow_core::latent::{Autoencoder, NormStats};
use mmflow_core::tensor::Module;
use mmflow_core::Error;

pub const AUTOENCODER: &str = "autoencoder";
pub const ALIGN: &str = "align";
pub const GEN: &str = "gen";
pub const JOINT: &str = "joint";

pub struct Store<'a> {
    pub dir: &'a Path,
    pub cfg: &'a RunConfig,
}

impl<'a> Store<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self { dir: &cfg.paths.checkpoints, cfg }
    }

    pub fn path(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt"))
    }

    pub fn exists(&self, stage: &str) -> bool {
        self.path(stage).is_file()
    }

    fn require(&self, stage: &str) -> mmflow_core::Result<Checkpoint> {
        let path = self.path(stage);
        if !path.is_file() {
            return Err(Error::Dependency(stage.to_string()));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.header.config_hash != self.cfg.hash() {
            log::warn!("{} was written under a different configuration", path.display());
        }
        Ok(ck)
    }

    /// Fails with a dependency error naming the first missing stage.
    pub fn require_all(&self, stages: &[&str]) -> mmflow_core::Result<()> {
        match stages.iter().find(|s| !self.exists(s)) {
            Some(s) => Err(Error::Dependency(s.to_string())),
            None => Ok(()),
        }
    }

    pub fn save_autoencoder(&self, ae: &Autoencoder) -> mmflow_core::Result<()> {
        Checkpoint::from_modules(AUTOENCODER, &[ae], &self.cfg.hash())
            .with_norm_stats("input_mean", &ae.norm.mean)
            .with_norm_stats("input_std", &ae.norm.std)
            .with_norm_stats("latent_mean", &ae.latent.mean)
            .with_norm_stats("latent_std", &ae.latent.std)
            .with_meta("frames", ae.frames.into())
            .with_meta("n_mels", ae.signal.n_mels.into())
            .save(&self.path(AUTOENCODER))
    }

    pub fn load_autoencoder(&self) -> mmflow_core::Result<Autoencoder> {
        let ck = self.require(AUTOENCODER)?;
        let frames = ck
            .meta("frames")?
            .as_u64()
            .ok_or_else(|| Error::Format("frames is not an integer".into()))? as usize;
        let mut ae = Autoencoder::new(frames, self.cfg.signal, &self.cfg.autoencoder, 0)?;
        ck.restore(&mut ae)?;
        ae.norm = NormStats { mean: ck.norm_stats("input_mean")?.to_vec(), std: ck.norm_stats("input_std")?.to_vec() };
        ae.latent =
            NormStats { mean: ck.norm_stats("latent_mean")?.to_vec(), std: ck.norm_stats("latent_std")?.to_vec() };
        Ok(ae)
    }

    pub fn save_adapters(&self, adapters: &AdapterStack) -> mmflow_core::Result<()> {
        Checkpoint::from_modules(ALIGN, &[adapters], &self.cfg.hash()).save(&self.path(ALIGN))
    }

    pub fn save_flow(&self, stage: &str, net: &VectorFieldNet, adapters: Option<&AdapterStack>) -> mmflow_core::Result<()> {
        let mut modules: Vec<&dyn Module> = vec![net];
        if let Some(a) = adapters {
            modules.push(a);
        }
        Checkpoint::from_modules(stage, &modules, &self.cfg.hash())
            .with_meta("d_z", net.d_z.into())
            .save(&self.path(stage))
    }

    /// Adapters from `stage` (`align` or `joint`).
    pub fn load_adapters(&self, stage: &str) -> mmflow_core::Result<AdapterStack> {
        let ck = self.require(stage)?;
        let mut a = AdapterStack::new(self.cfg.dim, 0)?;
        ck.restore(&mut a)?;
        Ok(a)
    }

    pub fn load_flow(&self, stage: &str) -> mmflow_core::Result<VectorFieldNet> {
        let ck = self.require(stage)?;
        let d_z = ck.meta("d_z")?.as_u64().ok_or_else(|| Error::Format("d_z is not an integer".into()))? as usize;
        let mut net = VectorFieldNet::new(d_z, self.cfg.dim, 0)?;
        ck.restore(&mut net)?;
        Ok(net)
    }

    /// The final generator: joint weights when present, otherwise the
    /// generation-stage field with the alignment-stage adapters.
    pub fn load_generator(&self) -> mmflow_core::Result<(VectorFieldNet, AdapterStack)> {
        if self.exists(JOINT) {
            Ok((self.load_flow(JOINT)?, self.load_adapters(JOINT)?))
        } else {
            self.require_all(&[ALIGN, GEN])?;
            Ok((self.load_flow(GEN)?, self.load_adapters(ALIGN)?))
        }
    }

    pub fn write_loss_csv(&self, stage: &str, header: &str, columns: &[&[f64]]) -> mmflow_core::Result<PathBuf> {
        let path = self.dir.join(format!("{stage}_loss.csv"));
        std::fs::create_dir_all(self.dir)?;
        let mut out = String::new();
        let _ = writeln!(out, "epoch,{header}");
        let n = columns.first().map_or(0, |c| c.len());
        for i in 0..n {
            let _ = write!(out, "{}", i + 1);
            for c in columns {
                let _ = write!(out, ",{}", c[i]);
            }
            out.push('\n');
        }
        std::fs::write(&path, out)?;
        Ok(path)
    }
}
