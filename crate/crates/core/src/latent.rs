//! Dense autoencoder between log-mel spectrograms and flat latent codes.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::signal::{MelSpectrogram, SignalConfig};
use crate::tensor::{cosine_lr, Activation, AdamW, AdamWConfig, Linear, Mlp, Module, Parameter, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub vector: Vec<f64>,
    pub source_shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Lower bound on per-dimension input std, as a fraction of the mean std.
    pub std_floor: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            hidden: vec![256, 128],
            epochs: 60,
            batch_size: 32,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            std_floor: 0.05,
        }
    }
}

/// Per-dimension affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    /// Column statistics of `rows`, std floored at `floor × mean std`.
    pub fn fit(rows: &[&[f64]], floor: f64) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::input("no rows to normalize"))?;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(*r).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut std = vec![0.0; d];
        for r in rows {
            std.iter_mut().zip(*r).zip(&mean).for_each(|((s, x), m)| *s += (x - m).powi(2) / n as f64);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        let avg = std.iter().sum::<f64>() / d as f64;
        let min = (floor * avg).max(1e-6);
        std.iter_mut().for_each(|s| *s = s.max(min));
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    fn quantize(&mut self) {
        for v in self.mean.iter_mut().chain(self.std.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Input mel normalization.
    pub norm: NormStats,
    /// Latent whitening applied after the encoder and undone before the decoder.
    pub latent: NormStats,
    pub frames: usize,
    pub signal: SignalConfig,
}

impl Module for Autoencoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.encoder.parameters();
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p
    }
}

impl Autoencoder {
    pub fn new(frames: usize, signal: SignalConfig, cfg: &AutoencoderConfig, seed: u64) -> Result<Self> {
        let input = frames * signal.n_mels;
        if input == 0 || cfg.d_z == 0 {
            return Err(Error::input("autoencoder needs non-empty input and latent"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input];
        widths.extend(&cfg.hidden);
        widths.push(cfg.d_z);
        let encoder = Mlp::new("ae.enc", &widths, Activation::Silu, false, &mut rng)?;
        widths.reverse();
        let decoder = Mlp::new("ae.dec", &widths, Activation::Silu, false, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            norm: NormStats::identity(input),
            latent: NormStats::identity(cfg.d_z),
            frames,
            signal,
        })
    }

    /// Exact identity map with `d_z = frames × n_mels`; for tests.
    pub fn identity(frames: usize, signal: SignalConfig) -> Self {
        let n = frames * signal.n_mels;
        let layer = |name: &str| Mlp { layers: vec![Linear::identity(name, n)], norms: vec![], activation: Activation::Silu };
        Self {
            encoder: layer("ae.enc.l0"),
            decoder: layer("ae.dec.l0"),
            norm: NormStats::identity(n),
            latent: NormStats::identity(n),
            frames,
            signal,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.frames * self.signal.n_mels
    }

    pub fn d_z(&self) -> usize {
        self.encoder.out_width()
    }

    fn check_mel(&self, mel: &MelSpectrogram) -> Result<()> {
        if mel.shape() != (self.frames, self.signal.n_mels) {
            return Err(Error::dim(format!(
                "mel of shape {:?}, autoencoder expects ({}, {})",
                mel.shape(),
                self.frames,
                self.signal.n_mels
            )));
        }
        Ok(())
    }

    /// Batch encode, `[B, d_z]` whitened codes.
    pub fn encode_batch(&self, mels: &[&MelSpectrogram]) -> Result<Tensor> {
        if mels.is_empty() {
            return Err(Error::input("nothing to encode"));
        }
        let mut data = Vec::with_capacity(mels.len() * self.input_dim());
        for m in mels {
            self.check_mel(m)?;
            data.extend(self.norm.normalize(&m.data));
        }
        let h = self.encoder.infer(&Tensor::matrix(mels.len(), self.input_dim(), data)?)?;
        let mut out = Vec::with_capacity(h.len());
        for r in 0..h.rows() {
            out.extend(self.latent.normalize(h.row(r)));
        }
        ensure_finite("latent codes", &out)?;
        Tensor::matrix(mels.len(), self.d_z(), out)
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<LatentCode> {
        let t = self.encode_batch(&[mel])?;
        Ok(LatentCode { vector: t.into_data(), source_shape: mel.shape() })
    }

    /// Batch decode of `[B, d_z]` whitened codes.
    pub fn decode_batch(&self, codes: &Tensor) -> Result<Vec<MelSpectrogram>> {
        if codes.shape().len() != 2 || codes.cols() != self.d_z() {
            return Err(Error::dim(format!("codes of shape {:?}, expected [_, {}]", codes.shape(), self.d_z())));
        }
        let mut data = Vec::with_capacity(codes.len());
        for r in 0..codes.rows() {
            data.extend(self.latent.denormalize(codes.row(r)));
        }
        let y = self.decoder.infer(&Tensor::matrix(codes.rows(), self.d_z(), data)?)?;
        (0..y.rows())
            .map(|r| MelSpectrogram::new(self.frames, self.norm.denormalize(y.row(r)), self.signal))
            .collect()
    }

    pub fn decode(&self, code: &LatentCode) -> Result<MelSpectrogram> {
        if code.vector.len() != self.d_z() {
            return Err(Error::dim(format!("code of length {}, expected {}", code.vector.len(), self.d_z())));
        }
        let t = Tensor::matrix(1, self.d_z(), code.vector.clone())?;
        Ok(self.decode_batch(&t)?.remove(0))
    }

    /// `Σ (m̂ − m)² / Σ (m − μ)²` over a set of mels, with `μ` their mean.
    pub fn relative_mse(&self, mels: &[MelSpectrogram]) -> Result<f64> {
        let refs: Vec<&MelSpectrogram> = mels.iter().collect();
        let codes = self.encode_batch(&refs)?;
        let recon = self.decode_batch(&codes)?;
        let d = self.input_dim();
        let mut mean = vec![0.0; d];
        for m in mels {
            mean.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b / mels.len() as f64);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (m, r) in mels.iter().zip(&recon) {
            for i in 0..d {
                num += (r.data[i] - m.data[i]).powi(2);
                den += (m.data[i] - mean[i]).powi(2);
            }
        }
        Ok(if den > 0.0 { num / den } else { num })
    }

    fn quantize_all(&mut self) {
        self.quantize();
        self.norm.quantize();
        self.latent.quantize();
    }
}

/// Trains an autoencoder on `corpus` by minimizing reconstruction MSE in the
/// normalized mel space. Returns the model and the mean loss of each epoch.
pub fn train_autoencoder(
    corpus: &[MelSpectrogram],
    cfg: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder, Vec<f64>)> {
    let first = corpus.first().ok_or_else(|| Error::input("empty autoencoder corpus"))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("autoencoder epochs and batch size must be positive".into()));
    }
    let (frames, _) = first.shape();
    let mut model = Autoencoder::new(frames, first.config, cfg, seed)?;
    for m in corpus {
        model.check_mel(m)?;
    }
    let rows: Vec<&[f64]> = corpus.iter().map(|m| m.data.as_slice()).collect();
    model.norm = NormStats::fit(&rows, cfg.std_floor)?;
    let normed: Vec<Vec<f64>> = rows.iter().map(|r| model.norm.normalize(r)).collect();
    let d = model.input_dim();

    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cosine_lr(cfg.optimizer.lr, epoch, cfg.epochs, 0.05));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                data.extend_from_slice(&normed[i]);
            }
            let (loss, grads) = {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::matrix(batch.len(), d, data)?);
                let z = model.encoder.forward(&mut tape, x, true)?;
                let y = model.decoder.forward(&mut tape, z, true)?;
                let loss = tape.mse(y, x)?;
                tape.backward(loss)?;
                (tape.scalar_value(loss)?, tape.gradients())
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss diverged at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
            model.accumulate_grads(&grads)?;
            opt.step(model.parameters_mut())?;
            model.zero_grad();
        }
        let mean = total / corpus.len() as f64;
        debug!("autoencoder epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    model.quantize_all();

    // Whitening of the trained latent space.
    let refs: Vec<&MelSpectrogram> = corpus.iter().collect();
    let raw = model.encode_batch(&refs)?;
    let raw_rows: Vec<&[f64]> = (0..raw.rows()).map(|r| raw.row(r)).collect();
    model.latent = NormStats::fit(&raw_rows, 0.0)?;
    model.latent.quantize();
    info!(
        "autoencoder trained: {} epochs, loss {:.5} -> {:.5}",
        cfg.epochs,
        history[0],
        history[history.len() - 1]
    );
    Ok((model, history))
}
