use rustfft::num_complex::Complex64;

use super::mel::{MelFilterbank, MelSpectrogram};
use super::stft::{istft, stft_samples, Spectrogram};
use super::{AudioClip, SignalConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// Spectral convergence `‖|STFT(x_k)| − S‖ / ‖S‖` after each iteration.
    pub errors: Vec<f64>,
}

/// Mel-to-waveform reconstruction with a cached filterbank pseudo-inverse.
#[derive(Clone, Debug)]
pub struct Vocoder {
    cfg: SignalConfig,
    pinv: Vec<f64>,
}

impl Vocoder {
    pub fn new(cfg: &SignalConfig) -> Result<Self> {
        let bank = MelFilterbank::new(cfg)?;
        Ok(Self { cfg: *cfg, pinv: bank.pseudo_inverse()? })
    }

    pub fn config(&self) -> &SignalConfig {
        &self.cfg
    }

    /// Non-negative linear magnitudes recovered from a log-mel spectrogram.
    fn linear_magnitudes(&self, mel: &MelSpectrogram) -> Vec<f64> {
        let n_mels = self.cfg.n_mels;
        let n_bins = self.cfg.n_bins();
        let mel_mag = mel.magnitudes();
        let mut out = Vec::with_capacity(mel.frames * n_bins);
        for t in 0..mel.frames {
            let frame = &mel_mag[t * n_mels..(t + 1) * n_mels];
            for k in 0..n_bins {
                let row = &self.pinv[k * n_mels..(k + 1) * n_mels];
                let v: f64 = row.iter().zip(frame).map(|(a, b)| a * b).sum();
                out.push(v.max(0.0));
            }
        }
        out
    }

    pub fn reconstruct(&self, mel: &MelSpectrogram, iters: usize) -> Result<GriffinLimOutput> {
        if iters == 0 {
            return Err(Error::input("griffin_lim needs at least one iteration"));
        }
        if mel.n_mels != self.cfg.n_mels {
            return Err(Error::dim(format!(
                "mel has {} bands, config expects {}",
                mel.n_mels, self.cfg.n_mels
            )));
        }
        let cfg = &self.cfg;
        let bins = cfg.n_bins();
        let target = self.linear_magnitudes(mel);
        let weight = |i: usize| {
            let k = i % bins;
            if k == 0 || k == bins - 1 {
                1.0
            } else {
                2.0
            }
        };
        let target_norm = target
            .iter()
            .enumerate()
            .map(|(i, s)| weight(i) * s * s)
            .sum::<f64>()
            .sqrt();

        let mut spec = Spectrogram {
            frames: mel.frames,
            bins,
            data: target.iter().map(|&s| Complex64::new(s, 0.0)).collect(),
        };
        let mut x = istft(&spec, cfg)?;
        let mut errors = Vec::with_capacity(iters);
        for _ in 0..iters {
            let y = stft_samples(&x, cfg)?;
            let mut num = 0.0;
            for (i, (c, &s)) in y.data.iter().zip(&target).enumerate() {
                let mag = c.norm();
                num += weight(i) * (mag - s) * (mag - s);
                spec.data[i] = if mag > 0.0 { c * (s / mag) } else { Complex64::new(s, 0.0) };
            }
            errors.push(if target_norm > 0.0 { num.sqrt() / target_norm } else { 0.0 });
            x = istft(&spec, cfg)?;
        }
        crate::error::ensure_finite("griffin-lim output", &x)?;
        Ok(GriffinLimOutput { clip: AudioClip::clipped(x, cfg.sample_rate)?, errors })
    }
}

/// Griffin-Lim phase retrieval from a log-mel spectrogram, starting from zero
/// phase. Output length is `(T - 1) · hop + win`.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &SignalConfig, iters: usize) -> Result<AudioClip> {
    Ok(griffin_lim_with_history(mel, cfg, iters)?.clip)
}

pub fn griffin_lim_with_history(
    mel: &MelSpectrogram,
    cfg: &SignalConfig,
    iters: usize,
) -> Result<GriffinLimOutput> {
    if iters == 0 {
        return Err(Error::input("griffin_lim needs at least one iteration"));
    }
    Vocoder::new(cfg)?.reconstruct(mel, iters)
}
