use nalgebra::DMatrix;

use super::stft::stft;
use super::{AudioClip, SignalConfig};
use crate::error::{Error, Result};

/// HTK mel scale: `2595 · log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) || !f.is_finite() {
        return Err(Error::input(format!("frequency {f} Hz must be finite and non-negative")));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> Result<f64> {
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::input(format!("mel value {m} must be finite and non-negative")));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Triangular HTK filterbank, `n_mels × n_bins`, each row summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &SignalConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin)?, hz_to_mel(cfg.fmax)?);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect::<Result<_>>()?;
        let bin_hz = cfg.bin_hz();
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > left && f <= centre {
                    (f - left) / (centre - left)
                } else if f > centre && f < right {
                    (right - f) / (right - centre)
                } else {
                    0.0
                };
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|w| *w /= sum);
            } else {
                // Filter narrower than one FFT bin: use the nearest bin.
                let k = ((centre / bin_hz).round() as usize).min(n_bins - 1);
                row[k] = 1.0;
            }
        }
        Ok(Self { n_mels: cfg.n_mels, n_bins, weights })
    }

    /// Mel energies of one magnitude frame.
    pub fn apply(&self, magnitudes: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.n_bins)
            .map(|row| row.iter().zip(magnitudes).map(|(w, m)| w * m).sum())
            .collect()
    }

    /// Moore-Penrose pseudo-inverse, `n_bins × n_mels` row-major.
    pub fn pseudo_inverse(&self) -> Result<Vec<f64>> {
        let fb = DMatrix::from_row_slice(self.n_mels, self.n_bins, &self.weights);
        let pinv = fb
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::Numeric(format!("filterbank pseudo-inverse: {e}")))?;
        let mut out = Vec::with_capacity(self.n_bins * self.n_mels);
        for r in 0..self.n_bins {
            for c in 0..self.n_mels {
                out.push(pinv[(r, c)]);
            }
        }
        Ok(out)
    }
}

/// Log-mel spectrogram, `frames × n_mels` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
    pub config: SignalConfig,
}

impl MelSpectrogram {
    pub fn new(frames: usize, data: Vec<f64>, config: SignalConfig) -> Result<Self> {
        if frames == 0 || data.len() != frames * config.n_mels {
            return Err(Error::dim(format!(
                "mel data of length {} is not {frames} x {}",
                data.len(),
                config.n_mels
            )));
        }
        crate::error::ensure_finite("mel spectrogram", &data)?;
        Ok(Self { frames, n_mels: config.n_mels, data, config })
    }

    /// Every bin at `log(log_floor)`, the image of silence.
    pub fn silent(frames: usize, config: SignalConfig) -> Result<Self> {
        Self::new(frames, vec![config.log_floor.ln(); frames * config.n_mels], config)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Per-bin magnitudes, undoing the log compression.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|v| (v.exp() - self.config.log_floor).max(0.0)).collect()
    }
}

pub(crate) fn mel_with_bank(
    clip: &AudioClip,
    cfg: &SignalConfig,
    bank: &MelFilterbank,
) -> Result<MelSpectrogram> {
    let spec = stft(clip, cfg)?;
    let mut data = Vec::with_capacity(spec.frames * cfg.n_mels);
    for t in 0..spec.frames {
        let mags: Vec<f64> = spec.frame(t).iter().map(|c| c.norm()).collect();
        data.extend(bank.apply(&mags).into_iter().map(|e| (e + cfg.log_floor).ln()));
    }
    MelSpectrogram::new(spec.frames, data, *cfg)
}

/// Magnitude STFT through the mel filterbank, then `ln(x + log_floor)`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &SignalConfig) -> Result<MelSpectrogram> {
    mel_with_bank(clip, cfg, &MelFilterbank::new(cfg)?)
}
