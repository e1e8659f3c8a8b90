use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{AudioClip, SignalConfig};
use crate::error::{Error, Result};

/// One-sided complex STFT, `frames × bins` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Energy of the full two-sided spectrum implied by this one-sided one.
    pub fn two_sided_energy(&self) -> f64 {
        let last = self.bins - 1;
        self.data
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let k = i % self.bins;
                let w = if k == 0 || k == last { 1.0 } else { 2.0 };
                w * c.norm_sqr()
            })
            .sum()
    }
}

pub(crate) fn stft_samples(samples: &[f64], cfg: &SignalConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if samples.len() < cfg.win {
        return Err(Error::input(format!(
            "clip of {} samples is shorter than the {}-sample window",
            samples.len(),
            cfg.win
        )));
    }
    let frames = cfg.n_frames(samples.len());
    let bins = cfg.n_bins();
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let seg = &samples[t * cfg.hop..t * cfg.hop + cfg.win];
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, (s, w)) in seg.iter().zip(&window).enumerate() {
            buf[i] = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}

/// Hann-windowed, hop-strided one-sided STFT. No padding is applied, so the
/// frame count is `1 + (len - win) / hop`.
pub fn stft(clip: &AudioClip, cfg: &SignalConfig) -> Result<Spectrogram> {
    stft_samples(clip.samples(), cfg)
}

/// Least-squares inverse STFT: overlap-add of windowed frames divided by the
/// summed squared window. Samples the window never covers are set to 0.
pub fn istft(spec: &Spectrogram, cfg: &SignalConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.bins != cfg.n_bins() || spec.frames == 0 {
        return Err(Error::dim(format!(
            "spectrogram {}x{} does not fit n_fft {}",
            spec.frames, spec.bins, cfg.n_fft
        )));
    }
    let n = cfg.n_fft;
    let len = cfg.output_len(spec.frames);
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        // Hermitian extension; DC and Nyquist are forced real.
        buf[0] = Complex64::new(frame[0].re, 0.0);
        buf[n / 2] = Complex64::new(frame[n / 2].re, 0.0);
        for k in 1..n / 2 {
            buf[k] = frame[k];
            buf[n - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            out[start + i] += w * buf[i].re / n as f64;
            norm[start + i] += w * w;
        }
    }
    for (o, d) in out.iter_mut().zip(&norm) {
        *o = if *d > 1e-12 { *o / d } else { 0.0 };
    }
    Ok(out)
}

/// Hann-windowed magnitude spectrum of a whole signal, zero-padded to the
/// next power of two at least `min_fft` long. Returns `(magnitudes, bin_hz)`.
pub fn magnitude_spectrum(samples: &[f64], sample_rate: u32, min_fft: usize) -> (Vec<f64>, f64) {
    let n = samples.len().max(min_fft).next_power_of_two();
    let len = samples.len() as f64;
    let mut buf: Vec<Complex64> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len).cos();
            Complex64::new(s * w, 0.0)
        })
        .collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    FftPlanner::<f64>::new().plan_fft_forward(n).process(&mut buf);
    let mags = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
    (mags, sample_rate as f64 / n as f64)
}

/// Frequency of the largest bin of the whole-clip spectrum (DC excluded).
/// Returns `(peak_hz, bin_hz)`.
pub fn spectrum_peak_hz(clip: &AudioClip) -> (f64, f64) {
    let (mags, bin_hz) = magnitude_spectrum(clip.samples(), clip.sample_rate(), 1);
    let k = mags
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::MIN), |best, (i, &m)| if m > best.1 { (i, m) } else { best })
        .0;
    (k as f64 * bin_hz, bin_hz)
}
