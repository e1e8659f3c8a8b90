//! Deterministic acoustic measurements of a clip.

use serde::{Deserialize, Serialize};

use super::factors::{ChordType, FactorSpec, Tempo, Timbre, MAX_ROOT_HZ, MIN_ROOT_HZ};
use crate::signal::{magnitude_spectrum, AudioClip};

/// Relative half-width of the band searched around each expected partial.
const BAND: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticSignature {
    /// Strongest partial between 100 and 970 Hz.
    pub peak_hz: f64,
    /// Amplitudes at the minor third, major third and fifth above the peak,
    /// relative to the peak.
    pub chord_ratios: [f64; 3],
    /// Amplitudes at 2, 3 and 4 times the peak, relative to the peak.
    pub harmonic_ratios: [f64; 3],
    /// Dominant envelope modulation rate in `[1, 10]` Hz.
    pub modulation_hz: f64,
    /// Peak-to-median spectral ratio mapped to `[0, 1]`.
    pub tonality: f64,
}

/// Factors read off a signature with fixed decision thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub fifth: f64,
    pub third: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { fifth: 0.25, third: 0.25 }
    }
}

fn band_max(mags: &[f64], bin_hz: f64, f: f64) -> f64 {
    let lo = ((f * (1.0 - BAND)) / bin_hz).floor().max(0.0) as usize;
    let hi = (((f * (1.0 + BAND)) / bin_hz).ceil() as usize).min(mags.len() - 1);
    mags[lo..=hi].iter().fold(0.0, |m, &v| m.max(v))
}

fn envelope_rate(samples: &[f64], sample_rate: u32) -> f64 {
    const FRAME: usize = 256;
    const HOP: usize = 128;
    if samples.len() < FRAME {
        return 0.0;
    }
    let env: Vec<f64> = (0..=(samples.len() - FRAME) / HOP)
        .map(|i| {
            let seg = &samples[i * HOP..i * HOP + FRAME];
            (seg.iter().map(|s| s * s).sum::<f64>() / FRAME as f64).sqrt()
        })
        .collect();
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let fps = sample_rate as f64 / HOP as f64;
    let mut best = (1.0, f64::MIN);
    for step in 0..=90 {
        let r = 1.0 + step as f64 * 0.1;
        let w = 2.0 * std::f64::consts::PI * r / fps;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, e) in env.iter().enumerate() {
            re += (e - mean) * (w * n as f64).cos();
            im += (e - mean) * (w * n as f64).sin();
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (r, p);
        }
    }
    best.0
}

impl AcousticSignature {
    pub fn measure(clip: &AudioClip) -> Self {
        let (mags, bin_hz) = magnitude_spectrum(clip.samples(), clip.sample_rate(), 16_384);
        let lo = ((MIN_ROOT_HZ * 0.9) / bin_hz).ceil() as usize;
        let hi = (((MAX_ROOT_HZ * 1.1) / bin_hz).floor() as usize).min(mags.len() - 2);
        let k = (lo..=hi).fold(lo, |b, i| if mags[i] > mags[b] { i } else { b });
        // Parabolic refinement on log magnitude.
        let (a, b, c) = (
            mags[k - 1].max(1e-300).ln(),
            mags[k].max(1e-300).ln(),
            mags[k + 1].max(1e-300).ln(),
        );
        let denom = a - 2.0 * b + c;
        let offset = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let peak_hz = (k as f64 + offset) * bin_hz;
        let peak_amp = mags[k].max(1e-12);
        let rel = |f: f64| band_max(&mags, bin_hz, f) / peak_amp;
        let semis = |s: f64| peak_hz * 2f64.powf(s / 12.0);

        let mut sorted: Vec<f64> = mags
            .iter()
            .enumerate()
            .filter(|(i, _)| (50.0..=4000.0).contains(&(*i as f64 * bin_hz)))
            .map(|(_, &m)| m)
            .collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2].max(1e-12);
        let tonality = ((peak_amp / median).log10() - 1.0).clamp(0.0, 1.0);

        Self {
            peak_hz,
            chord_ratios: [rel(semis(3.0)), rel(semis(4.0)), rel(semis(7.0))],
            harmonic_ratios: [rel(2.0 * peak_hz), rel(3.0 * peak_hz), rel(4.0 * peak_hz)],
            modulation_hz: envelope_rate(clip.samples(), clip.sample_rate()),
            tonality,
        }
    }

    pub fn chord(&self, th: Thresholds) -> ChordType {
        let [m3, maj3, p5] = self.chord_ratios;
        if p5 < th.fifth {
            ChordType::Single
        } else if m3.max(maj3) < th.third {
            ChordType::Fifth
        } else if maj3 >= m3 {
            ChordType::Major
        } else {
            ChordType::Minor
        }
    }

    pub fn timbre(&self) -> Timbre {
        let (a2, a4) = (self.harmonic_ratios[0], self.harmonic_ratios[2]);
        let dist = |t: Timbre| {
            let h = t.harmonics();
            let e2 = h.get(1).copied().unwrap_or(0.0);
            let e4 = h.get(3).copied().unwrap_or(0.0);
            (a2 - e2).powi(2) + (a4 - e4).powi(2)
        };
        Timbre::ALL
            .into_iter()
            .min_by(|x, y| dist(*x).total_cmp(&dist(*y)))
            .expect("non-empty")
    }

    pub fn tempo(&self) -> Tempo {
        if self.modulation_hz < 4.0 {
            Tempo::Slow
        } else {
            Tempo::Fast
        }
    }

    /// Best-guess factors; the root is clamped into the valid range.
    pub fn estimate(&self, th: Thresholds) -> FactorSpec {
        FactorSpec {
            root_freq: self.peak_hz.clamp(MIN_ROOT_HZ, MAX_ROOT_HZ),
            chord: self.chord(th),
            timbre: self.timbre(),
            tempo: self.tempo(),
        }
    }
}
