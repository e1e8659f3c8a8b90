//! Ground-truth generative factors of the synthetic corpus and the additive
//! synthesizer that turns them into audio.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioClip;

pub const MIN_ROOT_HZ: f64 = 110.0;
pub const MAX_ROOT_HZ: f64 = 880.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordType {
    Single,
    Major,
    Minor,
    Fifth,
}

impl ChordType {
    pub const ALL: [ChordType; 4] = [ChordType::Single, ChordType::Major, ChordType::Minor, ChordType::Fifth];

    /// Semitone offsets above the root.
    pub fn intervals(self) -> &'static [i32] {
        match self {
            ChordType::Single => &[0],
            ChordType::Major => &[0, 4, 7],
            ChordType::Minor => &[0, 3, 7],
            ChordType::Fifth => &[0, 7],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ChordType::Single => "single",
            ChordType::Major => "major",
            ChordType::Minor => "minor",
            ChordType::Fifth => "fifth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timbre {
    Pure,
    Bright,
    Soft,
}

impl Timbre {
    pub const ALL: [Timbre; 3] = [Timbre::Pure, Timbre::Bright, Timbre::Soft];

    /// Relative amplitudes of harmonics 1, 2, 3, ...
    pub fn harmonics(self) -> &'static [f64] {
        match self {
            Timbre::Pure => &[1.0],
            Timbre::Bright => &[1.0, 0.6, 0.45, 0.35, 0.25],
            Timbre::Soft => &[1.0, 0.25, 0.06],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Timbre::Pure => "pure",
            Timbre::Bright => "bright",
            Timbre::Soft => "soft",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tempo {
    Slow,
    Fast,
}

impl Tempo {
    pub const ALL: [Tempo; 2] = [Tempo::Slow, Tempo::Fast];

    /// Amplitude-modulation rate.
    pub fn rate_hz(self) -> f64 {
        match self {
            Tempo::Slow => 2.0,
            Tempo::Fast => 6.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tempo::Slow => "slow",
            Tempo::Fast => "fast",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub root_freq: f64,
    pub chord: ChordType,
    pub timbre: Timbre,
    pub tempo: Tempo,
}

impl fmt::Display for FactorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2}Hz/{}/{}/{}",
            self.root_freq,
            self.chord.name(),
            self.timbre.name(),
            self.tempo.name()
        )
    }
}

/// Whole-tone grid from D4 to G#5: `440 · 2^(k/12)` for odd `k` in `-7..=11`.
pub fn root_grid() -> Vec<f64> {
    (-7..=11).step_by(2).map(|k| 440.0 * 2f64.powf(k as f64 / 12.0)).collect()
}

/// Chord classes used by the default corpus. Major and minor thirds sit one
/// semitone apart, which the mel front end cannot separate at these roots,
/// so only one of them is used.
pub const CORPUS_CHORDS: [ChordType; 3] = [ChordType::Single, ChordType::Fifth, ChordType::Major];

impl FactorSpec {
    pub fn new(root_freq: f64, chord: ChordType, timbre: Timbre, tempo: Tempo) -> Result<Self> {
        let spec = Self { root_freq, chord, timbre, tempo };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_ROOT_HZ..=MAX_ROOT_HZ).contains(&self.root_freq) {
            return Err(Error::input(format!(
                "root frequency {} Hz outside [{MIN_ROOT_HZ}, {MAX_ROOT_HZ}]",
                self.root_freq
            )));
        }
        Ok(())
    }

    /// Position of the root on a log scale, 0 at 110 Hz and 1 at 880 Hz.
    pub fn pitch_position(&self) -> f64 {
        pitch_position(self.root_freq)
    }

    /// Every combination of corpus chord, timbre, tempo and grid root.
    pub fn corpus_grid() -> Vec<FactorSpec> {
        let mut out = Vec::new();
        for &chord in &CORPUS_CHORDS {
            for timbre in Timbre::ALL {
                for tempo in Tempo::ALL {
                    for root in root_grid() {
                        out.push(FactorSpec { root_freq: root, chord, timbre, tempo });
                    }
                }
            }
        }
        out
    }

    pub fn sample(rng: &mut impl Rng) -> FactorSpec {
        let grid = root_grid();
        FactorSpec {
            root_freq: grid[rng.random_range(0..grid.len())],
            chord: CORPUS_CHORDS[rng.random_range(0..CORPUS_CHORDS.len())],
            timbre: Timbre::ALL[rng.random_range(0..3)],
            tempo: Tempo::ALL[rng.random_range(0..2)],
        }
    }

    /// Renders a clip: every chord tone (root at amplitude 1, others 0.5)
    /// with the timbre's harmonics at random phases, under the tempo's
    /// amplitude envelope `0.6 + 0.4 cos(2π r t)`, scaled to a random peak
    /// in `[0.6, 0.9]`.
    pub fn synthesize(&self, sample_rate: u32, n_samples: usize, rng: &mut impl Rng) -> Result<AudioClip> {
        self.validate()?;
        if n_samples == 0 {
            return Err(Error::input("cannot synthesize an empty clip"));
        }
        let sr = sample_rate as f64;
        let ceiling = 0.49 * sr;
        let mut partials = Vec::new();
        for (i, &semi) in self.chord.intervals().iter().enumerate() {
            let f0 = self.root_freq * 2f64.powf(semi as f64 / 12.0);
            let tone_amp = if i == 0 { 1.0 } else { 0.5 };
            for (h, &a) in self.timbre.harmonics().iter().enumerate() {
                let f = f0 * (h + 1) as f64;
                if f < ceiling {
                    partials.push((f, tone_amp * a, rng.random_range(0.0..2.0 * PI)));
                }
            }
        }
        let rate = self.tempo.rate_hz();
        let mut samples: Vec<f64> = (0..n_samples)
            .map(|n| {
                let t = n as f64 / sr;
                let env = 0.6 + 0.4 * (2.0 * PI * rate * t).cos();
                env * partials.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>()
            })
            .collect();
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let gain = rng.random_range(0.6..0.9) / peak.max(1e-12);
        samples.iter_mut().for_each(|s| *s *= gain);
        AudioClip::new(samples, sample_rate)
    }
}

pub fn pitch_position(freq: f64) -> f64 {
    (freq / MIN_ROOT_HZ).log2() / 3.0
}

pub fn freq_from_position(p: f64) -> f64 {
    MIN_ROOT_HZ * 2f64.powf(3.0 * p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::spectrum_peak_hz;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_spans_whole_tones() {
        let g = root_grid();
        assert_eq!(g.len(), 10);
        assert!((g[0] - 293.66).abs() < 0.01);
        assert!((g[9] - 830.61).abs() < 0.01);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 2f64.powf(2.0 / 12.0)).abs() < 1e-12);
        }
        assert_eq!(FactorSpec::corpus_grid().len(), 3 * 3 * 2 * 10);
    }

    #[test]
    fn root_range_enforced() {
        assert!(FactorSpec::new(100.0, ChordType::Single, Timbre::Pure, Tempo::Slow).is_err());
        assert!(FactorSpec::new(880.0, ChordType::Single, Timbre::Pure, Tempo::Slow).is_ok());
    }

    #[test]
    fn synthesized_peak_is_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for spec in FactorSpec::corpus_grid().iter().step_by(7) {
            let clip = spec.synthesize(16_000, 16_000, &mut rng).unwrap();
            assert!(clip.peak() <= 0.9 && clip.peak() >= 0.6);
            let (peak, bin) = spectrum_peak_hz(&clip);
            assert!((peak - spec.root_freq).abs() <= bin, "{spec}: {peak}");
        }
    }

    #[test]
    fn position_roundtrip() {
        for f in [110.0, 293.66, 880.0] {
            assert!((freq_from_position(pitch_position(f)) - f).abs() < 1e-9);
        }
    }
}
