use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::factors::{pitch_position, ChordType, FactorSpec, Tempo, Timbre};
use super::render::{parse_caption, parse_image, parse_story};
use super::signature::{AcousticSignature, Thresholds};
use super::{l2_normalize, Embedding, Encoder, Modality};
use crate::error::{Error, Result};
use crate::signal::AudioClip;

const PITCH_BUMPS: usize = 20;
const BUMP_WIDTH: f64 = 0.03;

/// Width of the factor feature vectors both sides of the synthetic encoder
/// are built from: pitch bumps, chord, timbre, tempo and an atonality slot.
pub const FEATURE_DIM: usize = PITCH_BUMPS + 4 + 3 + 1 + 1;

fn pitch_bumps(p: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..PITCH_BUMPS)
        .map(|j| {
            let c = j as f64 / (PITCH_BUMPS - 1) as f64;
            (-(p - c).powi(2) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
        })
        .collect();
    l2_normalize(&mut v);
    v
}

fn centred_one_hot(index: usize, k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| if i == index { 1.0 } else { 0.0 } - 1.0 / k as f64)
}

fn blocks(p: f64, chord: ChordType, timbre: Timbre, tempo: f64) -> Vec<f64> {
    let mut v = pitch_bumps(p);
    v.extend(centred_one_hot(chord.index(), 4));
    v.extend(centred_one_hot(timbre.index(), 3));
    v.push(tempo);
    v
}

/// Unit-norm feature vector of known factors.
pub fn factor_features(spec: &FactorSpec) -> Vec<f64> {
    let tempo = match spec.tempo {
        Tempo::Slow => -1.0,
        Tempo::Fast => 1.0,
    };
    let mut v = blocks(spec.pitch_position(), spec.chord, spec.timbre, tempo);
    v.push(0.0);
    l2_normalize(&mut v);
    v
}

/// Feature vector of a measured clip: the factor blocks estimated from the
/// signature, gated by tonality, plus an atonality slot that absorbs noise.
pub fn music_features(sig: &AcousticSignature) -> Vec<f64> {
    let g = sig.tonality;
    let tempo = ((sig.modulation_hz - 4.0) / 2.0).clamp(-1.0, 1.0);
    let est = sig.estimate(Thresholds::default());
    let mut v: Vec<f64> = blocks(pitch_position(sig.peak_hz.max(1.0)), est.chord, est.timbre, tempo)
        .into_iter()
        .map(|x| g * x)
        .collect();
    v.push((1.0 - g) * 3.0);
    v
}

/// Factor-grounded stand-in for pretrained encoders.
///
/// Conditions are parsed back to their factors, embedded as
/// `tanh(A_m · f) + noise` with a frozen Gaussian `A_m` per modality and
/// item-seeded noise. Music goes through the acoustic signature and a frozen
/// projection with orthonormal columns, then is L2-normalized.
#[derive(Clone, Debug)]
pub struct SyntheticEncoder {
    dim: usize,
    seed: u64,
    noise_sigma: f64,
    /// `[image, story, caption]`, each `dim × FEATURE_DIM` row-major.
    condition_maps: [Vec<f64>; 3],
    /// `dim × FEATURE_DIM`, orthonormal columns.
    music_basis: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram-Schmidt over the columns of a row-major `rows × cols` matrix.
fn orthonormal_columns(mut m: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
                for r in 0..rows {
                    m[r * cols + j] -= dot * m[r * cols + i];
                }
            }
        }
        let norm = (0..rows).map(|r| m[r * cols + j].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            m[r * cols + j] /= norm;
        }
    }
    m
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len()).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

impl SyntheticEncoder {
    pub const DEFAULT_NOISE: f64 = 0.05;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < FEATURE_DIM + 3 {
            return Err(Error::Config(format!(
                "synthetic encoder width {dim} is below the minimum {}",
                FEATURE_DIM + 3
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e0c0_de00_0001);
        let condition_maps = [
            gaussian_matrix(dim, FEATURE_DIM, &mut rng),
            gaussian_matrix(dim, FEATURE_DIM, &mut rng),
            gaussian_matrix(dim, FEATURE_DIM, &mut rng),
        ];
        let music_basis = orthonormal_columns(gaussian_matrix(dim, FEATURE_DIM, &mut rng), dim, FEATURE_DIM);
        Ok(Self { dim, seed, noise_sigma: Self::DEFAULT_NOISE, condition_maps, music_basis })
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parse(modality: Modality, item: &str) -> Result<FactorSpec> {
        match modality {
            Modality::Image => parse_image(item).map(|(_, s)| s),
            Modality::Story => parse_story(item),
            Modality::Caption => parse_caption(item),
            Modality::Music => Err(Error::input("music is not a condition modality")),
        }
    }

    /// Condition embedding of known factors, with noise keyed on `key`.
    pub fn embed_factors(&self, modality: Modality, spec: &FactorSpec, key: &str) -> Result<Embedding> {
        let idx = Modality::CONDITIONS
            .iter()
            .position(|&m| m == modality)
            .ok_or_else(|| Error::input(format!("{modality} is not a condition modality")))?;
        let f = factor_features(spec);
        let mut v: Vec<f64> = matvec(&self.condition_maps[idx], &f).into_iter().map(f64::tanh).collect();
        if self.noise_sigma > 0.0 {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(modality.name().as_bytes());
            h.update([0u8]);
            h.update(key.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += self.noise_sigma * z;
            }
        }
        Embedding::new(v, modality)
    }

    /// Music embedding of a feature vector (see [`music_features`]).
    pub fn embed_music_features(&self, features: &[f64]) -> Result<Embedding> {
        if features.len() != FEATURE_DIM {
            return Err(Error::dim(format!("{} music features, expected {FEATURE_DIM}", features.len())));
        }
        let mut v = matvec(&self.music_basis, features);
        l2_normalize(&mut v);
        Embedding::new(v, Modality::Music)
    }
}

impl Encoder for SyntheticEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_music(&self, clip: &AudioClip) -> Result<Embedding> {
        self.embed_music_features(&music_features(&AcousticSignature::measure(clip)))
    }

    fn encode_condition(&self, modality: Modality, item: &str) -> Result<Embedding> {
        let spec = Self::parse(modality, item)?;
        self.embed_factors(modality, &spec, item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::render::{render_caption, render_image, render_story};
    use crate::encoders::{cosine, Encoder};
    use rand::Rng;

    fn enc() -> SyntheticEncoder {
        SyntheticEncoder::new(64, 7).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        let e = enc();
        for i in 0..FEATURE_DIM {
            for j in 0..FEATURE_DIM {
                let dot: f64 = (0..64)
                    .map(|r| e.music_basis[r * FEATURE_DIM + i] * e.music_basis[r * FEATURE_DIM + j])
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_factors_same_music_embedding() {
        let e = enc();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in FactorSpec::corpus_grid().iter().step_by(11) {
            let a = e.encode_music(&spec.synthesize(16_000, 16_000, &mut rng).unwrap()).unwrap();
            let b = e.encode_music(&spec.synthesize(16_000, 16_000, &mut rng).unwrap()).unwrap();
            assert!(a.cosine(&b) > 0.99, "{spec}: {}", a.cosine(&b));
            let norm = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn octave_apart_is_dissimilar() {
        let e = enc();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lo = FactorSpec::new(220.0, ChordType::Major, Timbre::Soft, Tempo::Fast).unwrap();
        let hi = FactorSpec { root_freq: 440.0, ..lo };
        let a = e.encode_music(&lo.synthesize(16_000, 16_000, &mut rng).unwrap()).unwrap();
        let b = e.encode_music(&hi.synthesize(16_000, 16_000, &mut rng).unwrap()).unwrap();
        assert!(a.cosine(&b) < 0.9, "{}", a.cosine(&b));
    }

    #[test]
    fn condition_spaces_differ_but_are_deterministic() {
        let e = enc();
        let spec = FactorSpec::new(523.25, ChordType::Fifth, Timbre::Bright, Tempo::Slow).unwrap();
        let img = e.encode_image(&render_image("img-1", &spec)).unwrap();
        let cap = e.encode_caption(&render_caption(&spec, 0)).unwrap();
        let sto = e.encode_story(&render_story(&spec, 1)).unwrap();
        assert_eq!(img.dim(), 64);
        assert!(img.cosine(&cap) < 0.99);
        assert!(img.cosine(&sto) < 0.99);
        assert_eq!(img, e.encode_image(&render_image("img-1", &spec)).unwrap());
        assert!(e.encode_caption("nothing to see").is_err());
    }

    #[test]
    fn noise_clips_sit_in_the_atonal_direction() {
        let e = enc();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = FactorSpec::new(440.0, ChordType::Single, Timbre::Pure, Tempo::Slow).unwrap();
        let tone = e.encode_music(&spec.synthesize(16_000, 16_000, &mut rng).unwrap()).unwrap();
        let noise: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let n = e.encode_music(&AudioClip::new(noise, 16_000).unwrap()).unwrap();
        assert!(tone.cosine(&n).abs() < 0.2);
        assert!(cosine(&factor_features(&spec), &music_features(&AcousticSignature::measure(
            &spec.synthesize(16_000, 16_000, &mut rng).unwrap()
        ))) > 0.99);
    }

    #[test]
    fn narrow_width_rejected() {
        assert!(matches!(SyntheticEncoder::new(16, 0), Err(Error::Config(_))));
    }
}
