//! Objective metrics over embedding populations, the condition score, and a
//! spectral chord classifier for generated audio.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, ChordType, Embedding, Encoder};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::signal::{magnitude_spectrum, AudioClip};

/// Diagonal loading for near-singular covariances in the KL.
pub const KL_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Builds stats from explicit moments; for closed-form checks.
    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::dim(format!("covariance of {} entries for dimension {d}", cov.len())));
        }
        if n < 2 {
            return Err(Error::input("gaussian stats need n >= 2"));
        }
        Ok(Self { mean: DVector::from_vec(mean), cov: DMatrix::from_row_slice(d, d, &cov), n })
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::input(format!("need at least 2 samples to fit a gaussian, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dim("samples differ in width"));
    }
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut centred = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        for j in 0..d {
            centred[(i, j)] = r[j] - mean[j];
        }
    }
    let mut cov = centred.transpose() * &centred / (n - 1) as f64;
    // Exact symmetry.
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

fn check_dims(a: &GaussianStats, b: &GaussianStats) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("gaussians of dimension {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|μa − μb|² + tr(Σa + Σb − 2(ΣaΣb)^{1/2})`.
///
/// The cross term is the sum of singular values of `Σa^{1/2} Σb^{1/2}`,
/// which equals `tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})` without taking square
/// roots of round-off-sized eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    check_dims(a, b)?;
    let dm = (&a.mean - &b.mean).norm_squared();
    let cross: f64 = (sym_sqrt(&a.cov) * sym_sqrt(&b.cov)).singular_values().sum();
    Ok((dm + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Eigendecomposition with a ridge added when the smallest eigenvalue is
/// below [`KL_RIDGE`].
fn regularized(cov: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let eig = SymmetricEigen::new(cov.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < KL_RIDGE {
        let d = cov.nrows();
        SymmetricEigen::new(cov + DMatrix::identity(d, d) * KL_RIDGE)
    } else {
        eig
    }
}

/// `KL(N_a ‖ N_b)` in closed form.
pub fn gaussian_kl(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    check_dims(a, b)?;
    let k = a.dim() as f64;
    let ea = regularized(&a.cov);
    let eb = regularized(&b.cov);
    let inv_vals = eb.eigenvalues.map(|l| 1.0 / l);
    let b_inv = &eb.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eb.eigenvectors.transpose();
    let a_cov = &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues) * ea.eigenvectors.transpose();
    let diff = &b.mean - &a.mean;
    let trace = (&b_inv * a_cov).trace();
    let maha = (diff.transpose() * &b_inv * &diff)[(0, 0)];
    let logdet_a: f64 = ea.eigenvalues.iter().map(|l| l.ln()).sum();
    let logdet_b: f64 = eb.eigenvalues.iter().map(|l| l.ln()).sum();
    Ok((0.5 * (trace + maha - k + logdet_b - logdet_a)).max(0.0))
}

/// Mean cosine between each generated clip's music embedding and its
/// reference embedding.
pub fn condition_score(
    generated: &[AudioClip],
    references: &[Embedding],
    encoder: &dyn Encoder,
    exec: Execution,
) -> Result<f64> {
    if generated.len() != references.len() {
        return Err(Error::input(format!(
            "{} generated clips for {} references",
            generated.len(),
            references.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::input("nothing to score"));
    }
    let embedded = exec.try_map(generated, |c| encoder.encode_music(c))?;
    Ok(embedded.iter().zip(references).map(|(g, r)| g.cosine(r)).sum::<f64>() / generated.len() as f64)
}

/// Mean cosine of paired vectors.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::input("mean_cosine needs two non-empty lists of equal length"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64)
}

/// Whole-clip spectral measurements used for chord classification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChordFeatures {
    pub root_hz: f64,
    /// Strongest peak a major third above the root, relative to the root.
    pub third: f64,
    /// Strongest peak a fifth above the root, relative to the root.
    pub fifth: f64,
}

/// Classifies chords from a Hann-windowed whole-clip FFT. The root is the
/// lowest local maximum in the root band that reaches a fraction of the
/// band's strongest peak; the chord follows from the relative heights of
/// the third and fifth windows above it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChordOracle {
    /// Below this fifth level the clip is a single tone.
    pub fifth_threshold: f64,
    /// Below this third/fifth ratio the clip is a bare fifth.
    pub ratio_threshold: f64,
    pub min_fft: usize,
    pub root_band: (f64, f64),
    pub root_fraction: f64,
}

impl Default for ChordOracle {
    fn default() -> Self {
        Self {
            fifth_threshold: 0.14,
            ratio_threshold: 0.4,
            min_fft: 16_384,
            root_band: (260.0, 900.0),
            root_fraction: 0.35,
        }
    }
}

const THIRD_WINDOW: (f64, f64) = (1.16, 1.36);
const FIFTH_WINDOW: (f64, f64) = (1.38, 1.62);

impl ChordOracle {
    pub fn features(&self, clip: &AudioClip) -> Result<ChordFeatures> {
        let (m, bin) = magnitude_spectrum(clip.samples(), clip.sample_rate(), self.min_fft);
        let last = m.len() - 2;
        let idx = |hz: f64| ((hz / bin).round() as usize).clamp(1, last);
        let (lo, hi) = (idx(self.root_band.0), idx(self.root_band.1));
        let kmax = (lo..=hi).fold(lo, |b, i| if m[i] > m[b] { i } else { b });
        if m[kmax] <= 0.0 {
            return Err(Error::input("silent clip has no root"));
        }
        let is_peak = |i: usize| m[i] >= m[i - 1] && m[i] >= m[i + 1];
        let k = (lo..=hi).find(|&i| m[i] >= self.root_fraction * m[kmax] && is_peak(i)).unwrap_or(kmax);
        let root = k as f64 * bin;
        let band = |w: (f64, f64)| {
            (idx(root * w.0)..=idx(root * w.1)).map(|i| m[i]).fold(0.0, f64::max) / m[k]
        };
        Ok(ChordFeatures { root_hz: root, third: band(THIRD_WINDOW), fifth: band(FIFTH_WINDOW) })
    }

    pub fn classify_features(&self, f: &ChordFeatures) -> ChordType {
        if f.fifth < self.fifth_threshold {
            ChordType::Single
        } else if f.third / f.fifth < self.ratio_threshold {
            ChordType::Fifth
        } else {
            ChordType::Major
        }
    }

    pub fn classify(&self, clip: &AudioClip) -> Result<ChordType> {
        Ok(self.classify_features(&self.features(clip)?))
    }

    /// Picks both thresholds by accuracy on labelled features, taking the
    /// middle of the best interval. Labels outside single/fifth/major are
    /// ignored.
    pub fn calibrate(&self, labelled: &[(ChordFeatures, ChordType)]) -> Result<Self> {
        let tonal: Vec<(f64, bool)> = labelled
            .iter()
            .filter(|(_, c)| matches!(c, ChordType::Single | ChordType::Fifth | ChordType::Major))
            .map(|(f, c)| (f.fifth, *c != ChordType::Single))
            .collect();
        let fifth_threshold = best_threshold(&tonal)?;
        let chords: Vec<(f64, bool)> = labelled
            .iter()
            .filter(|(f, c)| matches!(c, ChordType::Fifth | ChordType::Major) && f.fifth >= fifth_threshold)
            .map(|(f, c)| (f.third / f.fifth, *c == ChordType::Major))
            .collect();
        let ratio_threshold = best_threshold(&chords)?;
        Ok(Self { fifth_threshold, ratio_threshold, ..*self })
    }

    pub fn accuracy(&self, labelled: &[(ChordFeatures, ChordType)]) -> f64 {
        if labelled.is_empty() {
            return 0.0;
        }
        labelled.iter().filter(|(f, c)| self.classify_features(f) == *c).count() as f64 / labelled.len() as f64
    }
}

/// Threshold `τ` maximizing the accuracy of `value >= τ ⇔ label`. Among
/// equally accurate cut points, the first contiguous run wins and `τ` is
/// placed at its middle.
pub fn best_threshold(samples: &[(f64, bool)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("no samples to calibrate on"));
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = s.len();
    // Cut k predicts s[..k] negative and s[k..] positive.
    let mut correct = s.iter().filter(|x| x.1).count();
    let mut cuts = vec![(0usize, correct)];
    for k in 1..=n {
        correct = if s[k - 1].1 { correct - 1 } else { correct + 1 };
        if k == n || s[k].0 != s[k - 1].0 {
            cuts.push((k, correct));
        }
    }
    let best = cuts.iter().map(|c| c.1).max().unwrap_or(0);
    let first = cuts.iter().position(|c| c.1 == best).unwrap_or(0);
    let last = first + cuts[first..].iter().take_while(|c| c.1 == best).count() - 1;
    let edge = |k: usize| -> f64 {
        if k == 0 {
            s[0].0 - 1.0
        } else if k == n {
            s[n - 1].0 + 1.0
        } else {
            0.5 * (s[k - 1].0 + s[k].0)
        }
    };
    Ok(0.5 * (edge(cuts[first].0) + edge(cuts[last].0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Aligned,
    RawFeatures,
    OracleMusicEmbedding,
}

impl AblationArm {
    pub const ALL: [AblationArm; 3] = [AblationArm::Aligned, AblationArm::RawFeatures, AblationArm::OracleMusicEmbedding];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Aligned => "aligned",
            AblationArm::RawFeatures => "raw_features",
            AblationArm::OracleMusicEmbedding => "oracle_music_embedding",
        }
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub epoch: usize,
    pub frechet: f64,
    pub kl: f64,
    pub condition_score: f64,
}

pub const ABLATION_CSV_HEADER: &str = "arm,epoch,frechet,kl,condition_score";

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{ABLATION_CSV_HEADER}")?;
    for r in rows {
        writeln!(f, "{},{},{:.6},{:.6},{:.6}", r.arm, r.epoch, r.frechet, r.kl, r.condition_score)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats::from_moments(vec![mean], vec![var], 10).unwrap()
    }

    #[test]
    fn unbiased_fit() {
        let g = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(g.mean[0], 1.0);
        assert_eq!(g.cov[(0, 0)], 2.0);
        let same = fit_gaussian(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(same.cov.iter().all(|&c| c == 0.0));
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        assert!((frechet_distance(&one_d(0.0, 1.0), &one_d(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-9);
        assert!((frechet_distance(&one_d(0.0, 1.0), &one_d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(frechet_distance(&one_d(0.5, 2.0), &one_d(0.5, 2.0)).unwrap(), 0.0);
        let two = GaussianStats::from_moments(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0], 3).unwrap();
        assert!(matches!(frechet_distance(&one_d(0.0, 1.0), &two), Err(Error::Dimension(_))));
    }

    #[test]
    fn kl_closed_forms() {
        assert!((gaussian_kl(&one_d(0.0, 1.0), &one_d(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-9);
        assert!(gaussian_kl(&one_d(0.2, 3.0), &one_d(0.2, 3.0)).unwrap().abs() < 1e-12);
        let ab = gaussian_kl(&one_d(0.0, 1.0), &one_d(0.0, 4.0)).unwrap();
        let ba = gaussian_kl(&one_d(0.0, 4.0), &one_d(0.0, 1.0)).unwrap();
        assert!((ab - ba).abs() > 0.1);
        // 0.5 (1/4 + 0 - 1 + ln 4)
        assert!((ab - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn threshold_search_takes_the_middle() {
        let s = [(0.1, false), (0.2, false), (0.5, true), (0.9, true)];
        assert!((best_threshold(&s).unwrap() - 0.35).abs() < 1e-12);
        // One overlap: best accuracy 3/4 on either side of the overlap.
        let t = best_threshold(&[(0.1, false), (0.3, true), (0.4, false), (0.8, true)]).unwrap();
        let acc = |t: f64| [(0.1, false), (0.3, true), (0.4, false), (0.8, true)].iter().filter(|x| (x.0 >= t) == x.1).count();
        assert_eq!(acc(t), 3);
    }

    #[test]
    fn oracle_separates_clean_chords() {
        use crate::encoders::{FactorSpec, Tempo, Timbre};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let o = ChordOracle::default();
        for chord in [ChordType::Single, ChordType::Fifth, ChordType::Major] {
            for root in [293.66, 466.16, 830.61] {
                for timbre in Timbre::ALL {
                    let spec = FactorSpec::new(root, chord, timbre, Tempo::Slow).unwrap();
                    let clip = spec.synthesize(16_000, 16_000, &mut rng).unwrap();
                    let f = o.features(&clip).unwrap();
                    assert!((f.root_hz - root).abs() / root < 0.01, "{spec}: {f:?}");
                    assert_eq!(o.classify_features(&f), chord, "{spec}: {f:?}");
                }
            }
        }
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let row = AblationRow { arm: AblationArm::RawFeatures, epoch: 50, frechet: 1.0, kl: 0.5, condition_score: 0.25 };
        write_ablation_csv(&[row], &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "arm,epoch,frechet,kl,condition_score\nraw_features,50,1.000000,0.500000,0.250000\n");
    }
}
