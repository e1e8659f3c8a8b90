//! Synthetic corpus: factor-grounded clips with their mels and renderings.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::render::{render_caption, render_image, render_story, variant_for};
use crate::encoders::FactorSpec;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::signal::{mel_spectrogram, write_wav, AudioClip, MelSpectrogram, SignalConfig};

pub const CLIP_SECONDS: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub id: String,
    pub spec: FactorSpec,
    pub image: String,
    pub story: String,
    pub caption: String,
    pub clip: AudioClip,
    pub mel: MelSpectrogram,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub spec: FactorSpec,
    pub image: String,
    pub story: String,
    pub caption: String,
    pub music_ref: String,
}

/// Per-item RNG derived from the corpus seed and item index, so items can be
/// generated in any order.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"corpus-item");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn make_item(prefix: &str, index: usize, seed: u64, cfg: &SignalConfig) -> Result<CorpusItem> {
    let mut rng = item_rng(seed, index);
    let spec = FactorSpec::sample(&mut rng);
    let n = (CLIP_SECONDS * cfg.sample_rate as f64).round() as usize;
    let clip = spec.synthesize(cfg.sample_rate, n, &mut rng)?;
    let mel = mel_spectrogram(&clip, cfg)?;
    let id = format!("{prefix}-{index:06}");
    let image = render_image(&id, &spec);
    let v = variant_for(&id);
    Ok(CorpusItem {
        story: render_story(&spec, v),
        caption: render_caption(&spec, (v + 1) % 3),
        image,
        id,
        spec,
        clip,
        mel,
    })
}

/// Generates `n` items. Output depends only on `(prefix, n, seed, cfg)`.
pub fn generate(prefix: &str, n: usize, seed: u64, cfg: &SignalConfig, exec: Execution) -> Result<Vec<CorpusItem>> {
    if n == 0 {
        return Err(Error::input("corpus size must be at least 1"));
    }
    cfg.validate()?;
    let idx: Vec<usize> = (0..n).collect();
    exec.try_map(&idx, |&i| make_item(prefix, i, seed, cfg))
}

/// Train and validation splits drawn with independent seeds.
pub fn splits(
    n_train: usize,
    n_val: usize,
    seed: u64,
    cfg: &SignalConfig,
    exec: Execution,
) -> Result<(Vec<CorpusItem>, Vec<CorpusItem>)> {
    Ok((
        generate("train", n_train, seed, cfg, exec)?,
        generate("val", n_val, seed ^ 0x7a1d_a7e5, cfg, exec)?,
    ))
}

/// Writes `<id>.wav` per item plus `manifest.jsonl` into `dir`.
pub fn write(items: &[CorpusItem], dir: &Path) -> Result<Vec<ManifestRow>> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(items.len());
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    for it in items {
        let wav = format!("{}.wav", it.id);
        write_wav(&dir.join(&wav), &it.clip)?;
        let row = ManifestRow {
            id: it.id.clone(),
            spec: it.spec,
            image: it.image.clone(),
            story: it.story.clone(),
            caption: it.caption.clone(),
            music_ref: wav,
        };
        writeln!(manifest, "{}", serde_json::to_string(&row)?)?;
        rows.push(row);
    }
    manifest.flush()?;
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// Reads a corpus written by [`write`], recomputing mels from the WAVs.
pub fn load(dir: &Path, cfg: &SignalConfig, exec: Execution) -> Result<Vec<CorpusItem>> {
    let rows = read_manifest(&dir.join("manifest.jsonl"))?;
    if rows.is_empty() {
        return Err(Error::input(format!("{} lists no items", dir.join("manifest.jsonl").display())));
    }
    exec.try_map(&rows, |row| {
        let clip = crate::signal::read_wav(&dir.join(&row.music_ref))?;
        if clip.sample_rate() != cfg.sample_rate {
            return Err(Error::Config(format!(
                "{} is sampled at {} Hz, configuration expects {}",
                row.music_ref,
                clip.sample_rate(),
                cfg.sample_rate
            )));
        }
        let mel = mel_spectrogram(&clip, cfg)?;
        Ok(CorpusItem {
            id: row.id.clone(),
            spec: row.spec,
            image: row.image.clone(),
            story: row.story.clone(),
            caption: row.caption.clone(),
            clip,
            mel,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::spectrum_peak_hz;

    #[test]
    fn deterministic_in_any_execution_mode() {
        let cfg = SignalConfig::default();
        let a = generate("t", 12, 9, &cfg, Execution::Sequential).unwrap();
        let b = generate("t", 12, 9, &cfg, Execution::Parallel).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.caption, y.caption);
        }
        assert_eq!(a[3].id, "t-000003");
    }

    #[test]
    fn peaks_match_roots() {
        let items = generate("p", 30, 1, &SignalConfig::default(), Execution::Parallel).unwrap();
        for it in &items {
            let (peak, bin) = spectrum_peak_hz(&it.clip);
            assert!((peak - it.spec.root_freq).abs() <= bin, "{}: {peak}", it.spec);
            assert_eq!(it.mel.shape(), (61, 64));
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let items = generate("m", 5, 2, &SignalConfig::default(), Execution::Sequential).unwrap();
        let rows = write(&items, dir.path()).unwrap();
        assert_eq!(read_manifest(&dir.path().join("manifest.jsonl")).unwrap(), rows);
        assert!(dir.path().join("m-000004.wav").exists());
    }
}
