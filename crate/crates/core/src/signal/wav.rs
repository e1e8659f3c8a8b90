use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

fn spec(sample_rate: u32) -> WavSpec {
    WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int }
}

fn to_pcm(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16
}

/// Encodes a clip as a 16-bit mono PCM WAV file image.
pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut buf, spec(clip.sample_rate()))?;
        for &s in clip.samples() {
            w.write_sample(to_pcm(s))?;
        }
        w.finalize()?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    std::fs::write(path, wav_bytes(clip)?)?;
    Ok(())
}

/// Reads 16-bit mono PCM.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut r = WavReader::open(path)?;
    let s = r.spec();
    if s.channels != 1 || s.bits_per_sample != 16 || s.sample_format != SampleFormat::Int {
        return Err(Error::input(format!(
            "{}: expected 16-bit mono PCM, found {} ch / {} bit",
            path.display(),
            s.channels,
            s.bits_per_sample
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|v| v.map(|x| x as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::clipped(samples, s.sample_rate)
}
