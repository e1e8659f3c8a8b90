//! Invertible text renderings of a [`FactorSpec`]: an image descriptor, a
//! story and a music caption. Every rendering parses back to its factors.

use sha2::{Digest, Sha256};

use super::factors::{freq_from_position, ChordType, FactorSpec, Tempo, Timbre};
use crate::error::{Error, Result};

fn palette(c: ChordType) -> &'static str {
    match c {
        ChordType::Single => "monochrome",
        ChordType::Major => "warm",
        ChordType::Minor => "cool",
        ChordType::Fifth => "earthy",
    }
}

fn texture(t: Timbre) -> &'static str {
    match t {
        Timbre::Pure => "smooth",
        Timbre::Bright => "glossy",
        Timbre::Soft => "misty",
    }
}

fn motion(t: Tempo) -> &'static str {
    match t {
        Tempo::Slow => "still",
        Tempo::Fast => "bustling",
    }
}

fn chord_word(c: ChordType) -> &'static str {
    match c {
        ChordType::Single => "single-note",
        ChordType::Major => "major-chord",
        ChordType::Minor => "minor-chord",
        ChordType::Fifth => "open-fifth",
    }
}

fn brightness(spec: &FactorSpec) -> f64 {
    spec.pitch_position()
}

fn lookup<T: Copy>(tokens: &[String], table: &[T], word: impl Fn(T) -> &'static str, what: &str) -> Result<T> {
    let hits: Vec<T> = table.iter().copied().filter(|&v| tokens.iter().any(|t| t == word(v))).collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::input(format!("no {what} word found"))),
        _ => Err(Error::input(format!("ambiguous {what} words"))),
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !(c.is_alphanumeric() || c == '-' || c == '.'))
                .trim_end_matches('.')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn number_after(tokens: &[String], key: &str) -> Result<f64> {
    let i = tokens
        .iter()
        .position(|t| t == key)
        .ok_or_else(|| Error::input(format!("missing `{key}`")))?;
    tokens
        .get(i + 1)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::input(format!("`{key}` is not followed by a number")))
}

/// Deterministic template choice keyed on an arbitrary string.
pub fn variant_for(key: &str) -> usize {
    Sha256::digest(key.as_bytes())[0] as usize % 3
}

pub fn render_image(id: &str, spec: &FactorSpec) -> String {
    format!(
        "image:id={id};palette={};texture={};motion={};brightness={:.4}",
        palette(spec.chord),
        texture(spec.timbre),
        motion(spec.tempo),
        brightness(spec)
    )
}

/// Parses an image descriptor into its id and factors.
pub fn parse_image(descriptor: &str) -> Result<(String, FactorSpec)> {
    let body = descriptor
        .trim()
        .strip_prefix("image:")
        .ok_or_else(|| Error::input(format!("not an image descriptor: {descriptor:?}")))?;
    let mut id = None;
    let mut toks = Vec::new();
    let mut bright = None;
    for field in body.split(';') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::input(format!("malformed field {field:?}")))?;
        match k {
            "id" => id = Some(v.to_string()),
            "brightness" => {
                bright = Some(v.parse::<f64>().map_err(|_| Error::input(format!("bad brightness {v:?}")))?)
            }
            "palette" | "texture" | "motion" => toks.push(v.to_string()),
            _ => return Err(Error::input(format!("unknown field {k:?}"))),
        }
    }
    let spec = FactorSpec::new(
        freq_from_position(bright.ok_or_else(|| Error::input("missing brightness"))?),
        lookup(&toks, &ChordType::ALL, palette, "palette")?,
        lookup(&toks, &Timbre::ALL, texture, "texture")?,
        lookup(&toks, &Tempo::ALL, motion, "motion")?,
    )?;
    Ok((id.ok_or_else(|| Error::input("missing id"))?, spec))
}

pub fn render_story(spec: &FactorSpec, variant: usize) -> String {
    let (p, t, m, b) = (palette(spec.chord), texture(spec.timbre), motion(spec.tempo), brightness(spec));
    match variant % 3 {
        0 => format!("The picture shows a {p} palette with {t} textures; the scene feels {m}, at brightness {b:.4}."),
        1 => format!("A {m} scene rendered in {p} colours, its surfaces {t}, brightness {b:.4}."),
        _ => format!("Under brightness {b:.4}, {t} forms drift through a {p}, {m} setting."),
    }
}

pub fn parse_story(story: &str) -> Result<FactorSpec> {
    let toks = tokens(story);
    FactorSpec::new(
        freq_from_position(number_after(&toks, "brightness")?),
        lookup(&toks, &ChordType::ALL, palette, "palette")?,
        lookup(&toks, &Timbre::ALL, texture, "texture")?,
        lookup(&toks, &Tempo::ALL, motion, "motion")?,
    )
}

pub fn render_caption(spec: &FactorSpec, variant: usize) -> String {
    let (c, t, m, f) = (chord_word(spec.chord), spec.timbre.name(), spec.tempo.name(), spec.root_freq);
    match variant % 3 {
        0 => format!("A {m} {c} piece with a {t} tone, rooted near {f:.2} Hz."),
        1 => {
            let mut cap = m.to_string();
            cap[..1].make_ascii_uppercase();
            format!("{cap} {c} music in a {t} timbre, centred around {f:.2} Hz.")
        }
        _ => format!("Background music: {t}, {m}, {c}, root {f:.2} Hz."),
    }
}

pub fn parse_caption(caption: &str) -> Result<FactorSpec> {
    let toks = tokens(caption);
    let hz = toks
        .iter()
        .position(|t| t == "hz")
        .filter(|&i| i > 0)
        .and_then(|i| toks[i - 1].parse::<f64>().ok())
        .ok_or_else(|| Error::input(format!("no root frequency in caption {caption:?}")))?;
    FactorSpec::new(
        hz,
        lookup(&toks, &ChordType::ALL, chord_word, "chord")?,
        lookup(&toks, &Timbre::ALL, Timbre::name, "timbre")?,
        lookup(&toks, &Tempo::ALL, Tempo::name, "tempo")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &FactorSpec, b: &FactorSpec, rel: f64) -> bool {
        a.chord == b.chord
            && a.timbre == b.timbre
            && a.tempo == b.tempo
            && (a.root_freq - b.root_freq).abs() / b.root_freq < rel
    }

    #[test]
    fn all_renderings_invert() {
        let mut specs = FactorSpec::corpus_grid();
        specs.push(FactorSpec::new(440.0, ChordType::Minor, Timbre::Soft, Tempo::Slow).unwrap());
        specs.push(FactorSpec::new(110.0, ChordType::Minor, Timbre::Bright, Tempo::Fast).unwrap());
        for (i, spec) in specs.iter().enumerate() {
            let id = format!("img-{i:06}");
            let (pid, ps) = parse_image(&render_image(&id, spec)).unwrap();
            assert_eq!(pid, id);
            assert!(close(&ps, spec, 1e-3), "{spec}");
            for v in 0..3 {
                assert!(close(&parse_story(&render_story(spec, v)).unwrap(), spec, 1e-3));
                assert!(close(&parse_caption(&render_caption(spec, v)).unwrap(), spec, 1e-4));
            }
        }
    }

    #[test]
    fn caption_wording() {
        let spec = FactorSpec::new(440.0, ChordType::Major, Timbre::Soft, Tempo::Slow).unwrap();
        assert_eq!(
            render_caption(&spec, 0),
            "A slow major-chord piece with a soft tone, rooted near 440.00 Hz."
        );
        assert!(render_caption(&spec, 1).starts_with("Slow "));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(parse_image("picture:id=1").is_err());
        assert!(parse_story("a nice day").is_err());
        assert!(parse_caption("fast music").is_err());
        assert!(parse_caption("fast slow single-note pure 300 Hz").is_err());
    }
}
