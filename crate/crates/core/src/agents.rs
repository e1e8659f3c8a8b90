//! Four-agent annotation workflow: script writing, script review, caption
//! composition and music filtering, producing image/story/caption/music
//! quadruples.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::render::{parse_caption, parse_image, parse_story, render_caption, render_story, variant_for};
use crate::encoders::{
    cosine, factor_features, music_features, AcousticSignature, ChordType, EmbedReply, EmbedRequest, FactorSpec,
    Modality, Tempo,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::remote::RemoteClient;
use crate::signal::{wav_bytes, AudioClip};

pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AgentBackend {
    #[default]
    Mock,
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    crate::remote::DEFAULT_TIMEOUT.as_secs()
}

impl AgentBackend {
    fn client(&self) -> Result<Option<RemoteClient>> {
        match self {
            AgentBackend::Mock => Ok(None),
            AgentBackend::Remote { endpoint, timeout_secs } => {
                Ok(Some(RemoteClient::new(endpoint.clone(), Duration::from_secs(*timeout_secs))?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub review_threshold: f64,
    pub filter_threshold: f64,
    pub script_writer: AgentBackend,
    pub image_scorer: AgentBackend,
    pub caption_composer: AgentBackend,
    pub audio_scorer: AgentBackend,
    /// Fraction of images for which the mock script writer describes the
    /// wrong factors. Zero disables it.
    pub mock_corruption: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            review_threshold: DEFAULT_THRESHOLD,
            filter_threshold: DEFAULT_THRESHOLD,
            script_writer: AgentBackend::Mock,
            image_scorer: AgentBackend::Mock,
            caption_composer: AgentBackend::Mock,
            audio_scorer: AgentBackend::Mock,
            mock_corruption: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("review_threshold", self.review_threshold), ("filter_threshold", self.filter_threshold)] {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must lie in [-1, 1], got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mock_corruption) {
            return Err(Error::Config(format!("mock_corruption must lie in [0, 1], got {}", self.mock_corruption)));
        }
        Ok(())
    }
}

/// An image to annotate. `descriptor` is the image content handed to
/// backends; `source` groups rows in the statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub image_ref: String,
    pub descriptor: String,
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct PoolClip {
    pub music_ref: String,
    pub clip: AudioClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadruple {
    pub image_ref: String,
    pub story: String,
    pub caption: String,
    pub music_ref: String,
    pub review_score: f64,
    pub filter_score: f64,
}

pub trait ScriptWriter: Send + Sync {
    fn describe(&self, image: &ImageInput) -> Result<String>;
}

pub trait CaptionComposer: Send + Sync {
    fn compose(&self, image: &ImageInput, story: &str) -> Result<String>;
}

/// Embeds items of any modality into a space where cosine similarity is
/// meaningful across modalities.
pub trait Scorer: Send + Sync {
    fn embed_text(&self, modality: Modality, text: &str) -> Result<Vec<f64>>;
    fn embed_music(&self, clip: &AudioClip) -> Result<Vec<f64>>;
}

fn image_hash(image_ref: &str) -> u64 {
    let d = Sha256::digest(image_ref.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Factor-grounded script writer: renders the story template of the parsed
/// image factors. With corruption enabled, a hash-selected share of images
/// get a story whose factors are perturbed.
#[derive(Clone, Debug, Default)]
pub struct MockScriptWriter {
    pub corruption: f64,
}

impl MockScriptWriter {
    fn corrupt(spec: FactorSpec, kind: u64) -> FactorSpec {
        let flip_tempo = |s: FactorSpec| FactorSpec {
            tempo: match s.tempo {
                Tempo::Slow => Tempo::Fast,
                Tempo::Fast => Tempo::Slow,
            },
            ..s
        };
        let next_chord = |s: FactorSpec| FactorSpec { chord: ChordType::ALL[(s.chord.index() + 1) % 4], ..s };
        match kind % 4 {
            0 => flip_tempo(spec),
            1 => next_chord(spec),
            2 => next_chord(flip_tempo(spec)),
            _ => {
                let root = if spec.root_freq >= 440.0 { spec.root_freq / 2.0 } else { spec.root_freq * 2.0 };
                FactorSpec { root_freq: root, ..spec }
            }
        }
    }
}

impl ScriptWriter for MockScriptWriter {
    fn describe(&self, image: &ImageInput) -> Result<String> {
        let (id, mut spec) = parse_image(&image.descriptor)?;
        let h = image_hash(&image.image_ref);
        if ((h % 1_000_000) as f64) < self.corruption * 1e6 {
            spec = Self::corrupt(spec, h >> 32);
        }
        Ok(render_story(&spec, variant_for(&id)))
    }
}

/// Renders the caption template of the factors stated in the story.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockCaptionComposer;

impl CaptionComposer for MockCaptionComposer {
    fn compose(&self, image: &ImageInput, story: &str) -> Result<String> {
        let spec = parse_story(story)?;
        let (id, _) = parse_image(&image.descriptor)?;
        Ok(render_caption(&spec, (variant_for(&id) + 1) % 3))
    }
}

/// Scores in the synthetic encoder's shared factor-feature space: text and
/// image inputs map to their parsed factors, clips to features measured from
/// the acoustic signature.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockScorer;

impl Scorer for MockScorer {
    fn embed_text(&self, modality: Modality, text: &str) -> Result<Vec<f64>> {
        let spec = match modality {
            Modality::Image => parse_image(text)?.1,
            Modality::Story => parse_story(text)?,
            Modality::Caption => parse_caption(text)?,
            Modality::Music => return Err(Error::input("music is embedded with embed_music")),
        };
        Ok(factor_features(&spec))
    }

    fn embed_music(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        Ok(music_features(&AcousticSignature::measure(clip)))
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image_b64: String,
    story: Option<&'a str>,
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// `POST /caption {"image_b64", "story"} -> {"caption"}`. Script writing
/// sends `story: null` and reads the reply as the story.
#[derive(Clone, Debug)]
pub struct RemoteCaptioner {
    client: RemoteClient,
}

impl RemoteCaptioner {
    pub fn new(client: RemoteClient) -> Self {
        Self { client }
    }

    fn call(&self, image: &ImageInput, story: Option<&str>) -> Result<String> {
        let req = CaptionRequest { image_b64: b64(image.descriptor.as_bytes()), story };
        let reply: CaptionReply = self.client.post("/caption", &req)?;
        Ok(reply.caption)
    }
}

impl ScriptWriter for RemoteCaptioner {
    fn describe(&self, image: &ImageInput) -> Result<String> {
        self.call(image, None)
    }
}

impl CaptionComposer for RemoteCaptioner {
    fn compose(&self, image: &ImageInput, story: &str) -> Result<String> {
        self.call(image, Some(story))
    }
}

/// Scores through the encoder service's `/embed` endpoint.
#[derive(Clone, Debug)]
pub struct RemoteScorer {
    client: RemoteClient,
}

impl RemoteScorer {
    pub fn new(client: RemoteClient) -> Self {
        Self { client }
    }

    fn embed(&self, modality: Modality, payload: &[u8]) -> Result<Vec<f64>> {
        let req = EmbedRequest { modality: modality.name(), payload_b64: b64(payload) };
        let reply: EmbedReply = self.client.post("/embed", &req)?;
        if reply.vector.is_empty() {
            return Err(Error::Content(format!("{} returned an empty vector", self.client.endpoint())));
        }
        Ok(reply.vector)
    }
}

impl Scorer for RemoteScorer {
    fn embed_text(&self, modality: Modality, text: &str) -> Result<Vec<f64>> {
        self.embed(modality, text.as_bytes())
    }

    fn embed_music(&self, clip: &AudioClip) -> Result<Vec<f64>> {
        self.embed(Modality::Music, &wav_bytes(clip)?)
    }
}

pub struct AgentBackends {
    pub writer: Box<dyn ScriptWriter>,
    pub image_scorer: Box<dyn Scorer>,
    pub composer: Box<dyn CaptionComposer>,
    pub audio_scorer: Box<dyn Scorer>,
}

impl AgentBackends {
    pub fn mock(corruption: f64) -> Self {
        Self {
            writer: Box::new(MockScriptWriter { corruption }),
            image_scorer: Box::new(MockScorer),
            composer: Box::new(MockCaptionComposer),
            audio_scorer: Box::new(MockScorer),
        }
    }

    pub fn from_config(cfg: &AgentConfig) -> Result<Self> {
        cfg.validate()?;
        let writer: Box<dyn ScriptWriter> = match cfg.script_writer.client()? {
            None => Box::new(MockScriptWriter { corruption: cfg.mock_corruption }),
            Some(c) => Box::new(RemoteCaptioner::new(c)),
        };
        let composer: Box<dyn CaptionComposer> = match cfg.caption_composer.client()? {
            None => Box::new(MockCaptionComposer),
            Some(c) => Box::new(RemoteCaptioner::new(c)),
        };
        let scorer = |b: &AgentBackend| -> Result<Box<dyn Scorer>> {
            Ok(match b.client()? {
                None => Box::new(MockScorer),
                Some(c) => Box::new(RemoteScorer::new(c)),
            })
        };
        Ok(Self {
            writer,
            image_scorer: scorer(&cfg.image_scorer)?,
            composer,
            audio_scorer: scorer(&cfg.audio_scorer)?,
        })
    }
}

fn non_empty(text: String, what: &str) -> Result<String> {
    if text.trim().is_empty() {
        Err(Error::Content(what.to_string()))
    } else {
        Ok(text)
    }
}

fn finite_score(s: f64) -> Result<f64> {
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::Numeric(format!("similarity score {s}")))
    }
}

pub fn write_script(image: &ImageInput, backend: &dyn ScriptWriter) -> Result<String> {
    non_empty(backend.describe(image)?, "script writer")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Review {
    pub score: f64,
    pub accepted: bool,
}

/// Accepts when the image/story cosine is at least `threshold`.
pub fn review_script(image: &ImageInput, story: &str, scorer: &dyn Scorer, threshold: f64) -> Result<Review> {
    let a = scorer.embed_text(Modality::Image, &image.descriptor)?;
    let b = scorer.embed_text(Modality::Story, story)?;
    let score = finite_score(cosine(&a, &b))?;
    Ok(Review { score, accepted: score >= threshold })
}

pub fn compose_caption(image: &ImageInput, story: &str, backend: &dyn CaptionComposer) -> Result<String> {
    non_empty(backend.compose(image, story)?, "caption composer")
}

/// A music pool with its embeddings computed once.
pub struct ScoredPool<'a> {
    pub clips: &'a [PoolClip],
    pub embeddings: Vec<Vec<f64>>,
}

impl<'a> ScoredPool<'a> {
    pub fn new(clips: &'a [PoolClip], scorer: &dyn Scorer, exec: Execution) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::input("music pool is empty"));
        }
        let embeddings = exec.try_map(clips, |c| scorer.embed_music(&c.clip))?;
        Ok(Self { clips, embeddings })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub music_ref: String,
    pub score: f64,
}

/// Every pool score for a caption.
pub fn pool_scores(caption: &str, pool: &ScoredPool<'_>, scorer: &dyn Scorer) -> Result<Vec<f64>> {
    let c = scorer.embed_text(Modality::Caption, caption)?;
    pool.embeddings.iter().map(|e| finite_score(cosine(&c, e))).collect()
}

/// Selects the highest-scoring clip (lowest index on ties) when its score
/// is at least `threshold`.
pub fn filter_music(
    caption: &str,
    pool: &ScoredPool<'_>,
    scorer: &dyn Scorer,
    threshold: f64,
) -> Result<Option<Selection>> {
    let scores = pool_scores(caption, pool, scorer)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((scores[best] >= threshold).then(|| Selection {
        index: best,
        music_ref: pool.clips[best].music_ref.clone(),
        score: scores[best],
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Script,
    Review,
    Compose,
    Filter,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Script => "script",
            Stage::Review => "review",
            Stage::Compose => "compose",
            Stage::Filter => "filter",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Accepted { quadruple: Quadruple, pool_index: usize },
    /// Scored below threshold. Filter rejections carry the best pool score.
    Rejected { stage: Stage, score: f64 },
    Failed { stage: Stage, error: String },
}

impl Outcome {
    pub fn quadruple(&self) -> Option<&Quadruple> {
        match self {
            Outcome::Accepted { quadruple, .. } => Some(quadruple),
            _ => None,
        }
    }
}

fn annotate_one(
    image: &ImageInput,
    pool: &ScoredPool<'_>,
    agents: &AgentBackends,
    cfg: &AgentConfig,
) -> Outcome {
    let fail = |stage, e: Error| Outcome::Failed { stage, error: e.to_string() };
    let story = match write_script(image, agents.writer.as_ref()) {
        Ok(s) => s,
        Err(e) => return fail(Stage::Script, e),
    };
    let review = match review_script(image, &story, agents.image_scorer.as_ref(), cfg.review_threshold) {
        Ok(r) => r,
        Err(e) => return fail(Stage::Review, e),
    };
    if !review.accepted {
        return Outcome::Rejected { stage: Stage::Review, score: review.score };
    }
    let caption = match compose_caption(image, &story, agents.composer.as_ref()) {
        Ok(c) => c,
        Err(e) => return fail(Stage::Compose, e),
    };
    let scores = match pool_scores(&caption, pool, agents.audio_scorer.as_ref()) {
        Ok(s) => s,
        Err(e) => return fail(Stage::Filter, e),
    };
    let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    if scores[best] < cfg.filter_threshold {
        return Outcome::Rejected { stage: Stage::Filter, score: scores[best] };
    }
    Outcome::Accepted {
        quadruple: Quadruple {
            image_ref: image.image_ref.clone(),
            story,
            caption,
            music_ref: pool.clips[best].music_ref.clone(),
            review_score: review.score,
            filter_score: scores[best],
        },
        pool_index: best,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: String,
    pub count: usize,
    pub seconds: f64,
}

impl SourceStats {
    pub fn num_k(&self) -> f64 {
        self.count as f64 / 1000.0
    }

    pub fn dur_h(&self) -> f64 {
        self.seconds / 3600.0
    }
}

/// Accepted-sample counts and durations per source, sorted by source name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rows: Vec<SourceStats>,
}

impl DatasetStats {
    pub fn from_entries<'s>(entries: impl IntoIterator<Item = (&'s str, f64)>) -> Self {
        let mut map: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for (src, secs) in entries {
            let e = map.entry(src).or_default();
            e.0 += 1;
            e.1 += secs;
        }
        Self {
            rows: map
                .into_iter()
                .map(|(s, (count, seconds))| SourceStats { source: s.to_string(), count, seconds })
                .collect(),
        }
    }

    pub fn merge(&self, other: &DatasetStats) -> DatasetStats {
        let mut map: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        for r in self.rows.iter().chain(&other.rows) {
            let e = map.entry(r.source.clone()).or_default();
            e.0 += r.count;
            e.1 += r.seconds;
        }
        Self { rows: map.into_iter().map(|(source, (count, seconds))| SourceStats { source, count, seconds }).collect() }
    }

    pub fn total(&self) -> SourceStats {
        SourceStats {
            source: "Total".into(),
            count: self.rows.iter().map(|r| r.count).sum(),
            seconds: self.rows.iter().map(|r| r.seconds).sum(),
        }
    }

    /// Plain-text table with `Num (k)` and `Dur (h)` columns and a total row.
    pub fn table(&self) -> String {
        let total = self.total();
        let width = self.rows.iter().map(|r| r.source.len()).chain([6, total.source.len()]).max().unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}", "Source", "Num (k)", "Dur (h)");
        for r in self.rows.iter().chain(std::iter::once(&total)) {
            let _ = writeln!(out, "{:<width$}  {:>9.3}  {:>9.4}", r.source, r.num_k(), r.dur_h());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct WorkflowReport {
    /// One outcome per input image, in input order.
    pub outcomes: Vec<Outcome>,
    pub stats: DatasetStats,
}

impl WorkflowReport {
    pub fn quadruples(&self) -> Vec<Quadruple> {
        self.outcomes.iter().filter_map(|o| o.quadruple().cloned()).collect()
    }

    pub fn accepted(&self) -> usize {
        self.outcomes.iter().filter(|o| o.quadruple().is_some()).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted() as f64 / self.outcomes.len() as f64
    }
}

/// Runs the four agents over every image. Items are independent: a failing
/// item is recorded and the run continues. Pool clips may be matched to any
/// number of images.
pub fn run_workflow(
    images: &[ImageInput],
    pool: &[PoolClip],
    agents: &AgentBackends,
    cfg: &AgentConfig,
    exec: Execution,
) -> Result<WorkflowReport> {
    if images.is_empty() {
        return Err(Error::input("no images to annotate"));
    }
    cfg.validate()?;
    let scored = ScoredPool::new(pool, agents.audio_scorer.as_ref(), exec)?;
    let outcomes = exec.map(images, |img| annotate_one(img, &scored, agents, cfg));
    let mut entries = Vec::new();
    for (img, o) in images.iter().zip(&outcomes) {
        match o {
            Outcome::Accepted { pool_index, .. } => {
                entries.push((img.source.as_str(), pool[*pool_index].clip.duration_secs()));
            }
            Outcome::Rejected { stage, score } => {
                log::info!("{}: rejected at {stage} with score {score:.4}", img.image_ref)
            }
            Outcome::Failed { stage, error } => log::warn!("{}: failed at {stage}: {error}", img.image_ref),
        }
    }
    let stats = DatasetStats::from_entries(entries);
    Ok(WorkflowReport { outcomes, stats })
}

pub fn write_quadruples(path: &Path, quads: &[Quadruple]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in quads {
        writeln!(f, "{}", serde_json::to_string(q)?)?;
    }
    f.flush()?;
    Ok(())
}
