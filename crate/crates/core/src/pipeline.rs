//! Stage orchestration shared by the command-line driver and the
//! end-to-end tests: embedding, the four training stages, generation,
//! chord-conditioning evaluation and the ablation harness.

use log::info;

use crate::align::{fuse_batch, train_alignment, AdapterStack, AlignSample, MaskPattern};
use crate::config::RunConfig;
use crate::corpus::CorpusItem;
use crate::encoders::{ChordType, Embedding, Encoder, Modality};
use crate::error::{Error, Result};
use crate::eval::{
    condition_score, fit_gaussian, frechet_distance, gaussian_kl, AblationArm, AblationRow, ChordFeatures,
    ChordOracle,
};
use crate::exec::Execution;
use crate::flowmatch::{
    sample_batch, train_generation_observed, train_joint, Conditioning, FlowConfig, FlowSample, JointHistory,
    VectorField, VectorFieldNet,
};
use crate::latent::{train_autoencoder, Autoencoder};
use crate::signal::{AudioClip, MelSpectrogram, Vocoder};
use crate::tensor::Tensor;

/// Seeds of the individual stages, all derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub autoencoder: u64,
    pub align_init: u64,
    pub align: u64,
    pub flow_init: u64,
    pub generation: u64,
    pub joint: u64,
    pub sampling: u64,
}

impl StageSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            autoencoder: seed,
            align_init: seed.wrapping_add(1),
            align: seed.wrapping_add(2),
            flow_init: seed.wrapping_add(3),
            generation: seed.wrapping_add(4),
            joint: seed.wrapping_add(5),
            sampling: seed.wrapping_add(6),
        }
    }
}

/// Encodes the conditions and music of every item.
pub fn embed_items(items: &[CorpusItem], encoder: &dyn Encoder, exec: Execution) -> Result<Vec<AlignSample>> {
    exec.try_map(items, |it| {
        Ok(AlignSample {
            conditions: [
                encoder.encode_condition(Modality::Image, &it.image)?.vector,
                encoder.encode_condition(Modality::Story, &it.story)?.vector,
                encoder.encode_condition(Modality::Caption, &it.caption)?.vector,
            ],
            target: encoder.encode_music(&it.clip)?.vector,
        })
    })
}

pub fn train_autoencoder_stage(items: &[CorpusItem], cfg: &RunConfig) -> Result<(Autoencoder, Vec<f64>)> {
    let mels: Vec<MelSpectrogram> = items.iter().map(|it| it.mel.clone()).collect();
    train_autoencoder(&mels, &cfg.autoencoder, StageSeeds::new(cfg.seed).autoencoder)
}

pub fn train_align_stage(data: &[AlignSample], cfg: &RunConfig) -> Result<(AdapterStack, Vec<f64>)> {
    let seeds = StageSeeds::new(cfg.seed);
    let mut adapters = AdapterStack::new(cfg.dim, seeds.align_init)?;
    let hist = train_alignment(data, &mut adapters, &cfg.align, seeds.align)?;
    Ok((adapters, hist))
}

/// Pairs each item's latent code with its embeddings.
pub fn flow_samples(ae: &Autoencoder, items: &[CorpusItem], embeds: &[AlignSample]) -> Result<Vec<FlowSample>> {
    if items.len() != embeds.len() {
        return Err(Error::input(format!("{} items but {} embeddings", items.len(), embeds.len())));
    }
    let mut out = Vec::with_capacity(items.len());
    for (chunk, emb) in items.chunks(256).zip(embeds.chunks(256)) {
        let mels: Vec<&MelSpectrogram> = chunk.iter().map(|it| &it.mel).collect();
        let z = ae.encode_batch(&mels)?;
        for (r, e) in emb.iter().enumerate() {
            out.push(FlowSample { z1: z.row(r).to_vec(), cond: e.clone() });
        }
    }
    Ok(out)
}

pub fn new_vector_field(d_z: usize, cfg: &RunConfig) -> Result<VectorFieldNet> {
    VectorFieldNet::new(d_z, cfg.dim, StageSeeds::new(cfg.seed).flow_init)
}

pub fn train_generation_stage(
    data: &[FlowSample],
    adapters: &AdapterStack,
    d_z: usize,
    cfg: &RunConfig,
) -> Result<(VectorFieldNet, Vec<f64>)> {
    let mut net = new_vector_field(d_z, cfg)?;
    let hist = train_generation_observed(
        data,
        &mut net,
        Conditioning::Fused(adapters),
        &cfg.flow,
        &cfg.generation,
        StageSeeds::new(cfg.seed).generation,
        &mut |_, _| Ok(()),
    )?;
    Ok((net, hist))
}

pub fn train_joint_stage(
    data: &[FlowSample],
    net: &mut VectorFieldNet,
    adapters: &mut AdapterStack,
    cfg: &RunConfig,
) -> Result<JointHistory> {
    train_joint(data, net, adapters, &cfg.flow, &cfg.joint, cfg.lambda, StageSeeds::new(cfg.seed).joint)
}

/// Latent sampling followed by decoding and phase reconstruction.
pub struct Synthesizer<'a> {
    pub ae: &'a Autoencoder,
    pub vocoder: Vocoder,
    pub flow: FlowConfig,
    pub griffin_lim_iters: usize,
    pub exec: Execution,
}

impl<'a> Synthesizer<'a> {
    pub fn new(ae: &'a Autoencoder, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            ae,
            vocoder: Vocoder::new(&ae.signal)?,
            flow: cfg.flow,
            griffin_lim_iters: cfg.griffin_lim_iters,
            exec: cfg.execution(),
        })
    }

    pub fn vocode(&self, mels: &[MelSpectrogram]) -> Result<Vec<AudioClip>> {
        self.exec.try_map(mels, |m| Ok(self.vocoder.reconstruct(m, self.griffin_lim_iters)?.clip))
    }

    pub fn decode(&self, latents: &[Vec<f64>]) -> Result<Vec<AudioClip>> {
        let mels = self.ae.decode_batch(&Tensor::from_rows(latents)?)?;
        self.vocode(&mels)
    }

    /// One clip per condition row; row `i` uses noise stream `(seed, i)`.
    pub fn generate(&self, field: &dyn VectorField, conds: &[Vec<f64>], seed: u64) -> Result<Vec<AudioClip>> {
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let z = sample_batch(conds, field, &self.flow, seed, self.exec)?;
        self.decode(&z)
    }

    /// Autoencoder round trip plus vocoding of real mels.
    pub fn reconstruct(&self, items: &[CorpusItem]) -> Result<Vec<AudioClip>> {
        let mels: Vec<&MelSpectrogram> = items.iter().map(|it| &it.mel).collect();
        let z = self.ae.encode_batch(&mels)?;
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|r| z.row(r).to_vec()).collect();
        self.decode(&rows)
    }
}

/// Fits the chord oracle's thresholds on autoencoder reconstructions of
/// labelled items, so the oracle sees the same vocoder artifacts as
/// generated audio.
pub fn calibrate_oracle(synth: &Synthesizer<'_>, items: &[CorpusItem]) -> Result<ChordOracle> {
    let base = ChordOracle::default();
    let clips = synth.reconstruct(items)?;
    let feats: Vec<ChordFeatures> = synth.exec.try_map(&clips, |c| base.features(c))?;
    let labelled: Vec<(ChordFeatures, ChordType)> = feats.into_iter().zip(items.iter().map(|it| it.spec.chord)).collect();
    let oracle = base.calibrate(&labelled)?;
    info!(
        "chord oracle calibrated on {} reconstructions: fifth {:.4}, ratio {:.4}, accuracy {:.3}",
        labelled.len(),
        oracle.fifth_threshold,
        oracle.ratio_threshold,
        oracle.accuracy(&labelled)
    );
    Ok(oracle)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetAccuracy {
    pub mask: MaskPattern,
    pub accuracy: f64,
    pub n: usize,
}

/// Chord-match rate of clips generated from each of the seven condition
/// subsets of `data`, judged against the items' true chords.
pub fn conditioning_accuracy(
    synth: &Synthesizer<'_>,
    field: &dyn VectorField,
    adapters: &AdapterStack,
    items: &[CorpusItem],
    data: &[AlignSample],
    oracle: &ChordOracle,
    seed: u64,
) -> Result<Vec<SubsetAccuracy>> {
    let mut out = Vec::with_capacity(7);
    for mask in MaskPattern::ALL {
        let conds = fuse_batch(adapters, data, mask)?;
        let clips = synth.generate(field, &conds, seed)?;
        let predicted: Vec<ChordType> = synth.exec.try_map(&clips, |c| oracle.classify(c))?;
        let hits = predicted.iter().zip(items).filter(|(p, it)| **p == it.spec.chord).count();
        let acc = hits as f64 / items.len() as f64;
        info!("subset {}: chord match {:.3}", mask.label(), acc);
        out.push(SubsetAccuracy { mask, accuracy: acc, n: items.len() });
    }
    Ok(out)
}

/// Inputs shared by every ablation arm.
pub struct AblationInputs<'a> {
    pub train: &'a [FlowSample],
    pub val: &'a [FlowSample],
    pub aligned: &'a AdapterStack,
    pub encoder: &'a dyn Encoder,
    pub synth: &'a Synthesizer<'a>,
}

/// Condition rows an arm's vector field sees on evaluation items, cycling
/// through the seven mask patterns for the fused arms.
pub fn arm_conditions(arm: AblationArm, data: &[AlignSample], aligned: &AdapterStack) -> Result<Vec<Vec<f64>>> {
    let adapters = match arm {
        AblationArm::Aligned => aligned.clone(),
        AblationArm::RawFeatures => AdapterStack::identity(aligned.dim),
        AblationArm::OracleMusicEmbedding => return Ok(data.iter().map(|s| s.target.clone()).collect()),
    };
    // Item i is conditioned on mask pattern i mod 7.
    let fused = MaskPattern::ALL.iter().map(|&m| fuse_batch(&adapters, data, m)).collect::<Result<Vec<_>>>()?;
    Ok((0..data.len()).map(|i| fused[i % MaskPattern::ALL.len()][i].clone()).collect())
}

/// Trains one vector field per arm from the same initialization, data
/// order and noise, and evaluates each every `eval_every` epochs (and at
/// the last epoch) on the validation split.
pub fn run_ablation(inputs: &AblationInputs<'_>, cfg: &RunConfig, seed: u64) -> Result<Vec<AblationRow>> {
    let seeds = StageSeeds::new(seed);
    let n_eval = cfg.ablation.eval_items.min(inputs.val.len());
    let val: Vec<AlignSample> = inputs.val[..n_eval].iter().map(|s| s.cond.clone()).collect();
    let references: Vec<Embedding> =
        val.iter().map(|s| Embedding::new(s.target.clone(), Modality::Music)).collect::<Result<_>>()?;
    let reference_stats = fit_gaussian(&val.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?;
    let identity = AdapterStack::identity(inputs.aligned.dim);
    let d_z = inputs.train[0].z1.len();
    let train_cfg = crate::flowmatch::TrainConfig { epochs: cfg.ablation.epochs, ..cfg.generation };

    let mut rows = Vec::new();
    for arm in AblationArm::ALL {
        let conds = arm_conditions(arm, &val, inputs.aligned)?;
        let conditioning = match arm {
            AblationArm::Aligned => Conditioning::Fused(inputs.aligned),
            AblationArm::RawFeatures => Conditioning::Fused(&identity),
            AblationArm::OracleMusicEmbedding => Conditioning::Music,
        };
        let mut net = VectorFieldNet::new(d_z, cfg.dim, seeds.flow_init)?;
        let mut evaluate = |epoch: usize, net: &VectorFieldNet| -> Result<()> {
            if !epoch.is_multiple_of(cfg.ablation.eval_every) && epoch != train_cfg.epochs {
                return Ok(());
            }
            let clips = inputs.synth.generate(net, &conds, seeds.sampling)?;
            let score = condition_score(&clips, &references, inputs.encoder, inputs.synth.exec)?;
            let generated: Vec<Vec<f64>> = inputs
                .synth
                .exec
                .try_map(&clips, |c| Ok::<_, Error>(inputs.encoder.encode_music(c)?.vector))?;
            let stats = fit_gaussian(&generated)?;
            let row = AblationRow {
                arm,
                epoch,
                frechet: frechet_distance(&stats, &reference_stats)?,
                kl: gaussian_kl(&stats, &reference_stats)?,
                condition_score: score,
            };
            info!(
                "ablation {arm} epoch {epoch}: condition score {:.4}, frechet {:.4}",
                row.condition_score, row.frechet
            );
            rows.push(row);
            Ok(())
        };
        train_generation_observed(
            inputs.train,
            &mut net,
            conditioning,
            &cfg.flow,
            &train_cfg,
            seeds.generation,
            &mut evaluate,
        )?;
    }
    Ok(rows)
}

/// Final-epoch condition score of each arm, in [`AblationArm::ALL`] order.
pub fn final_scores(rows: &[AblationRow]) -> Result<[f64; 3]> {
    let mut out = [f64::NAN; 3];
    for (slot, arm) in out.iter_mut().zip(AblationArm::ALL) {
        *slot = rows
            .iter()
            .filter(|r| r.arm == arm)
            .max_by_key(|r| r.epoch)
            .map(|r| r.condition_score)
            .ok_or_else(|| Error::input(format!("no rows for arm {arm}")))?;
    }
    Ok(out)
}
