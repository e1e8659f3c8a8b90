//! Condition adapters, fusion by averaging, the alignment loss and random
//! condition masking.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, Modality};
use crate::error::{ensure_finite, Error, Result};
use crate::tensor::{Activation, AdamW, AdamWConfig, Mlp, Module, Parameter, Tape, Tensor, Var};

/// Embedded condition triple; at least one entry is present.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub image: Option<Embedding>,
    pub story: Option<Embedding>,
    pub caption: Option<Embedding>,
}

impl ConditionSet {
    pub fn new(image: Option<Embedding>, story: Option<Embedding>, caption: Option<Embedding>) -> Result<Self> {
        let set = Self { image, story, caption };
        set.validate()?;
        Ok(set)
    }

    pub fn full(image: Embedding, story: Embedding, caption: Embedding) -> Self {
        Self { image: Some(image), story: Some(story), caption: Some(caption) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::contract("a condition set needs at least one condition"));
        }
        let mut dim = None;
        for m in Modality::CONDITIONS {
            if let Some(e) = self.get(m) {
                if e.modality != m {
                    return Err(Error::contract(format!("{} embedding stored in the {m} slot", e.modality)));
                }
                if *dim.get_or_insert(e.dim()) != e.dim() {
                    return Err(Error::dim("condition embeddings differ in width"));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, m: Modality) -> Option<&Embedding> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Story => self.story.as_ref(),
            Modality::Caption => self.caption.as_ref(),
            Modality::Music => None,
        }
    }

    pub fn count(&self) -> usize {
        Modality::CONDITIONS.iter().filter(|&&m| self.get(m).is_some()).count()
    }

    pub fn mask(&self) -> MaskPattern {
        MaskPattern {
            keep_image: self.image.is_some(),
            keep_story: self.story.is_some(),
            keep_caption: self.caption.is_some(),
        }
    }
}

/// Which conditions survive a random mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPattern {
    pub keep_image: bool,
    pub keep_story: bool,
    pub keep_caption: bool,
}

impl MaskPattern {
    pub const KEEP_ALL: MaskPattern = MaskPattern { keep_image: true, keep_story: true, keep_caption: true };

    /// The seven valid patterns, indexed by the bit pattern `image | story << 1 | caption << 2`, minus one.
    pub const ALL: [MaskPattern; 7] = {
        let mut out = [MaskPattern::KEEP_ALL; 7];
        let mut i = 0;
        while i < 7 {
            let bits = i + 1;
            out[i] = MaskPattern { keep_image: bits & 1 != 0, keep_story: bits & 2 != 0, keep_caption: bits & 4 != 0 };
            i += 1;
        }
        out
    };

    pub fn only(m: Modality) -> Self {
        MaskPattern { keep_image: m == Modality::Image, keep_story: m == Modality::Story, keep_caption: m == Modality::Caption }
    }

    pub fn index(self) -> Option<usize> {
        let bits = self.keep_image as usize | (self.keep_story as usize) << 1 | (self.keep_caption as usize) << 2;
        bits.checked_sub(1)
    }

    pub fn keeps(self, m: Modality) -> bool {
        match m {
            Modality::Image => self.keep_image,
            Modality::Story => self.keep_story,
            Modality::Caption => self.keep_caption,
            Modality::Music => false,
        }
    }

    pub fn count(self) -> usize {
        self.keep_image as usize + self.keep_story as usize + self.keep_caption as usize
    }

    /// Short label such as `image+caption`.
    pub fn label(self) -> String {
        let names: Vec<&str> = Modality::CONDITIONS.iter().filter(|&&m| self.keeps(m)).map(|m| m.name()).collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

/// Uniform draw over the seven non-empty patterns.
pub fn sample_mask(rng: &mut impl Rng) -> MaskPattern {
    MaskPattern::ALL[rng.random_range(0..7)]
}

pub fn apply_mask(full: &ConditionSet, m: MaskPattern) -> Result<ConditionSet> {
    if m.count() == 0 {
        return Err(Error::contract("mask drops every condition"));
    }
    if full.count() != 3 {
        return Err(Error::contract("masks apply to complete condition sets"));
    }
    Ok(ConditionSet {
        image: full.image.clone().filter(|_| m.keep_image),
        story: full.story.clone().filter(|_| m.keep_story),
        caption: full.caption.clone().filter(|_| m.keep_caption),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Mlp(Mlp),
    /// Passes embeddings through unchanged; the raw-feature baseline.
    Identity,
}

impl Adapter {
    fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, trainable: bool) -> Result<Var> {
        match self {
            Adapter::Mlp(m) => m.forward(tape, x, trainable),
            Adapter::Identity => Ok(x),
        }
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Adapter::Mlp(m) => m.infer(x),
            Adapter::Identity => Ok(x.clone()),
        }
    }
}

/// One adapter per condition modality, in the order image, story, caption.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub adapters: [Adapter; 3],
    pub dim: usize,
}

impl Module for AdapterStack {
    fn parameters(&self) -> Vec<&Parameter> {
        self.adapters
            .iter()
            .flat_map(|a| match a {
                Adapter::Mlp(m) => m.parameters(),
                Adapter::Identity => vec![],
            })
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.adapters
            .iter_mut()
            .flat_map(|a| match a {
                Adapter::Mlp(m) => m.parameters_mut(),
                Adapter::Identity => vec![],
            })
            .collect()
    }
}

fn slot(m: Modality) -> Result<usize> {
    Modality::CONDITIONS
        .iter()
        .position(|&c| c == m)
        .ok_or_else(|| Error::input(format!("{m} is not a condition modality")))
}

impl AdapterStack {
    pub const LAYERS: usize = 4;

    /// Adapters `D → 2D → 2D → 2D → D` with layer norm and SiLU on hidden layers.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [dim, 2 * dim, 2 * dim, 2 * dim, dim];
        let mut make = |m: Modality| -> Result<Adapter> {
            Ok(Adapter::Mlp(Mlp::new(&format!("align.{m}"), &widths, Activation::Silu, true, &mut rng)?))
        };
        Ok(Self { adapters: [make(Modality::Image)?, make(Modality::Story)?, make(Modality::Caption)?], dim })
    }

    pub fn identity(dim: usize) -> Self {
        Self { adapters: [Adapter::Identity, Adapter::Identity, Adapter::Identity], dim }
    }

    pub fn adapter(&self, m: Modality) -> Result<&Adapter> {
        Ok(&self.adapters[slot(m)?])
    }

    /// Adapter output for one embedding.
    pub fn project(&self, e: &Embedding) -> Result<Vec<f64>> {
        self.check_width(e.dim())?;
        let y = self.adapter(e.modality)?.infer(&Tensor::matrix(1, self.dim, e.vector.clone())?)?;
        Ok(y.into_data())
    }

    /// Adapter outputs for `[B, D]` rows of one modality.
    pub fn project_batch(&self, m: Modality, rows: &Tensor) -> Result<Tensor> {
        if rows.shape().len() != 2 {
            return Err(Error::dim(format!("expected a [B, {}] batch, got {:?}", self.dim, rows.shape())));
        }
        self.check_width(rows.cols())?;
        self.adapter(m)?.infer(rows)
    }

    fn check_width(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::dim(format!("embedding width {d}, adapters expect {}", self.dim)));
        }
        Ok(())
    }

    /// `e_f`: the mean of adapter outputs over present conditions.
    pub fn fuse(&self, conds: &ConditionSet) -> Result<Embedding> {
        conds.validate()?;
        let mut outputs = Vec::with_capacity(3);
        for m in Modality::CONDITIONS {
            if let Some(e) = conds.get(m) {
                outputs.push(self.project(e)?);
            }
        }
        let refs: Vec<&[f64]> = outputs.iter().map(Vec::as_slice).collect();
        Embedding::new(mean_of(&refs), Modality::Music)
    }

    /// Batched masked fusion on a tape. `inputs` holds full `[B, D]` batches
    /// per modality; rows whose mask drops a modality never reach its adapter.
    pub fn fuse_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        inputs: [&Tensor; 3],
        masks: &[MaskPattern],
        trainable: bool,
    ) -> Result<Var> {
        let b = masks.len();
        if masks.iter().any(|m| m.count() == 0) {
            return Err(Error::contract("mask drops every condition"));
        }
        let mut acc: Option<Var> = None;
        for (k, m) in Modality::CONDITIONS.into_iter().enumerate() {
            let x = inputs[k];
            if x.shape() != [b, self.dim] {
                return Err(Error::dim(format!("{m} batch of shape {:?}, expected [{b}, {}]", x.shape(), self.dim)));
            }
            let rows: Vec<usize> = (0..b).filter(|&i| masks[i].keeps(m)).collect();
            if rows.is_empty() {
                continue;
            }
            let mut data = Vec::with_capacity(rows.len() * self.dim);
            for &i in &rows {
                data.extend_from_slice(x.row(i));
            }
            let weights: Vec<f64> = rows.iter().map(|&i| 1.0 / masks[i].count() as f64).collect();
            let xin = tape.constant(vec![rows.len(), self.dim], data)?;
            let y = self.adapters[k].forward(tape, xin, trainable)?;
            let y = tape.row_scale(y, &weights)?;
            let y = tape.scatter_rows(y, &rows, b)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::contract("empty batch"))
    }
}

/// Element-wise mean accumulated in slice order as `Σ x · (1/n)`, the same
/// arithmetic the tape path performs, so both agree bit for bit.
pub fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let w = 1.0 / rows.len() as f64;
    let mut out = vec![0.0; rows.first().map_or(0, |r| r.len())];
    for r in rows {
        out.iter_mut().zip(*r).for_each(|(o, x)| *o += x * w);
    }
    out
}

/// Fuses precomputed adapter outputs (image, story, caption) under a mask.
pub fn fuse_projected(projected: &[Vec<f64>; 3], mask: MaskPattern) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = Modality::CONDITIONS
        .iter()
        .enumerate()
        .filter(|(_, &m)| mask.keeps(m))
        .map(|(k, _)| projected[k].as_slice())
        .collect();
    if rows.is_empty() {
        return Err(Error::contract("mask drops every condition"));
    }
    Ok(mean_of(&rows))
}

/// `L_A = ||e_M − e_f||²`.
pub fn alignment_loss(conds: &ConditionSet, target: &Embedding, adapters: &AdapterStack) -> Result<f64> {
    if target.modality != Modality::Music {
        return Err(Error::contract(format!("alignment target must be a music embedding, got {}", target.modality)));
    }
    let fused = adapters.fuse(conds)?;
    if fused.dim() != target.dim() {
        return Err(Error::dim(format!("fused width {}, target width {}", fused.dim(), target.dim())));
    }
    Ok(fused.vector.iter().zip(&target.vector).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Complete condition embeddings paired with the music embedding they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignSample {
    /// Image, story and caption embeddings.
    pub conditions: [Vec<f64>; 3],
    pub target: Vec<f64>,
}

impl AlignSample {
    pub fn condition_set(&self) -> Result<ConditionSet> {
        Ok(ConditionSet::full(
            Embedding::new(self.conditions[0].clone(), Modality::Image)?,
            Embedding::new(self.conditions[1].clone(), Modality::Story)?,
            Embedding::new(self.conditions[2].clone(), Modality::Caption)?,
        ))
    }

    pub fn target_embedding(&self) -> Result<Embedding> {
        Embedding::new(self.target.clone(), Modality::Music)
    }
}

/// Stacks one field of a batch of samples into a `[B, D]` tensor.
pub(crate) fn stack(rows: impl Iterator<Item = impl AsRef<[f64]>>, dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(Error::dim(format!("row of width {}, expected {dim}", r.len())));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, dim, data)
}

pub(crate) fn condition_batches(data: &[AlignSample], idx: &[usize], dim: usize) -> Result<[Tensor; 3]> {
    Ok([
        stack(idx.iter().map(|&i| &data[i].conditions[0]), dim)?,
        stack(idx.iter().map(|&i| &data[i].conditions[1]), dim)?,
        stack(idx.iter().map(|&i| &data[i].conditions[2]), dim)?,
    ])
}

/// Fused embeddings of every sample under one mask, computed batch-wise.
pub fn fuse_batch(adapters: &AdapterStack, data: &[AlignSample], mask: MaskPattern) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let inputs = condition_batches(data, &idx, adapters.dim)?;
    let mut proj = Vec::with_capacity(3);
    for (x, m) in inputs.iter().zip(Modality::CONDITIONS) {
        proj.push(adapters.project_batch(m, x)?);
    }
    (0..data.len())
        .map(|i| fuse_projected(&[proj[0].row(i).to_vec(), proj[1].row(i).to_vec(), proj[2].row(i).to_vec()], mask))
        .collect()
}

/// `L_A` averaged over a batch: `D · mse(e_f, e_M)`.
pub(crate) fn batch_alignment_loss<'p>(tape: &mut Tape<'p>, fused: Var, targets: Tensor) -> Result<Var> {
    let d = targets.cols() as f64;
    let t = tape.leaf(targets);
    let mse = tape.mse(fused, t)?;
    Ok(tape.scale(mse, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 24, optimizer: AdamWConfig::default() }
    }
}

/// Mean `L_A` over a dataset with one mask per sample drawn from `rng`, or
/// with all conditions kept when `rng` is `None`.
pub fn mean_alignment_loss(data: &[AlignSample], adapters: &AdapterStack, rng: Option<&mut ChaCha8Rng>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("empty alignment dataset"));
    }
    let d = adapters.dim;
    let idx: Vec<usize> = (0..data.len()).collect();
    let projected: Vec<Tensor> = condition_batches(data, &idx, d)?
        .iter()
        .zip(Modality::CONDITIONS)
        .map(|(x, m)| adapters.project_batch(m, x))
        .collect::<Result<_>>()?;
    let masks: Vec<MaskPattern> = match rng {
        Some(r) => (0..data.len()).map(|_| sample_mask(r)).collect(),
        None => vec![MaskPattern::KEEP_ALL; data.len()],
    };
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let p = [projected[0].row(i).to_vec(), projected[1].row(i).to_vec(), projected[2].row(i).to_vec()];
        let fused = fuse_projected(&p, masks[i])?;
        total += fused.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// `L_A` of the constant predictor that always outputs the dataset-mean `e_M`.
pub fn mean_predictor_baseline(data: &[AlignSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("empty alignment dataset"));
    }
    let rows: Vec<&[f64]> = data.iter().map(|s| s.target.as_slice()).collect();
    let mean = mean_of(&rows);
    Ok(rows.iter().map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>()
        / data.len() as f64)
}

/// Trains the adapters alone with a fresh mask per sample. Returns the mean
/// `L_A` of each epoch.
pub fn train_alignment(
    data: &[AlignSample],
    adapters: &mut AdapterStack,
    cfg: &AlignConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::input("empty alignment dataset"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("alignment epochs and batch size must be positive".into()));
    }
    adapters.check_names()?;
    let d = adapters.dim;
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let masks: Vec<MaskPattern> = batch.iter().map(|_| sample_mask(&mut rng)).collect();
            let inputs = condition_batches(data, batch, d)?;
            let targets = stack(batch.iter().map(|&i| &data[i].target), d)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let fused = adapters.fuse_on_tape(&mut tape, [&inputs[0], &inputs[1], &inputs[2]], &masks, true)?;
                let loss = batch_alignment_loss(&mut tape, fused, targets)?;
                tape.backward(loss)?;
                (tape.scalar_value(loss)?, tape.gradients())
            };
            ensure_finite("alignment loss", &[loss])?;
            total += loss * batch.len() as f64;
            adapters.accumulate_grads(&grads)?;
            opt.step(adapters.parameters_mut())?;
            adapters.zero_grad();
        }
        let mean = total / data.len() as f64;
        debug!("alignment epoch {epoch}: L_A {mean:.5}");
        history.push(mean);
    }
    adapters.quantize();
    info!("alignment trained: L_A {:.4} -> {:.4}", history[0], history[history.len() - 1]);
    Ok(history)
}

/// Share of samples whose fused embedding is closer (cosine) to its own
/// target than to each of its distractors. `distractors[i]` indexes into
/// `targets`.
pub fn retrieval_accuracy(fused: &[Vec<f64>], targets: &[Vec<f64>], distractors: &[Vec<usize>]) -> Result<f64> {
    if fused.len() != targets.len() || fused.len() != distractors.len() || fused.is_empty() {
        return Err(Error::input("retrieval needs matching, non-empty lists"));
    }
    let hits = fused
        .iter()
        .enumerate()
        .filter(|(i, f)| {
            let own = crate::encoders::cosine(f, &targets[*i]);
            distractors[*i].iter().all(|&j| crate::encoders::cosine(f, &targets[j]) < own)
        })
        .count();
    Ok(hits as f64 / fused.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: Vec<f64>, m: Modality) -> Embedding {
        Embedding::new(v, m).unwrap()
    }

    fn full3() -> ConditionSet {
        ConditionSet::full(
            emb(vec![1.0, 0.0, 3.0], Modality::Image),
            emb(vec![0.0, 2.0, 0.0], Modality::Story),
            emb(vec![2.0, 1.0, 0.0], Modality::Caption),
        )
    }

    #[test]
    fn seven_distinct_patterns() {
        let mut seen = std::collections::HashSet::new();
        for (i, p) in MaskPattern::ALL.iter().enumerate() {
            assert!(p.count() >= 1);
            assert_eq!(p.index(), Some(i));
            seen.insert(*p);
        }
        assert_eq!(seen.len(), 7);
        assert_eq!(MaskPattern::only(Modality::Caption).label(), "caption");
        assert_eq!(MaskPattern::KEEP_ALL.label(), "image+story+caption");
    }

    #[test]
    fn identity_fuse_is_the_mean() {
        let a = AdapterStack::identity(3);
        let e = a.fuse(&full3()).unwrap();
        assert_eq!(e.vector, vec![1.0, 1.0, 1.0]);
        let only = apply_mask(&full3(), MaskPattern::only(Modality::Story)).unwrap();
        assert_eq!(only.count(), 1);
        assert_eq!(a.fuse(&only).unwrap().vector, vec![0.0, 2.0, 0.0]);
        assert_eq!(apply_mask(&full3(), MaskPattern::KEEP_ALL).unwrap(), full3());
    }

    #[test]
    fn empty_sets_and_masks_rejected() {
        assert!(matches!(ConditionSet::new(None, None, None), Err(Error::Contract(_))));
        let none = MaskPattern { keep_image: false, keep_story: false, keep_caption: false };
        assert!(none.index().is_none());
        assert!(matches!(apply_mask(&full3(), none), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_arithmetic() {
        let a = AdapterStack::identity(3);
        let c = ConditionSet::new(Some(emb(vec![0.0, 0.0, 0.0], Modality::Image)), None, None).unwrap();
        let t = emb(vec![1.0, 0.0, 0.0], Modality::Music);
        assert_eq!(alignment_loss(&c, &t, &a).unwrap(), 1.0);
        let same = emb(vec![0.0, 0.0, 0.0], Modality::Music);
        assert_eq!(alignment_loss(&c, &same, &a).unwrap(), 0.0);
        let wrong = emb(vec![0.0; 3], Modality::Caption);
        assert!(alignment_loss(&c, &wrong, &a).is_err());
    }

    #[test]
    fn tape_fusion_matches_direct_fusion() {
        let a = AdapterStack::new(4, 3).unwrap();
        let rows = |s: f64| Tensor::from_rows(&[vec![s, 0.1, -0.2, 0.3], vec![0.5, s, 0.0, -0.1]]).unwrap();
        let (i, s, c) = (rows(1.0), rows(-0.5), rows(0.25));
        let masks = [MaskPattern::ALL[2], MaskPattern::ALL[4]];
        let mut tape = Tape::new();
        let f = a.fuse_on_tape(&mut tape, [&i, &s, &c], &masks, false).unwrap();
        let got = tape.tensor(f);
        for (r, m) in masks.iter().enumerate() {
            let set = apply_mask(
                &ConditionSet::full(
                    emb(i.row(r).to_vec(), Modality::Image),
                    emb(s.row(r).to_vec(), Modality::Story),
                    emb(c.row(r).to_vec(), Modality::Caption),
                ),
                *m,
            )
            .unwrap();
            let want = a.fuse(&set).unwrap().vector;
            assert_eq!(got.row(r), want.as_slice());
        }
    }

    #[test]
    fn gradient_wrt_adapter_output() {
        // Identity adapters: the leaf is the adapter output.
        let x = [
            Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap(),
            Tensor::from_rows(&[vec![0.1, 0.4]]).unwrap(),
            Tensor::from_rows(&[vec![-0.5, 0.2]]).unwrap(),
        ];
        let target = vec![1.0, -1.0];
        let mut tape = Tape::new();
        let leaves: Vec<Var> = x.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let sum = tape.add(leaves[0], leaves[1]).unwrap();
        let sum = tape.add(sum, leaves[2]).unwrap();
        let fused = tape.scale(sum, 1.0 / 3.0);
        let loss = batch_alignment_loss(&mut tape, fused, Tensor::matrix(1, 2, target.clone()).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        let ef: Vec<f64> = (0..2).map(|j| (x[0].data()[j] + x[1].data()[j] + x[2].data()[j]) / 3.0).collect();
        for l in &leaves {
            let g = tape.grad(*l).unwrap();
            for j in 0..2 {
                assert!((g[j] - (-2.0 * (target[j] - ef[j]) / 3.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_beats_the_mean_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 6;
        let data: Vec<AlignSample> = (0..48)
            .map(|_| {
                let t: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let c = |k: f64| t.iter().map(|x| (k * x).tanh()).collect::<Vec<f64>>();
                AlignSample { conditions: [c(0.5), c(1.0), c(-0.7)], target: t }
            })
            .collect();
        let mut a = AdapterStack::new(d, 1).unwrap();
        let cfg = AlignConfig { epochs: 60, batch_size: 8, optimizer: AdamWConfig { lr: 3e-3, ..Default::default() } };
        let hist = train_alignment(&data, &mut a, &cfg, 2).unwrap();
        assert!(hist[hist.len() - 1] < hist[0] / 10.0, "{hist:?}");
        let base = mean_predictor_baseline(&data).unwrap();
        assert!(mean_alignment_loss(&data, &a, None).unwrap() < base);
        let mut b = AdapterStack::new(d, 1).unwrap();
        assert_eq!(train_alignment(&data, &mut b, &cfg, 2).unwrap(), hist);
        assert!(train_alignment(&[], &mut b, &cfg, 2).is_err());
    }

    #[test]
    fn retrieval_counts_strict_wins() {
        let t = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let f = vec![vec![0.9, 0.1], vec![0.9, 0.2]];
        let acc = retrieval_accuracy(&f, &t, &[vec![1], vec![0]]).unwrap();
        assert_eq!(acc, 0.5);
    }
}
