//! FM-OT conditional flow matching: probability path, target field, the CFM
//! objective, staged and joint training, and ODE sampling.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    batch_alignment_loss, condition_batches, fuse_projected, sample_mask, stack, AdapterStack, AlignSample,
    MaskPattern,
};
use crate::encoders::Modality;
use crate::error::{ensure_finite, Error, Result};
use crate::exec::Execution;
use crate::tensor::{cosine_lr, Activation, AdamW, AdamWConfig, Mlp, Module, Parameter, Tape, Tensor, Var};

pub const TIME_EMBED_DIM: usize = 64;
const COND_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    #[default]
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub solver: Solver,
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { sigma_min: 1e-4, solver: Solver::Midpoint, steps: 50 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.sigma_min) {
            return Err(Error::Config(format!("sigma_min {} outside [0, 0.5]", self.sigma_min)));
        }
        if self.steps == 0 {
            return Err(Error::input("solver needs at least one step"));
        }
        Ok(())
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_pair(x0: &[f64], x1: &[f64]) -> Result<()> {
    if x0.len() != x1.len() {
        return Err(Error::dim(format!("path endpoints of length {} and {}", x0.len(), x1.len())));
    }
    Ok(())
}

/// `σ_t = 1 − (1 − σ_min)·t`.
pub fn sigma_t(t: f64, sigma_min: f64) -> f64 {
    1.0 - (1.0 - sigma_min) * t
}

/// `x_t = t·x1 + σ_t·x0`.
pub fn ot_point(x0: &[f64], x1: &[f64], t: f64, sigma_min: f64) -> Result<Vec<f64>> {
    check_pair(x0, x1)?;
    check_t(t)?;
    let s = sigma_t(t, sigma_min);
    Ok(x0.iter().zip(x1).map(|(a, b)| t * b + s * a).collect())
}

/// `u = x1 − (1 − σ_min)·x0`, constant along the path.
pub fn target_field(x0: &[f64], x1: &[f64], sigma_min: f64) -> Result<Vec<f64>> {
    check_pair(x0, x1)?;
    Ok(x0.iter().zip(x1).map(|(a, b)| b - (1.0 - sigma_min) * a).collect())
}

/// Conditional field `u_t(x | x1) = (x1 − (1 − σ_min)·x) / σ_t`.
pub fn conditional_field(x: f64, x1: f64, t: f64, sigma_min: f64) -> f64 {
    (x1 - (1.0 - sigma_min) * x) / sigma_t(t, sigma_min)
}

/// Sinusoidal features of `t`: 32 sines and 32 cosines at angular
/// frequencies spaced geometrically from 1 to 1000.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let w = 1000f64.powf(k as f64 / (half - 1) as f64);
        out[k] = (w * t).sin();
        out[half + k] = (w * t).cos();
    }
    out
}

/// A velocity field `v(z, t, c)` evaluated on `[B, d_z]` rows with per-row
/// times and `[B, cond_dim]` conditions.
pub trait VectorField: Sync {
    fn d_z(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn velocity(&self, z: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor>;
}

/// `concat(z, time_embedding(t), norm(e_f))` through a SiLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldNet {
    pub mlp: Mlp,
    pub d_z: usize,
    pub cond_dim: usize,
}

impl Module for VectorFieldNet {
    fn parameters(&self) -> Vec<&Parameter> {
        self.mlp.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.mlp.parameters_mut()
    }
}

impl VectorFieldNet {
    pub const HIDDEN: usize = 256;
    pub const HIDDEN_LAYERS: usize = 4;

    pub fn new(d_z: usize, cond_dim: usize, seed: u64) -> Result<Self> {
        Self::with_width(d_z, cond_dim, Self::HIDDEN, Self::HIDDEN_LAYERS, seed)
    }

    pub fn with_width(d_z: usize, cond_dim: usize, hidden: usize, layers: usize, seed: u64) -> Result<Self> {
        if d_z == 0 || hidden == 0 {
            return Err(Error::input("vector field needs positive widths"));
        }
        let mut widths = vec![d_z + TIME_EMBED_DIM + cond_dim];
        widths.extend(std::iter::repeat_n(hidden, layers));
        widths.push(d_z);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { mlp: Mlp::new("flow", &widths, Activation::Silu, false, &mut rng)?, d_z, cond_dim })
    }

    fn time_features(t: &[f64]) -> Vec<f64> {
        t.iter().flat_map(|&t| time_embedding(t)).collect()
    }

    /// Records the network on a tape; `cond` may carry gradients.
    pub fn forward_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        z: Var,
        t: &[f64],
        cond: Option<Var>,
        trainable: bool,
    ) -> Result<Var> {
        let te = tape.constant(vec![t.len(), TIME_EMBED_DIM], Self::time_features(t))?;
        let mut parts = vec![z, te];
        match (cond, self.cond_dim) {
            (Some(c), d) if d > 0 => {
                // Standardized per row: unit-norm embeddings and raw features
                // reach the first layer at the same scale.
                let gain = tape.constant(vec![1, d], vec![1.0; d])?;
                let bias = tape.constant(vec![1, d], vec![0.0; d])?;
                parts.push(tape.layer_norm(c, gain, bias, COND_NORM_EPS)?);
            }
            (None, 0) => {}
            _ => return Err(Error::dim(format!("vector field expects a condition of width {}", self.cond_dim))),
        }
        let x = tape.concat_cols(&parts)?;
        self.mlp.forward(tape, x, trainable)
    }
}

fn check_batch(z: &Tensor, t: &[f64], cond: &Tensor, d_z: usize, cond_dim: usize) -> Result<usize> {
    let b = t.len();
    if z.shape() != [b, d_z] {
        return Err(Error::dim(format!("latents of shape {:?}, expected [{b}, {d_z}]", z.shape())));
    }
    if cond_dim > 0 && cond.shape() != [b, cond_dim] {
        return Err(Error::dim(format!("conditions of shape {:?}, expected [{b}, {cond_dim}]", cond.shape())));
    }
    Ok(b)
}

impl VectorField for VectorFieldNet {
    fn d_z(&self) -> usize {
        self.d_z
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn velocity(&self, z: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor> {
        check_batch(z, t, cond, self.d_z, self.cond_dim)?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone().with_requires_grad(false));
        let cv = if self.cond_dim > 0 { Some(tape.leaf(cond.clone().with_requires_grad(false))) } else { None };
        let v = self.forward_on_tape(&mut tape, zv, t, cv, false)?;
        Ok(tape.tensor(v))
    }
}

/// Placeholder condition for unconditional fields.
pub fn no_condition() -> Tensor {
    Tensor::scalar(0.0)
}

/// Noise rows `z0 ~ N(0, I)` and times `t ~ U[0, 1)` for a CFM batch.
fn draw_path(rng: &mut impl Rng, b: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let z0: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(rng)).collect();
    (t, z0)
}

fn path_batch(z1: &Tensor, z0: &[f64], t: &[f64], sigma_min: f64) -> Result<(Tensor, Tensor)> {
    let d = z1.cols();
    let mut xt = Vec::with_capacity(z1.len());
    let mut u = Vec::with_capacity(z1.len());
    for (i, &ti) in t.iter().enumerate() {
        let x0 = &z0[i * d..(i + 1) * d];
        xt.extend(ot_point(x0, z1.row(i), ti, sigma_min)?);
        u.extend(target_field(x0, z1.row(i), sigma_min)?);
    }
    Ok((Tensor::matrix(t.len(), d, xt)?, Tensor::matrix(t.len(), d, u)?))
}

/// `L_G = mean_i ||v(x_t, t, c_i) − (z1 − (1 − σ_min)·z0)||²` with fresh
/// `t` and `z0` per row. Tape-free, for any [`VectorField`].
pub fn cfm_loss(field: &dyn VectorField, z1: &Tensor, cond: &Tensor, cfg: &FlowConfig, rng: &mut impl Rng) -> Result<f64> {
    let b = z1.shape().first().copied().unwrap_or(0);
    if b == 0 || z1.is_empty() {
        return Err(Error::input("empty CFM batch"));
    }
    let (t, z0) = draw_path(rng, b, field.d_z());
    let (xt, u) = path_batch(z1, &z0, &t, cfg.sigma_min)?;
    let v = field.velocity(&xt, &t, cond)?;
    let sq: f64 = v.data().iter().zip(u.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sq / b as f64)
}

/// Taped CFM loss for a batch; `cond` is the `[B, D]` condition variable.
fn cfm_loss_on_tape<'p>(
    tape: &mut Tape<'p>,
    net: &'p VectorFieldNet,
    z1: &Tensor,
    cond: Option<Var>,
    cfg: &FlowConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let b = z1.rows();
    let (t, z0) = draw_path(rng, b, net.d_z);
    let (xt, u) = path_batch(z1, &z0, &t, cfg.sigma_min)?;
    let xv = tape.leaf(xt);
    let uv = tape.leaf(u);
    let v = net.forward_on_tape(tape, xv, &t, cond, true)?;
    let mse = tape.mse(v, uv)?;
    Ok(tape.scale(mse, net.d_z as f64))
}

/// One training example: a data latent plus its complete conditions and
/// music embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z1: Vec<f64>,
    pub cond: AlignSample,
}

/// What the vector field is conditioned on during generation training.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    /// Masked mean of frozen adapter outputs.
    Fused(&'a AdapterStack),
    /// The target's own music embedding.
    Music,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Cosine-decay the learning rate to 5% of its base over the run.
    pub cosine_decay: bool,
}

impl TrainConfig {
    pub fn generation() -> Self {
        Self { epochs: 250, batch_size: 24, optimizer: AdamWConfig::default(), cosine_decay: false }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_decay {
            cosine_lr(self.optimizer.lr, epoch, self.epochs, 0.05)
        } else {
            self.optimizer.lr
        }
    }

    pub fn joint() -> Self {
        Self { epochs: 100, ..Self::generation() }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::generation()
    }
}

/// Precomputed per-sample condition sources for generation training.
enum CondTable {
    Projected(Vec<[Vec<f64>; 3]>),
    Music,
    None,
}

impl CondTable {
    fn build(data: &[FlowSample], mode: Conditioning<'_>) -> Result<Self> {
        Ok(match mode {
            Conditioning::Fused(adapters) => {
                let aligned: Vec<AlignSample> = data.iter().map(|s| s.cond.clone()).collect();
                let idx: Vec<usize> = (0..data.len()).collect();
                let batches = condition_batches(&aligned, &idx, adapters.dim)?;
                let mut proj = Vec::with_capacity(3);
                for (x, m) in batches.iter().zip(Modality::CONDITIONS) {
                    proj.push(adapters.project_batch(m, x)?);
                }
                CondTable::Projected(
                    (0..data.len())
                        .map(|i| [proj[0].row(i).to_vec(), proj[1].row(i).to_vec(), proj[2].row(i).to_vec()])
                        .collect(),
                )
            }
            Conditioning::Music => CondTable::Music,
            Conditioning::None => CondTable::None,
        })
    }

    fn width(&self, data: &[FlowSample]) -> usize {
        match self {
            CondTable::Projected(p) => p[0][0].len(),
            CondTable::Music => data[0].cond.target.len(),
            CondTable::None => 0,
        }
    }

    fn rows(&self, data: &[FlowSample], idx: &[usize], masks: &[MaskPattern]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (&i, &m) in idx.iter().zip(masks) {
            match self {
                CondTable::Projected(p) => out.extend(fuse_projected(&p[i], m)?),
                CondTable::Music => out.extend_from_slice(&data[i].cond.target),
                CondTable::None => {}
            }
        }
        Ok(out)
    }
}

fn z1_batch(data: &[FlowSample], idx: &[usize], d_z: usize) -> Result<Tensor> {
    stack(idx.iter().map(|&i| &data[i].z1), d_z)
}

/// Trains the vector field with the adapters frozen. Every sample gets a
/// fresh condition mask each epoch. Returns the mean `L_G` per epoch.
pub fn train_generation(
    data: &[FlowSample],
    net: &mut VectorFieldNet,
    conditioning: Conditioning<'_>,
    flow: &FlowConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    train_generation_observed(data, net, conditioning, flow, cfg, seed, &mut |_, _| Ok(()))
}

/// [`train_generation`] that calls `on_epoch(epoch, net)` after every epoch,
/// with `epoch` counted from 1.
pub fn train_generation_observed(
    data: &[FlowSample],
    net: &mut VectorFieldNet,
    conditioning: Conditioning<'_>,
    flow: &FlowConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &VectorFieldNet) -> Result<()>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::input("empty generation dataset"));
    }
    cfg.validate()?;
    flow.validate()?;
    let table = CondTable::build(data, conditioning)?;
    let width = table.width(data);
    if width != net.cond_dim {
        return Err(Error::dim(format!("conditions of width {width}, vector field expects {}", net.cond_dim)));
    }
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let masks: Vec<MaskPattern> = batch.iter().map(|_| sample_mask(&mut rng)).collect();
            let z1 = z1_batch(data, batch, net.d_z)?;
            let cond_rows = table.rows(data, batch, &masks)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let cond = if width > 0 { Some(tape.constant(vec![batch.len(), width], cond_rows)?) } else { None };
                let loss = cfm_loss_on_tape(&mut tape, net, &z1, cond, flow, &mut rng)?;
                tape.backward(loss)?;
                (tape.scalar_value(loss)?, tape.gradients())
            };
            ensure_finite("generation loss", &[loss])?;
            total += loss * batch.len() as f64;
            net.accumulate_grads(&grads)?;
            opt.step(net.parameters_mut())?;
            net.zero_grad();
        }
        let mean = total / data.len() as f64;
        debug!("generation epoch {epoch}: L_G {mean:.5}");
        history.push(mean);
        on_epoch(epoch + 1, net)?;
    }
    net.quantize();
    info!("generation trained: L_G {:.4} -> {:.4}", history[0], history[history.len() - 1]);
    Ok(history)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointHistory {
    pub generation: Vec<f64>,
    pub alignment: Vec<f64>,
    pub total: Vec<f64>,
}

/// Gradients of one joint step; exposed for tests.
pub fn joint_step_gradients(
    batch: &[FlowSample],
    net: &VectorFieldNet,
    adapters: &AdapterStack,
    flow: &FlowConfig,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, crate::tensor::Gradients)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let masks: Vec<MaskPattern> = idx.iter().map(|_| sample_mask(rng)).collect();
    let aligned: Vec<AlignSample> = batch.iter().map(|s| s.cond.clone()).collect();
    let inputs = condition_batches(&aligned, &idx, adapters.dim)?;
    let targets = stack(batch.iter().map(|s| &s.cond.target), adapters.dim)?;
    let z1 = z1_batch(batch, &idx, net.d_z)?;
    let mut tape = Tape::new();
    let fused = adapters.fuse_on_tape(&mut tape, [&inputs[0], &inputs[1], &inputs[2]], &masks, true)?;
    let lg = cfm_loss_on_tape(&mut tape, net, &z1, Some(fused), flow, rng)?;
    let la = batch_alignment_loss(&mut tape, fused, targets)?;
    let weighted = tape.scale(la, lambda);
    let total = tape.add(lg, weighted)?;
    tape.backward(total)?;
    Ok((tape.scalar_value(lg)?, tape.scalar_value(la)?, tape.gradients()))
}

/// Joint training on `L_J = L_G + λ·L_A`, updating the vector field and
/// the adapters together.
pub fn train_joint(
    data: &[FlowSample],
    net: &mut VectorFieldNet,
    adapters: &mut AdapterStack,
    flow: &FlowConfig,
    cfg: &TrainConfig,
    lambda: f64,
    seed: u64,
) -> Result<JointHistory> {
    if !(lambda >= 0.0) {
        return Err(Error::input(format!("lambda must be non-negative, got {lambda}")));
    }
    if data.is_empty() {
        return Err(Error::input("empty joint dataset"));
    }
    cfg.validate()?;
    flow.validate()?;
    if net.cond_dim != adapters.dim {
        return Err(Error::dim(format!("adapters emit width {}, vector field expects {}", adapters.dim, net.cond_dim)));
    }
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut hist = JointHistory::default();
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut rng);
        let (mut g_sum, mut a_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<FlowSample> = batch.iter().map(|&i| data[i].clone()).collect();
            let (lg, la, grads) = joint_step_gradients(&items, net, adapters, flow, lambda, &mut rng)?;
            ensure_finite("joint loss", &[lg, la])?;
            g_sum += lg * batch.len() as f64;
            a_sum += la * batch.len() as f64;
            net.accumulate_grads(&grads)?;
            adapters.accumulate_grads(&grads)?;
            let mut params: Vec<&mut Parameter> = net.parameters_mut();
            params.extend(adapters.parameters_mut());
            opt.step(params)?;
            net.zero_grad();
            adapters.zero_grad();
        }
        let n = data.len() as f64;
        hist.generation.push(g_sum / n);
        hist.alignment.push(a_sum / n);
        hist.total.push((g_sum + lambda * a_sum) / n);
        debug!("joint epoch {epoch}: L_G {:.5} L_A {:.5}", g_sum / n, a_sum / n);
    }
    net.quantize();
    adapters.quantize();
    info!(
        "joint trained: L_G {:.4} -> {:.4}, L_A {:.4} -> {:.4}",
        hist.generation[0],
        hist.generation[hist.generation.len() - 1],
        hist.alignment[0],
        hist.alignment[hist.alignment.len() - 1]
    );
    Ok(hist)
}

/// Integrates `dz/dt = v(z, t, c)` from `t = 0` to `1` for every row of `z0`.
pub fn integrate(field: &dyn VectorField, z0: Tensor, cond: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    cfg.validate()?;
    let b = z0.rows();
    let h = 1.0 / cfg.steps as f64;
    let mut z = z0;
    for k in 0..cfg.steps {
        let t = k as f64 * h;
        let v = match cfg.solver {
            Solver::Euler => field.velocity(&z, &vec![t; b], cond)?,
            Solver::Midpoint => {
                let k1 = field.velocity(&z, &vec![t; b], cond)?;
                let mut mid = z.clone();
                mid.data_mut().iter_mut().zip(k1.data()).for_each(|(m, v)| *m += 0.5 * h * v);
                field.velocity(&mid, &vec![t + 0.5 * h; b], cond)?
            }
        };
        z.data_mut().iter_mut().zip(v.data()).for_each(|(x, v)| *x += h * v);
    }
    ensure_finite("sampled latent", z.data())?;
    Ok(z)
}

/// Draws `z0 ~ N(0, I)` and integrates one latent for condition `e_f`.
pub fn sample(e_f: &[f64], field: &dyn VectorField, cfg: &FlowConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let z0: Vec<f64> = (0..field.d_z()).map(|_| StandardNormal.sample(rng)).collect();
    let cond = if field.cond_dim() == 0 { no_condition() } else { Tensor::matrix(1, e_f.len(), e_f.to_vec())? };
    Ok(integrate(field, Tensor::matrix(1, field.d_z(), z0)?, &cond, cfg)?.into_data())
}

/// Noise source of item `index` under `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"flow-sample");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Samples one latent per condition row. Row `i` starts from noise drawn
/// by [`sample_rng`]`(seed, i)`, so the result does not depend on how rows
/// are chunked across threads.
pub fn sample_batch(
    conds: &[Vec<f64>],
    field: &dyn VectorField,
    cfg: &FlowConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 32;
    let idx: Vec<usize> = (0..conds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
    let d = field.d_z();
    let out = exec.try_map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let mut z0 = Vec::with_capacity(chunk.len() * d);
        for &i in *chunk {
            let mut rng = sample_rng(seed, i);
            z0.extend((0..d).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)));
        }
        let cond = if field.cond_dim() == 0 {
            no_condition()
        } else {
            stack(chunk.iter().map(|&i| &conds[i]), field.cond_dim())?
        };
        let z = integrate(field, Tensor::matrix(chunk.len(), d, z0)?, &cond, cfg)?;
        Ok((0..z.rows()).map(|r| z.row(r).to_vec()).collect())
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Target distributions with a tractable marginal field.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    /// `(weight, location)` point masses.
    Points(Vec<(f64, f64)>),
    /// `(weight, mean, std)` 1-D Gaussian components.
    Gaussians(Vec<(f64, f64, f64)>),
}

fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    -0.5 * ((x - mean) / std).powi(2) - std.ln()
}

/// Marginal velocity `E[u_t(x | x1) p_t(x | x1)] / p_t(x)` by exact
/// enumeration (points) or trapezoid quadrature over `x1` (Gaussians).
pub fn marginal_field_oracle(x: f64, t: f64, target: &TargetSpec, sigma_min: f64) -> Result<f64> {
    check_t(t)?;
    let st = sigma_t(t, sigma_min);
    if st <= 0.0 {
        return Err(Error::input("marginal field is undefined where sigma_t vanishes"));
    }
    // (log weight, conditional velocity) terms.
    let mut terms: Vec<(f64, f64)> = Vec::new();
    match target {
        TargetSpec::Points(pts) if !pts.is_empty() => {
            for &(w, x1) in pts {
                if w <= 0.0 {
                    return Err(Error::input("mixture weights must be positive"));
                }
                terms.push((w.ln() + log_normal(x, t * x1, st), conditional_field(x, x1, t, sigma_min)));
            }
        }
        TargetSpec::Gaussians(comps) if !comps.is_empty() => {
            const NODES: usize = 4001;
            for &(w, mu, s) in comps {
                if w <= 0.0 || s <= 0.0 {
                    return Err(Error::input("mixture weights and stds must be positive"));
                }
                let (lo, hi) = (mu - 10.0 * s, mu + 10.0 * s);
                let dx = (hi - lo) / (NODES - 1) as f64;
                for k in 0..NODES {
                    let x1 = lo + k as f64 * dx;
                    let trap = if k == 0 || k == NODES - 1 { 0.5 } else { 1.0 };
                    let lw = w.ln() + (trap * dx).ln() + log_normal(x1, mu, s) + log_normal(x, t * x1, st);
                    terms.push((lw, conditional_field(x, x1, t, sigma_min)));
                }
            }
        }
        _ => return Err(Error::input("unsupported or empty target specification")),
    }
    let max = terms.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (lw, u) in terms {
        let w = (lw - max).exp();
        num += w * u;
        den += w;
    }
    Ok(num / den)
}

/// Exact 1-D Wasserstein-1 distance between two equal-size empirical samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::input("wasserstein1 needs two non-empty samples of equal size"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `v ≡ c` for every row.
    struct Constant(Vec<f64>);

    impl VectorField for Constant {
        fn d_z(&self) -> usize {
            self.0.len()
        }
        fn cond_dim(&self) -> usize {
            0
        }
        fn velocity(&self, z: &Tensor, _t: &[f64], _c: &Tensor) -> Result<Tensor> {
            Tensor::matrix(z.rows(), self.0.len(), (0..z.rows()).flat_map(|_| self.0.clone()).collect())
        }
    }

    /// `v(z) = z`.
    struct Linear1;

    impl VectorField for Linear1 {
        fn d_z(&self) -> usize {
            1
        }
        fn cond_dim(&self) -> usize {
            0
        }
        fn velocity(&self, z: &Tensor, _t: &[f64], _c: &Tensor) -> Result<Tensor> {
            Ok(z.clone())
        }
    }

    /// The conditional field toward the data point passed as the condition.
    struct Conditional(f64);

    impl VectorField for Conditional {
        fn d_z(&self) -> usize {
            2
        }
        fn cond_dim(&self) -> usize {
            2
        }
        fn velocity(&self, z: &Tensor, t: &[f64], c: &Tensor) -> Result<Tensor> {
            let mut out = Vec::new();
            for (i, &ti) in t.iter().enumerate() {
                for j in 0..2 {
                    out.push(conditional_field(z.row(i)[j], c.row(i)[j], ti, self.0));
                }
            }
            Tensor::matrix(t.len(), 2, out)
        }
    }

    fn one(x: f64) -> Vec<f64> {
        vec![x]
    }

    #[test]
    fn path_examples() {
        assert_eq!(ot_point(&one(2.0), &one(4.0), 0.0, 0.1).unwrap(), one(2.0));
        assert_eq!(ot_point(&one(2.0), &one(4.0), 1.0, 0.0).unwrap(), one(4.0));
        assert!((ot_point(&one(2.0), &one(4.0), 0.5, 0.1).unwrap()[0] - 3.1).abs() < 1e-12);
        assert!((target_field(&one(2.0), &one(4.0), 0.1).unwrap()[0] - 2.2).abs() < 1e-12);
        assert_eq!(target_field(&one(2.0), &one(4.0), 0.0).unwrap(), one(2.0));
        assert!(ot_point(&one(0.0), &one(0.0), 1.5, 0.1).is_err());
        assert!(target_field(&[0.0, 1.0], &one(0.0), 0.1).is_err());
    }

    #[test]
    fn time_derivative_matches_target() {
        let (x0, x1, s) = (vec![0.3, -1.2], vec![2.0, 0.5], 0.05);
        let u = target_field(&x0, &x1, s).unwrap();
        let h = 1e-6;
        for t in [0.1, 0.37, 0.5, 0.9] {
            let a = ot_point(&x0, &x1, t + h, s).unwrap();
            let b = ot_point(&x0, &x1, t - h, s).unwrap();
            for j in 0..2 {
                assert!(((a[j] - b[j]) / (2.0 * h) - u[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn solvers_exact_on_constant_fields() {
        let c = Constant(vec![0.25, -1.5]);
        for solver in [Solver::Euler, Solver::Midpoint] {
            let cfg = FlowConfig { solver, steps: 7, ..Default::default() };
            let z = integrate(&c, Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), &no_condition(), &cfg).unwrap();
            assert!((z.data()[0] - 1.25).abs() < 1e-14 && (z.data()[1] - 0.5).abs() < 1e-14);
        }
        let bad = FlowConfig { steps: 0, ..Default::default() };
        assert!(integrate(&c, Tensor::matrix(1, 2, vec![0.0; 2]).unwrap(), &no_condition(), &bad).is_err());
    }

    #[test]
    fn euler_on_linear_field() {
        let cfg = FlowConfig { solver: Solver::Euler, steps: 100, ..Default::default() };
        let z = integrate(&Linear1, Tensor::matrix(1, 1, vec![1.0]).unwrap(), &no_condition(), &cfg).unwrap();
        assert!((z.data()[0] - 1.01f64.powi(100)).abs() < 1e-12);
        assert!((z.data()[0] - 2.70481).abs() < 1e-5);
    }

    #[test]
    fn convergence_orders() {
        let err = |solver, steps| {
            let cfg = FlowConfig { solver, steps, ..Default::default() };
            let z = integrate(&Linear1, Tensor::matrix(1, 1, vec![1.0]).unwrap(), &no_condition(), &cfg).unwrap();
            (z.data()[0] - std::f64::consts::E).abs()
        };
        let r_euler = err(Solver::Euler, 64) / err(Solver::Euler, 128);
        let r_mid = err(Solver::Midpoint, 64) / err(Solver::Midpoint, 128);
        assert!((r_euler.log2() - 1.0).abs() < 0.1, "{r_euler}");
        assert!((3.5..=4.5).contains(&r_mid), "{r_mid}");
    }

    #[test]
    fn exact_conditional_field_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z1 = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let loss = cfm_loss(&Conditional(1e-4), &z1, &z1, &FlowConfig::default(), &mut rng).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn zero_field_loss_is_gaussian_moment() {
        let zero = Constant(vec![0.0, 0.0, 0.0]);
        let z1 = vec![1.0, -2.0, 0.5];
        let n = 100_000;
        let batch = Tensor::matrix(n, 3, (0..n).flat_map(|_| z1.clone()).collect()).unwrap();
        let cfg = FlowConfig { sigma_min: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let loss = cfm_loss(&zero, &batch, &no_condition(), &cfg, &mut rng).unwrap();
        let want = z1.iter().map(|x| x * x).sum::<f64>() + 3.0;
        assert!((loss - want).abs() / want < 1e-2, "{loss} vs {want}");
    }

    #[test]
    fn point_mass_marginal_is_conditional() {
        let s = 1e-3;
        for (x, t) in [(0.3, 0.2), (-1.0, 0.7), (2.0, 0.95)] {
            let m = marginal_field_oracle(x, t, &TargetSpec::Points(vec![(1.0, 1.5)]), s).unwrap();
            assert!((m - conditional_field(x, 1.5, t, s)).abs() < 1e-12);
        }
        let sym = TargetSpec::Points(vec![(0.5, -1.0), (0.5, 1.0)]);
        assert!(marginal_field_oracle(0.0, 0.6, &sym, 1e-4).unwrap().abs() < 1e-12);
        assert!(marginal_field_oracle(0.0, 0.6, &TargetSpec::Points(vec![]), 1e-4).is_err());
    }

    #[test]
    fn gaussian_marginal_matches_posterior_mean() {
        // x1 ~ N(mu, s²) gives E[x1 | x_t = x] in closed form.
        let (mu, s, sig) = (0.7, 0.4, 1e-2);
        let spec = TargetSpec::Gaussians(vec![(1.0, mu, s)]);
        for (x, t) in [(0.0, 0.3), (1.2, 0.8), (-0.5, 0.5)] {
            let st = sigma_t(t, sig);
            let post = mu + t * s * s / (t * t * s * s + st * st) * (x - t * mu);
            let want = (post - (1.0 - sig) * x) / st;
            let got = marginal_field_oracle(x, t, &spec, sig).unwrap();
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn batch_sampling_is_chunk_independent() {
        let net = VectorFieldNet::with_width(2, 3, 8, 2, 4).unwrap();
        let conds: Vec<Vec<f64>> = (0..70).map(|i| vec![i as f64 / 70.0, 0.5, -0.25]).collect();
        let cfg = FlowConfig { steps: 5, ..Default::default() };
        let a = sample_batch(&conds, &net, &cfg, 11, Execution::Sequential).unwrap();
        let b = sample_batch(&conds, &net, &cfg, 11, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let mut rng = sample_rng(11, 40);
        assert_eq!(sample(&conds[40], &net, &cfg, &mut rng).unwrap(), a[40]);
    }

    #[test]
    fn wasserstein_of_shift() {
        assert!((wasserstein1(&[0.0, 1.0], &[1.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
    }
}
