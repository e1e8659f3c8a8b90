use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;

use mmflow_core::agents::{run_workflow, write_quadruples, AgentBackends, ImageInput, PoolClip};
use mmflow_core::align::{ConditionSet, MaskPattern};
use mmflow_core::config::RunConfig;
use mmflow_core::corpus::{self, CorpusItem};
use mmflow_core::encoders::{Encoder, EncoderBackend, Modality};
use mmflow_core::eval::{
    condition_score, fit_gaussian, frechet_distance, gaussian_kl, write_ablation_csv,
};
use mmflow_core::pipeline::{
    calibrate_oracle, conditioning_accuracy, embed_items, flow_samples, run_ablation, train_align_stage,
    train_autoencoder_stage, train_generation_stage, train_joint_stage, AblationInputs, StageSeeds, Synthesizer,
};
use mmflow_core::signal::{read_wav, write_wav, AudioClip};
use mmflow_core::Error;

use crate::store::{Store, ALIGN, AUTOENCODER, GEN, JOINT};

/// Items used to calibrate the chord oracle.
const CALIBRATION_ITEMS: usize = 512;

fn split_dir(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.paths.corpus.join(split)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<CorpusItem>> {
    let dir = split_dir(cfg, split);
    if !dir.join("manifest.jsonl").is_file() {
        return Err(Error::Dependency(format!("synth-data ({} has no manifest)", dir.display())).into());
    }
    let items = corpus::load(&dir, &cfg.signal, cfg.execution())
        .with_context(|| format!("loading corpus split {}", dir.display()))?;
    info!("loaded {} items from {}", items.len(), dir.display());
    Ok(items)
}

fn encoder(cfg: &RunConfig) -> Result<EncoderBackend> {
    Ok(EncoderBackend::from_config(&cfg.backend, cfg.dim, cfg.seed)?)
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let (train, val) = corpus::splits(cfg.n_train, cfg.n_val, cfg.seed, &cfg.signal, cfg.execution())?;
    for (name, items) in [("train", &train), ("val", &val)] {
        let dir = split_dir(cfg, name);
        corpus::write(items, &dir).with_context(|| format!("writing {}", dir.display()))?;
        println!("wrote {} items to {}", items.len(), dir.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, stage: &str) -> Result<()> {
    let store = Store::new(cfg);
    match stage {
        AUTOENCODER => {
            let items = load_split(cfg, "train")?;
            let (ae, hist) = train_autoencoder_stage(&items, cfg)?;
            store.save_autoencoder(&ae)?;
            let log = store.write_loss_csv(AUTOENCODER, "loss", &[&hist])?;
            println!("autoencoder: loss {:.5} -> {:.5} ({})", hist[0], hist[hist.len() - 1], log.display());
        }
        ALIGN => {
            let items = load_split(cfg, "train")?;
            let data = embed_items(&items, &encoder(cfg)?, cfg.execution())?;
            let (adapters, hist) = train_align_stage(&data, cfg)?;
            store.save_adapters(&adapters)?;
            let log = store.write_loss_csv(ALIGN, "l_a", &[&hist])?;
            println!("align: L_A {:.5} -> {:.5} ({})", hist[0], hist[hist.len() - 1], log.display());
        }
        GEN => {
            store.require_all(&[ALIGN, AUTOENCODER])?;
            let ae = store.load_autoencoder()?;
            let adapters = store.load_adapters(ALIGN)?;
            let items = load_split(cfg, "train")?;
            let data = flow_samples(&ae, &items, &embed_items(&items, &encoder(cfg)?, cfg.execution())?)?;
            let (net, hist) = train_generation_stage(&data, &adapters, ae.d_z(), cfg)?;
            store.save_flow(GEN, &net, None)?;
            let log = store.write_loss_csv(GEN, "l_g", &[&hist])?;
            println!("gen: L_G {:.5} -> {:.5} ({})", hist[0], hist[hist.len() - 1], log.display());
        }
        JOINT => {
            store.require_all(&[AUTOENCODER, ALIGN, GEN])?;
            let ae = store.load_autoencoder()?;
            let mut adapters = store.load_adapters(ALIGN)?;
            let mut net = store.load_flow(GEN)?;
            let items = load_split(cfg, "train")?;
            let data = flow_samples(&ae, &items, &embed_items(&items, &encoder(cfg)?, cfg.execution())?)?;
            let hist = train_joint_stage(&data, &mut net, &mut adapters, cfg)?;
            store.save_flow(JOINT, &net, Some(&adapters))?;
            let log = store.write_loss_csv(JOINT, "l_g,l_a,l_j", &[&hist.generation, &hist.alignment, &hist.total])?;
            let last = hist.total.len() - 1;
            println!(
                "joint: L_G {:.5} -> {:.5}, L_A {:.5} -> {:.5} ({})",
                hist.generation[0],
                hist.generation[last],
                hist.alignment[0],
                hist.alignment[last],
                log.display()
            );
        }
        other => return Err(Error::Config(format!("unknown stage {other:?}")).into()),
    }
    Ok(())
}

/// A literal value, or the contents of a file when written as `@path`.
pub fn read_arg(value: &str) -> Result<String> {
    match value.strip_prefix('@') {
        Some(path) => Ok(std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?.trim().to_string()),
        None => Ok(value.to_string()),
    }
}

#[derive(Serialize)]
struct GeneratedRow<'a> {
    file: String,
    image: Option<&'a str>,
    story: Option<&'a str>,
    caption: Option<&'a str>,
    seed: u64,
    index: usize,
}

pub struct GenerateArgs {
    pub image: Option<String>,
    pub story: Option<String>,
    pub caption: Option<String>,
    pub n: usize,
    pub out: PathBuf,
}

pub fn generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    if args.image.is_none() && args.story.is_none() && args.caption.is_none() {
        return Err(Error::Contract("at least one of --image, --story, --caption is required".into()).into());
    }
    if args.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()).into());
    }
    let store = Store::new(cfg);
    store.require_all(&[AUTOENCODER])?;
    let ae = store.load_autoencoder()?;
    let (net, adapters) = store.load_generator()?;
    let enc = encoder(cfg)?;
    let embed = |m: Modality, v: &Option<String>| v.as_deref().map(|s| enc.encode_condition(m, s)).transpose();
    let conds = ConditionSet::new(
        embed(Modality::Image, &args.image)?,
        embed(Modality::Story, &args.story)?,
        embed(Modality::Caption, &args.caption)?,
    )?;
    let e_f = adapters.fuse(&conds)?.vector;
    let synth = Synthesizer::new(&ae, cfg)?;
    let clips = synth.generate(&net, &vec![e_f; args.n], StageSeeds::new(cfg.seed).sampling)?;
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let file = format!("gen_{i:03}.wav");
        write_wav(&args.out.join(&file), clip)?;
        let row = GeneratedRow {
            file,
            image: args.image.as_deref(),
            story: args.story.as_deref(),
            caption: args.caption.as_deref(),
            seed: cfg.seed,
            index: i,
        };
        manifest.push_str(&serde_json::to_string(&row)?);
        manifest.push('\n');
    }
    std::fs::write(args.out.join("manifest.jsonl"), manifest)?;
    println!("wrote {} clip(s) for conditions [{}] to {}", clips.len(), conds.mask().label(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SubsetReport {
    subset: String,
    chord_accuracy: f64,
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    source: &'static str,
    n: usize,
    frechet: f64,
    kl: f64,
    condition_score: f64,
    subsets: Vec<SubsetReport>,
}

pub fn evaluate(cfg: &RunConfig, split: &str, ground_truth: bool) -> Result<()> {
    let items = load_split(cfg, split)?;
    let enc = encoder(cfg)?;
    let exec = cfg.execution();
    let data = embed_items(&items, &enc, exec)?;
    let reference: Vec<Vec<f64>> = data.iter().map(|s| s.target.clone()).collect();
    let targets = data.iter().map(|s| s.target_embedding()).collect::<mmflow_core::Result<Vec<_>>>()?;

    let (clips, subsets): (Vec<AudioClip>, Vec<SubsetReport>) = if ground_truth {
        (items.iter().map(|it| it.clip.clone()).collect(), Vec::new())
    } else {
        let store = Store::new(cfg);
        store.require_all(&[AUTOENCODER])?;
        let ae = store.load_autoencoder()?;
        let (net, adapters) = store.load_generator()?;
        let synth = Synthesizer::new(&ae, cfg)?;
        let train = load_split(cfg, "train")?;
        let oracle = calibrate_oracle(&synth, &train[..train.len().min(CALIBRATION_ITEMS)])?;
        let seed = StageSeeds::new(cfg.seed).sampling;
        let acc = conditioning_accuracy(&synth, &net, &adapters, &items, &data, &oracle, seed)?;
        let full = mmflow_core::align::fuse_batch(&adapters, &data, MaskPattern::KEEP_ALL)?;
        let clips = synth.generate(&net, &full, seed)?;
        let subsets = acc.iter().map(|a| SubsetReport { subset: a.mask.label(), chord_accuracy: a.accuracy }).collect();
        (clips, subsets)
    };
    let generated: Vec<Vec<f64>> = exec.try_map(&clips, |c| Ok::<_, Error>(enc.encode_music(c)?.vector))?;
    let (g, r) = (fit_gaussian(&generated)?, fit_gaussian(&reference)?);
    let report = EvalReport {
        split: split.to_string(),
        source: if ground_truth { "ground_truth" } else { "generated" },
        n: items.len(),
        frechet: frechet_distance(&g, &r)?,
        kl: gaussian_kl(&g, &r)?,
        condition_score: condition_score(&clips, &targets, &enc, exec)?,
        subsets,
    };
    std::fs::create_dir_all(&cfg.paths.reports)?;
    let path = cfg.paths.reports.join(format!("eval_{split}_{}.json", report.source));
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{split} ({}): frechet {:.6}, kl {:.6}, condition score {:.4}",
        report.source, report.frechet, report.kl, report.condition_score
    );
    for s in &report.subsets {
        println!("  {:<22} chord accuracy {:.3}", s.subset, s.chord_accuracy);
    }
    println!("report: {}", path.display());
    Ok(())
}

/// WAV files of a directory, sorted by file name.
fn read_pool(dir: &Path) -> Result<Vec<PoolClip>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let clip = read_wav(&p).with_context(|| format!("reading {}", p.display()))?;
            let music_ref = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(PoolClip { music_ref, clip })
        })
        .collect()
}

pub struct AnnotateArgs {
    pub images: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn annotate(cfg: &RunConfig, args: &AnnotateArgs) -> Result<()> {
    let images_path = args.images.clone().unwrap_or_else(|| split_dir(cfg, "train").join("manifest.jsonl"));
    let pool_dir = args.pool.clone().unwrap_or_else(|| split_dir(cfg, "train"));
    if !images_path.is_file() {
        return Err(Error::Dependency(format!("synth-data ({} not found)", images_path.display())).into());
    }
    let source = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "images".into());
    let images: Vec<ImageInput> = corpus::read_manifest(&images_path)?
        .into_iter()
        .map(|r| ImageInput { image_ref: r.id, descriptor: r.image, source: source.clone() })
        .collect();
    let pool = read_pool(&pool_dir)?;
    let agents = AgentBackends::from_config(&cfg.agents)?;
    let report = run_workflow(&images, &pool, &agents, &cfg.agents, cfg.execution())?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.reports.join("quadruples.jsonl"));
    write_quadruples(&out, &report.quadruples())?;
    let table = report.stats.table();
    let stats_path = out.with_file_name("dataset_stats.txt");
    std::fs::write(&stats_path, &table)?;
    println!(
        "accepted {}/{} ({:.1}%) -> {}",
        report.accepted(),
        images.len(),
        100.0 * report.acceptance_rate(),
        out.display()
    );
    print!("{table}");
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let store = Store::new(cfg);
    store.require_all(&[AUTOENCODER, ALIGN])?;
    let ae = store.load_autoencoder()?;
    let aligned = store.load_adapters(ALIGN)?;
    let enc = encoder(cfg)?;
    let exec = cfg.execution();
    let train = load_split(cfg, "train")?;
    let val = load_split(cfg, "val")?;
    let train_data = flow_samples(&ae, &train, &embed_items(&train, &enc, exec)?)?;
    let val_data = flow_samples(&ae, &val, &embed_items(&val, &enc, exec)?)?;
    let synth = Synthesizer::new(&ae, cfg)?;
    let inputs = AblationInputs { train: &train_data, val: &val_data, aligned: &aligned, encoder: &enc, synth: &synth };
    let rows = run_ablation(&inputs, cfg, cfg.seed)?;
    std::fs::create_dir_all(&cfg.paths.reports)?;
    let path = cfg.paths.reports.join(format!("ablation_seed{}.csv", cfg.seed));
    write_ablation_csv(&rows, &path)?;
    for r in &rows {
        println!("{:<24} epoch {:>4}  condition score {:.4}  frechet {:.4}", r.arm.name(), r.epoch, r.condition_score, r.frechet);
    }
    println!("report: {}", path.display());
    Ok(())
}
