//! Joint-stage weight sweep: trains the shared stages once, then for each
//! `lambda` fine-tunes a copy of the generator and adapters and reports the
//! final losses and per-subset chord accuracy.
//!
//! cargo run --release --example lambda_sweep -- 0 0.1 1

use std::time::Instant;

use mmflow_core::config::RunConfig;
use mmflow_core::corpus;
use mmflow_core::encoders::EncoderBackend;
use mmflow_core::pipeline::{
    calibrate_oracle, conditioning_accuracy, embed_items, flow_samples, train_align_stage, train_autoencoder_stage,
    train_generation_stage, train_joint_stage, Synthesizer,
};

fn main() -> mmflow_core::Result<()> {
    let lambdas: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let lambdas = if lambdas.is_empty() { vec![0.0, 0.1, 1.0] } else { lambdas };

    let cfg = RunConfig { dim: 128, ..RunConfig::default() };
    let exec = cfg.execution();
    let start = Instant::now();
    let (train, val) = corpus::splits(cfg.n_train, cfg.n_val, cfg.seed, &cfg.signal, exec)?;
    let encoder = EncoderBackend::from_config(&cfg.backend, cfg.dim, cfg.seed)?;
    let train_emb = embed_items(&train, &encoder, exec)?;
    let val_emb = embed_items(&val, &encoder, exec)?;
    let (ae, _) = train_autoencoder_stage(&train, &cfg)?;
    let (adapters, _) = train_align_stage(&train_emb, &cfg)?;
    let flow_train = flow_samples(&ae, &train, &train_emb)?;
    let (net, _) = train_generation_stage(&flow_train, &adapters, ae.d_z(), &cfg)?;
    let synth = Synthesizer::new(&ae, &cfg)?;
    let oracle = calibrate_oracle(&synth, &train[..512.min(train.len())])?;
    println!("shared stages: {:.0}s", start.elapsed().as_secs_f64());

    println!("lambda,l_g,l_a,min_accuracy,mean_accuracy");
    for lambda in lambdas {
        let cfg = RunConfig { lambda, ..cfg.clone() };
        let (mut net, mut adapters) = (net.clone(), adapters.clone());
        let hist = train_joint_stage(&flow_train, &mut net, &mut adapters, &cfg)?;
        let acc = conditioning_accuracy(&synth, &net, &adapters, &val, &val_emb, &oracle, cfg.seed)?;
        let min = acc.iter().map(|a| a.accuracy).fold(1.0, f64::min);
        let mean = acc.iter().map(|a| a.accuracy).sum::<f64>() / acc.len() as f64;
        println!(
            "{lambda},{:.4},{:.4},{min:.3},{mean:.3}",
            hist.generation.last().copied().unwrap_or(f64::NAN),
            hist.alignment.last().copied().unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
