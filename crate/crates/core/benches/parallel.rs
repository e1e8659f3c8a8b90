use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mmflow_core::agents::{MockScorer, PoolClip, ScoredPool};
use mmflow_core::corpus;
use mmflow_core::exec::Execution;
use mmflow_core::flowmatch::{sample_batch, FlowConfig, VectorFieldNet};
use mmflow_core::latent::{Autoencoder, AutoencoderConfig};
use mmflow_core::signal::{SignalConfig, Vocoder};
use mmflow_core::tensor::Tensor;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn sampling(c: &mut Criterion) {
    let net = VectorFieldNet::new(32, 64, 1).unwrap();
    let conds = vec![vec![0.1; 64]; 64];
    let flow = FlowConfig { steps: 20, ..FlowConfig::default() };
    let mut g = c.benchmark_group("sample_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_batch(&conds, &net, &flow, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn vocoding(c: &mut Criterion) {
    let signal = SignalConfig::default();
    let frames = signal.n_frames(signal.sample_rate as usize);
    let ae = Autoencoder::new(frames, signal, &AutoencoderConfig::default(), 1).unwrap();
    let mels = ae.decode_batch(&Tensor::from_rows(&vec![vec![0.2; ae.d_z()]; 16]).unwrap()).unwrap();
    let vocoder = Vocoder::new(&signal).unwrap();
    let mut g = c.benchmark_group("griffin_lim_16_clips");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.try_map(&mels, |m| vocoder.reconstruct(m, 16).map(|o| o.clip)).unwrap())
        });
    }
    g.finish();
}

fn pool_scoring(c: &mut Criterion) {
    let signal = SignalConfig::default();
    let items = corpus::generate("bench", 64, 3, &signal, Execution::Parallel).unwrap();
    let pool: Vec<PoolClip> = items.into_iter().map(|it| PoolClip { music_ref: it.id, clip: it.clip }).collect();
    let mut g = c.benchmark_group("score_pool_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| ScoredPool::new(&pool, &MockScorer, exec).unwrap().embeddings.len())
        });
    }
    g.finish();
}

criterion_group!(benches, sampling, vocoding, pool_scoring);
criterion_main!(benches);
