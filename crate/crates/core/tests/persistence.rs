use mmflow_core::checkpoint::Checkpoint;
use mmflow_core::config::RunConfig;
use mmflow_core::corpus;
use mmflow_core::exec::Execution;
use mmflow_core::flowmatch::VectorFieldNet;
use mmflow_core::signal::SignalConfig;
use mmflow_core::tensor::Module;
use mmflow_core::Error;
use proptest::prelude::*;

/// Magnitude of the DFT of `x` at `freq` Hz, by direct summation.
fn dft_magnitude(x: &[f64], sample_rate: f64, freq: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq / sample_rate;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        let a = w * n as f64;
        re += v * a.cos();
        im -= v * a.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn clip_spectra_peak_at_the_root() {
    let cfg = SignalConfig::default();
    let items = corpus::generate("fft", 12, 21, &cfg, Execution::Parallel).unwrap();
    let sr = cfg.sample_rate as f64;
    for it in &items {
        let samples = it.clip.samples();
        let root = it.spec.root_freq;
        // Whole-hertz scan around the root and its first overtones.
        let mut best = (0.0, f64::MIN);
        let lo = (root * 0.8).floor() as i64;
        let hi = (root * 2.1).ceil() as i64;
        for f in lo..=hi {
            let m = dft_magnitude(samples, sr, f as f64);
            if m > best.1 {
                best = (f as f64, m);
            }
        }
        let bin = sr / samples.len() as f64;
        assert!((best.0 - root).abs() <= bin, "{}: peak {} Hz, root {root} Hz", it.id, best.0);
    }
}

#[test]
fn corpus_is_reproducible_on_disk() {
    let cfg = SignalConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let items = corpus::generate("d", 10, 4, &cfg, Execution::Parallel).unwrap();
    let again = corpus::generate("d", 10, 4, &cfg, Execution::Sequential).unwrap();
    let rows_a = corpus::write(&items, a.path()).unwrap();
    let rows_b = corpus::write(&again, b.path()).unwrap();
    assert_eq!(rows_a.len(), 10);
    assert_eq!(rows_a, rows_b);
    let manifest = |d: &std::path::Path| std::fs::read(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    for r in &rows_a {
        let wav = |d: &std::path::Path| std::fs::read(d.join(&r.music_ref)).unwrap();
        assert_eq!(wav(a.path()), wav(b.path()));
    }
    let loaded = corpus::load(a.path(), &cfg, Execution::Parallel).unwrap();
    assert_eq!(loaded.len(), 10);
    assert_eq!(loaded[7].caption, items[7].caption);
    let other_rate = SignalConfig { sample_rate: 22_050, ..cfg };
    assert!(corpus::load(a.path(), &other_rate, Execution::Sequential).is_err());
}

fn params(m: &dyn Module) -> Vec<f64> {
    m.parameters().iter().flat_map(|p| p.tensor.data().to_vec()).collect()
}

#[test]
fn checkpoint_round_trips_at_f32() {
    let net = VectorFieldNet::with_width(3, 5, 16, 2, 1).unwrap();
    let ck = Checkpoint::from_modules("flow", &[&net], "abc").with_meta("d_z", 3.into());
    let bytes = ck.to_bytes().unwrap();
    let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
    let declared: usize = ck.header.shapes.iter().map(|e| e.len()).sum();
    assert_eq!(bytes.len() - header_len, 4 * declared);

    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let mut fresh = VectorFieldNet::with_width(3, 5, 16, 2, 99).unwrap();
    assert_ne!(params(&fresh), params(&net));
    back.restore(&mut fresh).unwrap();
    let want: Vec<f64> = params(&net).iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(params(&fresh), want);

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Format(_))));
    let mut wider = VectorFieldNet::with_width(3, 5, 32, 2, 1).unwrap();
    assert!(back.restore(&mut wider).is_err());
}

#[test]
fn config_files_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"seed": 9, "dim": 64}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.seed, cfg.dim, cfg.n_train), (9, 64, 2048));
    std::fs::write(&path, r#"{"seed": 9, "dimension": 64}"#).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    assert!(matches!(RunConfig::load(&dir.path().join("missing.json")), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn config_hash_tracks_content(seed in 0u64..1000, dim in 8usize..600) {
        let a = RunConfig { seed, dim, ..RunConfig::default() };
        let json = serde_json::to_string(&a).unwrap();
        let b: RunConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: seed + 1, ..a.clone() };
        prop_assert_ne!(a.hash(), c.hash());
    }
}
