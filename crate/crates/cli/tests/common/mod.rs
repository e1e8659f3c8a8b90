#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

/// A scratch workspace with its own config file and output directories.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
}

/// Small enough that the whole pipeline runs in seconds.
pub fn tiny_config(root: &Path) -> Value {
    json!({
        "seed": 3,
        "dim": 32,
        "n_train": 48,
        "n_val": 16,
        "autoencoder": { "epochs": 3, "batch_size": 16 },
        "align": { "epochs": 2 },
        "generation": { "epochs": 2 },
        "joint": { "epochs": 2 },
        "flow": { "steps": 4 },
        "griffin_lim_iters": 4,
        "ablation": { "epochs": 2, "eval_every": 1, "eval_items": 16 },
        "paths": {
            "corpus": root.join("corpus"),
            "checkpoints": root.join("checkpoints"),
            "reports": root.join("reports"),
        }
    })
}

impl Workspace {
    pub fn new() -> Self {
        Self::with_config(|_| {})
    }

    pub fn with_config(edit: impl FnOnce(&mut Value)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        edit(&mut cfg);
        let config = dir.path().join("config.json");
        std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Self { dir, config }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    pub fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmflow"));
        cmd.arg("--config").arg(&self.config).args(args).env_remove("MMFLOW_SEED").env_remove("RUST_LOG");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().expect("failed to launch mmflow")
    }

    /// Runs a command that must succeed.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "mmflow {args:?} failed ({:?}):\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    /// synth-data followed by all four training stages.
    pub fn train_all(&self) {
        self.ok(&["synth-data"]);
        for stage in ["autoencoder", "align", "gen", "joint"] {
            self.ok(&["train", "--stage", stage]);
        }
    }
}

pub fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every regular file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().flatten().map(|e| e.path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
