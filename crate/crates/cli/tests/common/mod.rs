#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use flowrag_cli::run_cli;
use tempfile::TempDir;

/// A generated corpus with a trained encoder and built indices.
pub struct Workspace {
    _dir: TempDir,
    data: PathBuf,
    model: PathBuf,
    index: PathBuf,
}

impl Workspace {
    pub fn new(dir: TempDir) -> Self {
        let root = dir.path().to_path_buf();
        Self {
            _dir: dir,
            data: root.join("data"),
            model: root.join("model").join("encoder.flrg"),
            index: root.join("index"),
        }
    }

    pub fn data(&self) -> &Path {
        &self.data
    }

    pub fn model(&self) -> &Path {
        &self.model
    }

    pub fn index(&self) -> &Path {
        &self.index
    }
}

pub fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("flowrag").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn prepare(dir: TempDir, seed: u64) -> Workspace {
    let ws = Workspace::new(dir);
    let seed = seed.to_string();
    assert_eq!(run(&["datagen", "--seed", &seed, "--out-dir", s(ws.data()), "--train", "200", "--test", "40"]), 0);
    let train = [
        "train-retriever", "--data-dir", s(ws.data()), "--out", s(ws.model()), "--learning-rate", "2", "--batch-size", "32",
        "--epochs", "10", "--negatives", "8", "--seed", &seed,
    ];
    assert_eq!(run(&train), 0);
    assert_eq!(run(&["build-index", "--model", s(ws.model()), "--data-dir", s(ws.data()), "--out-dir", s(ws.index())]), 0);
    ws
}

pub fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| prepare(tempfile::tempdir().unwrap(), 0))
}
