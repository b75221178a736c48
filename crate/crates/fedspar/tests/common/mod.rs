#![allow(dead_code)]

use std::path::PathBuf;

pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FEDSPAR_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")));
    dir.join("train-labels-idx1-ubyte")
        .exists()
        .then_some(dir.clone())
        .or_else(|| dir.join("train-labels-idx1-ubyte.gz").exists().then_some(dir))
}

pub fn preset(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/presets")).join(format!("{name}.toml"))
}

pub fn presets() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/presets"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    v.sort();
    v
}
