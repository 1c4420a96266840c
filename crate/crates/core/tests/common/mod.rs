#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use decrec::config::ExperimentConfig;
use decrec::dataset::{parse_interactions, preprocess, split_and_sample, synthetic_movielens, Dataset, Format};

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy200.dat")
}

/// A small synthetic dataset built in memory.
pub fn tiny_dataset(users: usize, items: usize, seed: u64) -> Arc<Dataset> {
    let text = synthetic_movielens(users, items, (12, 24), seed);
    let raw = parse_interactions(&text, Format::MovielensDat).unwrap();
    let pre = preprocess(&raw, 3).unwrap();
    Arc::new(split_and_sample(&pre, 0.8, 4, seed).unwrap())
}

/// Small network and neighborhood so a round takes milliseconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (k, v) in [
        ("dataset_path", "unused.dat"),
        ("embed_dim", "8"),
        ("layer_widths", "16,8"),
        ("neighbors", "5"),
        ("rounds", "6"),
        ("eval_every", "2"),
        ("top_k", "5"),
        ("num_targets", "2"),
        ("alpha", "8"),
        ("substitutes", "3"),
        ("shared_init", "true"),
        ("collab_lr", "1.0"),
        ("attack_lr", "0.1"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

pub fn with(mut c: ExperimentConfig, pairs: &[(&str, &str)]) -> ExperimentConfig {
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}
