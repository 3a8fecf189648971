use std::path::{Path, PathBuf};

use empdial_core::config::ModelConfig;
use empdial_core::corpus::{build_vocab, load_corpus, make_all_examples, Dialogue, Example};
use empdial_core::model::Model;
use empdial_core::priors::{Priors, Smoothing};

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

pub fn toy_train() -> Vec<Dialogue> {
    load_corpus(toy_dir().join("train.jsonl")).unwrap()
}

pub fn tiny_config(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        layers,
        heads: 2,
        d_ff: 2 * d,
        max_len: 40,
        max_target_len: 16,
        dropout: 0.0,
        soft_prior_lookup: false,
    }
}

/// Model over the toy vocabulary plus its training examples.
pub fn toy_model(cfg: ModelConfig, seed: u64) -> (Model<f32>, Vec<Example>) {
    let train = toy_train();
    let vocab = build_vocab(&train, 1);
    let examples = make_all_examples(&train, &vocab, cfg.max_len);
    let priors = Priors::build(&train, &[], Smoothing::None);
    (Model::new(cfg, vocab, priors, seed).unwrap(), examples)
}
