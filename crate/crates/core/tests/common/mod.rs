#![allow(dead_code)]

use std::path::Path;

use empdial_core::config::ModelConfig;
use empdial_core::corpus::{build_vocab, load_corpus, make_all_examples, Dialogue, Example};
use empdial_core::model::Model;
use empdial_core::priors::{Priors, Smoothing};

pub fn toy(split: &str) -> Vec<Dialogue> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy");
    load_corpus(dir.join(format!("{split}.jsonl"))).unwrap()
}

pub fn small(d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        layers: 1,
        heads: 2,
        d_ff: 2 * d,
        max_len: 40,
        max_target_len: 16,
        dropout: 0.0,
        soft_prior_lookup: false,
    }
}

pub fn toy_model(cfg: ModelConfig, seed: u64) -> (Model<f32>, Vec<Example>) {
    let train = toy("train");
    let vocab = build_vocab(&train, 1);
    let examples = make_all_examples(&train, &vocab, cfg.max_len);
    (Model::new(cfg, vocab, Priors::build(&train, &[], Smoothing::None), seed).unwrap(), examples)
}
