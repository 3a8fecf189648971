//! Overfitting the 8-dialogue toy corpus with the default model.

use std::time::Instant;

use empdial_core::corpus::{build_vocab, load_corpus, make_all_examples, EOS};
use empdial_core::model::Model;
use empdial_core::priors::Priors;
use empdial_core::respg::{SamplingOptions, StateTriple};
use empdial_core::trainer::{validation_nll, Trainer};
use empdial_core::TrainConfig;

use crate::common::toy_dir;

pub fn run() -> Result<String, String> {
    let start = Instant::now();
    let cfg = TrainConfig {
        warmup_epochs: 200,
        epochs: 100,
        ..TrainConfig::default()
    };
    let train = load_corpus(toy_dir().join("train.jsonl")).unwrap();
    let valid = load_corpus(toy_dir().join("valid.jsonl")).unwrap();
    let vocab = build_vocab(&train, cfg.min_freq);
    let priors = Priors::build(&train, &valid, cfg.smoothing);
    let train_ex = make_all_examples(&train, &vocab, cfg.model.max_len);
    let valid_ex = make_all_examples(&valid, &vocab, cfg.model.max_len);
    let model = Model::new(cfg.model.clone(), vocab, priors, cfg.seed).unwrap();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    trainer.fit(&train_ex, &valid_ex).map_err(|e| e.to_string())?;
    let steps = trainer.steps();
    let model = trainer.into_model();

    let nll = validation_nll(&model, &train_ex).unwrap();
    let greedy = SamplingOptions::greedy(model.config.max_target_len);
    let mut exact = 0;
    let mut exact_gold = 0;
    for (i, ex) in train_ex.iter().enumerate() {
        let gold: Vec<usize> = ex.target_ids.iter().copied().filter(|&t| t != EOS).collect();
        let predicted = StateTriple::from(&model.predict_state(&ex.context_ids).unwrap());
        if model.generate_topk(&ex.context_ids, &predicted, &greedy, i as u64).unwrap().ids == gold {
            exact += 1;
        }
        let g = StateTriple::from(&ex.gold);
        if model.generate_topk(&ex.context_ids, &g, &greedy, i as u64).unwrap().ids == gold {
            exact_gold += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{steps} steps, train NLL {nll:.4}, greedy exact {exact}/{} (gold states {exact_gold}/{}), {secs:.0}s",
        train_ex.len(),
        train_ex.len()
    );
    if steps <= 500 && nll < 0.1 && exact == train_ex.len() && train_ex.len() == 8 && secs < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
