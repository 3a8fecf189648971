//! EmoDM on a synthetic corpus whose listener emotion is a planted function
//! of the speaker emotion.

use empdial_core::config::ModelConfig;
use empdial_core::corpus::{build_vocab, make_all_examples, Dialogue, Role, Utterance};
use empdial_core::labels::{Emotion, Intent, NUM_EMOTIONS};
use empdial_core::model::Model;
use empdial_core::priors::{Priors, Smoothing};
use empdial_core::trainer::Trainer;
use empdial_core::TrainConfig;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CUES: [[&str; 4]; NUM_EMOTIONS] = [
    ["furious", "angry", "mad", "livid"],
    ["gross", "disgusting", "nasty", "revolting"],
    ["scared", "afraid", "terrified", "nervous"],
    ["happy", "thrilled", "glad", "delighted"],
    ["okay", "fine", "normal", "usual"],
    ["sad", "miserable", "heartbroken", "gloomy"],
    ["shocked", "amazed", "astonished", "stunned"],
];
const NOUNS: [&str; 6] = ["job", "trip", "car", "party", "exam", "neighbor"];
const FILLER: [&str; 6] = ["well", "honestly", "so", "today", "yesterday", "really"];

/// Planted shift: listener emotion is a fixed permutation of the speaker's.
fn planted(speaker: usize) -> usize {
    (3 * speaker + 1) % NUM_EMOTIONS
}

fn corpus(rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Vec<Dialogue> {
    (0..n)
        .map(|i| {
            let s = rng.random_range(0..NUM_EMOTIONS);
            let l = planted(s);
            let text = format!(
                "{} i am {} about the {} {}",
                FILLER.choose(rng).unwrap(),
                CUES[s].choose(rng).unwrap(),
                NOUNS.choose(rng).unwrap(),
                FILLER.choose(rng).unwrap()
            );
            Dialogue {
                id: format!("{tag}-{i}"),
                utterances: vec![
                    Utterance {
                        role: Role::Speaker,
                        text,
                        emotion: Emotion::ALL[s],
                        intents: Vec::new(),
                    },
                    Utterance {
                        role: Role::Listener,
                        text: format!("i see {}", NOUNS.choose(rng).unwrap()),
                        emotion: Emotion::ALL[l],
                        intents: vec![Intent::ALL[s]],
                    },
                ],
            }
        })
        .collect()
}

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let train = corpus(&mut rng, 400, "train");
    let test = corpus(&mut rng, 200, "test");
    let cfg = TrainConfig {
        lr: 1e-3,
        model: ModelConfig {
            d_model: 32,
            layers: 1,
            heads: 2,
            d_ff: 64,
            max_len: 32,
            max_target_len: 8,
            dropout: 0.0,
            soft_prior_lookup: false,
        },
        ..TrainConfig::default()
    };
    let vocab = build_vocab(&train, 1);
    let priors = Priors::build(&train, &[], Smoothing::None);
    let train_ex = make_all_examples(&train, &vocab, cfg.model.max_len);
    let test_ex = make_all_examples(&test, &vocab, cfg.model.max_len);
    let model = Model::new(cfg.model.clone(), vocab, priors, 1).unwrap();
    let batch = cfg.batch_size;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    for _ in 0..12 {
        order.shuffle(&mut rng);
        for b in order.chunks(batch) {
            let loss = trainer.emodm_step(&train_ex, b, 0.5).unwrap();
            if !loss.is_finite() {
                return Err("non-finite loss".into());
            }
        }
    }
    let model = trainer.into_model();
    let (mut listener, mut speaker) = (0, 0);
    for ex in &test_ex {
        let p = model.predict_state(&ex.context_ids).unwrap();
        listener += (p.listener == ex.gold.listener) as usize;
        speaker += (p.speaker == ex.gold.speaker) as usize;
    }
    let acc = listener as f64 / test_ex.len() as f64;
    let detail = format!(
        "held-out listener accuracy {:.3}, speaker accuracy {:.3} over {} examples",
        acc,
        speaker as f64 / test_ex.len() as f64,
        test_ex.len()
    );
    if acc >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
