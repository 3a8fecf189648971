//! Shift priors against a naive counting oracle on random corpora.

use empdial_core::corpus::{Dialogue, Role, Utterance};
use empdial_core::labels::{Emotion, Intent, NUM_EMOTIONS, NUM_INTENTS};
use empdial_core::priors::{build_emo_emo, build_emo_intent, ShiftMatrix, Smoothing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dialogue(rng: &mut ChaCha8Rng, id: String) -> Dialogue {
    let turns = rng.random_range(2..=7);
    let utterances = (0..turns)
        .map(|i| {
            let role = if i % 2 == 0 { Role::Speaker } else { Role::Listener };
            // Skewed emotions so some rows stay empty and hit the uniform rule.
            let e = rng.random_range(0..NUM_EMOTIONS).min(rng.random_range(0..NUM_EMOTIONS));
            let intents = if role == Role::Listener {
                let mut v: Vec<Intent> = Intent::ALL.iter().copied().filter(|_| rng.random_bool(0.25)).collect();
                if v.is_empty() {
                    v.push(Intent::ALL[rng.random_range(0..NUM_INTENTS)]);
                }
                v
            } else {
                Vec::new()
            };
            Utterance {
                role,
                text: format!("turn {i}"),
                emotion: Emotion::ALL[e],
                intents,
            }
        })
        .collect();
    Dialogue { id, utterances }
}

fn random_corpus(rng: &mut ChaCha8Rng, tag: &str) -> Vec<Dialogue> {
    let n = rng.random_range(0..=25);
    (0..n).map(|i| random_dialogue(rng, format!("{tag}-{i}"))).collect()
}

/// Double loop over adjacent turn pairs; zero rows become uniform.
fn oracle(dialogues: &[&Dialogue], intents: bool) -> Vec<Vec<f64>> {
    let cols = if intents { NUM_INTENTS } else { NUM_EMOTIONS };
    let mut counts = vec![vec![0u64; cols]; NUM_EMOTIONS];
    for d in dialogues {
        let u = &d.utterances;
        for i in 0..u.len().saturating_sub(1) {
            if u[i].role != Role::Speaker || u[i + 1].role != Role::Listener {
                continue;
            }
            let s = u[i].emotion.id();
            if intents {
                for it in &u[i + 1].intents {
                    counts[s][it.id()] += 1;
                }
            } else {
                counts[s][u[i + 1].emotion.id()] += 1;
            }
        }
    }
    counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                vec![1.0 / cols as f64; cols]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect()
}

fn compare(m: &ShiftMatrix, expected: &[Vec<f64>], what: &str) -> Result<(), String> {
    for (r, row) in expected.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            if m.get(r, c) != p {
                return Err(format!("{what}[{r}][{c}] = {} but oracle says {p}", m.get(r, c)));
            }
        }
        let sum: f64 = (0..m.cols()).map(|c| m.get(r, c)).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("{what} row {r} sums to {sum}"));
        }
    }
    Ok(())
}

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut total_dialogues = 0;
    for k in 0..100 {
        let train = random_corpus(&mut rng, "t");
        let valid = random_corpus(&mut rng, "v");
        total_dialogues += train.len() + valid.len();
        let all: Vec<&Dialogue> = train.iter().chain(&valid).collect();
        compare(&build_emo_emo(&train, &valid, Smoothing::None), &oracle(&all, false), &format!("corpus {k} emo-emo"))?;
        compare(&build_emo_intent(&train, &valid, Smoothing::None), &oracle(&all, true), &format!("corpus {k} emo-intent"))?;
    }
    Ok(format!("100 corpora, {total_dialogues} dialogues, exact match"))
}
