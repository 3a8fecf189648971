//! Annotated dialogue ingestion, tokenization, vocabulary and example
//! construction.
//!
//! Corpus files hold one JSON dialogue per line:
//!
//! ```json
//! {"id": "d1", "turns": [
//!   {"role": "speaker", "text": "I lost my keys.", "emotion": "sadness"},
//!   {"role": "listener", "text": "Oh no!", "emotion": "surprise", "intents": ["sympathizing"]}
//! ]}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{intent_set, Emotion, Intent, IntentSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    pub emotion: Emotion,
    /// Non-empty for listener turns, empty for speaker turns.
    pub intents: Vec<Intent>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    /// Checks role alternation (speaker first), minimum length, non-empty
    /// text and the intents-iff-listener rule.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidDialogue {
            id: self.id.clone(),
            message,
        };
        if self.utterances.len() < 2 {
            return Err(bad(format!("needs at least 2 turns, has {}", self.utterances.len())));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::Speaker } else { Role::Listener };
            if u.role != expected {
                return Err(bad(format!("turn {i} should be {expected:?} (roles must alternate starting with speaker)")));
            }
            if u.text.trim().is_empty() {
                return Err(bad(format!("turn {i} has empty text")));
            }
            match u.role {
                Role::Listener if u.intents.is_empty() => {
                    return Err(bad(format!("listener turn {i} has no intents")));
                }
                Role::Speaker if !u.intents.is_empty() => {
                    return Err(bad(format!("speaker turn {i} carries intents")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Adjacent (speaker turn, following listener turn) pairs.
    pub fn exchanges(&self) -> impl Iterator<Item = (&Utterance, &Utterance)> {
        self.utterances.chunks_exact(2).map(|p| (&p[0], &p[1]))
    }
}

#[derive(Deserialize)]
struct RawTurn {
    role: Role,
    text: String,
    emotion: String,
    #[serde(default)]
    intents: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
}

fn parse_dialogue(line: &str) -> Result<Dialogue> {
    let raw: RawDialogue = serde_json::from_str(line).map_err(|e| Error::Input(e.to_string()))?;
    let mut utterances = Vec::with_capacity(raw.turns.len());
    for t in raw.turns {
        let intents = t
            .intents
            .unwrap_or_default()
            .iter()
            .map(|s| s.parse::<Intent>())
            .collect::<Result<Vec<_>>>()?;
        let mut intents = intents;
        intents.sort();
        intents.dedup();
        utterances.push(Utterance {
            role: t.role,
            text: t.text,
            emotion: t.emotion.parse()?,
            intents,
        });
    }
    let d = Dialogue {
        id: raw.id,
        utterances,
    };
    d.validate()?;
    Ok(d)
}

/// Parses corpus text. Errors carry the 1-based line number.
pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d = parse_dialogue(line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Record { line, message } => Error::Record {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Serializes dialogues back to the line format.
pub fn write_corpus(dialogues: &[Dialogue]) -> String {
    let mut out = String::new();
    for d in dialogues {
        let turns: Vec<serde_json::Value> = d
            .utterances
            .iter()
            .map(|u| {
                let mut t = serde_json::json!({
                    "role": u.role,
                    "text": u.text,
                    "emotion": u.emotion.name(),
                });
                if u.role == Role::Listener {
                    t["intents"] = u.intents.iter().map(|i| i.name()).collect();
                }
                t
            })
            .collect();
        out.push_str(&serde_json::json!({"id": d.id, "turns": turns}).to_string());
        out.push('\n');
    }
    out
}

/// Lowercases, splits on whitespace and makes every punctuation character
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SPK: usize = 3;
pub const LST: usize = 4;
pub const EOS: usize = 5;
pub const RESERVED: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SPK]", "[LST]", "[EOS]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an id-ordered token list whose first entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Input("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by `words` in order.
    pub fn with_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Tokens for the non-reserved ids, in order.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !Self::is_reserved(id))
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }
}

/// Vocabulary over every turn of `dialogues`; tokens seen fewer than
/// `min_freq` times map to `[UNK]`. Ids follow (frequency desc, token asc).
pub fn build_vocab(dialogues: &[Dialogue], min_freq: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in dialogues {
        for u in &d.utterances {
            for t in tokenize(&u.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens).expect("reserved prefix and unique tokens by construction")
}

/// Gold emotion-state triple for one listener turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldState {
    pub speaker: Emotion,
    pub listener: Emotion,
    pub intents: IntentSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub dialogue_id: String,
    /// Index of the listener turn this example targets.
    pub turn: usize,
    /// `[CLS]` followed by role-tagged history turns.
    pub context_ids: Vec<usize>,
    /// Response ids ending with `[EOS]`.
    pub target_ids: Vec<usize>,
    pub gold: GoldState,
}

/// Flattens turns into `[CLS] [SPK] … [LST] … [SPK] …`, dropping whole
/// oldest turns until the sequence fits `max_len`. `None` when not even the
/// newest turn fits.
pub fn flatten_context<'t>(
    turns: impl DoubleEndedIterator<Item = (Role, &'t str)>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Option<Vec<usize>> {
    let mut kept: Vec<Vec<usize>> = Vec::new();
    let mut len = 1;
    for (role, text) in turns.rev() {
        let mut piece = vec![if role == Role::Speaker { SPK } else { LST }];
        piece.extend(vocab.encode(text));
        if len + piece.len() > max_len {
            break;
        }
        len += piece.len();
        kept.push(piece);
    }
    if kept.is_empty() {
        return None;
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    for piece in kept.into_iter().rev() {
        ids.extend(piece);
    }
    Some(ids)
}

/// One example per listener turn `l_t`, with context `s_0 … s_t`.
pub fn make_examples(dialogue: &Dialogue, vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for (t, pair) in dialogue.utterances.chunks_exact(2).enumerate() {
        let (speaker, listener) = (&pair[0], &pair[1]);
        let history = dialogue.utterances[..=2 * t].iter().map(|u| (u.role, u.text.as_str()));
        let Some(context_ids) = flatten_context(history, vocab, max_len) else {
            log::warn!(
                "dialogue {}: turn {} context does not fit max_len {max_len}; skipped",
                dialogue.id,
                2 * t + 1
            );
            continue;
        };
        let mut target_ids = vocab.encode(&listener.text);
        target_ids.push(EOS);
        out.push(Example {
            dialogue_id: dialogue.id.clone(),
            turn: 2 * t + 1,
            context_ids,
            target_ids,
            gold: GoldState {
                speaker: speaker.emotion,
                listener: listener.emotion,
                intents: intent_set(&listener.intents),
            },
        });
    }
    out
}

pub fn make_all_examples(dialogues: &[Dialogue], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    dialogues.iter().flat_map(|d| make_examples(d, vocab, max_len)).collect()
}
