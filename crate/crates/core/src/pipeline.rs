//! End-to-end inference: state prediction, decoding and test-set reports.

use empdial_autograd::Scalar;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_context, Example, Role, EOS};
use crate::emodm::EmotionStatePrediction;
use crate::error::{Error, Result};
use crate::labels::NUM_EMOTIONS;
use crate::metrics::{GenerationReport, StatePredictions, StateReport};
use crate::model::Model;
use crate::respg::{SamplingOptions, StateTriple};

/// One listener turn produced from a dialogue history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub response: String,
    pub response_ids: Vec<usize>,
    pub state: EmotionStatePrediction,
    pub gate: f64,
    pub seed: u64,
}

impl<T: Scalar> Model<T> {
    /// Flattens `history` (oldest first) the same way training examples are
    /// built.
    pub fn context_for<'h>(&self, history: impl DoubleEndedIterator<Item = (Role, &'h str)>) -> Result<Vec<usize>> {
        flatten_context(history, &self.vocab, self.config.max_len)
            .ok_or_else(|| Error::Input(format!("latest turn does not fit max_len {}", self.config.max_len)))
    }

    /// Predicts the emotion state for `context_ids` and decodes a response
    /// conditioned on it.
    pub fn respond(&self, context_ids: &[usize], opts: &SamplingOptions, seed: u64) -> Result<ChatTurn> {
        let state = self.predict_state(context_ids)?;
        let g = self.generate_topk(context_ids, &StateTriple::from(&state), opts, seed)?;
        Ok(ChatTurn {
            response: self.vocab.detokenize(&g.ids),
            response_ids: g.ids,
            state,
            gate: g.gate,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub sampling: SamplingOptions,
    /// Example `i` decodes with seed `seed + i`.
    pub seed: u64,
    /// Condition decoding on gold states instead of predicted ones.
    pub gold_states: bool,
    pub per_response_dist: bool,
    pub per_label_ap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub dialogue_id: String,
    pub turn: usize,
    pub reference: String,
    pub generated: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub generation: GenerationReport,
    pub state: StateReport,
    pub samples: Vec<Sample>,
}

fn without_eos(ids: &[usize]) -> &[usize] {
    match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    }
}

pub fn evaluate<T: Scalar>(model: &Model<T>, examples: &[Example], opts: &EvalOptions) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to evaluate".into()));
    }
    let mut preds = StatePredictions::default();
    let mut candidates = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    let mut samples = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let state = model.predict_state(&ex.context_ids)?;
        preds.gold_speaker.push(ex.gold.speaker.id());
        preds.pred_speaker.push(state.speaker.id());
        preds.gold_listener.push(ex.gold.listener.id());
        preds.pred_listener.push(state.listener.id());
        preds.gold_intents.push(ex.gold.intents.to_vec());
        preds.pred_intents.push(state.intents.to_vec());
        preds.intent_scores.push(state.p_intent.clone());
        let triple = if opts.gold_states {
            StateTriple::from(&ex.gold)
        } else {
            StateTriple::from(&state)
        };
        let g = model.generate_topk(&ex.context_ids, &triple, &opts.sampling, opts.seed.wrapping_add(i as u64))?;
        let reference = without_eos(&ex.target_ids);
        candidates.push(model.vocab.decode_tokens(&g.ids));
        references.push(model.vocab.decode_tokens(reference));
        samples.push(Sample {
            dialogue_id: ex.dialogue_id.clone(),
            turn: ex.turn,
            reference: model.vocab.detokenize(reference),
            generated: model.vocab.detokenize(&g.ids),
        });
    }
    Ok(Evaluation {
        generation: GenerationReport::compute(&candidates, &references, opts.per_response_dist)?,
        state: StateReport::compute(&preds, NUM_EMOTIONS, opts.per_label_ap)?,
        samples,
    })
}
