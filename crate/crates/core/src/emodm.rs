//! Emotion tracking and policy heads over the encoder's `[CLS]` output.

use empdial_autograd::{argmax, sigmoid, softmax_slice, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::GoldState;
use crate::error::{Error, Result};
use crate::labels::{Emotion, IntentSet, NUM_EMOTIONS, NUM_INTENTS};
use crate::model::{without_pad_keys, Forward, Model};
use crate::priors::ShiftMatrix;

/// Speaker distribution logits `h_cls · V_εᵀ`, with no bias.
pub fn speaker_logits<T: Scalar>(tape: &mut Tape<'_, T>, h_cls: Var, emotion_table: Var) -> Result<Var> {
    Ok(tape.matmul_t(h_cls, emotion_table, false, true)?)
}

/// `m_sft · V`: the prior row weighted state embedding, `[1, d]`.
pub fn shift_vector<T: Scalar>(tape: &mut Tape<'_, T>, prior_row: Var, table: Var) -> Result<Var> {
    Ok(tape.matmul(prior_row, table)?)
}

/// `[h_cls; v_sft] · W + b`.
pub fn policy_logits<T: Scalar>(tape: &mut Tape<'_, T>, h_cls: Var, v_sft: Var, w: Var, b: Var) -> Result<Var> {
    let joined = tape.concat(&[h_cls, v_sft])?;
    let z = tape.matmul(joined, w)?;
    Ok(tape.add(z, b)?)
}

/// Per-label decisions at threshold 0.5 (inclusive); an empty set falls back
/// to the single most probable label.
pub fn binarize_intents(probs: &[f64]) -> IntentSet {
    let mut set = [false; NUM_INTENTS];
    for (s, &p) in set.iter_mut().zip(probs) {
        *s = p >= 0.5;
    }
    if !set.iter().any(|&b| b) {
        set[argmax(probs)] = true;
    }
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionStatePrediction {
    pub p_speaker: Vec<f64>,
    pub p_listener: Vec<f64>,
    pub p_intent: Vec<f64>,
    pub speaker: Emotion,
    pub listener: Emotion,
    pub intents: IntentSet,
}

impl EmotionStatePrediction {
    pub fn from_logits(speaker: &[f64], listener: &[f64], intent: &[f64]) -> Self {
        let p_speaker = softmax_slice(speaker);
        let p_listener = softmax_slice(listener);
        let p_intent: Vec<f64> = intent.iter().map(|&z| sigmoid(z)).collect();
        Self {
            speaker: Emotion::from_id(argmax(&p_speaker)).expect("7 logits"),
            listener: Emotion::from_id(argmax(&p_listener)).expect("7 logits"),
            intents: binarize_intents(&p_intent),
            p_speaker,
            p_listener,
            p_intent,
        }
    }
}

/// Tape handles for one context's EmoDM outputs.
#[derive(Clone, Copy, Debug)]
pub struct EmoDmOutput {
    pub h_cls: Var,
    pub speaker_logits: Var,
    pub listener_logits: Var,
    pub intent_logits: Var,
    /// Speaker emotion used for the prior lookup.
    pub lookup_speaker: usize,
}

fn prior_row<T: Scalar>(m: &ShiftMatrix, k: usize) -> Result<Tensor<T>> {
    let row: Vec<T> = m.lookup_row(k)?.into_iter().map(T::from_f64_lossy).collect();
    Ok(Tensor::row(&row))
}

impl<'m, T: Scalar> Forward<'m, T> {
    /// Encoder hidden states `[n + 1, d]`. `[PAD]` positions are excluded
    /// as attention keys.
    pub fn encode(&mut self, tape: &mut Tape<'m, T>, ids: &[usize]) -> Result<Var> {
        let max_len = self.model.config.max_len;
        if ids.is_empty() {
            return Err(Error::Input("empty context".into()));
        }
        if ids.len() > max_len {
            return Err(Error::Input(format!("context of {} tokens exceeds max_len {max_len}", ids.len())));
        }
        let allow = without_pad_keys(vec![true; ids.len() * ids.len()], ids);
        let mut x = self.embed(tape, ids)?;
        let layers = self.model.ids.encoder.clone();
        for p in &layers {
            x = self.layer(tape, x, p, &allow)?;
        }
        Ok(x)
    }

    /// Runs the encoder and all three heads. `speaker_override` replaces the
    /// predicted speaker emotion in the prior lookup.
    pub fn emodm(
        &mut self,
        tape: &mut Tape<'m, T>,
        context_ids: &[usize],
        speaker_override: Option<usize>,
    ) -> Result<EmoDmOutput> {
        let ids = &self.model.ids;
        let (v_eps, v_tau) = (self.var(ids.emotion_embedding), self.var(ids.intent_embedding));
        let (w1, b1, w2, b2) = (self.var(ids.w1), self.var(ids.b1), self.var(ids.w2), self.var(ids.b2));
        let hidden = self.encode(tape, context_ids)?;
        let h_cls = tape.slice_rows(hidden, 0, 1)?;
        let speaker = speaker_logits(tape, h_cls, v_eps)?;
        let predicted = tape.value(speaker).argmax_row(0);
        let lookup_speaker = speaker_override.unwrap_or(predicted);
        if lookup_speaker >= NUM_EMOTIONS {
            return Err(Error::LabelOutOfRange("emotion", lookup_speaker));
        }
        let priors = &self.model.priors;
        let (m_eps, m_tau) = if self.model.config.soft_prior_lookup && speaker_override.is_none() {
            let p = tape.softmax(speaker)?;
            let me = tape.constant(Tensor::new(&[NUM_EMOTIONS, NUM_EMOTIONS], cast_all(priors.emo_emo.values()))?);
            let mt = tape.constant(Tensor::new(&[NUM_EMOTIONS, NUM_INTENTS], cast_all(priors.emo_intent.values()))?);
            (tape.matmul(p, me)?, tape.matmul(p, mt)?)
        } else {
            (
                tape.constant(prior_row(&priors.emo_emo, lookup_speaker)?),
                tape.constant(prior_row(&priors.emo_intent, lookup_speaker)?),
            )
        };
        let v_sft_eps = shift_vector(tape, m_eps, v_eps)?;
        let v_sft_tau = shift_vector(tape, m_tau, v_tau)?;
        let listener = policy_logits(tape, h_cls, v_sft_eps, w1, b1)?;
        let intent = policy_logits(tape, h_cls, v_sft_tau, w2, b2)?;
        Ok(EmoDmOutput {
            h_cls,
            speaker_logits: speaker,
            listener_logits: listener,
            intent_logits: intent,
            lookup_speaker,
        })
    }
}

fn cast_all<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

/// `α·NLL(speaker) + (1 − α)·NLL(listener) + β·BCE(intents)`, the BCE
/// averaged over the nine labels.
pub fn emodm_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &EmoDmOutput,
    gold: &GoldState,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let s = tape.cross_entropy(out.speaker_logits, &[Some(gold.speaker.id())])?;
    let l = tape.cross_entropy(out.listener_logits, &[Some(gold.listener.id())])?;
    let targets: Vec<T> = gold.intents.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let i = tape.bce_with_logits(out.intent_logits, &targets)?;
    let s = tape.scale(s, T::from_f64_lossy(alpha));
    let l = tape.scale(l, T::from_f64_lossy(1.0 - alpha));
    let i = tape.scale(i, T::from_f64_lossy(beta));
    let sl = tape.add(s, l)?;
    Ok(tape.add(sl, i)?)
}

/// Values of a `[1, k]` var as `f64`.
pub(crate) fn row_f64<T: Scalar>(tape: &Tape<'_, T>, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|x| x.to_f64_lossy()).collect()
}

impl<T: Scalar> Model<T> {
    /// Frozen EmoDM prediction for one context.
    pub fn predict_state(&self, context_ids: &[usize]) -> Result<EmotionStatePrediction> {
        let mut tape = Tape::no_grad();
        let mut f = self.bind_frozen(&mut tape);
        let out = f.emodm(&mut tape, context_ids, None)?;
        Ok(EmotionStatePrediction::from_logits(
            &row_f64(&tape, out.speaker_logits),
            &row_f64(&tape, out.listener_logits),
            &row_f64(&tape, out.intent_logits),
        ))
    }
}
