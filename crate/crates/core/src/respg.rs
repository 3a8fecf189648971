//! State-conditioned decoder: attention mask, emotion and intent fusion,
//! gated vocabulary projection, top-k decoding.

use empdial_autograd::{softmax_slice, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldState, CLS, EOS, LST, PAD, SPK, UNK};
use crate::emodm::EmotionStatePrediction;
use crate::error::{Error, Result};
use crate::labels::{IntentSet, NUM_EMOTIONS};
use crate::model::{without_pad_keys, Forward, Model};

/// Tokens never produced by decoding.
pub const SUPPRESSED: [usize; 5] = [PAD, UNK, CLS, SPK, LST];

/// Allow matrix over `[CLS]`, `n` context and `m` response positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    m: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n + self.m + 1
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size() + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.allow
    }

    /// Same rule with the `[CLS]` row limited to `[CLS]` and context.
    pub fn history_only(&self) -> Self {
        let mut out = self.clone();
        for c in self.n + 1..self.size() {
            out.allow[c] = false;
        }
        out
    }
}

/// `[CLS]` sees everything; context rows see `[CLS]` and context; response
/// row `i` additionally sees response positions up to `i`.
pub fn build_attention_mask(n: usize, m: usize) -> AttentionMask {
    let size = n + m + 1;
    let mut allow = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            allow[r * size + c] = r == 0 || c <= n || c <= r;
        }
    }
    AttentionMask { n, m, allow }
}

/// `W3(h_y + v_es) + tanh(h_y W4) v_el`, row-wise over `h_y` (`[m, d]`).
pub fn fuse_emotion<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h_y: Var,
    v_es: Var,
    v_el: Var,
    w3: Var,
    w4: Var,
) -> Result<Var> {
    let shifted = tape.add(h_y, v_es)?;
    let first = tape.matmul(shifted, w3)?;
    let g = tape.matmul(h_y, w4)?;
    let g = tape.tanh(g);
    let second = tape.matmul(g, v_el)?;
    Ok(tape.add(first, second)?)
}

/// Mean of the `V_τ` rows selected by `set`, `[1, d]`.
pub fn intent_average<T: Scalar>(tape: &mut Tape<'_, T>, set: &IntentSet, intent_table: Var) -> Result<Var> {
    let count = set.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::Input("intent set is empty".into()));
    }
    let w = T::from_f64_lossy(1.0 / count as f64);
    let weights: Vec<T> = set.iter().map(|&b| if b { w } else { T::zero() }).collect();
    let weights = tape.constant(Tensor::row(&weights));
    Ok(tape.matmul(weights, intent_table)?)
}

/// `v_τ ⊙ h_y + v_τ`.
pub fn fuse_intent<T: Scalar>(tape: &mut Tape<'_, T>, h_y: Var, v_tau: Var) -> Result<Var> {
    let p = tape.mul(h_y, v_tau)?;
    Ok(tape.add(p, v_tau)?)
}

/// `σ(h_cls W5 + b5)`, `[1, 1]`.
pub fn gate_value<T: Scalar>(tape: &mut Tape<'_, T>, h_cls: Var, w5: Var, b5: Var) -> Result<Var> {
    let z = tape.matmul(h_cls, w5)?;
    let z = tape.add(z, b5)?;
    Ok(tape.sigmoid(z))
}

/// Vocabulary logits `(γ h_eps + (1 − γ) h_tau) E_wᵀ`.
pub fn gate_merge<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h_eps: Var,
    h_tau: Var,
    gamma: Var,
    token_table: Var,
) -> Result<Var> {
    let a = tape.mul(h_eps, gamma)?;
    let rest = tape.affine(gamma, -T::one(), T::one());
    let b = tape.mul(h_tau, rest)?;
    let mixed = tape.add(a, b)?;
    Ok(tape.matmul_t(mixed, token_table, false, true)?)
}

/// Emotion-state ids the decoder is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTriple {
    pub speaker: usize,
    pub listener: usize,
    pub intents: IntentSet,
}

impl StateTriple {
    pub fn validate(&self) -> Result<()> {
        for e in [self.speaker, self.listener] {
            if e >= NUM_EMOTIONS {
                return Err(Error::LabelOutOfRange("emotion", e));
            }
        }
        if !self.intents.iter().any(|&b| b) {
            return Err(Error::Input("intent set is empty".into()));
        }
        Ok(())
    }
}

impl From<&GoldState> for StateTriple {
    fn from(g: &GoldState) -> Self {
        Self {
            speaker: g.speaker.id(),
            listener: g.listener.id(),
            intents: g.intents,
        }
    }
}

impl From<&EmotionStatePrediction> for StateTriple {
    fn from(p: &EmotionStatePrediction) -> Self {
        Self {
            speaker: p.speaker.id(),
            listener: p.listener.id(),
            intents: p.intents,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RespgOutput {
    /// `[m, V]` next-token logits, one row per decoder input position.
    pub logits: Var,
    pub gamma: Var,
    /// Final-layer `[CLS]` output of the full stream.
    pub h_cls: Var,
}

/// Decoder input for a target: `[LST]` followed by all but the last target
/// token.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(target.len());
    v.push(LST);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

impl<'m, T: Scalar> Forward<'m, T> {
    /// Decoder stack over an embedded stream `ids` whose first `n + 1`
    /// positions are `[CLS]` and context. The last layer uses the full mask;
    /// earlier layers keep `[CLS]` on the history so no response position
    /// can read a later one through it.
    pub fn decoder_hidden(&mut self, tape: &mut Tape<'m, T>, ids: &[usize], x: Var, n: usize) -> Result<Var> {
        if ids.len() < n + 1 {
            return Err(Error::Input("stream shorter than its context".into()));
        }
        let mask = build_attention_mask(n, ids.len() - n - 1);
        let history = without_pad_keys(mask.history_only().into_vec(), ids);
        let full = without_pad_keys(mask.into_vec(), ids);
        let layers = self.model.ids.decoder.clone();
        let mut h = x;
        for (l, p) in layers.iter().enumerate() {
            let allow = if l + 1 == layers.len() { &full } else { &history };
            h = self.layer(tape, h, p, allow)?;
        }
        Ok(h)
    }

    fn check_context(&self, context_ids: &[usize]) -> Result<()> {
        let max_len = self.model.config.max_len;
        if context_ids.first() != Some(&CLS) {
            return Err(Error::Input("context must start with [CLS]".into()));
        }
        if context_ids.len() > max_len {
            return Err(Error::Input(format!(
                "context of {} tokens exceeds max_len {max_len}",
                context_ids.len()
            )));
        }
        Ok(())
    }

    /// Gate from the decoder's `[CLS]` over `[CLS]` and context only.
    pub fn gate(&mut self, tape: &mut Tape<'m, T>, context_ids: &[usize]) -> Result<Var> {
        self.check_context(context_ids)?;
        let x = self.embed(tape, context_ids)?;
        let h = self.decoder_hidden(tape, context_ids, x, context_ids.len() - 1)?;
        let h_cls = tape.slice_rows(h, 0, 1)?;
        let (w5, b5) = (self.var(self.model.ids.w5), self.var(self.model.ids.b5));
        gate_value(tape, h_cls, w5, b5)
    }

    /// Fusion and vocabulary projection for response rows `h_y`.
    pub fn respg_head(&mut self, tape: &mut Tape<'m, T>, h_y: Var, state: &StateTriple, gamma: Var) -> Result<Var> {
        state.validate()?;
        let ids = &self.model.ids;
        let (v_eps, v_tau, e_w) = (
            self.var(ids.emotion_embedding),
            self.var(ids.intent_embedding),
            self.var(ids.token_embedding),
        );
        let (w3, w4) = (self.var(ids.w3), self.var(ids.w4));
        let v_es = tape.gather(v_eps, &[state.speaker])?;
        let v_el = tape.gather(v_eps, &[state.listener])?;
        let h_eps = fuse_emotion(tape, h_y, v_es, v_el, w3, w4)?;
        let v_t = intent_average(tape, &state.intents, v_tau)?;
        let h_tau = fuse_intent(tape, h_y, v_t)?;
        gate_merge(tape, h_eps, h_tau, gamma, e_w)
    }

    /// Teacher-forced decoder pass with a precomputed gate.
    pub fn respg_with_gate(
        &mut self,
        tape: &mut Tape<'m, T>,
        context_ids: &[usize],
        response_in: &[usize],
        state: &StateTriple,
        gamma: Var,
        last_only: bool,
    ) -> Result<(Var, Var)> {
        self.check_context(context_ids)?;
        if response_in.is_empty() {
            return Err(Error::Input("empty response".into()));
        }
        if response_in.len() > self.model.config.max_target_len {
            return Err(Error::Input(format!(
                "response of {} tokens exceeds max_target_len {}",
                response_in.len(),
                self.model.config.max_target_len
            )));
        }
        let n = context_ids.len() - 1;
        let m = response_in.len();
        let ids: Vec<usize> = context_ids.iter().chain(response_in).copied().collect();
        let x = self.embed(tape, &ids)?;
        let h = self.decoder_hidden(tape, &ids, x, n)?;
        let h_cls = tape.slice_rows(h, 0, 1)?;
        let h_y = if last_only {
            tape.slice_rows(h, n + m, 1)?
        } else {
            tape.slice_rows(h, n + 1, m)?
        };
        let logits = self.respg_head(tape, h_y, state, gamma)?;
        Ok((logits, h_cls))
    }

    pub fn respg(
        &mut self,
        tape: &mut Tape<'m, T>,
        context_ids: &[usize],
        response_in: &[usize],
        state: &StateTriple,
    ) -> Result<RespgOutput> {
        let gamma = self.gate(tape, context_ids)?;
        let (logits, h_cls) = self.respg_with_gate(tape, context_ids, response_in, state, gamma, false)?;
        Ok(RespgOutput { logits, gamma, h_cls })
    }
}

/// Mean NLL over target positions; `[PAD]` targets are skipped.
pub fn respg_loss<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, target: &[usize]) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::Input("empty target".into()));
    }
    let rows: Vec<Option<usize>> = target.iter().map(|&t| (t != PAD).then_some(t)).collect();
    Ok(tape.cross_entropy(logits, &rows)?)
}

/// Renormalized probabilities of the `k` most likely allowed tokens, in
/// descending order (ties by lower id).
pub fn top_k_distribution(logits: &[f64], k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if SUPPRESSED.contains(&i) { f64::NEG_INFINITY } else { z / temperature })
        .collect();
    let probs = softmax_slice(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).filter(|i| !SUPPRESSED.contains(i)).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    order.into_iter().map(|i| (i, probs[i] / total)).collect()
}

pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, temperature: f64, rng: &mut R) -> usize {
    let dist = top_k_distribution(logits, k, temperature);
    if dist.len() == 1 {
        return dist[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in &dist {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist[dist.len() - 1].0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub top_k: usize,
    pub temperature: f64,
    pub max_new: usize,
}

impl SamplingOptions {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            top_k: 1,
            temperature: 1.0,
            max_new,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated ids without the closing `[EOS]`.
    pub ids: Vec<usize>,
    pub gate: f64,
}

impl<T: Scalar> Model<T> {
    pub fn gate_for(&self, context_ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let mut f = self.bind_frozen(&mut tape);
        let g = f.gate(&mut tape, context_ids)?;
        Ok(tape.value(g).item().to_f64_lossy())
    }

    /// Autoregressive top-k decoding. The gate is computed once from the
    /// context.
    pub fn generate_topk(
        &self,
        context_ids: &[usize],
        state: &StateTriple,
        opts: &SamplingOptions,
        seed: u64,
    ) -> Result<Generation> {
        if opts.top_k == 0 || opts.max_new == 0 || !(opts.temperature > 0.0) {
            return Err(Error::Input("top_k, max_new and temperature must be positive".into()));
        }
        let gate = self.gate_for(context_ids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = opts.max_new.min(self.config.max_target_len);
        let mut response_in = vec![LST];
        let mut out = Vec::new();
        for _ in 0..steps {
            let mut tape = Tape::no_grad();
            let mut f = self.bind_frozen(&mut tape);
            let gamma = tape.constant(Tensor::scalar(T::from_f64_lossy(gate)));
            let (logits, _) = f.respg_with_gate(&mut tape, context_ids, &response_in, state, gamma, true)?;
            let row: Vec<f64> = tape.value(logits).data().iter().map(|x| x.to_f64_lossy()).collect();
            let next = sample_top_k(&row, opts.top_k, opts.temperature, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
            response_in.push(next);
        }
        Ok(Generation { ids: out, gate })
    }

    /// Teacher-forced NLL of `target` (ending in `[EOS]`) under `state`.
    pub fn response_nll(&self, context_ids: &[usize], target: &[usize], state: &StateTriple) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let mut f = self.bind_frozen(&mut tape);
        let out = f.respg(&mut tape, context_ids, &shift_right(target), state)?;
        let l = respg_loss(&mut tape, out.logits, target)?;
        Ok(tape.value(l).item().to_f64_lossy())
    }
}
