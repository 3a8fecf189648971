//! Parameter layout, initialization and the shared transformer layers.

use empdial_autograd::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::labels::{NUM_EMOTIONS, NUM_INTENTS};
use crate::priors::Priors;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

/// Ids of one transformer layer's weights. Matrices are stored
/// `[in, out]` and applied to row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamIds {
    /// `E_w`, `[V, d]`: decoder and encoder input table and output projection.
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    /// `V_ε`, `[7, d]`: speaker head weights and emotion state embedding.
    pub emotion_embedding: ParamId,
    /// `V_τ`, `[9, d]`.
    pub intent_embedding: ParamId,
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
    /// `[2d, 7]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[2d, 9]`
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[d, d]`
    pub w3: ParamId,
    /// `[d, 1]`
    pub w4: ParamId,
    /// `[d, 1]`
    pub w5: ParamId,
    /// `[1, 1]`
    pub b5: ParamId,
}

fn layout(cfg: &ModelConfig, vocab_len: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let m = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("token_embedding".into(), vec![vocab_len, d], m(d)),
        ("position_embedding".into(), vec![cfg.positions(), d], m(d)),
        ("emotion_embedding".into(), vec![NUM_EMOTIONS, d], m(d)),
        ("intent_embedding".into(), vec![NUM_INTENTS, d], m(d)),
    ];
    for stack in ["encoder", "decoder"] {
        for l in 0..cfg.layers {
            let p = |n: &str| format!("{stack}.{l}.{n}");
            out.extend([
                (p("wq"), vec![d, d], m(d)),
                (p("bq"), vec![1, d], Init::Zeros),
                (p("wk"), vec![d, d], m(d)),
                (p("bk"), vec![1, d], Init::Zeros),
                (p("wv"), vec![d, d], m(d)),
                (p("bv"), vec![1, d], Init::Zeros),
                (p("wo"), vec![d, d], m(d)),
                (p("bo"), vec![1, d], Init::Zeros),
                (p("ln1_gain"), vec![1, d], Init::Ones),
                (p("ln1_bias"), vec![1, d], Init::Zeros),
                (p("ff1_w"), vec![d, cfg.d_ff], m(d)),
                (p("ff1_b"), vec![1, cfg.d_ff], Init::Zeros),
                (p("ff2_w"), vec![cfg.d_ff, d], m(cfg.d_ff)),
                (p("ff2_b"), vec![1, d], Init::Zeros),
                (p("ln2_gain"), vec![1, d], Init::Ones),
                (p("ln2_bias"), vec![1, d], Init::Zeros),
            ]);
        }
    }
    out.extend([
        ("policy.w1".into(), vec![2 * d, NUM_EMOTIONS], m(2 * d)),
        ("policy.b1".into(), vec![1, NUM_EMOTIONS], Init::Zeros),
        ("policy.w2".into(), vec![2 * d, NUM_INTENTS], m(2 * d)),
        ("policy.b2".into(), vec![1, NUM_INTENTS], Init::Zeros),
        ("fusion.w3".into(), vec![d, d], m(d)),
        ("fusion.w4".into(), vec![d, 1], m(d)),
        ("fusion.w5".into(), vec![d, 1], m(d)),
        ("fusion.b5".into(), vec![1, 1], Init::Zeros),
    ]);
    out
}

impl ParamIds {
    fn resolve<T: Scalar>(store: &ParamStore<T>, layers: usize) -> Self {
        let id = |n: &str| store.id_of(n).unwrap_or_else(|| panic!("parameter `{n}` missing from layout"));
        let layer = |stack: &str, l: usize| {
            let p = |n: &str| id(&format!("{stack}.{l}.{n}"));
            LayerParams {
                wq: p("wq"),
                bq: p("bq"),
                wk: p("wk"),
                bk: p("bk"),
                wv: p("wv"),
                bv: p("bv"),
                wo: p("wo"),
                bo: p("bo"),
                ln1_gain: p("ln1_gain"),
                ln1_bias: p("ln1_bias"),
                ff1_w: p("ff1_w"),
                ff1_b: p("ff1_b"),
                ff2_w: p("ff2_w"),
                ff2_b: p("ff2_b"),
                ln2_gain: p("ln2_gain"),
                ln2_bias: p("ln2_bias"),
            }
        };
        Self {
            token_embedding: id("token_embedding"),
            position_embedding: id("position_embedding"),
            emotion_embedding: id("emotion_embedding"),
            intent_embedding: id("intent_embedding"),
            encoder: (0..layers).map(|l| layer("encoder", l)).collect(),
            decoder: (0..layers).map(|l| layer("decoder", l)).collect(),
            w1: id("policy.w1"),
            b1: id("policy.b1"),
            w2: id("policy.w2"),
            b2: id("policy.b2"),
            w3: id("fusion.w3"),
            w4: id("fusion.w4"),
            w5: id("fusion.w5"),
            b5: id("fusion.b5"),
        }
    }

    /// Tables updated by both training phases.
    pub fn shared(&self) -> Vec<ParamId> {
        vec![
            self.token_embedding,
            self.position_embedding,
            self.emotion_embedding,
            self.intent_embedding,
        ]
    }

    fn layer_ids(layers: &[LayerParams]) -> impl Iterator<Item = ParamId> + '_ {
        layers.iter().flat_map(|l| {
            [
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias, l.ff1_w, l.ff1_b, l.ff2_w,
                l.ff2_b, l.ln2_gain, l.ln2_bias,
            ]
        })
    }

    /// Encoder and policy heads, plus the shared tables.
    pub fn emodm_group(&self) -> Vec<ParamId> {
        let mut ids = self.shared();
        ids.extend(Self::layer_ids(&self.encoder));
        ids.extend([self.w1, self.b1, self.w2, self.b2]);
        ids
    }

    /// Decoder and fusion weights, plus the shared tables.
    pub fn respg_group(&self) -> Vec<ParamId> {
        let mut ids = self.shared();
        ids.extend(Self::layer_ids(&self.decoder));
        ids.extend([self.w3, self.w4, self.w5, self.b5]);
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub priors: Priors,
    pub params: ParamStore<T>,
    pub ids: ParamIds,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, priors: Priors, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config, vocab.len()) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(b) => (0..n).map(|_| T::from_f64_lossy(rng.random_range(-b..b))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            params.add(name, Tensor::new(&shape, data)?);
        }
        let ids = ParamIds::resolve(&params, config.layers);
        Ok(Self {
            config,
            vocab,
            priors,
            params,
            ids,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the layout for `config`.
    pub fn from_tensors(
        config: ModelConfig,
        vocab: Vocabulary,
        priors: Priors,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, vocab.len());
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut params = ParamStore::new();
        for ((name, shape, _), (got_name, t)) in expected.into_iter().zip(tensors) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            params.add(name, t);
        }
        let ids = ParamIds::resolve(&params, config.layers);
        Ok(Self {
            config,
            vocab,
            priors,
            params,
            ids,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            priors: self.priors.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Places every parameter on `tape`. Only ids accepted by `trainable`
    /// require grad. `dropout_seed` enables dropout.
    pub fn bind<'m>(
        &'m self,
        tape: &mut Tape<'m, T>,
        trainable: impl Fn(ParamId) -> bool,
        dropout_seed: Option<u64>,
    ) -> Forward<'m, T> {
        let vars = self.params.register(tape, trainable);
        let dropout = dropout_seed
            .filter(|_| self.config.dropout > 0.0)
            .map(|s| (self.config.dropout, ChaCha8Rng::seed_from_u64(s)));
        Forward {
            model: self,
            vars,
            dropout,
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen<'m>(&'m self, tape: &mut Tape<'m, T>) -> Forward<'m, T> {
        self.bind(tape, |_| false, None)
    }
}

/// A model whose parameters have been placed on a tape.
pub struct Forward<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub vars: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn drop(&mut self, tape: &mut Tape<'m, T>, x: Var) -> Var {
        match &mut self.dropout {
            Some((rate, rng)) => tape.dropout(x, *rate, rng),
            None => x,
        }
    }

    /// Token plus position embeddings, `[len, d]`.
    pub fn embed(&mut self, tape: &mut Tape<'m, T>, ids: &[usize]) -> Result<Var> {
        let positions = self.model.config.positions();
        if ids.len() > positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds {positions} positions",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.model.vocab.len()) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        let tok = tape.gather(self.var(self.model.ids.token_embedding), ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = tape.gather(self.var(self.model.ids.position_embedding), &pos_ids)?;
        let x = tape.add(tok, pos)?;
        Ok(self.drop(tape, x))
    }

    fn linear(&mut self, tape: &mut Tape<'m, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = tape.matmul(x, self.var(w))?;
        Ok(tape.add(y, self.var(b))?)
    }

    /// Multi-head self-attention over `x` (`[len, d]`) restricted by a
    /// row-major `len × len` allow matrix.
    fn attention(&mut self, tape: &mut Tape<'m, T>, x: Var, p: &LayerParams, allow: &[bool]) -> Result<Var> {
        let heads = self.model.config.heads;
        let dh = self.model.d_model() / heads;
        let q = self.linear(tape, x, p.wq, p.bq)?;
        let k = self.linear(tape, x, p.wk, p.bk)?;
        let v = self.linear(tape, x, p.wv, p.bv)?;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_t(qh, kh, false, true)?;
            let scores = tape.scale(scores, scale);
            let att = tape.masked_softmax(scores, Some(allow))?;
            outs.push(tape.matmul(att, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
        self.linear(tape, joined, p.wo, p.bo)
    }

    /// Post-norm transformer layer.
    pub fn layer(&mut self, tape: &mut Tape<'m, T>, x: Var, p: &LayerParams, allow: &[bool]) -> Result<Var> {
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let a = self.attention(tape, x, p, allow)?;
        let a = self.drop(tape, a);
        let r = tape.add(x, a)?;
        let x = tape.layer_norm(r, self.var(p.ln1_gain), self.var(p.ln1_bias), eps)?;
        let f = self.linear(tape, x, p.ff1_w, p.ff1_b)?;
        let f = tape.relu(f);
        let f = self.linear(tape, f, p.ff2_w, p.ff2_b)?;
        let f = self.drop(tape, f);
        let r = tape.add(x, f)?;
        Ok(tape.layer_norm(r, self.var(p.ln2_gain), self.var(p.ln2_bias), eps)?)
    }
}

/// Row-major allow matrix with `[PAD]` key columns removed.
pub(crate) fn without_pad_keys(mut allow: Vec<bool>, ids: &[usize]) -> Vec<bool> {
    let len = ids.len();
    for r in 0..len {
        for (c, &id) in ids.iter().enumerate() {
            if id == PAD {
                allow[r * len + c] = false;
            }
        }
    }
    allow
}
