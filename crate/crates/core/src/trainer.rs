//! Warm-up and alternating EmoDM/RespG training with scheduled sampling.

use std::io::Write;

use empdial_autograd::{AdamW, AdamWConfig, ParamGrads, ParamId, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{Example, EOS};
use crate::emodm::emodm_loss;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::respg::{respg_loss, shift_right, StateTriple};

/// Gold-state probability for alternating epoch `epoch` (1-based; 0 is the
/// warm-up value). Linear from `p_gold_start` to `p_gold_end` over
/// `cfg.epochs`.
pub fn scheduled_sampling_prob(epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = epoch.min(cfg.epochs) as f64 / cfg.epochs as f64;
    cfg.p_gold_start + (cfg.p_gold_end - cfg.p_gold_start) * e
}

/// Index of the smallest value; the earliest wins ties. NaN never wins.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Caps a target at `max_len` tokens while keeping the closing `[EOS]`.
pub fn fit_target(target: &[usize], max_len: usize) -> Vec<usize> {
    if target.len() <= max_len {
        return target.to_vec();
    }
    let mut t = target[..max_len - 1].to_vec();
    t.push(EOS);
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Emodm,
    Respg,
    /// EmoDM and RespG batches alternating within the epoch.
    Mixed,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub emodm_loss: Option<f64>,
    pub respg_loss: Option<f64>,
    pub p_gold: f64,
    pub valid_nll: f64,
    pub steps: u64,
}

/// Token-weighted NLL of `examples` under predicted states.
pub fn validation_nll(model: &Model<f32>, examples: &[Example]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for ex in examples {
        let target = fit_target(&ex.target_ids, model.config.max_target_len);
        let state = StateTriple::from(&model.predict_state(&ex.context_ids)?);
        total += model.response_nll(&ex.context_ids, &target, &state)? * target.len() as f64;
        tokens += target.len();
    }
    if tokens == 0 {
        return Err(Error::Input("no examples to score".into()));
    }
    Ok(total / tokens as f64)
}

pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    emodm_opt: AdamW<f32>,
    respg_opt: AdamW<f32>,
    rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    /// Alternating epoch with the lowest validation NLL and that NLL.
    pub best: Option<(usize, f64)>,
    best_params: Option<ParamStore<f32>>,
    log: Option<Box<dyn Write + Send>>,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let emodm_opt = AdamW::new(opt, &model.params, model.ids.emodm_group());
        let respg_opt = AdamW::new(opt, &model.params, model.ids.respg_group());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            model,
            cfg,
            emodm_opt,
            respg_opt,
            history: Vec::new(),
            best: None,
            best_params: None,
            log: None,
        })
    }

    /// Writes one JSON line per epoch to `sink`.
    pub fn with_log(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.log = Some(sink);
        self
    }

    pub fn steps(&self) -> u64 {
        self.emodm_opt.step_count() + self.respg_opt.step_count()
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn apply(&mut self, grads: &ParamGrads<f32>, emodm: bool) -> Result<()> {
        let opt = if emodm { &mut self.emodm_opt } else { &mut self.respg_opt };
        Ok(opt.step(&mut self.model.params, grads)?)
    }

    /// One optimizer step on the joint emotion-state loss over `batch`.
    pub fn emodm_step(&mut self, examples: &[Example], batch: &[usize], p_gold: f64) -> Result<f64> {
        let use_gold = self.rng.random::<f64>() < p_gold;
        let dropout_seed = self.rng.random::<u64>();
        let group = self.model.ids.emodm_group();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let mut f = self.model.bind(&mut tape, |id| group.contains(&id), Some(dropout_seed));
            let mut total: Option<Var> = None;
            for &i in batch {
                let ex = &examples[i];
                let over = use_gold.then_some(ex.gold.speaker.id());
                let out = f.emodm(&mut tape, &ex.context_ids, over)?;
                let l = emodm_loss(&mut tape, &out, &ex.gold, self.cfg.alpha, self.cfg.beta)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.ok_or_else(|| Error::Input("empty batch".into()))?;
            let loss = tape.scale(total, 1.0 / batch.len() as f32);
            let value = tape.value(loss).item() as f64;
            let mut g = tape.backward(loss)?;
            (value, ParamGrads::collect(&mut g, &f.vars))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Ok(f64::NAN);
        }
        self.apply(&grads, true)?;
        Ok(loss)
    }

    /// One optimizer step on token-weighted response NLL over `batch`.
    pub fn respg_step(&mut self, examples: &[Example], batch: &[usize], p_gold: f64) -> Result<f64> {
        let use_gold = self.rng.random::<f64>() < p_gold;
        let dropout_seed = self.rng.random::<u64>();
        let max_t = self.model.config.max_target_len;
        let mut items = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &examples[i];
            let state = if use_gold {
                StateTriple::from(&ex.gold)
            } else {
                StateTriple::from(&self.model.predict_state(&ex.context_ids)?)
            };
            items.push((i, fit_target(&ex.target_ids, max_t), state));
        }
        let tokens: usize = items.iter().map(|(_, t, _)| t.len()).sum();
        let group = self.model.ids.respg_group();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let mut f = self.model.bind(&mut tape, |id: ParamId| group.contains(&id), Some(dropout_seed));
            let mut total: Option<Var> = None;
            for (i, target, state) in &items {
                let out = f.respg(&mut tape, &examples[*i].context_ids, &shift_right(target), state)?;
                let l = respg_loss(&mut tape, out.logits, target)?;
                let l = tape.scale(l, target.len() as f32 / tokens as f32);
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let loss = total.ok_or_else(|| Error::Input("empty batch".into()))?;
            let value = tape.value(loss).item() as f64;
            let mut g = tape.backward(loss)?;
            (value, ParamGrads::collect(&mut g, &f.vars))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Ok(f64::NAN);
        }
        self.apply(&grads, false)?;
        Ok(loss)
    }

    fn record(&mut self, rec: EpochRecord) -> Result<()> {
        log::info!(
            "epoch {} {:?}: emodm {:?} respg {:?} p_gold {:.3} valid_nll {:.4}",
            rec.epoch,
            rec.phase,
            rec.emodm_loss,
            rec.respg_loss,
            rec.p_gold,
            rec.valid_nll
        );
        if let Some(sink) = &mut self.log {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(sink, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        self.history.push(rec);
        Ok(())
    }

    fn run_epoch(
        &mut self,
        epoch: usize,
        phase: Phase,
        train: &[Example],
        valid: &[Example],
        p_gold: f64,
        snapshot: &ParamStore<f32>,
    ) -> Result<EpochRecord> {
        let (mut e_sum, mut e_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
        for (b, batch) in self.batches(train.len()).into_iter().enumerate() {
            let emodm = match phase {
                Phase::Warmup | Phase::Respg => false,
                Phase::Emodm => true,
                Phase::Mixed => b % 2 == 0,
            };
            let loss = if emodm {
                self.emodm_step(train, &batch, p_gold)?
            } else {
                self.respg_step(train, &batch, p_gold)?
            };
            if !loss.is_finite() {
                let restore = self.best_params.clone().unwrap_or_else(|| snapshot.clone());
                self.model.params = restore;
                return Err(Error::Diverged { epoch });
            }
            if emodm {
                e_sum += loss;
                e_n += 1;
            } else {
                r_sum += loss;
                r_n += 1;
            }
        }
        let scored = if valid.is_empty() { train } else { valid };
        Ok(EpochRecord {
            epoch,
            phase,
            emodm_loss: (e_n > 0).then(|| e_sum / e_n as f64),
            respg_loss: (r_n > 0).then(|| r_sum / r_n as f64),
            p_gold,
            valid_nll: validation_nll(&self.model, scored)?,
            steps: self.steps(),
        })
    }

    /// RespG-only epochs with gold states; EmoDM weights are untouched.
    pub fn warmup_respg(&mut self, train: &[Example], valid: &[Example], epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            let snapshot = self.model.params.clone();
            let epoch = self.history.len();
            let rec = self.run_epoch(epoch, Phase::Warmup, train, valid, 1.0, &snapshot)?;
            self.record(rec)?;
        }
        Ok(())
    }

    /// Alternating epochs (even EmoDM, odd RespG) followed by restoring the
    /// epoch with the lowest validation NLL. Validation falls back to the
    /// training examples when `valid` is empty.
    pub fn alternate_train(&mut self, train: &[Example], valid: &[Example]) -> Result<()> {
        for i in 0..self.cfg.epochs {
            let phase = if self.cfg.per_batch_alternation {
                Phase::Mixed
            } else if i % 2 == 0 {
                Phase::Emodm
            } else {
                Phase::Respg
            };
            let p_gold = scheduled_sampling_prob(i + 1, &self.cfg);
            let snapshot = self.model.params.clone();
            let epoch = self.history.len();
            let rec = self.run_epoch(epoch, phase, train, valid, p_gold, &snapshot)?;
            if self.best.is_none_or(|(_, v)| rec.valid_nll < v) {
                self.best = Some((epoch, rec.valid_nll));
                self.best_params = Some(self.model.params.clone());
            }
            self.record(rec)?;
        }
        if let Some(p) = self.best_params.take() {
            self.model.params = p;
        }
        Ok(())
    }

    /// Warm-up for `cfg.warmup_epochs`, then alternating training.
    pub fn fit(&mut self, train: &[Example], valid: &[Example]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        self.warmup_respg(train, valid, self.cfg.warmup_epochs)?;
        self.alternate_train(train, valid)
    }
}
