//! Generation metrics (corpus BLEU-4, Dist-n) and emotion-state prediction
//! metrics (accuracy, weighted F1, hamming loss, micro F1, average precision).

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Replaces a zero clipped n-gram count so the geometric mean stays defined.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 1]` with uniform weights and one reference
/// per candidate.
pub fn bleu4<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Metric("BLEU over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut clipped = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                clipped[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if clipped[n] == 0 {
            BLEU_EPSILON / totals[n].max(1) as f64
        } else {
            clipped[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = brevity_penalty(cand_len, ref_len);
    Ok(bp * log_sum.exp())
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Unique over total n-grams, pooled over every response. Zero when there
/// are no n-grams at all.
pub fn distinct_n<T: Hash + Eq>(responses: &[Vec<T>], n: usize) -> f64 {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if n == 0 || r.len() < n {
            continue;
        }
        for w in r.windows(n) {
            unique.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Dist-n computed per response and averaged over responses that have at
/// least one n-gram.
pub fn distinct_n_per_response<T: Hash + Eq>(responses: &[Vec<T>], n: usize) -> f64 {
    let scores: Vec<f64> = responses
        .iter()
        .filter(|r| n > 0 && r.len() >= n)
        .map(|r| distinct_n(std::slice::from_ref(r), n))
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("length mismatch: {a} gold vs {b} predicted")));
    }
    Ok(())
}

pub fn accuracy(gold: &[usize], predicted: &[usize]) -> Result<f64> {
    check_len(gold.len(), predicted.len())?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-class F1 averaged with weights proportional to gold support.
pub fn weighted_f1(gold: &[usize], predicted: &[usize], num_classes: usize) -> Result<f64> {
    check_len(gold.len(), predicted.len())?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g >= num_classes || p >= num_classes {
            return Err(Error::Metric(format!("class id out of range (num_classes = {num_classes})")));
        }
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let n = gold.len() as f64;
    Ok((0..num_classes)
        .map(|c| (tp[c] + fn_[c]) as f64 / n * f1(tp[c], fp[c], fn_[c]))
        .sum())
}

fn check_rows<T>(gold: &[Vec<bool>], other: &[Vec<T>]) -> Result<()> {
    check_len(gold.len(), other.len())?;
    for (g, o) in gold.iter().zip(other) {
        check_len(g.len(), o.len())?;
    }
    Ok(())
}

/// Fraction of label bits that differ.
pub fn hamming_loss(gold: &[Vec<bool>], predicted: &[Vec<bool>]) -> Result<f64> {
    check_rows(gold, predicted)?;
    let bits: usize = gold.iter().map(Vec::len).sum();
    if bits == 0 {
        return Ok(0.0);
    }
    let wrong = gold
        .iter()
        .zip(predicted)
        .flat_map(|(g, p)| g.iter().zip(p))
        .filter(|(a, b)| a != b)
        .count();
    Ok(wrong as f64 / bits as f64)
}

/// F1 over pooled label decisions. Perfect agreement on an all-negative set
/// counts as 1.
pub fn micro_f1(gold: &[Vec<bool>], predicted: &[Vec<bool>]) -> Result<f64> {
    check_rows(gold, predicted)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&g, &p) in gold.iter().zip(predicted).flat_map(|(g, p)| g.iter().zip(p)) {
        match (g, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(f1(tp, fp, fn_))
}

/// Average precision of one sample's label ranking: for each relevant label,
/// the fraction of relevant labels among those scored at least as high,
/// averaged over relevant labels. Ties count against the ranking.
fn sample_average_precision(gold: &[bool], scores: &[f64]) -> f64 {
    let relevant: Vec<usize> = (0..gold.len()).filter(|&j| gold[j]).collect();
    if relevant.is_empty() || relevant.len() == gold.len() {
        return 1.0;
    }
    let mut total = 0.0;
    for &j in &relevant {
        let at_least = |l: &usize| scores[*l] >= scores[j];
        let rank = (0..gold.len()).filter(at_least).count();
        let hits = relevant.iter().filter(|l| at_least(l)).count();
        total += hits as f64 / rank as f64;
    }
    total / relevant.len() as f64
}

/// Mean over samples of per-sample average precision.
pub fn average_precision(gold: &[Vec<bool>], scores: &[Vec<f64>]) -> Result<f64> {
    check_rows(gold, scores)?;
    if gold.is_empty() {
        return Ok(0.0);
    }
    Ok(gold
        .iter()
        .zip(scores)
        .map(|(g, s)| sample_average_precision(g, s))
        .sum::<f64>()
        / gold.len() as f64)
}

/// Macro average over labels of per-label average precision, where each
/// label ranks samples by score. Labels without positives are skipped.
pub fn label_average_precision(gold: &[Vec<bool>], scores: &[Vec<f64>]) -> Result<f64> {
    check_rows(gold, scores)?;
    let labels = gold.first().map_or(0, Vec::len);
    let mut per_label = Vec::new();
    for j in 0..labels {
        let g: Vec<bool> = gold.iter().map(|r| r[j]).collect();
        if !g.iter().any(|&b| b) {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        per_label.push(sample_average_precision(&g, &s));
    }
    if per_label.is_empty() {
        return Ok(0.0);
    }
    Ok(per_label.iter().sum::<f64>() / per_label.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    /// Corpus BLEU-4 ×100.
    pub bleu4: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub samples: usize,
}

impl GenerationReport {
    pub fn compute(candidates: &[Vec<String>], references: &[Vec<String>], per_response_dist: bool) -> Result<Self> {
        let dist = |n| {
            if per_response_dist {
                distinct_n_per_response(candidates, n)
            } else {
                distinct_n(candidates, n)
            }
        };
        Ok(Self {
            bleu4: 100.0 * bleu4(candidates, references)?,
            dist1: dist(1),
            dist2: dist(2),
            samples: candidates.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateReport {
    pub speaker_accuracy: f64,
    pub speaker_weighted_f1: f64,
    pub listener_accuracy: f64,
    pub listener_weighted_f1: f64,
    pub intent_hamming_loss: f64,
    pub intent_micro_f1: f64,
    pub intent_average_precision: f64,
    pub samples: usize,
}

/// Aligned gold and predicted emotion states for a set of examples.
#[derive(Clone, Debug, Default)]
pub struct StatePredictions {
    pub gold_speaker: Vec<usize>,
    pub pred_speaker: Vec<usize>,
    pub gold_listener: Vec<usize>,
    pub pred_listener: Vec<usize>,
    pub gold_intents: Vec<Vec<bool>>,
    pub pred_intents: Vec<Vec<bool>>,
    pub intent_scores: Vec<Vec<f64>>,
}

impl StateReport {
    pub fn compute(p: &StatePredictions, num_emotions: usize, per_label_ap: bool) -> Result<Self> {
        let ap = if per_label_ap {
            label_average_precision(&p.gold_intents, &p.intent_scores)?
        } else {
            average_precision(&p.gold_intents, &p.intent_scores)?
        };
        Ok(Self {
            speaker_accuracy: accuracy(&p.gold_speaker, &p.pred_speaker)?,
            speaker_weighted_f1: weighted_f1(&p.gold_speaker, &p.pred_speaker, num_emotions)?,
            listener_accuracy: accuracy(&p.gold_listener, &p.pred_listener)?,
            listener_weighted_f1: weighted_f1(&p.gold_listener, &p.pred_listener, num_emotions)?,
            intent_hamming_loss: hamming_loss(&p.gold_intents, &p.pred_intents)?,
            intent_micro_f1: micro_f1(&p.gold_intents, &p.pred_intents)?,
            intent_average_precision: ap,
            samples: p.gold_speaker.len(),
        })
    }
}

/// `(name, value, count)` rows for the text report and key-value export.
pub fn report_rows(generation: Option<&GenerationReport>, state: Option<&StateReport>) -> Vec<(&'static str, f64, usize)> {
    let mut rows = Vec::new();
    if let Some(g) = generation {
        rows.extend([
            ("bleu4", g.bleu4, g.samples),
            ("dist1", g.dist1, g.samples),
            ("dist2", g.dist2, g.samples),
        ]);
    }
    if let Some(s) = state {
        rows.extend([
            ("speaker_accuracy", s.speaker_accuracy, s.samples),
            ("speaker_weighted_f1", s.speaker_weighted_f1, s.samples),
            ("listener_accuracy", s.listener_accuracy, s.samples),
            ("listener_weighted_f1", s.listener_weighted_f1, s.samples),
            ("intent_hamming_loss", s.intent_hamming_loss, s.samples),
            ("intent_micro_f1", s.intent_micro_f1, s.samples),
            ("intent_average_precision", s.intent_average_precision, s.samples),
        ]);
    }
    rows
}

pub fn format_text_report(rows: &[(&str, f64, usize)]) -> String {
    rows.iter()
        .map(|(n, v, c)| format!("{n:<26} {v:>12.6} (n={c})\n"))
        .collect()
}

pub fn format_kv_report(rows: &[(&str, f64, usize)]) -> String {
    rows.iter().map(|(n, v, _)| format!("{n}={v}\n")).collect()
}
