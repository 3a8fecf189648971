//! Emotion-shift prior matrices built by frequency normalization.
//!
//! Rows are indexed by the speaker emotion of an exchange; columns by the
//! emotion (or each intent) of the listener turn that follows it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::labels::{Emotion, Intent, NUM_EMOTIONS, NUM_INTENTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftKind {
    #[serde(rename = "emo-emo")]
    EmoEmo,
    #[serde(rename = "emo-intent")]
    EmoIntent,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::EmoEmo => "emo-emo",
            Self::EmoIntent => "emo-intent",
        }
    }

    pub fn cols(self) -> usize {
        match self {
            Self::EmoEmo => NUM_EMOTIONS,
            Self::EmoIntent => NUM_INTENTS,
        }
    }

    pub fn col_names(self) -> &'static [&'static str] {
        match self {
            Self::EmoEmo => Emotion::NAMES,
            Self::EmoIntent => Intent::NAMES,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Add one to every count before normalizing.
    AddOne,
}

/// Row-stochastic `7 × cols` transition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftMatrix {
    kind: ShiftKind,
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub source: usize,
    pub target: usize,
    pub source_name: &'static str,
    pub target_name: &'static str,
    pub probability: f64,
}

impl ShiftMatrix {
    /// Row-normalizes raw counts; rows without counts become uniform.
    pub fn from_counts(kind: ShiftKind, counts: &[f64], smoothing: Smoothing) -> Result<Self> {
        let cols = kind.cols();
        if counts.len() != NUM_EMOTIONS * cols {
            return Err(Error::Prior(format!(
                "{} counts need {} cells, got {}",
                kind.name(),
                NUM_EMOTIONS * cols,
                counts.len()
            )));
        }
        let extra = if smoothing == Smoothing::AddOne { 1.0 } else { 0.0 };
        let mut values = Vec::with_capacity(counts.len());
        for row in counts.chunks(cols) {
            let total: f64 = row.iter().map(|c| c + extra).sum();
            if total > 0.0 {
                values.extend(row.iter().map(|c| (c + extra) / total));
            } else {
                values.extend(std::iter::repeat_n(1.0 / cols as f64, cols));
            }
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> ShiftKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        NUM_EMOTIONS
    }

    pub fn cols(&self) -> usize {
        self.kind.cols()
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.values[source * self.cols() + target]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Probability row for source emotion `k`.
    pub fn lookup_row(&self, k: usize) -> Result<Vec<f64>> {
        if k >= NUM_EMOTIONS {
            return Err(Error::LabelOutOfRange("emotion", k));
        }
        let c = self.cols();
        Ok(self.values[k * c..(k + 1) * c].to_vec())
    }

    /// Transitions by probability, highest first; ties by (source, target).
    pub fn report_statistics(&self, top_n: usize) -> Vec<Transition> {
        let names = self.kind.col_names();
        let mut all: Vec<Transition> = (0..self.rows())
            .flat_map(|s| (0..self.cols()).map(move |t| (s, t)))
            .map(|(s, t)| Transition {
                source: s,
                target: t,
                source_name: Emotion::NAMES[s],
                target_name: names[t],
                probability: self.get(s, t),
            })
            .collect();
        all.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then(a.source.cmp(&b.source))
                .then(a.target.cmp(&b.target))
        });
        all.truncate(top_n);
        all
    }

    /// Text export: header lines naming the kind and labels, then one row
    /// of 9-decimal probabilities per source emotion.
    pub fn export(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind {}", self.kind.name());
        let _ = writeln!(out, "rows {}", Emotion::NAMES.join(" "));
        let _ = writeln!(out, "cols {}", self.kind.col_names().join(" "));
        for row in self.values.chunks(self.cols()) {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.9}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    /// Parses [`ShiftMatrix::export`] output. Rows are renormalized to undo
    /// the rounding of the text form.
    pub fn import(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Prior(format!("missing `{key}` header")))?;
            line.strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| Error::Prior(format!("expected `{key}` header, got `{line}`")))
        };
        let kind = match header("kind")?.as_str() {
            "emo-emo" => ShiftKind::EmoEmo,
            "emo-intent" => ShiftKind::EmoIntent,
            other => return Err(Error::Prior(format!("unknown matrix kind `{other}`"))),
        };
        if header("rows")? != Emotion::NAMES.join(" ") {
            return Err(Error::Prior("row labels are not the canonical emotion order".into()));
        }
        if header("cols")? != kind.col_names().join(" ") {
            return Err(Error::Prior("column labels are not in canonical order".into()));
        }
        let mut values = Vec::with_capacity(NUM_EMOTIONS * kind.cols());
        let mut rows = 0;
        for line in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|c| c.parse::<f64>().map_err(|e| Error::Prior(format!("bad probability `{c}`: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != kind.cols() {
                return Err(Error::Prior(format!("row {rows} has {} cells, want {}", row.len(), kind.cols())));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Prior(format!("row {rows} is not a probability distribution")));
            }
            values.extend(row.iter().map(|p| p / total));
            rows += 1;
        }
        if rows != NUM_EMOTIONS {
            return Err(Error::Prior(format!("expected {NUM_EMOTIONS} rows, got {rows}")));
        }
        Ok(Self { kind, values })
    }
}

fn count<'a>(sets: impl Iterator<Item = &'a Dialogue>, kind: ShiftKind) -> Vec<f64> {
    let cols = kind.cols();
    let mut counts = vec![0.0; NUM_EMOTIONS * cols];
    for d in sets {
        for (s, l) in d.exchanges() {
            let row = s.emotion.id() * cols;
            match kind {
                ShiftKind::EmoEmo => counts[row + l.emotion.id()] += 1.0,
                ShiftKind::EmoIntent => {
                    for i in &l.intents {
                        counts[row + i.id()] += 1.0;
                    }
                }
            }
        }
    }
    counts
}

/// Speaker-emotion → listener-emotion shift matrix over train and valid.
pub fn build_emo_emo(train: &[Dialogue], valid: &[Dialogue], smoothing: Smoothing) -> ShiftMatrix {
    let counts = count(train.iter().chain(valid), ShiftKind::EmoEmo);
    ShiftMatrix::from_counts(ShiftKind::EmoEmo, &counts, smoothing).expect("count shape matches kind")
}

/// Speaker-emotion → listener-intent shift matrix; a listener turn with k
/// intents contributes k counts.
pub fn build_emo_intent(train: &[Dialogue], valid: &[Dialogue], smoothing: Smoothing) -> ShiftMatrix {
    let counts = count(train.iter().chain(valid), ShiftKind::EmoIntent);
    ShiftMatrix::from_counts(ShiftKind::EmoIntent, &counts, smoothing).expect("count shape matches kind")
}

/// Both prior matrices a model conditions on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub emo_emo: ShiftMatrix,
    pub emo_intent: ShiftMatrix,
}

impl Priors {
    pub fn build(train: &[Dialogue], valid: &[Dialogue], smoothing: Smoothing) -> Self {
        Self {
            emo_emo: build_emo_emo(train, valid, smoothing),
            emo_intent: build_emo_intent(train, valid, smoothing),
        }
    }

    pub fn uniform() -> Self {
        Self {
            emo_emo: ShiftMatrix::from_counts(ShiftKind::EmoEmo, &[0.0; NUM_EMOTIONS * NUM_EMOTIONS], Smoothing::None)
                .expect("shape"),
            emo_intent: ShiftMatrix::from_counts(
                ShiftKind::EmoIntent,
                &[0.0; NUM_EMOTIONS * NUM_INTENTS],
                Smoothing::None,
            )
            .expect("shape"),
        }
    }
}
