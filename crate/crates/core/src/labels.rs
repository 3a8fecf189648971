//! Closed emotion and intent label sets with stable integer encodings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident, $err:ident, [$($variant:ident => $text:literal),+ $(,)?]) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn id(self) -> usize {
                self as usize
            }

            pub fn from_id(id: usize) -> Option<Self> {
                Self::ALL.get(id).copied()
            }

            pub fn name(self) -> &'static str {
                Self::NAMES[self.id()]
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                let lower = s.trim().to_lowercase();
                Self::NAMES
                    .iter()
                    .position(|n| *n == lower)
                    .map(|i| Self::ALL[i])
                    .ok_or_else(|| Error::$err {
                        label: s.to_string(),
                        valid: Self::NAMES.join(", "),
                    })
            }
        }
    };
}

label_enum!(
    /// Utterance emotion. Encoded 0..7 in alphabetical order.
    Emotion,
    UnknownEmotion,
    [
        Anger => "anger",
        Disgust => "disgust",
        Fear => "fear",
        Joy => "joy",
        Neutral => "neutral",
        Sadness => "sadness",
        Surprise => "surprise",
    ]
);

label_enum!(
    /// Listener response intent. Encoded 0..9.
    Intent,
    UnknownIntent,
    [
        Questioning => "questioning",
        Acknowledging => "acknowledging",
        Agreeing => "agreeing",
        Consoling => "consoling",
        Encouraging => "encouraging",
        Sympathizing => "sympathizing",
        Wishing => "wishing",
        Suggesting => "suggesting",
        Neutral => "neutral",
    ]
);

pub const NUM_EMOTIONS: usize = Emotion::COUNT;
pub const NUM_INTENTS: usize = Intent::COUNT;

/// Multi-hot intent vector in canonical order.
pub type IntentSet = [bool; NUM_INTENTS];

pub fn intent_set(intents: &[Intent]) -> IntentSet {
    let mut set = [false; NUM_INTENTS];
    for i in intents {
        set[i.id()] = true;
    }
    set
}

pub fn intents_of(set: &IntentSet) -> Vec<Intent> {
    set.iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| Intent::ALL[i])
        .collect()
}
