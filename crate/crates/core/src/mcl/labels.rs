use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentiment polarity of an aspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "NEG")]
    Neg,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Pos, Polarity::Neu, Polarity::Neg];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neu => "NEU",
            Polarity::Neg => "NEG",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Joint BIO/polarity tag. The discriminants are the fixed class indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioLabel {
    BPos = 0,
    IPos = 1,
    BNeu = 2,
    INeu = 3,
    BNeg = 4,
    INeg = 5,
    O = 6,
}

impl BioLabel {
    pub const COUNT: usize = 7;
    pub const ALL: [BioLabel; 7] = [
        BioLabel::BPos,
        BioLabel::IPos,
        BioLabel::BNeu,
        BioLabel::INeu,
        BioLabel::BNeg,
        BioLabel::INeg,
        BioLabel::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn begin(p: Polarity) -> Self {
        Self::ALL[2 * p.index()]
    }

    pub fn inside(p: Polarity) -> Self {
        Self::ALL[2 * p.index() + 1]
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            BioLabel::O => None,
            l => Some(Polarity::ALL[l.index() / 2]),
        }
    }

    pub fn is_begin(self) -> bool {
        self != BioLabel::O && self.index() % 2 == 0
    }

    pub fn is_inside(self) -> bool {
        self.index() % 2 == 1
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioLabel::BPos => "B-POS",
            BioLabel::IPos => "I-POS",
            BioLabel::BNeu => "B-NEU",
            BioLabel::INeu => "I-NEU",
            BioLabel::BNeg => "B-NEG",
            BioLabel::INeg => "I-NEG",
            BioLabel::O => "O",
        }
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BioLabel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown label {s:?}")))
    }
}

impl Serialize for BioLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BioLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
