//! The three input modalities and per-modality containers.

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Log-mel spectrogram.
    S,
    /// Raw waveform.
    W,
    /// Video frames.
    V,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::S, Modality::W, Modality::V];

    pub fn letter(self) -> char {
        match self {
            Modality::S => 'S',
            Modality::W => 'W',
            Modality::V => 'V',
        }
    }

    /// Parameter-name prefix of this modality's encoder.
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::S => "spec",
            Modality::W => "wave",
            Modality::V => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Modality::S),
            "W" | "w" => Ok(Modality::W),
            "V" | "v" => Ok(Modality::V),
            _ => Err(Error::InvalidConfig(format!("unknown modality {s:?}"))),
        }
    }
}

/// A subset of the modalities that takes part in pretraining, written as a
/// string of letters such as `"SVW"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalitySet {
    pub s: bool,
    pub w: bool,
    pub v: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet { s: true, w: true, v: true };

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::S => self.s,
            Modality::W => self.w,
            Modality::V => self.v,
        }
    }

    pub fn len(&self) -> usize {
        usize::from(self.s) + usize::from(self.w) + usize::from(self.v)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|&m| self.contains(m))
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, on) in [(Modality::S, self.s), (Modality::V, self.v), (Modality::W, self.w)] {
            if on {
                write!(f, "{m}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModalitySet { s: false, w: false, v: false };
        for c in s.chars().filter(|c| !matches!(c, ',' | ' ')) {
            let m: Modality = c.encode_utf8(&mut [0; 4]).parse()?;
            let slot = match m {
                Modality::S => &mut set.s,
                Modality::W => &mut set.w,
                Modality::V => &mut set.v,
            };
            if core::mem::replace(slot, true) {
                return Err(Error::InvalidConfig(format!("modality {m} listed twice in {s:?}")));
            }
        }
        if set.len() < 2 {
            return Err(Error::InvalidConfig(format!("need at least two modalities, got {s:?}")));
        }
        Ok(set)
    }
}

impl TryFrom<String> for ModalitySet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModalitySet> for String {
    fn from(m: ModalitySet) -> String {
        format!("{m}")
    }
}

/// One optional value per modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerModality<T> {
    pub s: Option<T>,
    pub w: Option<T>,
    pub v: Option<T>,
}

impl<T> PerModality<T> {
    pub fn empty() -> Self {
        Self { s: None, w: None, v: None }
    }

    pub fn get(&self, m: Modality) -> Option<&T> {
        match m {
            Modality::S => self.s.as_ref(),
            Modality::W => self.w.as_ref(),
            Modality::V => self.v.as_ref(),
        }
    }

    pub fn slot(&mut self, m: Modality) -> &mut Option<T> {
        match m {
            Modality::S => &mut self.s,
            Modality::W => &mut self.w,
            Modality::V => &mut self.v,
        }
    }

    pub fn set(&mut self, m: Modality, value: T) {
        *self.slot(m) = Some(value);
    }

    pub fn present(&self) -> ModalitySet {
        ModalitySet { s: self.s.is_some(), w: self.w.is_some(), v: self.v.is_some() }
    }

    pub fn as_ref(&self) -> PerModality<&T> {
        PerModality { s: self.s.as_ref(), w: self.w.as_ref(), v: self.v.as_ref() }
    }

    pub fn map<U>(self, mut f: impl FnMut(Modality, T) -> U) -> PerModality<U> {
        PerModality {
            s: self.s.map(|x| f(Modality::S, x)),
            w: self.w.map(|x| f(Modality::W, x)),
            v: self.v.map(|x| f(Modality::V, x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print_sets() {
        let all: ModalitySet = "SVW".parse().unwrap();
        assert_eq!(all, ModalitySet::ALL);
        assert_eq!(format!("{}", "w,s".parse::<ModalitySet>().unwrap()), "SW");
        assert!("S".parse::<ModalitySet>().is_err());
        assert!("SSW".parse::<ModalitySet>().is_err());
        assert!("SX".parse::<ModalitySet>().is_err());
        let json = serde_json::to_string(&all).unwrap();
        assert_eq!(json, "\"SVW\"");
    }
}
