use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Language of a single transcript unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitLang {
    Zh,
    En,
    Other,
}

/// Utterance-level language tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UttLang {
    Zh,
    En,
    Cs,
}

impl UttLang {
    pub const ALL: [UttLang; 3] = [UttLang::Zh, UttLang::En, UttLang::Cs];

    pub fn as_str(self) -> &'static str {
        match self {
            UttLang::Zh => "zh",
            UttLang::En => "en",
            UttLang::Cs => "cs",
        }
    }
}

impl UnitLang {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitLang::Zh => "zh",
            UnitLang::En => "en",
            UnitLang::Other => "other",
        }
    }
}

impl fmt::Display for UttLang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for UnitLang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UttLang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "zh" => Ok(UttLang::Zh),
            "en" => Ok(UttLang::En),
            "cs" => Ok(UttLang::Cs),
            other => Err(Error::Parse(format!("unknown utterance language {other:?}"))),
        }
    }
}
