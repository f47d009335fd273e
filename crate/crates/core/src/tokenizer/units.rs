//! Transcript normalisation and segmentation into recognition units:
//! one Chinese character, one English word, or one run of other symbols.

use crate::error::{Error, Result};
use crate::lang::UnitLang;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Unit {
    pub text: String,
    pub lang: UnitLang,
    pub preceded_by_space: bool,
}

impl Unit {
    /// The unit as it is tokenized: with its leading space, if any.
    pub fn surface(&self) -> String {
        if self.preceded_by_space {
            format!(" {}", self.text)
        } else {
            self.text.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnitSeq {
    pub units: Vec<Unit>,
}

impl UnitSeq {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Unit> {
        self.units.iter()
    }

    /// Rebuilds the text the units were segmented from.
    pub fn join(&self) -> String {
        let mut s = String::new();
        for u in &self.units {
            if u.preceded_by_space {
                s.push(' ');
            }
            s.push_str(&u.text);
        }
        s
    }

    pub fn count(&self, lang: UnitLang) -> usize {
        self.units.iter().filter(|u| u.lang == lang).count()
    }
}

/// CJK Unified Ideographs, base block only.
pub fn is_cjk(c: char) -> bool {
    ('\u{4E00}'..='\u{9FFF}').contains(&c)
}

pub fn is_en_char(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '\''
}

fn class_of(c: char) -> UnitLang {
    if is_cjk(c) {
        UnitLang::Zh
    } else if is_en_char(c) {
        UnitLang::En
    } else {
        UnitLang::Other
    }
}

/// Collapses whitespace runs to one space and trims both ends. Case is kept.
pub fn normalize(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn normalize_bytes(raw: &[u8]) -> Result<String> {
    let s = std::str::from_utf8(raw)
        .map_err(|e| Error::Encoding(format!("invalid UTF-8 at byte {}", e.valid_up_to())))?;
    Ok(normalize(s))
}

/// Splits text into units. Every CJK character is its own unit, maximal
/// `[A-Za-z']` runs are English units and maximal runs of anything else
/// (digits, punctuation) are `other` units.
pub fn segment_units(text: &str) -> UnitSeq {
    let mut units: Vec<Unit> = Vec::new();
    let mut pending_space = false;
    let mut current: Option<Unit> = None;

    for c in text.chars() {
        if c.is_whitespace() {
            if let Some(u) = current.take() {
                units.push(u);
            }
            pending_space = true;
            continue;
        }
        let class = class_of(c);
        match current.as_mut() {
            Some(u) if u.lang == class && class != UnitLang::Zh => u.text.push(c),
            _ => {
                if let Some(u) = current.take() {
                    units.push(u);
                }
                current = Some(Unit {
                    text: c.to_string(),
                    lang: class,
                    preceded_by_space: pending_space && !units.is_empty(),
                });
                pending_space = false;
            }
        }
    }
    if let Some(u) = current {
        units.push(u);
    }
    UnitSeq { units }
}
