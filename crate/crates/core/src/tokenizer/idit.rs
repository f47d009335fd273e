//! Insertion and deletion of an interruption token.
//!
//! Every unit (Chinese character, English word, other-symbol run) is
//! followed by `<|I|>`, the interrupted text is tokenized with `<|I|>` as an
//! unbreakable special token, and the interruption ids are then dropped.
//! The resulting labels never contain a token that spans two units.

use super::bpe::{TokenSeq, Vocab, INTERRUPT, INTERRUPT_LITERAL};
use super::units::{normalize, segment_units, UnitSeq};

/// The interrupted text: each unit, with its leading space, followed by the
/// interruption literal.
pub fn interrupted_text(units: &UnitSeq) -> String {
    let mut s = String::new();
    for u in units.iter() {
        s.push_str(&u.surface());
        s.push_str(INTERRUPT_LITERAL);
    }
    s
}

/// Token ids of the interrupted text, interruption tokens still in place.
pub fn encode_interrupted(text: &str, vocab: &Vocab) -> TokenSeq {
    let units = segment_units(&normalize(text));
    let mut out = Vec::new();
    for u in units.iter() {
        let piece = vocab.encode_plain(&u.surface());
        assert!(
            !piece.is_empty(),
            "unit {:?} produced no tokens despite byte fallback",
            u.text
        );
        out.extend(piece.0);
        out.push(INTERRUPT);
    }
    TokenSeq(out)
}

/// IDIT label encoding of `text` (normalized first).
pub fn encode_idit(text: &str, vocab: &Vocab) -> TokenSeq {
    let mut ids = encode_interrupted(text, vocab).0;
    ids.retain(|&id| id != INTERRUPT);
    TokenSeq(ids)
}
