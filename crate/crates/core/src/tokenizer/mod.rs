//! Byte-fallback BPE, unit segmentation and IDIT label encoding.

pub mod bpe;
pub mod idit;
pub mod units;

pub use bpe::{train_bpe, TokenId, TokenSeq, Vocab, BOS, EOS, INTERRUPT, PAD};
pub use idit::{encode_idit, encode_interrupted, interrupted_text};
pub use units::{normalize, normalize_bytes, segment_units, Unit, UnitSeq};

/// How transcripts are turned into label ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelEncoding {
    Plain,
    Idit,
}

impl LabelEncoding {
    pub fn from_idit_flag(idit: bool) -> Self {
        if idit {
            LabelEncoding::Idit
        } else {
            LabelEncoding::Plain
        }
    }

    pub fn encode(self, text: &str, vocab: &Vocab) -> TokenSeq {
        match self {
            LabelEncoding::Plain => vocab.encode_plain(text),
            LabelEncoding::Idit => encode_idit(text, vocab),
        }
    }
}
