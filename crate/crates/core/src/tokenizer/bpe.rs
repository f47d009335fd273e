//! Byte-level BPE with byte fallback and reserved special tokens.
//!
//! Ids `0..256` are raw bytes, `256..260` are the special tokens and every
//! learned merge gets the next id in order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Deref;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BYTE_TOKENS: usize = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const INTERRUPT: TokenId = 259;
pub const FIRST_MERGE_ID: TokenId = 260;

/// Special tokens in id order, with their literal text forms.
pub const SPECIALS: [(&str, TokenId, &str); 4] = [
    ("bos", BOS, "<|bos|>"),
    ("eos", EOS, "<|eos|>"),
    ("pad", PAD, "<|pad|>"),
    ("interrupt", INTERRUPT, "<|I|>"),
];

pub const INTERRUPT_LITERAL: &str = "<|I|>";

const VOCAB_HEADER: &str = "#csasr-vocab v1";

/// An ordered sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<TokenId>);

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

impl TokenSeq {
    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::bytes_only()
    }
}

impl Vocab {
    /// 256 byte tokens plus the specials, no merges.
    pub fn bytes_only() -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for (_, _, lit) in SPECIALS {
            pieces.push(lit.as_bytes().to_vec());
        }
        Self {
            pieces,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (BYTE_TOKENS as TokenId..FIRST_MERGE_ID).contains(&id)
    }

    /// Raw bytes of a token; specials yield their literal form.
    pub fn piece(&self, id: TokenId) -> Result<&[u8]> {
        self.pieces
            .get(id as usize)
            .map(|p| p.as_slice())
            .ok_or_else(|| Error::Vocabulary(format!("unknown token id {id}")))
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId) -> Result<TokenId> {
        let n = self.pieces.len() as TokenId;
        if left >= n || right >= n {
            return Err(Error::Vocabulary(format!("merge ({left}, {right}) references unknown id")));
        }
        if self.is_special(left) || self.is_special(right) {
            return Err(Error::Vocabulary("merges may not involve special tokens".into()));
        }
        let mut bytes = self.pieces[left as usize].clone();
        bytes.extend_from_slice(&self.pieces[right as usize]);
        if SPECIALS.iter().any(|(_, _, lit)| lit.as_bytes() == bytes.as_slice()) {
            return Err(Error::Vocabulary("merge would spell a special token".into()));
        }
        if self.ranks.insert((left, right), self.merges.len()).is_some() {
            return Err(Error::Vocabulary(format!("duplicate merge ({left}, {right})")));
        }
        self.merges.push((left, right));
        self.pieces.push(bytes);
        Ok(n)
    }

    /// Applies the merge list to one pre-split chunk.
    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = chunk.iter().map(|&b| b as TokenId).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank];
            let new_id = FIRST_MERGE_ID + rank as TokenId;
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    /// Plain BPE encoding. Special-token literals in the input are treated
    /// as ordinary text.
    pub fn encode_plain(&self, text: &str) -> TokenSeq {
        let mut out = Vec::new();
        for chunk in split_chunks(text) {
            self.encode_chunk(chunk.as_bytes(), &mut out);
        }
        TokenSeq(out)
    }

    /// Encoding that recognises special-token literals as single,
    /// unbreakable tokens; BPE never merges across them.
    pub fn encode_with_specials(&self, text: &str) -> TokenSeq {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = SPECIALS
                .iter()
                .filter_map(|(_, id, lit)| rest.find(lit).map(|pos| (pos, *id, lit.len())))
                .min_by_key(|&(pos, id, _)| (pos, id));
            match next {
                Some((pos, id, len)) => {
                    for chunk in split_chunks(&rest[..pos]) {
                        self.encode_chunk(chunk.as_bytes(), &mut out);
                    }
                    out.push(id);
                    rest = &rest[pos + len..];
                }
                None => {
                    for chunk in split_chunks(rest) {
                        self.encode_chunk(chunk.as_bytes(), &mut out);
                    }
                    rest = "";
                }
            }
        }
        TokenSeq(out)
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.piece(id)?);
        }
        Ok(bytes)
    }

    /// Concatenates token bytes. Byte sequences that are not valid UTF-8
    /// (possible for model output) are decoded lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Text vocab file: a header, the specials, then one merge per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{VOCAB_HEADER}").unwrap();
        for (name, id, lit) in SPECIALS {
            writeln!(s, "special {name} {id} {lit}").unwrap();
        }
        for (l, r) in &self.merges {
            writeln!(s, "merge {l} {r}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == VOCAB_HEADER => {}
            _ => return Err(Error::Vocabulary(format!("missing {VOCAB_HEADER:?} header"))),
        }
        let mut vocab = Vocab::bytes_only();
        let mut seen_specials = 0;
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let bad = || Error::Vocabulary(format!("line {}: cannot parse {line:?}", no + 1));
            match fields.as_slice() {
                ["special", name, id, lit] => {
                    let id: TokenId = id.parse().map_err(|_| bad())?;
                    let ok = SPECIALS
                        .iter()
                        .any(|(n, i, l)| n == name && *i == id && l == lit);
                    if !ok {
                        return Err(Error::Vocabulary(format!(
                            "line {}: special {name} must be id/literal of the fixed layout",
                            no + 1
                        )));
                    }
                    seen_specials += 1;
                }
                ["merge", l, r] => {
                    let l = l.parse().map_err(|_| bad())?;
                    let r = r.parse().map_err(|_| bad())?;
                    vocab.push_merge(l, r)?;
                }
                _ => return Err(bad()),
            }
        }
        if seen_specials != SPECIALS.len() {
            return Err(Error::Vocabulary("vocab file must list every special token".into()));
        }
        Ok(vocab)
    }
}

/// Pre-tokenization: each chunk is an optional whitespace run followed by a
/// run of non-whitespace. Lossless, and merges never cross chunks.
pub fn split_chunks(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut prev_ws: Option<bool> = None;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && prev_ws == Some(false) {
            chunks.push(&text[start..i]);
            start = i;
        }
        prev_ws = Some(ws);
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

/// Learns merges greedily by pair frequency until the vocabulary holds
/// `target_vocab` tokens (bytes and specials included) or no pair occurs
/// at least twice. Ties go to the byte-wise smallest `(left, right)`.
pub fn train_bpe<'a, I>(corpus: I, target_vocab: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut vocab = Vocab::bytes_only();
    if target_vocab < vocab.len() {
        return Err(Error::TokenizerTraining(format!(
            "target vocab {target_vocab} is below the {} byte and special tokens",
            vocab.len()
        )));
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    for line in corpus {
        for chunk in split_chunks(line) {
            *counts.entry(chunk.as_bytes()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::TokenizerTraining("empty corpus".into()));
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = counts
        .into_iter()
        .map(|(bytes, n)| (bytes.iter().map(|&b| b as TokenId).collect(), n))
        .collect();
    words.sort();

    while vocab.len() < target_vocab {
        let mut pairs: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let spells_special = |&(l, r): &(TokenId, TokenId)| {
            let mut b = vocab.pieces[l as usize].clone();
            b.extend_from_slice(&vocab.pieces[r as usize]);
            SPECIALS.iter().any(|(_, _, lit)| lit.as_bytes() == b.as_slice())
        };
        let best = pairs
            .iter()
            .filter(|(p, &n)| n >= 2 && !spells_special(p))
            .max_by(|(pa, na), (pb, nb)| {
                na.cmp(nb).then_with(|| {
                    let ka = (&vocab.pieces[pa.0 as usize], &vocab.pieces[pa.1 as usize]);
                    let kb = (&vocab.pieces[pb.0 as usize], &vocab.pieces[pb.1 as usize]);
                    // smaller pair wins a tie, so it must compare as "greater"
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((l, r)) = best else { break };
        let new_id = vocab.push_merge(l, r)?;
        for (ids, _) in &mut words {
            if ids.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }
    Ok(vocab)
}

impl PartialOrd for TokenSeq {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TokenSeq {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}
