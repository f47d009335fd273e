//! Unit-level edit-distance scoring: CER over Chinese characters, WER over
//! English words and MER over all units.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lang::{UnitLang, UttLang};
use crate::tokenizer::{normalize, segment_units, Unit};

/// One step of an alignment, indexing into the reference and hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match(usize, usize),
    Sub(usize, usize),
    Del(usize),
    Ins(usize),
}

/// Minimum-cost alignment with unit costs. When several paths are optimal
/// the backtrace prefers match/substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, x) in d.iter_mut().take(m + 1).enumerate() {
        *x = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let up = d[(i - 1) * w + j] + 1;
            let left = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(up).min(left);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Match(i - 1, j - 1)
                } else {
                    EditOp::Sub(i - 1, j - 1)
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del(i - 1));
            i -= 1;
        } else {
            ops.push(EditOp::Ins(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
    /// Reference units.
    pub n: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }

    /// `100·(S+D+I)/N`. With no reference units the rate is 0 when there
    /// are no errors and 100 otherwise.
    pub fn rate(&self) -> f64 {
        if self.n == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                100.0
            }
        } else {
            100.0 * self.errors() as f64 / self.n as f64
        }
    }

    fn add(&mut self, o: &ErrorCounts) {
        self.sub += o.sub;
        self.del += o.del;
        self.ins += o.ins;
        self.n += o.n;
    }
}

/// Counts split by unit language. Substitutions and deletions belong to the
/// reference unit, insertions to the inserted hypothesis unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ErrorReport {
    pub zh: ErrorCounts,
    pub en: ErrorCounts,
    pub other: ErrorCounts,
    pub all: ErrorCounts,
}

impl ErrorReport {
    pub fn cer(&self) -> f64 {
        self.zh.rate()
    }

    pub fn wer(&self) -> f64 {
        self.en.rate()
    }

    pub fn mer(&self) -> f64 {
        self.all.rate()
    }

    fn bucket(&mut self, lang: UnitLang) -> &mut ErrorCounts {
        match lang {
            UnitLang::Zh => &mut self.zh,
            UnitLang::En => &mut self.en,
            UnitLang::Other => &mut self.other,
        }
    }

    pub fn merge(&mut self, o: &ErrorReport) {
        self.zh.add(&o.zh);
        self.en.add(&o.en);
        self.other.add(&o.other);
        self.all.add(&o.all);
    }

    /// `CER=x.xx WER=y.yy MER=z.zz`
    pub fn summary_line(&self) -> String {
        format!("CER={:.2} WER={:.2} MER={:.2}", self.cer(), self.wer(), self.mer())
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, c) in [("zh", &self.zh), ("en", &self.en), ("other", &self.other), ("all", &self.all)] {
            writeln!(
                f,
                "{name:<6} N={:<6} S={:<5} D={:<5} I={:<5} rate={:.2}",
                c.n,
                c.sub,
                c.del,
                c.ins,
                c.rate()
            )?;
        }
        write!(f, "{}", self.summary_line())
    }
}

fn unit_key(u: &Unit) -> &str {
    &u.text
}

/// Scores one hypothesis against its reference.
pub fn score_pair(reference: &str, hypothesis: &str) -> ErrorReport {
    let r = segment_units(&normalize(reference));
    let h = segment_units(&normalize(hypothesis));
    let rk: Vec<&str> = r.iter().map(unit_key).collect();
    let hk: Vec<&str> = h.iter().map(unit_key).collect();
    let mut rep = ErrorReport::default();
    for u in r.iter() {
        rep.bucket(u.lang).n += 1;
    }
    for op in align(&rk, &hk) {
        match op {
            EditOp::Match(..) => {}
            EditOp::Sub(i, _) => rep.bucket(r.units[i].lang).sub += 1,
            EditOp::Del(i) => rep.bucket(r.units[i].lang).del += 1,
            EditOp::Ins(j) => rep.bucket(h.units[j].lang).ins += 1,
        }
    }
    let mut all = ErrorCounts::default();
    for c in [rep.zh, rep.en, rep.other] {
        all.add(&c);
    }
    rep.all = all;
    rep
}

/// A reference or hypothesis line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    pub id: String,
    pub text: String,
}

/// Corpus-level report plus one report per utterance language.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub overall: ErrorReport,
    pub by_lang: BTreeMap<String, ErrorReport>,
    pub utterances: usize,
}

/// Scores hypotheses against references. Both sides must carry exactly the
/// same ids; counts are summed over utterances before rates are taken.
pub fn score(
    references: &[Transcript],
    hypotheses: &[Transcript],
    langs: Option<&BTreeMap<String, UttLang>>,
) -> Result<ScoreSummary> {
    let mut hyp: BTreeMap<&str, &str> = BTreeMap::new();
    for h in hypotheses {
        if hyp.insert(&h.id, &h.text).is_some() {
            return Err(Error::Pairing(format!("duplicate hypothesis id {}", h.id)));
        }
    }
    let ref_ids: BTreeSet<&str> = references.iter().map(|r| r.id.as_str()).collect();
    if ref_ids.len() != references.len() {
        return Err(Error::Pairing("duplicate reference id".into()));
    }
    if let Some(extra) = hyp.keys().find(|k| !ref_ids.contains(*k)) {
        return Err(Error::Pairing(format!("hypothesis {extra} has no reference")));
    }
    let mut out = ScoreSummary::default();
    for r in references {
        let h = hyp
            .get(r.id.as_str())
            .ok_or_else(|| Error::Pairing(format!("reference {} has no hypothesis", r.id)))?;
        let rep = score_pair(&r.text, h);
        out.overall.merge(&rep);
        if let Some(l) = langs.and_then(|m| m.get(&r.id)) {
            out.by_lang.entry(l.to_string()).or_default().merge(&rep);
        }
        out.utterances += 1;
    }
    Ok(out)
}

/// Parses `id<TAB>text` lines.
pub fn parse_tsv(text: &str) -> Result<Vec<Transcript>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, t) = l
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {}: expected id<TAB>text", i + 1)))?;
            Ok(Transcript {
                id: id.to_string(),
                text: t.to_string(),
            })
        })
        .collect()
}
