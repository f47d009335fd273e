//! Deterministic synthetic Mandarin-English code-switching corpus.
//!
//! Transcripts are drawn from fixed pools of CJK characters and Latin words.
//! "Speech" for an utterance is rendered on demand from its seed: every unit
//! has a fixed prototype vector (seeded by a hash of its text) and emits a
//! random number of noisy copies of it as frames.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::connector::FrameMatrix;
use crate::error::{Error, Result};
use crate::lang::{UnitLang, UttLang};
use crate::tokenizer::{normalize, segment_units};

pub const ZH_POOL: &[char] = &[
    '我', '你', '他', '们', '的', '是', '在', '有', '这', '个', '不', '了', '人', '来', '到', '说',
    '就', '要', '会', '可', '以', '时', '大', '看', '好', '天', '下', '上', '中', '年', '做', '开',
    '后', '能', '还', '去', '想', '问', '题', '没', '多', '家', '经', '理', '面', '工', '作', '发',
    '现', '知', '道', '点', '样', '今', '明', '再', '用', '学', '生', '东', '西', '吃', '饭', '车',
];

pub const EN_POOL: &[&str] = &[
    "the", "meeting", "project", "email", "phone", "team", "data", "model", "check", "update",
    "issue", "plan", "deadline", "report", "call", "office", "design", "code", "test", "demo",
    "speech", "feature", "client", "budget", "review", "sync", "task", "schedule", "share", "deal",
    "slide", "draft", "note", "link", "file", "app", "server", "bug", "release", "version",
    "online", "offline", "idea", "case", "level", "group", "sale", "market", "brand", "focus",
    "simple", "quick", "basic", "final", "happy", "busy", "free", "cool", "nice", "fine",
    "OK", "PPT", "iPhone", "Wifi",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub zh_vocab: usize,
    pub en_vocab: usize,
    /// Inclusive range of units per utterance (matrix-language units for CS).
    pub utt_len: (usize, usize),
    /// Probability of inserting an embedded-language span at each slot of a
    /// code-switched utterance.
    pub cs_prob: f64,
    pub cs_span: (usize, usize),
    /// Probability that the next Chinese character is the fixed successor
    /// of the previous one. The successor map is a cyclic shift, so the
    /// marginal character distribution stays uniform.
    pub zh_successor_prob: f64,
    /// English-matrix switching (Chinese spans inside English) instead of
    /// the default Chinese-matrix form.
    pub en_matrix: bool,
    pub frames_per_unit: (usize, usize),
    pub d_feat: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub prototype_seed: u64,
    pub train: LangCounts,
    pub test: LangCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangCounts {
    pub zh: usize,
    pub en: usize,
    pub cs: usize,
}

impl LangCounts {
    pub fn total(&self) -> usize {
        self.zh + self.en + self.cs
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            zh_vocab: 40,
            en_vocab: 40,
            utt_len: (3, 7),
            cs_prob: 0.25,
            cs_span: (1, 2),
            zh_successor_prob: 0.3,
            en_matrix: false,
            frames_per_unit: (4, 7),
            d_feat: 16,
            noise_sigma: 0.3,
            seed: 20_240_901,
            prototype_seed: 7,
            train: LangCounts {
                zh: 667,
                en: 667,
                cs: 666,
            },
            test: LangCounts {
                zh: 100,
                en: 100,
                cs: 100,
            },
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !range_ok(self.utt_len) || !range_ok(self.cs_span) || !range_ok(self.frames_per_unit) {
            return Err(Error::Config("ranges must be non-empty and start at >= 1".into()));
        }
        if self.zh_vocab == 0 || self.zh_vocab > ZH_POOL.len() {
            return Err(Error::Config(format!("zh_vocab must be in 1..={}", ZH_POOL.len())));
        }
        if self.en_vocab == 0 || self.en_vocab > EN_POOL.len() {
            return Err(Error::Config(format!("en_vocab must be in 1..={}", EN_POOL.len())));
        }
        if !(0.0..=1.0).contains(&self.cs_prob) || !(0.0..=1.0).contains(&self.zh_successor_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || self.d_feat == 0 {
            return Err(Error::Config("noise_sigma must be >= 0 and d_feat >= 1".into()));
        }
        Ok(())
    }

    pub fn zh_units(&self) -> &[char] {
        &ZH_POOL[..self.zh_vocab]
    }

    pub fn en_units(&self) -> &[&'static str] {
        &EN_POOL[..self.en_vocab]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub lang: UttLang,
    pub text: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(self.test.iter())
    }
}

/// Number of distinct monolingual transcripts of lengths `lo..=hi` over `v`
/// symbols without immediate repeats, saturating.
fn capacity(v: usize, (lo, hi): (usize, usize)) -> usize {
    (lo..=hi)
        .map(|l| match l {
            0 => 1,
            _ => (v as u128).saturating_mul((v.saturating_sub(1) as u128).saturating_pow(l as u32 - 1)),
        })
        .fold(0u128, |a, b| a.saturating_add(b))
        .min(usize::MAX as u128) as usize
}

struct Sampler<'s> {
    spec: &'s SynthSpec,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn zh_run(&mut self, len: usize) -> Vec<char> {
        let pool = self.spec.zh_units();
        let mut out = Vec::with_capacity(len);
        let mut prev: Option<usize> = None;
        for _ in 0..len {
            let idx = match prev {
                Some(p) if self.rng.random_bool(self.spec.zh_successor_prob) => (p + 1) % pool.len(),
                _ => self.pick(pool.len(), prev),
            };
            out.push(pool[idx]);
            prev = Some(idx);
        }
        out
    }

    /// Uniform index in `0..n`, never equal to `prev` when `n > 1`.
    fn pick(&mut self, n: usize, prev: Option<usize>) -> usize {
        match prev {
            Some(p) if n > 1 => {
                let i = self.rng.random_range(0..n - 1);
                if i >= p {
                    i + 1
                } else {
                    i
                }
            }
            _ => self.rng.random_range(0..n),
        }
    }

    fn en_run(&mut self, len: usize) -> Vec<&'static str> {
        let pool = self.spec.en_units();
        let mut prev = None;
        (0..len)
            .map(|_| {
                let i = self.pick(pool.len(), prev);
                prev = Some(i);
                pool[i]
            })
            .collect()
    }

    fn len_in(&mut self, (lo, hi): (usize, usize)) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn transcript(&mut self, lang: UttLang) -> String {
        let len = self.len_in(self.spec.utt_len);
        match lang {
            UttLang::Zh => self.zh_run(len).into_iter().collect(),
            UttLang::En => self.en_run(len).join(" "),
            UttLang::Cs => self.code_switched(len),
        }
    }

    /// Matrix-language units with embedded spans inserted at slots
    /// `0..=len`. At least one span is forced when `cs_prob > 0`.
    fn code_switched(&mut self, len: usize) -> String {
        let mut slots: Vec<bool> = (0..=len).map(|_| self.rng.random_bool(self.spec.cs_prob)).collect();
        if self.spec.cs_prob > 0.0 && !slots.iter().any(|&s| s) {
            let k = self.rng.random_range(0..=len);
            slots[k] = true;
        }
        let mut s = String::new();
        if self.spec.en_matrix {
            let words = self.en_run(len);
            for (i, used) in slots.iter().enumerate() {
                if *used {
                    let n = self.len_in(self.spec.cs_span);
                    let run: String = self.zh_run(n).into_iter().collect();
                    let _ = write!(s, " {run} ");
                }
                if let Some(w) = words.get(i) {
                    let _ = write!(s, " {w}");
                }
            }
        } else {
            let chars = self.zh_run(len);
            for (i, used) in slots.iter().enumerate() {
                if *used {
                    let n = self.len_in(self.spec.cs_span);
                    let _ = write!(s, " {} ", self.en_run(n).join(" "));
                }
                if let Some(c) = chars.get(i) {
                    s.push(*c);
                }
            }
        }
        normalize(&s)
    }
}

/// Language tag implied by a transcript's units.
pub fn tag_of(text: &str) -> UttLang {
    let units = segment_units(text);
    let zh = units.count(UnitLang::Zh) > 0;
    let en = units.count(UnitLang::En) > 0;
    match (zh, en) {
        (true, true) => UttLang::Cs,
        (false, true) => UttLang::En,
        _ => UttLang::Zh,
    }
}

/// Generates train and test splits with globally unique transcripts.
pub fn gen_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    for (lang, v) in [(UttLang::Zh, spec.zh_vocab), (UttLang::En, spec.en_vocab)] {
        let want = match lang {
            UttLang::Zh => spec.train.zh + spec.test.zh,
            _ => spec.train.en + spec.test.en,
        };
        let cap = capacity(v, spec.utt_len);
        if want > cap {
            return Err(Error::Generation(format!(
                "{want} unique {lang} utterances requested, only {cap} exist"
            )));
        }
    }

    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
    };
    let mut seen = HashSet::new();
    let mut corpus = Corpus::default();
    for (split, counts) in [("train", spec.train), ("test", spec.test)] {
        let mut plan: Vec<UttLang> = Vec::with_capacity(counts.total());
        // Interleave languages so any prefix of a split is balanced.
        let (mut zh, mut en, mut cs) = (counts.zh, counts.en, counts.cs);
        while zh + en + cs > 0 {
            for (left, lang) in [(&mut zh, UttLang::Zh), (&mut en, UttLang::En), (&mut cs, UttLang::Cs)] {
                if *left > 0 {
                    *left -= 1;
                    plan.push(lang);
                }
            }
        }
        for (i, slot) in plan.into_iter().enumerate() {
            let mut attempts = 0;
            let text = loop {
                let t = sampler.transcript(slot);
                if seen.insert(t.clone()) {
                    break t;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Generation(format!(
                        "could not find a new {slot} transcript for {split} #{i}"
                    )));
                }
            };
            let seed = sampler.rng.random::<u64>();
            let utt = Utterance {
                id: format!("{split}-{i:05}"),
                lang: tag_of(&text),
                text,
                seed,
            };
            match split {
                "train" => corpus.train.push(utt),
                _ => corpus.test.push(utt),
            }
        }
    }
    Ok(corpus)
}

/// `n` text-only transcripts for language-model pretraining, cycling
/// through the three utterance kinds and skipping anything in `exclude`.
pub fn gen_texts(spec: &SynthSpec, n: usize, seed: u64, exclude: &HashSet<String>) -> Result<Vec<String>> {
    spec.validate()?;
    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let kinds = [UttLang::Zh, UttLang::En, UttLang::Cs];
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let t = sampler.transcript(kinds[out.len() % 3]);
        if exclude.contains(&t) {
            misses += 1;
            if misses > 10 * n + 10_000 {
                return Err(Error::Generation("pretraining texts are exhausted by the exclusion set".into()));
            }
            continue;
        }
        out.push(t);
    }
    Ok(out)
}

/// Source unit and language of one rendered frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameAlign {
    pub unit: usize,
    pub lang: UnitLang,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedUtterance {
    pub frames: FrameMatrix,
    pub alignment: Vec<FrameAlign>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Prototype feature vector of a unit; a pure function of its text.
pub fn prototype(unit_text: &str, spec: &SynthSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(unit_text.as_bytes()) ^ spec.prototype_seed);
    (0..spec.d_feat).map(|_| rng.sample(StandardNormal)).collect()
}

/// Renders frames for an utterance: each unit emits `k` noisy copies of its
/// prototype, `k` uniform in `frames_per_unit`.
pub fn render_frames(utt: &Utterance, spec: &SynthSpec) -> Result<RenderedUtterance> {
    let units = segment_units(&utt.text);
    if units.is_empty() {
        return Err(Error::EmptyInput(format!("utterance {} has no units", utt.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(utt.seed);
    let mut values = Vec::new();
    let mut alignment = Vec::new();
    for (ui, unit) in units.iter().enumerate() {
        let proto = prototype(&unit.text, spec);
        let k = rng.random_range(spec.frames_per_unit.0..=spec.frames_per_unit.1);
        for _ in 0..k {
            for &p in &proto {
                let noise: f64 = rng.sample(StandardNormal);
                values.push(p + spec.noise_sigma * noise);
            }
            alignment.push(FrameAlign {
                unit: ui,
                lang: unit.lang,
            });
        }
    }
    let frames = FrameMatrix::new(spec.d_feat, alignment.len(), values)?;
    Ok(RenderedUtterance { frames, alignment })
}

/// One JSON record per line: `{"id", "lang", "text", "seed"}`.
pub fn write_corpus_file(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut s = String::new();
    for u in utts {
        s.push_str(&serde_json::to_string(u).map_err(|e| Error::Parse(e.to_string()))?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_corpus_file(path: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Utterance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("corpus line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_spec_file(path: &Path, spec: &SynthSpec) -> Result<()> {
    let s = toml::to_string(spec).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_spec_file(path: &Path) -> Result<SynthSpec> {
    let s = std::fs::read_to_string(path)?;
    toml::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
