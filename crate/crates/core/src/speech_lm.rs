//! Decoder-only transformer LM with LoRA adapters on the query and value
//! projections, conditioned on connector output spliced in front of an
//! instruction prompt.
//!
//! Sequence layout: `[speech rows] ++ embed(instruction) ++ embed([BOS] ++ labels)`.
//! The position holding BOS predicts the first label and the last label
//! predicts EOS; only those positions carry loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{Connector, ConnectorConfig, FrameMatrix, RoutingMode};
use crate::error::{Error, Result};
use crate::lang::UttLang;
use crate::numerics::tensor::{dot, gelu, softmax_into};
use crate::numerics::{Graph, ParamGroup, Parameters, Tensor, Var};
use crate::tokenizer::{TokenId, BOS, EOS, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 400,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_seq_len: 160,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= PAD as usize || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("LM extents are too small".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 32.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub connector: ConnectorConfig,
    /// Instruction text placed between the speech rows and BOS.
    pub instruction: String,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.connector.validate()?;
        if self.lora.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Low-rank update `ΔW = (α/r)·B·A` with `A: r×d_in`, `B: d_out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    /// `B` starts at zero so the adapted layer equals the base layer.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, cfg: LoraConfig, rng: &mut R) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        Ok(Self {
            a: Tensor::randn(&[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, cfg.rank]),
            scale: cfg.alpha / cfg.rank as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` on the tape; rows of `x` are inputs.
pub fn lora_linear(g: &mut Graph<'_>, x: Var, w: Var, lora: Option<(Var, Var, f64)>) -> Result<Var> {
    let base = g.tape.matmul_nt(x, w)?;
    match lora {
        None => Ok(base),
        Some((a, b, s)) => {
            let xa = g.tape.matmul_nt(x, a)?;
            let delta = g.tape.matmul_nt(xa, b)?;
            let delta = g.tape.scale(delta, s)?;
            g.tape.add(base, delta)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseLm {
    pub config: LmConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
}

impl BaseLm {
    pub fn init<R: Rng + ?Sized>(cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let inv = 1.0 / (d as f64).sqrt();
        let resid = inv / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], inv, rng),
                wk: Tensor::randn(&[d, d], inv, rng),
                wv: Tensor::randn(&[d, d], inv, rng),
                wo: Tensor::randn(&[d, d], resid, rng),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                ff1_w: Tensor::randn(&[cfg.d_ff, d], inv, rng),
                ff1_b: Tensor::zeros(&[cfg.d_ff]),
                ff2_w: Tensor::randn(&[d, cfg.d_ff], resid * (d as f64 / cfg.d_ff as f64).sqrt(), rng),
                ff2_b: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            tok_emb: Tensor::randn(&[cfg.vocab_size, d], 1.0, rng),
            pos_emb: Tensor::randn(&[cfg.max_seq_len, d], 0.3, rng),
            blocks,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head: Tensor::randn(&[cfg.vocab_size, d], 0.02, rng),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLora {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub blocks: Vec<BlockLora>,
}

impl LoraSet {
    pub fn init<R: Rng + ?Sized>(lm: &LmConfig, cfg: LoraConfig, rng: &mut R) -> Result<Self> {
        let d = lm.d_model;
        let blocks = (0..lm.n_layers)
            .map(|_| {
                Ok(BlockLora {
                    q: LoraAdapter::new(d, d, cfg, rng)?,
                    v: LoraAdapter::new(d, d, cfg, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

/// Positions, targets and loss mask for one training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub n_prefix: usize,
    /// Token ids following the prefix rows: instruction, BOS, labels.
    pub token_ids: Vec<TokenId>,
    /// Next-token target at every position (PAD where unsupervised).
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.n_prefix + self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the layout for `n_prefix` spliced rows. Loss covers the BOS
/// position and every label position (the last one predicts EOS).
pub fn assemble_prompt(
    n_prefix: usize,
    instruction: &[TokenId],
    labels: &[TokenId],
    max_len: usize,
) -> Result<PromptLayout> {
    let mut token_ids = Vec::with_capacity(instruction.len() + 1 + labels.len());
    token_ids.extend_from_slice(instruction);
    token_ids.push(BOS);
    token_ids.extend_from_slice(labels);
    let len = n_prefix + token_ids.len();
    if len > max_len {
        return Err(Error::SequenceLength { len, max: max_len });
    }
    let bos_pos = n_prefix + instruction.len();
    let mut targets = vec![PAD; len];
    let mut mask = vec![false; len];
    for (k, &lab) in labels.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[bos_pos + k] = lab;
        mask[bos_pos + k] = true;
    }
    Ok(PromptLayout {
        n_prefix,
        token_ids,
        targets,
        mask,
    })
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// True when `max_len` tokens were produced without EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechLm {
    pub config: ModelConfig,
    pub instruction: Vec<TokenId>,
    pub connector: Connector,
    pub lm: BaseLm,
    pub lora: LoraSet,
}

impl SpeechLm {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, instruction: Vec<TokenId>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if let Some(&bad) = instruction.iter().find(|&&t| t as usize >= config.lm.vocab_size) {
            return Err(Error::Vocabulary(format!("instruction token {bad} is out of range")));
        }
        let lm = BaseLm::init(&config.lm, rng)?;
        let lora = LoraSet::init(&config.lm, config.lora, rng)?;
        let connector = Connector::init(&config.connector, config.lm.d_model, rng)?;
        Ok(Self {
            config: config.clone(),
            instruction,
            connector,
            lm,
            lora,
        })
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.lm.vocab_size) {
            Some(t) => Err(Error::Vocabulary(format!(
                "token {t} is outside the model vocabulary of {}",
                self.config.lm.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Token embedding rows for `ids`.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, ids: &[TokenId]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param(ParamGroup::Lm, &self.lm.tok_emb, || "lm.tok_emb".into());
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        g.tape.gather_rows(table, &idx)
    }

    /// Runs the transformer over `prefix ++ embed(ids)` and returns logits
    /// at `positions`. `use_lora` toggles the adapters.
    pub fn logits_at<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefix: Option<Var>,
        ids: &[TokenId],
        positions: &[usize],
        use_lora: bool,
    ) -> Result<Var> {
        let cfg = &self.config.lm;
        let d = cfg.d_model;
        let mut rows = Vec::new();
        if let Some(p) = prefix {
            if g.tape.value(p).cols() != d {
                return Err(Error::Dimension(format!(
                    "prefix width {} differs from d_model {d}",
                    g.tape.value(p).cols()
                )));
            }
            rows.push(p);
        }
        if !ids.is_empty() {
            rows.push(self.embed(g, ids)?);
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("empty LM input".into()));
        }
        let x = if rows.len() == 1 { rows[0] } else { g.tape.concat_rows(&rows)? };
        let t = g.tape.value(x).rows();
        if t > cfg.max_seq_len {
            return Err(Error::SequenceLength {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        let pos_table = g.param(ParamGroup::Lm, &self.lm.pos_emb, || "lm.pos_emb".into());
        let pos_idx: Vec<usize> = (0..t).collect();
        let pos = g.tape.gather_rows(pos_table, &pos_idx)?;
        let mut x = g.tape.add(x, pos)?;

        let dh = d / cfg.n_heads;
        let att_scale = 1.0 / (dh as f64).sqrt();
        for (i, (b, l)) in self.lm.blocks.iter().zip(&self.lora.blocks).enumerate() {
            let p = |n: &str| format!("lm.blocks.{i}.{n}");
            let ln1_g = g.param(ParamGroup::Lm, &b.ln1_g, || p("ln1_g"));
            let ln1_b = g.param(ParamGroup::Lm, &b.ln1_b, || p("ln1_b"));
            let wq = g.param(ParamGroup::Lm, &b.wq, || p("wq"));
            let wk = g.param(ParamGroup::Lm, &b.wk, || p("wk"));
            let wv = g.param(ParamGroup::Lm, &b.wv, || p("wv"));
            let wo = g.param(ParamGroup::Lm, &b.wo, || p("wo"));
            let (lq, lv) = if use_lora {
                let lp = |n: &str| format!("lora.blocks.{i}.{n}");
                let qa = g.param(ParamGroup::Lora, &l.q.a, || lp("q.a"));
                let qb = g.param(ParamGroup::Lora, &l.q.b, || lp("q.b"));
                let va = g.param(ParamGroup::Lora, &l.v.a, || lp("v.a"));
                let vb = g.param(ParamGroup::Lora, &l.v.b, || lp("v.b"));
                (Some((qa, qb, l.q.scale)), Some((va, vb, l.v.scale)))
            } else {
                (None, None)
            };

            let h = g.tape.layer_norm(x, ln1_g, ln1_b)?;
            let q = lora_linear(g, h, wq, lq)?;
            let k = g.tape.matmul_nt(h, wk)?;
            let v = lora_linear(g, h, wv, lv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = g.tape.slice_cols(q, hd * dh, dh)?;
                let kh = g.tape.slice_cols(k, hd * dh, dh)?;
                let vh = g.tape.slice_cols(v, hd * dh, dh)?;
                let s = g.tape.matmul_nt(qh, kh)?;
                let a = g.tape.causal_softmax(s, att_scale)?;
                heads.push(g.tape.matmul(a, vh)?);
            }
            let o = if heads.len() == 1 { heads[0] } else { g.tape.concat_cols(&heads)? };
            let o = g.tape.matmul_nt(o, wo)?;
            x = g.tape.add(x, o)?;

            let ln2_g = g.param(ParamGroup::Lm, &b.ln2_g, || p("ln2_g"));
            let ln2_b = g.param(ParamGroup::Lm, &b.ln2_b, || p("ln2_b"));
            let ff1_w = g.param(ParamGroup::Lm, &b.ff1_w, || p("ff1_w"));
            let ff1_b = g.param(ParamGroup::Lm, &b.ff1_b, || p("ff1_b"));
            let ff2_w = g.param(ParamGroup::Lm, &b.ff2_w, || p("ff2_w"));
            let ff2_b = g.param(ParamGroup::Lm, &b.ff2_b, || p("ff2_b"));
            let h = g.tape.layer_norm(x, ln2_g, ln2_b)?;
            let h = g.tape.matmul_nt(h, ff1_w)?;
            let h = g.tape.add_row(h, ff1_b)?;
            let h = g.tape.gelu(h)?;
            let h = g.tape.matmul_nt(h, ff2_w)?;
            let h = g.tape.add_row(h, ff2_b)?;
            x = g.tape.add(x, h)?;
        }
        let sel = g.tape.gather_rows(x, positions)?;
        let lnf_g = g.param(ParamGroup::Lm, &self.lm.lnf_g, || "lm.lnf_g".into());
        let lnf_b = g.param(ParamGroup::Lm, &self.lm.lnf_b, || "lm.lnf_b".into());
        let head = g.param(ParamGroup::Lm, &self.lm.head, || "lm.head".into());
        let h = g.tape.layer_norm(sel, lnf_g, lnf_b)?;
        g.tape.matmul_nt(h, head)
    }

    /// Mean cross-entropy over the supervised positions of a layout.
    pub fn layout_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        prefix: Option<Var>,
        layout: &PromptLayout,
        use_lora: bool,
    ) -> Result<Var> {
        let positions: Vec<usize> = (0..layout.len()).filter(|&i| layout.mask[i]).collect();
        if positions.is_empty() {
            return Err(Error::InvalidBatch("no supervised positions".into()));
        }
        let targets: Vec<usize> = positions.iter().map(|&i| layout.targets[i] as usize).collect();
        let logits = self.logits_at(g, prefix, &layout.token_ids, &positions, use_lora)?;
        g.tape.cross_entropy(logits, &targets, &vec![true; targets.len()])
    }

    /// Speech-conditioned training loss for one utterance.
    pub fn forward_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        frames: &FrameMatrix,
        lang: UttLang,
        mode: RoutingMode,
        labels: &[TokenId],
    ) -> Result<Var> {
        self.check_ids(labels)?;
        let out = self.connector.forward(g, frames, mode, lang)?;
        let n = g.tape.value(out.h).rows();
        let layout = assemble_prompt(n, &self.instruction, labels, self.config.lm.max_seq_len)?;
        self.layout_loss(g, Some(out.h), &layout, true)
    }

    /// Connector output rows computed without a tape.
    pub fn speech_rows(&self, frames: &FrameMatrix, mode: RoutingMode) -> Result<Tensor> {
        let mut g = Graph::new(Default::default());
        let out = self.connector.forward(&mut g, frames, mode, UttLang::Cs)?;
        Ok(g.tape.value(out.h).clone())
    }

    /// Greedy decoding with a key/value cache. `mode` must not need the
    /// utterance language, so language-specific training decodes with
    /// [`RoutingMode::Top1`].
    pub fn greedy_decode(&self, frames: &FrameMatrix, mode: RoutingMode, max_len: usize) -> Result<Decoded> {
        let rows = self.speech_rows(frames, mode)?;
        self.greedy_decode_rows(&rows, max_len)
    }

    pub fn greedy_decode_rows(&self, rows: &Tensor, max_len: usize) -> Result<Decoded> {
        if max_len == 0 {
            return Ok(Decoded {
                tokens: Vec::new(),
                truncated: true,
            });
        }
        let mut cache = KvCache::new(&self.config.lm);
        for i in 0..rows.rows() {
            cache.step(self, rows.row(i))?;
        }
        let mut logits = Vec::new();
        for &t in self.instruction.iter().chain(std::iter::once(&BOS)) {
            logits = cache.step(self, self.lm.tok_emb.row(t as usize))?;
        }
        let mut tokens = Vec::new();
        loop {
            let next = argmax(&logits) as TokenId;
            if next == EOS {
                return Ok(Decoded {
                    tokens,
                    truncated: false,
                });
            }
            tokens.push(next);
            if tokens.len() == max_len {
                return Ok(Decoded {
                    tokens,
                    truncated: true,
                });
            }
            logits = cache.step(self, self.lm.tok_emb.row(next as usize))?;
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gg, bb))| (v - mean) * is * gg + bb)
        .collect()
}

/// `W·x` for `W: out×in` stored row-major.
fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}

fn lora_matvec(w: &Tensor, l: &LoraAdapter, x: &[f64]) -> Vec<f64> {
    let mut y = matvec(w, x);
    let ax = matvec(&l.a, x);
    let bax = matvec(&l.b, &ax);
    for (yi, d) in y.iter_mut().zip(bax) {
        *yi += l.scale * d;
    }
    y
}

/// Incremental inference state for one sequence.
struct KvCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    pos: usize,
}

impl KvCache {
    fn new(cfg: &LmConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
        }
    }

    /// Feeds one input row and returns next-token logits.
    fn step(&mut self, m: &SpeechLm, input: &[f64]) -> Result<Vec<f64>> {
        let cfg = &m.config.lm;
        if self.pos >= cfg.max_seq_len {
            return Err(Error::SequenceLength {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f64> = input.iter().zip(m.lm.pos_emb.row(self.pos)).map(|(a, b)| a + b).collect();
        for (i, (b, l)) in m.lm.blocks.iter().zip(&m.lora.blocks).enumerate() {
            let h = layer_norm_row(&x, b.ln1_g.data(), b.ln1_b.data());
            let q = lora_matvec(&b.wq, &l.q, &h);
            self.keys[i].push(matvec(&b.wk, &h));
            self.values[i].push(lora_matvec(&b.wv, &l.v, &h));
            let mut att = vec![0.0; d];
            let t = self.keys[i].len();
            let mut scores = vec![0.0; t];
            let mut probs = vec![0.0; t];
            for hd in 0..cfg.n_heads {
                let r = hd * dh..(hd + 1) * dh;
                for (j, k) in self.keys[i].iter().enumerate() {
                    scores[j] = scale * dot(&q[r.clone()], &k[r.clone()]);
                }
                softmax_into(&scores, &mut probs);
                for (j, v) in self.values[i].iter().enumerate() {
                    for c in r.clone() {
                        att[c] += probs[j] * v[c];
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(matvec(&b.wo, &att)) {
                *xi += o;
            }
            let h = layer_norm_row(&x, b.ln2_g.data(), b.ln2_b.data());
            let mut f = matvec(&b.ff1_w, &h);
            for (fi, bi) in f.iter_mut().zip(b.ff1_b.data()) {
                *fi = gelu(*fi + bi);
            }
            let f = matvec(&b.ff2_w, &f);
            for ((xi, fi), bi) in x.iter_mut().zip(f).zip(b.ff2_b.data()) {
                *xi += fi + bi;
            }
        }
        self.pos += 1;
        let h = layer_norm_row(&x, m.lm.lnf_g.data(), m.lm.lnf_b.data());
        let logits = matvec(&m.lm.head, &h);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok(logits)
    }
}

impl Parameters for SpeechLm {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(String, &'s Tensor)) {
        self.connector.visit(f);
        let lm = &self.lm;
        f("lm.tok_emb".into(), &lm.tok_emb);
        f("lm.pos_emb".into(), &lm.pos_emb);
        for (i, b) in lm.blocks.iter().enumerate() {
            for (n, t) in block_fields(b) {
                f(format!("lm.blocks.{i}.{n}"), t);
            }
        }
        f("lm.lnf_g".into(), &lm.lnf_g);
        f("lm.lnf_b".into(), &lm.lnf_b);
        f("lm.head".into(), &lm.head);
        for (i, l) in self.lora.blocks.iter().enumerate() {
            f(format!("lora.blocks.{i}.q.a"), &l.q.a);
            f(format!("lora.blocks.{i}.q.b"), &l.q.b);
            f(format!("lora.blocks.{i}.v.a"), &l.v.a);
            f(format!("lora.blocks.{i}.v.b"), &l.v.b);
        }
    }

    fn visit_mut<'s>(&'s mut self, f: &mut dyn FnMut(String, &'s mut Tensor)) {
        self.connector.visit_mut(f);
        let lm = &mut self.lm;
        f("lm.tok_emb".into(), &mut lm.tok_emb);
        f("lm.pos_emb".into(), &mut lm.pos_emb);
        for (i, b) in lm.blocks.iter_mut().enumerate() {
            for (n, t) in block_fields_mut(b) {
                f(format!("lm.blocks.{i}.{n}"), t);
            }
        }
        f("lm.lnf_g".into(), &mut lm.lnf_g);
        f("lm.lnf_b".into(), &mut lm.lnf_b);
        f("lm.head".into(), &mut lm.head);
        for (i, l) in self.lora.blocks.iter_mut().enumerate() {
            f(format!("lora.blocks.{i}.q.a"), &mut l.q.a);
            f(format!("lora.blocks.{i}.q.b"), &mut l.q.b);
            f(format!("lora.blocks.{i}.v.a"), &mut l.v.a);
            f(format!("lora.blocks.{i}.v.b"), &mut l.v.b);
        }
    }
}

fn block_fields(b: &Block) -> [(&'static str, &Tensor); 12] {
    [
        ("ln1_g", &b.ln1_g),
        ("ln1_b", &b.ln1_b),
        ("wq", &b.wq),
        ("wk", &b.wk),
        ("wv", &b.wv),
        ("wo", &b.wo),
        ("ln2_g", &b.ln2_g),
        ("ln2_b", &b.ln2_b),
        ("ff1_w", &b.ff1_w),
        ("ff1_b", &b.ff1_b),
        ("ff2_w", &b.ff2_w),
        ("ff2_b", &b.ff2_b),
    ]
}

fn block_fields_mut(b: &mut Block) -> [(&'static str, &mut Tensor); 12] {
    [
        ("ln1_g", &mut b.ln1_g),
        ("ln1_b", &mut b.ln1_b),
        ("wq", &mut b.wq),
        ("wk", &mut b.wk),
        ("wv", &mut b.wv),
        ("wo", &mut b.wo),
        ("ln2_g", &mut b.ln2_g),
        ("ln2_b", &mut b.ln2_b),
        ("ff1_w", &mut b.ff1_w),
        ("ff1_b", &mut b.ff1_b),
        ("ff2_w", &mut b.ff2_w),
        ("ff2_b", &mut b.ff2_b),
    ]
}
