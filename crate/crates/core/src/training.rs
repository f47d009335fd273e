//! Two-stage progressive training.
//!
//! Stage 1 trains the connector alone, stage 2 trains the connector and the
//! LoRA adapters. Each stage independently chooses its label encoding
//! (plain or IDIT) and its routing (dense or language-specific). Before
//! either stage the base LM is pretrained on text alone and then frozen.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{ConnectorKind, FrameMatrix, RoutingMode};
use crate::error::{Error, Result};
use crate::evaluation::{score, ScoreSummary, Transcript};
use crate::lang::UttLang;
use crate::numerics::{adamw_step, AdamWState, Checkpoint, Graph, OptimizerConfig, Parameters, Tensor, Trainable};
use crate::speech_lm::{assemble_prompt, ModelConfig, SpeechLm};
use crate::synthdata::{gen_texts, render_frames, SynthSpec, Utterance};
use crate::tokenizer::{encode_idit, normalize, TokenId, Vocab};

/// Label encoding and routing for one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFlags {
    pub idit: bool,
    pub lse: bool,
}

/// Flag pair for both stages. Presets `A`..`F` cover the named cells of
/// the 16-cell grid; any other combination is a custom strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub stage1: StageFlags,
    pub stage2: StageFlags,
}

impl Strategy {
    pub const PRESETS: [(char, Strategy); 6] = [
        ('A', Strategy::from_flags(false, false, false, false)),
        ('B', Strategy::from_flags(true, false, true, false)),
        ('C', Strategy::from_flags(false, true, false, true)),
        ('D', Strategy::from_flags(false, true, false, false)),
        ('E', Strategy::from_flags(false, false, true, false)),
        ('F', Strategy::from_flags(false, true, true, false)),
    ];

    /// `(stage-1 idit, stage-1 lse, stage-2 idit, stage-2 lse)`
    pub const fn from_flags(s1_idit: bool, s1_lse: bool, s2_idit: bool, s2_lse: bool) -> Self {
        Self {
            stage1: StageFlags {
                idit: s1_idit,
                lse: s1_lse,
            },
            stage2: StageFlags {
                idit: s2_idit,
                lse: s2_lse,
            },
        }
    }

    pub fn preset(name: char) -> Result<Self> {
        Self::PRESETS
            .iter()
            .find(|(n, _)| *n == name.to_ascii_uppercase())
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {name:?}; expected one of A-F")))
    }

    pub fn name(&self) -> String {
        Self::PRESETS
            .iter()
            .find(|(_, s)| s == self)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| self.flag_string())
    }

    /// Four characters, `1`/`0`, in `from_flags` order.
    pub fn flag_string(&self) -> String {
        [self.stage1.idit, self.stage1.lse, self.stage2.idit, self.stage2.lse]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    /// Routing used at inference: top-1 after language-specific stage-2
    /// training (the language is unknown at test time), dense otherwise.
    pub fn inference_mode(&self) -> RoutingMode {
        if self.stage2.lse {
            RoutingMode::Top1
        } else {
            RoutingMode::Dense
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// A preset letter or a four-digit flag string such as `0110`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() == 1 {
            return Self::preset(s.chars().next().expect("one char"));
        }
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(()),
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("invalid strategy {s:?}")))?;
        match bits[..] {
            [a, b, c, d] => Ok(Self::from_flags(a, b, c, d)),
            _ => Err(Error::Config(format!("invalid strategy {s:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Step budget and optimizer for one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain: PhaseConfig,
    pub stage1: PhaseConfig,
    pub stage2: PhaseConfig,
    /// Inclusive range of frames each text token spans in the pretraining
    /// prefix.
    pub prefix_frames: (usize, usize),
    /// Each pretraining prefix row averages the token embeddings of this
    /// many consecutive frames.
    pub prefix_window: usize,
    /// Generated text-only transcripts added to the training transcripts
    /// for pretraining.
    pub pretrain_texts: usize,
    /// Decoding limit in tokens.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: PhaseConfig::default(),
            stage1: PhaseConfig::default(),
            stage2: PhaseConfig::default(),
            prefix_frames: (1, 1),
            prefix_window: 1,
            pretrain_texts: 0,
            max_decode_len: 64,
        }
    }
}

/// Everything one stage needs besides the model and data.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub flags: StageFlags,
    pub trainable: Trainable,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

impl StageConfig {
    pub fn stage1(flags: StageFlags, phase: &PhaseConfig) -> Self {
        Self {
            name: "stage1".into(),
            flags,
            trainable: Trainable {
                connector: true,
                lora: false,
                lm: false,
            },
            steps: phase.steps,
            optimizer: phase.optimizer.clone(),
        }
    }

    pub fn stage2(flags: StageFlags, phase: &PhaseConfig) -> Self {
        Self {
            name: "stage2".into(),
            flags,
            trainable: Trainable {
                connector: true,
                lora: true,
                lm: false,
            },
            steps: phase.steps,
            optimizer: phase.optimizer.clone(),
        }
    }

    pub fn routing(&self) -> RoutingMode {
        if self.flags.lse {
            RoutingMode::Lse
        } else {
            RoutingMode::Dense
        }
    }
}

/// A training or test utterance with rendered frames and both label forms.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub lang: UttLang,
    pub text: String,
    pub frames: FrameMatrix,
    pub plain: Vec<TokenId>,
    pub idit: Vec<TokenId>,
}

impl Example {
    pub fn labels(&self, idit: bool) -> &[TokenId] {
        if idit {
            &self.idit
        } else {
            &self.plain
        }
    }
}

pub fn build_examples(utts: &[Utterance], spec: &SynthSpec, vocab: &Vocab) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            let r = render_frames(u, spec)?;
            Ok(Example {
                id: u.id.clone(),
                lang: u.lang,
                text: u.text.clone(),
                frames: r.frames,
                plain: vocab.encode_plain(&u.text).into_inner(),
                idit: encode_idit(&u.text, vocab).into_inner(),
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Deterministic epoch-wise shuffling.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.refill();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn stage_seed(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| h.rotate_left(7) ^ (b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Accumulates gradients of a mean loss over `n` micro-batches.
fn accumulate(total: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, weight: f64) {
    for (k, g) in grads {
        let entry = total.entry(k).or_insert_with(|| Tensor::zeros(g.shape()));
        for (a, b) in entry.data_mut().iter_mut().zip(g.data()) {
            *a += weight * b;
        }
    }
}

fn diverged(stage: &str, step: usize, reason: String, last_good: Option<&Path>) -> Error {
    Error::Diverged {
        stage: stage.to_string(),
        step,
        reason,
        last_good: last_good.map(Path::to_path_buf),
    }
}

/// Applies one optimizer step from a closure producing a batch loss.
#[allow(clippy::too_many_arguments)]
fn train_steps<F>(
    model: &mut SpeechLm,
    stage: &str,
    steps: usize,
    opt: &OptimizerConfig,
    trainable: Trainable,
    state: &mut AdamWState,
    n_examples: usize,
    seed: u64,
    last_good: Option<&Path>,
    log: &mut Vec<StepLog>,
    mut loss_fn: F,
) -> Result<()>
where
    F: for<'a> FnMut(&'a SpeechLm, &mut Graph<'a>, usize) -> Result<crate::numerics::Var>,
{
    opt.validate()?;
    if n_examples == 0 && steps > 0 {
        return Err(Error::InvalidBatch(format!("{stage}: no training examples")));
    }
    let mut sampler = Sampler::new(n_examples, stage_seed(seed, stage));
    for step in 1..=steps {
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..opt.grad_accum {
            let batch: Vec<usize> = (0..opt.batch_size).map(|_| sampler.next()).collect();
            let mut g = Graph::new(trainable);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in &batch {
                let l = loss_fn(model, &mut g, i).map_err(|e| match e {
                    Error::NonFinite(r) => diverged(stage, step, r, last_good),
                    other => other,
                })?;
                losses.push(l);
            }
            let mean = g.tape.mean(&losses)?;
            let value = g.tape.value(mean).item();
            if !value.is_finite() {
                return Err(diverged(stage, step, format!("loss {value}"), last_good));
            }
            loss_sum += value;
            accumulate(&mut grads, g.gradients(mean)?, 1.0 / opt.grad_accum as f64);
        }
        let mut params = model.named_mut();
        adamw_step(&mut params, &grads, state, opt, step).map_err(|e| match e {
            Error::NonFinite(r) => diverged(stage, step, r, last_good),
            other => other,
        })?;
        log.push(StepLog {
            stage: stage.to_string(),
            step,
            loss: loss_sum / opt.grad_accum as f64,
            lr: opt.lr_at(step),
        });
    }
    Ok(())
}

/// Runs one connector/LoRA stage.
pub fn run_stage(
    model: &mut SpeechLm,
    cfg: &StageConfig,
    data: &[Example],
    state: &mut AdamWState,
    seed: u64,
    last_good: Option<&Path>,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    if cfg.trainable.lm {
        return Err(Error::Config("the base LM is frozen in every stage".into()));
    }
    let mode = cfg.routing();
    let idit = cfg.flags.idit;
    train_steps(
        model,
        &cfg.name,
        cfg.steps,
        &cfg.optimizer,
        cfg.trainable,
        state,
        data.len(),
        seed,
        last_good,
        log,
        |m, g, i| {
            let ex = &data[i];
            m.forward_loss(g, &ex.frames, ex.lang, mode, ex.labels(idit))
        },
    )
}

/// Text-only pretraining of the base LM.
///
/// Each sequence is `prefix ++ instruction ++ [BOS] ++ text ++ [EOS]`
/// with the loss on the copy only. The prefix is laid out like connector
/// output: every token of `text` spans a random number of frames in
/// [`TrainConfig::prefix_frames`], and each row is the mean token embedding
/// over a window of [`TrainConfig::prefix_window`] frames. With both set
/// to one the prefix is the embedded text itself.
pub fn pretrain_base(
    model: &mut SpeechLm,
    texts: &[Vec<TokenId>],
    train: &TrainConfig,
    seed: u64,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    let (lo, hi) = train.prefix_frames;
    if lo == 0 || lo > hi || train.prefix_window == 0 {
        return Err(Error::Config(format!(
            "invalid pretraining prefix layout: frames {lo}..={hi}, window {}",
            train.prefix_window
        )));
    }
    let trainable = Trainable {
        connector: false,
        lora: false,
        lm: true,
    };
    let mut state = AdamWState::new();
    let max = model.config.lm.max_seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "prefix"));
    let phase = &train.pretrain;
    train_steps(
        model,
        "pretrain",
        phase.steps,
        &phase.optimizer,
        trainable,
        &mut state,
        texts.len(),
        seed,
        None,
        log,
        |m, g, i| {
            let text = &texts[i];
            let mut owner = Vec::new();
            for k in 0..text.len() {
                owner.extend(std::iter::repeat_n(k, rng.random_range(lo..=hi)));
            }
            let rows: Vec<&[usize]> = owner.chunks(train.prefix_window).collect();
            let mut weights = vec![0.0; rows.len() * text.len()];
            for (r, frames) in rows.iter().enumerate() {
                for &k in *frames {
                    weights[r * text.len() + k] += 1.0 / frames.len() as f64;
                }
            }
            let layout = assemble_prompt(rows.len(), &m.instruction, text, max)?;
            let emb = m.embed(g, text)?;
            let w = g.tape.constant(Tensor::matrix(rows.len(), text.len(), weights)?);
            let prefix = g.tape.matmul(w, emb)?;
            m.layout_loss(g, Some(prefix), &layout, false)
        },
    )
}

/// Plain token sequences for pretraining: the training transcripts plus
/// `train.pretrain_texts` generated ones that avoid every test transcript.
pub fn pretrain_corpus(
    spec: &SynthSpec,
    train_utts: &[Utterance],
    test_utts: &[Utterance],
    vocab: &Vocab,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    let exclude: HashSet<String> = test_utts.iter().map(|u| u.text.clone()).collect();
    let extra = gen_texts(spec, train.pretrain_texts, stage_seed(seed, "texts"), &exclude)?;
    Ok(train_utts
        .iter()
        .map(|u| u.text.as_str())
        .chain(extra.iter().map(String::as_str))
        .map(|t| vocab.encode_plain(t).into_inner())
        .collect())
}

/// Copies every parameter of `src` whose name starts with `prefix`.
pub fn copy_params(dst: &mut SpeechLm, src: &SpeechLm, prefix: &str) -> Result<()> {
    let source: BTreeMap<String, &Tensor> = src.named().into_iter().collect();
    for (name, t) in dst.named_mut() {
        if name.starts_with(prefix) {
            let s = source
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("source lacks {name}")))?;
            if s.shape() != t.shape() {
                return Err(Error::Dimension(format!("{name}: shape mismatch")));
            }
            *t = (*s).clone();
        }
    }
    Ok(())
}

/// Serialises model weights, optimizer state and config.
pub fn model_checkpoint(model: &SpeechLm, state: Option<&AdamWState>, step: u64) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(step);
    c.meta.insert(
        "model_config".into(),
        serde_json::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    c.meta.insert(
        "instruction".into(),
        serde_json::to_string(&model.instruction).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    for (n, t) in model.named() {
        c.tensors.insert(n, t.clone());
    }
    if let Some(s) = state {
        c.insert_optimizer(s);
    }
    Ok(c)
}

/// Rebuilds a model from a checkpoint written by [`model_checkpoint`].
pub fn model_from_checkpoint(c: &Checkpoint) -> Result<SpeechLm> {
    let get = |k: &str| {
        c.meta
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {k}")))
    };
    let config: ModelConfig =
        serde_json::from_str(get("model_config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let instruction: Vec<TokenId> =
        serde_json::from_str(get("instruction")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SpeechLm::init(&config, instruction, &mut rng)?;
    let params: BTreeMap<&String, &Tensor> = c.parameters().collect();
    for (name, t) in model.named_mut() {
        let s = params
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
        if s.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} != {:?}", s.shape(), t.shape())));
        }
        *t = (*s).clone();
    }
    Ok(model)
}

/// Outputs of a two-stage run.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub model: SpeechLm,
    pub log: Vec<StepLog>,
    pub state: AdamWState,
    pub checkpoints: Vec<PathBuf>,
}

/// Stage 1 then stage 2 on a model whose base LM is already pretrained.
/// Connector moments carry over between stages; LoRA moments start fresh.
pub fn run_pipeline(
    mut model: SpeechLm,
    strategy: Strategy,
    train: &TrainConfig,
    data: &[Example],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PipelineResult> {
    let mut log = Vec::new();
    let mut state = AdamWState::new();
    let mut checkpoints = Vec::new();
    let s1 = StageConfig::stage1(strategy.stage1, &train.stage1);
    run_stage(&mut model, &s1, data, &mut state, seed, None, &mut log)?;
    if let Some(dir) = out_dir {
        let p = dir.join("stage1.ckpt");
        let mut c = model_checkpoint(&model, Some(&state), s1.steps as u64)?;
        c.meta.insert("strategy".into(), strategy.flag_string());
        c.save(&p)?;
        checkpoints.push(p);
    }
    let last_good = checkpoints.last().cloned();
    run_stage2(&mut model, strategy, train, data, &mut state, seed, last_good.as_deref(), &mut log)?;
    if let Some(dir) = out_dir {
        let p = dir.join("stage2.ckpt");
        let mut c = model_checkpoint(&model, Some(&state), train.stage2.steps as u64)?;
        c.meta.insert("strategy".into(), strategy.flag_string());
        c.save(&p)?;
        checkpoints.push(p);
    }
    Ok(PipelineResult {
        model,
        log,
        state,
        checkpoints,
    })
}

/// Stage 2 alone, e.g. after reloading a stage-1 checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    model: &mut SpeechLm,
    strategy: Strategy,
    train: &TrainConfig,
    data: &[Example],
    state: &mut AdamWState,
    seed: u64,
    last_good: Option<&Path>,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    state.reset_prefix("lora.");
    let s2 = StageConfig::stage2(strategy.stage2, &train.stage2);
    run_stage(model, &s2, data, state, seed, last_good, log)
}

/// Greedy transcription of one utterance.
pub fn transcribe(model: &SpeechLm, vocab: &Vocab, frames: &FrameMatrix, mode: RoutingMode, max_len: usize) -> Result<String> {
    let d = model.greedy_decode(frames, mode, max_len)?;
    Ok(normalize(&vocab.decode(&d.tokens)?))
}

/// Decodes `data` and scores it against the reference transcripts.
pub fn evaluate(
    model: &SpeechLm,
    vocab: &Vocab,
    data: &[Example],
    mode: RoutingMode,
    max_len: usize,
) -> Result<(Vec<Transcript>, ScoreSummary)> {
    let mode = match model.config.connector.kind {
        ConnectorKind::Linear => RoutingMode::Dense,
        ConnectorKind::Moe => mode,
    };
    let mut hyps = Vec::with_capacity(data.len());
    let mut refs = Vec::with_capacity(data.len());
    let mut langs = BTreeMap::new();
    for ex in data {
        hyps.push(Transcript {
            id: ex.id.clone(),
            text: transcribe(model, vocab, &ex.frames, mode, max_len)?,
        });
        refs.push(Transcript {
            id: ex.id.clone(),
            text: ex.text.clone(),
        });
        langs.insert(ex.id.clone(), ex.lang);
    }
    let summary = score(&refs, &hyps, Some(&langs))?;
    Ok((hyps, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_grid() {
        let f = Strategy::preset('F').unwrap();
        assert_eq!(f, Strategy::from_flags(false, true, true, false));
        assert_eq!(Strategy::preset('a').unwrap(), Strategy::from_flags(false, false, false, false));
        assert!(Strategy::preset('Z').is_err());
        assert_eq!("0110".parse::<Strategy>().unwrap(), f);
        assert_eq!(f.name(), "F");
        let custom = "1111".parse::<Strategy>().unwrap();
        assert_eq!(custom.name(), "1111");
        assert!("012".parse::<Strategy>().is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_covers_epochs() {
        let mut a = Sampler::new(5, 3);
        let mut b = Sampler::new(5, 3);
        let xs: Vec<usize> = (0..10).map(|_| a.next()).collect();
        let ys: Vec<usize> = (0..10).map(|_| b.next()).collect();
        assert_eq!(xs, ys);
        let mut first: Vec<usize> = xs[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }
}
