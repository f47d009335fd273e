//! `csasr` command-line interface.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (reported as a single
//! `error kind=<kind>: <message>` line on stderr), 2 on usage errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::connector::{top1, ConnectorKind, RoutingMode};
use crate::error::{Error, Result};
use crate::evaluation::{parse_tsv, score, Transcript};
use crate::lang::UttLang;
use crate::numerics::Checkpoint;
use crate::speech_lm::SpeechLm;
use crate::synthdata::{
    gen_corpus, read_corpus_file, read_spec_file, write_corpus_file, write_spec_file, SynthSpec, Utterance,
};
use crate::tokenizer::{encode_interrupted, normalize, segment_units, Vocab, INTERRUPT};
use crate::training::{
    build_examples, copy_params, model_checkpoint, model_from_checkpoint, pretrain_base, pretrain_corpus, run_pipeline, transcribe,
    StepLog, Strategy,
};

#[derive(Parser, Debug)]
#[command(name = "csasr", version, about = "Toy code-switching speech recognition pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConnectorArg {
    Moe,
    Linear,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus and train its BPE vocabulary.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the base LM, then run both training stages.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preset A-F or four flags `s1_idit s1_lse s2_idit s2_lse`, e.g. 0110.
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        connector: Option<ConnectorArg>,
        /// Reuse the base LM of an earlier run instead of pretraining.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
    },
    /// Decode a corpus split with a trained model, one `id<TAB>text` line each.
    Decode {
        /// Training output directory or checkpoint file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Score hypotheses against references.
    Score {
        /// Corpus JSON-lines file or `id<TAB>text` file.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Show the tokens of a transcript.
    Tokenize {
        text: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        idit: bool,
    },
    /// Dump per-frame router probabilities and selections for one utterance.
    InspectRouter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={}: {msg}", e.kind());
            1
        }
    }
}

fn with_path(p: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

fn read_text(p: impl AsRef<Path>) -> Result<String> {
    let p = p.as_ref();
    std::fs::read_to_string(p).map_err(|e| with_path(p, e))
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    std::fs::metadata(p).map_err(|e| with_path(p, e))?;
    Checkpoint::load(p)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

struct DataDir {
    spec: SynthSpec,
    train: Vec<Utterance>,
    test: Vec<Utterance>,
    vocab: Vocab,
}

fn load_data(dir: &Path) -> Result<DataDir> {
    let vocab = Vocab::from_text(&read_text(dir.join("vocab.txt"))?)?;
    Ok(DataDir {
        spec: read_spec_file(&dir.join("synth_spec.toml"))?,
        train: read_corpus_file(&dir.join("train.jsonl"))?,
        test: read_corpus_file(&dir.join("test.jsonl"))?,
        vocab,
    })
}

/// Resolves a model path: a checkpoint file, or a training directory
/// holding `stage2.ckpt` and `vocab.txt`.
fn load_model(path: &Path) -> Result<(SpeechLm, Option<Strategy>, Option<Vocab>)> {
    let (ckpt, vocab_path) = if path.is_dir() {
        (path.join("stage2.ckpt"), Some(path.join("vocab.txt")))
    } else {
        (path.to_path_buf(), path.parent().map(|p| p.join("vocab.txt")))
    };
    let c = load_checkpoint(&ckpt)?;
    let model = model_from_checkpoint(&c)?;
    let strategy = c.meta.get("strategy").map(|s| s.parse()).transpose()?;
    let vocab = match vocab_path {
        Some(p) if p.exists() => Some(Vocab::from_text(&read_text(p)?)?),
        _ => None,
    };
    Ok((model, strategy, vocab))
}

fn inference_mode(model: &SpeechLm, strategy: Option<Strategy>) -> RoutingMode {
    match model.config.connector.kind {
        ConnectorKind::Linear => RoutingMode::Dense,
        ConnectorKind::Moe => strategy.map(|s| s.inference_mode()).unwrap_or(RoutingMode::Dense),
    }
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut s = String::new();
    for l in log {
        s.push_str(&serde_json::to_string(l).map_err(|e| Error::Parse(e.to_string()))?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn run(cmd: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match cmd {
        Command::GenData { out: dir, config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.validate()?;
            let corpus = gen_corpus(&cfg.synth)?;
            let vocab = cfg.train_vocab(corpus.train.iter().map(|u| u.text.as_str()))?;
            std::fs::create_dir_all(&dir)?;
            write_corpus_file(&dir.join("train.jsonl"), &corpus.train)?;
            write_corpus_file(&dir.join("test.jsonl"), &corpus.test)?;
            write_spec_file(&dir.join("synth_spec.toml"), &cfg.synth)?;
            std::fs::write(dir.join("vocab.txt"), vocab.to_text())?;
            std::fs::write(dir.join("run_config.toml"), cfg.to_toml()?)?;
            writeln!(
                out,
                "wrote {} train and {} test utterances, vocab {} to {}",
                corpus.train.len(),
                corpus.test.len(),
                vocab.len(),
                dir.display()
            )?;
        }
        Command::Train {
            data,
            out: dir,
            strategy,
            config,
            seed,
            connector,
            base,
            pretrain_steps,
            stage1_steps,
            stage2_steps,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let d = load_data(&data)?;
            cfg.synth = d.spec.clone();
            cfg.vocab_size = d.vocab.len();
            if let Some(s) = strategy {
                cfg.strategy = s.flag_string();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(c) = connector {
                cfg.model.connector.kind = match c {
                    ConnectorArg::Moe => ConnectorKind::Moe,
                    ConnectorArg::Linear => ConnectorKind::Linear,
                };
            }
            for (v, slot) in [
                (pretrain_steps, &mut cfg.train.pretrain.steps),
                (stage1_steps, &mut cfg.train.stage1.steps),
                (stage2_steps, &mut cfg.train.stage2.steps),
            ] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            cfg.validate()?;
            let strategy = cfg.strategy()?;
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
            std::fs::write(dir.join("vocab.txt"), d.vocab.to_text())?;

            let train = build_examples(&d.train, &d.spec, &d.vocab)?;
            let model_cfg = cfg.model_config(&d.vocab);
            let instruction = d.vocab.encode_plain(&model_cfg.instruction).into_inner();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = SpeechLm::init(&model_cfg, instruction, &mut rng)?;
            let mut log = Vec::new();
            match base {
                Some(p) => {
                    let src = model_from_checkpoint(&load_checkpoint(&p)?)?;
                    copy_params(&mut model, &src, "lm.")?;
                }
                None => {
                    let texts = pretrain_corpus(&d.spec, &d.train, &d.test, &d.vocab, &cfg.train, cfg.seed)?;
                    pretrain_base(&mut model, &texts, &cfg.train, cfg.seed, &mut log)?;
                    model_checkpoint(&model, None, cfg.train.pretrain.steps as u64)?.save(&dir.join("pretrain.ckpt"))?;
                }
            }
            let res = run_pipeline(model, strategy, &cfg.train, &train, cfg.seed, Some(&dir))?;
            log.extend(res.log);
            write_log(&dir.join("train_log.jsonl"), &log)?;
            let last = log.last().map(|l| l.loss).unwrap_or(f64::NAN);
            writeln!(
                out,
                "trained strategy {} ({}) seed {}: {} steps, final loss {last:.4}, checkpoints in {}",
                strategy.name(),
                strategy.flag_string(),
                cfg.seed,
                log.len(),
                dir.display()
            )?;
        }
        Command::Decode {
            model,
            data,
            split,
            out: path,
            max_len,
        } => {
            let d = load_data(&data)?;
            let (m, strategy, vocab) = load_model(&model)?;
            let vocab = vocab.unwrap_or(d.vocab);
            let mode = inference_mode(&m, strategy);
            let utts = match split {
                Split::Train => &d.train,
                Split::Test => &d.test,
            };
            let examples = build_examples(utts, &d.spec, &vocab)?;
            let mut s = String::new();
            for ex in &examples {
                let text = transcribe(&m, &vocab, &ex.frames, mode, max_len)?;
                let _ = writeln!(s, "{}\t{}", ex.id, text);
            }
            match path {
                Some(p) => std::fs::write(p, s)?,
                None => out.write_all(s.as_bytes())?,
            }
        }
        Command::Score { reference, hyp, json } => {
            let ref_text = read_text(&reference)?;
            let (refs, langs) = if ref_text.trim_start().starts_with('{') {
                let utts = crate::synthdata::parse_corpus(&ref_text)?;
                let langs: BTreeMap<String, UttLang> = utts.iter().map(|u| (u.id.clone(), u.lang)).collect();
                let refs = utts
                    .into_iter()
                    .map(|u| Transcript { id: u.id, text: u.text })
                    .collect();
                (refs, Some(langs))
            } else {
                (parse_tsv(&ref_text)?, None)
            };
            let hyps = parse_tsv(&read_text(&hyp)?)?;
            let summary = score(&refs, &hyps, langs.as_ref())?;
            for (lang, r) in &summary.by_lang {
                writeln!(out, "[{lang}] {}", r.summary_line())?;
            }
            writeln!(out, "{}", summary.overall)?;
            if let Some(p) = json {
                let s = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
                std::fs::write(p, s)?;
            }
        }
        Command::Tokenize { text, vocab, idit } => {
            let vocab = match vocab {
                Some(p) => Vocab::from_text(&read_text(p)?)?,
                None => {
                    let cfg = RunConfig::default();
                    let corpus = gen_corpus(&cfg.synth)?;
                    cfg.train_vocab(corpus.train.iter().map(|u| u.text.as_str()))?
                }
            };
            let text = normalize(&text);
            let piece = |id| -> Result<String> {
                let b = vocab.piece(id)?;
                Ok(match std::str::from_utf8(b) {
                    Ok(s) => format!("{s:?}"),
                    Err(_) => b.iter().map(|x| format!("<{x:02x}>")).collect(),
                })
            };
            if idit {
                let units = segment_units(&text);
                let seq = encode_interrupted(&text, &vocab);
                let mut unit = 0;
                let mut pieces = Vec::new();
                for &id in seq.iter() {
                    if id == INTERRUPT {
                        writeln!(out, "{}\t{}", units.units[unit].text, pieces.join(" "))?;
                        pieces.clear();
                        unit += 1;
                    } else {
                        pieces.push(format!("{id}:{}", piece(id)?));
                    }
                }
            } else {
                for &id in vocab.encode_plain(&text).iter() {
                    writeln!(out, "{id}\t{}", piece(id)?)?;
                }
            }
        }
        Command::InspectRouter { model, data, id } => {
            let d = load_data(&data)?;
            let (m, _, vocab) = load_model(&model)?;
            let vocab = vocab.unwrap_or(d.vocab);
            let utt = d
                .train
                .iter()
                .chain(&d.test)
                .find(|u| u.id == id)
                .ok_or_else(|| Error::Config(format!("no utterance with id {id}")))?;
            let ex = build_examples(std::slice::from_ref(utt), &d.spec, &vocab)?.remove(0);
            let probs = m.connector.frame_probs(&ex.frames)?;
            let mut header = String::from("frame");
            for j in 0..m.connector.experts.len() {
                let _ = write!(header, "\tp{j}");
            }
            writeln!(out, "{header}\tselected")?;
            for (i, p) in probs.iter().enumerate() {
                let cols: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(out, "{i}\t{}\t{}", cols.join("\t"), top1(p))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_strategy_is_a_usage_error() {
        let code = main_with_args(["csasr", "train", "--data", "d", "--out", "o", "--strategy", "Z"]);
        assert_eq!(code, 2);
        assert_eq!(main_with_args(["csasr", "frobnicate"]), 2);
    }

    #[test]
    fn runtime_failures_exit_one() {
        let code = main_with_args(["csasr", "score", "--ref", "/nonexistent/ref", "--hyp", "/nonexistent/hyp"]);
        assert_eq!(code, 1);
    }
}
