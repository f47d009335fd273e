//! Python bindings for the code-switching ASR toolkit.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use csasr_core::config::RunConfig;
use csasr_core::connector::{ConnectorKind, FrameMatrix, RoutingMode};
use csasr_core::evaluation::{self, ErrorCounts, Transcript};
use csasr_core::numerics::{Checkpoint, Parameters};
use csasr_core::speech_lm::SpeechLm;
use csasr_core::synthdata::{gen_corpus, read_corpus_file, read_spec_file, render_frames, SynthSpec, Utterance};
use csasr_core::tokenizer::{self, encode_idit, train_bpe, TokenId};
use csasr_core::training::{model_from_checkpoint, transcribe, Strategy};

create_exception!(csasr, CsasrError, PyException);

fn err(e: csasr_core::Error) -> PyErr {
    CsasrError::new_err(format!("{}: {e}", e.kind()))
}

fn counts(c: &ErrorCounts) -> (usize, usize, usize, usize) {
    (c.sub, c.del, c.ins, c.n)
}

/// Error counts for one scoring call.
#[pyclass(name = "ErrorReport", module = "csasr", frozen)]
struct PyErrorReport(evaluation::ErrorReport);

#[pymethods]
impl PyErrorReport {
    #[getter]
    fn cer(&self) -> f64 {
        self.0.cer()
    }

    #[getter]
    fn wer(&self) -> f64 {
        self.0.wer()
    }

    #[getter]
    fn mer(&self) -> f64 {
        self.0.mer()
    }

    /// `(S, D, I, N)` per unit language: "zh", "en", "other", "all".
    fn counts(&self) -> BTreeMap<&'static str, (usize, usize, usize, usize)> {
        let r = &self.0;
        BTreeMap::from([
            ("zh", counts(&r.zh)),
            ("en", counts(&r.en)),
            ("other", counts(&r.other)),
            ("all", counts(&r.all)),
        ])
    }

    fn __repr__(&self) -> String {
        format!("ErrorReport({})", self.0.summary_line())
    }
}

#[pyclass(name = "Vocab", module = "csasr", frozen)]
struct PyVocab(tokenizer::Vocab);

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn train(texts: Vec<String>, size: usize) -> PyResult<Self> {
        train_bpe(texts.iter().map(String::as_str), size).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.into()))?;
        tokenizer::Vocab::from_text(&text).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(path, self.0.to_text()).map_err(|e| err(e.into()))
    }

    #[pyo3(signature = (text, idit = false))]
    fn encode(&self, text: &str, idit: bool) -> Vec<TokenId> {
        if idit {
            encode_idit(text, &self.0).into_inner()
        } else {
            self.0.encode_plain(text).into_inner()
        }
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.0.decode(&ids).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A generated or loaded synthetic corpus.
#[pyclass(name = "Dataset", module = "csasr", frozen)]
struct PyDataset {
    spec: SynthSpec,
    train: Vec<Utterance>,
    test: Vec<Utterance>,
}

fn rows(utts: &[Utterance]) -> Vec<(String, String, String)> {
    utts.iter()
        .map(|u| (u.id.clone(), u.lang.as_str().to_string(), u.text.clone()))
        .collect()
}

#[pymethods]
impl PyDataset {
    /// Generates a corpus from an optional run-config TOML string.
    #[staticmethod]
    #[pyo3(signature = (config = None))]
    fn generate(config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(t) => RunConfig::from_toml(t).map_err(err)?,
            None => RunConfig::default(),
        };
        let c = gen_corpus(&cfg.synth).map_err(err)?;
        Ok(Self {
            spec: cfg.synth,
            train: c.train,
            test: c.test,
        })
    }

    /// Loads a directory written by `csasr gen-data`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            spec: read_spec_file(&dir.join("synth_spec.toml")).map_err(err)?,
            train: read_corpus_file(&dir.join("train.jsonl")).map_err(err)?,
            test: read_corpus_file(&dir.join("test.jsonl")).map_err(err)?,
        })
    }

    /// `(id, lang, text)` triples.
    fn train(&self) -> Vec<(String, String, String)> {
        rows(&self.train)
    }

    fn test(&self) -> Vec<(String, String, String)> {
        rows(&self.test)
    }

    /// Acoustic frames of one utterance, one list per frame.
    fn frames(&self, id: &str) -> PyResult<Vec<Vec<f64>>> {
        let u = self
            .train
            .iter()
            .chain(&self.test)
            .find(|u| u.id == id)
            .ok_or_else(|| CsasrError::new_err(format!("unknown utterance {id}")))?;
        let r = render_frames(u, &self.spec).map_err(err)?;
        Ok((0..r.frames.frames()).map(|i| r.frames.frame(i).to_vec()).collect())
    }
}

fn parse_mode(mode: &str) -> PyResult<RoutingMode> {
    match mode {
        "dense" => Ok(RoutingMode::Dense),
        "lse" => Ok(RoutingMode::Lse),
        "top1" => Ok(RoutingMode::Top1),
        other => Err(CsasrError::new_err(format!("unknown routing mode {other}"))),
    }
}

/// A trained speech LM loaded from a checkpoint.
#[pyclass(name = "Model", module = "csasr", frozen)]
struct PyModel {
    model: SpeechLm,
    strategy: Option<Strategy>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).map_err(err)?;
        let model = model_from_checkpoint(&c).map_err(err)?;
        let strategy = c
            .meta
            .get("strategy")
            .map(|s| s.parse())
            .transpose()
            .map_err(err)?;
        Ok(Self { model, strategy })
    }

    #[getter]
    fn strategy(&self) -> Option<String> {
        self.strategy.map(|s| s.name())
    }

    fn param_count(&self) -> usize {
        self.model.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Greedy transcription. `mode` is "dense", "lse" or "top1"; the default
    /// follows the strategy stored in the checkpoint.
    #[pyo3(signature = (frames, vocab, mode = None, max_len = 64))]
    fn transcribe(&self, frames: Vec<Vec<f64>>, vocab: &PyVocab, mode: Option<&str>, max_len: usize) -> PyResult<String> {
        let dim = frames.first().map_or(0, Vec::len);
        let n = frames.len();
        let fm = FrameMatrix::new(dim, n, frames.into_iter().flatten().collect()).map_err(err)?;
        let mode = match mode {
            Some(m) => parse_mode(m)?,
            None => match self.model.config.connector.kind {
                ConnectorKind::Linear => RoutingMode::Dense,
                ConnectorKind::Moe => self.strategy.map_or(RoutingMode::Dense, |s| s.inference_mode()),
            },
        };
        transcribe(&self.model, &vocab.0, &fm, mode, max_len).map_err(err)
    }
}

#[pyfunction]
fn normalize(text: &str) -> String {
    tokenizer::normalize(text)
}

/// `(text, lang)` pairs, lang being "zh", "en" or "other".
#[pyfunction]
fn segment_units(text: &str) -> Vec<(String, String)> {
    tokenizer::segment_units(text)
        .iter()
        .map(|u| (u.text.clone(), u.lang.as_str().to_string()))
        .collect()
}

#[pyfunction]
fn score_pair(reference: &str, hypothesis: &str) -> PyErrorReport {
    PyErrorReport(evaluation::score_pair(reference, hypothesis))
}

/// Corpus score over `{id: text}` maps with identical keys.
#[pyfunction]
fn score(references: BTreeMap<String, String>, hypotheses: BTreeMap<String, String>) -> PyResult<PyErrorReport> {
    let t = |m: BTreeMap<String, String>| m.into_iter().map(|(id, text)| Transcript { id, text }).collect::<Vec<_>>();
    let s = evaluation::score(&t(references), &t(hypotheses), None).map_err(err)?;
    Ok(PyErrorReport(s.overall))
}

/// Runs the `csasr` command line with `args` and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    csasr_core::cli::main_with_args(std::iter::once("csasr".to_string()).chain(args))
}

#[pymodule]
fn csasr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CsasrError", m.py().get_type::<CsasrError>())?;
    m.add_class::<PyErrorReport>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(segment_units, m)?)?;
    m.add_function(wrap_pyfunction!(score_pair, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
