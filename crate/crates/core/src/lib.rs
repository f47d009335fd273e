//! Toy speech-conditioned language model for Mandarin-English
//! code-switching recognition.

pub mod cli;
pub mod config;
pub mod connector;
pub mod error;
pub mod evaluation;
pub mod lang;
pub mod numerics;
pub mod speech_lm;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use lang::{UnitLang, UttLang};
