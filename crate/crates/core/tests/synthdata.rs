#![allow(clippy::field_reassign_with_default)]

use std::collections::BTreeMap;

use csasr_core::synthdata::{gen_corpus, prototype, render_frames, write_corpus_file, SynthSpec};
use csasr_core::tokenizer::normalize;
use csasr_core::{UnitLang, UttLang};
use proptest::prelude::*;

/// Counts units by splitting on spaces and treating every CJK character
/// as its own unit.
fn count_units(texts: impl Iterator<Item = String>) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let (mut zh, mut en) = (BTreeMap::new(), BTreeMap::new());
    for t in texts {
        for word in t.split(' ') {
            let mut latin = String::new();
            for c in word.chars() {
                if c.is_ascii_alphabetic() || c == '\'' {
                    latin.push(c);
                } else {
                    if !latin.is_empty() {
                        *en.entry(std::mem::take(&mut latin)).or_insert(0) += 1;
                    }
                    *zh.entry(c.to_string()).or_insert(0) += 1;
                }
            }
            if !latin.is_empty() {
                *en.entry(latin).or_insert(0) += 1;
            }
        }
    }
    (zh, en)
}

#[test]
fn default_corpus_is_near_uniform() {
    let spec = SynthSpec::default();
    let corpus = gen_corpus(&spec).unwrap();
    assert_eq!(corpus.train.len(), 2000);
    assert_eq!(corpus.test.len(), 300);
    let (zh, en) = count_units(corpus.train.iter().map(|u| u.text.clone()));
    for (name, hist, v) in [("zh", &zh, spec.zh_vocab), ("en", &en, spec.en_vocab)] {
        assert_eq!(hist.len(), v, "{name} unit inventory");
        let mean = hist.values().sum::<usize>() as f64 / v as f64;
        for (u, &c) in hist {
            let dev = (c as f64 - mean).abs() / mean;
            assert!(dev <= 0.2, "{name} unit {u}: count {c} vs mean {mean:.1}");
        }
    }
    let mut langs = BTreeMap::new();
    for u in &corpus.train {
        *langs.entry(u.lang).or_insert(0) += 1;
    }
    assert_eq!(langs[&UttLang::Zh], 667);
    assert_eq!(langs[&UttLang::En], 667);
    assert_eq!(langs[&UttLang::Cs], 666);
}

#[test]
fn prototypes_are_well_separated() {
    let spec = SynthSpec::default();
    let units: Vec<String> = spec
        .zh_units()
        .iter()
        .map(|c| c.to_string())
        .chain(spec.en_units().iter().map(|w| w.to_string()))
        .collect();
    let protos: Vec<Vec<f64>> = units.iter().map(|u| prototype(u, &spec)).collect();
    let mut min = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d = protos[i].iter().zip(&protos[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            min = min.min(d);
        }
    }
    assert!(min > 4.0 * spec.noise_sigma, "closest prototypes are {min:.3} apart");
}

#[test]
fn corpus_files_are_byte_identical_across_runs() {
    let spec = SynthSpec::default();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_corpus_file(&a, &gen_corpus(&spec).unwrap().train).unwrap();
    write_corpus_file(&b, &gen_corpus(&spec).unwrap().train).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn frames_are_reproducible_and_aligned() {
    let spec = SynthSpec::default();
    let corpus = gen_corpus(&spec).unwrap();
    for u in corpus.train.iter().take(60) {
        let r = render_frames(u, &spec).unwrap();
        assert_eq!(r, render_frames(u, &spec).unwrap());
        assert_eq!(r.frames.frames(), r.alignment.len());
        let langs: Vec<UnitLang> = r.alignment.iter().map(|a| a.lang).collect();
        if u.lang == UttLang::Cs {
            assert!(langs.contains(&UnitLang::Zh) && langs.contains(&UnitLang::En), "{}", u.text);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_seed_gives_normalized_tagged_text(seed in any::<u64>()) {
        let mut spec = SynthSpec::default();
        spec.seed = seed;
        spec.train.zh = 40;
        spec.train.en = 40;
        spec.train.cs = 40;
        spec.test.zh = 5;
        spec.test.en = 5;
        spec.test.cs = 5;
        let c = gen_corpus(&spec).unwrap();
        for u in c.all() {
            prop_assert_eq!(normalize(&u.text), u.text.clone());
            let units = csasr_core::tokenizer::segment_units(&u.text);
            let has = |l| units.iter().any(|x| x.lang == l);
            let cs = has(UnitLang::Zh) && has(UnitLang::En);
            prop_assert_eq!(u.lang == UttLang::Cs, cs);
            for w in units.units.windows(2) {
                prop_assert!(w[0].text != w[1].text, "repeated unit in {}", u.text);
            }
        }
    }
}
