#![allow(dead_code)]

use std::collections::BTreeMap;

use csasr_core::connector::{ConnectorConfig, ConnectorKind, FrameMatrix, RoutingMode};
use csasr_core::numerics::{Graph, Parameters, Tape, Tensor, Trainable, Var};
use csasr_core::speech_lm::{LmConfig, LoraConfig, ModelConfig, SpeechLm};
use csasr_core::tokenizer::TokenId;
use csasr_core::{Result, UttLang};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator, so that gradients which
/// are zero up to round-off compare by absolute difference.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub type OpFn = Box<dyn for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>>;
pub type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

/// Weighted sum of every element of `v`.
pub fn reduce(t: &mut Tape<'_>, v: Var, w: &Tensor) -> Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let wv = t.constant(Tensor::new(shape.clone(), w.data().to_vec())?);
    let p = t.mul(v, wv)?;
    let (rows, n) = match shape.as_slice() {
        [] => return Ok(p),
        [n] => (p, *n),
        [m, n] => {
            let left = t.constant(Tensor::filled(&[1, *m], 1.0));
            (t.matmul(left, p)?, *n)
        }
        s => panic!("unexpected shape {s:?}"),
    };
    let right = t.constant(Tensor::filled(&[n, 1], 1.0));
    t.matmul(rows, right)
}

fn scalar_value(t: &Tape<'_>, v: Var) -> f64 {
    t.value(v).data().iter().sum()
}

/// Central-difference check of `f` at `inputs`. Returns the largest relative
/// error over every input element.
pub fn check_op(inputs: &[Tensor], f: &OpFn, weights_seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        t.value(out).clone()
    };
    let w = Tensor::randn(&[probe.len()], 1.0, &mut rng);
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        let l = reduce(&mut t, out, &w)?;
        Ok(scalar_value(&t, l))
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = f(&mut t, &vars)?;
    let l = reduce(&mut t, out, &w)?;
    let grads = t.backward(l)?;
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let g = grads.get_or_zero(&t, v);
        for k in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] -= 2.0 * FD_STEP;
            let down = eval(&xs)?;
            let num = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[k], num));
        }
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Every differentiable tape operation with an input generator.
#[allow(clippy::vec_init_then_push)]
pub fn op_cases() -> Vec<(&'static str, InputFn, OpFn)> {
    let mut v: Vec<(&'static str, InputFn, OpFn)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[4, 5])]),
        Box::new(|t, x| t.matmul(x[0], x[1])),
    ));
    v.push((
        "matmul_nt",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[5, 4])]),
        Box::new(|t, x| t.matmul_nt(x[0], x[1])),
    ));
    v.push((
        "add",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|t, x| t.add(x[0], x[1])),
    ));
    v.push((
        "add_row",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[4])]),
        Box::new(|t, x| t.add_row(x[0], x[1])),
    ));
    v.push((
        "mul",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|t, x| t.mul(x[0], x[1])),
    ));
    v.push((
        "scale",
        Box::new(|r| vec![randn(r, &[3, 4])]),
        Box::new(|t, x| t.scale(x[0], -1.7)),
    ));
    v.push((
        "mul_col",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3])]),
        Box::new(|t, x| t.mul_col(x[0], x[1])),
    ));
    v.push((
        "gelu",
        Box::new(|r| vec![Tensor::randn(&[3, 5], 2.0, r)]),
        Box::new(|t, x| t.gelu(x[0])),
    ));
    v.push((
        "softmax",
        Box::new(|r| vec![Tensor::randn(&[3, 5], 2.0, r)]),
        Box::new(|t, x| t.softmax(x[0])),
    ));
    v.push((
        "causal_softmax",
        Box::new(|r| vec![Tensor::randn(&[5, 5], 2.0, r)]),
        Box::new(|t, x| t.causal_softmax(x[0], 0.7)),
    ));
    v.push((
        "layer_norm",
        Box::new(|r| vec![Tensor::randn(&[3, 6], 2.0, r), randn(r, &[6]), randn(r, &[6])]),
        Box::new(|t, x| t.layer_norm(x[0], x[1], x[2])),
    ));
    v.push((
        "slice_cols",
        Box::new(|r| vec![randn(r, &[3, 6])]),
        Box::new(|t, x| t.slice_cols(x[0], 2, 3)),
    ));
    v.push((
        "concat_cols",
        Box::new(|r| vec![randn(r, &[3, 2]), randn(r, &[3, 4])]),
        Box::new(|t, x| t.concat_cols(&[x[0], x[1], x[0]])),
    ));
    v.push((
        "concat_rows",
        Box::new(|r| vec![randn(r, &[2, 4]), randn(r, &[3, 4])]),
        Box::new(|t, x| t.concat_rows(&[x[0], x[1]])),
    ));
    v.push((
        "gather_rows",
        Box::new(|r| vec![randn(r, &[4, 3])]),
        Box::new(|t, x| t.gather_rows(x[0], &[2, 0, 2, 3])),
    ));
    v.push((
        "cross_entropy",
        Box::new(|r| vec![Tensor::randn(&[4, 6], 2.0, r)]),
        Box::new(|t, x| t.cross_entropy(x[0], &[1, 5, 0, 3], &[true, false, true, true])),
    ));
    v.push((
        "sum",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|t, x| t.sum(&[x[0], x[1], x[0]])),
    ));
    v.push((
        "mean",
        Box::new(|r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])]),
        Box::new(|t, x| t.mean(&[x[0], x[1]])),
    ));
    v
}

/// A model small enough for finite differences over its parameters.
pub fn tiny_config(kind: ConnectorKind) -> ModelConfig {
    ModelConfig {
        lm: LmConfig {
            vocab_size: 270,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 40,
        },
        lora: LoraConfig { rank: 2, alpha: 4.0 },
        connector: ConnectorConfig {
            kind,
            d_feat: 4,
            downsample: 2,
            hidden: 6,
            n_experts: 2,
            out_init: 1.0,
        },
        instruction: String::new(),
    }
}

pub fn tiny_model(seed: u64, kind: ConnectorKind) -> SpeechLm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SpeechLm::init(&tiny_config(kind), vec![100, 101], &mut rng).unwrap();
    // Non-zero adapters so both LoRA factors receive gradient.
    m.visit_mut(&mut |name, t| {
        if name.starts_with("lora.") && name.ends_with(".b") {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    });
    m
}

pub fn random_frames(rng: &mut ChaCha8Rng, dim: usize, frames: usize) -> FrameMatrix {
    let v = (0..dim * frames).map(|_| rng.random_range(-1.5..1.5)).collect();
    FrameMatrix::new(dim, frames, v).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(0..256) as TokenId).collect()
}

pub const ALL: Trainable = Trainable {
    connector: true,
    lora: true,
    lm: true,
};

/// Checks the speech-conditioned loss against central differences on the
/// largest-gradient element and three random elements of every parameter.
pub fn check_model_loss(seed: u64, mode: RoutingMode, lang: UttLang, trainable: Trainable) -> Result<f64> {
    let model = tiny_model(seed, ConnectorKind::Moe);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let frames = random_frames(&mut rng, 4, 9);
    let labels = random_labels(&mut rng, 5);
    let loss_of = |m: &SpeechLm| -> Result<f64> {
        let mut g = Graph::new(Trainable::NONE);
        let l = m.forward_loss(&mut g, &frames, lang, mode, &labels)?;
        Ok(g.tape.value(l).item())
    };
    let grads: BTreeMap<String, Tensor> = {
        let mut g = Graph::new(trainable);
        let l = model.forward_loss(&mut g, &frames, lang, mode, &labels)?;
        g.gradients(l)?
    };
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        let mut idx = vec![(0..g.len())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap_or(0)];
        for _ in 0..3 {
            idx.push(rng.random_range(0..g.len()));
        }
        for k in idx {
            let mut m = model.clone();
            m.named_mut().get_mut(name).unwrap().data_mut()[k] += FD_STEP;
            let up = loss_of(&m)?;
            m.named_mut().get_mut(name).unwrap().data_mut()[k] -= 2.0 * FD_STEP;
            let down = loss_of(&m)?;
            worst = worst.max(rel_err(g.data()[k], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

const MIXED_POOL: &[&str] = &[
    "你", "好", "我", "们", "的", "会", "一", "下", "a", "b", "e", "o", "s", "t", "hello", "world", "OK", "it's", "A",
    "Z", "'", "1", "42", "3.5", ",", ".", "!", "?", "。", "，", "é", "😀", " ", " ", "  ", "\t", "\n", "-",
];

/// A random string mixing CJK, Latin words, digits, punctuation and
/// irregular whitespace.
pub fn random_mixed_string(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..24);
    (0..n).map(|_| MIXED_POOL[rng.random_range(0..MIXED_POOL.len())]).collect()
}

/// Byte spans of the units of normalized `text`, each including its
/// leading separator. Written independently of the library segmenter.
pub fn unit_spans(text: &str) -> Vec<(usize, usize)> {
    #[derive(PartialEq, Clone, Copy)]
    enum C {
        Zh,
        En,
        Other,
        Space,
    }
    let class = |c: char| {
        if c == ' ' {
            C::Space
        } else if ('\u{4E00}'..='\u{9FFF}').contains(&c) {
            C::Zh
        } else if c.is_ascii_alphabetic() || c == '\'' {
            C::En
        } else {
            C::Other
        }
    };
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start: Option<usize> = None;
    let mut prev = C::Space;
    for (i, c) in text.char_indices() {
        let k = class(c);
        let end = i + c.len_utf8();
        let continues = k != C::Zh && k != C::Space && k == prev;
        match k {
            C::Space => start = Some(i),
            _ if continues => spans.last_mut().unwrap().1 = end,
            _ => spans.push((start.take().unwrap_or(i), end)),
        }
        prev = k;
    }
    spans
}

/// Checks IDIT on `n` random strings: round trip, no interruption ids, and
/// every token inside one unit. Returns the first failure.
pub fn idit_suite(vocab: &csasr_core::tokenizer::Vocab, n: usize, seed: u64) -> std::result::Result<(), String> {
    use csasr_core::tokenizer::{encode_idit, normalize, INTERRUPT};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let s = random_mixed_string(&mut rng);
        let norm = normalize(&s);
        let ids = encode_idit(&s, vocab);
        if ids.contains(&INTERRUPT) {
            return Err(format!("{s:?}: interruption id in output"));
        }
        let back = vocab.decode(&ids).map_err(|e| e.to_string())?;
        if back != norm {
            return Err(format!("{s:?}: decoded {back:?}, expected {norm:?}"));
        }
        let spans = unit_spans(&norm);
        let mut pos = 0;
        for &id in ids.iter() {
            let len = vocab.piece(id).map_err(|e| e.to_string())?.len();
            let (a, b) = (pos, pos + len);
            if !spans.iter().any(|&(us, ue)| us <= a && b <= ue) {
                return Err(format!("{s:?}: token {id} at bytes {a}..{b} crosses a unit boundary"));
            }
            pos = b;
        }
    }
    Ok(())
}

/// A vocabulary whose merges cross unit boundaries inside chunks.
pub fn crossing_vocab() -> csasr_core::tokenizer::Vocab {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let corpus: Vec<String> = (0..1500)
        .map(|_| random_mixed_string(&mut rng).replace(char::is_whitespace, ""))
        .chain(["你好world", "play了game", "我们OK", "hello你好"].iter().cycle().take(200).map(|s| s.to_string()))
        .collect();
    csasr_core::tokenizer::train_bpe(corpus.iter().map(String::as_str), 520).unwrap()
}

/// Sequences over `{0,1,2}` of length at most `max_len`, indexed densely.
fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Edit distances between every pair of sequences, found by breadth-first
/// search over single-symbol edits. `dist[a][b]` is the fewest edits that
/// turn sequence `a` into sequence `b`.
pub fn bfs_edit_distances(max_len: usize) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let seqs = all_sequences(max_len);
    let index: std::collections::HashMap<Vec<u8>, usize> =
        seqs.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let neighbours: Vec<Vec<usize>> = seqs
        .iter()
        .map(|s| {
            let mut n = Vec::new();
            for i in 0..s.len() {
                let mut d = s.clone();
                d.remove(i);
                n.push(index[&d]);
                for c in 0..3u8 {
                    if c != s[i] {
                        let mut t = s.clone();
                        t[i] = c;
                        n.push(index[&t]);
                    }
                }
            }
            if s.len() < max_len {
                for i in 0..=s.len() {
                    for c in 0..3u8 {
                        let mut t = s.clone();
                        t.insert(i, c);
                        n.push(index[&t]);
                    }
                }
            }
            n
        })
        .collect();
    let dist = (0..seqs.len())
        .map(|src| {
            let mut d = vec![u8::MAX; seqs.len()];
            d[src] = 0;
            let mut queue = std::collections::VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &v in &neighbours[u] {
                    if d[v] == u8::MAX {
                        d[v] = d[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            d
        })
        .collect();
    (seqs, dist)
}

const SYMBOLS: [&str; 3] = ["你", "好", "ok"];

fn symbols_text(s: &[u8]) -> String {
    s.iter().map(|&c| SYMBOLS[c as usize]).collect::<Vec<_>>().join(" ")
}

/// Compares the aligner and the scorer with the search oracle on every
/// pair of sequences up to `max_len` symbols.
pub fn scorer_oracle_suite(max_len: usize) -> std::result::Result<usize, String> {
    use csasr_core::evaluation::{align, score_pair, EditOp};
    let (seqs, dist) = bfs_edit_distances(max_len);
    let mut pairs = 0;
    for (a, ra) in seqs.iter().enumerate() {
        for (b, hb) in seqs.iter().enumerate() {
            let want = dist[a][b] as usize;
            let ops = align(ra, hb);
            let cost = ops.iter().filter(|o| !matches!(o, EditOp::Match(..))).count();
            // The script must turn the reference into the hypothesis.
            let mut rebuilt = Vec::new();
            for op in &ops {
                match *op {
                    EditOp::Match(i, j) if ra[i] == hb[j] => rebuilt.push(hb[j]),
                    EditOp::Sub(i, j) if ra[i] != hb[j] => rebuilt.push(hb[j]),
                    EditOp::Ins(j) => rebuilt.push(hb[j]),
                    EditOp::Del(_) => {}
                    _ => return Err(format!("{ra:?} -> {hb:?}: inconsistent op {op:?}")),
                }
            }
            if cost != want || &rebuilt != hb {
                return Err(format!("{ra:?} -> {hb:?}: cost {cost}, oracle {want}"));
            }
            let rep = score_pair(&symbols_text(ra), &symbols_text(hb));
            if rep.all.errors() != want || rep.all.n != ra.len() {
                return Err(format!("{ra:?} -> {hb:?}: scorer counted {:?}", rep.all));
            }
            pairs += 1;
        }
    }
    Ok(pairs)
}

pub fn small_connector(seed: u64) -> csasr_core::connector::Connector {
    let cfg = tiny_config(ConnectorKind::Moe).connector;
    csasr_core::connector::Connector::init(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn connector_output(
    c: &csasr_core::connector::Connector,
    frames: &FrameMatrix,
    mode: RoutingMode,
    lang: UttLang,
) -> Tensor {
    let mut g = Graph::new(Trainable::NONE);
    let out = c.forward(&mut g, frames, mode, lang).unwrap();
    g.tape.value(out.h).clone()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Router normalisation and shift invariance, hard/dense agreement under
/// one-hot routing, zero gradients to unselected experts and value
/// preservation of downsampling, over `seeds` random instances.
pub fn routing_suite(seeds: u64) -> std::result::Result<(), String> {
    use csasr_core::connector::{downsample, route_probs, top1, Router};
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..6);
        let d = rng.random_range(1..7);
        let router = Router {
            weight: Tensor::randn(&[n, d], 3.0, &mut rng),
            bias: Tensor::randn(&[n], 3.0, &mut rng),
        };
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = route_probs(&x, &router).map_err(|e| e.to_string())?;
        let total: f64 = p.iter().sum();
        ensure((total - 1.0).abs() <= 1e-12, || format!("seed {seed}: probabilities sum to {total}"))?;
        ensure(p.iter().all(|&v| (0.0..=1.0).contains(&v)), || format!("seed {seed}: probability out of range"))?;

        // A power-of-two shift of dyadic logits is exact, so the result is bitwise equal.
        let dyadic = Router {
            weight: Tensor::zeros(&[n, d]),
            bias: Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-64..64) as f64 / 8.0).collect()).unwrap(),
        };
        let mut shifted = dyadic.clone();
        shifted.bias.data_mut().iter_mut().for_each(|b| *b += 256.0);
        let (a, b) = (route_probs(&x, &dyadic).unwrap(), route_probs(&x, &shifted).unwrap());
        ensure(a == b, || format!("seed {seed}: exact shift changed probabilities"))?;
        // Arbitrary shifts agree to rounding and keep the selection.
        let c = rng.random_range(-50.0..50.0);
        let mut any = router.clone();
        any.bias.data_mut().iter_mut().for_each(|b| *b += c);
        let q = route_probs(&x, &any).unwrap();
        ensure(p.iter().zip(&q).all(|(u, v)| (u - v).abs() <= 1e-12), || format!("seed {seed}: shift by {c}"))?;
        ensure(top1(&p) == top1(&q), || format!("seed {seed}: shift changed the selection"))?;

        // One-hot routing: frames whose first feature is +1 go to expert 0,
        // -1 to expert 1, with logit gaps large enough that exp underflows to 0.
        let mut conn = small_connector(seed);
        let d_in = conn.config.d_in();
        let mut w = Tensor::zeros(&[2, d_in]);
        w.data_mut()[0] = 1e4;
        w.data_mut()[d_in] = -1e4;
        conn.router = Some(Router { weight: w, bias: Tensor::zeros(&[2]) });
        let t = rng.random_range(1..8);
        let dim = conn.config.d_feat;
        let mut vals = Vec::new();
        for _ in 0..t * conn.config.downsample {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            vals.push(sign);
            vals.extend((1..dim).map(|_| rng.random_range(-1.0..1.0)));
        }
        let frames = FrameMatrix::new(dim, t * conn.config.downsample, vals).unwrap();
        let probs = conn.frame_probs(&frames).unwrap();
        ensure(probs.iter().all(|p| p.contains(&1.0) && p.contains(&0.0)), || format!("seed {seed}: routing is not one-hot"))?;
        let dense = connector_output(&conn, &frames, RoutingMode::Dense, UttLang::Cs);
        let hard = connector_output(&conn, &frames, RoutingMode::Top1, UttLang::Cs);
        let lse = connector_output(&conn, &frames, RoutingMode::Lse, UttLang::Cs);
        ensure(dense.data() == hard.data(), || format!("seed {seed}: one-hot dense differs from hard routing"))?;
        ensure(lse.data() == dense.data(), || format!("seed {seed}: one-hot LSE differs from dense routing"))?;

        // Monolingual LSE sends no gradient to the other expert.
        let conn = small_connector(seed + 1000);
        let t = rng.random_range(1..12);
        let frames = random_frames(&mut rng, dim, t);
        for (lang, other) in [(UttLang::Zh, 1), (UttLang::En, 0)] {
            let mut g = Graph::new(Trainable { connector: true, ..Trainable::NONE });
            let out = conn.forward(&mut g, &frames, RoutingMode::Lse, lang).unwrap();
            let w = Tensor::randn(g.tape.value(out.h).shape(), 1.0, &mut rng);
            let wv = g.tape.constant(w);
            let l = g.tape.mul(out.h, wv).unwrap();
            let rows = g.tape.value(l).rows();
            let cols = g.tape.value(l).cols();
            let left = g.tape.constant(Tensor::filled(&[1, rows], 1.0));
            let right = g.tape.constant(Tensor::filled(&[cols, 1], 1.0));
            let l = g.tape.matmul(left, l).unwrap();
            let l = g.tape.matmul(l, right).unwrap();
            let grads = g.gradients(l).unwrap();
            let prefix = format!("connector.experts.{other}.");
            for (name, gt) in &grads {
                let zero = gt.data().iter().all(|&v| v == 0.0);
                if name.starts_with(&prefix) || name.starts_with("connector.router") {
                    ensure(zero, || format!("seed {seed} {lang}: {name} received gradient"))?;
                } else {
                    ensure(!zero, || format!("seed {seed} {lang}: {name} received no gradient"))?;
                }
            }
        }

        // Downsampling keeps every value and pads only with zeros.
        let factor = rng.random_range(1..7);
        let t = rng.random_range(1..20);
        let x = random_frames(&mut rng, dim, t);
        let y = downsample(&x, factor).unwrap();
        let kept = &y.values()[..x.values().len()];
        ensure(kept == x.values(), || format!("seed {seed}: downsample reordered values"))?;
        ensure(y.values()[x.values().len()..].iter().all(|&v| v == 0.0), || format!("seed {seed}: padding is not zero"))?;
        let mut a = x.values().to_vec();
        let mut b = kept.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        ensure(a == b && y.frames() == x.frames().div_ceil(factor) && y.dim() == dim * factor, || {
            format!("seed {seed}: downsample shape or multiset")
        })?;
    }
    Ok(())
}
