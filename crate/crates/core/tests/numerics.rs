use std::collections::BTreeMap;

use csasr_core::numerics::{adamw_step, matmul, softmax, AdamWState, Checkpoint, OptimizerConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let i = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
    assert_eq!(matmul(&i, &a).unwrap(), a);
    let c = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
    assert_eq!(matmul(&a, &c).unwrap().data(), &[2.0, 4.0]);
    assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap().data(), &[0.5, 0.5]);
    let p = softmax(&Tensor::vector(vec![2.0, 0.0]).unwrap()).unwrap();
    // e^2 / (e^2 + 1)
    assert!((p.data()[0] - 0.880_797_077_977_882_3).abs() < 1e-15);
}

#[test]
fn cross_entropy_examples() {
    let v = 7;
    let mut t = Tape::new();
    let uniform = t.constant(Tensor::zeros(&[3, v]));
    let l = t.cross_entropy(uniform, &[0, 3, 6], &[true; 3]).unwrap();
    assert!((t.value(l).item() - (v as f64).ln()).abs() < 1e-12);

    let mut sharp = Tensor::zeros(&[1, v]);
    sharp.data_mut()[2] = 200.0;
    let s = t.constant(sharp);
    let l = t.cross_entropy(s, &[2], &[true]).unwrap();
    assert!(t.value(l).item() < 1e-80);

    let logits = Tensor::randn(&[3, v], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let x = t.constant(logits);
    let a = t.cross_entropy(x, &[1, 2, 3], &[true, false, true]).unwrap();
    let b = t.cross_entropy(x, &[1, 5, 3], &[true, false, true]).unwrap();
    assert_eq!(t.value(a).item().to_bits(), t.value(b).item().to_bits());
}

/// Scalar AdamW written out by hand.
fn reference_adamw(mut p: f64, grads: &[f64], c: &OptimizerConfig) -> Vec<f64> {
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    for (k, &g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        let lr = if t as usize >= c.warmup_steps { c.lr } else { c.lr * t as f64 / c.warmup_steps as f64 };
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        p -= lr * c.weight_decay * p;
        p -= lr * mh / (vh.sqrt() + c.eps);
        out.push(p);
    }
    out
}

fn run_adamw(p0: f64, grads: &[f64], c: &OptimizerConfig) -> Vec<f64> {
    let mut p = Tensor::vector(vec![p0]).unwrap();
    let mut state = AdamWState::new();
    let mut out = Vec::new();
    for (k, &g) in grads.iter().enumerate() {
        let mut params = BTreeMap::from([("p".to_string(), &mut p)]);
        let gr = BTreeMap::from([("p".to_string(), Tensor::vector(vec![g]).unwrap())]);
        adamw_step(&mut params, &gr, &mut state, c, k + 1).unwrap();
        out.push(p.data()[0]);
    }
    out
}

#[test]
fn adamw_matches_scalar_reference() {
    let c = OptimizerConfig { lr: 0.1, warmup_steps: 2, weight_decay: 0.01, ..Default::default() };
    let got = run_adamw(1.0, &[1.0, 1.0, 1.0], &c);
    let want = reference_adamw(1.0, &[1.0, 1.0, 1.0], &c);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15, "{got:?} vs {want:?}");
    }
}

#[test]
fn adamw_zero_gradient_keeps_params_without_decay() {
    let c = OptimizerConfig::default();
    let got = run_adamw(0.375, &[0.0; 5], &c);
    assert!(got.iter().all(|&p| p.to_bits() == 0.375f64.to_bits()));
}

#[test]
fn warmup_schedule() {
    let c = OptimizerConfig { lr: 1e-3, warmup_steps: 100, ..Default::default() };
    assert_eq!(c.lr_at(100), 1e-3);
    assert_eq!(c.lr_at(5000), 1e-3);
    assert!((c.lr_at(50) - 5e-4).abs() < 1e-18);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let mut t = Tape::new();
    let av = t.leaf(a, true);
    let wv = t.leaf(w, false);
    let h = t.matmul(av, wv).unwrap();
    let h = t.gelu(h).unwrap();
    let l1 = t.cross_entropy(h, &[0, 1, 2], &[true; 3]).unwrap();
    let s = t.softmax(h).unwrap();
    let l2 = t.cross_entropy(s, &[4, 3, 2], &[true; 3]).unwrap();
    let both = t.sum(&[l1, l2]).unwrap();
    let g1 = t.backward(l1).unwrap().get_or_zero(&t, av);
    let g2 = t.backward(l2).unwrap().get_or_zero(&t, av);
    let g = t.backward(both).unwrap().get_or_zero(&t, av);
    for ((x, y), z) in g1.data().iter().zip(g2.data()).zip(g.data()) {
        assert!((x + y - z).abs() <= 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut c = Checkpoint::new(7);
    c.tensors.insert("w".into(), Tensor::randn(&[2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
    c.meta.insert("k".into(), "v".into());
    let mut bytes = Vec::new();
    c.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, c);
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(bytes, again);
    assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        c in -100.0f64..100.0,
    ) {
        let p = softmax(&Tensor::vector(xs.clone()).unwrap()).unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let q = softmax(&Tensor::vector(xs.iter().map(|x| x + c).collect()).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
