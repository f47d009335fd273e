//! Central finite-difference checks of every tape operation and of the
//! full speech-conditioned loss.

mod common;

use common::{check_model_loss, check_op, op_cases, ALL};
use csasr_core::connector::RoutingMode;
use csasr_core::numerics::Trainable;
use csasr_core::UttLang;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn every_operation_matches_finite_differences() {
    for (name, inputs, f) in op_cases() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = inputs(&mut rng);
            let err = check_op(&xs, &f, seed + 1000).unwrap();
            assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn stage2_loss_matches_finite_differences() {
    let t = Trainable {
        connector: true,
        lora: true,
        lm: false,
    };
    for seed in 0..SEEDS {
        for lang in [UttLang::Zh, UttLang::Cs] {
            let err = check_model_loss(seed, RoutingMode::Dense, lang, t).unwrap();
            assert!(err < TOL, "seed {seed} {lang}: relative error {err:e}");
        }
    }
}

#[test]
fn stage1_lse_loss_matches_finite_differences() {
    for seed in 0..SEEDS {
        for lang in [UttLang::Zh, UttLang::En, UttLang::Cs] {
            let err = check_model_loss(seed, RoutingMode::Lse, lang, Trainable { connector: true, ..Trainable::NONE }).unwrap();
            assert!(err < TOL, "seed {seed} {lang}: relative error {err:e}");
        }
    }
}

#[test]
fn all_parameters_match_finite_differences() {
    for seed in 0..SEEDS {
        let err = check_model_loss(seed, RoutingMode::Dense, UttLang::Cs, ALL).unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}
