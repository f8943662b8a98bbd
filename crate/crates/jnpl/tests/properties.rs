//! Randomized invariants over the loss, selection, and serialization layers.

use jnpl::data::{gen_blobs, read_csv, write_csv};
use jnpl::losses::{
    nl_loss, nlplus_loss, pl_loss, plplus_loss, plplus_weight, select_plplus, JnplConfig,
};
use jnpl::prob::{softmax, ClassLabel, ComplementaryLabelSet, Logits};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits_strategy(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, c)
}

proptest! {
    /// Every loss gradient lives in the softmax tangent space: entries sum
    /// to zero.
    #[test]
    fn gradients_sum_to_zero(values in logits_strategy(6), y in 0usize..6, off in 1usize..6) {
        let logits = Logits::new(values).unwrap();
        let y = ClassLabel::new(y);
        let ybar = ComplementaryLabelSet::new(
            vec![ClassLabel::new((y.index() + off) % 6)], y, 6,
        ).unwrap();
        let cfg = JnplConfig::default();
        for eval in [
            pl_loss(&logits, y).unwrap(),
            nl_loss(&logits, &ybar).unwrap(),
            nlplus_loss(&logits, &ybar).unwrap(),
            plplus_loss(&logits, softmax(&logits).argmax(), &cfg).unwrap(),
        ] {
            let sum: f64 = eval.grad.iter().sum();
            prop_assert!(sum.abs() < 1e-9, "grad sum {sum}");
        }
    }

    /// The PL+ weight telescopes for every exponent, not just the default.
    #[test]
    fn plplus_weight_telescopes(p in 0.0f64..0.999_999, n in 0u32..6) {
        let lhs = plplus_weight(p, n) * (1.0 - p);
        let rhs = 1.0 - p.powi(2i32.pow(n + 1));
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    /// Selection soundness: every accepted candidate's target is the argmax
    /// and holds strictly more than 1/c mass.
    #[test]
    fn accepted_candidates_are_sound(values in logits_strategy(5), seed in 0u64..1000) {
        let logits = Logits::new(values).unwrap();
        let p = softmax(&logits);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for cand in select_plplus(&[(0, p.clone())], &mut rng) {
            prop_assert_eq!(cand.target, p.argmax());
            prop_assert!(p.get(cand.target) > 1.0 / 5.0);
            for (i, &v) in p.values().iter().enumerate() {
                if i != cand.target.index() {
                    prop_assert!(v < 1.0 / 5.0);
                }
            }
        }
    }

    /// Dataset CSV round-trip preserves labels and ids exactly and features
    /// to printed precision.
    #[test]
    fn dataset_csv_roundtrip(seed in 0u64..200, n in 3usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = gen_blobs(3, n, 3, 3.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&data, &path).unwrap();
        let back = read_csv(&path).unwrap();
        prop_assert_eq!(back.num_classes, data.num_classes);
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in data.samples.iter().zip(&back.samples) {
            prop_assert_eq!(a.id, b.id);
            prop_assert_eq!(a.true_label, b.true_label);
            prop_assert_eq!(a.given_label, b.given_label);
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
