//! Probability primitives shared by every loss and pipeline: stable softmax,
//! label newtypes, and complementary-label sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any
/// logarithm so the losses stay finite at the simplex boundary.
pub const PROB_FLOOR: f64 = 1e-12;

/// Clamp a probability away from 0 and 1 before taking a log.
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Raw network outputs over `c` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }
}

/// A point on the probability simplex over `c` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    /// Validates nonnegativity and normalization (sum within 1e-9 of 1).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput("probability vector too short".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("negative or non-finite probability".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, label: ClassLabel) -> f64 {
        self.values[label.index()]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> ClassLabel {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate().skip(1) {
            if *v > self.values[best] {
                best = i;
            }
        }
        ClassLabel::new(best)
    }

    /// Largest probability over classes other than `excluded`.
    pub fn max_excluding(&self, excluded: ClassLabel) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != excluded.index())
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    }
}

/// Softmax with max-subtraction. Shift-invariant bit-for-bit: adding a
/// constant to every logit leaves the shifted exponents unchanged.
pub fn softmax(logits: &Logits) -> ProbVector {
    let max = logits
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector {
        values: exps.iter().map(|e| e / sum).collect(),
    }
}

/// A class index in `[0, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassLabel(usize);

impl ClassLabel {
    pub fn new(index: usize) -> Self {
        Self(index)
    }

    pub fn checked(index: usize, num_classes: usize) -> Result<Self> {
        if index >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {index} out of range for {num_classes} classes"
            )));
        }
        Ok(Self(index))
    }

    pub fn index(&self) -> usize {
        self.0
    }
}

/// A set of complementary labels: classes the sample is asserted *not* to
/// belong to. Never contains the given label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplementaryLabelSet {
    labels: Vec<ClassLabel>,
}

impl ComplementaryLabelSet {
    pub fn new(mut labels: Vec<ClassLabel>, given: ClassLabel, num_classes: usize) -> Result<Self> {
        labels.sort_unstable();
        labels.dedup();
        if labels.is_empty() || labels.len() > num_classes - 1 {
            return Err(Error::InvalidArgument(format!(
                "complementary set size {} outside [1, {}]",
                labels.len(),
                num_classes - 1
            )));
        }
        if labels.iter().any(|l| *l == given) {
            return Err(Error::InvalidArgument(
                "complementary set contains the given label".into(),
            ));
        }
        if labels.iter().any(|l| l.index() >= num_classes) {
            return Err(Error::InvalidArgument("complementary label out of range".into()));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn multiplicity(&self) -> usize {
        self.labels.len()
    }
}

/// Draw `k` distinct complementary labels uniformly without replacement from
/// the classes other than `given`.
pub fn sample_complementary<R: Rng>(
    given: ClassLabel,
    num_classes: usize,
    k: usize,
    rng: &mut R,
) -> Result<ComplementaryLabelSet> {
    if k == 0 || k > num_classes - 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            num_classes - 1
        )));
    }
    let mut pool: Vec<usize> = (0..num_classes).filter(|i| *i != given.index()).collect();
    // Partial Fisher-Yates: the first k slots end up as the sample.
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    let labels = pool.into_iter().map(ClassLabel::new).collect();
    ComplementaryLabelSet::new(labels, given, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&Logits::new(vec![0.0, 0.0]).unwrap());
        assert_eq!(p.values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_overflow_stable() {
        let p = softmax(&Logits::new(vec![1000.0, 1000.0, 1000.0]).unwrap());
        for v in p.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_exact_ratio() {
        let p = softmax(&Logits::new(vec![0.0, 3.0f64.ln()]).unwrap());
        assert!((p.values()[0] - 0.25).abs() < 1e-12);
        assert!((p.values()[1] - 0.75).abs() < 1e-12);
    }

    // Bitwise invariance requires x + a to round exactly, so draw both from
    // a dyadic grid (multiples of 1/8): sums and differences are then exact
    // and max-subtraction yields identical exp() arguments.
    #[test]
    fn softmax_shift_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x: Vec<f64> = (0..10)
                .map(|_| rng.random_range(-40i64..40) as f64 / 8.0)
                .collect();
            let shift = rng.random_range(-800i64..800) as f64 / 8.0;
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let a = softmax(&Logits::new(x).unwrap());
            let b = softmax(&Logits::new(shifted).unwrap());
            assert_eq!(a.values(), b.values());
        }
    }

    // Arbitrary shifts perturb the inputs by at most one rounding each, so
    // the outputs agree to a few ulps rather than bitwise.
    #[test]
    fn softmax_shift_invariant_approx() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let shift = rng.random_range(-100.0..100.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let a = softmax(&Logits::new(x).unwrap());
            let b = softmax(&Logits::new(shifted).unwrap());
            for (u, v) in a.values().iter().zip(b.values()) {
                assert!((u - v).abs() <= 1e-12 * u.max(*v));
            }
        }
    }

    #[test]
    fn argmax_tie_breaks_low_index() {
        let p = ProbVector::new(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(p.argmax().index(), 0);
    }

    #[test]
    fn argmax_matches_logit_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let logits = Logits::new(x.clone()).unwrap();
            let mut best = 0;
            for i in 1..x.len() {
                if x[i] > x[best] {
                    best = i;
                }
            }
            assert_eq!(softmax(&logits).argmax().index(), best);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(Logits::new(vec![0.0, f64::NAN]).is_err());
        assert!(Logits::new(vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn sample_complementary_binary_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_complementary(ClassLabel::new(0), 2, 1, &mut rng).unwrap();
        assert_eq!(s.labels(), &[ClassLabel::new(1)]);
    }

    #[test]
    fn sample_complementary_full_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_complementary(ClassLabel::new(3), 10, 9, &mut rng).unwrap();
        let want: Vec<usize> = (0..10).filter(|i| *i != 3).collect();
        let got: Vec<usize> = s.labels().iter().map(|l| l.index()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn sample_complementary_k_too_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_complementary(ClassLabel::new(0), 10, 10, &mut rng).is_err());
    }

    #[test]
    fn sample_complementary_uniform_frequencies() {
        // 1/9 each over the 9 non-given classes, 3 standard errors.
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let s = sample_complementary(ClassLabel::new(5), 10, 1, &mut rng).unwrap();
            counts[s.labels()[0].index()] += 1;
        }
        assert_eq!(counts[5], 0);
        let p = 1.0 / 9.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for (i, c) in counts.iter().enumerate() {
            if i == 5 {
                continue;
            }
            let freq = *c as f64 / n as f64;
            assert!(
                (freq - p).abs() < 3.0 * se,
                "class {i}: freq {freq} vs {p}"
            );
        }
    }

    #[test]
    fn sample_complementary_never_given() {
        for c in [2usize, 10, 100] {
            let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
            for t in 0..1000 {
                let given = ClassLabel::new(t % c);
                let k = 1 + t % (c - 1).max(1);
                let s = sample_complementary(given, c, k, &mut rng).unwrap();
                assert!(s.labels().iter().all(|l| *l != given));
            }
        }
    }

    #[test]
    fn sampling_reproducible() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            (0..50)
                .map(|_| {
                    sample_complementary(ClassLabel::new(2), 10, 3, &mut rng)
                        .unwrap()
                        .labels()
                        .to_vec()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }
}
