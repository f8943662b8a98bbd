//! Label-noise injection: symmetric resampling, asymmetric class maps, and
//! circular flips within class groups. Ground truth is retained so filtering
//! can be scored afterwards.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::prob::ClassLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    AsymmetricMap,
    CircularGroups,
    None,
}

/// Which corruption to apply and at what rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Source class -> target class, for `AsymmetricMap`.
    pub map: Option<BTreeMap<usize, usize>>,
    /// Partition of the class set, for `CircularGroups`.
    pub groups: Option<Vec<Vec<usize>>>,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        Self { kind: NoiseKind::Symmetric, rate, map: None, groups: None }
    }

    pub fn asymmetric(rate: f64, map: BTreeMap<usize, usize>) -> Self {
        Self { kind: NoiseKind::AsymmetricMap, rate, map: Some(map), groups: None }
    }

    pub fn circular(rate: f64, groups: Vec<Vec<usize>>) -> Self {
        Self { kind: NoiseKind::CircularGroups, rate, map: None, groups: Some(groups) }
    }

    pub fn none() -> Self {
        Self { kind: NoiseKind::None, rate: 0.0, map: None, groups: None }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!("noise rate {} outside [0,1]", self.rate)));
        }
        match self.kind {
            NoiseKind::AsymmetricMap => {
                let map = self
                    .map
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("asymmetric_map requires a map".into()))?;
                for (src, dst) in map {
                    if src == dst {
                        return Err(Error::InvalidArgument(format!(
                            "map target equals source for class {src}"
                        )));
                    }
                    if *src >= num_classes || *dst >= num_classes {
                        return Err(Error::InvalidArgument("map class out of range".into()));
                    }
                }
            }
            NoiseKind::CircularGroups => {
                let groups = self.groups.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("circular_groups requires groups".into())
                })?;
                let mut seen = vec![false; num_classes];
                for g in groups {
                    for &cls in g {
                        if cls >= num_classes || seen[cls] {
                            return Err(Error::InvalidArgument(
                                "groups must partition the label set".into(),
                            ));
                        }
                        seen[cls] = true;
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(Error::InvalidArgument(
                        "groups must cover every class".into(),
                    ));
                }
            }
            NoiseKind::Symmetric | NoiseKind::None => {}
        }
        Ok(())
    }
}

/// One entry of the flip log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub sample_id: u64,
    pub true_label: usize,
    pub given_label: usize,
}

/// A corrupted dataset plus the exact clean/noisy split.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub dataset: Dataset,
    /// `clean_mask[i]` iff `given_label == true_label` for sample `i`.
    pub clean_mask: Vec<bool>,
    pub flips: Vec<FlipRecord>,
}

impl NoisyDataset {
    fn from_corrupted(dataset: Dataset, flips: Vec<FlipRecord>) -> Self {
        let clean_mask = dataset
            .samples
            .iter()
            .map(|s| s.given_label == s.true_label)
            .collect();
        Self { dataset, clean_mask, flips }
    }

    pub fn uncorrupted(dataset: Dataset) -> Self {
        Self::from_corrupted(dataset, Vec::new())
    }

    pub fn realized_rate(&self) -> f64 {
        if self.dataset.is_empty() {
            return 0.0;
        }
        self.clean_mask.iter().filter(|c| !**c).count() as f64 / self.dataset.len() as f64
    }
}

/// Flip each label with probability `rate`, resampling uniformly from the
/// other classes. Every flip changes the label, so the realized noise
/// fraction matches `rate` in expectation.
pub fn inject_symmetric<R: Rng>(dataset: &Dataset, rate: f64, rng: &mut R) -> Result<NoisyDataset> {
    NoiseSpec::symmetric(rate).validate(dataset.num_classes)?;
    let c = dataset.num_classes;
    let mut out = dataset.clone();
    let mut flips = Vec::new();
    for s in &mut out.samples {
        s.given_label = s.true_label;
        if rate > 0.0 && rng.random_bool(rate) {
            let offset = rng.random_range(1..c);
            let new = (s.true_label.index() + offset) % c;
            s.given_label = ClassLabel::new(new);
            flips.push(FlipRecord {
                sample_id: s.id,
                true_label: s.true_label.index(),
                given_label: new,
            });
        }
    }
    Ok(NoisyDataset::from_corrupted(out, flips))
}

/// For each sample whose true class is a map key, relabel it to the mapped
/// class with probability `rate`. Unmapped classes are untouched.
pub fn inject_asymmetric_map<R: Rng>(
    dataset: &Dataset,
    rate: f64,
    map: &BTreeMap<usize, usize>,
    rng: &mut R,
) -> Result<NoisyDataset> {
    NoiseSpec::asymmetric(rate, map.clone()).validate(dataset.num_classes)?;
    let mut out = dataset.clone();
    let mut flips = Vec::new();
    for s in &mut out.samples {
        s.given_label = s.true_label;
        if let Some(&dst) = map.get(&s.true_label.index()) {
            if rate > 0.0 && rng.random_bool(rate) {
                s.given_label = ClassLabel::new(dst);
                flips.push(FlipRecord {
                    sample_id: s.id,
                    true_label: s.true_label.index(),
                    given_label: dst,
                });
            }
        }
    }
    Ok(NoisyDataset::from_corrupted(out, flips))
}

/// With probability `rate`, advance a sample's label one position circularly
/// within its group. Singleton groups are identity.
pub fn inject_circular<R: Rng>(
    dataset: &Dataset,
    rate: f64,
    groups: &[Vec<usize>],
    rng: &mut R,
) -> Result<NoisyDataset> {
    NoiseSpec::circular(rate, groups.to_vec()).validate(dataset.num_classes)?;
    let mut next = vec![0usize; dataset.num_classes];
    for g in groups {
        for (i, &cls) in g.iter().enumerate() {
            next[cls] = g[(i + 1) % g.len()];
        }
    }
    let mut out = dataset.clone();
    let mut flips = Vec::new();
    for s in &mut out.samples {
        s.given_label = s.true_label;
        let dst = next[s.true_label.index()];
        if dst != s.true_label.index() && rate > 0.0 && rng.random_bool(rate) {
            s.given_label = ClassLabel::new(dst);
            flips.push(FlipRecord {
                sample_id: s.id,
                true_label: s.true_label.index(),
                given_label: dst,
            });
        }
    }
    Ok(NoisyDataset::from_corrupted(out, flips))
}

/// Dispatch to the injector matching `spec.kind`.
pub fn inject<R: Rng>(dataset: &Dataset, spec: &NoiseSpec, rng: &mut R) -> Result<NoisyDataset> {
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(dataset, spec.rate, rng),
        NoiseKind::AsymmetricMap => {
            inject_asymmetric_map(dataset, spec.rate, spec.map.as_ref().unwrap(), rng)
        }
        NoiseKind::CircularGroups => {
            inject_circular(dataset, spec.rate, spec.groups.as_ref().unwrap(), rng)
        }
        NoiseKind::None => Ok(NoisyDataset::uncorrupted(dataset.clone())),
    }
}

/// Export the flip log as CSV: `sample_id,true,given`.
pub fn write_flip_log(flips: &[FlipRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "true", "given"])?;
    for f in flips {
        w.write_record([
            f.sample_id.to_string(),
            f.true_label.to_string(),
            f.given_label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flip_log(path: &Path) -> Result<Vec<FlipRecord>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::Format("flip log row width".into()));
        }
        let parse = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        out.push(FlipRecord {
            sample_id: parse(&rec[0])?,
            true_label: parse(&rec[1])? as usize,
            given_label: parse(&rec[2])? as usize,
        });
    }
    Ok(out)
}

/// The standard CIFAR-10 confusion map: TRUCK(9)->AUTOMOBILE(1),
/// BIRD(2)->PLANE(0), DEER(4)->HORSE(7), CAT(3)<->DOG(5).
pub fn cifar10_asymmetric_map() -> BTreeMap<usize, usize> {
    BTreeMap::from([(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)])
}
