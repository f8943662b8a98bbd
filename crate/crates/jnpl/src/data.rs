//! Dataset ingestion: seeded Gaussian-blob generation, the CIFAR-10 binary
//! reader, and the CSV interchange format.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::prob::ClassLabel;

/// One labeled sample. `true_label` is hidden from trainers (they only see a
/// [`TrainerView`]) but visible to evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub features: Vec<f64>,
    pub given_label: ClassLabel,
    pub true_label: ClassLabel,
}

/// A full dataset with fixed feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The restricted view handed to training code.
    pub fn trainer_view(&self) -> TrainerView<'_> {
        TrainerView { dataset: self }
    }
}

/// Trainer-facing view: features and given labels only. There is no path
/// from this type to `true_label`.
#[derive(Debug, Clone, Copy)]
pub struct TrainerView<'a> {
    dataset: &'a Dataset,
}

impl TrainerView<'_> {
    pub fn len(&self) -> usize {
        self.dataset.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.dataset.samples[i].features
    }

    pub fn given(&self, i: usize) -> ClassLabel {
        self.dataset.samples[i].given_label
    }

    pub fn id(&self, i: usize) -> u64 {
        self.dataset.samples[i].id
    }
}

/// Class-balanced isotropic Gaussian clusters with pairwise mean distance
/// `separation`, standardized to zero mean and unit variance per dimension.
pub fn gen_blobs<R: Rng>(
    num_classes: usize,
    n: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes < 2 || n < num_classes {
        return Err(Error::InvalidArgument("need c >= 2 and n >= c".into()));
    }
    if dim < num_classes && separation > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "separation {separation} infeasible with dim {dim} < c {num_classes}"
        )));
    }
    // Means at scaled one-hot corners: pairwise distance exactly `separation`.
    let scale = separation / 2.0f64.sqrt();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut features: Vec<f64> = (0..dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        if separation > 0.0 {
            features[class] += scale;
        }
        samples.push(LabeledSample {
            id: i as u64,
            features,
            given_label: ClassLabel::new(class),
            true_label: ClassLabel::new(class),
        });
    }
    // Standardize each dimension over the dataset.
    for d in 0..dim {
        let mean: f64 = samples.iter().map(|s| s.features[d]).sum::<f64>() / n as f64;
        let var: f64 =
            samples.iter().map(|s| (s.features[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-12);
        for s in &mut samples {
            s.features[d] = (s.features[d] - mean) / std;
        }
    }
    Ok(Dataset { samples, num_classes, dim })
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Read CIFAR-10 binary files: records of 1 label byte then 3072 pixel bytes
/// (red, green, blue planes of a 32x32 image). Features are scaled to [0,1]
/// and mean-subtracted per channel.
pub fn read_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut raw: Vec<(u8, Vec<u8>)> = Vec::new();
    for path in paths {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} not a multiple of {CIFAR_RECORD}",
                path.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Format(format!("label byte {label} > 9")));
            }
            raw.push((label, rec[1..].to_vec()));
        }
    }
    if raw.is_empty() {
        return Ok(Dataset { samples: Vec::new(), num_classes: 10, dim: CIFAR_PIXELS });
    }
    // Per-channel means over the whole set, in [0,1] units.
    let plane = CIFAR_PIXELS / 3;
    let mut channel_mean = [0.0f64; 3];
    for (_, px) in &raw {
        for (ch, m) in channel_mean.iter_mut().enumerate() {
            let sum: f64 = px[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|b| *b as f64 / 255.0)
                .sum();
            *m += sum / plane as f64;
        }
    }
    for m in &mut channel_mean {
        *m /= raw.len() as f64;
    }
    let samples = raw
        .into_iter()
        .enumerate()
        .map(|(i, (label, px))| {
            let features = px
                .iter()
                .enumerate()
                .map(|(j, b)| *b as f64 / 255.0 - channel_mean[j / plane])
                .collect();
            LabeledSample {
                id: i as u64,
                features,
                given_label: ClassLabel::new(label as usize),
                true_label: ClassLabel::new(label as usize),
            }
        })
        .collect();
    Ok(Dataset { samples, num_classes: 10, dim: CIFAR_PIXELS })
}

/// Write the CSV interchange format: `id,true_label,given_label,f0..f{d-1}`.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "true_label".into(), "given_label".into()];
    header.extend((0..dataset.dim).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    for s in &dataset.samples {
        let mut rec = vec![
            s.id.to_string(),
            s.true_label.index().to_string(),
            s.given_label.index().to_string(),
        ];
        rec.extend(s.features.iter().map(|f| format!("{f:.17e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if header.len() < 4 || &header[0] != "id" {
        return Err(Error::Format("bad interchange header".into()));
    }
    let dim = header.len() - 3;
    let mut samples = Vec::new();
    let mut max_label = 0usize;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != dim + 3 {
            return Err(Error::Format("row width mismatch".into()));
        }
        let parse_u = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let id = parse_u(&rec[0])?;
        let true_label = parse_u(&rec[1])? as usize;
        let given_label = parse_u(&rec[2])? as usize;
        max_label = max_label.max(true_label).max(given_label);
        let features = rec
            .iter()
            .skip(3)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad float {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(LabeledSample {
            id,
            features,
            given_label: ClassLabel::new(given_label),
            true_label: ClassLabel::new(true_label),
        });
    }
    Ok(Dataset { samples, num_classes: max_label + 1, dim })
}

impl Dataset {
    /// Override the inferred class count (CSV cannot represent classes absent
    /// from the file).
    pub fn with_num_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }
}
