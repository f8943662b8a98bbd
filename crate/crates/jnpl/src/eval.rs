//! Filtering-quality metrics: average precision over clean/noisy rankings,
//! 2-D confidence histograms, and plain classification accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, MlpParams};
use crate::noise::NoisyDataset;
use crate::prob::softmax;

/// Per-sample confidences used for ranking and histograms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterRecord {
    pub sample_id: u64,
    /// Probability at the given label.
    pub p_given: f64,
    /// Max probability over the non-given classes.
    pub p_comp_max: f64,
    pub is_actually_clean: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    Clean,
    Noisy,
}

/// Rank records by clean score and average the precision at each positive
/// hit. Clean-positive ranks `p_given` descending, noisy-positive ascending;
/// ties break by sample id.
pub fn average_precision(records: &[FilterRecord], positive: Positive) -> Result<f64> {
    let n_pos = records
        .iter()
        .filter(|r| r.is_actually_clean == (positive == Positive::Clean))
        .count();
    if n_pos == 0 || n_pos == records.len() {
        return Err(Error::UndefinedMetric(
            "average precision needs both clean and noisy records".into(),
        ));
    }
    let mut ranked: Vec<&FilterRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        let ord = match positive {
            Positive::Clean => b.p_given.total_cmp(&a.p_given),
            Positive::Noisy => a.p_given.total_cmp(&b.p_given),
        };
        ord.then(a.sample_id.cmp(&b.sample_id))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, r) in ranked.iter().enumerate() {
        if r.is_actually_clean == (positive == Positive::Clean) {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Both AP orientations plus class counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap_clean_positive: f64,
    pub ap_noisy_positive: f64,
    pub n_clean: usize,
    pub n_noisy: usize,
}

pub fn ap_result(records: &[FilterRecord]) -> Result<ApResult> {
    Ok(ApResult {
        ap_clean_positive: average_precision(records, Positive::Clean)?,
        ap_noisy_positive: average_precision(records, Positive::Noisy)?,
        n_clean: records.iter().filter(|r| r.is_actually_clean).count(),
        n_noisy: records.iter().filter(|r| !r.is_actually_clean).count(),
    })
}

/// 2-D histogram over `(p_comp_max, p_given)`, split by clean/noisy.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionHistogram {
    pub bins: usize,
    /// Bin edges, identical on both axes: `bins + 1` points over [0, 1].
    pub edges: Vec<f64>,
    /// `counts_*[row][col]` where row indexes `p_comp_max`, col `p_given`.
    pub counts_clean: Vec<Vec<u64>>,
    pub counts_noisy: Vec<Vec<u64>>,
}

pub fn export_distribution_histogram(
    records: &[FilterRecord],
    bins: usize,
) -> Result<DistributionHistogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least 2 bins".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts_clean = vec![vec![0u64; bins]; bins];
    let mut counts_noisy = vec![vec![0u64; bins]; bins];
    let bin_of = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    for r in records {
        let row = bin_of(r.p_comp_max);
        let col = bin_of(r.p_given);
        if r.is_actually_clean {
            counts_clean[row][col] += 1;
        } else {
            counts_noisy[row][col] += 1;
        }
    }
    Ok(DistributionHistogram { bins, edges, counts_clean, counts_noisy })
}

impl DistributionHistogram {
    pub fn total(&self) -> u64 {
        self.counts_clean
            .iter()
            .chain(&self.counts_noisy)
            .flatten()
            .sum()
    }

    /// Marginal counts over `p_given` (clean + noisy).
    pub fn marginal_p_given(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.bins];
        for row in self.counts_clean.iter().chain(&self.counts_noisy) {
            for (acc, v) in out.iter_mut().zip(row) {
                *acc += v;
            }
        }
        out
    }

    /// CSV rows: `split,p_comp_max_lo,p_comp_max_hi,p_given_lo,p_given_hi,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["split", "p_comp_max_lo", "p_comp_max_hi", "p_given_lo", "p_given_hi", "count"])?;
        for (split, counts) in [("clean", &self.counts_clean), ("noisy", &self.counts_noisy)] {
            for (row, cols) in counts.iter().enumerate() {
                for (col, count) in cols.iter().enumerate() {
                    w.write_record([
                        split.to_string(),
                        format!("{}", self.edges[row]),
                        format!("{}", self.edges[row + 1]),
                        format!("{}", self.edges[col]),
                        format!("{}", self.edges[col + 1]),
                        count.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of the test set whose predicted class equals the true label.
pub fn accuracy(params: &MlpParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut correct = 0usize;
    for s in &test.samples {
        let (logits, _) = forward(params, &s.features)?;
        if softmax(&logits).argmax() == s.true_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Compute a filter record per training sample under the current model.
pub fn records_from_model(params: &MlpParams, noisy: &NoisyDataset) -> Result<Vec<FilterRecord>> {
    let mut out = Vec::with_capacity(noisy.dataset.len());
    for (s, &clean) in noisy.dataset.samples.iter().zip(&noisy.clean_mask) {
        let (logits, _) = forward(params, &s.features)?;
        let p = softmax(&logits);
        out.push(FilterRecord {
            sample_id: s.id,
            p_given: p.get(s.given_label),
            p_comp_max: p.max_excluding(s.given_label),
            is_actually_clean: clean,
        });
    }
    Ok(out)
}
