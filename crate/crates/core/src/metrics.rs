//! Metrics records, CSV plot data and distribution statistics.
//!
//! Metrics CSV header: `stage,step,metric,value,seed`. Rows are appended in
//! step order; floats are written in shortest round-trip form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{D2tError, Result};

pub const METRICS_HEADER: [&str; 5] = ["stage", "step", "metric", "value", "seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Append-only log for one stage, with non-decreasing steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub stage: String,
    pub seed: u64,
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn new(stage: &str, seed: u64) -> Self {
        MetricsLog {
            stage: stage.into(),
            seed,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, metric: &str, value: f64) -> Result<()> {
        if let Some(last) = self.records.last() {
            if step < last.step {
                return Err(D2tError::Artifact(format!(
                    "metric step {step} after {}",
                    last.step
                )));
            }
        }
        self.records.push(MetricsRecord {
            stage: self.stage.clone(),
            step,
            metric: metric.into(),
            value,
            seed: self.seed,
        });
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    /// Values of one metric, in order, with their steps.
    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.series(metric).last().map(|&(_, v)| v)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.records)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
        read_rows(path)
    }
}

/// Serializes `rows` with a header derived from the row type.
pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(D2tError::from)).collect()
}

/// Two-sample Kolmogorov–Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One histogram bin of true versus generated samples for a coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub coordinate: usize,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub true_count: u64,
    pub generated_count: u64,
}

/// Per-coordinate histograms over a shared range; the last bin is closed.
/// `truth[i]` and `generated[i]` are sample vectors.
pub fn channel_histograms(
    truth: &[Vec<f64>],
    generated: &[Vec<f64>],
    bins: usize,
) -> Vec<HistogramRow> {
    let dim = truth
        .first()
        .or(generated.first())
        .map(Vec::len)
        .unwrap_or(0);
    let mut rows = Vec::with_capacity(dim * bins);
    for c in 0..dim {
        let vals = truth.iter().chain(generated).map(|v| v[c]);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
            (l.min(x), h.max(x))
        });
        let width = if hi > lo {
            (hi - lo) / bins as f64
        } else {
            1.0
        };
        let index = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
        let mut tc = vec![0u64; bins];
        let mut gc = vec![0u64; bins];
        truth.iter().for_each(|v| tc[index(v[c])] += 1);
        generated.iter().for_each(|v| gc[index(v[c])] += 1);
        for b in 0..bins {
            rows.push(HistogramRow {
                coordinate: c,
                bin: b,
                lower: lo + b as f64 * width,
                upper: lo + (b + 1) as f64 * width,
                true_count: tc[b],
                generated_count: gc[b],
            });
        }
    }
    rows
}
