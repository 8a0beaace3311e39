//! Rank and linear correlation plus range-effect diagnostics.
//!
//! Correlations return `None` when they are undefined (fewer than two points
//! or zero variance).

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{domain, Result};
use crate::scales::{scale_of, QualityScale};

/// Width of a deviation-histogram bin in MOS points.
pub const DEVIATION_BIN: f64 = 2.5;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn has_ties(x: &[f64]) -> bool {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| w[0] == w[1])
}

/// Spearman rank-order correlation.
///
/// Tie-free inputs use `1 - 6 sum(d^2) / (n (n^2 - 1))`; otherwise the Pearson
/// correlation of average ranks.
pub fn srocc(mos: &[f64], pred: &[f64]) -> Option<f64> {
    assert_eq!(mos.len(), pred.len(), "srocc needs paired samples");
    let n = mos.len();
    if n < 2 || mos.iter().chain(pred).any(|v| !v.is_finite()) {
        return None;
    }
    let (rm, rp) = (average_ranks(mos), average_ranks(pred));
    if has_ties(mos) || has_ties(pred) {
        return plcc(&rm, &rp);
    }
    let d2: f64 = rm.iter().zip(&rp).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = n as f64;
    Some(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Pearson linear correlation.
pub fn plcc(mos: &[f64], pred: &[f64]) -> Option<f64> {
    assert_eq!(mos.len(), pred.len(), "plcc needs paired samples");
    let n = mos.len();
    if n < 2 || mos.iter().chain(pred).any(|v| !v.is_finite()) {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(mos), mean(pred));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in mos.iter().zip(pred) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ground truth and per-step predictions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub mos: f64,
    /// `pmos[t]` is the prediction after step `t + 1`.
    pub pmos: Vec<f64>,
}

impl PredictionRecord {
    /// Final-step prediction.
    pub fn headline(&self) -> f64 {
        *self.pmos.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
}

impl Correlations {
    pub fn of(mos: &[f64], pred: &[f64]) -> Self {
        Self {
            srocc: srocc(mos, pred),
            plcc: plcc(mos, pred),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMetrics {
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub count: usize,
}

/// Ordered `label -> count` bins, serialized as a JSON object in bin order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Histogram(pub Vec<(String, usize)>);

impl Histogram {
    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, c)| c).sum()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.0.iter().find(|(l, _)| l == label).map(|(_, c)| *c)
    }
}

impl Serialize for Histogram {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Histogram {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Ordered;
        impl<'de> Visitor<'de> for Ordered {
            type Value = Histogram;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of bin labels to counts")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut m: A,
            ) -> std::result::Result<Histogram, A::Error> {
                let mut bins = Vec::new();
                while let Some(entry) = m.next_entry()? {
                    bins.push(entry);
                }
                Ok(Histogram(bins))
            }
        }
        d.deserialize_map(Ordered)
    }
}

/// Histogram bin index of an absolute deviation: `[0, 2.5]`, `(2.5, 5]`, ...
pub fn deviation_bin(d: f64) -> usize {
    if d <= DEVIATION_BIN {
        0
    } else {
        (d / DEVIATION_BIN).ceil() as usize - 1
    }
}

pub fn deviation_bin_label(i: usize) -> String {
    let lo = DEVIATION_BIN * i as f64;
    let hi = lo + DEVIATION_BIN;
    if i == 0 {
        format!("[0, {hi}]")
    } else {
        format!("({lo}, {hi}]")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEffectReport {
    pub global: Correlations,
    pub per_scale: BTreeMap<QualityScale, ScaleMetrics>,
    /// `|scale(pmos) - scale(mos)|` for 0..=4.
    pub scale_confusion: BTreeMap<usize, usize>,
    pub deviation_histogram: Histogram,
    pub n: usize,
}

pub fn range_effect_report(records: &[PredictionRecord]) -> Result<RangeEffectReport> {
    if records.is_empty() {
        return domain("range-effect report needs at least one record");
    }
    for r in records {
        if r.pmos.is_empty() || r.pmos.iter().any(|p| !p.is_finite()) {
            return domain(format!("record {} has no finite predictions", r.image_id));
        }
        scale_of(r.mos)?;
    }
    let mos: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let pred: Vec<f64> = records.iter().map(PredictionRecord::headline).collect();

    let mut groups: BTreeMap<QualityScale, (Vec<f64>, Vec<f64>)> = QualityScale::ALL
        .iter()
        .map(|&s| (s, Default::default()))
        .collect();
    let mut scale_confusion: BTreeMap<usize, usize> = (0..5).map(|d| (d, 0)).collect();
    let mut bins: Vec<usize> = Vec::new();
    for (&m, &p) in mos.iter().zip(&pred) {
        let true_scale = scale_of(m)?;
        let g = groups.get_mut(&true_scale).expect("all scales present");
        g.0.push(m);
        g.1.push(p);
        let predicted = scale_of(p.clamp(0.0, 100.0))?;
        *scale_confusion
            .get_mut(&true_scale.index().abs_diff(predicted.index()))
            .expect("index difference is at most 4") += 1;
        let b = deviation_bin((p - m).abs());
        if bins.len() <= b {
            bins.resize(b + 1, 0);
        }
        bins[b] += 1;
    }
    let per_scale = groups
        .into_iter()
        .map(|(s, (m, p))| {
            let metrics = if m.len() < 2 {
                ScaleMetrics {
                    srocc: None,
                    plcc: None,
                    count: m.len(),
                }
            } else {
                ScaleMetrics {
                    srocc: srocc(&m, &p),
                    plcc: plcc(&m, &p),
                    count: m.len(),
                }
            };
            (s, metrics)
        })
        .collect();
    Ok(RangeEffectReport {
        global: Correlations::of(&mos, &pred),
        per_scale,
        scale_confusion,
        deviation_histogram: Histogram(
            bins.into_iter()
                .enumerate()
                .map(|(i, c)| (deviation_bin_label(i), c))
                .collect(),
        ),
        n: records.len(),
    })
}

/// Mean absolute error of step `t` (0-based) over `records`.
pub fn step_mae(records: &[PredictionRecord], t: usize) -> f64 {
    records
        .iter()
        .map(|r| (r.pmos[t] - r.mos).abs())
        .sum::<f64>()
        / records.len() as f64
}
