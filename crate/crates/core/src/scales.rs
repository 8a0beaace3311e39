//! ACR quality scales and stratified micro-batch sampling.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::imaging::Image;

/// Number of members in a micro-batch: one per quality scale.
pub const MICRO_BATCH_SIZE: usize = 5;

/// An image with its ground-truth mean opinion score on `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub image_id: String,
    pub pixels: Image,
    pub mos: f64,
}

impl ScoredImage {
    pub fn new(image_id: impl Into<String>, pixels: Image, mos: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&mos) {
            return domain(format!("mos {mos} outside [0, 100]"));
        }
        Ok(Self {
            image_id: image_id.into(),
            pixels,
            mos,
        })
    }
}

/// Absolute Category Rating bins of width 20 over the MOS range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QualityScale {
    Bad,
    Poor,
    Fair,
    Good,
    Excellent,
}

impl QualityScale {
    pub const ALL: [QualityScale; 5] = [
        QualityScale::Bad,
        QualityScale::Poor,
        QualityScale::Fair,
        QualityScale::Good,
        QualityScale::Excellent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// `[lo, hi)`; the Excellent interval is closed at 100.
    pub fn interval(self) -> (f64, f64) {
        let lo = 20.0 * self.index() as f64;
        (lo, lo + 20.0)
    }

    pub fn center(self) -> f64 {
        let (lo, hi) = self.interval();
        0.5 * (lo + hi)
    }

    pub fn label(self) -> &'static str {
        match self {
            QualityScale::Bad => "Bad",
            QualityScale::Poor => "Poor",
            QualityScale::Fair => "Fair",
            QualityScale::Good => "Good",
            QualityScale::Excellent => "Excellent",
        }
    }
}

impl std::fmt::Display for QualityScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub fn scale_of(mos: f64) -> Result<QualityScale> {
    if !(0.0..=100.0).contains(&mos) {
        return domain(format!("mos {mos} outside [0, 100]"));
    }
    let idx = ((mos / 20.0).floor() as usize).min(4);
    Ok(QualityScale::ALL[idx])
}

/// Five pool members, slot `i` drawn for scale `QualityScale::ALL[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch<'a> {
    pub members: [&'a ScoredImage; MICRO_BATCH_SIZE],
    /// Pool indices of `members`.
    pub indices: [usize; MICRO_BATCH_SIZE],
    /// Slot labels. A slot filled by fallback keeps its own label.
    pub scales: [QualityScale; MICRO_BATCH_SIZE],
}

impl MicroBatch<'_> {
    pub fn mos(&self) -> [f64; MICRO_BATCH_SIZE] {
        self.members.map(|m| m.mos)
    }
}

/// Scale whose pool bucket serves `wanted`: itself if non-empty, otherwise the
/// non-empty scale with the nearest interval center (ties go to the lower one).
fn source_scale(wanted: QualityScale, occupied: &[bool; 5]) -> Option<QualityScale> {
    QualityScale::ALL
        .iter()
        .copied()
        .filter(|s| occupied[s.index()])
        .min_by(|a, b| {
            let da = (a.center() - wanted.center()).abs();
            let db = (b.center() - wanted.center()).abs();
            da.total_cmp(&db).then(a.index().cmp(&b.index()))
        })
}

/// Draws `floor(k / 5)` micro-batches, one uniformly chosen image per scale.
///
/// Within a micro-batch an image is not reused while its bucket still has
/// unused members, so a fallback slot prefers a different image from the
/// neighbouring scale.
pub fn build_micro_batches(
    pool: &[ScoredImage],
    k: usize,
    rng_seed: u64,
) -> Result<Vec<MicroBatch<'_>>> {
    if pool.len() < MICRO_BATCH_SIZE {
        return config(format!(
            "micro-batch sampling needs at least {MICRO_BATCH_SIZE} images, pool has {}",
            pool.len()
        ));
    }
    if k < MICRO_BATCH_SIZE {
        return config(format!(
            "batch size K = {k} is smaller than {MICRO_BATCH_SIZE}"
        ));
    }
    let mut buckets: [Vec<usize>; 5] = Default::default();
    for (i, img) in pool.iter().enumerate() {
        buckets[scale_of(img.mos)?.index()].push(i);
    }
    let occupied = buckets.clone().map(|b| !b.is_empty());
    let sources = QualityScale::ALL.map(|s| source_scale(s, &occupied).expect("pool is non-empty"));

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut batches = Vec::with_capacity(k / MICRO_BATCH_SIZE);
    for _ in 0..k / MICRO_BATCH_SIZE {
        let mut indices = [usize::MAX; MICRO_BATCH_SIZE];
        for slot in 0..MICRO_BATCH_SIZE {
            let bucket = &buckets[sources[slot].index()];
            let unused: Vec<usize> = bucket
                .iter()
                .copied()
                .filter(|i| !indices[..slot].contains(i))
                .collect();
            let candidates = if unused.is_empty() { bucket } else { &unused };
            indices[slot] = *candidates.choose(&mut rng).expect("bucket is non-empty");
        }
        batches.push(MicroBatch {
            members: indices.map(|i| &pool[i]),
            indices,
            scales: QualityScale::ALL,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_with_counts(counts: [usize; 5]) -> Vec<ScoredImage> {
        let mut pool = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for j in 0..n {
                let mos = 20.0 * s as f64 + 2.0 + 3.0 * j as f64;
                pool.push(
                    ScoredImage::new(format!("s{s}_{j}"), Image::filled(2, 2, 0.5), mos).unwrap(),
                );
            }
        }
        pool
    }

    #[test]
    fn scale_of_examples() {
        assert_eq!(scale_of(85.0).unwrap(), QualityScale::Excellent);
        assert_eq!(scale_of(20.0).unwrap(), QualityScale::Poor);
        assert_eq!(scale_of(100.0).unwrap(), QualityScale::Excellent);
        assert_eq!(scale_of(0.0).unwrap(), QualityScale::Bad);
        assert_eq!(scale_of(79.999).unwrap(), QualityScale::Good);
        assert!(scale_of(-0.1).is_err());
        assert!(scale_of(100.5).is_err());
        assert!(scale_of(f64::NAN).is_err());
    }

    #[test]
    fn intervals_partition_dense_grid() {
        for i in 0..=100_000 {
            let mos = i as f64 / 1000.0;
            let hits = QualityScale::ALL
                .iter()
                .filter(|s| {
                    let (lo, hi) = s.interval();
                    (mos >= lo && mos < hi) || (**s == QualityScale::Excellent && mos == 100.0)
                })
                .count();
            assert_eq!(hits, 1, "mos {mos}");
            let (lo, hi) = scale_of(mos).unwrap().interval();
            assert!(mos >= lo && (mos < hi || mos == 100.0));
        }
    }

    #[test]
    fn micro_batch_count_is_floor_k_over_five() {
        let pool = pool_with_counts([3, 3, 3, 3, 3]);
        assert_eq!(build_micro_batches(&pool, 25, 1).unwrap().len(), 5);
        assert_eq!(build_micro_batches(&pool, 7, 1).unwrap().len(), 1);
        for k in 5..60 {
            assert_eq!(build_micro_batches(&pool, k, 9).unwrap().len(), k / 5);
        }
    }

    #[test]
    fn full_coverage_gives_distinct_scales() {
        let pool = pool_with_counts([2, 4, 6, 4, 2]);
        for mb in build_micro_batches(&pool, 50, 3).unwrap() {
            let scales: Vec<_> = mb
                .members
                .iter()
                .map(|m| scale_of(m.mos).unwrap())
                .collect();
            assert_eq!(scales, QualityScale::ALL.to_vec());
        }
    }

    #[test]
    fn empty_bad_scale_falls_back_to_poor() {
        let pool = pool_with_counts([0, 3, 3, 3, 3]);
        let batches = build_micro_batches(&pool, 5, 11).unwrap();
        assert_eq!(batches.len(), 1);
        let mb = &batches[0];
        assert_eq!(mb.scales[0], QualityScale::Bad);
        assert_eq!(scale_of(mb.members[0].mos).unwrap(), QualityScale::Poor);
        assert_eq!(scale_of(mb.members[1].mos).unwrap(), QualityScale::Poor);
        assert_ne!(mb.indices[0], mb.indices[1], "a second Poor image is used");
    }

    #[test]
    fn fallback_ties_go_to_the_lower_scale() {
        let occupied = [false, true, false, true, false];
        assert_eq!(
            source_scale(QualityScale::Fair, &occupied),
            Some(QualityScale::Poor)
        );
        assert_eq!(
            source_scale(QualityScale::Excellent, &occupied),
            Some(QualityScale::Good)
        );
    }

    #[test]
    fn sampling_is_reproducible() {
        let pool = pool_with_counts([4, 4, 4, 4, 4]);
        let a = build_micro_batches(&pool, 40, 77).unwrap();
        let b = build_micro_batches(&pool, 40, 77).unwrap();
        let c = build_micro_batches(&pool, 40, 78).unwrap();
        let idx = |v: &[MicroBatch]| v.iter().map(|m| m.indices).collect::<Vec<_>>();
        assert_eq!(idx(&a), idx(&b));
        assert_ne!(idx(&a), idx(&c));
    }

    #[test]
    fn rejects_small_pools_and_batches() {
        let pool = pool_with_counts([1, 1, 1, 1, 0]);
        assert!(build_micro_batches(&pool, 10, 0).is_err());
        let pool = pool_with_counts([1, 1, 1, 1, 1]);
        assert!(build_micro_batches(&pool, 4, 0).is_err());
    }
}
