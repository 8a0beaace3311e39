//! Coarse rank-and-gradient loss, tolerance (fine) losses and curriculum weights.
//!
//! Every loss comes in two forms: a value-only function and a `*_grad` variant
//! that also returns the derivative with respect to the predicted scores. The
//! network is trained by seeding its backward pass with these derivatives.
//! At kinks (`|x|` at 0, `max(0, x)` at 0) the derivative is taken as 0.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::scales::MICRO_BATCH_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Stability term in the rank-loss denominator.
    pub sigma: f64,
    /// Number of time steps.
    #[serde(rename = "T")]
    pub steps: usize,
    /// Tolerances `l_2..l_T` for the fine losses.
    pub thresholds: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: 1e-4,
            steps: 4,
            thresholds: vec![5.0, 2.5, 0.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return config(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.steps == 0 {
            return config("T must be at least 1");
        }
        if self.thresholds.len() + 1 != self.steps {
            return config(format!(
                "expected {} thresholds for T = {}, got {}",
                self.steps - 1,
                self.steps,
                self.thresholds.len()
            ));
        }
        if self
            .thresholds
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return config("thresholds must be finite and nonnegative");
        }
        if self.thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return config(format!(
                "thresholds must be strictly decreasing, got {:?}",
                self.thresholds
            ));
        }
        Ok(())
    }

    /// Tolerance used at 1-based step `t >= 2`.
    pub fn threshold(&self, t: usize) -> f64 {
        self.thresholds[t - 2]
    }
}

/// Per-stage loss weights. Raw values are kept as configured; [`weights_at`]
/// normalizes them to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    /// First epoch (0-based) of each stage.
    pub stage_boundaries: Vec<usize>,
    /// Raw weights `w_1..w_T` per stage.
    pub stage_weights: Vec<Vec<f64>>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            stage_boundaries: vec![0, 10, 20, 30],
            stage_weights: vec![
                vec![0.25, 0.5, 0.25 / 3.0, 0.25 / 3.0],
                vec![0.0, 0.5, 0.25, 0.25],
                vec![0.0, 0.25, 0.5, 0.25],
                vec![0.25, 0.25, 0.25, 0.5],
            ],
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.stage_boundaries.is_empty() || self.stage_boundaries[0] != 0 {
            return config("stage_boundaries must start at epoch 0");
        }
        if self.stage_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return config("stage_boundaries must be strictly increasing");
        }
        if self.stage_weights.len() != self.stage_boundaries.len() {
            return config(format!(
                "{} stage boundaries but {} weight rows",
                self.stage_boundaries.len(),
                self.stage_weights.len()
            ));
        }
        for (i, w) in self.stage_weights.iter().enumerate() {
            if w.len() != steps {
                return config(format!("stage {i} has {} weights, T = {steps}", w.len()));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return config(format!("stage {i} weights must be finite and nonnegative"));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return config(format!("stage {i} weights sum to zero"));
            }
        }
        Ok(())
    }

    /// 0-based stage index for `epoch`; epochs past the last boundary stay in
    /// the final stage.
    pub fn stage_of(&self, epoch: usize) -> usize {
        self.stage_boundaries
            .iter()
            .rposition(|&b| b <= epoch)
            .unwrap_or(0)
    }
}

/// Normalized weights of the stage containing `epoch`.
pub fn weights_at(epoch: usize, schedule: &CurriculumSchedule) -> Vec<f64> {
    let raw = &schedule.stage_weights[schedule.stage_of(epoch)];
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// A pairwise loss value with its derivatives in the two predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGrad {
    pub value: f64,
    pub d_pi: f64,
    pub d_pj: f64,
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        domain(format!("non-finite loss input in {values:?}"))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `max(0, -(s_i - s_j)(p_i - p_j) / (|s_i - s_j| + sigma)) * (|s_i - s_j| + 1)`.
pub fn rank_loss(s_i: f64, s_j: f64, p_i: f64, p_j: f64, sigma: f64) -> Result<f64> {
    Ok(rank_loss_grad(s_i, s_j, p_i, p_j, sigma)?.value)
}

pub fn rank_loss_grad(s_i: f64, s_j: f64, p_i: f64, p_j: f64, sigma: f64) -> Result<PairGrad> {
    check_finite(&[s_i, s_j, p_i, p_j, sigma])?;
    if sigma <= 0.0 {
        return domain(format!("sigma must be positive, got {sigma}"));
    }
    let ds = s_i - s_j;
    let dp = p_i - p_j;
    if ds * dp >= 0.0 {
        return Ok(PairGrad {
            value: 0.0,
            d_pi: 0.0,
            d_pj: 0.0,
        });
    }
    let gain = (ds.abs() + 1.0) / (ds.abs() + sigma);
    let d = -ds * gain;
    Ok(PairGrad {
        value: -ds * dp * gain,
        d_pi: d,
        d_pj: -d,
    })
}

/// `| |s_i - s_j| - |p_i - p_j| |`.
pub fn gradient_loss(s_i: f64, s_j: f64, p_i: f64, p_j: f64) -> Result<f64> {
    Ok(gradient_loss_grad(s_i, s_j, p_i, p_j)?.value)
}

pub fn gradient_loss_grad(s_i: f64, s_j: f64, p_i: f64, p_j: f64) -> Result<PairGrad> {
    check_finite(&[s_i, s_j, p_i, p_j])?;
    let dp = p_i - p_j;
    let gap = (s_i - s_j).abs() - dp.abs();
    // d/d(dp) of |gap| = sign(gap) * -sign(dp)
    let d = -sign(gap) * sign(dp);
    Ok(PairGrad {
        value: gap.abs(),
        d_pi: d,
        d_pj: -d,
    })
}

fn check_pairs(mos: &[f64], pred: &[f64]) -> Result<()> {
    if mos.len() != pred.len() {
        return domain(format!(
            "length mismatch: {} MOS values, {} predictions",
            mos.len(),
            pred.len()
        ));
    }
    Ok(())
}

/// Rank plus gradient loss summed over the 10 unordered pairs of a micro-batch.
pub fn coarse_loss(mos: &[f64], pred: &[f64], sigma: f64) -> Result<f64> {
    Ok(coarse_loss_grad(mos, pred, sigma)?.0)
}

pub fn coarse_loss_grad(mos: &[f64], pred: &[f64], sigma: f64) -> Result<(f64, Vec<f64>)> {
    check_pairs(mos, pred)?;
    if mos.len() != MICRO_BATCH_SIZE {
        return domain(format!(
            "coarse loss needs {MICRO_BATCH_SIZE} members, got {}",
            mos.len()
        ));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; mos.len()];
    for i in 0..mos.len() {
        for j in i + 1..mos.len() {
            let r = rank_loss_grad(mos[i], mos[j], pred[i], pred[j], sigma)?;
            let g = gradient_loss_grad(mos[i], mos[j], pred[i], pred[j])?;
            total += r.value + g.value;
            grad[i] += r.d_pi + g.d_pi;
            grad[j] += r.d_pj + g.d_pj;
        }
    }
    Ok((total, grad))
}

/// Mean over items of `max(0, |s - p| - threshold)`.
pub fn fine_loss(mos: &[f64], pred: &[f64], threshold: f64) -> Result<f64> {
    Ok(fine_loss_grad(mos, pred, threshold)?.0)
}

pub fn fine_loss_grad(mos: &[f64], pred: &[f64], threshold: f64) -> Result<(f64, Vec<f64>)> {
    check_pairs(mos, pred)?;
    check_finite(mos)?;
    check_finite(pred)?;
    if !(threshold.is_finite() && threshold >= 0.0) {
        return domain(format!("threshold must be nonnegative, got {threshold}"));
    }
    if mos.is_empty() {
        return domain("fine loss of an empty batch");
    }
    let inv_n = 1.0 / mos.len() as f64;
    let mut total = 0.0;
    let grad = mos
        .iter()
        .zip(pred)
        .map(|(&s, &p)| {
            let excess = (s - p).abs() - threshold;
            if excess > 0.0 {
                total += excess;
                sign(p - s) * inv_n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total * inv_n, grad))
}

/// Curriculum-weighted loss of one micro-batch, broken down by component.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    /// Unweighted coarse loss at step 1.
    pub coarse: f64,
    /// Unweighted fine losses at steps `2..=T`.
    pub fine: Vec<f64>,
    /// `d value / d pred[t][i]`, one row per step.
    pub grad: Vec<Vec<f64>>,
}

/// `w_1 * coarse(step 1) + sum_{t >= 2} w_t * fine_t(step t)`.
pub fn total_loss(
    per_step_preds: &[Vec<f64>],
    mos: &[f64],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(total_loss_grad(per_step_preds, mos, weights, cfg)?.value)
}

pub fn total_loss_grad(
    per_step_preds: &[Vec<f64>],
    mos: &[f64],
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let steps = cfg.steps;
    if per_step_preds.len() != steps || weights.len() != steps {
        return domain(format!(
            "expected {steps} steps of predictions and weights, got {} and {}",
            per_step_preds.len(),
            weights.len()
        ));
    }
    check_finite(weights)?;
    let (coarse, coarse_grad) = coarse_loss_grad(mos, &per_step_preds[0], cfg.sigma)?;
    let mut value = weights[0] * coarse;
    let mut grad = Vec::with_capacity(steps);
    grad.push(coarse_grad.iter().map(|g| weights[0] * g).collect());
    let mut fine = Vec::with_capacity(steps - 1);
    for t in 2..=steps {
        let (f, g) = fine_loss_grad(mos, &per_step_preds[t - 1], cfg.threshold(t))?;
        value += weights[t - 1] * f;
        fine.push(f);
        grad.push(g.iter().map(|v| weights[t - 1] * v).collect());
    }
    Ok(TotalLoss {
        value,
        coarse,
        fine,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SIGMA: f64 = 1e-4;

    #[test]
    fn rank_loss_examples() {
        // 100 * 21 / 20.0001, evaluated by hand
        let v = rank_loss(50.0, 30.0, 40.0, 45.0, SIGMA).unwrap();
        assert!((v - 104.999_475_002_625).abs() < 1e-9, "{v}");
        assert_eq!(rank_loss(50.0, 30.0, 55.0, 35.0, SIGMA).unwrap(), 0.0);
        assert_eq!(rank_loss(10.0, 70.0, 33.0, 33.0, SIGMA).unwrap(), 0.0);
        assert!(rank_loss(f64::NAN, 1.0, 2.0, 3.0, SIGMA).is_err());
        assert!(rank_loss(1.0, 2.0, 3.0, 4.0, 0.0).is_err());
    }

    #[test]
    fn gradient_loss_examples() {
        assert_eq!(gradient_loss(50.0, 30.0, 58.0, 33.0).unwrap(), 5.0);
        assert_eq!(gradient_loss(80.0, 20.0, 90.0, 30.0).unwrap(), 0.0);
        assert_eq!(gradient_loss(10.0, 20.0, 20.0, 10.0).unwrap(), 0.0);
        assert!(gradient_loss(1.0, f64::INFINITY, 0.0, 0.0).is_err());
    }

    #[test]
    fn coarse_loss_examples() {
        let mos = [10.0, 30.0, 50.0, 70.0, 90.0];
        assert_eq!(coarse_loss(&mos, &mos, SIGMA).unwrap(), 0.0);
        for c in [-3.0, 0.0, 42.0] {
            assert_eq!(coarse_loss(&mos, &[c; 5], SIGMA).unwrap(), 400.0);
        }
        assert!(coarse_loss(&mos, &mos[..4], SIGMA).is_err());
        assert!(coarse_loss(&mos[..4], &mos[..4], SIGMA).is_err());
    }

    #[test]
    fn coarse_loss_of_reversed_predictions() {
        // Reversal keeps every pairwise distance, so only rank terms remain:
        // sum over pairs of d * d * (d + 1) / (d + sigma) for gaps d in 20..80.
        let mos = [10.0, 30.0, 50.0, 70.0, 90.0];
        let mut pred = mos;
        pred.reverse();
        let mut want = 0.0;
        for (gap, count) in [(20.0, 4.0), (40.0, 3.0), (60.0, 2.0), (80.0, 1.0)] {
            want += count * gap * gap * (gap + 1.0) / (gap + SIGMA);
        }
        let got = coarse_loss(&mos, &pred, SIGMA).unwrap();
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
    }

    #[test]
    fn fine_loss_examples() {
        assert_eq!(fine_loss(&[70.0], &[73.0], 5.0).unwrap(), 0.0);
        assert_eq!(fine_loss(&[70.0], &[78.0], 5.0).unwrap(), 3.0);
        assert_eq!(fine_loss(&[70.0], &[78.0], 0.0).unwrap(), 8.0);
        assert_eq!(fine_loss(&[10.0, 20.0], &[14.0, 10.0], 0.0).unwrap(), 7.0);
        assert!(fine_loss(&[1.0], &[1.0, 2.0], 0.0).is_err());
        assert!(fine_loss(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        let mos = vec![12.0, 33.0, 47.0, 66.0, 91.0];
        let exact = vec![mos.clone(); 4];
        let w = weights_at(0, &CurriculumSchedule::default());
        assert_eq!(total_loss(&exact, &mos, &w, &cfg).unwrap(), 0.0);

        let preds = vec![
            vec![20.0, 25.0, 50.0, 60.0, 85.0],
            vec![10.0, 40.0, 47.0, 70.0, 80.0],
            vec![12.0, 33.0, 40.0, 66.0, 95.0],
            vec![13.0, 32.0, 47.0, 66.0, 91.0],
        ];
        let only_coarse = total_loss(&preds, &mos, &[1.0, 0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(
            only_coarse,
            coarse_loss(&mos, &preds[0], cfg.sigma).unwrap()
        );
        assert!(total_loss(&preds[..3], &mos, &w, &cfg).is_err());
        assert!(total_loss(&preds, &mos, &w[..3], &cfg).is_err());
    }

    #[test]
    fn weights_at_examples() {
        let s = CurriculumSchedule::default();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-4);
        assert!(close(&weights_at(5, &s), &[0.2727, 0.5455, 0.0909, 0.0909]));
        assert!(close(&weights_at(15, &s), &[0.0, 0.5, 0.25, 0.25]));
        assert!(close(&weights_at(25, &s), &[0.0, 0.25, 0.5, 0.25]));
        assert!(close(&weights_at(39, &s), &[0.2, 0.2, 0.2, 0.4]));
        assert_eq!(weights_at(400, &s), weights_at(39, &s));
        assert_eq!(s.stage_of(9), 0);
        assert_eq!(s.stage_of(10), 1);
        assert_eq!(s.stage_of(30), 3);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            thresholds: vec![5.0, 5.0, 0.0],
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let short = LossConfig {
            thresholds: vec![5.0, 0.0],
            ..LossConfig::default()
        };
        assert!(short.validate().is_err());
        assert!(CurriculumSchedule::default().validate(4).is_ok());
        assert!(CurriculumSchedule::default().validate(3).is_err());
        let zero = CurriculumSchedule {
            stage_boundaries: vec![0],
            stage_weights: vec![vec![0.0; 4]],
        };
        assert!(zero.validate(4).is_err());
    }

    /// Central difference of a scalar function of one prediction.
    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    proptest! {
        #[test]
        fn pair_losses_are_symmetric(
            si in 0.0..100.0f64, sj in 0.0..100.0f64,
            pi in -20.0..120.0f64, pj in -20.0..120.0f64,
        ) {
            prop_assert_eq!(rank_loss(si, sj, pi, pj, SIGMA).unwrap(), rank_loss(sj, si, pj, pi, SIGMA).unwrap());
            prop_assert_eq!(gradient_loss(si, sj, pi, pj).unwrap(), gradient_loss(sj, si, pj, pi).unwrap());
        }

        #[test]
        fn losses_are_nonnegative_and_rank_zero_iff_concordant(
            si in 0.0..100.0f64, sj in 0.0..100.0f64,
            pi in -20.0..120.0f64, pj in -20.0..120.0f64,
            l in 0.0..20.0f64,
        ) {
            let r = rank_loss(si, sj, pi, pj, SIGMA).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, (si - sj) * (pi - pj) >= 0.0);
            prop_assert!(gradient_loss(si, sj, pi, pj).unwrap() >= 0.0);
            prop_assert!(fine_loss(&[si, sj], &[pi, pj], l).unwrap() >= 0.0);
        }

        #[test]
        fn fine_loss_nonincreasing_in_threshold(
            mos in proptest::collection::vec(0.0..100.0f64, 5),
            pred in proptest::collection::vec(0.0..100.0f64, 5),
            a in 0.0..30.0f64, b in 0.0..30.0f64,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(fine_loss(&mos, &pred, hi).unwrap() <= fine_loss(&mos, &pred, lo).unwrap());
        }

        #[test]
        fn weights_always_normalized(epoch in 0usize..200) {
            let w = weights_at(epoch, &CurriculumSchedule::default());
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn pair_gradients_match_differences(
            si in 0.0..100.0f64, sj in 0.0..100.0f64,
            pi in 0.0..100.0f64, pj in 0.0..100.0f64,
        ) {
            let (ds, dp) = (si - sj, pi - pj);
            // stay 0.1 away from every kink
            prop_assume!((ds * dp).abs() >= 0.1 && dp.abs() >= 0.1 && (ds.abs() - dp.abs()).abs() >= 0.1);
            let r = rank_loss_grad(si, sj, pi, pj, SIGMA).unwrap();
            if r.value > 0.0 {
                prop_assert!(rel_err(r.d_pi, fd(|p| rank_loss(si, sj, p, pj, SIGMA).unwrap(), pi)) <= 1e-4);
                prop_assert!(rel_err(r.d_pj, fd(|p| rank_loss(si, sj, pi, p, SIGMA).unwrap(), pj)) <= 1e-4);
            }
            let g = gradient_loss_grad(si, sj, pi, pj).unwrap();
            prop_assert!(rel_err(g.d_pi, fd(|p| gradient_loss(si, sj, p, pj).unwrap(), pi)) <= 1e-4);
            prop_assert!(rel_err(g.d_pj, fd(|p| gradient_loss(si, sj, pi, p).unwrap(), pj)) <= 1e-4);
        }
    }
}
