//! Scalar training objectives and their analytic gradients: soft Dice,
//! cross-entropy, the teacher objective, uncertainty-target regression, and
//! the student dual loss over confidence-partitioned pixels.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::ParamStore;
use crate::error::{Error, Result};
use crate::real::Scalar;

/// Probability clamp applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// How the per-pixel confidence threshold is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// Use `tau_p` directly.
    Fixed,
    /// Use the `tau_percentile`-th percentile of confidences over the
    /// current pseudo-label pool.
    Percentile,
}

/// Weights, thresholds, and stabilizers for every objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Cross-entropy weight in the supervised objective.
    pub lambda_ce: f32,
    /// L2 weight-decay coefficient.
    pub lambda_reg: f32,
    /// High-confidence (learn) term weight.
    pub lambda1: f32,
    /// Low-confidence (unlearn) term weight.
    pub lambda2: f32,
    /// Dice stabilizer.
    pub epsilon: f32,
    /// Per-pixel confidence threshold (used when `tau_mode` is `Fixed`).
    pub tau_p: f32,
    pub tau_mode: TauMode,
    /// Percentile (0-100) used when `tau_mode` is `Percentile`.
    pub tau_percentile: f32,
    /// Cap on per-pixel cross-entropy entering the unlearn term.
    pub kappa: f32,
    /// Floor on empirical variance before the log map.
    pub var_floor: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_reg: 1e-5,
            lambda1: 0.5,
            lambda2: 0.1,
            epsilon: 1e-6,
            tau_p: 0.9,
            tau_mode: TauMode::Fixed,
            tau_percentile: 60.0,
            kappa: 2.0,
            var_floor: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_ce", self.lambda_ce),
            ("lambda_reg", self.lambda_reg),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.tau_p > 0.0 && self.tau_p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau_p must lie in (0,1), got {}",
                self.tau_p
            )));
        }
        if !(0.0..=100.0).contains(&self.tau_percentile) {
            return Err(Error::InvalidConfig("tau_percentile must lie in [0,100]".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidConfig("kappa must be > 0".into()));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::InvalidConfig("var_floor must be > 0".into()));
        }
        Ok(())
    }

    /// Resolves the effective pixel threshold for a pseudo-label pool.
    /// In percentile mode the threshold is the nearest-rank q-th percentile
    /// of the pooled confidences.
    pub fn resolve_tau(&self, pool: &[f32]) -> f32 {
        match self.tau_mode {
            TauMode::Fixed => self.tau_p,
            TauMode::Percentile => {
                if pool.is_empty() {
                    return self.tau_p;
                }
                let mut v: Vec<f32> = pool.to_vec();
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
                let n = v.len();
                let rank = ((self.tau_percentile as f64 / 100.0) * n as f64).ceil() as usize;
                v[rank.clamp(1, n) - 1]
            }
        }
    }
}

fn check_probs_vs_onehot<F: Scalar>(
    probs: &Array3<F>,
    onehot: &Array3<F>,
    context: &'static str,
) -> Result<()> {
    if probs.dim() != onehot.dim() {
        return Err(Error::shape(
            context,
            format!("{:?}", probs.dim()),
            format!("{:?}", onehot.dim()),
        ));
    }
    Ok(())
}

/// Soft Dice loss: 1 - mean over classes of (2 * sum(P*y) + eps) / (sum(P) + sum(y) + eps).
pub fn dice_loss<F: Scalar>(probs: &Array3<F>, onehot: &Array3<F>, epsilon: f32) -> Result<F> {
    check_probs_vs_onehot(probs, onehot, "dice_loss")?;
    let (c, _, _) = probs.dim();
    let eps = F::c(epsilon as f64);
    let mut acc = F::zero();
    for k in 0..c {
        let p = probs.index_axis(ndarray::Axis(0), k);
        let y = onehot.index_axis(ndarray::Axis(0), k);
        let inter = (&p * &y).sum();
        let denom = p.sum() + y.sum() + eps;
        acc = acc + (F::c(2.0) * inter + eps) / denom;
    }
    Ok(F::one() - acc / F::c(c as f64))
}

/// Gradient of [`dice_loss`] with respect to the probabilities.
pub fn dice_loss_dp<F: Scalar>(probs: &Array3<F>, onehot: &Array3<F>, epsilon: f32) -> Array3<F> {
    let (c, h, w) = probs.dim();
    let eps = F::c(epsilon as f64);
    let cn = F::c(c as f64);
    let mut dp = Array3::<F>::zeros((c, h, w));
    for k in 0..c {
        let p = probs.index_axis(ndarray::Axis(0), k);
        let y = onehot.index_axis(ndarray::Axis(0), k);
        let inter = (&p * &y).sum();
        let num = F::c(2.0) * inter + eps;
        let denom = p.sum() + y.sum() + eps;
        let d2 = denom * denom;
        for yy in 0..h {
            for xx in 0..w {
                // d/dP of num/denom, negated and averaged over classes
                let dnum = F::c(2.0) * onehot[(k, yy, xx)];
                dp[(k, yy, xx)] = -(dnum * denom - num) / d2 / cn;
            }
        }
    }
    dp
}

/// Mean pixel-wise cross-entropy: mean over pixels of -sum_c y log P, with P
/// clamped to [1e-7, 1 - 1e-7] before the log.
pub fn ce_loss<F: Scalar>(probs: &Array3<F>, onehot: &Array3<F>) -> Result<F> {
    check_probs_vs_onehot(probs, onehot, "ce_loss")?;
    let (c, h, w) = probs.dim();
    let lo = F::c(PROB_CLAMP);
    let hi = F::one() - lo;
    let mut acc = F::zero();
    for yy in 0..h {
        for xx in 0..w {
            for k in 0..c {
                let y = onehot[(k, yy, xx)];
                if y > F::zero() {
                    let p = probs[(k, yy, xx)].max(lo).min(hi);
                    acc = acc - y * p.ln();
                }
            }
        }
    }
    Ok(acc / F::c((h * w) as f64))
}

/// Gradient of [`ce_loss`] with respect to the logits (softmax composite),
/// honoring the probability clamp (zero gradient where the clamp binds).
pub fn ce_loss_dz<F: Scalar>(probs: &Array3<F>, onehot: &Array3<F>) -> Array3<F> {
    let (c, h, w) = probs.dim();
    let lo = F::c(PROB_CLAMP);
    let hi = F::one() - lo;
    let mut dp = Array3::<F>::zeros((c, h, w));
    let scale = F::c(1.0 / ((h * w) as f64));
    for yy in 0..h {
        for xx in 0..w {
            for k in 0..c {
                let y = onehot[(k, yy, xx)];
                if y > F::zero() {
                    let p = probs[(k, yy, xx)];
                    if p > lo && p < hi {
                        dp[(k, yy, xx)] = -y / p * scale;
                    }
                }
            }
        }
    }
    softmax_vjp(probs, &dp)
}

/// Chain rule through the per-pixel softmax: dZ_c = P_c (g_c - sum_c' g_c' P_c').
pub fn softmax_vjp<F: Scalar>(probs: &Array3<F>, dprobs: &Array3<F>) -> Array3<F> {
    let (c, h, w) = probs.dim();
    let mut dz = Array3::<F>::zeros((c, h, w));
    for yy in 0..h {
        for xx in 0..w {
            let mut dot = F::zero();
            for k in 0..c {
                dot = dot + probs[(k, yy, xx)] * dprobs[(k, yy, xx)];
            }
            for k in 0..c {
                dz[(k, yy, xx)] = probs[(k, yy, xx)] * (dprobs[(k, yy, xx)] - dot);
            }
        }
    }
    dz
}

/// Teacher objective over a batch: sum of per-sample Dice + lambda_CE * CE,
/// plus the L2 penalty on the parameters.
pub fn teacher_loss<F: Scalar>(
    batch: &[(&Array3<F>, &Array3<F>)],
    params: &ParamStore<F>,
    cfg: &LossConfig,
) -> Result<F> {
    let mut acc = F::zero();
    for (probs, onehot) in batch {
        acc = acc + dice_loss(probs, onehot, cfg.epsilon)?
            + F::c(cfg.lambda_ce as f64) * ce_loss(probs, onehot)?;
    }
    Ok(acc + F::c(cfg.lambda_reg as f64) * params.sq_norm())
}

/// Log-variance target from K stochastic passes: per pixel, the population
/// variance of the consensus-class probability across passes, floored and
/// mapped to the log domain.
pub fn uncertainty_target<F: Scalar>(passes: &[Array3<F>], var_floor: f32) -> Result<Array2<F>> {
    if passes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "uncertainty target needs K >= 2 passes, got {}",
            passes.len()
        )));
    }
    let dim = passes[0].dim();
    for p in passes.iter().skip(1) {
        if p.dim() != dim {
            return Err(Error::shape(
                "uncertainty_target passes",
                format!("{dim:?}"),
                format!("{:?}", p.dim()),
            ));
        }
    }
    let (c, h, w) = dim;
    let kn = F::c(passes.len() as f64);
    let floor = F::c(var_floor as f64);
    let mut out = Array2::<F>::zeros((h, w));
    for yy in 0..h {
        for xx in 0..w {
            // consensus class = argmax of the mean over passes
            let mut best = 0usize;
            let mut bestv = F::neg_infinity();
            for k in 0..c {
                let mut m = F::zero();
                for p in passes {
                    m = m + p[(k, yy, xx)];
                }
                if m > bestv {
                    bestv = m;
                    best = k;
                }
            }
            let mean = bestv / kn;
            let mut var = F::zero();
            for p in passes {
                let d = p[(best, yy, xx)] - mean;
                var = var + d * d;
            }
            var = var / kn;
            out[(yy, xx)] = var.max(floor).ln();
        }
    }
    Ok(out)
}

/// Mean squared error between predicted and target log-variance maps.
pub fn uncertainty_regression_loss<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
) -> Result<F> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(
            "uncertainty_regression_loss",
            format!("{:?}", pred.dim()),
            format!("{:?}", target.dim()),
        ));
    }
    let n = F::c(pred.len() as f64);
    let mut acc = F::zero();
    for (a, b) in pred.iter().zip(target.iter()) {
        let d = *a - *b;
        acc = acc + d * d;
    }
    Ok(acc / n)
}

/// Gradient of [`uncertainty_regression_loss`] with respect to the prediction.
pub fn uncertainty_regression_du<F: Scalar>(pred: &Array2<F>, target: &Array2<F>) -> Array2<F> {
    let n = F::c(pred.len() as f64);
    let mut du = pred - target;
    du.mapv_inplace(|v| F::c(2.0) * v / n);
    du
}

/// Per-pixel cross-entropy against a hard label, with the probability clamp.
fn pixel_ce<F: Scalar>(probs: &Array3<F>, label: usize, yy: usize, xx: usize) -> F {
    let lo = F::c(PROB_CLAMP);
    let hi = F::one() - lo;
    -probs[(label, yy, xx)].max(lo).min(hi).ln()
}

/// Mean pixel CE over the high-confidence set {p : c_p >= tau}; 0 when empty.
pub fn high_conf_loss<F: Scalar>(
    probs: &Array3<F>,
    pseudo: &Array2<u8>,
    conf: &Array2<f32>,
    tau: f32,
) -> Result<F> {
    partition_loss(probs, pseudo, conf, tau, true, None)
}

/// Mean of min(pixel CE, kappa) over the low-confidence set {p : c_p < tau};
/// 0 when empty. The cap keeps the subtracted term bounded.
pub fn low_conf_loss<F: Scalar>(
    probs: &Array3<F>,
    pseudo: &Array2<u8>,
    conf: &Array2<f32>,
    tau: f32,
    kappa: f32,
) -> Result<F> {
    partition_loss(probs, pseudo, conf, tau, false, Some(kappa))
}

fn partition_loss<F: Scalar>(
    probs: &Array3<F>,
    pseudo: &Array2<u8>,
    conf: &Array2<f32>,
    tau: f32,
    high: bool,
    cap: Option<f32>,
) -> Result<F> {
    let (c, h, w) = probs.dim();
    if pseudo.dim() != (h, w) || conf.dim() != (h, w) {
        return Err(Error::shape(
            "partition loss grids",
            format!("{h}x{w}"),
            format!("{:?}/{:?}", pseudo.dim(), conf.dim()),
        ));
    }
    let mut acc = F::zero();
    let mut count = 0usize;
    for yy in 0..h {
        for xx in 0..w {
            let in_set = if high {
                conf[(yy, xx)] >= tau
            } else {
                conf[(yy, xx)] < tau
            };
            if !in_set {
                continue;
            }
            let label = pseudo[(yy, xx)] as usize;
            if label >= c {
                return Err(Error::ClassOutOfRange {
                    got: label,
                    num_classes: c,
                });
            }
            let mut ce = pixel_ce(probs, label, yy, xx);
            if let Some(k) = cap {
                ce = ce.min(F::c(k as f64));
            }
            acc = acc + ce;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(F::zero());
    }
    Ok(acc / F::c(count as f64))
}

/// Logit gradient of [`high_conf_loss`] (zero when the set is empty).
pub fn high_conf_dz<F: Scalar>(
    probs: &Array3<F>,
    pseudo: &Array2<u8>,
    conf: &Array2<f32>,
    tau: f32,
) -> Array3<F> {
    partition_dz(probs, pseudo, conf, tau, true, None)
}

/// Logit gradient of [`low_conf_loss`]; pixels whose capped CE sits at kappa
/// contribute nothing.
pub fn low_conf_dz<F: Scalar>(
    probs: &Array3<F>,
    pseudo: &Array2<u8>,
    conf: &Array2<f32>,
    tau: f32,
    kappa: f32,
) -> Array3<F> {
    partition_dz(probs, pseudo, conf, tau, false, Some(kappa))
}

fn partition_dz<F: Scalar>(
    probs: &Array3<F>,
    pseudo: &Array2<u8>,
    conf: &Array2<f32>,
    tau: f32,
    high: bool,
    cap: Option<f32>,
) -> Array3<F> {
    let (c, h, w) = probs.dim();
    let lo = F::c(PROB_CLAMP);
    let hi = F::one() - lo;
    let mut dp = Array3::<F>::zeros((c, h, w));
    let mut count = 0usize;
    for yy in 0..h {
        for xx in 0..w {
            let in_set = if high {
                conf[(yy, xx)] >= tau
            } else {
                conf[(yy, xx)] < tau
            };
            if !in_set {
                continue;
            }
            count += 1;
            let label = pseudo[(yy, xx)] as usize;
            let p = probs[(label, yy, xx)];
            if p <= lo || p >= hi {
                continue; // clamp active: flat
            }
            if let Some(k) = cap {
                if -p.ln() > F::c(k as f64) {
                    continue; // cap active: flat
                }
            }
            dp[(label, yy, xx)] = -F::one() / p;
        }
    }
    if count == 0 {
        return Array3::zeros((c, h, w));
    }
    let scale = F::c(1.0 / count as f64);
    let mut dz = softmax_vjp(probs, &dp);
    dz.mapv_inplace(|v| v * scale);
    dz
}

/// The student dual objective:
/// sum of supervised (dice, ce) terms + lambda1 * sum(high) - lambda2 * sum(low)
/// + lambda_reg * |theta|^2.
pub fn student_total_loss<F: Scalar>(
    sup_terms: &[(F, F)],
    high: &[F],
    low: &[F],
    params: &ParamStore<F>,
    cfg: &LossConfig,
) -> F {
    let mut acc = F::zero();
    for &(dice, ce) in sup_terms {
        acc = acc + dice + F::c(cfg.lambda_ce as f64) * ce;
    }
    for &hv in high {
        acc = acc + F::c(cfg.lambda1 as f64) * hv;
    }
    for &lv in low {
        acc = acc - F::c(cfg.lambda2 as f64) * lv;
    }
    acc + F::c(cfg.lambda_reg as f64) * params.sq_norm()
}
