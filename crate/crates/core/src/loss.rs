//! Loss terms of the joint localizer objective with analytic gradients.
//!
//! Every kernel returns `(loss, gradient)`; gradients are with respect to the
//! logits (or predictions, for the L1 term).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "focal parameters alpha = {alpha}, gamma = {gamma} out of range"
            )));
        }
        Ok(Self { alpha, gamma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub epsilon: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self { epsilon: 0.2 }
    }
}

impl SmoothingParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside [0, 1)")));
        }
        Ok(Self { epsilon })
    }
}

/// How per-element focal terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
    /// Sum divided by the number of positive targets (at least 1).
    PerPositive,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Binary focal loss with mean reduction.
///
/// With `p = sigmoid(x)`, a positive element costs `-alpha (1-p)^gamma log p`
/// and a negative one `-(1-alpha) p^gamma log(1-p)`.
pub fn focal_loss(logits: &[f64], targets: &[u8], params: FocalParams) -> Result<(f64, Vec<f64>)> {
    focal_loss_with(logits, targets, params, Reduction::Mean)
}

pub fn focal_loss_with(
    logits: &[f64],
    targets: &[u8],
    params: FocalParams,
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(logits.len(), targets.len())?;
    let FocalParams { alpha, gamma } = params;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        let q = sigmoid(-x);
        let log_p = -softplus(-x);
        let log_q = -softplus(x);
        match t {
            1 => {
                let w = q.powf(gamma);
                total += -alpha * w * log_p;
                grad.push(alpha * w * (gamma * p * log_p - q));
            }
            0 => {
                let w = p.powf(gamma);
                total += -(1.0 - alpha) * w * log_q;
                grad.push((1.0 - alpha) * w * (p - gamma * q * log_q));
            }
            other => {
                return Err(Error::InvalidParameter(format!("binary target expected, got {other}")))
            }
        }
    }
    let norm = match reduction {
        Reduction::Mean => logits.len().max(1) as f64,
        Reduction::Sum => 1.0,
        Reduction::PerPositive => targets.iter().filter(|&&t| t == 1).count().max(1) as f64,
    };
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok((total / norm, grad))
}

/// Mean binary cross-entropy on logits.
pub fn binary_cross_entropy(logits: &[f64], targets: &[u8]) -> Result<(f64, Vec<f64>)> {
    check_lengths(logits.len(), targets.len())?;
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.iter().zip(targets) {
        let t = f64::from(t.min(1));
        total += t * softplus(-x) + (1.0 - t) * softplus(x);
        grad.push((sigmoid(x) - t) / n);
    }
    Ok((total / n, grad))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Cross-entropy against a smoothed one-hot target: `1 - epsilon` on the
/// target class and `epsilon / (K - 1)` on every other class.
pub fn smoothed_ce(logits: &[f64], target: usize, params: SmoothingParams) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {k}")));
    }
    if target >= k {
        return Err(Error::IndexOutOfRange { index: target, len: k });
    }
    let off = params.epsilon / (k - 1) as f64;
    let q = |i: usize| if i == target { 1.0 - params.epsilon } else { off };
    let log_p = log_softmax(logits);
    let loss = -log_p.iter().enumerate().map(|(i, lp)| q(i) * lp).sum::<f64>();
    let grad = log_p.iter().enumerate().map(|(i, lp)| lp.exp() - q(i)).collect();
    Ok((loss.max(0.0), grad))
}

/// Unsmoothed softmax cross-entropy.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    smoothed_ce(logits, target, SmoothingParams { epsilon: 0.0 })
}

/// Grounded/ungrounded cross-entropy on a single logit for "grounded".
pub fn grounding_ce(logit: f64, grounded: bool) -> (f64, f64) {
    let (l, g) = binary_cross_entropy(&[logit], &[u8::from(grounded)]).expect("equal lengths");
    (l, g[0])
}

/// Mean absolute error with subgradient `sign(pred - target) / n`, 0 at ties.
pub fn l1_reg(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lengths(pred.len(), target.len())?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        total += d.abs();
        grad.push(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok((total / n, grad))
}

/// The individual terms of the joint objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reg: f64,
    pub class_focal: f64,
    pub verb_ce: f64,
    pub ground_ce: f64,
    /// One smoothed noun term per annotator.
    pub noun_ce: [f64; 3],
}

impl LossParts {
    pub fn new(reg: f64, class_focal: f64, verb_ce: f64, ground_ce: f64, noun_ce: [f64; 3]) -> Result<Self> {
        let parts = Self {
            reg,
            class_focal,
            verb_ce,
            ground_ce,
            noun_ce,
        };
        if parts.terms().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!("loss parts must be finite and non-negative: {parts:?}")));
        }
        Ok(parts)
    }

    fn terms(&self) -> [f64; 7] {
        [
            self.reg,
            self.class_focal,
            self.verb_ce,
            self.ground_ce,
            self.noun_ce[0],
            self.noun_ce[1],
            self.noun_ce[2],
        ]
    }
}

/// Unweighted sum of every term.
pub fn total_loss(parts: &LossParts) -> f64 {
    parts.reg + parts.class_focal + parts.verb_ce + parts.ground_ce + parts.noun_ce.iter().sum::<f64>()
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `f`. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    step: f64,
    floor: f64,
) -> f64 {
    let (_, analytic) = f(x);
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe).0;
        probe[i] = x[i] - step;
        let down = f(&probe).0;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Finite-difference step used by [`gradient_suite`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Denominator floor for relative errors in [`gradient_suite`].
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub kernel: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Checks `focal_loss`, `smoothed_ce` and `l1_reg` on `instances` random
/// inputs each. L1 inputs keep every `|pred - target|` above `1e-3` so the
/// kink is never straddled.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let targets: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let params = FocalParams::new(rng.random_range(0.05..=1.0), rng.random_range(0.0..4.0))?;
        focal_loss(&logits, &targets, params)?;
        let e = gradient_check(
            |x| focal_loss(x, &targets, params).expect("checked shape"),
            &logits,
            GRADCHECK_STEP,
            GRADCHECK_FLOOR,
        );
        worst[0] = worst[0].max(e);

        let c = rng.random_range(2..=10);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let target = rng.random_range(0..c);
        let sp = SmoothingParams::new(rng.random_range(0.0..0.5))?;
        let e = gradient_check(
            |x| smoothed_ce(x, target, sp).expect("checked shape"),
            &logits,
            GRADCHECK_STEP,
            GRADCHECK_FLOOR,
        );
        worst[1] = worst[1].max(e);

        let m = rng.random_range(1..=8);
        let target: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let pred: Vec<f64> = target
            .iter()
            .map(|t| {
                let gap = rng.random_range(1e-3..5.0);
                if rng.random() { t + gap } else { t - gap }
            })
            .collect();
        let e = gradient_check(
            |x| l1_reg(x, &target).expect("checked shape"),
            &pred,
            GRADCHECK_STEP,
            GRADCHECK_FLOOR,
        );
        worst[2] = worst[2].max(e);
    }
    Ok(["focal_loss", "smoothed_ce", "l1_reg"]
        .into_iter()
        .zip(worst)
        .map(|(k, w)| GradCheckResult {
            kernel: k.into(),
            instances,
            max_rel_error: w,
        })
        .collect())
}
