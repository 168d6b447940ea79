//! Adversarial and reconstruction objectives.
//!
//! The score-space functions take probabilities in (0, 1) and exist as the
//! readable interface. Training uses the logit-space forms, which evaluate
//! `-log sigmoid(l)` as `softplus(-l)` and never take the log of a rounded
//! probability.

use semfill_nn::sigmoid;

use crate::domain::Image;
use crate::embed::softplus;
use crate::error::{rejected, Error, Result};

/// Trade-off weights of the combined objectives.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Adversarial weight in the generator objective.
    pub beta: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.01,
            lambda_a: 0.1,
            lambda_s: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(beta: f64, lambda_a: f64, lambda_s: f64) -> Result<Self> {
        for (name, v) in [
            ("beta", beta),
            ("lambda_a", lambda_a),
            ("lambda_s", lambda_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(Self {
            beta,
            lambda_a,
            lambda_s,
        })
    }
}

fn check_scores(what: &'static str, scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn aligned(n: usize, others: &[&[f64]]) -> Result<()> {
    if n == 0 {
        return Err(rejected("empty score batch"));
    }
    if others.iter().any(|o| o.len() != n) {
        return Err(rejected("score vectors are not batch-aligned"));
    }
    Ok(())
}

fn neg_log(p: f64) -> f64 {
    -p.ln()
}

fn neg_log1m(p: f64) -> f64 {
    -(-p).ln_1p()
}

/// Mean of `-log Dg(y) - log(1 - Dg(z))`.
pub fn loss_dg(real: &[f64], fake: &[f64]) -> Result<f64> {
    aligned(real.len(), &[fake])?;
    check_scores("real score", real)?;
    check_scores("fake score", fake)?;
    let n = real.len() as f64;
    Ok(real
        .iter()
        .zip(fake)
        .map(|(&r, &f)| neg_log(r) + neg_log1m(f))
        .sum::<f64>()
        / n)
}

/// Mean of `-log D(y,c) - log(1 - D(z,c)) - log(1 - D(y,c'))`; the mismatch
/// term is omitted when `mismatch` is `None` (degenerate batch).
pub fn loss_matching(positive: &[f64], fake_pair: &[f64], mismatch: Option<&[f64]>) -> Result<f64> {
    aligned(positive.len(), &[fake_pair])?;
    check_scores("positive score", positive)?;
    check_scores("fake-pair score", fake_pair)?;
    if let Some(m) = mismatch {
        aligned(positive.len(), &[m])?;
        check_scores("mismatch score", m)?;
    }
    let n = positive.len() as f64;
    let mut total = 0.0;
    for i in 0..positive.len() {
        total += neg_log(positive[i]) + neg_log1m(fake_pair[i]);
        if let Some(m) = mismatch {
            total += neg_log1m(m[i]);
        }
    }
    Ok(total / n)
}

/// Attribute discriminator objective.
pub fn loss_da(positive: &[f64], fake_pair: &[f64], mismatch: Option<&[f64]>) -> Result<f64> {
    loss_matching(positive, fake_pair, mismatch)
}

/// Segmentation discriminator objective.
pub fn loss_ds(positive: &[f64], fake_pair: &[f64], mismatch: Option<&[f64]>) -> Result<f64> {
    loss_matching(positive, fake_pair, mismatch)
}

/// `lg + lambda_a * la + lambda_s * ls`.
pub fn loss_d(lg: f64, la: f64, ls: f64, w: &LossWeights) -> f64 {
    lg + (w.lambda_a * la + w.lambda_s * ls)
}

/// Euclidean norm of `z - y` over all pixels and channels.
pub fn recon_distance(z: &Image, y: &Image) -> Result<f64> {
    if z.height() != y.height() || z.width() != y.width() {
        return Err(rejected(format!(
            "reconstruction operands differ in size: {}x{} vs {}x{}",
            z.height(),
            z.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(z.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Generator-side adversarial scores of one batch.
#[derive(Debug, Clone, Copy)]
pub struct FakeScores<'a> {
    pub global: &'a [f64],
    pub attribute: &'a [f64],
    pub segmentation: &'a [f64],
}

/// Mean of `|z - y|_2 - beta * (log Dg(z) + lambda_a log Da(z, Wa(y)) + lambda_s log Ds(z, Ws(y)))`.
pub fn loss_i(z: &[Image], y: &[Image], scores: FakeScores<'_>, w: &LossWeights) -> Result<f64> {
    if z.len() != y.len() {
        return Err(rejected("generated and target batches differ in length"));
    }
    aligned(
        z.len(),
        &[scores.global, scores.attribute, scores.segmentation],
    )?;
    check_scores("global score", scores.global)?;
    check_scores("attribute score", scores.attribute)?;
    check_scores("segmentation score", scores.segmentation)?;
    let mut total = 0.0;
    for i in 0..z.len() {
        let recon = recon_distance(&z[i], &y[i])?;
        let adv = neg_log(scores.global[i])
            + w.lambda_a * neg_log(scores.attribute[i])
            + w.lambda_s * neg_log(scores.segmentation[i]);
        let l = recon + w.beta * adv;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss",
                index: i,
            });
        }
        total += l;
    }
    Ok(total / z.len() as f64)
}

/// Per-sample `-log sigmoid(l)` with its derivative.
pub fn real_term(l: f64) -> (f64, f64) {
    (softplus(-l), sigmoid(l) - 1.0)
}

/// Per-sample `-log(1 - sigmoid(l))` with its derivative.
pub fn fake_term(l: f64) -> (f64, f64) {
    (softplus(l), sigmoid(l))
}

/// Batch mean of a per-sample term over logits, returning the loss and the
/// per-logit gradient of the mean scaled by `weight`.
pub fn mean_term(logits: &[f64], term: fn(f64) -> (f64, f64), weight: f64) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .map(|&l| {
            let (v, d) = term(l);
            loss += v;
            weight * d / n
        })
        .collect();
    (loss / n, grad)
}
