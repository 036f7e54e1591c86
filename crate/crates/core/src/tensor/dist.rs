use rand::Rng;

use super::all_finite;
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Categorical distribution over `K` discrete actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates that `probs` is a proper distribution.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || !all_finite(&probs) || probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Parameter("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("probabilities sum to {total}")));
        }
        Ok(Categorical { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

/// `log softmax(logits / tau)` via max subtraction.
pub fn log_softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if logits.is_empty() || !all_finite(logits) {
        return Err(Error::Numeric("logits must be finite and nonempty".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| (l - max) / tau).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|s| s - lse).collect())
}

pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Categorical> {
    check_temperature(tau)?;
    if logits.is_empty() || !all_finite(logits) {
        return Err(Error::Numeric("logits must be finite and nonempty".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(Categorical { probs })
}

/// `sum_a p(a) ln(p(a) / q(a))`, with `0 ln 0 = 0`.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL between {} and {} actions", p.len(), q.len())));
    }
    if q.probs.iter().any(|v| *v <= 0.0) {
        return Err(Error::Parameter("KL reference distribution must be strictly positive".into()));
    }
    let kl = p
        .probs
        .iter()
        .zip(&q.probs)
        .filter(|(pa, _)| **pa > 0.0)
        .map(|(pa, qa)| pa * (pa.ln() - qa.ln()))
        .sum::<f64>();
    // Roundoff can push identical distributions a hair below zero.
    Ok(kl.max(0.0))
}

/// Standard Gumbel draw `-ln(-ln u)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    -(-u.ln()).ln()
}

/// Gumbel-softmax relaxation `softmax((logits + gumbel) / temperature)`.
pub fn gumbel_softmax(logits: &[f64], gumbel: &[f64], temperature: f64) -> Vec<f64> {
    let perturbed: Vec<f64> = logits.iter().zip(gumbel).map(|(l, g)| l + g).collect();
    softmax_with_temperature(&perturbed, temperature)
        .map(|c| c.probs)
        .unwrap_or_else(|_| vec![f64::NAN; logits.len()])
}

/// Gradient with respect to the logits given the relaxed sample `y` and
/// the upstream gradient on `y`.
pub fn gumbel_softmax_backward(y: &[f64], upstream: &[f64], temperature: f64) -> Vec<f64> {
    let inner: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(upstream)
        .map(|(yi, gi)| yi * (gi - inner) / temperature)
        .collect()
}

/// Diagonal Gaussian whose samples are squashed through `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct SquashedGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
    clamped: Vec<bool>,
}

/// A reparameterized draw along with what backprop needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub pre_tanh: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let softplus = (-2.0 * u).max(0.0) + (-(2.0 * u).abs()).exp().ln_1p();
    2.0 * (std::f64::consts::LN_2 - u - softplus)
}

impl SquashedGaussian {
    /// `raw_log_std` is clamped into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, raw_log_std: &[f64]) -> Result<Self> {
        if mean.len() != raw_log_std.len() {
            return Err(Error::Shape("mean and log-stddev lengths differ".into()));
        }
        if !all_finite(&mean) || !all_finite(raw_log_std) {
            return Err(Error::Numeric("Gaussian parameters".into()));
        }
        let clamped = raw_log_std
            .iter()
            .map(|l| !(LOG_STD_MIN..=LOG_STD_MAX).contains(l))
            .collect();
        let log_std = raw_log_std
            .iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(SquashedGaussian {
            mean,
            log_std,
            clamped,
        })
    }

    /// Splits an actor head laid out as `[mean (D), raw log-stddev (D)]`.
    pub fn from_head(head: &[f64]) -> Result<Self> {
        if head.len() % 2 != 0 {
            return Err(Error::Shape(format!("actor head of odd width {}", head.len())));
        }
        let d = head.len() / 2;
        Self::new(head[..d].to_vec(), &head[d..])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    /// Whether each raw log-stddev was outside the clamp range.
    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    /// `tanh(mean)`.
    pub fn deterministic_action(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }

    /// Reparameterized sample `tanh(mean + std * noise)` and its log-density,
    /// including the change-of-variables term of the squashing.
    pub fn sample(&self, noise: &[f64]) -> Result<SquashedSample> {
        if noise.len() != self.dim() {
            return Err(Error::Shape(format!(
                "{} noise values for a {}-dimensional Gaussian",
                noise.len(),
                self.dim()
            )));
        }
        let mut action = Vec::with_capacity(self.dim());
        let mut pre_tanh = Vec::with_capacity(self.dim());
        let mut log_prob = 0.0;
        for d in 0..self.dim() {
            let u = self.mean[d] + self.log_std[d].exp() * noise[d];
            log_prob += -0.5 * noise[d] * noise[d] - self.log_std[d] - HALF_LN_2PI;
            log_prob -= log_one_minus_tanh_sq(u);
            pre_tanh.push(u);
            action.push(u.tanh());
        }
        if !log_prob.is_finite() {
            return Err(Error::Numeric("squashed Gaussian log-density".into()));
        }
        Ok(SquashedSample {
            action,
            log_prob,
            pre_tanh,
            noise: noise.to_vec(),
        })
    }

    /// Log-density of an action in `(-1, 1)^D`.
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        let mut lp = 0.0;
        for d in 0..self.dim() {
            let u = action[d].atanh();
            let z = (u - self.mean[d]) / self.log_std[d].exp();
            lp += -0.5 * z * z - self.log_std[d] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        lp
    }

    /// Pulls `d_action` (gradient on the squashed action) and `d_log_prob`
    /// (gradient on the log-density) back to the head `[mean, raw log-stddev]`.
    pub fn sample_backward(&self, sample: &SquashedSample, d_action: &[f64], d_log_prob: f64) -> Vec<f64> {
        let d = self.dim();
        let mut head = vec![0.0; 2 * d];
        for k in 0..d {
            let a = sample.action[k];
            let du = d_action[k] * (1.0 - a * a) + d_log_prob * 2.0 * sample.pre_tanh[k].tanh();
            head[k] = du;
            if !self.clamped[k] {
                head[d + k] = du * self.log_std[k].exp() * sample.noise[k] - d_log_prob;
            }
        }
        head
    }
}

/// Closed-form `KL(teacher || student)` for one pair of 1-D Gaussians given
/// by `(mean, log_std)`, plus its gradient with respect to the student.
pub fn gaussian_kl(teacher: (f64, f64), student: (f64, f64)) -> (f64, f64, f64) {
    let (mt, lt) = teacher;
    let (ms, ls) = student;
    let var_t = (2.0 * lt).exp();
    let var_s = (2.0 * ls).exp();
    let diff = ms - mt;
    let ratio = (var_t + diff * diff) / var_s;
    let kl = ls - lt + 0.5 * ratio - 0.5;
    (kl, diff / var_s, 1.0 - ratio)
}
