//! Stochastic building blocks: the rescaled Beta action distribution, the
//! categorical mode distribution with straight-through gradients, and the
//! diagonal Gaussian latent.

use crate::error::{DhalError, Result};
use crate::graph::{stable_softplus, Graph, Var};
use crate::rng::RngStream;
use crate::special::{digamma, lbeta};
use crate::tensor::Tensor;

pub const LOGVAR_CLAMP: (f32, f32) = (-10.0, 10.0);

/// log(1 + e^x) + 1 + 1e-6: keeps Beta shape parameters strictly above 1.
pub fn softplus_with_offset(x: f64) -> f64 {
    let sp = if x > 20.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    sp + 1.0 + 1e-6
}

/// Per-dimension Beta shape parameters with a symmetric action bound.
#[derive(Debug, Clone)]
pub struct BetaActionParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub bound: Vec<f64>,
}

impl BetaActionParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, bound: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.len() != bound.len() {
            return Err(DhalError::Contract("Beta parameter lengths differ".into()));
        }
        if alpha.iter().chain(&beta).any(|&v| v < 1.0 || !v.is_finite()) {
            return Err(DhalError::Contract("Beta shapes must be >= 1 and finite".into()));
        }
        if bound.iter().any(|&h| h <= 0.0) {
            return Err(DhalError::Contract("action bound must be positive".into()));
        }
        Ok(BetaActionParams { alpha, beta, bound })
    }

    pub fn dims(&self) -> usize {
        self.alpha.len()
    }
}

/// Samples a ~ Beta(alpha, beta) rescaled to [-h, +h]. The unit sample is
/// nudged 1e-6 inward so the boundary-density domain error cannot trigger
/// even in the uniform (alpha = beta = 1) test configuration.
pub fn beta_sample_scaled(params: &BetaActionParams, rng: &mut RngStream) -> Vec<f64> {
    (0..params.dims())
        .map(|i| {
            let u = rng.beta(params.alpha[i], params.beta[i]).clamp(1e-6, 1.0 - 1e-6);
            u * 2.0 * params.bound[i] - params.bound[i]
        })
        .collect()
}

/// Log density of the rescaled Beta at `action`, summed over dimensions.
/// Change of variables contributes -ln(2h) per dimension.
pub fn beta_logprob_scaled(params: &BetaActionParams, action: &[f64]) -> Result<f64> {
    if action.len() != params.dims() {
        return Err(DhalError::Contract("action dimension mismatch".into()));
    }
    let mut lp = 0.0;
    for i in 0..params.dims() {
        let h = params.bound[i];
        if action[i].abs() >= h {
            return Err(DhalError::Contract(format!(
                "action {} on or outside the support bound {h}",
                action[i]
            )));
        }
        let u = (action[i] + h) / (2.0 * h);
        let (a, b) = (params.alpha[i], params.beta[i]);
        lp += (a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u).ln() - lbeta(a, b) - (2.0 * h).ln();
    }
    Ok(lp)
}

/// Closed-form entropy of the rescaled Beta, summed over dimensions.
pub fn beta_entropy(params: &BetaActionParams) -> f64 {
    let mut h_total = 0.0;
    for i in 0..params.dims() {
        let (a, b) = (params.alpha[i], params.beta[i]);
        h_total += lbeta(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * digamma(a + b)
            + (2.0 * params.bound[i]).ln();
    }
    h_total
}

/// Deterministic deployment action: the rescaled distribution mean.
pub fn beta_mean_action(params: &BetaActionParams) -> Vec<f64> {
    (0..params.dims())
        .map(|i| {
            let m = params.alpha[i] / (params.alpha[i] + params.beta[i]);
            m * 2.0 * params.bound[i] - params.bound[i]
        })
        .collect()
}

/// Closed-form variance of the rescaled Beta per dimension:
/// 4 h^2 ab / ((a+b)^2 (a+b+1)).
pub fn beta_variance_scaled(params: &BetaActionParams) -> Vec<f64> {
    (0..params.dims())
        .map(|i| {
            let (a, b) = (params.alpha[i], params.beta[i]);
            let s = a + b;
            4.0 * params.bound[i] * params.bound[i] * a * b / (s * s * (s + 1.0))
        })
        .collect()
}

/// Softmax probabilities of a logit vector (host-side).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - mx) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// H(p) = -sum p ln p with 0 ln 0 := 0.
pub fn categorical_entropy(probs: &[f32]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -(p as f64) * (p as f64).ln())
        .sum()
}

/// One-hot sample of softmax(logits) with a straight-through gradient:
/// forward value is the exact one-hot, backward is identity onto p.
/// Graph-level form: onehot + p - detach(p). Returns (st_node, p_node,
/// selected indices), one row per batch entry of `logits` [B, K].
pub fn categorical_sample_st(
    g: &mut Graph,
    logits: Var,
    rng: &mut RngStream,
) -> Result<(Var, Var, Vec<usize>)> {
    let p = g.row_softmax(logits);
    let shape = g.shape(p).to_vec();
    let k = *shape.last().unwrap();
    let rows = g.value(p).len() / k;
    let mut onehot = vec![0.0f32; rows * k];
    let mut picked = Vec::with_capacity(rows);
    {
        let pv = g.value(p);
        for r in 0..rows {
            let idx = rng.categorical(&pv[r * k..(r + 1) * k]);
            onehot[r * k + idx] = 1.0;
            picked.push(idx);
        }
    }
    let oh = g.constant(Tensor { shape, data: onehot });
    let pd = g.detach(p);
    let diff = g.sub(p, pd)?;
    let st = g.add(oh, diff)?;
    Ok((st, p, picked))
}

/// One-hot straight-through node for an externally chosen index per row
/// (argmax selection at deployment, ties toward the lowest index).
pub fn onehot_st(g: &mut Graph, p: Var, picked: &[usize]) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let k = *shape.last().unwrap();
    let mut onehot = vec![0.0f32; g.value(p).len()];
    for (r, &idx) in picked.iter().enumerate() {
        onehot[r * k + idx] = 1.0;
    }
    let oh = g.constant(Tensor { shape, data: onehot });
    let pd = g.detach(p);
    let diff = g.sub(p, pd)?;
    g.add(oh, diff)
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// z = mean + exp(0.5 * clamp(logvar)) .* eps, with eps drawn host-side.
/// Gradient flows through mean and logvar (pathwise).
pub fn gaussian_reparameterize(
    g: &mut Graph,
    mean: Var,
    logvar: Var,
    rng: &mut RngStream,
) -> Result<Var> {
    let lv = g.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    let half = g.scale(lv, 0.5);
    let std = g.exp(half);
    let eps_data: Vec<f32> = (0..g.value(mean).len()).map(|_| rng.normal() as f32).collect();
    let eps = g.constant(Tensor { shape: g.shape(mean).to_vec(), data: eps_data });
    let noise = g.mul(std, eps)?;
    g.add(mean, noise)
}

/// Per-row KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(sigma^2 + mu^2 - 1 - ln sigma^2).
pub fn gaussian_kl_unit(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    let lv = g.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    let var = g.exp(lv);
    let mu2 = g.mul(mean, mean)?;
    let s = g.add(var, mu2)?;
    let s = g.sub(s, lv)?;
    let s = g.add_scalar(s, -1.0);
    let row = g.sum_cols(s);
    Ok(g.scale(row, 0.5))
}

/// Host-side diagonal-Gaussian log density (used by the Gaussian baseline).
pub fn gaussian_logprob(mean: &[f64], std: &[f64], x: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let z = (x[i] - mean[i]) / std[i];
        lp += -0.5 * z * z - std[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}

/// Host-side stable softplus on f32 (re-export for output layers).
pub fn softplus_with_offset_f32(x: f32) -> f32 {
    stable_softplus(x) + 1.0 + 1e-6
}
