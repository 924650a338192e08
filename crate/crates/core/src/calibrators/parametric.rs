//! The four log-likelihood-ratio calibration families and their fitting.
//!
//! Each family evaluates a log-likelihood ratio `lr(s)`; the calibrated
//! confidence is `sigmoid(lr(s))`. Fitting minimizes the mean binary negative
//! log-likelihood over an unconstrained parameter vector `theta`. Parameters
//! that must stay positive are stored as `floor + exp(theta)`.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::optimizer::Objective;

/// Lower bound of every positivity-constrained parameter.
pub const POSITIVE_FLOOR: f64 = 1e-8;

fn positive(theta: f64) -> f64 {
    POSITIVE_FLOOR + theta.exp()
}

fn unconstrain(value: f64) -> f64 {
    (value - POSITIVE_FLOOR).max(f64::MIN_POSITIVE).ln()
}

/// Numerically stable `ln(1 + e^z)`.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Common interface of the parametric maps.
pub(crate) trait ParametricMap: Sized {
    /// Input dimension `K`.
    fn dim(&self) -> usize;

    fn param_count(&self) -> usize;

    fn loglik_ratio(&self, s: &[f64]) -> f64;

    fn to_theta(&self) -> Vec<f64>;

    fn from_theta(k: usize, theta: &[f64]) -> Self;

    fn theta_len(k: usize) -> usize;

    /// Adds `scale * d lr(s) / d theta` to `out`.
    fn accumulate_gradient(&self, s: &[f64], scale: f64, out: &mut [f64]);

    /// Parameters whose map returns the input confidence unchanged.
    fn identity(k: usize) -> Self;

    fn validate(&self, k: usize) -> Result<()>;
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Schema(format!("{what} has {got} entries, expected {want}")))
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Schema(format!("{what} contains non-finite values")))
    }
}

/// `lr(s) = s . w + c`, with the confidence entered as a logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticIndepParams {
    pub w: Vec<f64>,
    pub c: f64,
}

impl ParametricMap for LogisticIndepParams {
    fn dim(&self) -> usize {
        self.w.len()
    }

    fn param_count(&self) -> usize {
        self.w.len() + 1
    }

    fn loglik_ratio(&self, s: &[f64]) -> f64 {
        self.w.iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + self.c
    }

    fn to_theta(&self) -> Vec<f64> {
        let mut t = self.w.clone();
        t.push(self.c);
        t
    }

    fn from_theta(k: usize, theta: &[f64]) -> Self {
        LogisticIndepParams {
            w: theta[..k].to_vec(),
            c: theta[k],
        }
    }

    fn theta_len(k: usize) -> usize {
        k + 1
    }

    fn accumulate_gradient(&self, s: &[f64], scale: f64, out: &mut [f64]) {
        let k = self.w.len();
        for i in 0..k {
            out[i] += scale * s[i];
        }
        out[k] += scale;
    }

    fn identity(k: usize) -> Self {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        LogisticIndepParams { w, c: 0.0 }
    }

    fn validate(&self, k: usize) -> Result<()> {
        check_len("w", self.w.len(), k)?;
        check_finite("logistic parameters", &self.to_theta())
    }
}

/// `lr(s) = c + sum_k a_k ln(s_k) - b_k ln(1 - s_k)` with `a_1, b_1 > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaIndepParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl ParametricMap for BetaIndepParams {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn param_count(&self) -> usize {
        2 * self.a.len() + 1
    }

    fn loglik_ratio(&self, s: &[f64]) -> f64 {
        let mut lr = self.c;
        for k in 0..self.a.len() {
            lr += self.a[k] * s[k].ln() - self.b[k] * (-s[k]).ln_1p();
        }
        lr
    }

    // theta = [ln a_1, a_2.., ln b_1, b_2.., c]
    fn to_theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.param_count());
        t.push(unconstrain(self.a[0]));
        t.extend_from_slice(&self.a[1..]);
        t.push(unconstrain(self.b[0]));
        t.extend_from_slice(&self.b[1..]);
        t.push(self.c);
        t
    }

    fn from_theta(k: usize, theta: &[f64]) -> Self {
        let mut a = theta[..k].to_vec();
        let mut b = theta[k..2 * k].to_vec();
        a[0] = positive(a[0]);
        b[0] = positive(b[0]);
        BetaIndepParams { a, b, c: theta[2 * k] }
    }

    fn theta_len(k: usize) -> usize {
        2 * k + 1
    }

    fn accumulate_gradient(&self, s: &[f64], scale: f64, out: &mut [f64]) {
        let k = self.a.len();
        for i in 0..k {
            let ln_s = s[i].ln();
            let ln_1ms = (-s[i]).ln_1p();
            let (da, db) = if i == 0 {
                (self.a[0] - POSITIVE_FLOOR, self.b[0] - POSITIVE_FLOOR)
            } else {
                (1.0, 1.0)
            };
            out[i] += scale * da * ln_s;
            out[k + i] -= scale * db * ln_1ms;
        }
        out[2 * k] += scale;
    }

    fn identity(k: usize) -> Self {
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        a[0] = 1.0;
        b[0] = 1.0;
        BetaIndepParams { a, b, c: 0.0 }
    }

    fn validate(&self, k: usize) -> Result<()> {
        check_len("a", self.a.len(), k)?;
        check_len("b", self.b.len(), k)?;
        check_finite("beta parameters", &[&self.a[..], &self.b[..], &[self.c]].concat())?;
        if self.a[0] <= 0.0 || self.b[0] <= 0.0 {
            return Err(Error::Schema("confidence parameters a_1, b_1 must be positive".into()));
        }
        Ok(())
    }
}

/// Difference of two Gaussian log densities:
/// `lr(s) = 1/2 [ (s-mu-)' S-^-1 (s-mu-) - (s-mu+)' S+^-1 (s-mu+) ] + c`
/// with `S^-1 = V V'` for a free `K x K` matrix `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticDepParams {
    pub mu_pos: Vec<f64>,
    pub mu_neg: Vec<f64>,
    /// Row-major `K x K`.
    pub vinv_pos: Vec<Vec<f64>>,
    pub vinv_neg: Vec<Vec<f64>>,
    pub c: f64,
}

impl LogisticDepParams {
    /// `u = V' (s - mu)`.
    fn project(v: &[Vec<f64>], mu: &[f64], s: &[f64], d: &mut [f64], u: &mut [f64]) {
        let k = mu.len();
        for i in 0..k {
            d[i] = s[i] - mu[i];
        }
        for j in 0..k {
            u[j] = (0..k).map(|i| v[i][j] * d[i]).sum();
        }
    }

    /// Embeds a linear map `s . w + c` (any `K`).
    pub fn from_linear(w: &[f64], c: f64) -> Self {
        let k = w.len();
        LogisticDepParams {
            mu_pos: w.iter().map(|x| 0.5 * x).collect(),
            mu_neg: w.iter().map(|x| -0.5 * x).collect(),
            vinv_pos: identity_matrix(k),
            vinv_neg: identity_matrix(k),
            c,
        }
    }

    /// Maps parameters fitted on `(s - mean) / scale` back to raw features.
    pub(crate) fn unstandardize(mut self, mean: &[f64], scale: &[f64]) -> Self {
        for mu in [&mut self.mu_pos, &mut self.mu_neg] {
            for ((x, m), sd) in mu.iter_mut().zip(mean).zip(scale) {
                *x = m + sd * *x;
            }
        }
        for v in [&mut self.vinv_pos, &mut self.vinv_neg] {
            for (row, sd) in v.iter_mut().zip(scale) {
                for x in row.iter_mut() {
                    *x /= sd;
                }
            }
        }
        self
    }

    /// Class-conditional means, identity matrices and the log prior ratio.
    pub fn from_moments(features: &[Vec<f64>], labels: &[bool]) -> Self {
        let k = features[0].len();
        let mut sums = [vec![0.0; k], vec![0.0; k]];
        let mut counts = [0usize; 2];
        for (s, &m) in features.iter().zip(labels) {
            let c = usize::from(m);
            counts[c] += 1;
            for i in 0..k {
                sums[c][i] += s[i];
            }
        }
        let mean = |c: usize| -> Vec<f64> { sums[c].iter().map(|v| v / counts[c].max(1) as f64).collect() };
        LogisticDepParams {
            mu_pos: mean(1),
            mu_neg: mean(0),
            vinv_pos: identity_matrix(k),
            vinv_neg: identity_matrix(k),
            c: (counts[1].max(1) as f64 / counts[0].max(1) as f64).ln(),
        }
    }
}

fn identity_matrix(k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

impl ParametricMap for LogisticDepParams {
    fn dim(&self) -> usize {
        self.mu_pos.len()
    }

    fn param_count(&self) -> usize {
        let k = self.dim();
        2 * (k * k + k) + 1
    }

    fn loglik_ratio(&self, s: &[f64]) -> f64 {
        let k = self.dim();
        let mut d = vec![0.0; k];
        let mut u = vec![0.0; k];
        Self::project(&self.vinv_neg, &self.mu_neg, s, &mut d, &mut u);
        let q_neg: f64 = u.iter().map(|x| x * x).sum();
        Self::project(&self.vinv_pos, &self.mu_pos, s, &mut d, &mut u);
        let q_pos: f64 = u.iter().map(|x| x * x).sum();
        0.5 * (q_neg - q_pos) + self.c
    }

    // theta = [mu+, mu-, V+ (row-major), V- (row-major), c]
    fn to_theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.param_count());
        t.extend_from_slice(&self.mu_pos);
        t.extend_from_slice(&self.mu_neg);
        self.vinv_pos.iter().for_each(|r| t.extend_from_slice(r));
        self.vinv_neg.iter().for_each(|r| t.extend_from_slice(r));
        t.push(self.c);
        t
    }

    fn from_theta(k: usize, theta: &[f64]) -> Self {
        let mat = |off: usize| -> Vec<Vec<f64>> {
            (0..k).map(|i| theta[off + i * k..off + (i + 1) * k].to_vec()).collect()
        };
        LogisticDepParams {
            mu_pos: theta[..k].to_vec(),
            mu_neg: theta[k..2 * k].to_vec(),
            vinv_pos: mat(2 * k),
            vinv_neg: mat(2 * k + k * k),
            c: theta[2 * k + 2 * k * k],
        }
    }

    fn theta_len(k: usize) -> usize {
        2 * (k * k + k) + 1
    }

    fn accumulate_gradient(&self, s: &[f64], scale: f64, out: &mut [f64]) {
        let k = self.dim();
        let mut d = vec![0.0; k];
        let mut u = vec![0.0; k];
        // d q / d V_ij = 2 u_j d_i,  d q / d mu_i = -2 sum_j V_ij u_j
        for (sign, v, mu, mu_off, v_off) in [
            (-1.0, &self.vinv_pos, &self.mu_pos, 0, 2 * k),
            (1.0, &self.vinv_neg, &self.mu_neg, k, 2 * k + k * k),
        ] {
            Self::project(v, mu, s, &mut d, &mut u);
            for i in 0..k {
                let mut vu = 0.0;
                for j in 0..k {
                    vu += v[i][j] * u[j];
                    out[v_off + i * k + j] += scale * sign * u[j] * d[i];
                }
                out[mu_off + i] -= scale * sign * vu;
            }
        }
        out[2 * k + 2 * k * k] += scale;
    }

    fn identity(k: usize) -> Self {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        LogisticDepParams::from_linear(&w, 0.0)
    }

    fn validate(&self, k: usize) -> Result<()> {
        check_len("mu_pos", self.mu_pos.len(), k)?;
        check_len("mu_neg", self.mu_neg.len(), k)?;
        for m in [&self.vinv_pos, &self.vinv_neg] {
            check_len("vinv rows", m.len(), k)?;
            for r in m {
                check_len("vinv row", r.len(), k)?;
            }
        }
        check_finite("dependent logistic parameters", &self.to_theta())
    }
}

/// Generalized (Libby-Novick) beta log-likelihood ratio. Shape vectors have
/// `K + 1` entries; index 0 is the shared component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaDepParams {
    pub alpha_pos: Vec<f64>,
    pub beta_pos: Vec<f64>,
    pub alpha_neg: Vec<f64>,
    pub beta_neg: Vec<f64>,
    pub c: f64,
}

/// `ln B(a_0, ..., a_K) = sum ln Gamma(a_k) - ln Gamma(sum a_k)`.
pub fn ln_multivariate_beta(alpha: &[f64]) -> f64 {
    alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(alpha.iter().sum())
}

/// One class's share of the log-likelihood ratio without the normalizer:
/// `sum_k alpha_k (ln lambda_k + ln s*_k) - A ln(1 + sum_k lambda_k s*_k)`.
fn beta_dep_term(alpha: &[f64], beta: &[f64], ln_odds: &[f64], odds: &[f64]) -> f64 {
    let k = ln_odds.len();
    let total: f64 = alpha.iter().sum();
    let mut sum = 0.0;
    let mut acc = 0.0;
    for i in 1..=k {
        let lambda = beta[i] / beta[0];
        acc += alpha[i] * (lambda.ln() + ln_odds[i - 1]);
        sum += lambda * odds[i - 1];
    }
    acc - total * sum.ln_1p()
}

impl BetaDepParams {
    /// The bias that makes `lr` the exact log ratio of the two normalized
    /// densities: `ln B(alpha-) - ln B(alpha+)`.
    pub fn density_bias(&self) -> f64 {
        ln_multivariate_beta(&self.alpha_neg) - ln_multivariate_beta(&self.alpha_pos)
    }

    fn odds(s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ln_odds: Vec<f64> = s.iter().map(|&x| x.ln() - (-x).ln_1p()).collect();
        let odds = s.iter().map(|&x| x / (1.0 - x)).collect();
        (ln_odds, odds)
    }

    fn add_class_gradient(
        alpha: &[f64],
        beta: &[f64],
        ln_odds: &[f64],
        odds: &[f64],
        scale: f64,
        alpha_off: usize,
        beta_off: usize,
        out: &mut [f64],
    ) {
        let k = ln_odds.len();
        let total: f64 = alpha.iter().sum();
        let b0 = beta[0];
        let sum: f64 = (1..=k).map(|i| beta[i] / b0 * odds[i - 1]).sum();
        let log1p_sum = sum.ln_1p();
        let jac = |v: f64| v - POSITIVE_FLOOR;

        out[alpha_off] += scale * jac(alpha[0]) * -log1p_sum;
        let mut d_beta0 = total * sum / (b0 * (1.0 + sum));
        for i in 1..=k {
            let ln_lambda = (beta[i] / b0).ln();
            out[alpha_off + i] += scale * jac(alpha[i]) * (ln_lambda + ln_odds[i - 1] - log1p_sum);
            let d_beta = alpha[i] / beta[i] - total * odds[i - 1] / (b0 * (1.0 + sum));
            out[beta_off + i] += scale * jac(beta[i]) * d_beta;
            d_beta0 -= alpha[i] / b0;
        }
        out[beta_off] += scale * jac(b0) * d_beta0;
    }
}

impl ParametricMap for BetaDepParams {
    fn dim(&self) -> usize {
        self.alpha_pos.len() - 1
    }

    fn param_count(&self) -> usize {
        4 * (self.dim() + 1) + 1
    }

    fn loglik_ratio(&self, s: &[f64]) -> f64 {
        let (ln_odds, odds) = Self::odds(s);
        beta_dep_term(&self.alpha_pos, &self.beta_pos, &ln_odds, &odds)
            - beta_dep_term(&self.alpha_neg, &self.beta_neg, &ln_odds, &odds)
            + self.c
    }

    // theta = [ln alpha+, ln beta+, ln alpha-, ln beta-, c], K + 1 each
    fn to_theta(&self) -> Vec<f64> {
        let mut t: Vec<f64> = [&self.alpha_pos, &self.beta_pos, &self.alpha_neg, &self.beta_neg]
            .iter()
            .flat_map(|v| v.iter().map(|&x| unconstrain(x)))
            .collect();
        t.push(self.c);
        t
    }

    fn from_theta(k: usize, theta: &[f64]) -> Self {
        let n = k + 1;
        let block = |i: usize| -> Vec<f64> { theta[i * n..(i + 1) * n].iter().map(|&t| positive(t)).collect() };
        BetaDepParams {
            alpha_pos: block(0),
            beta_pos: block(1),
            alpha_neg: block(2),
            beta_neg: block(3),
            c: theta[4 * n],
        }
    }

    fn theta_len(k: usize) -> usize {
        4 * (k + 1) + 1
    }

    fn accumulate_gradient(&self, s: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.dim() + 1;
        let (ln_odds, odds) = Self::odds(s);
        Self::add_class_gradient(&self.alpha_pos, &self.beta_pos, &ln_odds, &odds, scale, 0, n, out);
        Self::add_class_gradient(&self.alpha_neg, &self.beta_neg, &ln_odds, &odds, -scale, 2 * n, 3 * n, out);
        out[4 * n] += scale;
    }

    fn identity(k: usize) -> Self {
        // alpha+_1 - alpha-_1 = 1 and equal shape totals reduce lr to logit(s_1)
        let mut alpha_pos = vec![1.0; k + 1];
        let mut alpha_neg = vec![1.0; k + 1];
        alpha_pos[1] = 2.0;
        alpha_neg[0] = 2.0;
        BetaDepParams {
            alpha_pos,
            beta_pos: vec![1.0; k + 1],
            alpha_neg,
            beta_neg: vec![1.0; k + 1],
            c: 0.0,
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        for (name, v) in [
            ("alpha_pos", &self.alpha_pos),
            ("beta_pos", &self.beta_pos),
            ("alpha_neg", &self.alpha_neg),
            ("beta_neg", &self.beta_neg),
        ] {
            check_len(name, v.len(), k + 1)?;
            if !v.iter().all(|&x| x > 0.0 && x.is_finite()) {
                return Err(Error::Schema(format!("{name} must be positive and finite")));
            }
        }
        check_finite("bias", &[self.c])
    }
}

/// Mean binary negative log-likelihood of `sigmoid(lr(s))` plus an L2 ridge
/// pulling `theta` toward `anchor`.
pub(crate) struct NllObjective<'a, P> {
    pub features: &'a [Vec<f64>],
    pub labels: &'a [bool],
    pub k: usize,
    pub ridge: f64,
    pub anchor: Vec<f64>,
    _map: PhantomData<P>,
}

impl<'a, P: ParametricMap> NllObjective<'a, P> {
    pub fn new(features: &'a [Vec<f64>], labels: &'a [bool], k: usize, ridge: f64, anchor: Vec<f64>) -> Self {
        NllObjective {
            features,
            labels,
            k,
            ridge,
            anchor,
            _map: PhantomData,
        }
    }

    /// The unpenalized mean NLL.
    pub fn nll(&self, theta: &[f64]) -> f64 {
        let p = P::from_theta(self.k, theta);
        mean_nll(&p, self.features, self.labels)
    }
}

pub(crate) fn mean_nll<P: ParametricMap>(p: &P, features: &[Vec<f64>], labels: &[bool]) -> f64 {
    let total: f64 = features
        .iter()
        .zip(labels)
        .map(|(s, &m)| {
            let z = p.loglik_ratio(s);
            softplus(z) - if m { z } else { 0.0 }
        })
        .sum();
    total / features.len() as f64
}

impl<P: ParametricMap> Objective for NllObjective<'_, P> {
    fn dim(&self) -> usize {
        P::theta_len(self.k)
    }

    fn value_and_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let p = P::from_theta(self.k, theta);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv_n = 1.0 / self.features.len() as f64;
        let mut total = 0.0;
        for (s, &m) in self.features.iter().zip(self.labels) {
            let z = p.loglik_ratio(s);
            let y = if m { 1.0 } else { 0.0 };
            total += softplus(z) - y * z;
            p.accumulate_gradient(s, (crate::features::sigmoid(z) - y) * inv_n, grad);
        }
        let mut penalty = 0.0;
        for ((g, t), a) in grad.iter_mut().zip(theta).zip(&self.anchor) {
            let d = t - a;
            penalty += d * d;
            *g += 2.0 * self.ridge * d;
        }
        total * inv_n + self.ridge * penalty
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::logit;

    #[test]
    fn unstandardize_is_exact() {
        let p = LogisticDepParams {
            mu_pos: vec![0.3, -1.0],
            mu_neg: vec![-0.2, 0.5],
            vinv_pos: vec![vec![1.2, 0.1], vec![-0.4, 0.8]],
            vinv_neg: vec![vec![0.7, 0.0], vec![0.3, 1.1]],
            c: 0.25,
        };
        let (mean, scale) = ([0.4, 2.0], [0.1, 3.0]);
        let raw = p.clone().unstandardize(&mean, &scale);
        for s in [[0.5, 1.0], [0.35, -4.0], [0.0, 2.0]] {
            let z = [(s[0] - mean[0]) / scale[0], (s[1] - mean[1]) / scale[1]];
            assert!((raw.loglik_ratio(&s) - p.loglik_ratio(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_maps_return_the_logit() {
        let s_logit = [logit(0.3), 0.2, 0.7];
        let s_prob = [0.3, 0.2, 0.7];
        let want = logit(0.3);
        assert!((LogisticIndepParams::identity(3).loglik_ratio(&s_logit) - want).abs() < 1e-12);
        assert!((LogisticDepParams::identity(3).loglik_ratio(&s_logit) - want).abs() < 1e-12);
        assert!((BetaIndepParams::identity(3).loglik_ratio(&s_prob) - want).abs() < 1e-12);
        assert!((BetaDepParams::identity(3).loglik_ratio(&s_prob) - want).abs() < 1e-12);
    }

    #[test]
    fn beta_indep_symmetric_point() {
        let p = BetaIndepParams {
            a: vec![1.0],
            b: vec![1.0],
            c: 0.0,
        };
        assert_eq!(p.loglik_ratio(&[0.5]), 0.0);
    }

    #[test]
    fn theta_round_trip() {
        let p = BetaDepParams::identity(2);
        let back = BetaDepParams::from_theta(2, &p.to_theta());
        for (a, b) in back.to_theta().iter().zip(p.to_theta()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(p.param_count(), 13);
        assert_eq!(LogisticDepParams::identity(3).param_count(), 25);
        assert_eq!(BetaIndepParams::identity(5).param_count(), 11);
        assert_eq!(LogisticIndepParams::identity(5).param_count(), 6);
    }

    #[test]
    fn equal_classes_cancel() {
        let p = LogisticDepParams {
            mu_pos: vec![0.3, -1.0],
            mu_neg: vec![0.3, -1.0],
            vinv_pos: vec![vec![1.5, 0.2], vec![-0.4, 0.9]],
            vinv_neg: vec![vec![1.5, 0.2], vec![-0.4, 0.9]],
            c: 0.0,
        };
        for s in [[0.0, 0.0], [2.0, -3.0], [-1.0, 0.5]] {
            assert_eq!(p.loglik_ratio(&s), 0.0);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
