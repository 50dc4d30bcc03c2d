//! Diagonal-Gaussian algebra on plain `f64` vectors.
//!
//! Every token or patch is represented by a [`DiagGaussian`]. The closed forms
//! here are the reference the tensor losses in [`crate::nn::ops`] are checked
//! against; [`oracle`] holds the independent Monte-Carlo and quadrature
//! estimators that validate the closed forms themselves.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Lower clamp bound for log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
/// Upper clamp bound for log-variance.
pub const LOGVAR_MAX: f64 = 10.0;

/// Gaussian with diagonal covariance, parameterized by mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a Gaussian, clamping `log_var` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        contract!(!mu.is_empty(), "gaussian dimension must be at least 1");
        contract!(
            mu.len() == log_var.len(),
            "mu has length {} but log_var has length {}",
            mu.len(),
            log_var.len()
        );
        contract!(
            mu.iter().chain(&log_var).all(|v| v.is_finite()),
            "gaussian parameters must be finite"
        );
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(Self { mu, log_var })
    }

    /// Standard normal N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    /// Convenience constructor from mean and variance.
    pub fn from_variance(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        contract!(
            var.iter().all(|v| *v > 0.0),
            "variance entries must be strictly positive"
        );
        Self::new(mu, var.into_iter().map(f64::ln).collect())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        const LN_2PI: f64 = 1.837_877_066_409_345_5;
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, l), x)| -0.5 * (LN_2PI + l + (x - m).powi(2) * (-l).exp()))
            .sum()
    }
}

/// Ordered per-position Gaussians for one token or patch sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSequence {
    items: Vec<DiagGaussian>,
}

impl GaussianSequence {
    pub fn new(items: Vec<DiagGaussian>) -> Result<Self> {
        contract!(!items.is_empty(), "gaussian sequence must not be empty");
        let d = items[0].dim();
        contract!(
            items.iter().all(|g| g.dim() == d),
            "all items of a gaussian sequence must share one dimension"
        );
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items[0].dim()
    }

    pub fn items(&self) -> &[DiagGaussian] {
        &self.items
    }

    pub fn get(&self, i: usize) -> Option<&DiagGaussian> {
        self.items.get(i)
    }

    /// Sub-sequence over `range`; `None` when the range is empty or out of bounds.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Option<GaussianSequence> {
        if range.is_empty() || range.end > self.items.len() {
            return None;
        }
        Some(GaussianSequence {
            items: self.items[range].to_vec(),
        })
    }

    pub fn into_items(self) -> Vec<DiagGaussian> {
        self.items
    }
}

fn check_pair(p: &DiagGaussian, q: &DiagGaussian) -> Result<()> {
    contract!(
        p.dim() == q.dim(),
        "dimension mismatch: {} vs {}",
        p.dim(),
        q.dim()
    );
    Ok(())
}

/// KL(p ‖ q) in closed form, evaluated in log-variance space.
pub fn kl_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for k in 0..p.dim() {
        let (lp, lq) = (p.log_var[k], q.log_var[k]);
        let dm = p.mu[k] - q.mu[k];
        acc += lq - lp + (lp - lq).exp() + dm * dm * (-lq).exp() - 1.0;
    }
    // Rounding can leave a -1e-17 residue for identical inputs.
    Ok((0.5 * acc).max(0.0))
}

/// 2-Wasserstein distance (unsquared) between diagonal Gaussians.
pub fn w2_diag(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok(w2_squared(p, q)?.sqrt())
}

/// Squared 2-Wasserstein distance; additive across dimensions.
pub fn w2_squared(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    check_pair(p, q)?;
    let sp = p.std_dev();
    let sq = q.std_dev();
    Ok((0..p.dim())
        .map(|k| (p.mu[k] - q.mu[k]).powi(2) + (sp[k] - sq[k]).powi(2))
        .sum())
}

/// Partial derivatives of a divergence with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradient {
    pub mu_p: Vec<f64>,
    pub log_var_p: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub log_var_q: Vec<f64>,
}

/// Analytic gradient of [`kl_diag`].
pub fn kl_diag_grad(p: &DiagGaussian, q: &DiagGaussian) -> Result<PairGradient> {
    check_pair(p, q)?;
    let d = p.dim();
    let mut g = PairGradient {
        mu_p: vec![0.0; d],
        log_var_p: vec![0.0; d],
        mu_q: vec![0.0; d],
        log_var_q: vec![0.0; d],
    };
    for k in 0..d {
        let (lp, lq) = (p.log_var[k], q.log_var[k]);
        let dm = p.mu[k] - q.mu[k];
        let inv_vq = (-lq).exp();
        let ratio = (lp - lq).exp();
        g.mu_p[k] = dm * inv_vq;
        g.mu_q[k] = -dm * inv_vq;
        g.log_var_p[k] = 0.5 * (ratio - 1.0);
        g.log_var_q[k] = 0.5 * (1.0 - ratio - dm * dm * inv_vq);
    }
    Ok(g)
}

/// Analytic gradient of [`w2_diag`]. Undefined (returns a contract error) at
/// distance zero, where the function is not differentiable.
pub fn w2_diag_grad(p: &DiagGaussian, q: &DiagGaussian) -> Result<PairGradient> {
    let w = w2_diag(p, q)?;
    contract!(w > 0.0, "w2 gradient is undefined for identical gaussians");
    let sp = p.std_dev();
    let sq = q.std_dev();
    let d = p.dim();
    let mut g = PairGradient {
        mu_p: vec![0.0; d],
        log_var_p: vec![0.0; d],
        mu_q: vec![0.0; d],
        log_var_q: vec![0.0; d],
    };
    for k in 0..d {
        let dm = p.mu[k] - q.mu[k];
        let ds = sp[k] - sq[k];
        g.mu_p[k] = dm / w;
        g.mu_q[k] = -dm / w;
        g.log_var_p[k] = 0.5 * ds * sp[k] / w;
        g.log_var_q[k] = -0.5 * ds * sq[k] / w;
    }
    Ok(g)
}

/// Reparameterized draw `mu + sigma * noise`.
pub fn sample(p: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    contract!(
        noise.len() == p.dim(),
        "noise has length {} but gaussian has dimension {}",
        noise.len(),
        p.dim()
    );
    Ok(p
        .mu
        .iter()
        .zip(&p.log_var)
        .zip(noise)
        .map(|((m, l), z)| m + (0.5 * l).exp() * z)
        .collect())
}

/// Moment-matched pool of a sequence treated as a uniform mixture.
pub fn pool_sequence(s: &GaussianSequence) -> Result<DiagGaussian> {
    pool_items(s.items())
}

pub(crate) fn pool_items(items: &[DiagGaussian]) -> Result<DiagGaussian> {
    contract!(!items.is_empty(), "cannot pool an empty sequence");
    if items.len() == 1 {
        return Ok(items[0].clone());
    }
    let d = items[0].dim();
    let n = items.len() as f64;
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d];
    for g in items {
        contract!(g.dim() == d, "pooled items must share one dimension");
        for k in 0..d {
            mean[k] += g.mu[k];
            second[k] += g.log_var[k].exp() + g.mu[k] * g.mu[k];
        }
    }
    let floor = LOGVAR_MIN.exp();
    let mut log_var = vec![0.0; d];
    for k in 0..d {
        mean[k] /= n;
        let var = (second[k] / n - mean[k] * mean[k]).max(floor);
        log_var[k] = var.ln();
    }
    // Identical items pool to themselves exactly, not up to rounding.
    if items.iter().all(|g| g == &items[0]) {
        return Ok(items[0].clone());
    }
    DiagGaussian::new(mean, log_var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mu: f64, var: f64) -> DiagGaussian {
        DiagGaussian::from_variance(vec![mu], vec![var]).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap(), 0.0);
        assert!((kl_diag(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let expected = 0.5 * ((0.25f64).ln() + 4.0 - 1.0);
        assert!((kl_diag(&g1(0.0, 4.0), &g1(0.0, 1.0)).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn w2_examples() {
        let p = DiagGaussian::new(vec![0.3, -1.2], vec![0.5, -0.7]).unwrap();
        assert_eq!(w2_diag(&p, &p).unwrap(), 0.0);
        assert!((w2_diag(&g1(0.0, 1.0), &g1(3.0, 1.0)).unwrap() - 3.0).abs() < 1e-12);
        assert!((w2_diag(&g1(0.0, 1.0), &g1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_and_non_finite_rejected() {
        let a = DiagGaussian::standard(2).unwrap();
        let b = DiagGaussian::standard(3).unwrap();
        assert!(kl_diag(&a, &b).is_err());
        assert!(w2_diag(&a, &b).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(DiagGaussian::new(vec![], vec![]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![0.0]).is_err());
    }

    #[test]
    fn log_var_is_clamped() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![-50.0, 1e6]).unwrap();
        assert_eq!(g.log_var(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn sample_examples() {
        let p = DiagGaussian::new(vec![1.5, -2.0], vec![0.3, 1.1]).unwrap();
        assert_eq!(sample(&p, &[0.0, 0.0]).unwrap(), p.mu().to_vec());
        assert_eq!(sample(&g1(0.0, 1.0), &[2.0]).unwrap(), vec![2.0]);
        assert!(sample(&p, &[1.0]).is_err());
    }

    #[test]
    fn pool_examples() {
        let single = GaussianSequence::new(vec![g1(0.7, 2.5)]).unwrap();
        assert_eq!(pool_sequence(&single).unwrap(), g1(0.7, 2.5));

        let pair = GaussianSequence::new(vec![g1(-1.0, 1.0), g1(1.0, 1.0)]).unwrap();
        let pooled = pool_sequence(&pair).unwrap();
        assert!(pooled.mu()[0].abs() < 1e-15);
        assert!((pooled.variance()[0] - 2.0).abs() < 1e-12);

        let p = DiagGaussian::new(vec![0.1, 0.2, 0.3], vec![0.4, -0.5, 0.6]).unwrap();
        let same = GaussianSequence::new(vec![p.clone(); 7]).unwrap();
        assert_eq!(pool_sequence(&same).unwrap(), p);
    }

    #[test]
    fn pool_variance_is_floored() {
        let g = DiagGaussian::new(vec![2.0], vec![LOGVAR_MIN]).unwrap();
        let h = DiagGaussian::new(vec![2.0 + 1e-12], vec![LOGVAR_MIN]).unwrap();
        let pooled = pool_items(&[g, h]).unwrap();
        assert!(pooled.log_var()[0] >= LOGVAR_MIN);
    }

    #[test]
    fn sequence_rejects_empty_and_mixed_dims() {
        assert!(GaussianSequence::new(vec![]).is_err());
        let a = DiagGaussian::standard(2).unwrap();
        let b = DiagGaussian::standard(3).unwrap();
        assert!(GaussianSequence::new(vec![a, b]).is_err());
    }

    #[test]
    fn w2_grad_undefined_at_identity() {
        let p = g1(0.0, 1.0);
        assert!(w2_diag_grad(&p, &p).is_err());
    }
}
