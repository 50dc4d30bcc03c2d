//! Independent estimators used only to validate the closed forms.
//!
//! These never call into `kl_diag` / `w2_diag`; they work from densities and
//! quantile functions directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::DiagGaussian;
use crate::error::{contract, Result};

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Estimates E_p[log p(x) - log q(x)] from `n_samples` draws of p.
pub fn mc_kl_oracle(
    p: &DiagGaussian,
    q: &DiagGaussian,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    contract!(p.dim() == q.dim(), "dimension mismatch");
    contract!(n_samples >= 10_000, "mc oracle needs at least 1e4 samples");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = p.std_dev();
    let mut x = vec![0.0; p.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        for k in 0..x.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[k] = p.mu()[k] + sd[k] * z;
        }
        let r = p.log_pdf(&x) - q.log_pdf(&x);
        sum += r;
        sum_sq += r * r;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
    })
}

/// Midpoint quadrature of the 1-D W2 integral over quantile functions.
pub fn quantile_w2_oracle(p: &DiagGaussian, q: &DiagGaussian, n_grid: usize) -> Result<f64> {
    contract!(
        p.dim() == 1 && q.dim() == 1,
        "quantile oracle is one-dimensional"
    );
    contract!(n_grid >= 2, "quantile grid needs at least two points");
    let fp = Normal::new(p.mu()[0], p.std_dev()[0])
        .map_err(|e| crate::Error::Contract(e.to_string()))?;
    let fq = Normal::new(q.mu()[0], q.std_dev()[0])
        .map_err(|e| crate::Error::Contract(e.to_string()))?;
    let h = 1.0 / n_grid as f64;
    let integral: f64 = (0..n_grid)
        .map(|i| {
            let u = (i as f64 + 0.5) * h;
            (fp.inverse_cdf(u) - fq.inverse_cdf(u)).powi(2) * h
        })
        .sum();
    Ok(integral.sqrt())
}
