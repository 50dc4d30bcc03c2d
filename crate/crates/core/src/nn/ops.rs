//! Differentiable tensor counterparts of the closed forms in [`crate::prob`].
//!
//! All functions reduce over the last (feature) dimension.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::prob::{LOGVAR_MAX, LOGVAR_MIN};

/// Smooths the gradient of `sqrt` at zero; the forward value is exact.
const W2_EPS: f64 = 1e-12;

/// Batched Gaussians: `mu` and `log_var` share a shape `(.., d)`.
#[derive(Debug, Clone)]
pub struct GaussTensor {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussTensor {
    pub fn new(mu: Tensor, raw_log_var: &Tensor) -> Result<Self> {
        Ok(Self {
            mu,
            log_var: raw_log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            mu: self.mu.detach(),
            log_var: self.log_var.detach(),
        }
    }
}

/// KL(p ‖ q) summed over the last dimension.
pub fn kl(p: &GaussTensor, q: &GaussTensor) -> Result<Tensor> {
    let dlv = (&p.log_var - &q.log_var)?;
    let dm2 = (&p.mu - &q.mu)?.sqr()?;
    let terms = ((dlv.exp()? - &dlv)? + (dm2 * q.log_var.neg()?.exp()?)?)?;
    Ok(((terms - 1.0)?.sum(D::Minus1)? * 0.5)?)
}

/// Unsquared 2-Wasserstein distance reduced over the last dimension.
pub fn w2(p: &GaussTensor, q: &GaussTensor) -> Result<Tensor> {
    let dm2 = (&p.mu - &q.mu)?.sqr()?;
    let sp = (&p.log_var * 0.5)?.exp()?;
    let sq = (&q.log_var * 0.5)?.exp()?;
    let ds2 = (sp - sq)?.sqr()?;
    let s = (dm2 + ds2)?.sum(D::Minus1)?;
    let smooth = (&s + W2_EPS)?.sqrt()?;
    let correction = (&smooth - s.sqrt()?)?.detach();
    Ok((smooth - correction)?)
}

/// Reparameterized sample `mu + exp(log_var / 2) * noise`.
pub fn reparameterize(p: &GaussTensor, noise: &Tensor) -> Result<Tensor> {
    Ok((&p.mu + ((&p.log_var * 0.5)?.exp()? * noise)?)?)
}

/// Moment-matched pool over positions.
///
/// `g` is (B, L, d); `weights` is (B, L) with 1 for valid positions and 0 for
/// padding. Returns (B, d).
pub fn pool(g: &GaussTensor, weights: &Tensor) -> Result<GaussTensor> {
    let w = weights.unsqueeze(2)?;
    let count = weights.sum_keepdim(1)?;
    let mean = g.mu.broadcast_mul(&w)?.sum(1)?.broadcast_div(&count)?;
    let second = (g.log_var.exp()? + g.mu.sqr()?)?
        .broadcast_mul(&w)?
        .sum(1)?
        .broadcast_div(&count)?;
    let var = (second - mean.sqr()?)?.maximum(LOGVAR_MIN.exp())?;
    Ok(GaussTensor {
        mu: mean,
        log_var: var.log()?.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
    })
}
