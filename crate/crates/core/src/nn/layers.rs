use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamGroup, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored as (in, out) so the forward pass is a plain matmul.
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        weight_std: f64,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.create(
            &format!("{prefix}.weight"),
            &[in_dim, out_dim],
            Init::Normal(weight_std),
            group,
            true,
            rng,
        )?;
        let bias = store.create(
            &format!("{prefix}.bias"),
            &[out_dim],
            Init::Zeros,
            group,
            false,
            rng,
        )?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gain = store.create(
            &format!("{prefix}.gain"),
            &[dim],
            Init::Ones,
            group,
            false,
            rng,
        )?;
        let bias = store.create(
            &format!("{prefix}.bias"),
            &[dim],
            Init::Zeros,
            group,
            false,
            rng,
        )?;
        Ok(Self {
            gain,
            bias,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension; the shift is detached since it cancels.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = (d_model as f64).powf(-0.5);
        let g = ParamGroup::Backbone;
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.query"), d_model, d_model, std, g, rng)?,
            key: Linear::new(store, &format!("{prefix}.key"), d_model, d_model, std, g, rng)?,
            value: Linear::new(store, &format!("{prefix}.value"), d_model, d_model, std, g, rng)?,
            out: Linear::new(store, &format!("{prefix}.out"), d_model, d_model, std, g, rng)?,
            n_heads,
        })
    }

    /// `x` is (B, L, d); `key_bias` is (B, 1, 1, L), zero for valid keys and a
    /// large negative value for padding.
    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let dh = d / self.n_heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.n_heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_mlp: LayerNorm,
    fc_in: Linear,
    fc_out: Linear,
}

impl Block {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let hidden = 4 * d_model;
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{prefix}.norm_attn"), d_model, g, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), d_model, n_heads, rng)?,
            norm_mlp: LayerNorm::new(store, &format!("{prefix}.norm_mlp"), d_model, g, rng)?,
            fc_in: Linear::new(
                store,
                &format!("{prefix}.fc_in"),
                d_model,
                hidden,
                (d_model as f64).powf(-0.5),
                g,
                rng,
            )?,
            fc_out: Linear::new(
                store,
                &format!("{prefix}.fc_out"),
                hidden,
                d_model,
                (hidden as f64).powf(-0.5),
                g,
                rng,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm_attn.forward(x)?, key_bias)?)?;
        let h = self.fc_in.forward(&self.norm_mlp.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc_out.forward(&h)?)?)
    }
}
