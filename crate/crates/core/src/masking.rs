//! Mask planning: fixed-ratio text masking and appearance-guided image masking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextInput;
use crate::error::{contract, Error, Result};
use crate::prob::GaussianSequence;

/// Default softmax temperature for saliency-weighted patch sampling.
pub const DEFAULT_TAU: f64 = 0.1;
/// Bounds on the adaptive image masking ratio.
pub const IMAGE_RATIO_MIN: f64 = 0.1;
pub const IMAGE_RATIO_MAX: f64 = 0.6;

/// Positions hidden from the student for one sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskPlan {
    pub text_indices: Vec<usize>,
    pub image_indices: Vec<usize>,
    pub image_ratio_used: f64,
    /// Set when saliency fell back to uniform because the appearance span was empty.
    pub saliency_fallback: bool,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.text_indices.is_empty() && self.image_indices.is_empty()
    }

    /// Combines a text plan and an image plan for the same sample.
    pub fn merge(text: MaskPlan, image: MaskPlan) -> MaskPlan {
        MaskPlan {
            text_indices: text.text_indices,
            image_indices: image.image_indices,
            image_ratio_used: image.image_ratio_used,
            saliency_fallback: image.saliency_fallback,
        }
    }
}

/// Round half up. The slack absorbs representation error in products such
/// as `0.3 * 15`, which must round to 5.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Number of masked items for `n` candidates: round-half-up, floored at one.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    round_half_up(ratio * n as f64).clamp(1, n)
}

/// Uniformly masks `mask_count(ratio, n_maskable)` non-special tokens.
pub fn plan_text_mask(t: &TextInput, ratio: f64, rng_seed: u64) -> Result<MaskPlan> {
    contract!(
        ratio > 0.0 && ratio <= 1.0,
        "text mask ratio {ratio} outside (0, 1]"
    );
    let maskable = t.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::Degenerate("text has no maskable tokens".into()));
    }
    let k = mask_count(ratio, maskable.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, maskable.len(), k)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    chosen.sort_unstable();
    Ok(MaskPlan {
        text_indices: chosen,
        ..MaskPlan::default()
    })
}

/// Per-patch saliency plus whether the uniform fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct Saliency {
    pub values: Vec<f64>,
    pub fallback: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// For each patch, the best cosine match of its mean against any appearance token mean.
pub fn appearance_saliency(
    image_seq: &GaussianSequence,
    appearance_seq: Option<&GaussianSequence>,
) -> Result<Saliency> {
    let p = image_seq.len();
    let Some(app) = appearance_seq.filter(|s| !s.is_empty()) else {
        return Ok(Saliency {
            values: vec![0.0; p],
            fallback: true,
        });
    };
    contract!(
        app.dim() == image_seq.dim(),
        "appearance dimension {} differs from image dimension {}",
        app.dim(),
        image_seq.dim()
    );
    let values = image_seq
        .items()
        .iter()
        .map(|patch| {
            app.items()
                .iter()
                .map(|tok| cosine(patch.mu(), tok.mu()))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(Saliency {
        values,
        fallback: false,
    })
}

/// Effective image ratio: base scaled by the mean of the top quartile of saliency.
pub fn adaptive_ratio(saliency: &[f64], base_ratio: f64) -> f64 {
    let mut sorted = saliency.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let q = saliency.len().div_ceil(4).max(1);
    let top_mean = sorted[..q].iter().sum::<f64>() / q as f64;
    (base_ratio * (1.0 + top_mean)).clamp(IMAGE_RATIO_MIN, IMAGE_RATIO_MAX)
}

/// Samples patches without replacement, weighted by softmax(saliency / tau).
pub fn plan_image_mask(saliency: &[f64], base_ratio: f64, tau: f64, rng_seed: u64) -> Result<MaskPlan> {
    let p = saliency.len();
    contract!(p > 0, "cannot plan an image mask over zero patches");
    contract!(
        base_ratio > 0.0 && base_ratio < 1.0,
        "image base ratio {base_ratio} outside (0, 1)"
    );
    contract!(tau > 0.0, "temperature must be positive");
    contract!(
        saliency.iter().all(|s| s.is_finite()),
        "saliency must be finite"
    );
    let ratio = adaptive_ratio(saliency, base_ratio);
    let k = round_half_up(ratio * p as f64).min(p);
    let max = saliency.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = saliency.iter().map(|s| ((s - max) / tau).exp()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen: Vec<usize> = index::sample_weighted(&mut rng, p, |i| weights[i], k)
        .map_err(|e| Error::Contract(format!("weighted sampling failed: {e}")))?
        .into_iter()
        .collect();
    chosen.sort_unstable();
    Ok(MaskPlan {
        image_indices: chosen,
        image_ratio_used: ratio,
        ..MaskPlan::default()
    })
}
