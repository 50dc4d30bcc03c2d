//! Post-training checks: where appearance saliency lands, and whether the
//! pooled image embeddings still separate classes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::pooled_images;
use crate::encoders::{gaussians_from_tensor, DualEncoder, ImageInput, Section, TextInput};
use crate::error::{contract, Error, Result};
use crate::masking::appearance_saliency;
use crate::prob::w2_diag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub n: usize,
    pub mean_lesion: f64,
    pub mean_background: f64,
    pub mean_diff: f64,
    pub t_stat: f64,
    /// One-sided p-value for mean(lesion - background) > 0.
    pub p_value: f64,
    pub n_fallback: usize,
}

/// Paired one-sided t-test; returns (t, p).
pub fn paired_t_test(diffs: &[f64]) -> Result<(f64, f64)> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Degenerate("paired test needs at least two pairs".into()));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        return Ok((if mean > 0.0 { f64::INFINITY } else { 0.0 }, p));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Contract(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

/// Per-image mean saliency inside vs outside the lesion patches.
pub fn saliency_on_lesions(
    model: &DualEncoder,
    texts: &[&TextInput],
    images: &[&ImageInput],
    lesions: &[&[usize]],
    batch_size: usize,
) -> Result<SaliencyReport> {
    contract!(
        texts.len() == images.len() && texts.len() == lesions.len(),
        "texts, images and lesion sets differ in length"
    );
    let mut diffs = Vec::with_capacity(texts.len());
    let (mut sum_l, mut sum_b, mut fallback) = (0.0, 0.0, 0usize);
    let bs = batch_size.max(1);
    for start in (0..texts.len()).step_by(bs) {
        let end = (start + bs).min(texts.len());
        let tb = model.text_batch(&texts[start..end])?;
        let ib = model.image_batch(&images[start..end])?;
        let tseq = gaussians_from_tensor(&model.text_distribution(&model.text_features(&tb, None)?)?)?;
        let iseq = gaussians_from_tensor(&model.image_distribution(&model.image_features(&ib, None)?)?)?;
        for (k, row) in (start..end).enumerate() {
            let app = texts[row].span(Section::Appearance).and_then(|r| tseq[k].slice(r));
            let s = appearance_saliency(&iseq[k], app.as_ref())?;
            fallback += s.fallback as usize;
            let lesion = lesions[row];
            contract!(
                !lesion.is_empty() && lesion.len() < s.values.len(),
                "lesion set must be a non-empty strict subset of the patches"
            );
            let in_sum: f64 = lesion.iter().map(|&p| s.values[p]).sum();
            let all: f64 = s.values.iter().sum();
            let ml = in_sum / lesion.len() as f64;
            let mb = (all - in_sum) / (s.values.len() - lesion.len()) as f64;
            sum_l += ml;
            sum_b += mb;
            diffs.push(ml - mb);
        }
    }
    let n = diffs.len();
    let (t_stat, p_value) = paired_t_test(&diffs)?;
    Ok(SaliencyReport {
        n,
        mean_lesion: sum_l / n as f64,
        mean_background: sum_b / n as f64,
        mean_diff: diffs.iter().sum::<f64>() / n as f64,
        t_stat,
        p_value,
        n_fallback: fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub mean_log_var: f64,
    pub within_class_w2: f64,
    pub between_class_w2: f64,
}

/// Mean pooled log-variance and mean pairwise W2 of pooled image embeddings
/// for same-class and different-class pairs.
pub fn collapse_report(
    model: &DualEncoder,
    images: &[&ImageInput],
    labels: &[usize],
    batch_size: usize,
) -> Result<CollapseReport> {
    contract!(images.len() == labels.len(), "images and labels differ in length");
    let pooled = pooled_images(model, images, batch_size)?;
    let d = pooled.first().map_or(0, |g| g.dim());
    contract!(d > 0, "no images");
    let mean_log_var =
        pooled.iter().flat_map(|g| g.log_var().iter()).sum::<f64>() / (pooled.len() * d) as f64;
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let w = w2_diag(&pooled[i], &pooled[j])?;
            if labels[i] == labels[j] {
                within += w;
                nw += 1;
            } else {
                between += w;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::Degenerate("need both same-class and different-class pairs".into()));
    }
    Ok(CollapseReport {
        mean_log_var,
        within_class_w2: within / nw as f64,
        between_class_w2: between / nb as f64,
    })
}
