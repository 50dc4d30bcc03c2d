//! Reconstruction, alignment and combined objectives.
//!
//! The `*_loss` functions work on [`GaussianSequence`]/[`DiagGaussian`]
//! values; [`LossTensors`] is the differentiable batch version used by the
//! trainer.

use candle_core::{DType, Tensor};

use crate::error::{contract, Error, Result};
use crate::masking::MaskPlan;
use crate::nn::ops::{self, GaussTensor};
use crate::prob::{kl_diag, w2_diag, DiagGaussian, GaussianSequence};

/// Masked-reconstruction terms for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmlmParts {
    pub dmlm_text: f64,
    pub dmlm_image: f64,
    pub n_masked_text: usize,
    pub n_masked_image: usize,
}

impl DmlmParts {
    pub fn total(&self) -> f64 {
        self.dmlm_text + self.dmlm_image
    }
}

fn masked_mean_kl(student: &GaussianSequence, teacher: &GaussianSequence, idx: &[usize], what: &str) -> Result<f64> {
    contract!(
        student.len() == teacher.len(),
        "{what} student has {} positions, teacher {}",
        student.len(),
        teacher.len()
    );
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &i in idx {
        contract!(i < student.len(), "{what} mask index {i} out of range");
        sum += kl_diag(&student.items()[i], &teacher.items()[i])?;
    }
    Ok(sum / idx.len() as f64)
}

/// Per-modality mean of KL(student ‖ teacher) over the masked positions.
pub fn dmlm_loss(
    student_text: &GaussianSequence,
    student_image: &GaussianSequence,
    teacher_text: &GaussianSequence,
    teacher_image: &GaussianSequence,
    plan: &MaskPlan,
) -> Result<DmlmParts> {
    if plan.is_empty() {
        return Err(Error::Degenerate("mask plan is empty in both modalities".into()));
    }
    Ok(DmlmParts {
        dmlm_text: masked_mean_kl(student_text, teacher_text, &plan.text_indices, "text")?,
        dmlm_image: masked_mean_kl(student_image, teacher_image, &plan.image_indices, "image")?,
        n_masked_text: plan.text_indices.len(),
        n_masked_image: plan.image_indices.len(),
    })
}

/// Mean W2 between pooled text and image distributions over matched pairs.
pub fn align_loss(text: &[DiagGaussian], image: &[DiagGaussian], pair_mask: &[bool]) -> Result<f64> {
    contract!(
        text.len() == image.len() && text.len() == pair_mask.len(),
        "align_loss needs equal batch sizes (text {}, image {}, mask {})",
        text.len(),
        image.len(),
        pair_mask.len()
    );
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((t, i), &m) in text.iter().zip(image).zip(pair_mask) {
        if m {
            sum += w2_diag(t, i)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no matched pairs in the batch".into()));
    }
    Ok(sum / n as f64)
}

/// `lambda * dmlm_total + (1 - lambda) * align`.
pub fn total_loss(dmlm_total: f64, align: f64, lambda: f64) -> Result<f64> {
    contract!((0.0..=1.0).contains(&lambda), "lambda {lambda} outside [0, 1]");
    Ok(lambda * dmlm_total + (1.0 - lambda) * align)
}

/// Weight matrix (B, L) that turns a masked sum into mean-over-mask per
/// sample followed by mean over the samples that have any mask.
pub fn mask_weights(len: usize, positions: &[&[usize]], dtype: DType) -> Result<(Tensor, usize)> {
    let b = positions.len();
    let nonempty = positions.iter().filter(|p| !p.is_empty()).count();
    let mut w = vec![0.0f64; b * len];
    for (row, idx) in positions.iter().enumerate() {
        for &i in idx.iter() {
            contract!(i < len, "mask position {i} out of range for length {len}");
            w[row * len + i] = 1.0 / (idx.len() * nonempty) as f64;
        }
    }
    let t = Tensor::from_vec(w, (b, len), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
    Ok((t, nonempty))
}

/// Scalar loss tensors for one batch.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub dmlm_text: Tensor,
    pub dmlm_image: Tensor,
    pub align: Tensor,
    pub total: Tensor,
}

/// Weighted KL reduction; `weights` comes from [`mask_weights`].
pub fn weighted_kl(student: &GaussTensor, teacher: &GaussTensor, weights: &Tensor) -> Result<Tensor> {
    Ok((ops::kl(student, teacher)? * weights)?.sum_all()?)
}

pub fn mean_w2(text: &GaussTensor, image: &GaussTensor) -> Result<Tensor> {
    Ok(ops::w2(text, image)?.mean_all()?)
}

pub fn combine(dmlm_text: Tensor, dmlm_image: Tensor, align: Tensor, lambda: f64) -> Result<LossTensors> {
    contract!((0.0..=1.0).contains(&lambda), "lambda {lambda} outside [0, 1]");
    let total = (((&dmlm_text + &dmlm_image)? * lambda)? + (&align * (1.0 - lambda))?)?;
    Ok(LossTensors {
        dmlm_text,
        dmlm_image,
        align,
        total,
    })
}
