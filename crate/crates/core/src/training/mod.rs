//! Training step: unmasked teacher pass, mask planning, masked student pass,
//! combined loss and one AdamW update.

pub mod checkpoint;
pub mod gradcheck;
pub mod losses;
pub mod schedule;

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchIter, TextMode};
use crate::encoders::{gaussians_from_tensor, DualEncoder, ImageBatch, Section, TextBatch};
use crate::error::{contract, Error, Result};
use crate::masking::{appearance_saliency, plan_image_mask, plan_text_mask, MaskPlan, DEFAULT_TAU};
use crate::nn::ops::{self, GaussTensor};
use crate::nn::{AdamW, AdamWConfig, ParamGroup};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use losses::{align_loss, dmlm_loss, total_loss, DmlmParts, LossTensors};
pub use schedule::lr_multiplier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub text_mask_ratio: f64,
    pub image_base_ratio: f64,
    /// Softmax temperature for saliency-weighted patch sampling.
    pub mask_tau: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub text_mode: TextMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            text_mask_ratio: 0.3,
            image_base_ratio: 0.3,
            mask_tau: DEFAULT_TAU,
            epochs: 30,
            steps: None,
            batch_size: 32,
            peak_lr: 3e-4,
            encoder_lr: 1e-5,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            seed: 0,
            text_mode: TextMode::Structured,
        }
    }
}

impl TrainingConfig {
    /// 100 epochs at batch 128.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("text_mask_ratio", self.text_mask_ratio),
            ("image_base_ratio", self.image_base_ratio),
            ("mask_tau", self.mask_tau),
            ("peak_lr", self.peak_lr),
            ("encoder_lr", self.encoder_lr),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if self.text_mask_ratio >= 1.0 || self.image_base_ratio >= 1.0 {
            return Err(Error::Config("mask ratios must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("`lambda` must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("weight_decay must be >= 0 and warmup_fraction in [0, 1)".into()));
        }
        if self.batch_size == 0 || (self.steps.is_none() && self.epochs == 0) || self.steps == Some(0) {
            return Err(Error::Config("batch_size and the step budget must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n_train.div_ceil(self.batch_size.max(1)))
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Scalar loss values for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dmlm_text: f64,
    pub dmlm_image: f64,
    pub dmlm_total: f64,
    pub align: f64,
    pub total: f64,
    pub n_masked_text: usize,
    pub n_masked_image: usize,
}

impl LossBreakdown {
    pub fn from_tensors(t: &LossTensors, n_masked_text: usize, n_masked_image: usize) -> Result<Self> {
        let s = |x: &Tensor| -> Result<f64> { Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let (dmlm_text, dmlm_image) = (s(&t.dmlm_text)?, s(&t.dmlm_image)?);
        Ok(Self {
            dmlm_text,
            dmlm_image,
            dmlm_total: dmlm_text + dmlm_image,
            align: s(&t.align)?,
            total: s(&t.total)?,
            n_masked_text,
            n_masked_image,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.dmlm_text, self.dmlm_image, self.align, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Relative gap between `total` and `lambda*dmlm_total + (1-lambda)*align`.
    pub fn identity_residual(&self, lambda: f64) -> f64 {
        let expect = lambda * self.dmlm_total + (1.0 - lambda) * self.align;
        (self.total - expect).abs() / expect.abs().max(f64::MIN_POSITIVE)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub encoder_lr: f64,
    pub dmlm_text: f64,
    pub dmlm_image: f64,
    pub align: f64,
    pub total: f64,
    pub n_masked_text: usize,
    pub n_masked_image: usize,
}

impl StepRecord {
    pub fn loss(&self) -> LossBreakdown {
        LossBreakdown {
            dmlm_text: self.dmlm_text,
            dmlm_image: self.dmlm_image,
            dmlm_total: self.dmlm_text + self.dmlm_image,
            align: self.align,
            total: self.total,
            n_masked_text: self.n_masked_text,
            n_masked_image: self.n_masked_image,
        }
    }
}

/// SplitMix64 finalizer over a few words; used for per-step, per-sample seeds.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Unmasked pass with gradients: per-position and pooled distributions.
#[derive(Debug, Clone)]
pub struct Forward {
    pub text_batch: TextBatch,
    pub image_batch: ImageBatch,
    pub text: GaussTensor,
    pub image: GaussTensor,
    pub text_pooled: GaussTensor,
    pub image_pooled: GaussTensor,
}

pub fn unmasked_forward(model: &DualEncoder, batch: &Batch) -> Result<Forward> {
    let text_batch = model.text_batch_padded(&batch.ids, &batch.padding)?;
    let image_batch = model.image_batch(&batch.images)?;
    let text = model.text_distribution(&model.text_features(&text_batch, None)?)?;
    let image = model.image_distribution(&model.image_features(&image_batch, None)?)?;
    let text_pooled = ops::pool(&text, &text_batch.valid)?;
    let (b, p, _) = image.mu.dims3()?;
    let image_pooled = ops::pool(&image, &Tensor::ones((b, p), model.dtype(), model.params().device())?)?;
    Ok(Forward {
        text_batch,
        image_batch,
        text,
        image,
        text_pooled,
        image_pooled,
    })
}

/// Stop-gradient targets from the unmasked pass.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub text: GaussTensor,
    pub image: GaussTensor,
}

impl Teacher {
    pub fn from_forward(f: &Forward) -> Self {
        Self {
            text: f.text.detach(),
            image: f.image.detach(),
        }
    }
}

/// Per-position teacher targets for one sample (no gradient).
pub fn teacher_targets(
    model: &DualEncoder,
    text: &crate::encoders::TextInput,
    image: &crate::encoders::ImageInput,
) -> Result<(crate::prob::GaussianSequence, crate::prob::GaussianSequence)> {
    Ok((model.encode_text(text, None)?, model.encode_image(image, None)?))
}

/// Text masks uniformly over non-special tokens; image masks weighted by the
/// teacher's appearance saliency. Seeds depend on (config seed, step, row).
pub fn plan_masks(teacher: &Teacher, batch: &Batch, config: &TrainingConfig, step: usize) -> Result<Vec<MaskPlan>> {
    let text_seqs = gaussians_from_tensor(&teacher.text)?;
    let image_seqs = gaussians_from_tensor(&teacher.image)?;
    let mut plans = Vec::with_capacity(batch.len());
    for (row, text) in batch.texts.iter().enumerate() {
        let base = [config.seed, step as u64, batch.indices[row] as u64];
        let text_plan = plan_text_mask(text, config.text_mask_ratio, mix_seed(&[base[0], base[1], base[2], 0]))?;
        let appearance = text.span(Section::Appearance).and_then(|r| text_seqs[row].slice(r));
        let saliency = appearance_saliency(&image_seqs[row], appearance.as_ref())?;
        let mut image_plan = plan_image_mask(
            &saliency.values,
            config.image_base_ratio,
            config.mask_tau,
            mix_seed(&[base[0], base[1], base[2], 1]),
        )?;
        image_plan.saliency_fallback = saliency.fallback;
        plans.push(MaskPlan::merge(text_plan, image_plan));
    }
    Ok(plans)
}

/// Student pass on masked inputs and the three loss terms.
pub fn batch_losses(
    model: &DualEncoder,
    fwd: &Forward,
    teacher: &Teacher,
    plans: &[MaskPlan],
    lambda: f64,
) -> Result<(LossTensors, usize, usize)> {
    let (b, l) = fwd.text_batch.ids.dims2()?;
    let p = fwd.image_batch.n_patches;
    contract!(plans.len() == b, "{} mask plans for a batch of {b}", plans.len());
    let text_pos: Vec<&[usize]> = plans.iter().map(|x| x.text_indices.as_slice()).collect();
    let image_pos: Vec<&[usize]> = plans.iter().map(|x| x.image_indices.as_slice()).collect();
    let (text_w, text_rows) = losses::mask_weights(l, &text_pos, model.dtype())?;
    let (image_w, image_rows) = losses::mask_weights(p, &image_pos, model.dtype())?;
    if text_rows == 0 && image_rows == 0 {
        return Err(Error::Degenerate("every mask plan in the batch is empty".into()));
    }
    let text_mask = model.mask_tensor(l, &text_pos)?;
    let image_mask = model.mask_tensor(p, &image_pos)?;
    let student_text = model.predict_text(
        &model.text_features(&fwd.text_batch, Some(&text_mask))?,
        &fwd.image_pooled.mu,
    )?;
    let student_image = model.predict_image(
        &model.image_features(&fwd.image_batch, Some(&image_mask))?,
        &fwd.text_pooled.mu,
    )?;
    let dmlm_text = losses::weighted_kl(&student_text, &teacher.text, &text_w)?;
    let dmlm_image = losses::weighted_kl(&student_image, &teacher.image, &image_w)?;
    let align = losses::mean_w2(&fwd.text_pooled, &fwd.image_pooled)?;
    let n_text = text_pos.iter().map(|x| x.len()).sum();
    let n_image = image_pos.iter().map(|x| x.len()).sum();
    Ok((losses::combine(dmlm_text, dmlm_image, align, lambda)?, n_text, n_image))
}

/// Owns the model and optimizer state across steps.
pub struct Trainer {
    model: DualEncoder,
    opt: AdamW,
    config: TrainingConfig,
    total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: DualEncoder, config: TrainingConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        contract!(total_steps > 0, "total_steps must be positive");
        let opt = AdamW::new(model.params(), config.adamw())?;
        Ok(Self {
            model,
            opt,
            config,
            total_steps,
            step: 0,
        })
    }

    /// Continues a run from a checkpoint; the training config must match.
    pub fn resume(ckpt: &Checkpoint, config: &TrainingConfig) -> Result<Self> {
        checkpoint::expect_same("training config", &ckpt.meta.training, config)?;
        let model = ckpt.build_model()?;
        let opt = AdamW::from_state(config.adamw(), ckpt.adam.clone(), ckpt.meta.adam_steps);
        Ok(Self {
            model,
            opt,
            config: config.clone(),
            total_steps: ckpt.meta.total_steps,
            step: ckpt.meta.step,
        })
    }

    pub fn model(&self) -> &DualEncoder {
        &self.model
    }

    pub fn into_model(self) -> DualEncoder {
        self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// (head lr, encoder lr) at `step`.
    pub fn lr_at(&self, step: usize) -> (f64, f64) {
        let warmup = schedule::warmup_steps(self.total_steps, self.config.warmup_fraction);
        let m = lr_multiplier(step, self.total_steps, warmup);
        (self.config.peak_lr * m, self.config.encoder_lr * m)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.step;
        let fwd = unmasked_forward(&self.model, batch)?;
        let teacher = Teacher::from_forward(&fwd);
        let plans = plan_masks(&teacher, batch, &self.config, step)?;
        let (loss, n_text, n_image) = batch_losses(&self.model, &fwd, &teacher, &plans, self.config.lambda)?;
        let breakdown = LossBreakdown::from_tensors(&loss, n_text, n_image)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                step,
                breakdown: serde_json::to_string(&breakdown)?,
            });
        }
        let grads = loss.total.backward()?;
        let (lr, encoder_lr) = self.lr_at(step);
        self.opt.step(self.model.params(), &grads, |g| match g {
            ParamGroup::Backbone => encoder_lr,
            ParamGroup::Head => lr,
        })?;
        self.step += 1;
        Ok(StepRecord {
            step,
            lr,
            encoder_lr,
            dmlm_text: breakdown.dmlm_text,
            dmlm_image: breakdown.dmlm_image,
            align: breakdown.align,
            total: breakdown.total,
            n_masked_text: n_text,
            n_masked_image: n_image,
        })
    }

    /// Runs until `total_steps` or until `max_steps` more steps have been taken.
    /// `batches` must already be positioned at batch number `self.step()`.
    pub fn run(
        &mut self,
        batches: &mut BatchIter<'_>,
        max_steps: Option<usize>,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let stop = max_steps.map_or(self.total_steps, |k| (self.step + k).min(self.total_steps));
        let mut out = Vec::with_capacity(stop.saturating_sub(self.step));
        while self.step < stop {
            let batch = batches.next_batch()?;
            let rec = self.train_step(&batch)?;
            on_step(&rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn checkpoint_meta(&self, vocab_hash: &str, classes: &[String]) -> CheckpointMeta {
        CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            encoder: self.model.config().clone(),
            training: self.config.clone(),
            step: self.step,
            total_steps: self.total_steps,
            adam_steps: self.opt.steps(),
            vocab_hash: vocab_hash.to_string(),
            classes: classes.to_vec(),
        }
    }

    pub fn save(&self, path: &Path, vocab_hash: &str, classes: &[String]) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.opt), &self.checkpoint_meta(vocab_hash, classes))
    }
}

/// Appends records to a line-delimited metrics log.
pub struct MetricsLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Exponential moving average of the total loss.
pub fn smoothed_totals(records: &[StepRecord], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(records.len());
    let mut ema = None;
    for r in records {
        let v = match ema {
            None => r.total,
            Some(e) => alpha * r.total + (1.0 - alpha) * e,
        };
        ema = Some(v);
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batch_iter, generate_dataset, DatasetSpec};
    use crate::encoders::EncoderConfig;
    use crate::reports::Lexicon;

    fn setup(n: usize) -> (crate::data::Corpus, DualEncoder) {
        let spec = DatasetSpec {
            n_train: n,
            n_test: 4,
            ..DatasetSpec::default()
        };
        let corpus = generate_dataset(&spec, &Lexicon::bundled(), 128).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: corpus.vocab.len(),
            ..EncoderConfig::default()
        };
        (corpus, DualEncoder::new(cfg, DType::F64, 3).unwrap())
    }

    fn parts(corpus: &crate::data::Corpus) -> (Vec<crate::encoders::TextInput>, Vec<crate::encoders::ImageInput>, Vec<usize>) {
        (
            corpus.train.iter().map(|s| s.text.clone()).collect(),
            corpus.train.iter().map(|s| s.image.clone()).collect(),
            corpus.train.iter().map(|s| s.label).collect(),
        )
    }

    #[test]
    fn identity_and_positive_dmlm_at_init() {
        let (corpus, model) = setup(8);
        let (t, i, l) = parts(&corpus);
        let batch = batch_iter(&t, &i, &l, 4, 0, false).unwrap().next_batch().unwrap();
        for lambda in [0.0, 0.2, 1.0] {
            let fwd = unmasked_forward(&model, &batch).unwrap();
            let teacher = Teacher::from_forward(&fwd);
            let plans = plan_masks(&teacher, &batch, &TrainingConfig::default(), 0).unwrap();
            let (loss, nt, ni) = batch_losses(&model, &fwd, &teacher, &plans, lambda).unwrap();
            let b = LossBreakdown::from_tensors(&loss, nt, ni).unwrap();
            assert!(b.identity_residual(lambda) <= 1e-10);
            assert!(b.dmlm_text > 0.0 && b.dmlm_image > 0.0);
            if lambda == 1.0 {
                assert_eq!(b.total, b.dmlm_total);
            }
            if lambda == 0.0 {
                assert_eq!(b.total, b.align);
            }
        }
    }

    #[test]
    fn tensor_losses_match_sequence_losses() {
        let (corpus, model) = setup(4);
        let (t, i, l) = parts(&corpus);
        let batch = batch_iter(&t, &i, &l, 4, 0, false).unwrap().next_batch().unwrap();
        let fwd = unmasked_forward(&model, &batch).unwrap();
        let teacher = Teacher::from_forward(&fwd);
        let plans = plan_masks(&teacher, &batch, &TrainingConfig::default(), 0).unwrap();
        let (loss, _, _) = batch_losses(&model, &fwd, &teacher, &plans, 0.2).unwrap();
        let tb = crate::encoders::gaussians_from_tensor(&teacher.text).unwrap();
        let ib = crate::encoders::gaussians_from_tensor(&teacher.image).unwrap();
        let (mut text_sum, mut image_sum) = (0.0, 0.0);
        for (row, plan) in plans.iter().enumerate() {
            let tm = model.mask_tensor(fwd.text_batch.max_len, &[&plan.text_indices]).unwrap();
            let row_text = model.text_batch(&[batch.texts[row]]).unwrap();
            let st = model
                .predict_text(
                    &model.text_features(&row_text, Some(&tm.narrow(1, 0, batch.texts[row].len()).unwrap())).unwrap(),
                    &fwd.image_pooled.mu.narrow(0, row, 1).unwrap(),
                )
                .unwrap();
            let im = model.mask_tensor(64, &[&plan.image_indices]).unwrap();
            let row_img = model.image_batch(&[batch.images[row]]).unwrap();
            let si = model
                .predict_image(
                    &model.image_features(&row_img, Some(&im)).unwrap(),
                    &fwd.text_pooled.mu.narrow(0, row, 1).unwrap(),
                )
                .unwrap();
            let st = crate::encoders::gaussians_from_tensor(&st).unwrap().remove(0);
            let si = crate::encoders::gaussians_from_tensor(&si).unwrap().remove(0);
            let teacher_text = tb[row].slice(0..batch.texts[row].len()).unwrap();
            let p = dmlm_loss(&st, &si, &teacher_text, &ib[row], plan).unwrap();
            text_sum += p.dmlm_text;
            image_sum += p.dmlm_image;
        }
        let n = plans.len() as f64;
        let got = LossBreakdown::from_tensors(&loss, 0, 0).unwrap();
        assert!((got.dmlm_text - text_sum / n).abs() < 1e-9, "{} {}", got.dmlm_text, text_sum / n);
        assert!((got.dmlm_image - image_sum / n).abs() < 1e-9);
        let tp = crate::encoders::pooled_from_tensor(&fwd.text_pooled).unwrap();
        let ip = crate::encoders::pooled_from_tensor(&fwd.image_pooled).unwrap();
        let align = align_loss(&tp, &ip, &vec![true; tp.len()]).unwrap();
        assert!((got.align - align).abs() < 1e-6);
    }

    #[test]
    fn copy_teacher_gives_zero_and_unmasked_outputs_are_ignored() {
        let (corpus, model) = setup(4);
        let (t, i, l) = parts(&corpus);
        let batch = batch_iter(&t, &i, &l, 4, 0, false).unwrap().next_batch().unwrap();
        let fwd = unmasked_forward(&model, &batch).unwrap();
        let teacher = Teacher::from_forward(&fwd);
        let plans = plan_masks(&teacher, &batch, &TrainingConfig::default(), 0).unwrap();
        let pos: Vec<&[usize]> = plans.iter().map(|p| p.image_indices.as_slice()).collect();
        let (w, _) = losses::mask_weights(64, &pos, DType::F64).unwrap();
        let same = losses::weighted_kl(&teacher.image, &teacher.image, &w).unwrap();
        assert_eq!(same.to_scalar::<f64>().unwrap(), 0.0);
        let mask = model.mask_tensor(64, &pos).unwrap().unsqueeze(2).unwrap();
        let student = GaussTensor {
            mu: (&teacher.image.mu + 0.3).unwrap(),
            log_var: (&teacher.image.log_var - 0.2).unwrap(),
        };
        let zeroed = GaussTensor {
            mu: student.mu.broadcast_mul(&mask).unwrap(),
            log_var: student.log_var.broadcast_mul(&mask).unwrap(),
        };
        let a = losses::weighted_kl(&student, &teacher.image, &w).unwrap().to_scalar::<f64>().unwrap();
        let b = losses::weighted_kl(&zeroed, &teacher.image, &w).unwrap().to_scalar::<f64>().unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_path_carries_no_gradient() {
        let (corpus, model) = setup(4);
        let (t, i, l) = parts(&corpus);
        let batch = batch_iter(&t, &i, &l, 4, 0, false).unwrap().next_batch().unwrap();
        let fwd = unmasked_forward(&model, &batch).unwrap();
        let teacher = Teacher::from_forward(&fwd);
        let plans = plan_masks(&teacher, &batch, &TrainingConfig::default(), 0).unwrap();
        let (loss, _, _) = batch_losses(&model, &fwd, &teacher, &plans, 1.0).unwrap();
        let grads = loss.total.backward().unwrap();
        let constant = Teacher {
            text: GaussTensor {
                mu: Tensor::from_vec(teacher.text.mu.flatten_all().unwrap().to_vec1::<f64>().unwrap(), teacher.text.mu.shape(), &candle_core::Device::Cpu).unwrap(),
                log_var: teacher.text.log_var.copy().unwrap(),
            },
            image: GaussTensor {
                mu: teacher.image.mu.copy().unwrap(),
                log_var: teacher.image.log_var.copy().unwrap(),
            },
        };
        let (loss2, _, _) = batch_losses(&model, &fwd, &constant, &plans, 1.0).unwrap();
        let grads2 = loss2.total.backward().unwrap();
        let (mut total_diff, mut compared) = (0.0, 0);
        for (_, p) in model.params().iter() {
            let a = grads.get(p.var.as_tensor());
            let b = grads2.get(p.var.as_tensor());
            match (a, b) {
                (Some(a), Some(b)) => {
                    compared += 1;
                    total_diff += (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
                }
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
        assert!(compared > 0);
        assert_eq!(total_diff, 0.0);
    }

    #[test]
    fn same_seed_same_stream_and_resume_matches() {
        let (corpus, model) = setup(12);
        let (t, i, l) = parts(&corpus);
        let config = TrainingConfig {
            batch_size: 4,
            steps: Some(6),
            ..TrainingConfig::default()
        };
        let run = |m: DualEncoder| {
            let mut tr = Trainer::new(m, config.clone(), 6).unwrap();
            let mut it = batch_iter(&t, &i, &l, 4, config.seed, true).unwrap();
            tr.run(&mut it, None, |_| Ok(())).unwrap()
        };
        let a = run(model.clone());
        let fresh = DualEncoder::new(model.config().clone(), DType::F64, 3).unwrap();
        let b = run(fresh);
        assert_eq!(a, b);

        let fresh = DualEncoder::new(model.config().clone(), DType::F64, 3).unwrap();
        let mut tr = Trainer::new(fresh, config.clone(), 6).unwrap();
        let mut it = batch_iter(&t, &i, &l, 4, config.seed, true).unwrap();
        let first = tr.run(&mut it, Some(3), |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        tr.save(&path, "h", &[]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut resumed = Trainer::resume(&ck, &config).unwrap();
        assert_eq!(resumed.step(), 3);
        assert_eq!(resumed.lr_at(3), tr.lr_at(3));
        let mut it = batch_iter(&t, &i, &l, 4, config.seed, true).unwrap();
        it.skip_batches(3).unwrap();
        let rest = resumed.run(&mut it, None, |_| Ok(())).unwrap();
        assert_eq!([first, rest].concat(), a);
        let other = TrainingConfig {
            lambda: 0.5,
            ..config.clone()
        };
        assert!(matches!(Trainer::resume(&ck, &other), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { lambda: 1.2, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { peak_lr: 0.0, ..TrainingConfig::default() }.validate().is_err());
        assert_eq!(TrainingConfig::default().total_steps(100), 30 * 4);
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(&[0, 1]), mix_seed(&[1, 0]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }
}
