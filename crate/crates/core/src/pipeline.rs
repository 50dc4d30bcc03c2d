//! End-to-end steps shared by the CLI and the acceptance harness.

use std::path::{Path, PathBuf};

use candle_core::DType;

use crate::config::PretrainConfig;
use crate::data::{batch_iter, Corpus, Split, TextMode};
use crate::encoders::{DualEncoder, EncoderConfig, ImageInput, TextInput};
use crate::error::Result;
use crate::eval::diagnostics::{collapse_report, saliency_on_lesions, CollapseReport, SaliencyReport};
use crate::eval::{build_prompts, evaluate, EvalConfig, EvalResult};
use crate::reports::Lexicon;
use crate::training::{smoothed_totals, MetricsLog, StepRecord, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAIN_DTYPE: DType = DType::F64;
/// Smoothing factor for the loss-drop check.
pub const LOSS_EMA_ALPHA: f64 = 0.1;

pub fn encoder_config(cfg: &PretrainConfig, corpus: &Corpus) -> EncoderConfig {
    cfg.model.encoder(
        corpus.vocab.len(),
        corpus.max_len,
        corpus.spec.patch_dim(),
        corpus.spec.grid_h,
        corpus.spec.grid_w,
    )
}

pub fn init_model(cfg: &PretrainConfig, corpus: &Corpus) -> Result<DualEncoder> {
    DualEncoder::new(encoder_config(cfg, corpus), TRAIN_DTYPE, cfg.training.seed)
}

pub struct PretrainOutcome {
    pub model: DualEncoder,
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains on the train split, streaming the metrics log and writing the final
/// checkpoint into `out`.
pub fn pretrain(
    corpus: &Corpus,
    cfg: &PretrainConfig,
    out: &Path,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainOutcome> {
    cfg.training.validate()?;
    let texts = corpus.texts(Split::Train, cfg.training.text_mode)?;
    let images: Vec<ImageInput> = corpus.train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = corpus.train.iter().map(|s| s.label).collect();
    let total = cfg.training.total_steps(corpus.train.len());
    let mut trainer = Trainer::new(init_model(cfg, corpus)?, cfg.training.clone(), total)?;
    let mut batches = batch_iter(&texts, &images, &labels, cfg.training.batch_size, cfg.training.seed, true)?;
    let metrics = out.join(METRICS_FILE);
    let mut log = MetricsLog::create(&metrics)?;
    let records = trainer.run(&mut batches, None, |r| {
        log.write(r)?;
        on_step(r);
        Ok(())
    })?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.save(&checkpoint, &corpus.vocab.hash(), &corpus.classes)?;
    Ok(PretrainOutcome {
        model: trainer.into_model(),
        records,
        checkpoint,
        metrics,
    })
}

/// Zero-shot metrics on one split with prompts in the given text mode.
pub fn zero_shot(model: &DualEncoder, corpus: &Corpus, split: Split, mode: TextMode, cfg: &EvalConfig) -> Result<EvalResult> {
    let prompts = build_prompts(&Lexicon::bundled(), &corpus.classes, &corpus.vocab, corpus.max_len, mode)?;
    let samples = corpus.split(split);
    let images: Vec<&ImageInput> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    evaluate(model, &images, &labels, &prompts, cfg)
}

pub fn lesion_saliency(model: &DualEncoder, corpus: &Corpus, split: Split, batch_size: usize) -> Result<SaliencyReport> {
    let samples = corpus.split(split);
    let texts: Vec<&TextInput> = samples.iter().map(|s| &s.text).collect();
    let images: Vec<&ImageInput> = samples.iter().map(|s| &s.image).collect();
    let lesions: Vec<&[usize]> = samples.iter().map(|s| s.lesion_region.as_slice()).collect();
    saliency_on_lesions(model, &texts, &images, &lesions, batch_size)
}

pub fn collapse(model: &DualEncoder, corpus: &Corpus, split: Split, batch_size: usize) -> Result<CollapseReport> {
    let samples = corpus.split(split);
    let images: Vec<&ImageInput> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    collapse_report(model, &images, &labels, batch_size)
}

/// (first, last) smoothed total loss.
pub fn loss_drop(records: &[StepRecord]) -> Option<(f64, f64)> {
    let s = smoothed_totals(records, LOSS_EMA_ALPHA);
    Some((*s.first()?, *s.last()?))
}
