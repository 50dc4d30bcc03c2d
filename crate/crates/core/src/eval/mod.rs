//! Zero-shot classification against per-class report prompts.

pub mod diagnostics;
pub mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{TextMode, Vocab};
use crate::encoders::{pooled_from_tensor, DualEncoder, ImageInput, TextInput};
use crate::error::{contract, Error, Result};
use crate::prob::{kl_diag, w2_diag, DiagGaussian};
use crate::reports::{template_report, tokenize_findings, tokenize_report, Lexicon, StructuredReport};
pub use metrics::{brute_force_auc, compute_metrics, rank_auc, ClassMetrics, EvalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    W2,
    /// KL(image ‖ prompt).
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: f64,
    pub scoring: Scoring,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            scoring: Scoring::W2,
            batch_size: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("eval tau and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrompt {
    pub class_id: usize,
    pub disease: String,
    /// Present for structured prompts.
    pub report: Option<StructuredReport>,
    pub text: TextInput,
}

/// One prompt per class: the lexicon report with the class's first finding
/// term, or that term alone in findings-only mode.
pub fn build_prompts(
    lexicon: &Lexicon,
    classes: &[String],
    vocab: &Vocab,
    max_len: usize,
    mode: TextMode,
) -> Result<Vec<ClassPrompt>> {
    classes
        .iter()
        .enumerate()
        .map(|(class_id, disease)| {
            let entry = lexicon.get(disease)?;
            let findings = vec![entry.findings[0].clone()];
            let (report, text) = match mode {
                TextMode::Structured => {
                    let r = template_report(lexicon, disease, &findings)?;
                    let t = tokenize_report(&r, vocab, max_len)?;
                    (Some(r), t)
                }
                TextMode::FindingsOnly => (None, tokenize_findings(&findings, vocab, max_len)?),
            };
            Ok(ClassPrompt {
                class_id,
                disease: disease.clone(),
                report,
                text,
            })
        })
        .collect()
}

/// softmax(-distance / tau), computed with the max shift.
pub fn scores_from_distances(distances: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = distances.iter().map(|d| -d / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn distance(image: &DiagGaussian, prompt: &DiagGaussian, scoring: Scoring) -> Result<f64> {
    match scoring {
        Scoring::W2 => w2_diag(image, prompt),
        Scoring::Kl => kl_diag(image, prompt),
    }
}

/// Class scores for one pooled image distribution.
pub fn scores_for(image: &DiagGaussian, prompts: &[DiagGaussian], config: &EvalConfig) -> Result<Vec<f64>> {
    contract!(prompts.len() >= 2, "zero-shot scoring needs at least two classes");
    let d = prompts
        .iter()
        .map(|p| distance(image, p, config.scoring))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores_from_distances(&d, config.tau))
}

pub fn pooled_prompts(model: &DualEncoder, prompts: &[ClassPrompt]) -> Result<Vec<DiagGaussian>> {
    let texts: Vec<&TextInput> = prompts.iter().map(|p| &p.text).collect();
    pooled_from_tensor(&model.pooled_text(&model.text_batch(&texts)?)?)
}

pub fn pooled_images(model: &DualEncoder, images: &[&ImageInput], batch_size: usize) -> Result<Vec<DiagGaussian>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        out.extend(pooled_from_tensor(&model.pooled_image(&model.image_batch(chunk)?)?)?);
    }
    Ok(out)
}

pub fn zero_shot_scores(
    model: &DualEncoder,
    image: &ImageInput,
    prompts: &[ClassPrompt],
    config: &EvalConfig,
) -> Result<Vec<f64>> {
    contract!(prompts.len() >= 2, "zero-shot scoring needs at least two classes");
    let pooled = pooled_images(model, &[image], 1)?;
    scores_for(&pooled[0], &pooled_prompts(model, prompts)?, config)
}

/// Score matrix (n, C) for many images.
pub fn score_matrix(
    model: &DualEncoder,
    images: &[&ImageInput],
    prompts: &[ClassPrompt],
    config: &EvalConfig,
) -> Result<Vec<Vec<f64>>> {
    contract!(prompts.len() >= 2, "zero-shot scoring needs at least two classes");
    let prompt_dists = pooled_prompts(model, prompts)?;
    pooled_images(model, images, config.batch_size)?
        .iter()
        .map(|img| scores_for(img, &prompt_dists, config))
        .collect()
}

pub fn evaluate(
    model: &DualEncoder,
    images: &[&ImageInput],
    labels: &[usize],
    prompts: &[ClassPrompt],
    config: &EvalConfig,
) -> Result<EvalResult> {
    config.validate()?;
    compute_metrics(&score_matrix(model, images, prompts, config)?, labels)
}

/// Stored results: metrics plus what produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config_hash: String,
    pub checkpoint: String,
    pub classes: Vec<String>,
    pub text_mode: TextMode,
    pub eval: EvalConfig,
    pub metrics: EvalResult,
}

pub fn summary_text(r: &ResultsFile) -> String {
    let m = &r.metrics;
    let mut s = format!(
        "zero-shot evaluation ({} samples, {} classes, {:?} prompts)\nmacro AUC {:.4}  macro F1 {:.4}  accuracy {:.4}\n\n",
        m.n_samples,
        r.classes.len(),
        r.text_mode,
        m.auc,
        m.f1,
        m.acc
    );
    s.push_str(&format!("{:<4} {:<24} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "id", "class", "auc", "prec", "recall", "f1", "n"));
    for c in &m.per_class {
        let auc = c.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        s.push_str(&format!(
            "{:<4} {:<24} {:>7} {:>7.4} {:>7.4} {:>7.4} {:>7}\n",
            c.class_id,
            r.classes.get(c.class_id).map_or("?", String::as_str),
            auc,
            c.precision,
            c.recall,
            c.f1,
            c.support
        ));
    }
    for w in &m.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s.push_str(&format!("config hash {}\n", r.config_hash));
    s
}

pub fn write_results(dir: &Path, r: &ResultsFile) -> Result<()> {
    crate::io::write_json(&dir.join("results.json"), r)?;
    crate::io::write_atomic(&dir.join("summary.txt"), summary_text(r).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: f64) -> DiagGaussian {
        DiagGaussian::new(vec![mu, 0.0], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn identical_prompts_give_uniform_scores() {
        let s = scores_for(&g(1.0), &[g(0.0), g(0.0), g(0.0)], &EvalConfig::default()).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn matching_prompt_wins() {
        let s = scores_for(&g(2.0), &[g(2.0), g(0.0)], &EvalConfig::default()).unwrap();
        assert!(s[0] > 0.5);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let kl = EvalConfig {
            scoring: Scoring::Kl,
            ..EvalConfig::default()
        };
        assert!(scores_for(&g(2.0), &[g(2.0), g(0.0)], &kl).unwrap()[0] > 0.5);
        assert!(scores_for(&g(2.0), &[g(2.0)], &kl).is_err());
    }

    #[test]
    fn shift_invariance() {
        let d = [0.3, 1.7, 0.9];
        let a = scores_from_distances(&d, 1.0);
        let b = scores_from_distances(&d.map(|x| x + 123.0), 1.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(metrics::argmax(&a), metrics::argmax(&b));
    }

    #[test]
    fn prompts_cover_each_class() {
        let lex = Lexicon::bundled();
        let classes: Vec<String> = lex.entries()[..4].iter().map(|e| e.name.clone()).collect();
        let docs: Vec<String> = lex.entries().iter().map(|e| format!("{} {}", e.definition, e.appearance)).collect();
        let vocab = crate::data::build_vocab(docs.iter().map(String::as_str)).unwrap();
        let p = build_prompts(&lex, &classes, &vocab, 128, TextMode::Structured).unwrap();
        assert_eq!(p.len(), 4);
        for (i, prompt) in p.iter().enumerate() {
            assert_eq!(prompt.class_id, i);
            assert!(!prompt.text.span(crate::encoders::Section::Appearance).unwrap().is_empty());
        }
        let f = build_prompts(&lex, &classes, &vocab, 128, TextMode::FindingsOnly).unwrap();
        assert!(f[0].report.is_none());
    }
}
