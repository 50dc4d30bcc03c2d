//! Dual transformer encoders whose heads emit per-position diagonal Gaussians.
//!
//! Each modality has a backbone (embedding + pre-norm blocks), a distribution
//! head producing its token/patch Gaussians, and a predictor head used for
//! masked reconstruction. The predictor sees the masked-pass feature
//! concatenated with the other modality's pooled mean.

use std::collections::BTreeMap;
use std::ops::Range;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::masking::MaskPlan;
use crate::nn::layers::{Block, LayerNorm, Linear};
use crate::nn::ops::{self, GaussTensor};
use crate::nn::params::{Init, ParamGroup, ParamStore};
use crate::prob::{DiagGaussian, GaussianSequence};

/// Attention bias for padded keys; exp() of it underflows to exactly 0.
const PAD_BIAS: f64 = -1e9;

/// The four sections of a structured report, in serialized order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Definition,
    Appearance,
    Observations,
    Verdicts,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::Definition,
        Section::Appearance,
        Section::Observations,
        Section::Verdicts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Definition => "definition",
            Section::Appearance => "appearance",
            Section::Observations => "observations",
            Section::Verdicts => "verdicts",
        }
    }
}

/// A tokenized text with its section layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    token_ids: Vec<u32>,
    section_spans: BTreeMap<Section, Range<usize>>,
    special: Vec<bool>,
}

impl TextInput {
    pub fn new(
        token_ids: Vec<u32>,
        section_spans: BTreeMap<Section, Range<usize>>,
        special: Vec<bool>,
        vocab_size: usize,
    ) -> Result<Self> {
        let len = token_ids.len();
        contract!(len >= 1, "text input must contain at least one token");
        contract!(
            special.len() == len,
            "special mask has length {} for {} tokens",
            special.len(),
            len
        );
        contract!(
            token_ids.iter().all(|&t| (t as usize) < vocab_size),
            "token id outside vocabulary of size {vocab_size}"
        );
        let mut end = 0;
        for (section, span) in &section_spans {
            contract!(
                span.start >= end && span.end <= len && span.start <= span.end,
                "span for `{}` ({:?}) overlaps, is unsorted, or exceeds length {len}",
                section.name(),
                span
            );
            end = span.end;
        }
        Ok(Self {
            token_ids,
            section_spans,
            special,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn special(&self) -> &[bool] {
        &self.special
    }

    pub fn span(&self, section: Section) -> Option<Range<usize>> {
        self.section_spans.get(&section).cloned()
    }

    pub fn section_spans(&self) -> &BTreeMap<Section, Range<usize>> {
        &self.section_spans
    }

    /// Positions that may be masked (everything that is not a special token).
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.special[i]).collect()
    }

    /// Copy with one token replaced (used by information-hiding checks).
    pub fn with_token(&self, position: usize, id: u32) -> Self {
        let mut out = self.clone();
        out.token_ids[position] = id;
        out
    }
}

/// An image as a grid of flattened patches with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    patches: Vec<f32>,
    grid_h: usize,
    grid_w: usize,
    patch_dim: usize,
}

impl ImageInput {
    pub fn new(patches: Vec<f32>, grid_h: usize, grid_w: usize, patch_dim: usize) -> Result<Self> {
        contract!(
            grid_h > 0 && grid_w > 0 && patch_dim > 0,
            "image grid and patch dimension must be positive"
        );
        contract!(
            patches.len() == grid_h * grid_w * patch_dim,
            "expected {} patch values, got {}",
            grid_h * grid_w * patch_dim,
            patches.len()
        );
        contract!(
            patches.iter().all(|v| v.is_finite()),
            "patch values must be finite"
        );
        Ok(Self {
            patches,
            grid_h,
            grid_w,
            patch_dim,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn values(&self) -> &[f32] {
        &self.patches
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.patches[index * self.patch_dim..(index + 1) * self.patch_dim]
    }

    pub fn with_patch(&self, index: usize, values: &[f32]) -> Self {
        let mut out = self.clone();
        out.patches[index * self.patch_dim..(index + 1) * self.patch_dim].copy_from_slice(values);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub patch_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 512,
            max_len: 128,
            patch_dim: 16,
            grid_h: 8,
            grid_w: 8,
        }
    }
}

impl EncoderConfig {
    /// ViT-B / BERT-base sized backbone (not used by the desk-scale runs).
    pub fn paper_scale() -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            vocab_size: 30522,
            max_len: 512,
            patch_dim: 16 * 16 * 3,
            grid_h: 14,
            grid_w: 14,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.d_model > 0 && self.n_heads > 0, "d_model and n_heads must be positive");
        contract!(
            self.d_model.is_multiple_of(self.n_heads),
            "d_model {} is not divisible by n_heads {}",
            self.d_model,
            self.n_heads
        );
        contract!(self.vocab_size > 4, "vocabulary must hold more than the four specials");
        contract!(self.max_len > 0 && self.patch_dim > 0, "max_len and patch_dim must be positive");
        contract!(self.grid_h > 0 && self.grid_w > 0, "grid must be non-empty");
        Ok(())
    }
}

/// Two affine maps producing mean and (clamped) log-variance.
#[derive(Debug, Clone)]
pub struct DistributionHead {
    mean: Linear,
    log_var: Linear,
}

impl DistributionHead {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Head;
        let std = (in_dim as f64).powf(-0.5);
        Ok(Self {
            mean: Linear::new(store, &format!("{prefix}.mean"), in_dim, out_dim, std, g, rng)?,
            // Small weights and zero bias start every position near unit variance.
            log_var: Linear::new(store, &format!("{prefix}.log_var"), in_dim, out_dim, 0.01 * std, g, rng)?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<GaussTensor> {
        GaussTensor::new(self.mean.forward(features)?, &self.log_var.forward(features)?)
    }

    /// Applies the head to an (L, d) feature matrix.
    pub fn forward_sequence(&self, features: &Tensor) -> Result<GaussianSequence> {
        contract!(features.rank() == 2, "expected an (L, d) feature matrix");
        let finite = features
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        contract!(finite, "distribution head features must be finite");
        let g = self.forward(&features.unsqueeze(0)?)?;
        Ok(gaussians_from_tensor(&g)?.remove(0))
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    pos_emb: Tensor,
    mask_emb: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Backbone {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        n_pos: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let pos_emb = store.create(
            &format!("{prefix}.pos_emb"),
            &[n_pos, d],
            Init::Normal(0.1),
            ParamGroup::Backbone,
            false,
            rng,
        )?;
        let mask_emb = store.create(
            &format!("{prefix}.mask_emb"),
            &[d],
            Init::Normal(1.0),
            ParamGroup::Head,
            false,
            rng,
        )?;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, &format!("{prefix}.blocks.{i}"), d, cfg.n_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d, ParamGroup::Backbone, rng)?;
        Ok(Self {
            pos_emb,
            mask_emb,
            blocks,
            final_norm,
        })
    }

    /// `embedded` is (B, L, d); `mask` is (B, L) with 1 at masked positions.
    fn forward(&self, embedded: &Tensor, mask: Option<&Tensor>, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (_, l, _) = embedded.dims3()?;
        let mut x = match mask {
            Some(m) => {
                let m = m.unsqueeze(2)?;
                let keep = m.affine(-1.0, 1.0)?;
                embedded
                    .broadcast_mul(&keep)?
                    .broadcast_add(&m.broadcast_mul(&self.mask_emb)?)?
            }
            None => embedded.clone(),
        };
        x = x.broadcast_add(&self.pos_emb.narrow(0, 0, l)?)?;
        for block in &self.blocks {
            x = block.forward(&x, key_bias)?;
        }
        self.final_norm.forward(&x)
    }
}

/// Padded token batch ready for the text backbone.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Tensor,
    /// (B, L): 1 for real tokens, 0 for padding.
    pub valid: Tensor,
    key_bias: Tensor,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub patches: Tensor,
    pub n_patches: usize,
}

/// Image and text encoders plus their heads.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    config: EncoderConfig,
    store: ParamStore,
    token_emb: Tensor,
    patch_proj: Linear,
    text: Backbone,
    image: Backbone,
    text_head: DistributionHead,
    image_head: DistributionHead,
    text_predictor: DistributionHead,
    image_predictor: DistributionHead,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype);
        let d = config.d_model;
        let token_emb = store.create(
            "text.token_emb",
            &[config.vocab_size, d],
            Init::Normal(1.0),
            ParamGroup::Backbone,
            false,
            &mut rng,
        )?;
        let text = Backbone::new(&mut store, "text", &config, config.max_len, &mut rng)?;
        let patch_proj = Linear::new(
            &mut store,
            "image.patch_proj",
            config.patch_dim,
            d,
            (config.patch_dim as f64).powf(-0.5) * 4.0,
            ParamGroup::Backbone,
            &mut rng,
        )?;
        let image = Backbone::new(&mut store, "image", &config, config.n_patches(), &mut rng)?;
        let text_head = DistributionHead::new(&mut store, "text.head", d, d, &mut rng)?;
        let image_head = DistributionHead::new(&mut store, "image.head", d, d, &mut rng)?;
        let text_predictor = DistributionHead::new(&mut store, "text.predictor", 2 * d, d, &mut rng)?;
        let image_predictor = DistributionHead::new(&mut store, "image.predictor", 2 * d, d, &mut rng)?;
        Ok(Self {
            config,
            store,
            token_emb,
            patch_proj,
            text,
            image,
            text_head,
            image_head,
            text_predictor,
            image_predictor,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn text_head(&self) -> &DistributionHead {
        &self.text_head
    }

    pub fn image_head(&self) -> &DistributionHead {
        &self.image_head
    }

    /// Builds a batch from already padded ids; `padding[b][i]` marks pad slots.
    pub fn text_batch_padded(&self, ids: &[Vec<u32>], padding: &[Vec<bool>]) -> Result<TextBatch> {
        contract!(!ids.is_empty(), "empty text batch");
        let l = ids[0].len();
        contract!(
            ids.iter().all(|r| r.len() == l) && padding.iter().all(|r| r.len() == l),
            "text batch rows must share one padded length"
        );
        contract!(
            l <= self.config.max_len,
            "text length {l} exceeds max_len {}",
            self.config.max_len
        );
        contract!(
            ids.iter().flatten().all(|&t| (t as usize) < self.config.vocab_size),
            "token id outside vocabulary"
        );
        let b = ids.len();
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        let valid: Vec<f64> = padding
            .iter()
            .flatten()
            .map(|&p| if p { 0.0 } else { 1.0 })
            .collect();
        let bias: Vec<f64> = valid.iter().map(|v| (1.0 - v) * PAD_BIAS).collect();
        let lens = padding.iter().map(|r| r.iter().filter(|p| !**p).count()).collect();
        Ok(TextBatch {
            ids: Tensor::from_vec(flat, (b, l), self.device())?,
            valid: Tensor::from_vec(valid, (b, l), self.device())?.to_dtype(self.dtype())?,
            key_bias: Tensor::from_vec(bias, (b, 1, 1, l), self.device())?.to_dtype(self.dtype())?,
            lens,
            max_len: l,
        })
    }

    pub fn text_batch(&self, inputs: &[&TextInput]) -> Result<TextBatch> {
        let l = inputs.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(inputs.len());
        let mut padding = Vec::with_capacity(inputs.len());
        for t in inputs {
            let mut row = t.token_ids().to_vec();
            let mut pad = vec![false; row.len()];
            row.resize(l, 0);
            pad.resize(l, true);
            ids.push(row);
            padding.push(pad);
        }
        self.text_batch_padded(&ids, &padding)
    }

    pub fn image_batch(&self, inputs: &[&ImageInput]) -> Result<ImageBatch> {
        contract!(!inputs.is_empty(), "empty image batch");
        let p = self.config.n_patches();
        let pd = self.config.patch_dim;
        for img in inputs {
            contract!(
                img.n_patches() == p && img.patch_dim() == pd,
                "image is {}x{} patches of dim {}, encoder expects {} patches of dim {}",
                img.grid().0,
                img.grid().1,
                img.patch_dim(),
                p,
                pd
            );
        }
        let flat: Vec<f32> = inputs.iter().flat_map(|i| i.values().iter().copied()).collect();
        Ok(ImageBatch {
            patches: Tensor::from_vec(flat, (inputs.len(), p, pd), self.device())?.to_dtype(self.dtype())?,
            n_patches: p,
        })
    }

    /// (B, len) indicator with ones at the given positions.
    pub fn mask_tensor(&self, len: usize, positions: &[&[usize]]) -> Result<Tensor> {
        let mut m = vec![0.0f64; positions.len() * len];
        for (b, rows) in positions.iter().enumerate() {
            for &i in rows.iter() {
                contract!(i < len, "mask position {i} out of range for length {len}");
                m[b * len + i] = 1.0;
            }
        }
        Ok(Tensor::from_vec(m, (positions.len(), len), self.device())?.to_dtype(self.dtype())?)
    }

    pub fn text_features(&self, batch: &TextBatch, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, l) = batch.ids.dims2()?;
        let emb = self
            .token_emb
            .index_select(&batch.ids.flatten_all()?, 0)?
            .reshape((b, l, self.config.d_model))?;
        self.text.forward(&emb, mask, Some(&batch.key_bias))
    }

    pub fn image_features(&self, batch: &ImageBatch, mask: Option<&Tensor>) -> Result<Tensor> {
        let emb = self.patch_proj.forward(&batch.patches)?;
        self.image.forward(&emb, mask, None)
    }

    pub fn text_distribution(&self, features: &Tensor) -> Result<GaussTensor> {
        self.text_head.forward(features)
    }

    pub fn image_distribution(&self, features: &Tensor) -> Result<GaussTensor> {
        self.image_head.forward(features)
    }

    /// Predictive distribution for masked text, conditioned on (B, d) image context.
    pub fn predict_text(&self, features: &Tensor, image_context: &Tensor) -> Result<GaussTensor> {
        self.text_predictor.forward(&with_context(features, image_context)?)
    }

    pub fn predict_image(&self, features: &Tensor, text_context: &Tensor) -> Result<GaussTensor> {
        self.image_predictor.forward(&with_context(features, text_context)?)
    }

    /// Per-token Gaussians for one text; masked tokens see only the mask embedding.
    pub fn encode_text(&self, t: &TextInput, mask: Option<&MaskPlan>) -> Result<GaussianSequence> {
        let batch = self.text_batch(&[t])?;
        let mask_t = match mask {
            Some(plan) => {
                for &i in &plan.text_indices {
                    contract!(i < t.len(), "text mask index {i} out of range for length {}", t.len());
                    contract!(!t.special()[i], "text mask index {i} hits a special token");
                }
                Some(self.mask_tensor(t.len(), &[&plan.text_indices])?)
            }
            None => None,
        };
        let feats = self.text_features(&batch, mask_t.as_ref())?;
        Ok(gaussians_from_tensor(&self.text_distribution(&feats)?)?.remove(0))
    }

    /// Per-patch Gaussians for one image; masked patches see only the mask embedding.
    pub fn encode_image(&self, img: &ImageInput, mask: Option<&MaskPlan>) -> Result<GaussianSequence> {
        let batch = self.image_batch(&[img])?;
        let mask_t = match mask {
            Some(plan) => Some(self.mask_tensor(img.n_patches(), &[&plan.image_indices])?),
            None => None,
        };
        let feats = self.image_features(&batch, mask_t.as_ref())?;
        Ok(gaussians_from_tensor(&self.image_distribution(&feats)?)?.remove(0))
    }

    /// Pooled text distributions (B, d), ignoring padding.
    pub fn pooled_text(&self, batch: &TextBatch) -> Result<GaussTensor> {
        let g = self.text_distribution(&self.text_features(batch, None)?)?;
        ops::pool(&g, &batch.valid)
    }

    pub fn pooled_image(&self, batch: &ImageBatch) -> Result<GaussTensor> {
        let g = self.image_distribution(&self.image_features(batch, None)?)?;
        let (b, p, _) = g.mu.dims3()?;
        let weights = Tensor::ones((b, p), self.dtype(), self.device())?;
        ops::pool(&g, &weights)
    }
}

fn with_context(features: &Tensor, context: &Tensor) -> Result<Tensor> {
    let (b, l, d) = features.dims3()?;
    let ctx = context.unsqueeze(1)?.broadcast_as((b, l, d))?;
    Ok(Tensor::cat(&[features, &ctx], 2)?)
}

/// Converts (B, L, d) tensors into one [`GaussianSequence`] per batch row.
pub fn gaussians_from_tensor(g: &GaussTensor) -> Result<Vec<GaussianSequence>> {
    let mu: Vec<Vec<Vec<f64>>> = g.mu.to_dtype(DType::F64)?.to_vec3()?;
    let lv: Vec<Vec<Vec<f64>>> = g.log_var.to_dtype(DType::F64)?.to_vec3()?;
    mu.into_iter()
        .zip(lv)
        .map(|(rows_mu, rows_lv)| {
            let items = rows_mu
                .into_iter()
                .zip(rows_lv)
                .map(|(m, l)| DiagGaussian::new(m, l))
                .collect::<Result<Vec<_>>>()?;
            GaussianSequence::new(items)
        })
        .collect()
}

/// Converts (B, d) pooled tensors into one [`DiagGaussian`] per row.
pub fn pooled_from_tensor(g: &GaussTensor) -> Result<Vec<DiagGaussian>> {
    let mu: Vec<Vec<f64>> = g.mu.to_dtype(DType::F64)?.to_vec2()?;
    let lv: Vec<Vec<f64>> = g.log_var.to_dtype(DType::F64)?.to_vec2()?;
    mu.into_iter()
        .zip(lv)
        .map(|(m, l)| DiagGaussian::new(m, l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{LOGVAR_MAX, LOGVAR_MIN};
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 40,
            max_len: 32,
            patch_dim: 4,
            grid_h: 2,
            grid_w: 2,
        }
    }

    fn text(ids: Vec<u32>) -> TextInput {
        let n = ids.len();
        let mut special = vec![false; n];
        special[0] = true;
        special[n - 1] = true;
        let mut spans = BTreeMap::new();
        spans.insert(Section::Appearance, 1..n - 1);
        TextInput::new(ids, spans, special, 40).unwrap()
    }

    fn image(seed: u64) -> ImageInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageInput::new((0..16).map(|_| rng.gen::<f32>()).collect(), 2, 2, 4).unwrap()
    }

    fn plan(text: Vec<usize>, image: Vec<usize>) -> MaskPlan {
        MaskPlan {
            text_indices: text,
            image_indices: image,
            image_ratio_used: 0.0,
            saliency_fallback: false,
        }
    }

    #[test]
    fn shapes_follow_inputs() {
        let model = DualEncoder::new(small_config(), DType::F64, 0).unwrap();
        let single = TextInput::new(vec![5], BTreeMap::new(), vec![false], 40).unwrap();
        let s = model.encode_text(&single, None).unwrap();
        assert_eq!((s.len(), s.dim()), (1, 16));
        let s = model.encode_image(&image(1), None).unwrap();
        assert_eq!((s.len(), s.dim()), (4, 16));
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = DualEncoder::new(small_config(), DType::F32, 9).unwrap();
        let b = DualEncoder::new(small_config(), DType::F32, 9).unwrap();
        let t = text(vec![2, 7, 8, 9, 3]);
        assert_eq!(a.encode_text(&t, None).unwrap(), b.encode_text(&t, None).unwrap());
        assert_eq!(a.encode_text(&t, None).unwrap(), a.encode_text(&t, None).unwrap());
        let img = image(4);
        assert_eq!(a.encode_image(&img, None).unwrap(), b.encode_image(&img, None).unwrap());
    }

    #[test]
    fn masked_token_content_is_hidden() {
        let model = DualEncoder::new(small_config(), DType::F32, 1).unwrap();
        let t = text(vec![2, 7, 8, 9, 10, 3]);
        let p = plan(vec![2], vec![]);
        let a = model.encode_text(&t, Some(&p)).unwrap();
        let b = model.encode_text(&t.with_token(2, 31), Some(&p)).unwrap();
        assert_eq!(a, b);
        // Without the mask the change is visible.
        assert_ne!(model.encode_text(&t, None).unwrap(), model.encode_text(&t.with_token(2, 31), None).unwrap());
    }

    #[test]
    fn masked_patch_content_is_hidden() {
        let model = DualEncoder::new(small_config(), DType::F32, 2).unwrap();
        let img = image(7);
        let p = plan(vec![], vec![1, 3]);
        let other = img.with_patch(1, &[0.9, 0.1, 0.0, 1.0]).with_patch(3, &[0.0; 4]);
        assert_eq!(
            model.encode_image(&img, Some(&p)).unwrap(),
            model.encode_image(&other, Some(&p)).unwrap()
        );
    }

    #[test]
    fn mask_index_contracts() {
        let model = DualEncoder::new(small_config(), DType::F32, 2).unwrap();
        let t = text(vec![2, 7, 8, 3]);
        assert!(model.encode_text(&t, Some(&plan(vec![9], vec![]))).is_err());
        assert!(model.encode_text(&t, Some(&plan(vec![0], vec![]))).is_err());
        assert!(model.encode_image(&image(0), Some(&plan(vec![], vec![4]))).is_err());
    }

    #[test]
    fn head_identity_on_zero_features() {
        let mut cfg = small_config();
        cfg.d_model = 8;
        cfg.n_heads = 2;
        let model = DualEncoder::new(cfg, DType::F64, 3).unwrap();
        let zeros = Tensor::zeros((5, 8), DType::F64, &Device::Cpu).unwrap();
        let s = model.text_head().forward_sequence(&zeros).unwrap();
        for g in s.items() {
            assert!(g.mu().iter().all(|v| *v == 0.0));
            assert!(g.log_var().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn head_output_respects_invariants_and_clamp() {
        let model = DualEncoder::new(small_config(), DType::F64, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..1000 {
            let scale = if i % 10 == 0 { 1e6 } else { 3.0 };
            let v: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let f = Tensor::from_vec(v, (3, 16), &Device::Cpu).unwrap();
            let s = model.image_head().forward_sequence(&f).unwrap();
            for g in s.items() {
                assert!(g.log_var().iter().all(|l| (LOGVAR_MIN..=LOGVAR_MAX).contains(l)));
                assert!(g.mu().iter().all(|m| m.is_finite()));
            }
        }
        let nan = Tensor::new(&[[f64::NAN; 16]], &Device::Cpu).unwrap();
        assert!(model.image_head().forward_sequence(&nan).is_err());
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let model = DualEncoder::new(small_config(), DType::F64, 5).unwrap();
        let short = text(vec![2, 7, 8, 3]);
        let long = text(vec![2, 9, 9, 9, 10, 11, 3]);
        let alone = model.encode_text(&short, None).unwrap();
        let batch = model.text_batch(&[&short, &long]).unwrap();
        let g = model.text_distribution(&model.text_features(&batch, None).unwrap()).unwrap();
        let rows = gaussians_from_tensor(&g).unwrap();
        for i in 0..short.len() {
            let a = alone.get(i).unwrap();
            let b = rows[0].get(i).unwrap();
            for k in 0..16 {
                assert!((a.mu()[k] - b.mu()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.n_heads = 3;
        assert!(DualEncoder::new(cfg, DType::F32, 0).is_err());
        let p = EncoderConfig::paper_scale();
        assert_eq!(p.d_model, 768);
        assert!(p.validate().is_ok());
    }
}
