//! Central finite-difference check of the training loss gradient.

use candle_core::DType;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{batch_losses, plan_masks, unmasked_forward, Teacher, TrainingConfig};
use crate::data::Batch;
use crate::encoders::DualEncoder;
use crate::error::{contract, Result};

/// Gradients smaller than this are not sampled: their finite differences are
/// dominated by rounding.
pub const MIN_GRAD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares autodiff and central differences of the total loss for
/// `n_params` random scalars, with teacher targets and mask plans held fixed.
pub fn total_loss_gradcheck(
    model: &DualEncoder,
    batch: &Batch,
    config: &TrainingConfig,
    n_params: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    contract!(model.dtype() == DType::F64, "gradient check needs an f64 model");
    let fwd = unmasked_forward(model, batch)?;
    let teacher = Teacher::from_forward(&fwd);
    let plans = plan_masks(&teacher, batch, config, 0)?;
    let (loss, _, _) = batch_losses(model, &fwd, &teacher, &plans, config.lambda)?;
    let grads = loss.total.backward()?;

    let mut candidates: Vec<(String, usize, f64)> = Vec::new();
    for (name, p) in model.params().iter() {
        if let Some(g) = grads.get(p.var.as_tensor()) {
            let g: Vec<f64> = g.flatten_all()?.to_vec1()?;
            candidates.extend(
                g.into_iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > MIN_GRAD)
                    .map(|(i, v)| (name.clone(), i, v)),
            );
        }
    }
    contract!(!candidates.is_empty(), "no parameter has a usable gradient");
    let k = n_params.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();

    let eval = || -> Result<f64> {
        let f = unmasked_forward(model, batch)?;
        let (l, _, _) = batch_losses(model, &f, &teacher, &plans, config.lambda)?;
        Ok(l.total.to_scalar::<f64>()?)
    };
    let store = model.params();
    let mut entries = Vec::with_capacity(k);
    for i in picked {
        let (name, idx, analytic) = &candidates[i];
        let orig = store.values_f64(name)?[*idx];
        store.set_scalar(name, *idx, orig + h)?;
        let plus = eval();
        store.set_scalar(name, *idx, orig - h)?;
        let minus = eval();
        store.set_scalar(name, *idx, orig)?;
        let numeric = (plus? - minus?) / (2.0 * h);
        entries.push(GradCheckEntry {
            param: name.clone(),
            index: *idx,
            analytic: *analytic,
            numeric,
            rel_err: rel_err(*analytic, numeric),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err })
}
