//! Oracle suites run by `dmlm selftest`.
//!
//! The closed forms under test are passed in as function pointers so a
//! deliberately broken variant can be substituted to confirm the suite
//! catches it.

use std::time::Instant;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{batch_iter, generate_dataset, DatasetSpec};
use crate::encoders::{DualEncoder, EncoderConfig};
use crate::error::Result;
use crate::prob::oracle::{mc_kl_oracle, quantile_w2_oracle};
use crate::prob::{kl_diag, kl_diag_grad, w2_diag, w2_diag_grad, DiagGaussian, PairGradient};
use crate::reports::Lexicon;
use crate::training::gradcheck::total_loss_gradcheck;
use crate::training::TrainingConfig;

pub type DivergenceFn = fn(&DiagGaussian, &DiagGaussian) -> Result<f64>;
pub type GradientFn = fn(&DiagGaussian, &DiagGaussian) -> Result<PairGradient>;

pub const KL_MC_SIGMAS: f64 = 3.0;
pub const W2_QUANTILE_TOL: f64 = 1e-3;
pub const PAIR_GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;
pub const DEFAULT_SEED: u64 = 3;

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub kl: DivergenceFn,
    pub kl_grad: GradientFn,
    pub w2: DivergenceFn,
    pub w2_grad: GradientFn,
    pub n_pairs: usize,
    pub mc_samples: usize,
    pub quantile_grid: usize,
    pub seed: u64,
    pub model_gradcheck: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            kl: kl_diag,
            kl_grad: kl_diag_grad,
            w2: w2_diag,
            w2_grad: w2_diag_grad,
            n_pairs: 100,
            mc_samples: 1_000_000,
            quantile_grid: 200_000,
            seed: DEFAULT_SEED,
            model_gradcheck: true,
        }
    }
}

/// KL with the sign of the mean term flipped.
pub fn kl_sign_mutant(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..p.dim() {
        let (lp, lq) = (p.log_var()[k], q.log_var()[k]);
        let dm = p.mu()[k] - q.mu()[k];
        acc += lq - lp + (lp - lq).exp() - dm * dm * (-lq).exp() - 1.0;
    }
    Ok(0.5 * acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    let mu = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let lv = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    DiagGaussian::new(mu, lv).expect("finite draw")
}

/// 1-D pairs used by the closed-form oracles.
pub fn oracle_pairs(n: usize, seed: u64) -> Vec<(DiagGaussian, DiagGaussian)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (random_gaussian(&mut rng, 1), random_gaussian(&mut rng, 1)))
        .collect()
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn check_kl_vs_mc(opts: &SelftestOptions) -> CheckResult {
    timed("kl_vs_monte_carlo", || {
        let mut worst = 0.0f64;
        let mut fails = 0;
        for (i, (p, q)) in oracle_pairs(opts.n_pairs, opts.seed).iter().enumerate() {
            let mc = mc_kl_oracle(p, q, opts.mc_samples, opts.seed.wrapping_add(1000 + i as u64))?;
            let z = ((opts.kl)(p, q)? - mc.mean).abs() / mc.std_err.max(f64::MIN_POSITIVE);
            worst = worst.max(z);
            fails += (z > KL_MC_SIGMAS) as usize;
        }
        Ok((
            fails == 0,
            format!("{fails}/{} pairs beyond {KL_MC_SIGMAS} SE, worst {worst:.2} SE", opts.n_pairs),
        ))
    })
}

pub fn check_w2_vs_quantile(opts: &SelftestOptions) -> CheckResult {
    timed("w2_vs_quantile", || {
        let mut worst = 0.0f64;
        for (p, q) in oracle_pairs(opts.n_pairs, opts.seed.wrapping_add(1)) {
            let err = ((opts.w2)(&p, &q)? - quantile_w2_oracle(&p, &q, opts.quantile_grid)?).abs();
            worst = worst.max(err);
        }
        Ok((worst <= W2_QUANTILE_TOL, format!("max abs error {worst:.2e}")))
    })
}

/// Central finite differences of `f` over all four argument blocks.
pub fn finite_difference_grad(f: DivergenceFn, p: &DiagGaussian, q: &DiagGaussian, h: f64) -> Result<PairGradient> {
    let d = p.dim();
    let mut g = PairGradient {
        mu_p: vec![0.0; d],
        log_var_p: vec![0.0; d],
        mu_q: vec![0.0; d],
        log_var_q: vec![0.0; d],
    };
    for block in 0..4 {
        for k in 0..d {
            let eval = |delta: f64| -> Result<f64> {
                let (mut mp, mut lp) = (p.mu().to_vec(), p.log_var().to_vec());
                let (mut mq, mut lq) = (q.mu().to_vec(), q.log_var().to_vec());
                match block {
                    0 => mp[k] += delta,
                    1 => lp[k] += delta,
                    2 => mq[k] += delta,
                    _ => lq[k] += delta,
                }
                f(&DiagGaussian::new(mp, lp)?, &DiagGaussian::new(mq, lq)?)
            };
            let v = (eval(h)? - eval(-h)?) / (2.0 * h);
            match block {
                0 => g.mu_p[k] = v,
                1 => g.log_var_p[k] = v,
                2 => g.mu_q[k] = v,
                _ => g.log_var_q[k] = v,
            }
        }
    }
    Ok(g)
}

/// Largest relative error between two gradients; entries below `floor` in
/// magnitude are compared against `floor`.
pub fn max_grad_rel_err(a: &PairGradient, b: &PairGradient, floor: f64) -> f64 {
    let blocks = [
        (&a.mu_p, &b.mu_p),
        (&a.log_var_p, &b.log_var_p),
        (&a.mu_q, &b.mu_q),
        (&a.log_var_q, &b.log_var_q),
    ];
    blocks
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn check_pair_grad(name: &str, f: DivergenceFn, grad: GradientFn, opts: &SelftestOptions) -> CheckResult {
    timed(name, || {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (p, q) = (random_gaussian(&mut rng, 3), random_gaussian(&mut rng, 3));
            let fd = finite_difference_grad(f, &p, &q, 1e-5)?;
            worst = worst.max(max_grad_rel_err(&grad(&p, &q)?, &fd, 1e-6));
        }
        Ok((worst <= PAIR_GRAD_TOL, format!("max rel error {worst:.2e}")))
    })
}

pub fn check_kl_grad(opts: &SelftestOptions) -> CheckResult {
    check_pair_grad("kl_gradient_fd", opts.kl, opts.kl_grad, opts)
}

pub fn check_w2_grad(opts: &SelftestOptions) -> CheckResult {
    check_pair_grad("w2_gradient_fd", opts.w2, opts.w2_grad, opts)
}

pub fn check_model_grad(opts: &SelftestOptions) -> CheckResult {
    timed("total_loss_gradient_fd", || {
        let spec = DatasetSpec {
            n_train: 4,
            n_test: 1,
            seed: opts.seed,
            ..DatasetSpec::default()
        };
        let corpus = generate_dataset(&spec, &Lexicon::bundled(), 128)?;
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: corpus.vocab.len(),
            ..EncoderConfig::default()
        };
        let model = DualEncoder::new(cfg, DType::F64, opts.seed)?;
        let t: Vec<_> = corpus.train.iter().map(|s| s.text.clone()).collect();
        let i: Vec<_> = corpus.train.iter().map(|s| s.image.clone()).collect();
        let l: Vec<_> = corpus.train.iter().map(|s| s.label).collect();
        let batch = batch_iter(&t, &i, &l, 4, 0, false)?.next_batch()?;
        let r = total_loss_gradcheck(&model, &batch, &TrainingConfig::default(), 20, 1e-4, opts.seed)?;
        Ok((
            r.max_rel_err <= MODEL_GRAD_TOL && r.entries.len() == 20,
            format!("{} parameters, max rel error {:.2e}", r.entries.len(), r.max_rel_err),
        ))
    })
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckResult> {
    let mut out = vec![
        check_kl_vs_mc(opts),
        check_w2_vs_quantile(opts),
        check_kl_grad(opts),
        check_w2_grad(opts),
    ];
    if opts.model_gradcheck {
        out.push(check_model_grad(opts));
    }
    out
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<26} {:<6} {:>8}  {}\n", "check", "result", "seconds", "detail");
    for r in results {
        s.push_str(&format!(
            "{:<26} {:<6} {:>8.2}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    s
}
