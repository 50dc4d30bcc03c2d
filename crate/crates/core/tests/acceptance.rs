//! One line per acceptance criterion. Set `DMLM_ACCEPTANCE_STRICT=1` to turn
//! any failed criterion into a non-zero exit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use dmlm::config::{DatagenConfig, PretrainConfig};
use dmlm::data::{batch_iter, generate_dataset, Corpus, Split, TextMode};
use dmlm::encoders::{DualEncoder, EncoderConfig};
use dmlm::eval::{brute_force_auc, compute_metrics};
use dmlm::masking::{adaptive_ratio, mask_count, plan_image_mask, plan_text_mask, MaskPlan, IMAGE_RATIO_MAX, IMAGE_RATIO_MIN};
use dmlm::pipeline;
use dmlm::prob::{LOGVAR_MAX, LOGVAR_MIN};
use dmlm::reports::{
    parse_report, render_appearance_prompt, render_definition_prompt, serialize_report, template_report, Lexicon,
};
use dmlm::selftest::{self, SelftestOptions};
use dmlm::training::{plan_masks, total_loss, unmasked_forward, Teacher, Trainer, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check = dmlm::Result<Outcome>;

/// Untrained initializations averaged for the chance baseline.
const BASELINE_INITS: u64 = 20;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn oracle_agreement() -> Check {
    let t0 = Instant::now();
    let opts = SelftestOptions::default();
    let kl = selftest::check_kl_vs_mc(&opts);
    let w2 = selftest::check_w2_vs_quantile(&opts);
    let secs = t0.elapsed().as_secs_f64();
    Ok(outcome(
        kl.passed && w2.passed && secs < 60.0,
        format!("kl: {}; w2: {}; {secs:.1}s (limit 60s)", kl.detail, w2.detail),
    ))
}

fn gradient_checks() -> Check {
    let t0 = Instant::now();
    let opts = SelftestOptions::default();
    let r = [
        selftest::check_kl_grad(&opts),
        selftest::check_w2_grad(&opts),
        selftest::check_model_grad(&opts),
    ];
    let secs = t0.elapsed().as_secs_f64();
    let detail = r.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    Ok(outcome(
        r.iter().all(|c| c.passed) && secs < 120.0,
        format!("{detail}; {secs:.1}s (limit 120s)"),
    ))
}

fn tiny_corpus(seed: u64) -> dmlm::Result<Corpus> {
    let spec = DatagenConfig {
        dataset: dmlm::data::DatasetSpec {
            n_train: 16,
            n_test: 8,
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    generate_dataset(&spec.dataset, &Lexicon::bundled(), spec.max_len)
}

fn tiny_model(corpus: &Corpus, seed: u64) -> dmlm::Result<DualEncoder> {
    let cfg = EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        vocab_size: corpus.vocab.len(),
        max_len: corpus.max_len,
        ..EncoderConfig::default()
    };
    DualEncoder::new(cfg, DType::F64, seed)
}

/// Largest identity residual over a short run at the given mixing weight.
fn short_run(lambda: f64) -> dmlm::Result<(f64, Vec<dmlm::training::StepRecord>)> {
    let corpus = tiny_corpus(1)?;
    let cfg = TrainingConfig {
        lambda,
        batch_size: 4,
        steps: Some(5),
        peak_lr: 1e-3,
        encoder_lr: 1e-3,
        ..TrainingConfig::default()
    };
    let texts = corpus.texts(Split::Train, TextMode::Structured)?;
    let images: Vec<_> = corpus.train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = corpus.train.iter().map(|s| s.label).collect();
    let mut trainer = Trainer::new(tiny_model(&corpus, 3)?, cfg, 5)?;
    let mut it = batch_iter(&texts, &images, &labels, 4, 0, true)?;
    let recs = trainer.run(&mut it, None, |_| Ok(()))?;
    let worst = recs.iter().map(|r| r.loss().identity_residual(lambda)).fold(0.0, f64::max);
    Ok((worst, recs))
}

fn loss_identities(reference: &[dmlm::training::StepRecord], lambda: f64) -> Check {
    let ref_worst = reference.iter().map(|r| r.loss().identity_residual(lambda)).fold(0.0, f64::max);
    let (mid_worst, _) = short_run(0.5)?;
    let (_, ones) = short_run(1.0)?;
    let (_, zeros) = short_run(0.0)?;
    let one_exact = ones.iter().all(|r| r.total == r.dmlm_text + r.dmlm_image);
    let zero_exact = zeros.iter().all(|r| r.total == r.align);
    let scalar_exact = total_loss(0.7, 0.3, 1.0)? == 0.7 && total_loss(0.7, 0.3, 0.0)? == 0.3;
    Ok(outcome(
        ref_worst <= 1e-10 && mid_worst <= 1e-10 && one_exact && zero_exact && scalar_exact,
        format!(
            "max rel residual {ref_worst:.1e} over {} reference steps, {mid_worst:.1e} at lambda 0.5; lambda=1 exact: {one_exact}; lambda=0 exact: {zero_exact}",
            reference.len()
        ),
    ))
}

fn masking_contracts() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut count_fail = 0;
    for n in 1..=512usize {
        let mut special = vec![false; n + 2];
        special[0] = true;
        special[n + 1] = true;
        let t = dmlm::encoders::TextInput::new(vec![5; n + 2], Default::default(), special, 8)?;
        let plan = plan_text_mask(&t, 0.3, n as u64)?;
        let expect = ((0.3 * n as f64 + 0.5 + 1e-9).floor() as usize).max(1);
        if plan.text_indices.len() != expect || mask_count(0.3, n) != expect {
            count_fail += 1;
        }
    }
    ok &= count_fail == 0;
    notes.push(format!("text counts wrong for {count_fail}/512 lengths"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ratio_fail = 0;
    for trial in 0..1000 {
        let p = rng.gen_range(1..=128);
        let sal: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let base = rng.gen_range(0.01..0.99);
        let r = adaptive_ratio(&sal, base);
        let plan = plan_image_mask(&sal, base, 0.1, trial)?;
        if !(IMAGE_RATIO_MIN..=IMAGE_RATIO_MAX).contains(&r) || plan.image_ratio_used != r {
            ratio_fail += 1;
        }
    }
    ok &= ratio_fail == 0;
    notes.push(format!("image ratio out of bounds in {ratio_fail}/1000 draws"));

    let corpus = tiny_corpus(2)?;
    let model = tiny_model(&corpus, 5)?;
    let texts = corpus.texts(Split::Train, TextMode::Structured)?;
    let images: Vec<_> = corpus.train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = corpus.train.iter().map(|s| s.label).collect();
    let mut it = batch_iter(&texts, &images, &labels, 8, 0, true)?;
    let mut leaks = 0;
    let mut planned = 0;
    for step in 0..4 {
        let batch = it.next_batch()?;
        let teacher = Teacher::from_forward(&unmasked_forward(&model, &batch)?);
        for (plan, t) in plan_masks(&teacher, &batch, &TrainingConfig::default(), step)?.iter().zip(&batch.texts) {
            planned += plan.text_indices.len();
            leaks += plan.text_indices.iter().filter(|&&i| t.special()[i]).count();
        }
    }
    ok &= leaks == 0 && planned > 0;
    notes.push(format!("{leaks} special tokens among {planned} masked"));

    let mut visible = 0;
    for trial in 0..100u64 {
        let sample = &corpus.train[trial as usize % corpus.train.len()];
        let text = &texts[trial as usize % texts.len()];
        let tplan = plan_text_mask(text, 0.3, trial)?;
        let iplan = plan_image_mask(&vec![0.0; sample.image.n_patches()], 0.3, 0.1, trial)?;
        let mut t2 = text.clone();
        for &i in &tplan.text_indices {
            t2 = t2.with_token(i, rng.gen_range(0..corpus.vocab.len() as u32));
        }
        let mut img2 = sample.image.clone();
        for &i in &iplan.image_indices {
            let noise: Vec<f32> = (0..img2.patch_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            img2 = img2.with_patch(i, &noise);
        }
        let plan = MaskPlan::merge(tplan, iplan);
        if model.encode_text(text, Some(&plan))? != model.encode_text(&t2, Some(&plan))?
            || model.encode_image(&sample.image, Some(&plan))? != model.encode_image(&img2, Some(&plan))?
        {
            visible += 1;
        }
    }
    ok &= visible == 0;
    notes.push(format!("masked content changed outputs in {visible}/100 substitutions"));
    Ok(outcome(ok, notes.join("; ")))
}

fn golden_and_round_trip() -> Check {
    let def = render_definition_prompt("atelectasis")?;
    let app = render_appearance_prompt("atelectasis")?;
    let golden = def == "Define atelectasis. Give me only a single paragraph and short definition of the disease."
        && app == "What are the distinguishing radiographic signs of atelectasis compared to other similar conditions?";
    let lex = Lexicon::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad = 0;
    for _ in 0..1000 {
        let entry = &lex.entries()[rng.gen_range(0..lex.len())];
        let k = rng.gen_range(0..=entry.findings.len());
        let findings: Vec<String> = entry.findings[..k].to_vec();
        let r = template_report(&lex, &entry.name, &findings)?;
        if parse_report(&serialize_report(&r)?, &entry.name)? != r {
            bad += 1;
        }
    }
    Ok(outcome(
        golden && bad == 0,
        format!("golden prompts equal: {golden}; {bad}/1000 reports changed by serialize then parse"),
    ))
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.gen_range(2..=4);
        let n = rng.gen_range(c..=20);
        let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.gen_range(0..c) }).collect();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect())
            .collect();
        let m = compute_metrics(&scores, &labels)?;
        let per: Vec<f64> = (0..c)
            .filter_map(|k| {
                let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
                brute_force_auc(&col, &pos)
            })
            .collect();
        let oracle = per.iter().sum::<f64>() / per.len() as f64;
        worst = worst.max((m.auc - oracle).abs());
    }
    Ok(outcome(worst <= 1e-9, format!("max |auc - pairwise oracle| {worst:.1e} over 100 instances")))
}

struct Reference {
    corpus: Corpus,
    structured: pipeline::PretrainOutcome,
    cfg: PretrainConfig,
    baseline_auc: f64,
    auc: f64,
    seconds: f64,
    _dir: tempfile::TempDir,
}

fn reference_run() -> dmlm::Result<Reference> {
    let t0 = Instant::now();
    let data = DatagenConfig::load(&configs().join("reference_data.toml"))?;
    let cfg = PretrainConfig::load(&configs().join("reference_pretrain.toml"))?;
    let corpus = generate_dataset(&data.dataset, &Lexicon::bundled(), data.max_len)?;
    let mut baseline_auc = 0.0;
    for seed in 0..BASELINE_INITS {
        let mut c = cfg.clone();
        c.training.seed = seed;
        let untrained = pipeline::init_model(&c, &corpus)?;
        baseline_auc += pipeline::zero_shot(&untrained, &corpus, Split::Test, c.training.text_mode, &c.eval)?.auc;
    }
    baseline_auc /= BASELINE_INITS as f64;
    let dir = tempfile::tempdir().expect("temp dir");
    let structured = pipeline::pretrain(&corpus, &cfg, dir.path(), |_| {})?;
    let auc = pipeline::zero_shot(&structured.model, &corpus, Split::Test, cfg.training.text_mode, &cfg.eval)?.auc;
    Ok(Reference {
        seconds: t0.elapsed().as_secs_f64(),
        corpus,
        structured,
        cfg,
        baseline_auc,
        auc,
        _dir: dir,
    })
}

fn desk_learning(r: &Reference) -> Check {
    let (first, last) = pipeline::loss_drop(&r.structured.records).unwrap_or((f64::NAN, f64::NAN));
    let ratio = last / first;
    let baseline_ok = (r.baseline_auc - 0.5).abs() <= 0.1;
    Ok(outcome(
        baseline_ok && ratio < 0.7 && r.auc >= 0.90 && r.seconds <= 600.0,
        format!(
            "untrained auc {:.3} (mean of {BASELINE_INITS} inits); smoothed loss {first:.3} -> {last:.3} ({ratio:.3}x, need < 0.7); test macro auc {:.4} (need >= 0.90); {:.0}s (limit 600s)",
            r.baseline_auc, r.auc, r.seconds
        ),
    ))
}

fn saliency(r: &Reference) -> Check {
    let s = pipeline::lesion_saliency(&r.structured.model, &r.corpus, Split::Test, r.cfg.eval.batch_size)?;
    Ok(outcome(
        s.mean_diff > 0.0 && s.p_value < 0.01,
        format!(
            "lesion {:.4} vs background {:.4} over {} images, t {:.2}, one-sided p {:.3e}",
            s.mean_lesion, s.mean_background, s.n, s.t_stat, s.p_value
        ),
    ))
}

fn non_collapse(r: &Reference) -> Check {
    let c = pipeline::collapse(&r.structured.model, &r.corpus, Split::Test, r.cfg.eval.batch_size)?;
    Ok(outcome(
        c.between_class_w2 > c.within_class_w2 && c.mean_log_var > LOGVAR_MIN && c.mean_log_var < LOGVAR_MAX,
        format!(
            "between {:.4} vs within {:.4}; mean pooled log-variance {:.3} in ({LOGVAR_MIN}, {LOGVAR_MAX})",
            c.between_class_w2, c.within_class_w2, c.mean_log_var
        ),
    ))
}

fn report_pipeline(r: &Reference) -> Check {
    let base = golden_and_round_trip()?;
    let cfg = PretrainConfig::load(&configs().join("findings_only_pretrain.toml"))?;
    let dir = tempfile::tempdir().expect("temp dir");
    let run = pipeline::pretrain(&r.corpus, &cfg, dir.path(), |_| {})?;
    let auc = pipeline::zero_shot(&run.model, &r.corpus, Split::Test, cfg.training.text_mode, &cfg.eval)?.auc;
    let drop = r.auc - auc;
    Ok(outcome(
        base.passed && drop >= 0.03,
        format!("{}; structured auc {:.4} vs findings-only {auc:.4}, drop {drop:.4} (need >= 0.03)", base.detail, r.auc),
    ))
}

fn report(n: usize, name: &str, result: Check, failures: &mut Vec<usize>) {
    let (passed, detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !passed {
        failures.push(n);
    }
    println!("criterion {n} {name}: {} | {detail}", if passed { "PASS" } else { "FAIL" });
}

fn main() {
    let mut failures = Vec::new();
    report(1, "closed_form_oracles", oracle_agreement(), &mut failures);
    report(2, "gradient_checks", gradient_checks(), &mut failures);
    report(4, "masking_contracts", masking_contracts(), &mut failures);
    report(9, "metric_oracle", metric_oracle(), &mut failures);
    match reference_run() {
        Ok(r) => {
            report(3, "loss_identities", loss_identities(&r.structured.records, r.cfg.training.lambda), &mut failures);
            report(5, "desk_scale_learning", desk_learning(&r), &mut failures);
            report(6, "lesion_saliency", saliency(&r), &mut failures);
            report(7, "non_collapse", non_collapse(&r), &mut failures);
            report(8, "report_pipeline", report_pipeline(&r), &mut failures);
        }
        Err(e) => {
            for (n, name) in [(3, "loss_identities"), (5, "desk_scale_learning"), (6, "lesion_saliency"), (7, "non_collapse"), (8, "report_pipeline")] {
                report(n, name, Err(dmlm::Error::Degenerate(format!("reference run failed: {e}"))), &mut failures);
            }
        }
    }
    failures.sort_unstable();
    println!("acceptance: {}/9 criteria passed; failed: {failures:?}", 9 - failures.len());
    let strict = std::env::var("DMLM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failures.is_empty() {
        std::process::exit(1);
    }
}
