use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmlm::config::{DatagenConfig, PretrainConfig, RunManifest};
use dmlm::data::{generate_dataset, read_corpus, write_corpus, Split};
use dmlm::eval::{write_results, EvalConfig, ResultsFile};
use dmlm::io::write_json;
use dmlm::pipeline;
use dmlm::reports::{
    generate_report, render_appearance_prompt, render_definition_prompt, write_report, Backend, Lexicon, LlmBackend,
};
use dmlm::selftest::{format_table, kl_sign_mutant, run_selftest, SelftestOptions, DEFAULT_SEED};
use dmlm::training::checkpoint::load_checkpoint;
use dmlm::Error;
use serde::{Deserialize, Serialize};

use crate::Mutation;

pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

pub fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportgenConfig {
    pub disease: String,
    pub findings: Vec<String>,
    pub backend: String,
}

pub fn reportgen(disease: &str, findings: &[String], backend: &str, out: &Path, verbose: bool, seed: Option<u64>) -> Result<u8> {
    let cfg = ReportgenConfig {
        disease: disease.to_string(),
        findings: findings.to_vec(),
        backend: backend.to_string(),
    };
    run_reportgen(&cfg, out, verbose, seed.unwrap_or(0))
}

fn run_reportgen(cfg: &ReportgenConfig, out: &Path, verbose: bool, seed: u64) -> Result<u8> {
    let backend: Backend = cfg.backend.parse()?;
    let lexicon = Lexicon::bundled();
    lexicon.get(&cfg.disease)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    RunManifest::new("reportgen", seed, cfg)?.artifact("report", &absolute(dir).join(out.file_name().unwrap_or_default())).write(dir)?;
    if verbose {
        println!("{}\n", render_definition_prompt(&cfg.disease)?);
        println!("{}\n", render_appearance_prompt(&cfg.disease)?);
    }
    let llm = match backend {
        Backend::Llm => LlmBackend::from_env().unwrap_or_else(|e| {
            log::warn!("llm client unavailable: {e}");
            None
        }),
        Backend::Template => None,
    };
    let generated = generate_report(&lexicon, &cfg.disease, &cfg.findings, backend, llm.as_ref())?;
    for w in &generated.warnings {
        eprintln!("warning: {w}");
    }
    write_report(out, &generated.report)?;
    println!("wrote {}", out.display());
    Ok(0)
}

pub fn datagen(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<u8> {
    let mut cfg = match spec {
        Some(p) => DatagenConfig::load(p)?,
        None => DatagenConfig::default(),
    };
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    run_datagen(&cfg, out)
}

fn run_datagen(cfg: &DatagenConfig, out: &Path) -> Result<u8> {
    cfg.dataset.validate()?;
    ensure_dir(out)?;
    RunManifest::new("datagen", cfg.dataset.seed, cfg)?
        .artifact("dataset", &absolute(out))
        .write(out)?;
    let corpus = generate_dataset(&cfg.dataset, &Lexicon::bundled(), cfg.max_len)?;
    write_corpus(out, &corpus)?;
    println!(
        "wrote {} train / {} test samples, {} classes, vocab {} to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.classes.len(),
        corpus.vocab.len(),
        out.display()
    );
    Ok(0)
}

pub fn pretrain(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<u8> {
    let mut cfg = match config {
        Some(p) => PretrainConfig::load(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    run_pretrain(&cfg, data, out)
}

fn run_pretrain(cfg: &PretrainConfig, data: &Path, out: &Path) -> Result<u8> {
    let corpus = read_corpus(data)?;
    ensure_dir(out)?;
    let abs = absolute(out);
    RunManifest::new("pretrain", cfg.training.seed, cfg)?
        .artifact("data", &absolute(data))
        .artifact("metrics", &abs.join(pipeline::METRICS_FILE))
        .artifact("checkpoint", &abs.join(pipeline::CHECKPOINT_FILE))
        .write(out)?;
    let total = cfg.training.total_steps(corpus.train.len());
    log::info!("training {total} steps on {} samples", corpus.train.len());
    let outcome = pipeline::pretrain(&corpus, cfg, out, |r| {
        if r.step % 10 == 0 || r.step + 1 == total {
            log::info!(
                "step {:>5}/{total} total {:.5} dmlm_text {:.5} dmlm_image {:.5} align {:.5} lr {:.2e}",
                r.step + 1,
                r.total,
                r.dmlm_text,
                r.dmlm_image,
                r.align,
                r.lr
            );
        }
    })?;
    if let Some((first, last)) = pipeline::loss_drop(&outcome.records) {
        println!("smoothed total loss {first:.5} -> {last:.5} ({:.3}x)", last / first);
    }
    println!("wrote {} and {}", outcome.metrics.display(), outcome.checkpoint.display());
    Ok(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub eval: EvalConfig,
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let eval = match config {
        Some(p) => PretrainConfig::load(p)?.eval,
        None => EvalConfig::default(),
    };
    run_eval(&EvalRunConfig { eval }, checkpoint, data, out, seed.unwrap_or(0))
}

fn run_eval(cfg: &EvalRunConfig, checkpoint: &Path, data: &Path, out: &Path, seed: u64) -> Result<u8> {
    cfg.eval.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = read_corpus(data)?;
    let data_hash = corpus.vocab.hash();
    if ckpt.meta.vocab_hash != data_hash {
        return Err(Error::ConfigMismatch(format!(
            "vocab hash mismatch: checkpoint {} was trained with vocab {}, dataset {} has vocab {}",
            checkpoint.display(),
            ckpt.meta.vocab_hash,
            data.display(),
            data_hash
        ))
        .into());
    }
    if ckpt.meta.classes != corpus.classes {
        return Err(Error::ConfigMismatch(format!(
            "class list mismatch: checkpoint {:?}, dataset {:?}",
            ckpt.meta.classes, corpus.classes
        ))
        .into());
    }
    ensure_dir(out)?;
    let abs = absolute(out);
    let manifest = RunManifest::new("eval", seed, cfg)?
        .artifact("checkpoint", &absolute(checkpoint))
        .artifact("data", &absolute(data))
        .artifact("results", &abs.join("results.json"))
        .artifact("summary", &abs.join("summary.txt"))
        .artifact("diagnostics", &abs.join(DIAGNOSTICS_FILE));
    manifest.write(out)?;
    let model = ckpt.build_model()?;
    let mode = ckpt.meta.training.text_mode;
    let metrics = pipeline::zero_shot(&model, &corpus, Split::Test, mode, &cfg.eval)?;
    let results = ResultsFile {
        config_hash: manifest.config_hash.clone(),
        checkpoint: absolute(checkpoint).display().to_string(),
        classes: corpus.classes.clone(),
        text_mode: mode,
        eval: cfg.eval.clone(),
        metrics,
    };
    write_results(out, &results)?;
    let diagnostics = serde_json::json!({
        "saliency": pipeline::lesion_saliency(&model, &corpus, Split::Test, cfg.eval.batch_size)?,
        "collapse": pipeline::collapse(&model, &corpus, Split::Test, cfg.eval.batch_size)?,
    });
    write_json(&out.join(DIAGNOSTICS_FILE), &diagnostics)?;
    print!("{}", dmlm::eval::summary_text(&results));
    Ok(0)
}

pub fn selftest(mutate: Option<Mutation>, seed: Option<u64>) -> Result<u8> {
    let mut opts = SelftestOptions {
        seed: seed.unwrap_or(DEFAULT_SEED),
        ..SelftestOptions::default()
    };
    if mutate == Some(Mutation::KlSign) {
        log::warn!("running with the KL sign mutation injected");
        opts.kl = kl_sign_mutant;
    }
    let results = run_selftest(&opts);
    print!("{}", format_table(&results));
    let ok = results.iter().all(|r| r.passed);
    println!("{}", if ok { "all checks passed" } else { "SELFTEST FAILED" });
    Ok(if ok { 0 } else { 1 })
}

pub fn rerun(manifest_path: &Path, out: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let m: RunManifest = serde_json::from_str(&text).context("parsing manifest")?;
    let input = |key: &str| -> Result<PathBuf> {
        m.artifacts
            .get(key)
            .map(PathBuf::from)
            .with_context(|| format!("manifest has no `{key}` artifact"))
    };
    match m.subcommand.as_str() {
        "reportgen" => {
            let cfg: ReportgenConfig = serde_json::from_value(m.config.clone())?;
            let name = input("report")?.file_name().map(PathBuf::from).unwrap_or_else(|| "report.txt".into());
            run_reportgen(&cfg, &out.join(name), false, m.seed)
        }
        "datagen" => run_datagen(&serde_json::from_value(m.config.clone())?, out),
        "pretrain" => run_pretrain(&serde_json::from_value(m.config.clone())?, &input("data")?, out),
        "eval" => run_eval(
            &serde_json::from_value(m.config.clone())?,
            &input("checkpoint")?,
            &input("data")?,
            out,
            m.seed,
        ),
        other => bail!("cannot rerun subcommand `{other}`"),
    }
}
