//! Synthetic paired image/report corpus with a planted, class-dependent
//! lesion motif.
//!
//! On-disk layout written by [`write_corpus`]:
//!
//! ```text
//! <dir>/dataset.json        DatasetHeader (spec, class names, shapes, vocab hash)
//! <dir>/vocab.json          token list, index = id
//! <dir>/<split>/images.bin  f32 little-endian, shape (n, grid_h * grid_w, patch_dim),
//!                           patches row-major over the grid, pixels row-major in a patch
//! <dir>/<split>/meta.jsonl  one SampleMeta per line, same order as images.bin
//! ```
//!
//! `<split>` is `train` or `test`.

pub mod batch;
pub mod vocab;

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageInput, TextInput};
use crate::error::{Error, Result};
use crate::reports::{
    generate_report, parse_report, serialize_report, tokenize_findings, tokenize_report, Backend, Lexicon,
    StructuredReport,
};
pub use batch::{batch_iter, Batch, BatchIter};
pub use vocab::{build_vocab, Vocab, BOS_ID, EOS_ID, OOV_ID, PAD_ID};

/// Finding terms that say nothing about the class.
pub const GENERIC_FINDINGS: &[&str] = &["opacity", "lucency", "density", "abnormality"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixels per patch side; patch_dim = patch_side².
    pub patch_side: usize,
    /// Lesion side length in patches.
    pub lesion_patches: usize,
    pub noise_std: f64,
    pub motif_amplitude: f64,
    /// Relative size of the class pattern around the mean offset, in [0, 1].
    pub motif_contrast: f64,
    /// Probability that a raw finding uses a generic term instead of a
    /// class-specific one.
    pub generic_finding_prob: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            n_classes: 4,
            grid_h: 8,
            grid_w: 8,
            patch_side: 4,
            lesion_patches: 2,
            noise_std: 0.05,
            motif_amplitude: 0.25,
            motif_contrast: 0.5,
            generic_finding_prob: 0.5,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train),
            ("n_classes", self.n_classes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("patch_side", self.patch_side),
            ("lesion_patches", self.lesion_patches),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("dataset spec `{name}` must be positive")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if !(self.motif_amplitude > 0.0 && self.motif_amplitude.is_finite()) {
            return Err(Error::Config("motif_amplitude must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.motif_contrast) {
            return Err(Error::Config("motif_contrast must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.generic_finding_prob) {
            return Err(Error::Config("generic_finding_prob must lie in [0, 1]".into()));
        }
        if !self.grid_h.is_multiple_of(2) || !self.grid_w.is_multiple_of(2) {
            return Err(Error::Config("grid sides must be even so quadrants are whole".into()));
        }
        if self.lesion_patches > self.grid_h / 2 || self.lesion_patches > self.grid_w / 2 {
            return Err(Error::Config("lesion does not fit inside one quadrant".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Which text a sample is paired with during training and prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    #[default]
    Structured,
    FindingsOnly,
}

impl std::str::FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(TextMode::Structured),
            "findings_only" => Ok(TextMode::FindingsOnly),
            other => Err(Error::Config(format!("unknown text mode `{other}`"))),
        }
    }
}

/// One image with its report, tokenized text and label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub image: ImageInput,
    pub report: StructuredReport,
    pub findings: Vec<String>,
    /// Structured-report tokens.
    pub text: TextInput,
    pub label: usize,
    /// Ground-truth lesion patches, sorted.
    pub lesion_region: Vec<usize>,
}

impl PairedSample {
    pub fn text_for(&self, mode: TextMode, vocab: &Vocab, max_len: usize) -> Result<TextInput> {
        match mode {
            TextMode::Structured => Ok(self.text.clone()),
            TextMode::FindingsOnly => tokenize_findings(&self.findings, vocab, max_len),
        }
    }
}

/// Metadata line stored next to the image array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub label: usize,
    pub disease: String,
    pub report_text: String,
    pub findings: Vec<String>,
    pub lesion_region: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub classes: Vec<String>,
    pub max_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub image_dtype: String,
    pub vocab_hash: String,
}

/// Both splits, the class names and the vocabulary built on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub classes: Vec<String>,
    pub vocab: Vocab,
    pub max_len: usize,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[PairedSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn texts(&self, split: Split, mode: TextMode) -> Result<Vec<TextInput>> {
        self.split(split)
            .iter()
            .map(|s| s.text_for(mode, &self.vocab, self.max_len))
            .collect()
    }
}

/// Each class gets a balanced ±1 pattern over the lesion pixels; pixel value
/// offset is `amplitude * (1 + contrast * pattern)`, so the region mean offset
/// is exactly `amplitude`.
pub fn class_motifs(spec: &DatasetSpec) -> Vec<Vec<f32>> {
    let side = spec.lesion_patches * spec.patch_side;
    let n = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mut motifs: Vec<Vec<f32>> = Vec::with_capacity(spec.n_classes);
    while motifs.len() < spec.n_classes {
        let mut signs: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { -1.0 }).collect();
        signs.shuffle(&mut rng);
        let m: Vec<f32> = signs
            .iter()
            .map(|s| (spec.motif_amplitude * (1.0 + spec.motif_contrast * s)) as f32)
            .collect();
        if n < 2 || !motifs.contains(&m) {
            motifs.push(m);
        }
    }
    motifs
}

fn quadrant_name(qr: usize, qc: usize) -> &'static str {
    match (qr, qc) {
        (0, 0) => "upper left",
        (0, _) => "upper right",
        (_, 0) => "lower left",
        _ => "lower right",
    }
}

struct RawSample {
    image: ImageInput,
    findings: Vec<String>,
    label: usize,
    lesion_region: Vec<usize>,
}

fn generate_raw(
    spec: &DatasetSpec,
    lexicon: &Lexicon,
    motifs: &[Vec<f32>],
    split: Split,
    index: usize,
) -> Result<RawSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    let label = index % spec.n_classes;
    let entry = &lexicon.entries()[label];
    let (gh, gw, ps, lp) = (spec.grid_h, spec.grid_w, spec.patch_side, spec.lesion_patches);
    let (qr, qc) = (rng.gen_range(0..2), rng.gen_range(0..2));
    let r0 = qr * gh / 2 + rng.gen_range(0..=gh / 2 - lp);
    let c0 = qc * gw / 2 + rng.gen_range(0..=gw / 2 - lp);

    let (h, w) = (gh * ps, gw * ps);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels: Vec<f64> = (0..h * w)
        .map(|_| 0.5 + if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 })
        .collect();
    let motif = &motifs[label];
    let side = lp * ps;
    for y in 0..side {
        for x in 0..side {
            pixels[(r0 * ps + y) * w + c0 * ps + x] += motif[y * side + x] as f64;
        }
    }
    let mut patches = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..ps {
                for x in 0..ps {
                    patches.push(pixels[(pr * ps + y) * w + pc * ps + x].clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let mut lesion_region: Vec<usize> = Vec::with_capacity(lp * lp);
    for r in r0..r0 + lp {
        for c in c0..c0 + lp {
            lesion_region.push(r * gw + c);
        }
    }

    let characteristic: Vec<&String> = entry
        .findings
        .iter()
        .filter(|f| !GENERIC_FINDINGS.contains(&f.as_str()))
        .collect();
    let term = if characteristic.is_empty() || rng.gen_bool(spec.generic_finding_prob) {
        GENERIC_FINDINGS.choose(&mut rng).copied().unwrap_or("opacity").to_string()
    } else {
        characteristic.choose(&mut rng).map(|s| s.to_string()).unwrap_or_default()
    };
    let findings = vec![format!("{term} in the {} zone", quadrant_name(qr, qc))];
    Ok(RawSample {
        image: ImageInput::new(patches, gh, gw, spec.patch_dim())?,
        findings,
        label,
        lesion_region,
    })
}

/// Class names used by a spec: the first `n_classes` lexicon entries.
pub fn class_names(spec: &DatasetSpec, lexicon: &Lexicon) -> Result<Vec<String>> {
    if spec.n_classes > lexicon.len() {
        return Err(Error::Config(format!(
            "{} classes requested but the lexicon has only {} diseases",
            spec.n_classes,
            lexicon.len()
        )));
    }
    Ok(lexicon.entries()[..spec.n_classes].iter().map(|e| e.name.clone()).collect())
}

fn raw_split(spec: &DatasetSpec, lexicon: &Lexicon, split: Split) -> Result<Vec<(RawSample, StructuredReport)>> {
    let motifs = class_motifs(spec);
    let n = match split {
        Split::Train => spec.n_train,
        Split::Test => spec.n_test,
    };
    (0..n)
        .map(|i| {
            let raw = generate_raw(spec, lexicon, &motifs, split, i)?;
            let disease = &lexicon.entries()[raw.label].name;
            let report = generate_report(lexicon, disease, &raw.findings, Backend::Template, None)?.report;
            Ok((raw, report))
        })
        .collect()
}

/// Generates both splits and builds the vocabulary over the train reports.
pub fn generate_dataset(spec: &DatasetSpec, lexicon: &Lexicon, max_len: usize) -> Result<Corpus> {
    spec.validate()?;
    let classes = class_names(spec, lexicon)?;
    let train_raw = raw_split(spec, lexicon, Split::Train)?;
    let test_raw = raw_split(spec, lexicon, Split::Test)?;
    let serialized: Vec<String> = train_raw
        .iter()
        .map(|(_, r)| serialize_report(r))
        .collect::<Result<_>>()?;
    let vocab = build_vocab(serialized.iter().map(String::as_str))?;
    let finish = |raws: Vec<(RawSample, StructuredReport)>, split: Split| -> Result<Vec<PairedSample>> {
        raws.into_iter()
            .enumerate()
            .map(|(i, (raw, report))| {
                Ok(PairedSample {
                    id: format!("{}-{i:06}", split.name()),
                    text: tokenize_report(&report, &vocab, max_len)?,
                    image: raw.image,
                    report,
                    findings: raw.findings,
                    label: raw.label,
                    lesion_region: raw.lesion_region,
                })
            })
            .collect()
    };
    let train = finish(train_raw, Split::Train)?;
    let test = finish(test_raw, Split::Test)?;
    Ok(Corpus {
        spec: spec.clone(),
        classes,
        vocab,
        max_len,
        train,
        test,
    })
}

pub const FORMAT_VERSION: u32 = 1;

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let (gh, gw) = (corpus.spec.grid_h, corpus.spec.grid_w);
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        spec: corpus.spec.clone(),
        classes: corpus.classes.clone(),
        max_len: corpus.max_len,
        n_train: corpus.train.len(),
        n_test: corpus.test.len(),
        grid_h: gh,
        grid_w: gw,
        patch_dim: corpus.spec.patch_dim(),
        image_dtype: "f32-le".into(),
        vocab_hash: corpus.vocab.hash(),
    };
    for split in [Split::Train, Split::Test] {
        let sdir = dir.join(split.name());
        let samples = corpus.split(split);
        let mut bin = Vec::with_capacity(samples.len() * gh * gw * corpus.spec.patch_dim() * 4);
        let mut meta = Vec::new();
        for s in samples {
            for v in s.image.values() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            serde_json::to_writer(
                &mut meta,
                &SampleMeta {
                    id: s.id.clone(),
                    label: s.label,
                    disease: s.report.disease.clone(),
                    report_text: serialize_report(&s.report)?,
                    findings: s.findings.clone(),
                    lesion_region: s.lesion_region.clone(),
                },
            )?;
            meta.push(b'\n');
        }
        crate::io::write_atomic(&sdir.join("images.bin"), &bin)?;
        crate::io::write_atomic(&sdir.join("meta.jsonl"), &meta)?;
    }
    crate::io::write_json(&dir.join("vocab.json"), &corpus.vocab.tokens())?;
    crate::io::write_json(&dir.join("dataset.json"), &header)
}

pub fn read_header(dir: &Path) -> Result<DatasetHeader> {
    let header: DatasetHeader = crate::io::read_json(&dir.join("dataset.json"))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "dataset format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let header = read_header(dir)?;
    let tokens: Vec<String> = crate::io::read_json(&dir.join("vocab.json"))?;
    let vocab = Vocab::from_tokens(tokens)?;
    if vocab.hash() != header.vocab_hash {
        return Err(Error::ConfigMismatch(format!(
            "vocab hash {} does not match dataset header {}",
            vocab.hash(),
            header.vocab_hash
        )));
    }
    let read_split = |split: Split, n: usize| -> Result<Vec<PairedSample>> {
        let sdir = dir.join(split.name());
        let bin_path = sdir.join("images.bin");
        let bin = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let per = header.grid_h * header.grid_w * header.patch_dim;
        if bin.len() != n * per * 4 {
            return Err(Error::Config(format!(
                "{} holds {} bytes, expected {}",
                bin_path.display(),
                bin.len(),
                n * per * 4
            )));
        }
        let meta_path = sdir.join("meta.jsonl");
        let f = std::fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut out = Vec::with_capacity(n);
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&meta_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: SampleMeta = serde_json::from_str(&line)?;
            if i >= n {
                return Err(Error::Config(format!("{} has more than {n} records", meta_path.display())));
            }
            if header.classes.get(m.label) != Some(&m.disease) {
                return Err(Error::Config(format!("record {} label does not match its disease", m.id)));
            }
            let values = bin[i * per * 4..(i + 1) * per * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let report = parse_report(&m.report_text, &m.disease)?;
            out.push(PairedSample {
                id: m.id,
                image: ImageInput::new(values, header.grid_h, header.grid_w, header.patch_dim)?,
                text: tokenize_report(&report, &vocab, header.max_len)?,
                report,
                findings: m.findings,
                label: m.label,
                lesion_region: m.lesion_region,
            });
        }
        if out.len() != n {
            return Err(Error::Config(format!(
                "{} has {} records, expected {n}",
                meta_path.display(),
                out.len()
            )));
        }
        Ok(out)
    };
    Ok(Corpus {
        train: read_split(Split::Train, header.n_train)?,
        test: read_split(Split::Test, header.n_test)?,
        spec: header.spec,
        classes: header.classes,
        vocab,
        max_len: header.max_len,
    })
}
