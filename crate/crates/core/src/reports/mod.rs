//! Four-section structured reports: prompts, generation, on-disk format and
//! tokenization.
//!
//! Serialized layout, one item per line:
//!
//! ```text
//! Definition: <definition>
//! Radiographic characteristics: <appearance>
//! Observations:
//! Observation: <finding>.
//! Verdicts:
//! Verdict: <disease> present.
//! ```

pub mod lexicon;
pub mod llm;
pub mod tokenize;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
pub use lexicon::{Lexicon, LexiconEntry};
pub use llm::{ChatClient, HttpChatClient, LlmBackend, ResponseCache};
pub use tokenize::{tokenize_findings, tokenize_report, words};

pub const DEFINITION_PREFIX: &str = "Definition:";
pub const APPEARANCE_PREFIX: &str = "Radiographic characteristics:";
pub const OBSERVATIONS_HEADER: &str = "Observations:";
pub const VERDICTS_HEADER: &str = "Verdicts:";

/// Placeholder substituted by [`PromptTemplate::render`].
pub const DISEASE_PLACEHOLDER: &str = "[disease name]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub template: &'static str,
}

pub const DEFINITION_PROMPT: PromptTemplate = PromptTemplate {
    name: "definition",
    template: "Define [disease name]. Give me only a single paragraph and short definition of the disease.",
};

pub const APPEARANCE_PROMPT: PromptTemplate = PromptTemplate {
    name: "appearance",
    template: "What are the distinguishing radiographic signs of [disease name] compared to other similar conditions?",
};

impl PromptTemplate {
    pub fn render(&self, disease: &str) -> Result<String> {
        contract!(!disease.is_empty(), "disease name must not be empty");
        debug_assert_eq!(self.template.matches(DISEASE_PLACEHOLDER).count(), 1);
        Ok(self.template.replacen(DISEASE_PLACEHOLDER, disease, 1))
    }
}

pub fn render_definition_prompt(disease: &str) -> Result<String> {
    DEFINITION_PROMPT.render(disease)
}

pub fn render_appearance_prompt(disease: &str) -> Result<String> {
    APPEARANCE_PROMPT.render(disease)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub disease: String,
    /// Definition text without the `Definition:` prefix.
    pub definition: String,
    /// Appearance text without the `Radiographic characteristics:` prefix.
    pub appearance: String,
    /// Full observation lines, e.g. `Observation: volume loss.`
    pub observations: Vec<String>,
    /// Full verdict lines, e.g. `Verdict: atelectasis present.`
    pub verdicts: Vec<String>,
}

fn is_header_line(line: &str) -> bool {
    line.starts_with(DEFINITION_PREFIX)
        || line.starts_with(APPEARANCE_PREFIX)
        || line == OBSERVATIONS_HEADER
        || line == VERDICTS_HEADER
}

fn check_line(section: &'static str, line: &str, item: bool) -> Result<()> {
    let bad = |reason: &str| Error::ReportParse {
        section,
        reason: reason.to_string(),
    };
    if line.trim().is_empty() {
        return Err(bad("empty section content"));
    }
    if line.contains(['\n', '\r']) {
        return Err(bad("content spans multiple lines"));
    }
    if item && is_header_line(line) {
        return Err(bad("item collides with a section header"));
    }
    Ok(())
}

impl StructuredReport {
    /// Checks the invariants the serialized format depends on.
    pub fn validate(&self) -> Result<()> {
        check_line("definition", &self.definition, false)?;
        check_line("appearance", &self.appearance, false)?;
        if self.observations.is_empty() {
            return Err(Error::ReportParse {
                section: "observations",
                reason: "no observations".into(),
            });
        }
        if self.verdicts.is_empty() {
            return Err(Error::ReportParse {
                section: "verdicts",
                reason: "no verdicts".into(),
            });
        }
        for o in &self.observations {
            check_line("observations", o, true)?;
        }
        for v in &self.verdicts {
            check_line("verdicts", v, true)?;
        }
        Ok(())
    }

    pub fn definition_line(&self) -> String {
        format!("{DEFINITION_PREFIX} {}", self.definition)
    }

    pub fn appearance_line(&self) -> String {
        format!("{APPEARANCE_PREFIX} {}", self.appearance)
    }

    /// The observation lines with their `Observation:` prefixes and trailing
    /// period removed; the raw findings the report was built from.
    pub fn findings(&self) -> Vec<String> {
        self.observations
            .iter()
            .map(|o| {
                let s = o.strip_prefix("Observation:").unwrap_or(o).trim();
                s.strip_suffix('.').unwrap_or(s).to_string()
            })
            .collect()
    }
}

pub fn serialize_report(r: &StructuredReport) -> Result<String> {
    r.validate()?;
    let mut out = String::new();
    out.push_str(&r.definition_line());
    out.push('\n');
    out.push_str(&r.appearance_line());
    out.push('\n');
    out.push_str(OBSERVATIONS_HEADER);
    out.push('\n');
    for o in &r.observations {
        out.push_str(o);
        out.push('\n');
    }
    out.push_str(VERDICTS_HEADER);
    out.push('\n');
    for v in &r.verdicts {
        out.push_str(v);
        out.push('\n');
    }
    Ok(out)
}

fn strip_header<'a>(line: &'a str, prefix: &str) -> &'a str {
    let rest = &line[prefix.len()..];
    rest.strip_prefix(' ').unwrap_or(rest)
}

/// Parses the serialized form. The disease label travels outside the text
/// (corpus records carry it), so the caller supplies it.
pub fn parse_report(s: &str, disease: &str) -> Result<StructuredReport> {
    let lines: Vec<&str> = s.strip_suffix('\n').unwrap_or(s).split('\n').collect();
    let mut headers: [Option<usize>; 4] = [None; 4];
    const NAMES: [&str; 4] = ["definition", "appearance", "observations", "verdicts"];
    for (i, line) in lines.iter().enumerate() {
        let slot = if line.starts_with(DEFINITION_PREFIX) {
            0
        } else if line.starts_with(APPEARANCE_PREFIX) {
            1
        } else if *line == OBSERVATIONS_HEADER {
            2
        } else if *line == VERDICTS_HEADER {
            3
        } else {
            continue;
        };
        if headers[slot].is_some() {
            return Err(Error::ReportParse {
                section: NAMES[slot],
                reason: "duplicate section header".into(),
            });
        }
        headers[slot] = Some(i);
    }
    let mut at = [0usize; 4];
    for k in 0..4 {
        at[k] = headers[k].ok_or(Error::ReportParse {
            section: NAMES[k],
            reason: "missing section header".into(),
        })?;
    }
    // Fixed layout: definition on line 0, appearance on line 1, then the two lists.
    let expected_start = [0, 1, 2];
    for k in 0..3 {
        if at[k] != expected_start[k] {
            return Err(Error::ReportParse {
                section: NAMES[k],
                reason: format!("expected on line {}, found on line {}", expected_start[k] + 1, at[k] + 1),
            });
        }
    }
    if at[3] < at[2] {
        return Err(Error::ReportParse {
            section: "verdicts",
            reason: "verdicts precede observations".into(),
        });
    }
    let report = StructuredReport {
        disease: disease.to_string(),
        definition: strip_header(lines[0], DEFINITION_PREFIX).to_string(),
        appearance: strip_header(lines[1], APPEARANCE_PREFIX).to_string(),
        observations: lines[at[2] + 1..at[3]].iter().map(|s| s.to_string()).collect(),
        verdicts: lines[at[3] + 1..].iter().map(|s| s.to_string()).collect(),
    };
    report.validate()?;
    Ok(report)
}

/// Report generation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Template,
    Llm,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template" => Ok(Backend::Template),
            "llm" => Ok(Backend::Llm),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

/// A generated report plus any warnings raised on the way (e.g. fallback).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub report: StructuredReport,
    pub warnings: Vec<String>,
}

fn observations_and_verdicts(disease: &str, findings: &[String]) -> (Vec<String>, Vec<String>) {
    let findings: Vec<&str> = findings
        .iter()
        .map(|f| f.trim())
        .filter(|f| !f.is_empty())
        .collect();
    if findings.is_empty() {
        return (
            vec!["Observation: no focal abnormality.".to_string()],
            vec![format!("Verdict: {disease} absent.")],
        );
    }
    let obs = findings
        .iter()
        .map(|f| format!("Observation: {}.", f.trim_end_matches('.')))
        .collect();
    (obs, vec![format!("Verdict: {disease} present.")])
}

/// Builds a report from the lexicon without any network access.
pub fn template_report(lexicon: &Lexicon, disease: &str, findings: &[String]) -> Result<StructuredReport> {
    contract!(!disease.is_empty(), "disease name must not be empty");
    let entry = lexicon.get(disease)?;
    let (observations, verdicts) = observations_and_verdicts(disease, findings);
    let report = StructuredReport {
        disease: disease.to_string(),
        definition: entry.definition.clone(),
        appearance: entry.appearance.clone(),
        observations,
        verdicts,
    };
    report.validate()?;
    Ok(report)
}

/// Generates a report with the requested backend.
///
/// The LLM backend sends both prompts, requires the answers to start with the
/// expected prefixes, retries each once and otherwise falls back to the
/// lexicon template with a warning.
pub fn generate_report(
    lexicon: &Lexicon,
    disease: &str,
    findings: &[String],
    backend: Backend,
    llm: Option<&LlmBackend>,
) -> Result<Generated> {
    match backend {
        Backend::Template => Ok(Generated {
            report: template_report(lexicon, disease, findings)?,
            warnings: Vec::new(),
        }),
        Backend::Llm => {
            let Some(llm) = llm else {
                let warning = "no llm endpoint configured; using template backend".to_string();
                log::warn!("{warning}");
                return Ok(Generated {
                    report: template_report(lexicon, disease, findings)?,
                    warnings: vec![warning],
                });
            };
            match llm_sections(llm, disease) {
                Ok((definition, appearance)) => {
                    let (observations, verdicts) = observations_and_verdicts(disease, findings);
                    let report = StructuredReport {
                        disease: disease.to_string(),
                        definition,
                        appearance,
                        observations,
                        verdicts,
                    };
                    report.validate()?;
                    Ok(Generated {
                        report,
                        warnings: Vec::new(),
                    })
                }
                Err(e) => {
                    let warning = format!("llm backend failed ({e}); using template backend");
                    log::warn!("{warning}");
                    Ok(Generated {
                        report: template_report(lexicon, disease, findings)?,
                        warnings: vec![warning],
                    })
                }
            }
        }
    }
}

fn llm_sections(llm: &LlmBackend, disease: &str) -> Result<(String, String)> {
    let definition = llm.ask_with_prefix(&render_definition_prompt(disease)?, DEFINITION_PREFIX)?;
    let appearance = llm.ask_with_prefix(&render_appearance_prompt(disease)?, APPEARANCE_PREFIX)?;
    Ok((definition, appearance))
}

/// One record of the line-delimited report corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub disease: String,
    pub report_text: String,
}

impl ReportRecord {
    pub fn report(&self) -> Result<StructuredReport> {
        parse_report(&self.report_text, &self.disease)
    }
}

pub fn write_report_corpus(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}

pub fn read_report_corpus(path: &Path) -> Result<Vec<ReportRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Writes a single serialized report to `out`.
pub fn write_report(path: &Path, r: &StructuredReport) -> Result<()> {
    let text = serialize_report(r)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex_report() -> StructuredReport {
        template_report(
            &Lexicon::bundled(),
            "atelectasis",
            &["left lower lobe opacity".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn golden_prompts() {
        assert_eq!(
            render_definition_prompt("atelectasis").unwrap(),
            "Define atelectasis. Give me only a single paragraph and short definition of the disease."
        );
        assert_eq!(
            render_appearance_prompt("atelectasis").unwrap(),
            "What are the distinguishing radiographic signs of atelectasis compared to other similar conditions?"
        );
        assert_eq!(
            render_definition_prompt("pneumothorax").unwrap(),
            "Define pneumothorax. Give me only a single paragraph and short definition of the disease."
        );
    }

    #[test]
    fn prompt_edge_cases() {
        assert!(render_appearance_prompt("").is_err());
        assert!(render_definition_prompt("").is_err());
        assert_eq!(
            render_definition_prompt("a]b").unwrap(),
            "Define a]b. Give me only a single paragraph and short definition of the disease."
        );
        let uni = "épanchement pleural 胸水";
        assert!(render_appearance_prompt(uni).unwrap().contains(uni));
    }

    #[test]
    fn templates_contain_placeholder_once() {
        for t in [DEFINITION_PROMPT, APPEARANCE_PROMPT] {
            assert_eq!(t.template.matches(DISEASE_PLACEHOLDER).count(), 1, "{}", t.name);
        }
    }

    #[test]
    fn template_report_has_prefixes() {
        let text = serialize_report(&lex_report()).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("Definition:"));
        assert!(lines.next().unwrap().starts_with("Radiographic characteristics:"));
        assert!(text.contains("Observation: left lower lobe opacity."));
        assert!(text.contains("Verdict: atelectasis present."));
    }

    #[test]
    fn unknown_disease_is_a_lexicon_miss() {
        let err = template_report(&Lexicon::bundled(), "scurvy", &[]).unwrap_err();
        assert!(matches!(err, Error::LexiconMiss(_)));
    }

    #[test]
    fn round_trip() {
        let r = lex_report();
        assert_eq!(parse_report(&serialize_report(&r).unwrap(), "atelectasis").unwrap(), r);
    }

    #[test]
    fn missing_verdicts_names_section() {
        let text = serialize_report(&lex_report()).unwrap();
        let cut = text.split("Verdicts:").next().unwrap();
        match parse_report(cut, "atelectasis") {
            Err(Error::ReportParse { section, .. }) => assert_eq!(section, "verdicts"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_header_rejected() {
        let text = serialize_report(&lex_report()).unwrap() + "Observations:\n";
        match parse_report(&text, "x") {
            Err(Error::ReportParse { section, reason }) => {
                assert_eq!(section, "observations");
                assert!(reason.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn only_identity_section_order_parses() {
        let r = lex_report();
        let blocks = [
            vec![r.definition_line()],
            vec![r.appearance_line()],
            std::iter::once(OBSERVATIONS_HEADER.to_string())
                .chain(r.observations.clone())
                .collect::<Vec<_>>(),
            std::iter::once(VERDICTS_HEADER.to_string())
                .chain(r.verdicts.clone())
                .collect::<Vec<_>>(),
        ];
        let mut perms = Vec::new();
        permute(&mut vec![0, 1, 2, 3], 0, &mut perms);
        assert_eq!(perms.len(), 24);
        let mut parsed = 0;
        for p in perms {
            let text: String = p
                .iter()
                .flat_map(|&i| blocks[i].iter())
                .map(|l| format!("{l}\n"))
                .collect();
            if let Ok(back) = parse_report(&text, "atelectasis") {
                assert_eq!(p, vec![0, 1, 2, 3]);
                assert_eq!(back, r);
                parsed += 1;
            }
        }
        assert_eq!(parsed, 1);
    }

    fn permute(v: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == v.len() {
            out.push(v.clone());
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, out);
            v.swap(k, i);
        }
    }

    #[test]
    fn empty_findings_give_absent_verdict() {
        let r = template_report(&Lexicon::bundled(), "edema", &[]).unwrap();
        assert_eq!(r.verdicts, vec!["Verdict: edema absent.".to_string()]);
        assert!(!r.observations.is_empty());
    }

    #[test]
    fn findings_recovered_from_observations() {
        assert_eq!(lex_report().findings(), vec!["left lower lobe opacity".to_string()]);
    }

    #[test]
    fn llm_without_endpoint_falls_back() {
        let g = generate_report(&Lexicon::bundled(), "atelectasis", &[], Backend::Llm, None).unwrap();
        assert_eq!(g.warnings.len(), 1);
        assert_eq!(g.report, template_report(&Lexicon::bundled(), "atelectasis", &[]).unwrap());
    }
}
