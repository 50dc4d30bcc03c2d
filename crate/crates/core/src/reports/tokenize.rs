use std::collections::BTreeMap;

use super::{StructuredReport, OBSERVATIONS_HEADER, VERDICTS_HEADER};
use crate::data::vocab::{Vocab, BOS_ID, EOS_ID};
use crate::encoders::{Section, TextInput};
use crate::error::{Error, Result};

/// Lowercased word and punctuation tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn list_words(header: &str, items: &[String]) -> Vec<String> {
    let mut w = words(header);
    for item in items {
        w.extend(words(item));
    }
    w
}

/// Tokenizes a report into `<bos> definition appearance observations verdicts <eos>`.
///
/// Reports longer than `max_len` lose tokens from the end of the verdicts,
/// then the observations (each keeps at least its header token). Definition
/// and appearance are never cut.
pub fn tokenize_report(r: &StructuredReport, vocab: &Vocab, max_len: usize) -> Result<TextInput> {
    r.validate()?;
    let def = words(&r.definition_line());
    let app = words(&r.appearance_line());
    let mut obs = list_words(OBSERVATIONS_HEADER, &r.observations);
    let mut verd = list_words(VERDICTS_HEADER, &r.verdicts);
    let total = |o: &[String], v: &[String]| 2 + def.len() + app.len() + o.len() + v.len();
    let full = total(&obs, &verd);
    if full > max_len {
        let mut excess = full - max_len;
        let cut = excess.min(verd.len() - 1);
        verd.truncate(verd.len() - cut);
        excess -= cut;
        let cut = excess.min(obs.len() - 1);
        obs.truncate(obs.len() - cut);
        if total(&obs, &verd) > max_len {
            return Err(Error::Length {
                len: total(&obs, &verd),
                max_len,
            });
        }
    }
    let mut ids = vec![BOS_ID];
    let mut spans = BTreeMap::new();
    for (section, toks) in [
        (Section::Definition, &def),
        (Section::Appearance, &app),
        (Section::Observations, &obs),
        (Section::Verdicts, &verd),
    ] {
        let start = ids.len();
        ids.extend(toks.iter().map(|w| vocab.id(w)));
        spans.insert(section, start..ids.len());
    }
    ids.push(EOS_ID);
    let n = ids.len();
    let mut special = vec![false; n];
    special[0] = true;
    special[n - 1] = true;
    TextInput::new(ids, spans, special, vocab.len())
}

/// Tokenizes raw findings only, as a single observations span.
pub fn tokenize_findings(findings: &[String], vocab: &Vocab, max_len: usize) -> Result<TextInput> {
    let mut toks: Vec<String> = Vec::new();
    for f in findings {
        toks.extend(words(f));
    }
    if toks.is_empty() {
        return Err(Error::Degenerate("findings text is empty".into()));
    }
    if max_len < 3 {
        return Err(Error::Length {
            len: toks.len() + 2,
            max_len,
        });
    }
    toks.truncate(max_len - 2);
    let mut ids = vec![BOS_ID];
    ids.extend(toks.iter().map(|w| vocab.id(w)));
    ids.push(EOS_ID);
    let n = ids.len();
    let mut special = vec![false; n];
    special[0] = true;
    special[n - 1] = true;
    let mut spans = BTreeMap::new();
    spans.insert(Section::Observations, 1..n - 1);
    TextInput::new(ids, spans, special, vocab.len())
}
