use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../data/lexicon.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub name: String,
    pub definition: String,
    pub appearance: String,
    /// Finding terms; the first is the most characteristic.
    pub findings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    #[serde(rename = "disease")]
    entries: Vec<LexiconEntry>,
}

impl Lexicon {
    /// The lexicon shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED).expect("bundled lexicon parses")
    }

    pub fn from_toml(src: &str) -> Result<Self> {
        let lex: Lexicon = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        for e in &lex.entries {
            if e.name.trim().is_empty()
                || e.definition.trim().is_empty()
                || e.appearance.trim().is_empty()
                || e.findings.is_empty()
            {
                return Err(Error::Config(format!(
                    "lexicon entry `{}` has an empty field",
                    e.name
                )));
            }
        }
        Ok(lex)
    }

    /// Toy diseases built from a fixed word pool, deterministic in `seed`.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        const POOL: &[&str] = &[
            "granular", "diffuse", "focal", "streaky", "dense", "faint", "band", "cluster",
            "rim", "ring", "patch", "plaque", "haze", "web", "nodular", "cystic", "bright",
            "dark", "sharp", "blurred", "apical", "basal", "central", "peripheral",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n)
            .map(|i| {
                let mut pick = |k: usize| -> String {
                    POOL.choose_multiple(&mut rng, k)
                        .copied()
                        .collect::<Vec<_>>()
                        .join(" ")
                };
                let name = format!("toy disease {i}");
                LexiconEntry {
                    definition: format!("{name} is a synthetic condition marked by {} change.", pick(3)),
                    appearance: format!("A {} region with {} margins.", pick(2), pick(2)),
                    findings: vec![format!("{} opacity", pick(2)), "opacity".to_string()],
                    name,
                }
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn get(&self, disease: &str) -> Result<&LexiconEntry> {
        self.entries
            .iter()
            .find(|e| e.name == disease)
            .ok_or_else(|| Error::LexiconMiss(disease.to_string()))
    }

    /// The first `n` entries, used as class labels 0..n.
    pub fn take(&self, n: usize) -> Result<&[LexiconEntry]> {
        if n > self.entries.len() {
            return Err(Error::Contract(format!(
                "{n} classes requested but the lexicon has {} diseases",
                self.entries.len()
            )));
        }
        Ok(&self.entries[..n])
    }
}
