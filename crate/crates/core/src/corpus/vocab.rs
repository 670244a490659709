use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Frozen token ↔ id map. Ids are dense: 0 is padding, 1 is unknown, the
/// rest follow descending frequency with lexicographic tie-break.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr")]
pub struct Vocabulary {
    surfaces: Vec<String>,
    frequencies: Vec<u64>,
    min_frequency: u64,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

#[derive(Deserialize)]
struct VocabRepr {
    surfaces: Vec<String>,
    frequencies: Vec<u64>,
    min_frequency: u64,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_parts(r.surfaces, r.frequencies, r.min_frequency)
    }
}

impl Vocabulary {
    pub fn build<'a, I, S>(sequences: I, min_frequency: u64) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for seq in sequences {
            for tok in seq {
                *counts.entry(tok.as_ref().to_string()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(s, c)| *c >= min_frequency && s != PAD && s != UNK)
            .collect();
        // BTreeMap iteration is already lexicographic, so a stable sort on
        // frequency keeps the tie-break.
        kept.sort_by(|a, b| b.1.cmp(&a.1));
        let mut surfaces = alloc::vec![PAD.to_string(), UNK.to_string()];
        let mut frequencies = alloc::vec![0, 0];
        for (s, c) in kept {
            surfaces.push(s);
            frequencies.push(c);
        }
        Self::from_parts(surfaces, frequencies, min_frequency)
    }

    /// Rebuilds from stored surfaces (id order) and frequencies.
    pub fn from_parts(surfaces: Vec<String>, frequencies: Vec<u64>, min_frequency: u64) -> Self {
        let index = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self {
            surfaces,
            frequencies,
            min_frequency,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.len() <= 2
    }

    pub fn min_frequency(&self) -> u64 {
        self.min_frequency
    }

    pub fn id(&self, surface: &str) -> u32 {
        self.index.get(surface).copied().unwrap_or(UNK_ID)
    }

    pub fn surface(&self, id: u32) -> &str {
        self.surfaces.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequencies.get(id as usize).copied().unwrap_or(0)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.surface(i)).collect()
    }
}
