use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Authority,
    Urgency,
    SocialProof,
    GainFraming,
    TaskCompletion,
    Efficiency,
    Personalization,
    Reciprocity,
    Clarity,
    Identity,
    Emotion,
    Progress,
    FutureSelf,
    Commitment,
    Default,
}

impl StrategyTag {
    pub const ALL: [StrategyTag; 15] = [
        StrategyTag::Authority,
        StrategyTag::Urgency,
        StrategyTag::SocialProof,
        StrategyTag::GainFraming,
        StrategyTag::TaskCompletion,
        StrategyTag::Efficiency,
        StrategyTag::Personalization,
        StrategyTag::Reciprocity,
        StrategyTag::Clarity,
        StrategyTag::Identity,
        StrategyTag::Emotion,
        StrategyTag::Progress,
        StrategyTag::FutureSelf,
        StrategyTag::Commitment,
        StrategyTag::Default,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyTag::Authority => "authority",
            StrategyTag::Urgency => "urgency",
            StrategyTag::SocialProof => "social_proof",
            StrategyTag::GainFraming => "gain_framing",
            StrategyTag::TaskCompletion => "task_completion",
            StrategyTag::Efficiency => "efficiency",
            StrategyTag::Personalization => "personalization",
            StrategyTag::Reciprocity => "reciprocity",
            StrategyTag::Clarity => "clarity",
            StrategyTag::Identity => "identity",
            StrategyTag::Emotion => "emotion",
            StrategyTag::Progress => "progress",
            StrategyTag::FutureSelf => "future_self",
            StrategyTag::Commitment => "commitment",
            StrategyTag::Default => "default",
        }
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_ascii_lowercase();
        StrategyTag::ALL
            .into_iter()
            .find(|t| t.as_str() == lowered)
            .ok_or_else(|| format!("unknown strategy tag `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    Baseline,
    Exploitation,
    Exploration,
    LastRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub text: String,
    /// Unicode scalar count of `text`, always recomputed on load.
    #[serde(default)]
    pub char_count: usize,
    /// Count as printed in the source table; informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_char_count: Option<usize>,
    pub strategy_tags: BTreeSet<StrategyTag>,
    pub generation: Generation,
    #[serde(default)]
    pub rejected_by_review: bool,
}

/// A printed character count that disagrees with the recomputed one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCountMismatch {
    pub name: String,
    pub recomputed: usize,
    pub printed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageCatalog {
    pub entries: Vec<CatalogEntry>,
}

const STAGE1_JSON: &str = include_str!("../../assets/catalog/stage1.json");
const STAGE2_JSON: &str = include_str!("../../assets/catalog/stage2.json");

pub fn char_count(text: &str) -> usize {
    text.chars().count()
}

impl MessageCatalog {
    /// Validates entries and recomputes character counts.
    pub fn from_entries(mut entries: Vec<CatalogEntry>) -> Result<Self, DatasetError> {
        let mut names = HashSet::new();
        for e in &mut entries {
            if e.name.trim().is_empty() {
                return Err(DatasetError::EmptyText(format!("entry with empty name: `{}`", e.text)));
            }
            if !names.insert(e.name.clone()) {
                return Err(DatasetError::DuplicateName(e.name.clone()));
            }
            if e.text.is_empty() {
                return Err(DatasetError::EmptyText(e.name.clone()));
            }
            e.char_count = char_count(&e.text);
        }
        Ok(Self { entries })
    }

    pub fn from_json_str(s: &str) -> Result<Self, DatasetError> {
        let entries: Vec<CatalogEntry> = serde_json::from_str(s)?;
        Self::from_entries(entries)
    }

    /// Loads a catalog file: a JSON list of entries.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let s = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        Self::from_json_str(&s)
    }

    /// The 13 first-round variants.
    pub fn stage1() -> Self {
        Self::from_json_str(STAGE1_JSON).expect("shipped stage-1 catalog is valid")
    }

    /// The 23-entry second-round catalog: 15 exploitation, 5 exploration, 3 last-round.
    pub fn stage2() -> Self {
        Self::from_json_str(STAGE2_JSON).expect("shipped stage-2 catalog is valid")
    }

    pub fn get(&self, name: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry names carrying `tag`, sorted by name.
    pub fn variants_with_tag(&self, tag: StrategyTag) -> Vec<String> {
        let mut names: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.strategy_tags.contains(&tag))
            .map(|e| e.name.clone())
            .collect();
        names.sort();
        names
    }

    pub fn count_by_generation(&self, generation: Generation) -> usize {
        self.entries.iter().filter(|e| e.generation == generation).count()
    }

    pub fn char_count_mismatches(&self) -> Vec<CharCountMismatch> {
        self.entries
            .iter()
            .filter_map(|e| {
                let printed = e.paper_char_count?;
                (printed != e.char_count).then(|| CharCountMismatch {
                    name: e.name.clone(),
                    recomputed: e.char_count,
                    printed,
                })
            })
            .collect()
    }

    /// Entries not rejected by review.
    pub fn active(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.iter().filter(|e| !e.rejected_by_review)
    }

    /// Whether some entry carries exactly this tag set.
    pub fn has_tag_set(&self, tags: &BTreeSet<StrategyTag>) -> bool {
        self.entries.iter().any(|e| &e.strategy_tags == tags)
    }
}
