// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt sets and experiment plans.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reptypes::Condition;
use crate::rng::{fnv1a, mix};

const HEADER: [&str; 3] = ["id", "category", "prompt"];

/// The eight challenge categories of the prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    FineGrainedDetail,
    Imagination,
    SimpleDetail,
    StyleAndFormat,
    Complex,
    LinguisticStructures,
    Perspective,
    Quantity,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Self::FineGrainedDetail,
        Self::Imagination,
        Self::SimpleDetail,
        Self::StyleAndFormat,
        Self::Complex,
        Self::LinguisticStructures,
        Self::Perspective,
        Self::Quantity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FineGrainedDetail => "Fine-grained Detail",
            Self::Imagination => "Imagination",
            Self::SimpleDetail => "Simple Detail",
            Self::StyleAndFormat => "Style and Format",
            Self::Complex => "Complex",
            Self::LinguisticStructures => "Linguistic Structures",
            Self::Perspective => "Perspective",
            Self::Quantity => "Quantity",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::UnknownCategory(t.to_string()))
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub category: Category,
    pub text: String,
    /// Set on machine-generated candidates until explicitly approved.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unreviewed: bool,
}

impl PromptRecord {
    pub fn new(id: impl Into<String>, category: Category, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category,
            text: text.into(),
            unreviewed: false,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Parses prompt CSV text (`id,category,prompt`).
pub fn parse_prompts(text: &str) -> Result<Vec<PromptRecord>> {
    if text.trim().is_empty() {
        return Err(Error::Parse("prompt file is empty".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse(format!("missing `{name}` column")))
    };
    let (ci, cc, cp) = (col("id")?, col("category")?, col("prompt")?);

    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut texts: HashMap<String, String> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let field = |i: usize| {
            rec.get(i)
                .map(str::trim)
                .ok_or_else(|| Error::Parse(format!("row {}: too few fields", line + 2)))
        };
        let id = field(ci)?;
        let category: Category = field(cc)?.parse()?;
        let prompt = field(cp)?;
        if id.is_empty() {
            return Err(Error::Parse(format!("row {}: empty id", line + 2)));
        }
        if prompt.is_empty() {
            return Err(Error::Parse(format!("row {}: empty prompt", line + 2)));
        }
        if !ids.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        if let Some(first) = texts.get(prompt) {
            log::warn!("prompt `{id}` duplicates the text of `{first}`");
        } else {
            texts.insert(prompt.to_string(), id.to_string());
        }
        out.push(PromptRecord::new(id, category, prompt));
    }
    if out.is_empty() {
        return Err(Error::Parse("prompt file has no rows".into()));
    }
    Ok(out)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompts(&text)
}

pub fn prompts_to_csv(records: &[PromptRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::IoMessage(e.to_string());
    w.write_record(HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([r.id.as_str(), r.category.name(), r.text.as_str()])
            .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::IoMessage(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::IoMessage(e.to_string()))
}

pub fn save_prompts(path: &Path, records: &[PromptRecord]) -> Result<()> {
    std::fs::write(path, prompts_to_csv(records)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub prompt_id: String,
    pub replicate: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub prompts: Vec<PromptRecord>,
    pub seeds_per_prompt: u32,
    pub conditions: Vec<Condition>,
    pub backend_id: String,
    pub plan_seed: u64,
    pub seed_table: Vec<SeedEntry>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// `seed(prompt, r) = mix(plan_seed, fnv1a(id), r)`. Adding prompts never
/// shifts existing seeds.
pub fn derive_seed(plan_seed: u64, prompt_id: &str, replicate: u32) -> u64 {
    mix(&[plan_seed, fnv1a(prompt_id.as_bytes()), u64::from(replicate)])
}

impl ExperimentPlan {
    pub fn total_generations(&self) -> usize {
        self.prompts.len() * self.seeds_per_prompt as usize * self.conditions.len()
    }

    pub fn seed_for(&self, prompt_id: &str, replicate: u32) -> Option<u64> {
        self.seed_table
            .iter()
            .find(|e| e.prompt_id == prompt_id && e.replicate == replicate)
            .map(|e| e.seed)
    }

    /// Stable hash over the canonical JSON form.
    pub fn plan_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds_per_prompt == 0 {
            return Err(Error::InvalidConfig("seeds_per_prompt must be >= 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::InvalidConfig("plan has no conditions".into()));
        }
        if let Some(p) = self.prompts.iter().find(|p| p.unreviewed) {
            return Err(Error::Unreviewed(p.id.clone()));
        }
        let expected = self.prompts.len() * self.seeds_per_prompt as usize;
        if self.seed_table.len() != expected {
            return Err(Error::Integrity(format!(
                "seed table has {} entries, expected {expected}",
                self.seed_table.len()
            )));
        }
        let distinct: BTreeSet<u64> = self.seed_table.iter().map(|e| e.seed).collect();
        if distinct.len() != self.seed_table.len() {
            return Err(Error::Integrity("seed table is not injective".into()));
        }
        Ok(())
    }
}

pub fn build_plan<S: AsRef<str>>(
    prompts: &[PromptRecord],
    seeds_per_prompt: u32,
    conditions: &[S],
    backend_id: &str,
    plan_seed: u64,
) -> Result<ExperimentPlan> {
    let conditions = conditions
        .iter()
        .map(|c| c.as_ref().parse::<Condition>())
        .collect::<Result<Vec<_>>>()?;
    let mut ids = HashSet::new();
    for p in prompts {
        if !ids.insert(p.id.as_str()) {
            return Err(Error::DuplicateId(p.id.clone()));
        }
    }
    let seed_table = prompts
        .iter()
        .flat_map(|p| {
            (0..seeds_per_prompt).map(move |r| SeedEntry {
                prompt_id: p.id.clone(),
                replicate: r,
                seed: derive_seed(plan_seed, &p.id, r),
            })
        })
        .collect();
    let plan = ExperimentPlan {
        prompts: prompts.to_vec(),
        seeds_per_prompt,
        conditions,
        backend_id: backend_id.to_string(),
        plan_seed,
        seed_table,
        config_hash: None,
    };
    plan.validate()?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// External text-generation service. Returns prompt CSV text.
pub trait AugmentationService {
    fn complete(&self, source: &[PromptRecord], instruction: &str) -> Result<String>;
}

/// Requests candidate prompts. Every returned record is `unreviewed`.
pub fn augmentation_client(
    service: Option<&dyn AugmentationService>,
    source: &[PromptRecord],
    instruction: &str,
) -> Result<Vec<PromptRecord>> {
    let service = service
        .ok_or_else(|| Error::ServiceUnavailable("no augmentation adapter configured".into()))?;
    let payload = service.complete(source, instruction)?;
    let mut records =
        parse_prompts(&payload).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    for r in &mut records {
        r.unreviewed = true;
    }
    Ok(records)
}

/// Clears the review flag on the listed ids.
pub fn approve(records: &mut [PromptRecord], ids: &[&str]) -> Result<()> {
    for id in ids {
        let r = records
            .iter_mut()
            .find(|r| r.id == *id)
            .ok_or_else(|| Error::InvalidPrompt(format!("no candidate with id `{id}`")))?;
        r.unreviewed = false;
    }
    Ok(())
}
