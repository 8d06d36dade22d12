//! The annotation protocol: aspects, their claim categories and the
//! reference keyword phrases for each claim.
//!
//! The protocol is data. The bundled `protocol_v1.json` is the canonical
//! instance; alternative files follow the same `{aspect: {claim: [keywords]}}`
//! layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde_json::{Map, Value};

use crate::model::{Aspect, Claim};
use crate::text::normalize_phrase;
use crate::{Error, Result};

pub const DEFAULT_PROTOCOL_JSON: &str = include_str!("../data/protocol_v1.json");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub aspect: Aspect,
    pub claim: Claim,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationProtocol {
    entries: Vec<ProtocolEntry>,
    owner: [Aspect; 18],
}

impl AnnotationProtocol {
    /// The bundled protocol.
    pub fn default_protocol() -> Self {
        Self::from_json_str(DEFAULT_PROTOCOL_JSON).expect("bundled protocol is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json_str(&raw)
    }

    pub fn from_json_str(raw: &str) -> Result<Self> {
        let root: Map<String, Value> = serde_json::from_str(raw)?;
        let mut seen: HashMap<Claim, Aspect> = HashMap::new();
        let mut keyword_owner: HashMap<String, Claim> = HashMap::new();
        let mut entries = Vec::new();

        for (aspect_key, claims) in &root {
            let aspect = Aspect::parse_loose(aspect_key).ok_or_else(|| Error::UnknownAspect(aspect_key.clone()))?;
            let claims = claims
                .as_object()
                .ok_or_else(|| Error::Schema(format!("aspect {aspect_key:?} must map claims to keyword lists")))?;
            for (claim_key, keywords) in claims {
                let claim = Claim::parse_loose(claim_key)
                    .filter(|c| loose_eq(c.wire_name(), claim_key))
                    .ok_or_else(|| Error::UnknownClaim(claim_key.clone()))?;
                if seen.insert(claim, aspect).is_some() {
                    return Err(Error::DuplicateClaim(claim_key.clone()));
                }
                let list = keywords
                    .as_array()
                    .ok_or_else(|| Error::Schema(format!("keywords of {claim_key:?} must be a list")))?;
                if list.is_empty() {
                    return Err(Error::EmptyKeywordList(claim_key.clone()));
                }
                let mut kws = Vec::with_capacity(list.len());
                for kw in list {
                    let kw = kw
                        .as_str()
                        .ok_or_else(|| Error::Schema(format!("keyword of {claim_key:?} is not a string")))?;
                    let norm = normalize_phrase(kw);
                    if norm.is_empty() {
                        return Err(Error::EmptyKeywordList(claim_key.clone()));
                    }
                    if keyword_owner.insert(norm.clone(), claim).is_some() {
                        return Err(Error::DuplicateKeyword(norm));
                    }
                    kws.push(norm);
                }
                entries.push(ProtocolEntry { aspect, claim, keywords: kws });
            }
        }

        if let Some(missing) = Claim::ALL.iter().find(|c| !seen.contains_key(c)) {
            return Err(Error::MissingClaim(missing.wire_name().to_string()));
        }
        entries.sort_by_key(|e| e.claim);
        let mut owner = [Aspect::Temperature; 18];
        for e in &entries {
            owner[e.claim as usize] = e.aspect;
        }
        Ok(AnnotationProtocol { entries, owner })
    }

    pub fn to_json(&self) -> Value {
        let mut root: BTreeMap<&str, Map<String, Value>> = BTreeMap::new();
        for e in &self.entries {
            root.entry(e.aspect.wire_name())
                .or_default()
                .insert(e.claim.wire_name().to_string(), Value::from(e.keywords.clone()));
        }
        serde_json::to_value(root).expect("plain map")
    }

    pub fn entries(&self) -> &[ProtocolEntry] {
        &self.entries
    }

    /// The aspect a claim belongs to.
    pub fn claim_aspect(&self, claim: Claim) -> Aspect {
        self.owner[claim as usize]
    }

    pub fn claims_of(&self, aspect: Aspect) -> impl Iterator<Item = Claim> + '_ {
        self.entries.iter().filter(move |e| e.aspect == aspect).map(|e| e.claim)
    }

    /// Aspects that own at least one claim, in enum order.
    pub fn aspects(&self) -> Vec<Aspect> {
        Aspect::ALL.into_iter().filter(|a| self.claims_of(*a).next().is_some()).collect()
    }

    pub fn keywords(&self, claim: Claim) -> &[String] {
        &self.entries[claim as usize].keywords
    }
}

fn loose_eq(a: &str, b: &str) -> bool {
    let k = |s: &str| s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect::<String>();
    k(a) == k(b)
}
