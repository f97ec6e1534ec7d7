//! Editing-pair construction and the human review gate.
//!
//! Two sources of pairs: prompt-to-prompt generation on a checkpoint that
//! was first fine-tuned on images of the target concept ([`cep2p`]), and
//! ingredient removal by inpainting, used in both directions ([`inpaint`]).
//! Every pair starts `Pending` and only reaches the exported dataset after an
//! explicit approval in the [`review`] queue.

pub mod cep2p;
pub mod inpaint;
pub mod review;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ImageRef, ManifestRow};
use crate::hashing::digest_parts_hex;
use crate::providers::ProviderError;

pub use cep2p::{
    build_cep2p_pairs, plan_concept_enhancement, run_concept_enhancement, ConceptPlan, ConceptRun,
    PairRequest, ProvenanceRow,
};
pub use inpaint::{build_inpaint_pairs, parse_elements};
pub use review::{
    Clock, EditExportRow, Lease, ManualClock, PreferenceCandidate, PreferenceChoice,
    PreferenceQueue, Queue, QueueEntry, ReviewError, ReviewQueue, ReviewState, ReviewStats, Reviewable,
    SystemClock,
};

pub const DEFAULT_RHO_GRID: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const DEFAULT_SOURCE_FRACTION: f64 = 0.25;
pub const DEFAULT_LEASE_SECS: u64 = 600;

#[derive(Debug, Error)]
pub enum EditsetError {
    #[error("concept plan needs at least one target prompt (and source prompts when n_source > 0)")]
    NoPrompts,
    #[error("invalid concept plan: {0}")]
    InvalidPlan(String),
    #[error("replacement fraction {0} outside [0, 1]")]
    InvalidRho(f64),
    #[error("no seeds given")]
    NoSeeds,
    #[error("fine-tune failed: {0}")]
    FinetuneFailed(String),
    #[error("record {record_id}: {message}")]
    InvalidRecord { record_id: String, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    Add,
    Remove,
    Replace,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cep2p")]
    Cep2p,
    #[serde(rename = "inpaint")]
    Inpaint,
    #[serde(rename = "inpaint_reversed")]
    InpaintReversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Rejected,
    Skipped,
}

/// A candidate (source, target, instruction) editing example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub pair_id: String,
    pub source: ImageRef,
    pub target: ImageRef,
    pub instruction: String,
    pub edit_type: EditType,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Seed of the paired generation, for CEP2P pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Concept-enhanced checkpoint the pair was generated with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Record the pair was derived from, for inpainting pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    pub review: ReviewStatus,
}

impl EditPair {
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err(format!("pair {} has an empty instruction", self.pair_id));
        }
        if self.source.blob_id == self.target.blob_id && self.review != ReviewStatus::Rejected {
            return Err(format!(
                "pair {} has identical source and target but is not rejected",
                self.pair_id
            ));
        }
        if (self.method == Method::Cep2p) != self.rho.is_some() {
            return Err(format!(
                "pair {}: rho must be present exactly for cep2p pairs",
                self.pair_id
            ));
        }
        if let Some(rho) = self.rho {
            if !(0.0..=1.0).contains(&rho) {
                return Err(format!("pair {}: rho {rho} outside [0, 1]", self.pair_id));
            }
        }
        Ok(())
    }
}

impl ManifestRow for EditPair {
    fn sort_key(&self) -> String {
        self.pair_id.clone()
    }

    fn validate(&self) -> Result<(), String> {
        self.check_invariants()
    }
}

/// Stable pair id from the parts that define a pair.
pub(crate) fn pair_id(parts: &[&[u8]]) -> String {
    format!("pair-{}", &digest_parts_hex(parts)[..20])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditsetSettings {
    pub rho_grid: Vec<f64>,
    pub source_fraction: f64,
    pub elements_template: String,
    pub remove_template: String,
    pub add_template: String,
    pub lease_secs: u64,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
}

impl Default for EditsetSettings {
    fn default() -> Self {
        EditsetSettings {
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            source_fraction: DEFAULT_SOURCE_FRACTION,
            elements_template: "ELEMENTS: {name}\n\
                List the garnishes or ingredients in this photo that could be removed \
                without changing the dish, comma separated, or answer none."
                .into(),
            remove_template: "remove the {element} from the dish".into(),
            add_template: "add {element} to the dish".into(),
            lease_secs: DEFAULT_LEASE_SECS,
            poll_interval_ms: 2000,
            max_polls: 1000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MediaType;

    fn img(c: char) -> ImageRef {
        ImageRef::new(c.to_string().repeat(64), 8, 8, MediaType::Png).unwrap()
    }

    fn pair(src: char, tgt: char, method: Method, rho: Option<f64>) -> EditPair {
        EditPair {
            pair_id: "p".into(),
            source: img(src),
            target: img(tgt),
            instruction: "add steam".into(),
            edit_type: EditType::Add,
            method,
            rho,
            seed: None,
            checkpoint: None,
            record_id: None,
            review: ReviewStatus::Pending,
        }
    }

    #[test]
    fn invariants() {
        assert!(pair('a', 'b', Method::Cep2p, Some(0.4)).check_invariants().is_ok());
        assert!(pair('a', 'b', Method::Cep2p, None).check_invariants().is_err());
        assert!(pair('a', 'b', Method::Inpaint, Some(0.4)).check_invariants().is_err());
        assert!(pair('a', 'a', Method::Inpaint, None).check_invariants().is_err());
        let mut rejected = pair('a', 'a', Method::Cep2p, Some(0.0));
        rejected.review = ReviewStatus::Rejected;
        assert!(rejected.check_invariants().is_ok());
    }

    #[test]
    fn wire_names() {
        let json = serde_json::to_value(pair('a', 'b', Method::InpaintReversed, None)).unwrap();
        assert_eq!(json["method"], "inpaint_reversed");
        assert_eq!(json["review"], "pending");
        assert_eq!(json["edit_type"], "add");
        assert!(json.get("rho").is_none());
    }
}
