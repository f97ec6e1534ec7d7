//! Leased review queues for edit pairs and preference judgements.
//!
//! A queue is a single-writer state machine. `next` hands the oldest
//! pending item to a reviewer under a time-limited lease; a reviewer asking
//! again while holding a live lease gets the same item back. Legal
//! transitions are `Pending -> {decided, Skipped}` and
//! `Skipped -> decided`; everything else is refused.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EditPair, EditType, Method, ReviewStatus};
use crate::data::{read_manifest, write_manifest, ImageRef, ManifestError, ManifestRow, PreferencePair};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReviewError {
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("pair {0} already has a final verdict")]
    AlreadyReviewed(String),
    #[error("nothing pending")]
    NothingPending,
    #[error("illegal transition for {pair_id}: {from} -> {to}")]
    IllegalTransition {
        pair_id: String,
        from: &'static str,
        to: &'static str,
    },
    #[error("pair {pair_id} is leased to {holder}")]
    LeasedToOther { pair_id: String, holder: String },
    #[error("unknown verdict {0:?}")]
    UnknownVerdict(String),
    #[error("reviewer id is empty")]
    EmptyReviewer,
}

/// Milliseconds since the Unix epoch; injectable for tests.
pub trait Clock: Send + Sync + Debug {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance_ms(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Review status of a queued item.
pub trait ReviewState:
    Copy + Eq + Debug + Serialize + DeserializeOwned + Send + Sync + 'static
{
    const PENDING: Self;
    const SKIPPED: Self;
    /// Every state, in display order.
    const ALL: &'static [Self];
    fn name(self) -> &'static str;
    fn parse(s: &str) -> Option<Self>;

    fn is_final(self) -> bool {
        self != Self::PENDING && self != Self::SKIPPED
    }
}

impl ReviewState for ReviewStatus {
    const PENDING: Self = ReviewStatus::Pending;
    const SKIPPED: Self = ReviewStatus::Skipped;
    const ALL: &'static [Self] = &[
        ReviewStatus::Pending,
        ReviewStatus::Approved,
        ReviewStatus::Rejected,
        ReviewStatus::Skipped,
    ];

    fn name(self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Approved => "approved",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Skipped => "skipped",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pending" => Some(ReviewStatus::Pending),
            "approved" | "approve" => Some(ReviewStatus::Approved),
            "rejected" | "reject" => Some(ReviewStatus::Rejected),
            "skipped" | "skip" => Some(ReviewStatus::Skipped),
            _ => None,
        }
    }
}

/// An item that can sit in a review queue.
pub trait Reviewable: Clone + Debug + Serialize + DeserializeOwned + Send + Sync {
    type State: ReviewState;
    fn id(&self) -> &str;
    fn state(&self) -> Self::State;
    fn set_state(&mut self, state: Self::State);
}

impl Reviewable for EditPair {
    type State = ReviewStatus;

    fn id(&self) -> &str {
        &self.pair_id
    }

    fn state(&self) -> ReviewStatus {
        self.review
    }

    fn set_state(&mut self, state: ReviewStatus) {
        self.review = state;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub reviewer: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: DeserializeOwned"))]
pub struct QueueEntry<T> {
    pub seq: u64,
    pub item: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at_ms: Option<u64>,
}

impl<T: Reviewable> ManifestRow for QueueEntry<T> {
    fn sort_key(&self) -> String {
        self.item.id().to_string()
    }
}

/// Counts by state name plus the number of live leases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub counts: BTreeMap<String, usize>,
    pub leased: usize,
    pub total: usize,
}

#[derive(Debug)]
pub struct Queue<T: Reviewable> {
    entries: Vec<QueueEntry<T>>,
    by_id: BTreeMap<String, usize>,
    lease_ms: u64,
    clock: std::sync::Arc<dyn Clock>,
}

pub type ReviewQueue = Queue<EditPair>;
pub type PreferenceQueue = Queue<PreferenceCandidate>;

impl<T: Reviewable> Queue<T> {
    pub fn new(lease_secs: u64, clock: std::sync::Arc<dyn Clock>) -> Self {
        Queue {
            entries: Vec::new(),
            by_id: BTreeMap::new(),
            lease_ms: lease_secs.saturating_mul(1000),
            clock,
        }
    }

    fn from_entries(
        mut entries: Vec<QueueEntry<T>>,
        lease_secs: u64,
        clock: std::sync::Arc<dyn Clock>,
    ) -> Self {
        entries.sort_by_key(|e| e.seq);
        let by_id = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.item.id().to_string(), i))
            .collect();
        Queue {
            entries,
            by_id,
            lease_ms: lease_secs.saturating_mul(1000),
            clock,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds items not already queued; returns how many were added.
    pub fn enqueue(&mut self, items: impl IntoIterator<Item = T>) -> usize {
        let mut added = 0;
        for item in items {
            if self.by_id.contains_key(item.id()) {
                continue;
            }
            let seq = self.entries.last().map_or(0, |e| e.seq + 1);
            self.by_id.insert(item.id().to_string(), self.entries.len());
            self.entries.push(QueueEntry {
                seq,
                item,
                lease: None,
                reviewer: None,
                decided_at_ms: None,
            });
            added += 1;
        }
        added
    }

    pub fn get(&self, id: &str) -> Option<&QueueEntry<T>> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[QueueEntry<T>] {
        &self.entries
    }

    fn live_lease(e: &QueueEntry<T>, now: u64) -> Option<&Lease> {
        e.lease.as_ref().filter(|l| l.expires_at_ms > now)
    }

    /// The reviewer's current lease, or the oldest unleased pending item
    /// under a fresh lease.
    pub fn next(&mut self, reviewer: &str) -> Result<T, ReviewError> {
        let reviewer = reviewer.trim();
        if reviewer.is_empty() {
            return Err(ReviewError::EmptyReviewer);
        }
        let now = self.clock.now_ms();
        let held = self.entries.iter().position(|e| {
            !e.item.state().is_final()
                && Self::live_lease(e, now)
                    .is_some_and(|l| l.reviewer == reviewer)
        });
        let idx = match held {
            Some(i) => i,
            None => self
                .entries
                .iter()
                .position(|e| e.item.state() == T::State::PENDING && Self::live_lease(e, now).is_none())
                .ok_or(ReviewError::NothingPending)?,
        };
        let entry = &mut self.entries[idx];
        entry.lease = Some(Lease {
            reviewer: reviewer.to_string(),
            expires_at_ms: now.saturating_add(self.lease_ms),
        });
        Ok(entry.item.clone())
    }

    /// Records a verdict. Items leased to someone else are refused until
    /// the lease expires.
    pub fn verdict(
        &mut self,
        id: &str,
        verdict: T::State,
        reviewer: &str,
    ) -> Result<T, ReviewError> {
        let reviewer = reviewer.trim();
        if reviewer.is_empty() {
            return Err(ReviewError::EmptyReviewer);
        }
        let now = self.clock.now_ms();
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| ReviewError::UnknownPair(id.to_string()))?;
        let entry = &self.entries[idx];
        let from = entry.item.state();
        if from.is_final() {
            return Err(ReviewError::AlreadyReviewed(id.to_string()));
        }
        let legal = verdict != T::State::PENDING && !(from == T::State::SKIPPED && !verdict.is_final());
        if !legal {
            return Err(ReviewError::IllegalTransition {
                pair_id: id.to_string(),
                from: from.name(),
                to: verdict.name(),
            });
        }
        if let Some(l) = Self::live_lease(entry, now) {
            if l.reviewer != reviewer {
                return Err(ReviewError::LeasedToOther {
                    pair_id: id.to_string(),
                    holder: l.reviewer.clone(),
                });
            }
        }
        let entry = &mut self.entries[idx];
        entry.item.set_state(verdict);
        entry.lease = None;
        entry.reviewer = Some(reviewer.to_string());
        entry.decided_at_ms = Some(now);
        Ok(entry.item.clone())
    }

    /// Parses a verdict name and applies it.
    pub fn verdict_named(&mut self, id: &str, verdict: &str, reviewer: &str) -> Result<T, ReviewError> {
        let v = T::State::parse(verdict).ok_or_else(|| ReviewError::UnknownVerdict(verdict.to_string()))?;
        self.verdict(id, v, reviewer)
    }

    pub fn stats(&self) -> ReviewStats {
        let now = self.clock.now_ms();
        let mut counts: BTreeMap<String, usize> =
            T::State::ALL.iter().map(|s| (s.name().to_string(), 0)).collect();
        for e in &self.entries {
            *counts.entry(e.item.state().name().to_string()).or_default() += 1;
        }
        ReviewStats {
            counts,
            leased: self
                .entries
                .iter()
                .filter(|e| !e.item.state().is_final() && Self::live_lease(e, now).is_some())
                .count(),
            total: self.entries.len(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<usize, ManifestError> {
        write_manifest(path, &self.entries)
    }

    pub fn load(
        path: &Path,
        lease_secs: u64,
        clock: std::sync::Arc<dyn Clock>,
    ) -> Result<Self, ManifestError> {
        let entries: Vec<QueueEntry<T>> = read_manifest(path)?;
        Ok(Self::from_entries(entries, lease_secs, clock))
    }
}

/// Exported editing example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditExportRow {
    pub pair_id: String,
    pub instruction: String,
    pub source: ImageRef,
    pub target: ImageRef,
    pub edit_type: EditType,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl ManifestRow for EditExportRow {
    fn sort_key(&self) -> String {
        self.pair_id.clone()
    }
}

impl Queue<EditPair> {
    /// Approved pairs only, sorted by pair id.
    pub fn export_approved(&self) -> Vec<EditExportRow> {
        let mut rows: Vec<EditExportRow> = self
            .entries
            .iter()
            .map(|e| &e.item)
            .filter(|p| p.review == ReviewStatus::Approved)
            .map(|p| EditExportRow {
                pair_id: p.pair_id.clone(),
                instruction: p.instruction.clone(),
                source: p.source.clone(),
                target: p.target.clone(),
                edit_type: p.edit_type,
                method: p.method,
                rho: p.rho,
                checkpoint: p.checkpoint.clone(),
            })
            .collect();
        rows.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceChoice {
    Pending,
    PreferA,
    PreferB,
    Skipped,
}

impl ReviewState for PreferenceChoice {
    const PENDING: Self = PreferenceChoice::Pending;
    const SKIPPED: Self = PreferenceChoice::Skipped;
    const ALL: &'static [Self] = &[
        PreferenceChoice::Pending,
        PreferenceChoice::PreferA,
        PreferenceChoice::PreferB,
        PreferenceChoice::Skipped,
    ];

    fn name(self) -> &'static str {
        match self {
            PreferenceChoice::Pending => "pending",
            PreferenceChoice::PreferA => "prefer_a",
            PreferenceChoice::PreferB => "prefer_b",
            PreferenceChoice::Skipped => "skipped",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pending" => Some(PreferenceChoice::Pending),
            "a" | "prefer_a" => Some(PreferenceChoice::PreferA),
            "b" | "prefer_b" => Some(PreferenceChoice::PreferB),
            "skip" | "skipped" => Some(PreferenceChoice::Skipped),
            _ => None,
        }
    }
}

/// Two images of one prompt awaiting an A-vs-B judgement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceCandidate {
    pub candidate_id: String,
    pub prompt: String,
    pub image_a: ImageRef,
    pub image_b: ImageRef,
    pub choice: PreferenceChoice,
}

impl ManifestRow for PreferenceCandidate {
    fn sort_key(&self) -> String {
        self.candidate_id.clone()
    }

    fn validate(&self) -> Result<(), String> {
        if self.image_a.blob_id == self.image_b.blob_id {
            return Err(format!("candidate {} shows the same image twice", self.candidate_id));
        }
        Ok(())
    }
}

impl Reviewable for PreferenceCandidate {
    type State = PreferenceChoice;

    fn id(&self) -> &str {
        &self.candidate_id
    }

    fn state(&self) -> PreferenceChoice {
        self.choice
    }

    fn set_state(&mut self, state: PreferenceChoice) {
        self.choice = state;
    }
}

impl Queue<PreferenceCandidate> {
    /// Decided candidates as preference pairs, annotated with the reviewer.
    pub fn export_preferences(&self) -> Vec<PreferencePair> {
        let mut out: Vec<PreferencePair> = self
            .entries
            .iter()
            .filter_map(|e| {
                let c = &e.item;
                let (win, lose) = match c.choice {
                    PreferenceChoice::PreferA => (&c.image_a, &c.image_b),
                    PreferenceChoice::PreferB => (&c.image_b, &c.image_a),
                    _ => return None,
                };
                PreferencePair::new(
                    c.prompt.clone(),
                    win.clone(),
                    lose.clone(),
                    e.reviewer.clone().unwrap_or_default(),
                )
                .ok()
            })
            .collect();
        out.sort_by_key(|p| p.sort_key());
        out
    }
}
