//! Persistent vulnerability hypotheses and their lifecycle.
//!
//! Confidence and status live only here, never on graph nodes. Status moves
//! through `proposed → investigating → supported | refuted` as evidence
//! accrues, drops to `rejected` when confidence is lowered to 0.1 or below,
//! and is frozen once a QA verdict (confirmed or rejected) is applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::sha256_hex;
use crate::storage::FileStore;

pub const REJECT_THRESHOLD: f64 = 0.1;
pub const HYPOTHESES_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Critical,
    High,
    Medium,
    Low,
    Info,
}

impl Severity {
    /// 0 for critical, increasing toward info.
    pub fn rank(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Proposed,
    Investigating,
    Supported,
    Refuted,
    Confirmed,
    Rejected,
}

macro_rules! display_as_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).ok();
                f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
            }
        }
    )*};
}

display_as_serde!(Status, Severity, Verdict, Stance);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Supports,
    Refutes,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirmed,
    Rejected,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub graph: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub card_id: String,
    pub note: String,
    pub stance: Stance,
    pub added_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HypothesisProperties {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[serde(default)]
    pub source_files: BTreeSet<String>,
    #[serde(default)]
    pub affected_functions: BTreeSet<String>,
    /// Normalized key of the plan frame whose investigation formed this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub verdict: Verdict,
    pub reasoning: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub title: String,
    pub vuln_type: String,
    pub severity: Severity,
    pub confidence: f64,
    pub status: Status,
    #[serde(default)]
    pub node_refs: BTreeSet<NodeRef>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
    pub reasoning: String,
    #[serde(default)]
    pub properties: HypothesisProperties,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<VerdictRecord>,
    pub created_by: String,
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Hypothesis {
    /// True once a confirmed/rejected QA verdict has been applied.
    pub fn is_finalized(&self) -> bool {
        matches!(
            self.verdict,
            Some(VerdictRecord {
                verdict: Verdict::Confirmed | Verdict::Rejected,
                ..
            })
        )
    }

    pub fn is_open(&self) -> bool {
        !matches!(self.status, Status::Confirmed | Status::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisCandidate {
    pub title: String,
    #[serde(rename = "type", alias = "vuln_type")]
    pub vuln_type: String,
    pub severity: Severity,
    pub confidence: f64,
    #[serde(default)]
    pub node_ids: Vec<String>,
    #[serde(default)]
    pub reasoning: String,
}

impl HypothesisCandidate {
    pub fn validate(&self) -> Result<()> {
        if normalize_title(&self.title).is_empty() {
            return Err(Error::Validation("hypothesis title is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Where a proposal came from: resolved node references plus the
/// properties derived from them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub node_refs: BTreeSet<NodeRef>,
    pub properties: HypothesisProperties,
}

/// Casefold and collapse internal whitespace.
pub fn normalize_title(title: &str) -> String {
    title
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn hypothesis_id(title: &str) -> String {
    format!("hyp_{}", &sha256_hex(normalize_title(title).as_bytes())[..12])
}

fn heuristic_status(evidence: &[Evidence]) -> Status {
    let supports = evidence.iter().filter(|e| e.stance == Stance::Supports).count();
    let refutes = evidence.iter().filter(|e| e.stance == Stance::Refutes).count();
    if refutes > supports {
        Status::Refuted
    } else if supports >= 2 {
        Status::Supported
    } else {
        Status::Investigating
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisDoc {
    pub schema_version: u64,
    #[serde(default)]
    pub hypotheses: BTreeMap<String, Hypothesis>,
}

impl Default for HypothesisDoc {
    fn default() -> Self {
        HypothesisDoc {
            schema_version: HYPOTHESES_SCHEMA_VERSION,
            hypotheses: BTreeMap::new(),
        }
    }
}

impl HypothesisDoc {
    pub fn get(&self, id: &str) -> Result<&Hypothesis> {
        self.hypotheses
            .get(id)
            .ok_or_else(|| Error::UnknownHypothesis(id.to_string()))
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut Hypothesis> {
        self.hypotheses
            .get_mut(id)
            .ok_or_else(|| Error::UnknownHypothesis(id.to_string()))
    }

    pub fn propose(
        &mut self,
        candidate: &HypothesisCandidate,
        provenance: Provenance,
        created_by: &str,
        session_id: &str,
    ) -> Result<(String, bool)> {
        candidate.validate()?;
        let id = hypothesis_id(&candidate.title);
        let now = Utc::now();
        if let Some(existing) = self.hypotheses.get_mut(&id) {
            if !existing.is_finalized() {
                let before = existing.node_refs.len();
                existing.node_refs.extend(provenance.node_refs);
                existing
                    .properties
                    .source_files
                    .extend(provenance.properties.source_files);
                existing
                    .properties
                    .affected_functions
                    .extend(provenance.properties.affected_functions);
                if existing.node_refs.len() != before {
                    existing.updated_at = now;
                }
            }
            return Ok((id, false));
        }
        self.hypotheses.insert(
            id.clone(),
            Hypothesis {
                id: id.clone(),
                title: candidate.title.trim().to_string(),
                vuln_type: candidate.vuln_type.clone(),
                severity: candidate.severity,
                confidence: candidate.confidence,
                status: Status::Proposed,
                node_refs: provenance.node_refs,
                evidence: Vec::new(),
                reasoning: candidate.reasoning.clone(),
                properties: provenance.properties,
                notes: Vec::new(),
                verdict: None,
                created_by: created_by.to_string(),
                session_id: session_id.to_string(),
                created_at: now,
                updated_at: now,
            },
        );
        Ok((id, true))
    }

    pub fn add_evidence(&mut self, id: &str, card_id: &str, note: &str, stance: Stance) -> Result<Hypothesis> {
        let h = self.get_mut(id)?;
        if h.is_finalized() || h.status == Status::Confirmed {
            return Err(Error::Finalized(id.to_string()));
        }
        let now = Utc::now();
        h.evidence.push(Evidence {
            card_id: card_id.to_string(),
            note: note.to_string(),
            stance,
            added_at: now,
        });
        // threshold-rejected items keep accruing evidence but stay rejected
        if h.status != Status::Rejected {
            h.status = heuristic_status(&h.evidence);
        }
        h.updated_at = now;
        Ok(h.clone())
    }

    pub fn adjust_confidence(&mut self, id: &str, q: f64) -> Result<Hypothesis> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Range { value: q });
        }
        let h = self.get_mut(id)?;
        if h.is_finalized() || h.status == Status::Confirmed {
            return Err(Error::Finalized(id.to_string()));
        }
        h.confidence = q;
        if q <= REJECT_THRESHOLD {
            h.status = Status::Rejected;
        }
        h.updated_at = Utc::now();
        Ok(h.clone())
    }

    pub fn finalize_verdict(&mut self, id: &str, verdict: Verdict, reasoning: &str) -> Result<Hypothesis> {
        let h = self.get_mut(id)?;
        if h.is_finalized() {
            return Err(Error::Finalized(id.to_string()));
        }
        let now = Utc::now();
        match verdict {
            Verdict::Confirmed => {
                h.status = Status::Confirmed;
                h.confidence = 1.0;
            }
            Verdict::Rejected => {
                h.status = Status::Rejected;
                h.confidence = 0.0;
            }
            Verdict::Uncertain => {
                h.notes.push(format!("QA uncertain: {reasoning}"));
            }
        }
        h.verdict = Some(VerdictRecord {
            verdict,
            reasoning: reasoning.to_string(),
            at: now,
        });
        h.updated_at = now;
        Ok(h.clone())
    }

    /// Grouped by vuln type (lexicographic), one line per hypothesis.
    pub fn summarize_for_context(&self) -> String {
        if self.hypotheses.is_empty() {
            return "(no hypotheses)".to_string();
        }
        let mut groups: BTreeMap<&str, Vec<&Hypothesis>> = BTreeMap::new();
        for h in self.hypotheses.values() {
            groups.entry(&h.vuln_type).or_default().push(h);
        }
        let mut out = String::new();
        for (ty, mut items) in groups {
            items.sort_by(|a, b| (&a.title, &a.id).cmp(&(&b.title, &b.id)));
            out.push_str(&format!("[{ty}]\n"));
            for h in items {
                out.push_str(&format!(
                    "- {} ({}) status={} q={:.2}\n",
                    h.title, h.id, h.status, h.confidence
                ));
            }
        }
        out
    }
}

pub const HYPOTHESES_FILE: &str = "hypotheses.json";

/// `hypotheses.json`, mutated only through lock-guarded updates.
#[derive(Debug, Clone)]
pub struct HypothesisStore {
    path: PathBuf,
    files: FileStore,
}

impl HypothesisStore {
    pub fn new(path: impl Into<PathBuf>, files: FileStore) -> HypothesisStore {
        HypothesisStore {
            path: path.into(),
            files,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<HypothesisDoc> {
        self.files.read(&self.path, HypothesisDoc::default())
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut HypothesisDoc) -> Result<R>) -> Result<R> {
        self.files.update(&self.path, f)
    }

    pub fn propose(
        &self,
        candidate: &HypothesisCandidate,
        provenance: Provenance,
        created_by: &str,
        session_id: &str,
    ) -> Result<(String, bool)> {
        self.update(|d| d.propose(candidate, provenance, created_by, session_id))
    }

    pub fn add_evidence(&self, id: &str, card_id: &str, note: &str, stance: Stance) -> Result<Hypothesis> {
        self.update(|d| d.add_evidence(id, card_id, note, stance))
    }

    pub fn adjust_confidence(&self, id: &str, q: f64) -> Result<Hypothesis> {
        self.update(|d| d.adjust_confidence(id, q))
    }

    pub fn finalize_verdict(&self, id: &str, verdict: Verdict, reasoning: &str) -> Result<Hypothesis> {
        self.update(|d| d.finalize_verdict(id, verdict, reasoning))
    }

    pub fn summarize_for_context(&self) -> Result<String> {
        Ok(self.load()?.summarize_for_context())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(title: &str, q: f64) -> HypothesisCandidate {
        HypothesisCandidate {
            title: title.into(),
            vuln_type: "access-control".into(),
            severity: Severity::High,
            confidence: q,
            node_ids: vec![],
            reasoning: "because".into(),
        }
    }

    fn doc_with(title: &str, q: f64) -> (HypothesisDoc, String) {
        let mut d = HypothesisDoc::default();
        let (id, _) = d.propose(&cand(title, q), Provenance::default(), "scout", "s1").unwrap();
        (d, id)
    }

    #[test]
    fn propose_dedups_on_normalized_title() {
        let mut d = HypothesisDoc::default();
        let (id1, c1) = d.propose(&cand("T", 0.4), Provenance::default(), "a", "s1").unwrap();
        let refs = Provenance {
            node_refs: [NodeRef { graph: "G".into(), node: "N".into() }].into(),
            ..Default::default()
        };
        let (id2, c2) = d.propose(&cand("  t ", 0.9), refs, "b", "s2").unwrap();
        assert_eq!((id1.as_str(), c1, c2), (id2.as_str(), true, false));
        assert_eq!(d.hypotheses.len(), 1);
        let h = d.get(&id1).unwrap();
        assert_eq!(h.confidence, 0.4);
        assert_eq!(h.node_refs.len(), 1);
    }

    #[test]
    fn fresh_proposal_defaults() {
        let (d, id) = doc_with("Missing auth on withdraw", 0.7);
        let h = d.get(&id).unwrap();
        assert_eq!(h.status, Status::Proposed);
        assert_eq!(h.confidence, 0.7);
        assert!(id.starts_with("hyp_"));
    }

    #[test]
    fn out_of_range_candidate_rejected() {
        let mut d = HypothesisDoc::default();
        assert!(matches!(
            d.propose(&cand("x", 1.5), Provenance::default(), "a", "s"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            d.propose(&cand("x", f64::NAN), Provenance::default(), "a", "s"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            d.propose(&cand("   ", 0.5), Provenance::default(), "a", "s"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn evidence_heuristic() {
        let (mut d, id) = doc_with("h", 0.5);
        assert_eq!(d.add_evidence(&id, "c1", "n", Stance::Neutral).unwrap().status, Status::Investigating);
        assert_eq!(d.add_evidence(&id, "c2", "n", Stance::Supports).unwrap().status, Status::Investigating);
        assert_eq!(d.add_evidence(&id, "c3", "n", Stance::Supports).unwrap().status, Status::Supported);

        let (mut d, id) = doc_with("h2", 0.5);
        d.add_evidence(&id, "c1", "n", Stance::Supports).unwrap();
        d.add_evidence(&id, "c2", "n", Stance::Refutes).unwrap();
        assert_eq!(d.add_evidence(&id, "c3", "n", Stance::Refutes).unwrap().status, Status::Refuted);
        assert_eq!(d.get(&id).unwrap().evidence.len(), 3);
    }

    #[test]
    fn threshold_rejection() {
        let (mut d, id) = doc_with("h", 0.5);
        assert_eq!(d.adjust_confidence(&id, 0.11).unwrap().status, Status::Proposed);
        assert_eq!(d.adjust_confidence(&id, 0.10).unwrap().status, Status::Rejected);
        // still mutable after threshold rejection
        let h = d.adjust_confidence(&id, 0.6).unwrap();
        assert_eq!((h.status, h.confidence), (Status::Rejected, 0.6));
        assert!(d.add_evidence(&id, "c", "n", Stance::Supports).is_ok());
        assert!(matches!(d.adjust_confidence(&id, 1.01), Err(Error::Range { .. })));
        assert!(matches!(d.adjust_confidence("nope", 0.5), Err(Error::UnknownHypothesis(_))));
    }

    #[test]
    fn investigating_stays_investigating_on_raise() {
        let (mut d, id) = doc_with("h", 0.5);
        d.add_evidence(&id, "c", "n", Stance::Neutral).unwrap();
        let h = d.adjust_confidence(&id, 0.95).unwrap();
        assert_eq!((h.status, h.confidence), (Status::Investigating, 0.95));
    }

    #[test]
    fn verdicts() {
        let (mut d, id) = doc_with("a", 0.5);
        let h = d.finalize_verdict(&id, Verdict::Confirmed, "real").unwrap();
        assert_eq!((h.status, h.confidence), (Status::Confirmed, 1.0));
        assert!(matches!(d.adjust_confidence(&id, 0.5), Err(Error::Finalized(_))));
        assert!(matches!(d.add_evidence(&id, "c", "n", Stance::Refutes), Err(Error::Finalized(_))));
        assert!(matches!(d.finalize_verdict(&id, Verdict::Rejected, ""), Err(Error::Finalized(_))));

        let (mut d, id) = doc_with("b", 0.5);
        let h = d.finalize_verdict(&id, Verdict::Rejected, "false positive").unwrap();
        assert_eq!((h.status, h.confidence), (Status::Rejected, 0.0));

        let (mut d, id) = doc_with("c", 0.5);
        let h = d.finalize_verdict(&id, Verdict::Uncertain, "needs the oracle code").unwrap();
        assert_eq!((h.status, h.confidence), (Status::Proposed, 0.5));
        assert!(h.notes[0].contains("needs the oracle code"));
        assert!(!h.is_finalized());
        assert!(d.adjust_confidence(&id, 0.6).is_ok());
    }

    #[test]
    fn summary_groups_by_type() {
        assert_eq!(HypothesisDoc::default().summarize_for_context(), "(no hypotheses)");
        let mut d = HypothesisDoc::default();
        let mut c = cand("Reentrancy in withdraw", 0.456);
        c.vuln_type = "reentrancy".into();
        d.propose(&c, Provenance::default(), "a", "s").unwrap();
        d.propose(&cand("Missing onlyOwner", 0.7), Provenance::default(), "a", "s").unwrap();
        let text = d.summarize_for_context();
        assert_eq!(text, d.summarize_for_context());
        let ac = text.find("[access-control]").unwrap();
        let re = text.find("[reentrancy]").unwrap();
        assert!(ac < re);
        assert!(text.contains("q=0.46"));
        assert!(text.contains("status=proposed"));
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = HypothesisStore::new(dir.path().join(HYPOTHESES_FILE), FileStore::default());
        let (id, _) = store.propose(&cand("x", 0.3), Provenance::default(), "a", "s").unwrap();
        store.add_evidence(&id, "c1", "looks bad", Stance::Supports).unwrap();
        let doc = store.load().unwrap();
        let text = std::fs::read_to_string(store.path()).unwrap();
        let reparsed: HypothesisDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(doc, reparsed);
        assert_eq!(doc.schema_version, 1);
    }
}
