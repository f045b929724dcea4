//! Coverage accounting, the Coverage→Intuition phase policy, and the
//! planner guardrails around provider-generated investigations.
//!
//! Coverage `p = w_V·|visited nodes|/|V| + w_C·|visited cards|/|C|`. The phase
//! is Coverage while `p < p*` and Intuition otherwise; the mixing coefficient
//! `λ = clamp((p − p0)/(p* − p0), 0, 1)` is computed for diagnostics only.
//! What to investigate is left to the provider; this module enforces the
//! schema, the no-repeat rule against the session plan store and the
//! project ledger, the item cap and the priority order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::beliefs::{normalize_title, HypothesisCandidate, HypothesisDoc};
use crate::error::{Error, Result};
use crate::graph::GraphRecord;
use crate::ingest::sha256_hex;
use crate::provider::{complete_structured, ModelProfile, Provider, Schema, SchemaId, StructuredRequest};
use crate::storage::FileStore;

pub const COVERAGE_FILE: &str = "coverage.json";
pub const LEDGER_FILE: &str = "plan_ledger.json";
pub const PLAN_FILE: &str = "plan.json";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Visit {
    pub count: u64,
    pub last_visited: Option<DateTime<Utc>>,
}

impl Visit {
    fn bump(&mut self, at: DateTime<Utc>) {
        self.count += 1;
        self.last_visited = Some(at);
    }
}

/// One `load_nodes`-style touch, replayable into an index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitEvent {
    pub graph: String,
    #[serde(default)]
    pub node_ids: Vec<String>,
    #[serde(default)]
    pub card_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageIndex {
    pub schema_version: u64,
    /// graph → node id → visits
    #[serde(default)]
    pub node_visits: BTreeMap<String, BTreeMap<String, Visit>>,
    #[serde(default)]
    pub card_visits: BTreeMap<String, Visit>,
}

impl Default for CoverageIndex {
    fn default() -> Self {
        CoverageIndex {
            schema_version: 1,
            node_visits: BTreeMap::new(),
            card_visits: BTreeMap::new(),
        }
    }
}

impl CoverageIndex {
    pub fn record_visit(&mut self, graph: &str, node_ids: &[String], card_ids: &[String]) {
        if node_ids.is_empty() && card_ids.is_empty() {
            return;
        }
        let now = Utc::now();
        if !node_ids.is_empty() {
            let g = self.node_visits.entry(graph.to_string()).or_default();
            for n in node_ids {
                g.entry(n.clone()).or_default().bump(now);
            }
        }
        for c in card_ids {
            self.card_visits.entry(c.clone()).or_default().bump(now);
        }
    }

    /// Seed from prior activity, e.g. another session's visit log.
    pub fn replay<'a>(&mut self, events: impl IntoIterator<Item = &'a VisitEvent>) {
        for e in events {
            self.record_visit(&e.graph, &e.node_ids, &e.card_ids);
        }
    }

    pub fn node_count(&self, graph: &str, node: &str) -> u64 {
        self.node_visits
            .get(graph)
            .and_then(|g| g.get(node))
            .map_or(0, |v| v.count)
    }

    pub fn card_count(&self, card: &str) -> u64 {
        self.card_visits.get(card).map_or(0, |v| v.count)
    }

    pub fn visited_nodes(&self) -> usize {
        self.node_visits
            .values()
            .flat_map(|g| g.values())
            .filter(|v| v.count > 0)
            .count()
    }

    pub fn visited_cards(&self) -> usize {
        self.card_visits.values().filter(|v| v.count > 0).count()
    }

    /// Visited nodes restricted to the given `(graph, node)` universe.
    pub fn visited_nodes_in<'a>(&self, universe: impl IntoIterator<Item = (&'a str, &'a str)>) -> usize {
        universe
            .into_iter()
            .filter(|(g, n)| self.node_count(g, n) > 0)
            .count()
    }

    pub fn visited_cards_in<'a>(&self, universe: impl IntoIterator<Item = &'a str>) -> usize {
        universe.into_iter().filter(|c| self.card_count(c) > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub w_nodes: f64,
    pub w_cards: f64,
    pub p0: f64,
    pub p_star: f64,
    pub q_star: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            w_nodes: 0.5,
            w_cards: 0.5,
            p0: 0.5,
            p_star: 0.9,
            q_star: 0.85,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_nodes >= 0.0
            && self.w_cards >= 0.0
            && ((self.w_nodes + self.w_cards) - 1.0).abs() < 1e-9
            && 0.0 <= self.p0
            && self.p0 < self.p_star
            && self.p_star <= 1.0
            && (0.0..=1.0).contains(&self.q_star);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid coverage config {self:?}")))
        }
    }
}

/// Weighted fraction of visited nodes and cards, given universe sizes.
pub fn coverage_from_counts(
    visited_nodes: usize,
    total_nodes: usize,
    visited_cards: usize,
    total_cards: usize,
    cfg: &CoverageConfig,
) -> Result<f64> {
    if total_nodes == 0 || total_cards == 0 {
        return Err(Error::EmptyUniverse {
            nodes: total_nodes,
            cards: total_cards,
        });
    }
    let vn = visited_nodes.min(total_nodes) as f64 / total_nodes as f64;
    let vc = visited_cards.min(total_cards) as f64 / total_cards as f64;
    Ok((cfg.w_nodes * vn + cfg.w_cards * vc).clamp(0.0, 1.0))
}

pub fn coverage(idx: &CoverageIndex, total_nodes: usize, total_cards: usize, cfg: &CoverageConfig) -> Result<f64> {
    coverage_from_counts(idx.visited_nodes(), total_nodes, idx.visited_cards(), total_cards, cfg)
}

pub fn mixing(p: f64, cfg: &CoverageConfig) -> f64 {
    ((p - cfg.p0) / (cfg.p_star - cfg.p0)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coverage,
    Intuition,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Coverage => "coverage",
            Phase::Intuition => "intuition",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Phase> {
        match s.to_ascii_lowercase().as_str() {
            "coverage" | "sweep" => Ok(Phase::Coverage),
            "intuition" | "saliency" => Ok(Phase::Intuition),
            other => Err(Error::Validation(format!("unknown phase {other}"))),
        }
    }
}

pub fn select_phase(p: f64, cfg: &CoverageConfig, override_phase: Option<Phase>) -> Phase {
    match override_phase {
        Some(ph) => ph,
        None if p < cfg.p_star => Phase::Coverage,
        None => Phase::Intuition,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Impact {
    High,
    #[serde(alias = "medium")]
    Med,
    Low,
}

/// Free text plus the parts termination checks can evaluate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitCriteria {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExitCriteriaRepr {
    Text(String),
    Full(ExitCriteria),
}

fn de_exit<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ExitCriteria, D::Error> {
    Ok(match ExitCriteriaRepr::deserialize(d)? {
        ExitCriteriaRepr::Text(text) => ExitCriteria {
            text,
            ..Default::default()
        },
        ExitCriteriaRepr::Full(e) => e,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Investigation {
    pub goal: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub focus_areas: Vec<String>,
    pub priority: u8,
    pub expected_impact: Impact,
    #[serde(default)]
    pub reasoning: String,
    #[serde(default)]
    pub why_now: String,
    #[serde(default, deserialize_with = "de_exit")]
    pub exit_criteria: ExitCriteria,
}

impl Investigation {
    pub fn frame_key(&self) -> String {
        normalize_frame(&self.goal, &self.focus_areas)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=10).contains(&self.priority) {
            return Err(format!("priority {} outside 1..=10", self.priority));
        }
        if normalize_text(&self.goal).is_empty() {
            return Err("investigation goal is empty".into());
        }
        if let Some(q) = self.exit_criteria.q_star {
            if !(0.0..=1.0).contains(&q) {
                return Err(format!("exit q_star {q} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestigationBatch {
    pub investigations: Vec<Investigation>,
}

impl Schema for InvestigationBatch {
    const ID: SchemaId = SchemaId::InvestigationBatch;

    fn validate(&self) -> std::result::Result<(), String> {
        self.investigations
            .iter()
            .enumerate()
            .try_for_each(|(i, inv)| inv.validate().map_err(|e| format!("investigations[{i}]: {e}")))
    }
}

/// Casefold, strip punctuation, collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    let stripped: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    normalize_title(&stripped)
}

/// Stable key of a plan frame: normalized goal plus sorted focus areas.
pub fn normalize_frame(goal: &str, focus_areas: &[String]) -> String {
    let focus: BTreeSet<String> = focus_areas
        .iter()
        .map(|f| normalize_text(f))
        .filter(|f| !f.is_empty())
        .collect();
    let mut material = normalize_text(goal);
    for f in &focus {
        material.push('\u{1f}');
        material.push_str(f);
    }
    format!("frame_{}", &sha256_hex(material.as_bytes())[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Planned,
    InProgress,
    Done,
    Dropped,
    Superseeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Option<FrameStatus>,
    pub to: FrameStatus,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFrame {
    pub key: String,
    pub goal: String,
    pub category: String,
    pub focus_areas: Vec<String>,
    pub status: FrameStatus,
    pub history: Vec<Transition>,
    pub investigation: Investigation,
}

impl PlanFrame {
    pub fn planned(inv: Investigation) -> PlanFrame {
        PlanFrame {
            key: inv.frame_key(),
            goal: inv.goal.clone(),
            category: inv.category.clone(),
            focus_areas: inv.focus_areas.clone(),
            status: FrameStatus::Planned,
            history: vec![Transition {
                from: None,
                to: FrameStatus::Planned,
                at: Utc::now(),
                note: String::new(),
            }],
            investigation: inv,
        }
    }

    pub fn transition(&mut self, to: FrameStatus, note: &str) {
        self.history.push(Transition {
            from: Some(self.status),
            to,
            at: Utc::now(),
            note: note.to_string(),
        });
        self.status = to;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDoc {
    pub schema_version: u64,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub frames: Vec<PlanFrame>,
}

impl Default for PlanDoc {
    fn default() -> Self {
        PlanDoc {
            schema_version: 1,
            session_id: String::new(),
            frames: Vec::new(),
        }
    }
}

impl PlanDoc {
    pub fn contains(&self, key: &str) -> bool {
        self.frames.iter().any(|f| f.key == key)
    }

    pub fn frame_mut(&mut self, key: &str) -> Option<&mut PlanFrame> {
        self.frames.iter_mut().find(|f| f.key == key)
    }
}

/// Per-session plan store at `sessions/<sid>/plan.json`.
#[derive(Debug, Clone)]
pub struct PlanStore {
    path: PathBuf,
    session_id: String,
    files: FileStore,
}

impl PlanStore {
    pub fn new(sessions_dir: impl AsRef<Path>, session_id: &str, files: FileStore) -> PlanStore {
        PlanStore {
            path: sessions_dir.as_ref().join(session_id).join(PLAN_FILE),
            session_id: session_id.to_string(),
            files,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn load(&self) -> Result<PlanDoc> {
        let mut d: PlanDoc = self.files.read(&self.path, PlanDoc::default())?;
        if d.session_id.is_empty() {
            d.session_id = self.session_id.clone();
        }
        Ok(d)
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut PlanDoc) -> Result<R>) -> Result<R> {
        let sid = self.session_id.clone();
        self.files.update(&self.path, |d: &mut PlanDoc| {
            d.session_id = sid;
            f(d)
        })
    }

    pub fn set_status(&self, key: &str, to: FrameStatus, note: &str) -> Result<PlanFrame> {
        self.update(|d| {
            let f = d
                .frame_mut(key)
                .ok_or_else(|| Error::Validation(format!("no plan frame {key} in session")))?;
            f.transition(to, note);
            Ok(f.clone())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub normalized_key: String,
    pub goal: String,
    pub count: u64,
    pub sessions: Vec<String>,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLedger {
    pub schema_version: u64,
    #[serde(default)]
    pub entries: BTreeMap<String, LedgerEntry>,
}

impl Default for PlanLedger {
    fn default() -> Self {
        PlanLedger {
            schema_version: 1,
            entries: BTreeMap::new(),
        }
    }
}

impl PlanLedger {
    pub fn record(&mut self, inv: &Investigation, session_id: &str, model: &str) -> &LedgerEntry {
        let key = inv.frame_key();
        let e = self.entries.entry(key.clone()).or_insert_with(|| LedgerEntry {
            normalized_key: key,
            goal: inv.goal.clone(),
            count: 0,
            sessions: Vec::new(),
            models: Vec::new(),
        });
        e.count += 1;
        if !e.sessions.iter().any(|s| s == session_id) {
            e.sessions.push(session_id.to_string());
        }
        if !e.models.iter().any(|m| m == model) {
            e.models.push(model.to_string());
        }
        e
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }
}

/// Graph-only planner context: structure and annotations, never code.
pub fn render_graphs_view(graphs: &[GraphRecord]) -> String {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&format!("### {} (focus: {})\n", g.name, g.focus));
        for n in g.nodes.values() {
            out.push_str(&format!("- {} [{}] {}", n.id, n.node_type, n.label));
            if let Some(d) = &n.description {
                out.push_str(&format!(" :: {d}"));
            }
            out.push('\n');
            for o in &n.observations {
                out.push_str(&format!("    obs: {o}\n"));
            }
            for a in &n.assumptions {
                out.push_str(&format!("    assume: {a}\n"));
            }
        }
        for e in &g.edges {
            out.push_str(&format!("- {} -[{}]-> {}\n", e.src, e.edge_type, e.dst));
        }
    }
    out
}

pub struct PlanRequest<'a> {
    pub graphs_view: &'a str,
    pub cfg: &'a CoverageConfig,
    pub coverage: f64,
    pub phase_override: Option<Phase>,
    pub hyp_summary: &'a str,
    pub steering: &'a [String],
    pub n: usize,
    pub profile: &'a ModelProfile,
    pub retries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub phase: Phase,
    pub lambda: f64,
    pub investigations: Vec<Investigation>,
    pub dropped_repeats: usize,
}

fn phase_instructions(phase: Phase) -> &'static str {
    match phase {
        Phase::Coverage => {
            "Coverage sweep. Prefer previously unvisited, medium-granularity components. \
             Prioritize broadly useful or high-impact areas. Do not repeat listed frames."
        }
        Phase::Intuition => {
            "Intuition deep dive. Prefer high expected impact, contradictions between \
             assumptions and observations, cross-component interactions, and novelty \
             relative to existing hypotheses and plans. Do not repeat listed frames."
        }
    }
}

/// Ask the strategist for up to `n` investigations and keep only frames not
/// yet in the session plan store or the project ledger.
pub fn plan_next(
    req: &PlanRequest<'_>,
    plans: &PlanStore,
    ledger_path: &Path,
    files: &FileStore,
    provider: &dyn Provider,
) -> Result<PlanOutcome> {
    req.cfg.validate()?;
    let phase = select_phase(req.coverage, req.cfg, req.phase_override);
    let lambda = mixing(req.coverage, req.cfg);
    tracing::info!(%phase, coverage = req.coverage, lambda, "planning");

    let existing: Vec<String> = {
        let doc = plans.load()?;
        let ledger: PlanLedger = files.read(ledger_path, PlanLedger::default())?;
        doc.frames
            .iter()
            .map(|f| f.goal.clone())
            .chain(ledger.entries.values().map(|e| e.goal.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let mut sreq = StructuredRequest::new(SchemaId::InvestigationBatch, req.profile.clone())
        .section("Phase", format!("{phase}: {}", phase_instructions(phase)))
        .section(
            "Coverage",
            format!("p = {:.3}, p* = {:.2}, lambda = {:.3}", req.coverage, req.cfg.p_star, lambda),
        )
        .section("Graphs", req.graphs_view)
        .section("Hypotheses", req.hyp_summary);
    if !req.steering.is_empty() {
        sreq = sreq.section("Steering notes", req.steering.join("\n"));
    }
    sreq = sreq
        .section(
            "Frames already planned",
            if existing.is_empty() { "(none)".to_string() } else { existing.join("\n") },
        )
        .section("Request", format!("Return at most {} investigations.", req.n));
    if let Some(effort) = &req.profile.plan_reasoning_effort {
        sreq = sreq.section("Reasoning effort", effort.clone());
    }
    let batch = complete_structured::<InvestigationBatch>(provider, &sreq, req.retries)?.value;

    let session = plans.session_id().to_string();
    let model = req.profile.name.clone();
    let n = req.n;
    let (survivors, dropped) = files.update(ledger_path, |ledger: &mut PlanLedger| {
        let planned = plans.load()?;
        let mut seen = HashSet::new();
        let mut keep = Vec::new();
        let mut dropped = 0usize;
        for inv in batch.investigations {
            let key = inv.frame_key();
            if planned.contains(&key) || ledger.contains(&key) || !seen.insert(key) {
                dropped += 1;
                continue;
            }
            keep.push(inv);
        }
        keep.sort_by_key(|i| std::cmp::Reverse(i.priority));
        keep.truncate(n);
        for inv in &keep {
            ledger.record(inv, &session, &model);
        }
        Ok((keep, dropped))
    })?;
    plans.update(|d| {
        for inv in &survivors {
            d.frames.push(PlanFrame::planned(inv.clone()));
        }
        Ok(())
    })?;
    Ok(PlanOutcome {
        phase,
        lambda,
        investigations: survivors,
        dropped_repeats: dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisBatch {
    pub hypotheses: Vec<HypothesisCandidate>,
}

impl Schema for HypothesisBatch {
    const ID: SchemaId = SchemaId::HypothesisBatch;

    fn validate(&self) -> std::result::Result<(), String> {
        self.hypotheses
            .iter()
            .enumerate()
            .try_for_each(|(i, h)| h.validate().map_err(|e| format!("hypotheses[{i}]: {e}")))
    }
}

/// Indices of the items to keep from the list under review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Critique {
    pub keep: Vec<usize>,
    #[serde(default)]
    pub reasoning: String,
}

impl Schema for Critique {
    const ID: SchemaId = SchemaId::Critique;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeepThinkOptions {
    pub two_pass: bool,
    pub provider_dedup: bool,
}

fn render_candidates(list: &[HypothesisCandidate]) -> String {
    list.iter()
        .enumerate()
        .map(|(i, c)| format!("{i}. {} [{}; {:?}; q={:.2}] {}", c.title, c.vuln_type, c.severity, c.confidence, c.reasoning))
        .collect::<Vec<_>>()
        .join("\n")
}

fn apply_keep(list: Vec<HypothesisCandidate>, keep: &[usize]) -> Vec<HypothesisCandidate> {
    let keep: BTreeSet<usize> = keep.iter().copied().collect();
    list.into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, c)| c)
        .collect()
}

/// Generate hypothesis candidates from graph-only context.
///
/// The optional critique pass can only remove items. Candidates whose
/// normalized title matches an existing hypothesis (or an earlier candidate)
/// are always dropped; `provider_dedup` adds a provider review of the rest
/// against the existing set.
pub fn deep_think(
    graphs_view: &str,
    hypotheses: &HypothesisDoc,
    provider: &dyn Provider,
    profile: &ModelProfile,
    opts: DeepThinkOptions,
    retries: usize,
) -> Result<Vec<HypothesisCandidate>> {
    let summary = hypotheses.summarize_for_context();
    let mut req = StructuredRequest::new(SchemaId::HypothesisBatch, profile.clone())
        .section("Graphs", graphs_view)
        .section("Existing hypotheses", &summary);
    if let Some(effort) = &profile.hypothesize_reasoning_effort {
        req = req.section("Reasoning effort", effort.clone());
    }
    let mut list = complete_structured::<HypothesisBatch>(provider, &req, retries)?
        .value
        .hypotheses;

    if opts.two_pass && !list.is_empty() {
        let creq = StructuredRequest::new(SchemaId::Critique, profile.clone())
            .section("Task", "Critique these candidates; keep only the strongest, well-grounded ones.")
            .section("Candidates", render_candidates(&list));
        let critique = complete_structured::<Critique>(provider, &creq, retries)?.value;
        list = apply_keep(list, &critique.keep);
    }

    let mut seen: HashSet<String> = hypotheses
        .hypotheses
        .values()
        .map(|h| normalize_title(&h.title))
        .collect();
    list.retain(|c| seen.insert(normalize_title(&c.title)));

    if opts.provider_dedup && !list.is_empty() && !hypotheses.hypotheses.is_empty() {
        let dreq = StructuredRequest::new(SchemaId::Critique, profile.clone())
            .section("Task", "Keep only candidates that are not near-duplicates of existing hypotheses.")
            .section("Existing hypotheses", &summary)
            .section("Candidates", render_candidates(&list));
        let review = complete_structured::<Critique>(provider, &dreq, retries)?.value;
        list = apply_keep(list, &review.keep);
    }
    Ok(list)
}
