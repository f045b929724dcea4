//! The Scout loop and the Finalizer.
//!
//! Each step renders the notebook-style context, asks the provider for one
//! [`AgentAction`], executes it against the project stores and appends the
//! outcome to the recent-action window. Domain failures (unknown ids,
//! finalized hypotheses) become error results the model can read; only
//! storage failures and exhausted schema retries leave the loop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::beliefs::{HypothesisCandidate, HypothesisProperties, NodeRef, Provenance, Stance, Status, Verdict};
use crate::error::{Error, Result};
use crate::graph::{annotate_node, GraphRecord, SYSTEM_ARCHITECTURE};
use crate::inbox::Inbox;
use crate::ingest::Manifest;
use crate::planning::{FrameStatus, Investigation, PlanFrame};
use crate::project::Project;
use crate::provider::{
    complete_structured, estimate_tokens, ModelProfile, Provider, Schema, SchemaId, StructuredRequest,
};
use crate::retrieval::{render_context, resolve_node_cards};
use crate::session::{SessionState, SessionStatus};

pub const DEFAULT_MAX_STEPS: usize = 30;
pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_KAPPA: usize = 5;
pub const DEFAULT_FILE_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadGraph {
    pub graph: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadNodes {
    pub graph: String,
    pub node_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateNode {
    pub graph: String,
    pub node_id: String,
    #[serde(default)]
    pub observations: Vec<String>,
    #[serde(default)]
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormHypothesis {
    /// Graph the candidate's node ids belong to. When absent every graph is
    /// searched in name order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    pub hypothesis: HypothesisCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceParam {
    pub card_id: String,
    #[serde(default)]
    pub note: String,
    pub stance: Stance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateHypothesis {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<EvidenceParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Complete {
    #[serde(default)]
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum AgentAction {
    LoadGraph(LoadGraph),
    LoadNodes(LoadNodes),
    UpdateNode(UpdateNode),
    FormHypothesis(FormHypothesis),
    UpdateHypothesis(UpdateHypothesis),
    Complete(Complete),
}

impl AgentAction {
    pub fn kind(&self) -> &'static str {
        match self {
            AgentAction::LoadGraph(_) => "load_graph",
            AgentAction::LoadNodes(_) => "load_nodes",
            AgentAction::UpdateNode(_) => "update_node",
            AgentAction::FormHypothesis(_) => "form_hypothesis",
            AgentAction::UpdateHypothesis(_) => "update_hypothesis",
            AgentAction::Complete(_) => "complete",
        }
    }

    pub fn is_complete(&self) -> bool {
        matches!(self, AgentAction::Complete(_))
    }
}

fn non_empty(field: &str, v: &str) -> std::result::Result<(), String> {
    if v.trim().is_empty() {
        Err(format!("{field} must not be empty"))
    } else {
        Ok(())
    }
}

impl Schema for AgentAction {
    const ID: SchemaId = SchemaId::AgentAction;

    fn validate(&self) -> std::result::Result<(), String> {
        match self {
            AgentAction::LoadGraph(p) => non_empty("graph", &p.graph),
            AgentAction::LoadNodes(p) => {
                non_empty("graph", &p.graph)?;
                if p.node_ids.is_empty() {
                    return Err("load_nodes needs at least one node id".into());
                }
                p.node_ids.iter().try_for_each(|n| non_empty("node id", n))
            }
            AgentAction::UpdateNode(p) => {
                non_empty("graph", &p.graph)?;
                non_empty("node_id", &p.node_id)?;
                if p.observations.is_empty() && p.assumptions.is_empty() {
                    return Err("update_node needs observations or assumptions".into());
                }
                Ok(())
            }
            AgentAction::FormHypothesis(p) => p.hypothesis.validate().map_err(|e| e.to_string()),
            AgentAction::UpdateHypothesis(p) => {
                non_empty("id", &p.id)?;
                match (p.q_new, &p.evidence) {
                    (None, None) => Err("update_hypothesis needs q_new or evidence".into()),
                    (Some(q), _) if !(0.0..=1.0).contains(&q) => Err(format!("q_new {q} outside [0, 1]")),
                    _ => Ok(()),
                }
            }
            AgentAction::Complete(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionResult {
    pub ok: bool,
    pub text: String,
    /// Set when form_hypothesis created a new hypothesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

impl ActionResult {
    fn ok(text: impl Into<String>) -> ActionResult {
        ActionResult {
            ok: true,
            text: text.into(),
            created: None,
        }
    }

    fn err(e: &Error) -> ActionResult {
        ActionResult {
            ok: false,
            text: Error::InvalidAction(e.to_string()).to_string(),
            created: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecentAction {
    pub step: usize,
    pub action: AgentAction,
    pub result: ActionResult,
}

impl RecentAction {
    fn render(&self) -> String {
        let params = serde_json::to_string(&self.action).unwrap_or_default();
        format!(
            "step {}: {}\n{}: {}\n",
            self.step,
            params,
            if self.result.ok { "ok" } else { "error" },
            self.result.text.trim_end()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextState {
    pub goal: String,
    pub steering_notes: Vec<String>,
    pub available_graphs: Vec<String>,
    pub memory_notes: Vec<String>,
    pub system_architecture_compact: Option<String>,
    /// Graph name to compact rendering.
    pub loaded_graphs: BTreeMap<String, String>,
    /// Graph name to node ids whose code has been loaded.
    pub cached_node_ids: BTreeMap<String, BTreeSet<String>>,
    pub recent_actions: Vec<RecentAction>,
    pub hypotheses_summary: Option<String>,
    pub token_estimate: usize,
    /// Steps executed so far; numbers the next action.
    pub steps: usize,
}

fn push_section(out: &mut String, title: &str, body: &str) {
    out.push_str("## ");
    out.push_str(title);
    out.push('\n');
    out.push_str(body.trim_end());
    out.push_str("\n\n");
}

/// Render sections in their fixed order. Empty optional sections are left out.
pub fn build_context(state: &ContextState) -> (String, usize) {
    let mut out = String::new();
    push_section(&mut out, "Goal", &state.goal);
    if !state.steering_notes.is_empty() {
        push_section(&mut out, "Steering notes", &bullets(&state.steering_notes));
    }
    push_section(&mut out, "Available graphs", &bullets(&state.available_graphs));
    if !state.memory_notes.is_empty() {
        push_section(&mut out, "Memory notes", &bullets(&state.memory_notes));
    }
    if let Some(sa) = &state.system_architecture_compact {
        push_section(&mut out, "SystemArchitecture", sa);
    }
    if !state.loaded_graphs.is_empty() {
        let body: String = state
            .loaded_graphs
            .iter()
            .map(|(name, text)| format!("### {name}\n{text}"))
            .collect();
        push_section(&mut out, "Loaded graphs", &body);
    }
    if !state.cached_node_ids.is_empty() {
        let body: Vec<String> = state
            .cached_node_ids
            .iter()
            .map(|(g, ids)| format!("{g}: {}", ids.iter().cloned().collect::<Vec<_>>().join(", ")))
            .collect();
        push_section(&mut out, "Cached node ids", &body.join("\n"));
    }
    if !state.recent_actions.is_empty() {
        let body: String = state.recent_actions.iter().map(RecentAction::render).collect();
        push_section(&mut out, "Recent actions", &body);
    }
    if let Some(h) = &state.hypotheses_summary {
        push_section(&mut out, "Hypotheses", h);
    }
    let tokens = estimate_tokens(&out);
    (out, tokens)
}

fn bullets(items: &[String]) -> String {
    items.iter().map(|s| format!("- {s}\n")).collect()
}

impl ContextState {
    pub fn refresh_estimate(&mut self) -> usize {
        self.token_estimate = build_context(self).1;
        self.token_estimate
    }
}

/// Node and edge listing used for loaded graphs and the architecture view.
pub fn compact_graph(g: &GraphRecord) -> String {
    let mut out = String::new();
    for n in g.nodes.values() {
        out.push_str(&format!("{} [{}] {}\n", n.id, n.node_type, n.label));
    }
    for e in &g.edges {
        out.push_str(&format!("{} -{}-> {}\n", e.src, e.edge_type, e.dst));
    }
    if out.is_empty() {
        out.push_str("(empty)\n");
    }
    out
}

fn graph_line(g: &GraphRecord) -> String {
    format!("{}: {} ({} nodes, {} edges)", g.name, g.focus, g.nodes.len(), g.edges.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryNote {
    pub note: String,
}

impl Schema for MemoryNote {
    const ID: SchemaId = SchemaId::MemoryNote;

    fn validate(&self) -> std::result::Result<(), String> {
        non_empty("note", &self.note)
    }
}

/// Summarize all but the last `kappa` actions into one memory note once the
/// rendered context exceeds `tau * limit` tokens.
pub fn compress_memory(
    state: &ContextState,
    tau: f64,
    limit: usize,
    kappa: usize,
    provider: &dyn Provider,
    profile: &ModelProfile,
    retries: usize,
) -> Result<ContextState> {
    if !(tau > 0.0 && tau < 1.0) || limit == 0 {
        return Err(Error::Validation(format!("compression needs 0 < tau < 1 and B > 0 (tau={tau}, B={limit})")));
    }
    let mut next = state.clone();
    let before = next.refresh_estimate();
    if (before as f64) <= tau * limit as f64 || next.recent_actions.len() <= kappa {
        return Ok(next);
    }
    let split = next.recent_actions.len() - kappa;
    let old: Vec<RecentAction> = next.recent_actions.drain(..split).collect();
    let range = format!(
        "steps {}-{}",
        old.first().map(|a| a.step).unwrap_or(0),
        old.last().map(|a| a.step).unwrap_or(0)
    );
    let req = StructuredRequest::new(SchemaId::MemoryNote, profile.clone())
        .section(
            "Task",
            "Summarize these actions into one short memory note: what was loaded, what was learned, \
             open questions.",
        )
        .section("Goal", &state.goal)
        .section("Actions", old.iter().map(RecentAction::render).collect::<String>());
    let note = match complete_structured::<MemoryNote>(provider, &req, retries) {
        Ok(r) => format!("{range}: {}", r.value.note.trim()),
        Err(e @ (Error::ProviderSchema { .. } | Error::ContextOverflow { .. })) => {
            tracing::warn!(error = %e, "memory summary failed, truncating history");
            format!("{range}: history truncated")
        }
        Err(e) => return Err(e),
    };
    next.memory_notes.push(note);
    next.refresh_estimate();
    Ok(next)
}

/// Everything one Scout run needs besides its state.
pub struct Agent<'a> {
    pub project: &'a Project,
    pub provider: &'a dyn Provider,
    pub profile: ModelProfile,
    pub session_id: String,
    pub retries: usize,
    pub tau: f64,
    pub kappa: usize,
}

impl<'a> Agent<'a> {
    pub fn new(project: &'a Project, provider: &'a dyn Provider, profile: ModelProfile, session_id: &str) -> Agent<'a> {
        Agent {
            project,
            provider,
            profile,
            session_id: session_id.to_string(),
            retries: crate::provider::DEFAULT_SCHEMA_RETRIES,
            tau: DEFAULT_TAU,
            kappa: DEFAULT_KAPPA,
        }
    }

    fn created_by(&self) -> String {
        format!("scout:{}", self.profile.name)
    }

    /// Fresh context for a goal: graph list and the compact architecture.
    pub fn initial_state(&self, goal: &str, steering: &[String]) -> Result<ContextState> {
        let graphs = self.project.graphs().load_all()?;
        let mut state = ContextState {
            goal: goal.to_string(),
            steering_notes: steering.to_vec(),
            available_graphs: graphs.iter().map(graph_line).collect(),
            system_architecture_compact: graphs
                .iter()
                .find(|g| g.name == SYSTEM_ARCHITECTURE)
                .map(compact_graph),
            hypotheses_summary: Some(self.project.hypotheses().summarize_for_context()?),
            ..Default::default()
        };
        state.refresh_estimate();
        Ok(state)
    }

    /// One provider-proposed action, validated then executed.
    pub fn step(&self, state: &mut ContextState, frame_key: Option<&str>) -> Result<(AgentAction, ActionResult)> {
        state.hypotheses_summary = Some(self.project.hypotheses().summarize_for_context()?);
        let (context, _) = build_context(state);
        let req = StructuredRequest::new(SchemaId::AgentAction, self.profile.clone())
            .section(
                "Task",
                "Choose exactly one action as {\"kind\": ..., \"params\": {...}}. Kinds: load_graph {graph}; \
                 load_nodes {graph, node_ids}; update_node {graph, node_id, observations, assumptions}; \
                 form_hypothesis {graph?, hypothesis}; update_hypothesis {id, q_new?, evidence?}; \
                 complete {summary}. Use exact node ids.",
            )
            .section("Context", context);
        let action = complete_structured::<AgentAction>(self.provider, &req, self.retries)?.value;
        let result = match self.execute(state, &action, frame_key) {
            Ok(r) => r,
            Err(e) if recoverable(&e) => ActionResult::err(&e),
            Err(e) => return Err(e),
        };
        tracing::info!(step = state.steps, kind = action.kind(), ok = result.ok, "scout action");
        state.recent_actions.push(RecentAction {
            step: state.steps,
            action: action.clone(),
            result: result.clone(),
        });
        state.steps += 1;
        state.refresh_estimate();
        Ok((action, result))
    }

    fn execute(&self, state: &mut ContextState, action: &AgentAction, frame_key: Option<&str>) -> Result<ActionResult> {
        let graphs = self.project.graphs();
        match action {
            AgentAction::LoadGraph(p) => {
                let g = graphs.load(&p.graph)?;
                state.loaded_graphs.insert(g.name.clone(), compact_graph(&g));
                Ok(ActionResult::ok(format!(
                    "loaded {} ({} nodes, {} edges)",
                    g.name,
                    g.nodes.len(),
                    g.edges.len()
                )))
            }
            AgentAction::LoadNodes(p) => {
                let g = graphs.load(&p.graph)?;
                let mut ids = p.node_ids.clone();
                ids.sort();
                ids.dedup();
                let store = graphs.load_card_store()?;
                let ctx = resolve_node_cards(&g, &ids, &store)?;
                let card_ids: Vec<String> = ctx.card_ids().into_iter().map(str::to_string).collect();
                self.project.record_visit(&g.name, &ids, &card_ids)?;
                state.cached_node_ids.entry(g.name.clone()).or_default().extend(ids.iter().cloned());
                Ok(ActionResult::ok(format!(
                    "{} nodes, {} cards\n{}",
                    ids.len(),
                    ctx.len(),
                    render_context(&ctx)
                )))
            }
            AgentAction::UpdateNode(p) => {
                let node = graphs.update(&p.graph, |g| annotate_node(g, &p.node_id, &p.observations, &p.assumptions))?;
                if let Some(text) = state.loaded_graphs.get_mut(&p.graph) {
                    *text = compact_graph(&graphs.load(&p.graph)?);
                }
                Ok(ActionResult::ok(format!(
                    "{} now has {} observations, {} assumptions",
                    node.id,
                    node.observations.len(),
                    node.assumptions.len()
                )))
            }
            AgentAction::FormHypothesis(p) => {
                let (provenance, unknown) = self.provenance(p, frame_key)?;
                let (id, created) =
                    self.project
                        .hypotheses()
                        .propose(&p.hypothesis, provenance, &self.created_by(), &self.session_id)?;
                let mut text = if created {
                    format!("formed hypothesis {id}")
                } else {
                    format!("duplicate of existing hypothesis {id}; nothing created")
                };
                if !unknown.is_empty() {
                    text.push_str(&format!("; unresolved node ids: {}", unknown.join(", ")));
                }
                let mut r = ActionResult::ok(text);
                r.created = created.then_some(id);
                Ok(r)
            }
            AgentAction::UpdateHypothesis(p) => {
                let store = self.project.hypotheses();
                let mut h = None;
                if let Some(ev) = &p.evidence {
                    h = Some(store.add_evidence(&p.id, &ev.card_id, &ev.note, ev.stance)?);
                }
                if let Some(q) = p.q_new {
                    h = Some(store.adjust_confidence(&p.id, q)?);
                }
                let h = h.expect("validated: q_new or evidence present");
                Ok(ActionResult::ok(format!(
                    "{} status={} q={:.2} evidence={}",
                    h.id,
                    h.status,
                    h.confidence,
                    h.evidence.len()
                )))
            }
            AgentAction::Complete(p) => Ok(ActionResult::ok(format!("complete: {}", p.summary))),
        }
    }

    fn provenance(&self, p: &FormHypothesis, frame_key: Option<&str>) -> Result<(Provenance, Vec<String>)> {
        let store = self.project.graphs();
        let graphs: Vec<GraphRecord> = match &p.graph {
            Some(name) => vec![store.load(name)?],
            None => store.load_all()?,
        };
        let cards = store.load_card_store()?;
        let mut prov = Provenance {
            properties: HypothesisProperties {
                graph: p.graph.clone(),
                frame_key: frame_key.map(str::to_string),
                ..Default::default()
            },
            ..Default::default()
        };
        let mut unknown = Vec::new();
        for id in &p.hypothesis.node_ids {
            let Some((g, node)) = graphs.iter().find_map(|g| g.nodes.get(id).map(|n| (g, n))) else {
                unknown.push(id.clone());
                continue;
            };
            prov.node_refs.insert(NodeRef {
                graph: g.name.clone(),
                node: id.clone(),
            });
            if prov.properties.graph.is_none() {
                prov.properties.graph = Some(g.name.clone());
            }
            for card_id in &node.source_refs {
                if let Some(c) = cards.get(card_id) {
                    prov.properties.source_files.insert(c.card.relpath.clone());
                }
            }
            let ty = node.node_type.to_ascii_lowercase();
            if ty.contains("function") || ty.contains("method") {
                prov.properties.affected_functions.insert(node.label.clone());
            }
        }
        Ok((prov, unknown))
    }

    /// Run one investigation until completion, a decisive hypothesis, the
    /// step budget, or a pending steering note.
    pub fn run_investigation(&self, inv: &Investigation, budgets: Budgets, steering: &[String]) -> Result<InvestigationReport> {
        let key = inv.frame_key();
        let plans = self.project.plans(&self.session_id);
        plans.update(|d| {
            if !d.contains(&key) {
                d.frames.push(PlanFrame::planned(inv.clone()));
            }
            Ok(())
        })?;
        plans.set_status(&key, FrameStatus::InProgress, "")?;

        let q_star = inv.exit_criteria.q_star.unwrap_or(budgets.q_star);
        let max_steps = inv.exit_criteria.max_steps.unwrap_or(budgets.max_steps);
        let inbox = Inbox::new(self.project.inbox_dir(), self.project.files());
        let status = SessionStatus::store(self.project, &self.session_id);
        let goal = format!("{}\nFocus: {}\nExit: {}", inv.goal, inv.focus_areas.join(", "), inv.exit_criteria.text);
        let mut state = self.initial_state(&goal, steering)?;
        let mut report = InvestigationReport {
            frame_key: key.clone(),
            goal: inv.goal.clone(),
            outcome: Outcome::BudgetExhausted,
            steps: 0,
            hypotheses: Vec::new(),
            consumed_notes: Vec::new(),
        };

        loop {
            if inbox.has_pending()? {
                let notes = inbox.consume_pending(&self.session_id)?;
                report.consumed_notes = notes.into_iter().map(|n| n.text).collect();
                report.outcome = Outcome::Preempted;
                break;
            }
            if report.steps >= max_steps {
                report.outcome = Outcome::BudgetExhausted;
                break;
            }
            status.update(|s| {
                s.state = SessionState::Investigating;
                s.current_goal = Some(inv.goal.clone());
                s.frame_key = Some(key.clone());
                s.step = report.steps;
            })?;
            state = compress_memory(
                &state,
                self.tau,
                self.profile.context_limit,
                self.kappa,
                self.provider,
                &self.profile,
                self.retries,
            )?;
            let (action, result) = match self.step(&mut state, Some(&key)) {
                Ok(r) => r,
                Err(e @ Error::ProviderSchema { .. }) => {
                    tracing::warn!(error = %e, "aborting investigation");
                    report.outcome = Outcome::BudgetExhausted;
                    break;
                }
                Err(e) => return Err(e),
            };
            report.steps += 1;
            if let Some(id) = result.created {
                report.hypotheses.push(id);
            }
            if action.is_complete() {
                report.outcome = Outcome::Completed;
                break;
            }
            if self.decisive(&key, inv.exit_criteria.target_hypothesis.as_deref(), q_star)? {
                report.outcome = Outcome::DecisiveHypothesis;
                break;
            }
        }

        let (to, note) = match report.outcome {
            Outcome::Completed | Outcome::DecisiveHypothesis => (FrameStatus::Done, report.outcome.to_string()),
            Outcome::BudgetExhausted | Outcome::Preempted => (FrameStatus::Dropped, report.outcome.to_string()),
        };
        plans.set_status(&key, to, &note)?;
        status.update(|s| {
            s.step = report.steps;
            s.last_outcome = Some(report.outcome);
            s.investigations_run += 1;
        })?;
        tracing::info!(frame = %key, outcome = %report.outcome, steps = report.steps, "investigation finished");
        Ok(report)
    }

    fn decisive(&self, frame_key: &str, target: Option<&str>, q_star: f64) -> Result<bool> {
        let doc = self.project.hypotheses().load()?;
        Ok(doc.hypotheses.values().any(|h| {
            let linked = h.properties.frame_key.as_deref() == Some(frame_key) || Some(h.id.as_str()) == target;
            linked && h.status != Status::Rejected && h.confidence > q_star
        }))
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::UnknownNode(_)
            | Error::UnknownGraph(_)
            | Error::UnknownHypothesis(_)
            | Error::MissingCard(_)
            | Error::StaleCard { .. }
            | Error::Finalized(_)
            | Error::Validation(_)
            | Error::Range { .. }
            | Error::InvalidAction(_)
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budgets {
    pub max_steps: usize,
    pub q_star: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            max_steps: DEFAULT_MAX_STEPS,
            q_star: crate::planning::CoverageConfig::default().q_star,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    DecisiveHypothesis,
    BudgetExhausted,
    Preempted,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Completed => "completed",
            Outcome::DecisiveHypothesis => "decisive_hypothesis",
            Outcome::BudgetExhausted => "budget_exhausted",
            Outcome::Preempted => "preempted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestigationReport {
    pub frame_key: String,
    pub goal: String,
    pub outcome: Outcome,
    pub steps: usize,
    /// Hypotheses created during this run.
    pub hypotheses: Vec<String>,
    /// Steering notes consumed when the run was preempted.
    pub consumed_notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaVerdict {
    pub verdict: Verdict,
    #[serde(default)]
    pub reasoning: String,
}

impl Schema for QaVerdict {
    const ID: SchemaId = SchemaId::Verdict;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum FinalizeOutcome {
    Verdict { verdict: Verdict },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeResult {
    pub id: String,
    pub outcome: FinalizeOutcome,
    pub files: Vec<String>,
}

/// Files for QA: those named in properties first, then files behind the
/// evidence cards and node refs, each once, capped.
pub fn finalizer_files(
    h: &crate::beliefs::Hypothesis,
    manifest: &Manifest,
    card_file: &dyn Fn(&str) -> Option<String>,
    node_files: &[String],
    cap: usize,
) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let named = h.properties.source_files.iter().cloned();
    let evidence = h.evidence.iter().filter_map(|e| card_file(&e.card_id));
    for f in named.chain(evidence).chain(node_files.iter().cloned()) {
        if out.len() >= cap {
            break;
        }
        if manifest.file(&f).is_some() && !out.contains(&f) {
            out.push(f);
        }
    }
    out
}

/// QA pass over every hypothesis not yet confirmed or rejected.
pub fn finalize_session(
    project: &Project,
    provider: &dyn Provider,
    profile: &ModelProfile,
    file_cap: usize,
    retries: usize,
) -> Result<Vec<FinalizeResult>> {
    let (manifest, cards) = project.load_ingest()?;
    let by_id: BTreeMap<&str, &str> = cards.iter().map(|c| (c.id.as_str(), c.relpath.as_str())).collect();
    let card_file = |id: &str| by_id.get(id).map(|s| s.to_string());
    let graphs: BTreeMap<String, GraphRecord> = project
        .graphs()
        .load_all()?
        .into_iter()
        .map(|g| (g.name.clone(), g))
        .collect();
    let store = project.hypotheses();
    let doc = store.load()?;
    let mut results = Vec::new();
    for h in doc.hypotheses.values() {
        if matches!(h.status, Status::Confirmed | Status::Rejected) {
            continue;
        }
        let mut node_files = Vec::new();
        for r in &h.node_refs {
            if let Some(n) = graphs.get(&r.graph).and_then(|g| g.nodes.get(&r.node)) {
                node_files.extend(n.source_refs.iter().filter_map(|c| card_file(c)));
            }
        }
        node_files.sort();
        node_files.dedup();
        let files = finalizer_files(h, &manifest, &card_file, &node_files, file_cap);
        let mut body = String::new();
        for f in &files {
            let path = manifest.abs_path(f);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            body.push_str(&format!("=== {f} ===\n{}\n", String::from_utf8_lossy(&bytes)));
        }
        let evidence: String = h
            .evidence
            .iter()
            .map(|e| format!("- {:?} {}: {}\n", e.stance, e.card_id, e.note))
            .collect();
        let req = StructuredRequest::new(SchemaId::Verdict, profile.clone())
            .section(
                "Task",
                "Decide whether this hypothesis is a real vulnerability given the full files. \
                 Answer confirmed, rejected or uncertain with reasoning.",
            )
            .section(
                "Hypothesis",
                format!(
                    "{} ({})\ntype: {}\nseverity: {:?}\nconfidence: {:.2}\nreasoning: {}\nevidence:\n{}",
                    h.title, h.id, h.vuln_type, h.severity, h.confidence, h.reasoning, evidence
                ),
            )
            .section("Files", body);
        let outcome = match complete_structured::<QaVerdict>(provider, &req, retries) {
            Ok(r) => {
                store.finalize_verdict(&h.id, r.value.verdict, &r.value.reasoning)?;
                FinalizeOutcome::Verdict {
                    verdict: r.value.verdict,
                }
            }
            Err(e @ (Error::ProviderSchema { .. } | Error::ContextOverflow { .. })) => {
                tracing::warn!(id = %h.id, error = %e, "finalizer skipped hypothesis");
                FinalizeOutcome::Skipped { reason: e.to_string() }
            }
            Err(e) => return Err(e),
        };
        results.push(FinalizeResult {
            id: h.id.clone(),
            outcome,
            files,
        });
    }
    Ok(results)
}
