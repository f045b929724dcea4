//! Audit sessions: status file, coverage snapshot and the plan/run cycle.

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Budgets, InvestigationReport, Outcome};
use crate::error::{Error, Result};
use crate::planning::{
    coverage_from_counts, mixing, plan_next, render_graphs_view, CoverageConfig, FrameStatus, Investigation, Phase,
    PlanRequest,
};
use crate::project::Project;
use crate::provider::{ModelsConfig, Provider, Role};
use crate::storage::FileStore;

pub const STATUS_FILE: &str = "status.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    #[default]
    Idle,
    Planning,
    Investigating,
    Finalizing,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_goal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_key: Option<String>,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_outcome: Option<Outcome>,
    pub investigations_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated_at: Option<DateTime<Utc>>,
}

impl SessionStatus {
    pub fn store(project: &Project, session_id: &str) -> StatusStore {
        StatusStore {
            path: project.session_dir(session_id).join(STATUS_FILE),
            session_id: session_id.to_string(),
            files: project.files(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StatusStore {
    path: PathBuf,
    session_id: String,
    files: FileStore,
}

impl StatusStore {
    pub fn path(&self) -> &std::path::Path {
        &self.path
    }

    pub fn load(&self) -> Result<SessionStatus> {
        let mut s: SessionStatus = self.files.read(&self.path, SessionStatus::default())?;
        if s.session_id.is_empty() {
            s.session_id = self.session_id.clone();
        }
        Ok(s)
    }

    pub fn update(&self, f: impl FnOnce(&mut SessionStatus)) -> Result<SessionStatus> {
        let sid = self.session_id.clone();
        self.files.update(&self.path, |s: &mut SessionStatus| {
            s.session_id = sid;
            f(s);
            s.updated_at = Some(Utc::now());
            Ok(s.clone())
        })
    }
}

/// Coverage of the current graphs and their referenced cards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSnapshot {
    pub visited_nodes: usize,
    pub total_nodes: usize,
    pub visited_cards: usize,
    pub total_cards: usize,
    pub p: f64,
    pub lambda: f64,
    pub phase: Phase,
}

pub fn coverage_snapshot(project: &Project, cfg: &CoverageConfig) -> Result<CoverageSnapshot> {
    let graphs = project.graphs().load_all()?;
    let cards = project.graphs().load_card_store()?;
    let idx = project.coverage()?;
    let universe: Vec<(&str, &str)> = graphs
        .iter()
        .flat_map(|g| g.nodes.keys().map(move |n| (g.name.as_str(), n.as_str())))
        .collect();
    let total_nodes = universe.len();
    let visited_nodes = idx.visited_nodes_in(universe);
    let total_cards = cards.len();
    let visited_cards = idx.visited_cards_in(cards.iter().map(|c| c.card.id.as_str()));
    let p = coverage_from_counts(visited_nodes, total_nodes, visited_cards, total_cards, cfg)?;
    Ok(CoverageSnapshot {
        visited_nodes,
        total_nodes,
        visited_cards,
        total_cards,
        p,
        lambda: mixing(p, cfg),
        phase: crate::planning::select_phase(p, cfg, None),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub n: usize,
    pub phase_override: Option<Phase>,
    pub coverage: CoverageConfig,
    pub budgets: Budgets,
    /// Extra planning rounds allowed after preemptions.
    pub max_replans: usize,
    pub retries: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        let coverage = CoverageConfig::default();
        AuditConfig {
            n: 3,
            phase_override: None,
            coverage,
            budgets: Budgets {
                q_star: coverage.q_star,
                ..Budgets::default()
            },
            max_replans: 1,
            retries: crate::provider::DEFAULT_SCHEMA_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRound {
    pub phase: Phase,
    pub coverage: f64,
    pub lambda: f64,
    pub planned: Vec<Investigation>,
    pub dropped_repeats: usize,
    pub investigations: Vec<InvestigationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub session_id: String,
    pub rounds: Vec<PlanRound>,
}

/// Plan with the strategist, run each investigation with the scout, and
/// replan after a steering preemption.
pub fn run_audit(
    project: &Project,
    provider: &dyn Provider,
    models: &ModelsConfig,
    session_id: &str,
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    cfg.coverage.validate()?;
    if cfg.n == 0 {
        return Err(Error::Validation("n must be >= 1".into()));
    }
    let strategist = models.profile(Role::Strategist);
    let mut agent = Agent::new(project, provider, models.profile(Role::Scout), session_id);
    agent.retries = cfg.retries;
    let status = SessionStatus::store(project, session_id);
    let plans = project.plans(session_id);

    let mut rounds = Vec::new();
    let mut steering: Vec<String> = Vec::new();
    for _ in 0..=cfg.max_replans {
        let snap = coverage_snapshot(project, &cfg.coverage)?;
        let phase = crate::planning::select_phase(snap.p, &cfg.coverage, cfg.phase_override);
        status.update(|s| {
            s.state = SessionState::Planning;
            s.phase = Some(phase);
            s.coverage = Some(snap.p);
            s.lambda = Some(snap.lambda);
            s.current_goal = None;
            s.frame_key = None;
        })?;
        let graphs = project.graphs().load_all()?;
        let view = render_graphs_view(&graphs);
        let hyp_summary = project.hypotheses().summarize_for_context()?;
        let outcome = plan_next(
            &PlanRequest {
                graphs_view: &view,
                cfg: &cfg.coverage,
                coverage: snap.p,
                phase_override: cfg.phase_override,
                hyp_summary: &hyp_summary,
                steering: &steering,
                n: cfg.n,
                profile: &strategist,
                retries: cfg.retries,
            },
            &plans,
            &project.ledger_path(),
            &project.files(),
            provider,
        )?;
        let mut round = PlanRound {
            phase: outcome.phase,
            coverage: snap.p,
            lambda: outcome.lambda,
            planned: outcome.investigations.clone(),
            dropped_repeats: outcome.dropped_repeats,
            investigations: Vec::new(),
        };
        let mut preempted = None;
        for (i, inv) in outcome.investigations.iter().enumerate() {
            let report = agent.run_investigation(inv, cfg.budgets, &steering)?;
            let was_preempted = report.outcome == Outcome::Preempted;
            if was_preempted {
                preempted = Some((i, report.consumed_notes.clone()));
            }
            round.investigations.push(report);
            if was_preempted {
                break;
            }
        }
        if let Some((i, notes)) = &preempted {
            for inv in &outcome.investigations[i + 1..] {
                plans.set_status(&inv.frame_key(), FrameStatus::Superseeded, "replan after steering")?;
            }
            steering = notes.clone();
        }
        rounds.push(round);
        if preempted.is_none() {
            break;
        }
    }
    status.update(|s| {
        s.state = SessionState::Idle;
        s.current_goal = None;
        s.frame_key = None;
        if let Ok(snap) = coverage_snapshot(project, &cfg.coverage) {
            s.coverage = Some(snap.p);
            s.lambda = Some(snap.lambda);
        }
    })?;
    Ok(AuditReport {
        session_id: session_id.to_string(),
        rounds,
    })
}
