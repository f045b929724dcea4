//! Provider-driven graph discovery and iterative refinement.
//!
//! Discovery asks for exactly `k` graph specs, the first of which is always
//! `SystemArchitecture`. Refinement then requests one [`GraphUpdate`] per
//! iteration, cycling round-robin over the graphs, applies it and saves the
//! graph before the next call. After one warm-up round the build stops once
//! `early_stop_window` consecutive iterations admit no node or edge.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, apply_update, ApplyOptions, GraphRecord, GraphUpdate, SYSTEM_ARCHITECTURE};
use crate::ingest::{self, Card, Manifest};
use crate::project::Project;
use crate::provider::{
    complete_structured_with, estimate_tokens, ModelProfile, Provider, Schema, SchemaId, StructuredRequest,
    DEFAULT_SCHEMA_RETRIES,
};
use crate::storage::PathGuard;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub name: String,
    pub focus: String,
}

impl GraphSpec {
    pub fn new(name: impl Into<String>, focus: impl Into<String>) -> GraphSpec {
        GraphSpec {
            name: name.into(),
            focus: focus.into(),
        }
    }

    /// Parse `name:focus` (focus may be empty).
    pub fn parse(s: &str) -> Result<GraphSpec> {
        let (name, focus) = s.split_once(':').unwrap_or((s, ""));
        if name.trim().is_empty() {
            return Err(Error::Validation(format!("graph spec {s:?} has no name")));
        }
        Ok(GraphSpec::new(name.trim(), focus.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDiscovery {
    pub graphs_needed: Vec<GraphSpec>,
    #[serde(default)]
    pub suggested_node_types: Vec<String>,
    #[serde(default)]
    pub suggested_edge_types: Vec<String>,
}

impl Schema for GraphDiscovery {
    const ID: SchemaId = SchemaId::GraphDiscovery;

    fn validate(&self) -> std::result::Result<(), String> {
        if self.graphs_needed.iter().any(|g| g.name.trim().is_empty()) {
            return Err("graph spec with empty name".into());
        }
        Ok(())
    }
}

impl Schema for GraphUpdate {
    const ID: SchemaId = SchemaId::GraphUpdate;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub k: usize,
    pub max_iterations: usize,
    pub early_stop_window: usize,
    pub context_budget_tokens: usize,
    pub refine_only: bool,
    pub max_refine_nodes: usize,
    pub forced_spec: Option<GraphSpec>,
    pub retries: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            k: 2,
            max_iterations: 10,
            early_stop_window: 2,
            context_budget_tokens: 8_000,
            refine_only: false,
            max_refine_nodes: graph::DEFAULT_MAX_REFINE_NODES,
            forced_spec: None,
            retries: DEFAULT_SCHEMA_RETRIES,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.early_stop_window == 0 || self.context_budget_tokens == 0 {
            return Err(Error::Validation(
                "k, early_stop_window and context_budget_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Round-robin over files (in first-appearance order), taking each file's
/// next card while it fits the remaining budget. A file whose next card does
/// not fit leaves the rotation.
pub fn sample_cards_for_context(cards: &[Card], budget_tokens: usize, estimate: impl Fn(&Card) -> usize) -> Vec<Card> {
    let mut per_file: Vec<(&str, std::collections::VecDeque<&Card>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for c in cards {
        let slot = *index.entry(&c.relpath).or_insert_with(|| {
            per_file.push((&c.relpath, Default::default()));
            per_file.len() - 1
        });
        per_file[slot].1.push_back(c);
    }
    let mut used = 0usize;
    let mut out = Vec::new();
    let mut active: Vec<usize> = (0..per_file.len()).collect();
    while !active.is_empty() {
        let mut next_active = Vec::with_capacity(active.len());
        for &i in &active {
            let Some(card) = per_file[i].1.pop_front() else {
                continue;
            };
            let cost = estimate(card);
            if used + cost > budget_tokens {
                continue;
            }
            used += cost;
            out.push(card.clone());
            if !per_file[i].1.is_empty() {
                next_active.push(i);
            }
        }
        active = next_active;
    }
    out
}

fn render_card(card: &Card, content: &[u8]) -> String {
    format!("{} {}\n{}\n", card.id, card.span_label(), String::from_utf8_lossy(content))
}

fn sample_section(manifest: &Manifest, cards: &[Card], budget: usize) -> String {
    let mut cache: BTreeMap<String, String> = BTreeMap::new();
    let mut text_of = |c: &Card| -> String {
        cache
            .entry(c.id.clone())
            .or_insert_with(|| {
                ingest::card_content(c, manifest)
                    .map(|b| render_card(c, &b))
                    .unwrap_or_else(|e| format!("{} unavailable: {e}\n", c.id))
            })
            .clone()
    };
    let rendered: BTreeMap<String, String> = cards.iter().map(|c| (c.id.clone(), text_of(c))).collect();
    let sample = sample_cards_for_context(cards, budget, |c| estimate_tokens(&rendered[&c.id]));
    sample.iter().map(|c| rendered[&c.id].as_str()).collect()
}

fn manifest_section(manifest: &Manifest) -> String {
    manifest
        .files
        .iter()
        .map(|f| format!("{} ({} bytes)", f.relpath, f.byte_len))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Rename the first spec to SystemArchitecture and make names unique.
fn coerce_specs(mut specs: Vec<GraphSpec>) -> Vec<GraphSpec> {
    if let Some(first) = specs.first_mut() {
        if first.name != SYSTEM_ARCHITECTURE {
            tracing::info!(from = %first.name, "renaming first discovered graph to SystemArchitecture");
            first.name = SYSTEM_ARCHITECTURE.to_string();
        }
    }
    let mut seen = HashSet::new();
    for s in specs.iter_mut() {
        let base = s.name.clone();
        let mut n = 2;
        while !seen.insert(s.name.clone()) {
            s.name = format!("{base}_{n}");
            n += 1;
        }
    }
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub specs: Vec<GraphSpec>,
    pub suggested_node_types: Vec<String>,
    pub suggested_edge_types: Vec<String>,
}

pub fn discover_graphs(
    manifest: &Manifest,
    cards: &[Card],
    cfg: &BuildConfig,
    provider: &dyn Provider,
    profile: &ModelProfile,
) -> Result<Discovery> {
    cfg.validate()?;
    if let Some(forced) = &cfg.forced_spec {
        return Ok(Discovery {
            specs: vec![forced.clone()],
            suggested_node_types: Vec::new(),
            suggested_edge_types: Vec::new(),
        });
    }
    if cards.is_empty() {
        return Err(Error::Validation("discovery needs at least one card".into()));
    }
    let k = cfg.k;
    let req = StructuredRequest::new(SchemaId::GraphDiscovery, profile.clone())
        .section(
            "Task",
            format!(
                "Propose exactly {k} graphs for auditing this codebase. The first must be \
                 {SYSTEM_ARCHITECTURE}; the others should each cover one aspect \
                 (authorization, value flow, call structure, state, ...)."
            ),
        )
        .section("Files", manifest_section(manifest))
        .section("Code sample", sample_section(manifest, cards, cfg.context_budget_tokens));
    let resp = complete_structured_with::<GraphDiscovery>(provider, &req, cfg.retries, |d| {
        if d.graphs_needed.len() == k {
            Ok(())
        } else {
            Err(format!("expected exactly {k} graphs, got {}", d.graphs_needed.len()))
        }
    })?;
    let d = resp.value;
    Ok(Discovery {
        specs: coerce_specs(d.graphs_needed),
        suggested_node_types: d.suggested_node_types,
        suggested_edge_types: d.suggested_edge_types,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub target: String,
    pub nodes_added: usize,
    pub edges_added: usize,
    pub nodes_updated: usize,
    pub rejected: usize,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub graphs: Vec<GraphRecord>,
    pub iterations: Vec<IterationLog>,
    pub stop: StopReason,
}

fn compact_graph(g: &GraphRecord) -> String {
    let mut out = String::new();
    for n in g.nodes.values() {
        out.push_str(&format!("node {} [{}] {}\n", n.id, n.node_type, n.label));
    }
    for e in &g.edges {
        out.push_str(&format!("edge {} -[{}]-> {}\n", e.src, e.edge_type, e.dst));
    }
    if out.is_empty() {
        out.push_str("(empty)\n");
    }
    out
}

/// Discover graphs and refine them until the iteration cap or early stop.
pub fn build(project: &Project, cfg: &BuildConfig, provider: &dyn Provider, profile: &ModelProfile) -> Result<BuildReport> {
    cfg.validate()?;
    let _lock = PathGuard::acquire(&project.build_lock_path(), std::time::Duration::ZERO)
        .map_err(|_| Error::Validation("another graph build holds the build lock".into()))?;
    let (manifest, cards) = project.load_ingest()?;
    let known: HashSet<String> = cards.iter().map(|c| c.id.clone()).collect();
    let store = project.graphs();

    let discovery = discover_graphs(&manifest, &cards, cfg, provider, profile)?;
    let mut graphs = Vec::with_capacity(discovery.specs.len());
    for spec in &discovery.specs {
        let mut g = match store.load(&spec.name) {
            Ok(existing) => existing,
            Err(Error::UnknownGraph(_)) => GraphRecord::new(&spec.name, &spec.focus),
            Err(e) => return Err(e),
        };
        if !discovery.suggested_node_types.is_empty() {
            g.metadata
                .insert("suggested_node_types".into(), discovery.suggested_node_types.join(","));
        }
        if !discovery.suggested_edge_types.is_empty() {
            g.metadata
                .insert("suggested_edge_types".into(), discovery.suggested_edge_types.join(","));
        }
        store.save(&mut g)?;
        graphs.push(g);
    }

    let samples = sample_section(&manifest, &cards, cfg.context_budget_tokens);
    let opts = ApplyOptions {
        refine_only: cfg.refine_only,
        max_refine_nodes: cfg.max_refine_nodes,
    };
    let warmup = graphs.len();
    let mut zero_streak = 0usize;
    let mut logs = Vec::new();
    let mut stop = StopReason::MaxIterations;
    for iteration in 0..cfg.max_iterations {
        let slot = iteration % graphs.len();
        let target = graphs[slot].name.clone();
        let mut req = StructuredRequest::new(SchemaId::GraphUpdate, profile.clone())
            .section(
                "Task",
                format!(
                    "Extend graph {target} (focus: {}). Propose new nodes/edges with card refs and \
                     node updates. Use exact card ids from the code sample.{}",
                    graphs[slot].focus,
                    if cfg.refine_only {
                        " Refine only: new nodes must attach to existing nodes."
                    } else {
                        ""
                    }
                ),
            )
            .section("Current graph", compact_graph(&graphs[slot]))
            .section("Orphan nodes", graph::orphan_nodes(&graphs[slot]).join(", "));
        if !discovery.suggested_node_types.is_empty() || !discovery.suggested_edge_types.is_empty() {
            req = req.section(
                "Suggested types",
                format!(
                    "nodes: {}\nedges: {}",
                    discovery.suggested_node_types.join(", "),
                    discovery.suggested_edge_types.join(", ")
                ),
            );
        }
        req = req.section("Code sample", samples.clone());

        let mut log = IterationLog {
            iteration,
            target: target.clone(),
            nodes_added: 0,
            edges_added: 0,
            nodes_updated: 0,
            rejected: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
            error: None,
        };
        let resp = complete_structured_with::<GraphUpdate>(provider, &req, cfg.retries, |u| {
            if u.target_graph == target {
                Ok(())
            } else {
                Err(format!("target_graph must be {target}, got {}", u.target_graph))
            }
        });
        match resp {
            Ok(resp) => {
                log.prompt_tokens = resp.usage.prompt_tokens;
                log.completion_tokens = resp.usage.completion_tokens;
                let stats = apply_update(&mut graphs[slot], &resp.value, &known, opts)?;
                log.nodes_added = stats.nodes_added;
                log.edges_added = stats.edges_added;
                log.nodes_updated = stats.nodes_updated;
                log.rejected = stats.rejected.len();
                store.save(&mut graphs[slot])?;
            }
            Err(e @ Error::ProviderSchema { .. }) => {
                tracing::warn!(%target, error = %e, "skipping iteration after malformed update");
                log.error = Some(e.to_string());
            }
            Err(e) => return Err(e),
        }
        tracing::info!(
            iteration,
            %target,
            nodes_added = log.nodes_added,
            edges_added = log.edges_added,
            prompt_tokens = log.prompt_tokens,
            completion_tokens = log.completion_tokens,
            "graph build iteration"
        );
        let delta = log.nodes_added + log.edges_added;
        logs.push(log);
        if iteration + 1 > warmup {
            zero_streak = if delta == 0 { zero_streak + 1 } else { 0 };
            if zero_streak >= cfg.early_stop_window {
                stop = StopReason::EarlyStop;
                break;
            }
        }
    }
    for g in &graphs {
        let orphans = graph::orphan_nodes(g);
        if !orphans.is_empty() {
            tracing::info!(graph = %g.name, orphans = ?orphans, "orphan nodes");
        }
    }
    store.write_summary_and_cards(&manifest, &cards)?;
    Ok(BuildReport {
        graphs,
        iterations: logs,
        stop,
    })
}
