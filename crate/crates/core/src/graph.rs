//! Relation-first graph records and update semantics.
//!
//! Nodes are added once and later duplicates only merge their card refs.
//! Edges are keyed by `(src, dst, type)` and merge evidence on collision.
//! Node updates overwrite descriptions, overwrite properties key by key and
//! append observations/assumptions, skipping exact duplicates. Confidence is
//! never stored on nodes.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, Card, Manifest};
use crate::storage::FileStore;

pub const SYSTEM_ARCHITECTURE: &str = "SystemArchitecture";
pub const DEFAULT_MAX_REFINE_NODES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub properties: BTreeMap<String, String>,
    #[serde(default)]
    pub observations: Vec<String>,
    #[serde(default)]
    pub assumptions: Vec<String>,
    #[serde(default)]
    pub source_refs: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    #[serde(rename = "type")]
    pub edge_type: String,
    pub src: String,
    pub dst: String,
    #[serde(default)]
    pub evidence: BTreeSet<String>,
}

impl EdgeRecord {
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.src, &self.dst, &self.edge_type)
    }

    pub fn touches(&self, node: &str) -> bool {
        self.src == node || self.dst == node
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub updated_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphRecord {
    pub name: String,
    pub focus: String,
    #[serde(default)]
    pub nodes: BTreeMap<String, NodeRecord>,
    #[serde(default)]
    pub edges: Vec<EdgeRecord>,
    #[serde(default)]
    pub stats: GraphStats,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl GraphRecord {
    pub fn new(name: impl Into<String>, focus: impl Into<String>) -> GraphRecord {
        GraphRecord {
            name: name.into(),
            focus: focus.into(),
            ..Default::default()
        }
    }

    pub fn edge(&self, src: &str, dst: &str, edge_type: &str) -> Option<&EdgeRecord> {
        self.edges.iter().find(|e| e.key() == (src, dst, edge_type))
    }

    pub fn incident_edges<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a EdgeRecord> + 'a {
        self.edges.iter().filter(move |e| e.touches(node))
    }

    pub fn refresh_stats(&mut self) {
        self.stats.node_count = self.nodes.len();
        self.stats.edge_count = self.edges.len();
        self.stats.updated_at = Some(Utc::now());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(rename = "type")]
    pub node_type: String,
    pub label: String,
    #[serde(default)]
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    #[serde(rename = "type")]
    pub edge_type: String,
    pub src: String,
    pub dst: String,
    #[serde(default)]
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeUpdate {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub properties: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_observations: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_assumptions: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphUpdate {
    pub target_graph: String,
    #[serde(default)]
    pub new_nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub new_edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub node_updates: Vec<NodeUpdate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyOptions {
    pub refine_only: bool,
    pub max_refine_nodes: usize,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions {
            refine_only: false,
            max_refine_nodes: DEFAULT_MAX_REFINE_NODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub item: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ApplyStats {
    pub nodes_added: usize,
    pub edges_added: usize,
    pub nodes_updated: usize,
    pub rejected: Vec<Rejection>,
}

impl ApplyStats {
    pub fn delta(&self) -> usize {
        self.nodes_added + self.edges_added
    }
}

fn known_refs(
    refs: &[String],
    owner: &str,
    known_cards: &HashSet<String>,
    rejected: &mut Vec<Rejection>,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in refs {
        if known_cards.contains(r) {
            out.insert(r.clone());
        } else {
            rejected.push(Rejection {
                item: owner.to_string(),
                reason: format!("unknown card ref {r} dropped"),
            });
        }
    }
    out
}

fn append_unique(list: &mut Vec<String>, items: &[String]) -> bool {
    let mut changed = false;
    for item in items {
        if !list.contains(item) {
            list.push(item.clone());
            changed = true;
        }
    }
    changed
}

/// Merge `update` into `graph`.
pub fn apply_update(
    graph: &mut GraphRecord,
    update: &GraphUpdate,
    known_cards: &HashSet<String>,
    opts: ApplyOptions,
) -> Result<ApplyStats> {
    if update.target_graph != graph.name {
        return Err(Error::TargetMismatch {
            graph: graph.name.clone(),
            update: update.target_graph.clone(),
        });
    }
    let mut stats = ApplyStats::default();

    // Anchors for refine-only attachment: nodes present before this update
    // and not themselves proposed by it.
    let proposed: HashSet<&str> = update.new_nodes.iter().map(|n| n.id.as_str()).collect();
    let anchors: HashSet<String> = graph
        .nodes
        .keys()
        .filter(|id| !proposed.contains(id.as_str()))
        .cloned()
        .collect();
    let mut refine_slots = 0usize;

    for spec in &update.new_nodes {
        let owner = format!("node {}", spec.id);
        if spec.id.is_empty() {
            stats.rejected.push(Rejection {
                item: owner,
                reason: "empty node id".into(),
            });
            continue;
        }
        if opts.refine_only {
            let attached = update.new_edges.iter().any(|e| {
                (e.src == spec.id && anchors.contains(&e.dst))
                    || (e.dst == spec.id && anchors.contains(&e.src))
            });
            if !attached {
                stats.rejected.push(Rejection {
                    item: owner,
                    reason: "refine-only: not attached to an existing node".into(),
                });
                continue;
            }
            if refine_slots >= opts.max_refine_nodes {
                stats.rejected.push(Rejection {
                    item: owner,
                    reason: format!("refine-only: cap of {} new nodes reached", opts.max_refine_nodes),
                });
                continue;
            }
            refine_slots += 1;
        }
        let refs = known_refs(&spec.refs, &owner, known_cards, &mut stats.rejected);
        match graph.nodes.get_mut(&spec.id) {
            Some(existing) => existing.source_refs.extend(refs),
            None => {
                graph.nodes.insert(
                    spec.id.clone(),
                    NodeRecord {
                        id: spec.id.clone(),
                        node_type: spec.node_type.clone(),
                        label: spec.label.clone(),
                        description: None,
                        properties: BTreeMap::new(),
                        observations: Vec::new(),
                        assumptions: Vec::new(),
                        source_refs: refs,
                    },
                );
                stats.nodes_added += 1;
            }
        }
    }

    for spec in &update.new_edges {
        let owner = format!("edge {}-[{}]->{}", spec.src, spec.edge_type, spec.dst);
        let missing: Vec<&str> = [spec.src.as_str(), spec.dst.as_str()]
            .into_iter()
            .filter(|n| !graph.nodes.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            stats.rejected.push(Rejection {
                item: owner,
                reason: format!("unknown node(s): {}", missing.join(", ")),
            });
            continue;
        }
        let refs = known_refs(&spec.refs, &owner, known_cards, &mut stats.rejected);
        match graph
            .edges
            .iter_mut()
            .find(|e| e.key() == (spec.src.as_str(), spec.dst.as_str(), spec.edge_type.as_str()))
        {
            Some(existing) => existing.evidence.extend(refs),
            None => {
                graph.edges.push(EdgeRecord {
                    edge_type: spec.edge_type.clone(),
                    src: spec.src.clone(),
                    dst: spec.dst.clone(),
                    evidence: refs,
                });
                stats.edges_added += 1;
            }
        }
    }

    for nu in &update.node_updates {
        let Some(node) = graph.nodes.get_mut(&nu.id) else {
            stats.rejected.push(Rejection {
                item: format!("node_update {}", nu.id),
                reason: "unknown node".into(),
            });
            continue;
        };
        let mut changed = false;
        if let Some(desc) = &nu.description {
            if node.description.as_ref() != Some(desc) {
                node.description = Some(desc.clone());
                changed = true;
            }
        }
        if let Some(props) = &nu.properties {
            for (k, v) in props {
                if node.properties.get(k) != Some(v) {
                    node.properties.insert(k.clone(), v.clone());
                    changed = true;
                }
            }
        }
        if let Some(obs) = &nu.new_observations {
            changed |= append_unique(&mut node.observations, obs);
        }
        if let Some(asm) = &nu.new_assumptions {
            changed |= append_unique(&mut node.assumptions, asm);
        }
        if changed {
            stats.nodes_updated += 1;
        }
    }

    graph.stats.node_count = graph.nodes.len();
    graph.stats.edge_count = graph.edges.len();
    Ok(stats)
}

/// Append observations and assumptions to a node, skipping exact duplicates.
pub fn annotate_node(
    graph: &mut GraphRecord,
    node_id: &str,
    observations: &[String],
    assumptions: &[String],
) -> Result<NodeRecord> {
    let node = graph
        .nodes
        .get_mut(node_id)
        .ok_or_else(|| Error::UnknownNode(vec![node_id.to_string()]))?;
    append_unique(&mut node.observations, observations);
    append_unique(&mut node.assumptions, assumptions);
    Ok(node.clone())
}

/// Ids of nodes with no incident edge, sorted.
pub fn orphan_nodes(graph: &GraphRecord) -> Vec<String> {
    let connected: HashSet<&str> = graph
        .edges
        .iter()
        .flat_map(|e| [e.src.as_str(), e.dst.as_str()])
        .collect();
    // BTreeMap keys are already sorted
    graph
        .nodes
        .keys()
        .filter(|id| !connected.contains(id.as_str()))
        .cloned()
        .collect()
}

pub fn referenced_cards<'a>(graphs: impl IntoIterator<Item = &'a GraphRecord>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for g in graphs {
        for n in g.nodes.values() {
            out.extend(n.source_refs.iter().cloned());
        }
        for e in &g.edges {
            out.extend(e.evidence.iter().cloned());
        }
    }
    out
}

/// A card retained in the referenced-card store, with its exact bytes.
/// UTF-8 content is kept as text, anything else as hex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCard {
    #[serde(flatten)]
    pub card: Card,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hex: Option<String>,
}

impl StoredCard {
    pub fn new(card: Card, bytes: Vec<u8>) -> StoredCard {
        match String::from_utf8(bytes) {
            Ok(text) => StoredCard {
                card,
                text: Some(text),
                hex: None,
            },
            Err(e) => StoredCard {
                card,
                text: None,
                hex: Some(hex::encode(e.into_bytes())),
            },
        }
    }

    pub fn bytes(&self) -> Vec<u8> {
        match (&self.text, &self.hex) {
            (Some(t), _) => t.as_bytes().to_vec(),
            (None, Some(h)) => hex::decode(h).unwrap_or_default(),
            (None, None) => Vec::new(),
        }
    }
}

/// Card lookup by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CardStore {
    cards: BTreeMap<String, StoredCard>,
}

impl CardStore {
    pub fn from_cards(cards: impl IntoIterator<Item = StoredCard>) -> CardStore {
        CardStore {
            cards: cards.into_iter().map(|c| (c.card.id.clone(), c)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&StoredCard> {
        self.cards.get(id)
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredCard> {
        self.cards.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphSummaryEntry {
    pub focus: String,
    pub node_count: usize,
    pub edge_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphSummary {
    pub graphs: BTreeMap<String, GraphSummaryEntry>,
    pub total_nodes: usize,
    pub total_edges: usize,
    pub referenced_cards: usize,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const CARD_STORE_FILE: &str = "card_store.jsonl";

/// On-disk graph collection: `<dir>/<name>.json`, `summary.json` and
/// `card_store.jsonl`.
#[derive(Debug, Clone)]
pub struct GraphStore {
    dir: PathBuf,
    files: FileStore,
}

pub fn graph_file_name(name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}.json")
}

fn validate_graph_name(name: &str) -> Result<()> {
    let file = graph_file_name(name);
    if name.is_empty() || file == SUMMARY_FILE {
        return Err(Error::Validation(format!("graph name {name:?} is reserved or empty")));
    }
    Ok(())
}

impl GraphStore {
    pub fn new(dir: impl Into<PathBuf>, files: FileStore) -> GraphStore {
        GraphStore {
            dir: dir.into(),
            files,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, name: &str) -> PathBuf {
        self.dir.join(graph_file_name(name))
    }

    pub fn save(&self, graph: &mut GraphRecord) -> Result<()> {
        validate_graph_name(&graph.name)?;
        graph.refresh_stats();
        self.files.write(self.path_for(&graph.name), graph)
    }

    pub fn load(&self, name: &str) -> Result<GraphRecord> {
        let g: Option<GraphRecord> = self.files.read(self.path_for(name), None)?;
        g.ok_or_else(|| Error::UnknownGraph(name.to_string()))
    }

    /// Read-modify-write one graph under its file lock.
    pub fn update<R>(&self, name: &str, f: impl FnOnce(&mut GraphRecord) -> Result<R>) -> Result<R> {
        let path = self.path_for(name);
        if !path.exists() {
            return Err(Error::UnknownGraph(name.to_string()));
        }
        self.files.update(path, |g: &mut GraphRecord| {
            let out = f(g)?;
            g.refresh_stats();
            Ok(out)
        })
    }

    /// Graph names on disk, sorted.
    pub fn names(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let file = entry.file_name().to_string_lossy().into_owned();
            if file == SUMMARY_FILE || file.starts_with('.') || !file.ends_with(".json") {
                continue;
            }
            let g: Option<GraphRecord> = self.files.read(entry.path(), None)?;
            if let Some(g) = g {
                out.push(g.name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn load_all(&self) -> Result<Vec<GraphRecord>> {
        self.names()?.iter().map(|n| self.load(n)).collect()
    }

    /// Rewrite `summary.json` and the referenced-card store from the graphs
    /// currently on disk.
    pub fn write_summary_and_cards(&self, manifest: &Manifest, cards: &[Card]) -> Result<GraphSummary> {
        let graphs = self.load_all()?;
        let referenced = referenced_cards(&graphs);
        let mut summary = GraphSummary::default();
        for g in &graphs {
            summary.graphs.insert(
                g.name.clone(),
                GraphSummaryEntry {
                    focus: g.focus.clone(),
                    node_count: g.nodes.len(),
                    edge_count: g.edges.len(),
                },
            );
            summary.total_nodes += g.nodes.len();
            summary.total_edges += g.edges.len();
        }
        summary.referenced_cards = referenced.len();
        self.files.write(self.dir.join(SUMMARY_FILE), &summary)?;

        let mut stored = Vec::new();
        for card in cards.iter().filter(|c| referenced.contains(&c.id)) {
            let bytes = ingest::card_content(card, manifest)?;
            stored.push(StoredCard::new(card.clone(), bytes));
        }
        ingest::write_jsonl(&self.dir.join(CARD_STORE_FILE), &stored)?;
        Ok(summary)
    }

    pub fn load_card_store(&self) -> Result<CardStore> {
        let cards: Vec<StoredCard> = ingest::read_jsonl(&self.dir.join(CARD_STORE_FILE))?;
        Ok(CardStore::from_cards(cards))
    }

    pub fn summary(&self) -> Result<GraphSummary> {
        self.files.read(self.dir.join(SUMMARY_FILE), GraphSummary::default())
    }
}
