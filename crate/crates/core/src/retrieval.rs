//! Reference-driven retrieval: node ids in, exactly the cards their refs and
//! incident-edge evidence name, in a fixed order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CardStore, GraphRecord};
use crate::ingest::Card;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Node { node: String },
    Edge { src: String, dst: String, edge_type: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub card: Card,
    pub content: Vec<u8>,
    /// Every reference that justified this card, sorted.
    pub origins: Vec<Origin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodeContext {
    pub entries: Vec<ContextEntry>,
}

impl CodeContext {
    pub fn card_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.card.id.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Order key: `(relpath, char_start, char_end, id)`.
pub fn card_order(card: &Card) -> (&str, u64, u64, &str) {
    (&card.relpath, card.char_start, card.char_end, &card.id)
}

/// Collect the cards referenced by `node_ids` and every edge incident to
/// them (either endpoint), deduplicated and ordered by [`card_order`].
pub fn resolve_node_cards(graph: &GraphRecord, node_ids: &[String], cards: &CardStore) -> Result<CodeContext> {
    let unknown: Vec<String> = node_ids
        .iter()
        .filter(|id| !graph.nodes.contains_key(id.as_str()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownNode(unknown));
    }
    let requested: BTreeSet<&str> = node_ids.iter().map(String::as_str).collect();

    let mut origins: BTreeMap<&str, BTreeSet<Origin>> = BTreeMap::new();
    for id in &requested {
        for r in &graph.nodes[*id].source_refs {
            origins.entry(r).or_default().insert(Origin::Node { node: id.to_string() });
        }
    }
    for e in graph.edges.iter().filter(|e| requested.contains(e.src.as_str()) || requested.contains(e.dst.as_str())) {
        for r in &e.evidence {
            origins.entry(r).or_default().insert(Origin::Edge {
                src: e.src.clone(),
                dst: e.dst.clone(),
                edge_type: e.edge_type.clone(),
            });
        }
    }

    let missing: Vec<String> = origins
        .keys()
        .filter(|id| cards.get(id).is_none())
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCard(missing));
    }

    let mut entries: Vec<ContextEntry> = origins
        .into_iter()
        .map(|(id, o)| {
            let stored = cards.get(id).expect("checked above");
            ContextEntry {
                card: stored.card.clone(),
                content: stored.bytes(),
                origins: o.into_iter().collect(),
            }
        })
        .collect();
    entries.sort_by(|a, b| card_order(&a.card).cmp(&card_order(&b.card)));
    Ok(CodeContext { entries })
}

/// One fenced block per card, headed `relpath:[cs,ce)`.
pub fn render_context(ctx: &CodeContext) -> String {
    let mut out = String::new();
    for e in &ctx.entries {
        out.push_str(&e.card.span_label());
        out.push_str("\n```\n");
        let text = String::from_utf8_lossy(&e.content);
        out.push_str(&text);
        if !text.ends_with('\n') {
            out.push('\n');
        }
        out.push_str("```\n");
    }
    out
}
