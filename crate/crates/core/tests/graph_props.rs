mod support;

use graphaudit_core::graph::{apply_update, orphan_nodes, ApplyOptions, GraphRecord, GraphStore, GraphUpdate};
use graphaudit_core::storage::FileStore;
use graphaudit_core::Error;
use proptest::prelude::*;
use support::*;

fn opts(refine_only: bool) -> ApplyOptions {
    ApplyOptions {
        refine_only,
        ..Default::default()
    }
}

fn is_superset(after: &GraphRecord, before: &GraphRecord) -> bool {
    let (bn, be) = graph_shape(before);
    let (an, ae) = graph_shape(after);
    bn.iter().all(|(id, refs)| an.get(id).is_some_and(|r| r.is_superset(refs)))
        && be.iter().all(|(k, ev)| ae.get(k).is_some_and(|e| e.is_superset(ev)))
        && before.nodes.iter().all(|(id, n)| {
            let a = &after.nodes[id];
            n.observations.iter().all(|o| a.observations.contains(o))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn update_sequences_hold_invariants(
        seq in proptest::collection::vec(graph_update("G"), 1..8),
        refine_only in any::<bool>(),
    ) {
        let known = known_cards();
        let mut g = GraphRecord::new("G", "test");
        for u in &seq {
            let before = g.clone();
            let stats = apply_update(&mut g, u, &known, opts(refine_only)).unwrap();
            prop_assert!(is_superset(&g, &before), "graph shrank");
            prop_assert_eq!(g.nodes.len(), before.nodes.len() + stats.nodes_added);
            prop_assert_eq!(g.edges.len(), before.edges.len() + stats.edges_added);
            prop_assert!(edge_keys_unique(&g));
            prop_assert_eq!(orphan_nodes(&g), orphans_oracle(&g));
            // no dangling edges, no unknown card ids
            for e in &g.edges {
                prop_assert!(g.nodes.contains_key(&e.src) && g.nodes.contains_key(&e.dst));
                prop_assert!(e.evidence.iter().all(|c| known.contains(c)));
            }
            for n in g.nodes.values() {
                prop_assert!(n.source_refs.iter().all(|c| known.contains(c)));
            }

            let once = g.clone();
            let again = apply_update(&mut g, u, &known, opts(refine_only)).unwrap();
            prop_assert_eq!(again.nodes_added + again.edges_added, 0);
            prop_assert_eq!(graph_shape(&g), graph_shape(&once));
            prop_assert_eq!(
                g.nodes.values().map(|n| (&n.observations, &n.properties)).collect::<Vec<_>>(),
                once.nodes.values().map(|n| (&n.observations, &n.properties)).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn refine_only_caps_new_nodes(seq in proptest::collection::vec(graph_update("G"), 1..6)) {
        let known = known_cards();
        let mut g = GraphRecord::new("G", "test");
        for u in &seq {
            let before: std::collections::BTreeSet<String> = g.nodes.keys().cloned().collect();
            apply_update(&mut g, u, &known, opts(true)).unwrap();
            let added: Vec<&String> = g.nodes.keys().filter(|k| !before.contains(*k)).collect();
            prop_assert!(added.len() <= graphaudit_core::graph::DEFAULT_MAX_REFINE_NODES);
            // every node added in refine-only mode is attached to a node that existed before
            for id in added {
                let attached = g.incident_edges(id).any(|e| {
                    let other = if &e.src == id { &e.dst } else { &e.src };
                    before.contains(other)
                });
                prop_assert!(attached || before.is_empty(), "node {id} not attached");
            }
        }
    }
}

#[test]
fn target_mismatch_rejected_without_change() {
    let mut g = GraphRecord::new("G", "");
    let u = GraphUpdate {
        target_graph: "H".into(),
        ..Default::default()
    };
    assert!(matches!(
        apply_update(&mut g, &u, &known_cards(), ApplyOptions::default()),
        Err(Error::TargetMismatch { .. })
    ));
    assert!(g.nodes.is_empty());
}

#[test]
fn store_round_trip_and_concurrent_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(dir.path(), FileStore::default());
    let mut a = GraphRecord::new("A", "x");
    store.save(&mut a).unwrap();
    let mut b = GraphRecord::new("B", "y");
    store.save(&mut b).unwrap();
    assert_eq!(store.names().unwrap(), vec!["A", "B"]);
    assert!(matches!(store.load("C"), Err(Error::UnknownGraph(_))));

    std::thread::scope(|s| {
        for name in ["A", "B"] {
            let store = &store;
            s.spawn(move || {
                for i in 0..20 {
                    store
                        .update(name, |g| {
                            let u: GraphUpdate = serde_json::from_value(serde_json::json!({
                                "target_graph": name,
                                "new_nodes": [{"id": format!("n{i}"), "type": "t", "label": "l"}]
                            }))
                            .unwrap();
                            apply_update(g, &u, &known_cards(), ApplyOptions::default())
                        })
                        .unwrap();
                }
            });
        }
    });
    assert_eq!(store.load("A").unwrap().nodes.len(), 20);
    assert_eq!(store.load("B").unwrap().nodes.len(), 20);
}
