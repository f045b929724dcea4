#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use graphaudit_core::agent::{self, FinalizeResult};
use graphaudit_core::builder::{self, BuildConfig, BuildReport};
use graphaudit_core::graph::{EdgeSpec, GraphRecord, GraphUpdate, NodeSpec, NodeUpdate};
use graphaudit_core::ingest::{self, IngestConfig};
use graphaudit_core::project::Project;
use graphaudit_core::provider::{MockProvider, ModelsConfig, Role};
use graphaudit_core::report::{self, Report};
use graphaudit_core::session::{self, AuditConfig, AuditReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn toy_repo() -> PathBuf {
    fixtures().join("toy_repo")
}

pub fn e2e_script() -> PathBuf {
    fixtures().join("e2e_script.jsonl")
}

/// 20 source files of mixed sizes plus empty placeholder files that the
/// returned config excludes.
pub fn write_mixed_repo(dir: &Path, seed: u64) -> IngestConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..20 {
        let sub = dir.join(format!("pkg{}", i % 4));
        std::fs::create_dir_all(&sub).unwrap();
        let mut text = String::new();
        let lines = match i % 5 {
            0 => 1,
            1 => rng.gen_range(2..20),
            _ => rng.gen_range(20..400),
        };
        for l in 0..lines {
            let width = if l % 37 == 3 { rng.gen_range(2500..6000) } else { rng.gen_range(0..120) };
            let line: String = (0..width)
                .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
                .collect();
            text.push_str(&line);
            if l + 1 < lines || i % 3 == 0 {
                text.push('\n');
            }
        }
        if text.is_empty() {
            text.push('x');
        }
        std::fs::write(sub.join(format!("f{i:02}.src")), text).unwrap();
        std::fs::write(sub.join(format!("empty{i:02}.gitkeep")), "").unwrap();
    }
    let mut cfg = IngestConfig::default();
    cfg.exclude_globs.push("**/*.gitkeep".into());
    cfg
}

pub struct E2e {
    pub project: Project,
    pub build: BuildReport,
    pub audit: AuditReport,
    pub finalized: Vec<FinalizeResult>,
    pub report: Report,
    pub mock: MockProvider,
}

/// Ingest, build, audit, finalize and report under the scripted mock.
pub fn run_e2e(repo: &Path, root: &Path) -> E2e {
    let project = Project::new(root);
    let (manifest, cards) = ingest::ingest_repo(repo, &IngestConfig::default()).unwrap();
    project.save_ingest(&manifest, &cards).unwrap();
    let mock = MockProvider::load(e2e_script()).unwrap();
    let models = ModelsConfig::default();
    let build = builder::build(
        &project,
        &BuildConfig {
            k: 2,
            max_iterations: 6,
            ..Default::default()
        },
        &mock,
        &models.profile(Role::Graph),
    )
    .unwrap();
    let audit = session::run_audit(
        &project,
        &mock,
        &models,
        "s1",
        &AuditConfig {
            n: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let finalized = agent::finalize_session(&project, &mock, &models.profile(Role::Finalizer), agent::DEFAULT_FILE_CAP, 2)
        .unwrap();
    let report = report::write_report(&project, true).unwrap();
    E2e {
        project,
        build,
        audit,
        finalized,
        report,
        mock,
    }
}

const TIME_KEYS: &[&str] = &["created_at", "updated_at", "at", "added_at", "last_visited", "consumed_at"];

fn strip_times(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in TIME_KEYS {
                m.remove(*k);
            }
            m.values_mut().for_each(strip_times);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_times),
        _ => {}
    }
}

/// Every file under `root` keyed by relative path, with timestamp fields
/// removed from JSON documents and JSONL lines.
pub fn normalized_artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in walkdir(root) {
        let rel = entry.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
        let bytes = std::fs::read(&entry).unwrap();
        let norm = if rel.ends_with(".json") {
            let mut v: Value = serde_json::from_slice(&bytes).unwrap();
            strip_times(&mut v);
            serde_json::to_vec_pretty(&v).unwrap()
        } else if rel.ends_with(".jsonl") {
            let mut buf = Vec::new();
            for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
                let mut v: Value = serde_json::from_slice(line).unwrap();
                strip_times(&mut v);
                buf.extend(serde_json::to_vec(&v).unwrap());
                buf.push(b'\n');
            }
            buf
        } else {
            bytes
        };
        out.insert(rel, norm);
    }
    out
}

fn walkdir(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

// Graph update generation over a small id space so that updates collide.

pub const CARD_POOL: &[&str] = &["c0", "c1", "c2", "c3", "c4", "c5"];

pub fn known_cards() -> HashSet<String> {
    CARD_POOL[..5].iter().map(|s| s.to_string()).collect()
}

fn refs() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(proptest::sample::select(CARD_POOL), 0..3)
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

fn node_id() -> impl Strategy<Value = String> {
    (0..8u8).prop_map(|i| format!("n{i}"))
}

fn node_spec() -> impl Strategy<Value = NodeSpec> {
    (node_id(), proptest::sample::select(&["function", "contract"][..]), refs()).prop_map(|(id, t, refs)| NodeSpec {
        label: format!("label {id}"),
        id,
        node_type: t.to_string(),
        refs,
    })
}

fn edge_spec() -> impl Strategy<Value = EdgeSpec> {
    (node_id(), node_id(), proptest::sample::select(&["calls", "guards"][..]), refs()).prop_map(|(src, dst, t, refs)| {
        EdgeSpec {
            edge_type: t.to_string(),
            src,
            dst,
            refs,
        }
    })
}

fn node_update() -> impl Strategy<Value = NodeUpdate> {
    (node_id(), proptest::option::of("[a-z]{1,4}")).prop_map(|(id, obs)| NodeUpdate {
        id,
        new_observations: obs.map(|o| vec![o]),
        ..Default::default()
    })
}

pub fn graph_update(target: &'static str) -> impl Strategy<Value = GraphUpdate> {
    (
        proptest::collection::vec(node_spec(), 0..4),
        proptest::collection::vec(edge_spec(), 0..4),
        proptest::collection::vec(node_update(), 0..2),
    )
        .prop_map(move |(new_nodes, new_edges, node_updates)| GraphUpdate {
            target_graph: target.to_string(),
            new_nodes,
            new_edges,
            node_updates,
        })
}

/// Nodes with zero incident edges, counted the slow way.
pub fn orphans_oracle(g: &GraphRecord) -> Vec<String> {
    let mut out = Vec::new();
    for id in g.nodes.keys() {
        let mut count = 0;
        for e in &g.edges {
            if &e.src == id {
                count += 1;
            }
            if &e.dst == id {
                count += 1;
            }
        }
        if count == 0 {
            out.push(id.clone());
        }
    }
    out.sort();
    out
}

pub fn edge_keys_unique(g: &GraphRecord) -> bool {
    let keys: BTreeSet<(&str, &str, &str)> = g.edges.iter().map(|e| e.key()).collect();
    keys.len() == g.edges.len()
}

/// Node ids, their refs, and edge keys with evidence. Used to compare
/// graphs while ignoring timestamps.
pub type Shape = (
    BTreeMap<String, BTreeSet<String>>,
    BTreeMap<(String, String, String), BTreeSet<String>>,
);

pub fn graph_shape(g: &GraphRecord) -> Shape {
    let nodes = g
        .nodes
        .iter()
        .map(|(id, n)| (id.clone(), n.source_refs.iter().cloned().collect()))
        .collect();
    let edges = g
        .edges
        .iter()
        .map(|e| {
            (
                (e.src.clone(), e.dst.clone(), e.edge_type.clone()),
                e.evidence.iter().cloned().collect(),
            )
        })
        .collect();
    (nodes, edges)
}

/// Toy repo ingested and both graphs built from the head of the e2e script.
pub fn built_project(root: &Path) -> Project {
    let project = Project::new(root);
    let (manifest, cards) = ingest::ingest_repo(toy_repo(), &IngestConfig::default()).unwrap();
    project.save_ingest(&manifest, &cards).unwrap();
    let script = std::fs::read_to_string(e2e_script()).unwrap();
    let head: Vec<&str> = script.lines().take(7).collect();
    let mock = MockProvider::from_jsonl(&head.join("\n")).unwrap();
    builder::build(
        &project,
        &BuildConfig {
            k: 2,
            max_iterations: 6,
            ..Default::default()
        },
        &mock,
        &ModelsConfig::default().profile(Role::Graph),
    )
    .unwrap();
    project
}

pub const VAULT_CARD: &str = "card_f51637a5411d";
pub const OWNABLE_CARD: &str = "card_03267d3327f3";
pub const TOKEN_CARD: &str = "card_656c21f4a9a3";
