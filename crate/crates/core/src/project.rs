//! Per-project directory layout. Every store path is derived from here.

use std::path::{Path, PathBuf};

use crate::beliefs::{HypothesisStore, HYPOTHESES_FILE};
use crate::error::Result;
use crate::graph::GraphStore;
use crate::ingest::{self, Card, Manifest};
use crate::planning::{CoverageIndex, PlanStore, COVERAGE_FILE, LEDGER_FILE};
use crate::provider::ModelsConfig;
use crate::storage::FileStore;

#[derive(Debug, Clone)]
pub struct Project {
    root: PathBuf,
    files: FileStore,
}

impl Project {
    pub fn new(root: impl Into<PathBuf>) -> Project {
        Project {
            root: root.into(),
            files: FileStore::default(),
        }
    }

    pub fn with_files(root: impl Into<PathBuf>, files: FileStore) -> Project {
        Project {
            root: root.into(),
            files,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> FileStore {
        self.files
    }

    pub fn ingest_dir(&self) -> PathBuf {
        self.root.join("ingest")
    }

    pub fn graphs_dir(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn hypotheses_path(&self) -> PathBuf {
        self.root.join(HYPOTHESES_FILE)
    }

    pub fn coverage_path(&self) -> PathBuf {
        self.root.join(COVERAGE_FILE)
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join(LEDGER_FILE)
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.sessions_dir().join(session_id)
    }

    pub fn inbox_dir(&self) -> PathBuf {
        self.root.join("inbox")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn models_path(&self) -> PathBuf {
        self.root.join("models.json")
    }

    pub fn build_lock_path(&self) -> PathBuf {
        self.graphs_dir().join(".build")
    }

    pub fn graphs(&self) -> GraphStore {
        GraphStore::new(self.graphs_dir(), self.files)
    }

    pub fn hypotheses(&self) -> HypothesisStore {
        HypothesisStore::new(self.hypotheses_path(), self.files)
    }

    pub fn plans(&self, session_id: &str) -> PlanStore {
        PlanStore::new(self.sessions_dir(), session_id, self.files)
    }

    pub fn load_ingest(&self) -> Result<(Manifest, Vec<Card>)> {
        ingest::load_ingest(self.ingest_dir())
    }

    pub fn save_ingest(&self, manifest: &Manifest, cards: &[Card]) -> Result<()> {
        ingest::save_ingest(self.ingest_dir(), manifest, cards)
    }

    pub fn coverage(&self) -> Result<CoverageIndex> {
        self.files.read(self.coverage_path(), CoverageIndex::default())
    }

    pub fn record_visit(&self, graph: &str, node_ids: &[String], card_ids: &[String]) -> Result<CoverageIndex> {
        self.files.update(self.coverage_path(), |idx: &mut CoverageIndex| {
            idx.record_visit(graph, node_ids, card_ids);
            Ok(idx.clone())
        })
    }

    pub fn models(&self) -> Result<ModelsConfig> {
        ModelsConfig::load(self.models_path())
    }

    /// Session ids with a directory under `sessions/`, sorted.
    pub fn session_ids(&self) -> Result<Vec<String>> {
        let dir = self.sessions_dir();
        let mut out = Vec::new();
        match std::fs::read_dir(&dir) {
            Ok(entries) => {
                for e in entries.flatten() {
                    if e.path().is_dir() {
                        out.push(e.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(crate::Error::io(&dir, e)),
        }
        out.sort();
        Ok(out)
    }
}
