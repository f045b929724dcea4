//! Repository ingestion into byte-exact cards.
//!
//! Every included file is partitioned into half-open byte ranges
//! `[char_start, char_end)` by greedy line-aligned packing: whole lines are
//! appended to the current card until the next line would push it past
//! `max_card_bytes`. A line longer than the budget becomes a card of its own.
//! Offsets are bytes, never codepoints.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_CARD_BYTES: usize = 2048;

pub fn default_exclude_globs() -> Vec<String> {
    [
        "**/.git/**",
        "**/test/**",
        "**/tests/**",
        "**/mock/**",
        "**/mocks/**",
        "**/vendor/**",
        "**/vendored/**",
        "**/node_modules/**",
        "**/target/**",
        "**/*.t.sol",
        "**/*_test.*",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub max_card_bytes: usize,
    pub include_globs: Vec<String>,
    pub exclude_globs: Vec<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            max_card_bytes: DEFAULT_MAX_CARD_BYTES,
            include_globs: vec!["**/*".to_string()],
            exclude_globs: default_exclude_globs(),
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_card_bytes == 0 {
            return Err(Error::Validation("max_card_bytes must be > 0".into()));
        }
        Ok(())
    }

    fn matchers(&self) -> Result<(GlobSet, GlobSet)> {
        let build = |pats: &[String]| -> Result<GlobSet> {
            let mut b = GlobSetBuilder::new();
            for p in pats {
                b.add(Glob::new(p).map_err(|e| Error::Validation(format!("bad glob {p}: {e}")))?);
            }
            b.build()
                .map_err(|e| Error::Validation(format!("bad glob set: {e}")))
        };
        Ok((build(&self.include_globs)?, build(&self.exclude_globs)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub relpath: String,
    pub byte_len: u64,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub repo_root: PathBuf,
    pub files: Vec<FileEntry>,
    pub config: IngestConfig,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub created_at: DateTime<Utc>,
}

impl Manifest {
    pub fn file(&self, relpath: &str) -> Option<&FileEntry> {
        self.files
            .binary_search_by(|f| f.relpath.as_str().cmp(relpath))
            .ok()
            .map(|i| &self.files[i])
    }

    pub fn abs_path(&self, relpath: &str) -> PathBuf {
        self.repo_root.join(relpath)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Card {
    pub id: String,
    pub relpath: String,
    pub char_start: u64,
    pub char_end: u64,
}

impl Card {
    pub fn new(relpath: &str, cs: u64, ce: u64) -> Card {
        Card {
            id: card_id(relpath, cs, ce),
            relpath: relpath.to_string(),
            char_start: cs,
            char_end: ce,
        }
    }

    pub fn len(&self) -> u64 {
        self.char_end - self.char_start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `relpath:[cs,ce)`
    pub fn span_label(&self) -> String {
        format!("{}:[{},{})", self.relpath, self.char_start, self.char_end)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn card_id(relpath: &str, cs: u64, ce: u64) -> String {
    let digest = sha256_hex(format!("{relpath}:{cs}:{ce}").as_bytes());
    format!("card_{}", &digest[..12])
}

/// Greedy line-aligned partition of `bytes` into `[cs, ce)` ranges.
pub fn partition(bytes: &[u8], max_card_bytes: usize) -> Vec<(u64, u64)> {
    let max = max_card_bytes.max(1);
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut end = 0usize;
    let mut line_start = 0usize;
    while line_start < bytes.len() {
        let line_end = match bytes[line_start..].iter().position(|&b| b == b'\n') {
            Some(i) => line_start + i + 1,
            None => bytes.len(),
        };
        if end > start && line_end - start > max {
            out.push((start as u64, end as u64));
            start = line_start;
        }
        end = line_end;
        line_start = line_end;
    }
    if end > start {
        out.push((start as u64, end as u64));
    }
    out
}

fn relpath_of(root: &Path, path: &Path) -> Option<String> {
    let rel = path.strip_prefix(root).ok()?;
    let mut parts = Vec::new();
    for c in rel.components() {
        match c {
            Component::Normal(s) => parts.push(s.to_str()?.to_string()),
            _ => return None,
        }
    }
    (!parts.is_empty()).then(|| parts.join("/"))
}

/// Partition every included file under `root` into cards.
pub fn ingest_repo(root: impl AsRef<Path>, config: &IngestConfig) -> Result<(Manifest, Vec<Card>)> {
    config.validate()?;
    let root = root.as_ref();
    let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
    let (include, exclude) = config.matchers()?;

    let mut candidates = Vec::new();
    let mut warnings = Vec::new();
    for entry in WalkDir::new(&root).follow_links(false) {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warnings.push(format!("walk error: {e}"));
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(rel) = relpath_of(&root, entry.path()) else {
            warnings.push(format!("skipped non-UTF-8 path {}", entry.path().display()));
            continue;
        };
        if include.is_match(&rel) && !exclude.is_match(&rel) {
            candidates.push(rel);
        }
    }
    candidates.sort();

    let mut files = Vec::new();
    let mut cards = Vec::new();
    for rel in candidates {
        let bytes = match fs::read(root.join(&rel)) {
            Ok(b) => b,
            Err(e) => {
                tracing::warn!(relpath = %rel, error = %e, "skipping unreadable file");
                warnings.push(format!("unreadable {rel}: {e}"));
                continue;
            }
        };
        for (cs, ce) in partition(&bytes, config.max_card_bytes) {
            cards.push(Card::new(&rel, cs, ce));
        }
        files.push(FileEntry {
            byte_len: bytes.len() as u64,
            content_hash: sha256_hex(&bytes),
            relpath: rel,
        });
    }
    if files.is_empty() {
        return Err(Error::EmptyRepo(root));
    }
    let manifest = Manifest {
        repo_root: root,
        files,
        config: config.clone(),
        warnings,
        created_at: Utc::now(),
    };
    Ok((manifest, cards))
}

fn read_checked<'m>(manifest: &'m Manifest, relpath: &str) -> Result<(Vec<u8>, &'m FileEntry)> {
    let entry = manifest
        .file(relpath)
        .ok_or_else(|| Error::UnknownFile(relpath.to_string()))?;
    let path = manifest.abs_path(relpath);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok((bytes, entry))
}

/// Exact bytes `[cs, ce)` of the card's file, refusing to serve a file that
/// changed since ingest.
pub fn card_content(card: &Card, manifest: &Manifest) -> Result<Vec<u8>> {
    let (bytes, entry) = read_checked(manifest, &card.relpath)?;
    if sha256_hex(&bytes) != entry.content_hash {
        return Err(Error::StaleCard {
            card_id: card.id.clone(),
            relpath: card.relpath.clone(),
        });
    }
    slice(&bytes, &card.relpath, card.char_start, card.char_end, entry.byte_len)
}

/// Bytes `[cs, ce)` of `relpath` irrespective of card boundaries.
pub fn reconstruct_span(manifest: &Manifest, relpath: &str, cs: u64, ce: u64) -> Result<Vec<u8>> {
    let (bytes, entry) = read_checked(manifest, relpath)?;
    if sha256_hex(&bytes) != entry.content_hash {
        return Err(Error::StaleCard {
            card_id: card_id(relpath, cs, ce),
            relpath: relpath.to_string(),
        });
    }
    slice(&bytes, relpath, cs, ce, entry.byte_len)
}

fn slice(bytes: &[u8], relpath: &str, cs: u64, ce: u64, byte_len: u64) -> Result<Vec<u8>> {
    if cs >= ce || ce > byte_len {
        return Err(Error::OutOfRange {
            relpath: relpath.to_string(),
            cs,
            ce,
            byte_len,
        });
    }
    Ok(bytes[cs as usize..ce as usize].to_vec())
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CARDS_FILE: &str = "cards.jsonl";

/// Write `manifest.json` and `cards.jsonl` (one card per line) into `dir`.
pub fn save_ingest(dir: impl AsRef<Path>, manifest: &Manifest, cards: &[Card]) -> Result<()> {
    let dir = dir.as_ref();
    let store = crate::storage::FileStore::default();
    store.write(dir.join(MANIFEST_FILE), manifest)?;
    let path = dir.join(CARDS_FILE);
    write_jsonl(&path, cards)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::CorruptStore {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn load_ingest(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<Card>)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Option<Manifest> = crate::storage::read_store(&mpath, None)?;
    let manifest = manifest.ok_or_else(|| Error::io(&mpath, std::io::ErrorKind::NotFound.into()))?;
    let cards = read_jsonl(&dir.join(CARDS_FILE))?;
    Ok((manifest, cards))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo(files: &[(&str, &[u8])]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (rel, bytes) in files {
            let p = dir.path().join(rel);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, bytes).unwrap();
        }
        dir
    }

    fn cfg(max: usize) -> IngestConfig {
        IngestConfig {
            max_card_bytes: max,
            ..IngestConfig::default()
        }
    }

    #[test]
    fn six_bytes_budget_four() {
        let dir = repo(&[("a.txt", b"abcdef")]);
        let (_, cards) = ingest_repo(dir.path(), &cfg(4)).unwrap();
        // one 6-byte line exceeds the budget and stays whole
        assert_eq!(
            cards.iter().map(|c| (c.char_start, c.char_end)).collect::<Vec<_>>(),
            vec![(0, 6)]
        );
        let dir = repo(&[("a.txt", b"abc\nde")]);
        let (_, cards) = ingest_repo(dir.path(), &cfg(4)).unwrap();
        assert_eq!(
            cards.iter().map(|c| (c.char_start, c.char_end)).collect::<Vec<_>>(),
            vec![(0, 4), (4, 6)]
        );
    }

    #[test]
    fn small_file_is_one_card() {
        let dir = repo(&[("a.txt", b"xyz")]);
        let (m, cards) = ingest_repo(dir.path(), &IngestConfig::default()).unwrap();
        assert_eq!(cards.len(), 1);
        assert_eq!((cards[0].char_start, cards[0].char_end), (0, 3));
        assert_eq!(card_content(&cards[0], &m).unwrap(), b"xyz");
    }

    #[test]
    fn long_line_gets_its_own_card() {
        let mut bytes = b"ab\n".to_vec();
        bytes.extend(std::iter::repeat_n(b'x', 20));
        bytes.extend(b"\ncd\n");
        let parts = partition(&bytes, 8);
        assert_eq!(parts, vec![(0, 3), (3, 24), (24, 27)]);
    }

    #[test]
    fn empty_repo_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_repo(dir.path(), &IngestConfig::default()),
            Err(Error::EmptyRepo(_))
        ));
        let dir = repo(&[("tests/a.rs", b"fn t() {}")]);
        assert!(matches!(
            ingest_repo(dir.path(), &IngestConfig::default()),
            Err(Error::EmptyRepo(_))
        ));
    }

    #[test]
    fn zero_budget_is_rejected() {
        let dir = repo(&[("a.txt", b"x")]);
        assert!(matches!(ingest_repo(dir.path(), &cfg(0)), Err(Error::Validation(_))));
    }

    #[test]
    fn default_excludes_tests_mocks_vendor() {
        let dir = repo(&[
            ("src/a.sol", b"contract A {}\n"),
            ("test/A.t.sol", b"x"),
            ("src/mocks/M.sol", b"x"),
            ("lib/vendor/x.sol", b"x"),
            ("node_modules/p/i.js", b"x"),
        ]);
        let (m, _) = ingest_repo(dir.path(), &IngestConfig::default()).unwrap();
        let rels: Vec<_> = m.files.iter().map(|f| f.relpath.as_str()).collect();
        assert_eq!(rels, vec!["src/a.sol"]);
    }

    #[test]
    fn stale_card_detected() {
        let dir = repo(&[("a.txt", b"hello\nworld\n")]);
        let (m, cards) = ingest_repo(dir.path(), &IngestConfig::default()).unwrap();
        fs::write(dir.path().join("a.txt"), b"HELLO\nworld\n").unwrap();
        assert!(matches!(card_content(&cards[0], &m), Err(Error::StaleCard { .. })));
    }

    #[test]
    fn span_errors() {
        let dir = repo(&[("a.txt", b"hello")]);
        let (m, _) = ingest_repo(dir.path(), &IngestConfig::default()).unwrap();
        assert!(matches!(reconstruct_span(&m, "a.txt", 0, 6), Err(Error::OutOfRange { .. })));
        assert!(matches!(reconstruct_span(&m, "a.txt", 3, 3), Err(Error::OutOfRange { .. })));
        assert!(matches!(reconstruct_span(&m, "b.txt", 0, 1), Err(Error::UnknownFile(_))));
        assert_eq!(reconstruct_span(&m, "a.txt", 1, 4).unwrap(), b"ell");
    }

    #[test]
    fn card_ids_are_deterministic() {
        assert_eq!(card_id("a/b.rs", 0, 10), card_id("a/b.rs", 0, 10));
        assert_ne!(card_id("a/b.rs", 0, 10), card_id("a/b.rs", 0, 11));
        let id = card_id("x", 1, 2);
        assert!(id.starts_with("card_") && id.len() == 17);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = repo(&[("a.txt", b"one\ntwo\n"), ("b/c.txt", b"three")]);
        let (m, cards) = ingest_repo(dir.path(), &cfg(4)).unwrap();
        let out = tempfile::tempdir().unwrap();
        save_ingest(out.path(), &m, &cards).unwrap();
        let (m2, cards2) = load_ingest(out.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(cards, cards2);
    }
}
