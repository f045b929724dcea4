use graphaudit_core::beliefs::{
    hypothesis_id, HypothesisCandidate, HypothesisDoc, HypothesisStore, Provenance, Severity, Stance, Status, Verdict,
};
use graphaudit_core::storage::FileStore;
use graphaudit_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cand(title: &str) -> HypothesisCandidate {
    HypothesisCandidate {
        title: title.into(),
        vuln_type: "access_control".into(),
        severity: Severity::High,
        confidence: 0.5,
        node_ids: vec![],
        reasoning: "r".into(),
    }
}

fn doc_with_one() -> (HypothesisDoc, String) {
    let mut doc = HypothesisDoc::default();
    let (id, created) = doc.propose(&cand("Unchecked owner"), Provenance::default(), "t", "s").unwrap();
    assert!(created);
    (doc, id)
}

#[test]
fn threshold_rejects_at_or_below_point_one() {
    for q in [0.0, 0.05, 0.10] {
        let (mut doc, id) = doc_with_one();
        let h = doc.adjust_confidence(&id, q).unwrap();
        assert_eq!(h.status, Status::Rejected, "q={q}");
        assert_eq!(h.confidence, q);
        // lifecycle rejection stays mutable
        assert!(doc.adjust_confidence(&id, 0.5).is_ok());
    }
    for q in [0.11, 0.5, 1.0] {
        let (mut doc, id) = doc_with_one();
        let h = doc.adjust_confidence(&id, q).unwrap();
        assert_eq!(h.status, Status::Proposed, "q={q}");
    }
    let (mut doc, id) = doc_with_one();
    for bad in [-0.01, 1.01, f64::NAN] {
        assert!(matches!(doc.adjust_confidence(&id, bad), Err(Error::Range { .. })));
    }
}

#[test]
fn verdicts_are_exact_and_final() {
    let (mut doc, id) = doc_with_one();
    let h = doc.finalize_verdict(&id, Verdict::Confirmed, "ok").unwrap();
    assert_eq!((h.status, h.confidence), (Status::Confirmed, 1.0));
    assert!(matches!(doc.adjust_confidence(&id, 0.3), Err(Error::Finalized(_))));
    assert!(matches!(doc.finalize_verdict(&id, Verdict::Rejected, "x"), Err(Error::Finalized(_))));
    assert!(matches!(doc.add_evidence(&id, "card_x", "n", Stance::Supports), Err(Error::Finalized(_))));

    let (mut doc, id) = doc_with_one();
    let h = doc.finalize_verdict(&id, Verdict::Rejected, "no").unwrap();
    assert_eq!((h.status, h.confidence), (Status::Rejected, 0.0));

    let (mut doc, id) = doc_with_one();
    let h = doc.finalize_verdict(&id, Verdict::Uncertain, "unclear").unwrap();
    assert_eq!((h.status, h.confidence), (Status::Proposed, 0.5));
    assert_eq!(h.notes.len(), 1);
    assert!(doc.finalize_verdict(&id, Verdict::Confirmed, "later").is_ok());
}

fn variant(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let ws = [" ", "  ", "\t", " \n "];
    let mut out = String::new();
    if rng.gen_bool(0.3) {
        out.push_str(ws[rng.gen_range(0..ws.len())]);
    }
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            out.push_str(ws[rng.gen_range(0..ws.len())]);
        }
        let cased: String = w
            .chars()
            .map(|c| if rng.gen_bool(0.5) { c.to_ascii_uppercase() } else { c })
            .collect();
        out.push_str(&cased);
    }
    if rng.gen_bool(0.3) {
        out.push(' ');
    }
    out
}

#[test]
fn dedup_over_title_variants() {
    let words = ["missing", "access", "control", "on", "setowner"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut doc = HypothesisDoc::default();
    let (first, created) = doc.propose(&cand("Missing access control on setOwner"), Provenance::default(), "t", "s").unwrap();
    assert!(created);
    for _ in 0..200 {
        let title = variant(&mut rng, &words);
        assert_eq!(hypothesis_id(&title), first);
        let (id, created) = doc.propose(&cand(&title), Provenance::default(), "t", "s2").unwrap();
        assert_eq!(id, first);
        assert!(!created);
    }
    assert_eq!(doc.hypotheses.len(), 1);
    assert_eq!(doc.hypotheses[&first].session_id, "s");
}

#[test]
fn evidence_moves_status() {
    let (mut doc, id) = doc_with_one();
    assert_eq!(doc.add_evidence(&id, "c1", "a", Stance::Supports).unwrap().status, Status::Investigating);
    assert_eq!(doc.add_evidence(&id, "c2", "b", Stance::Supports).unwrap().status, Status::Supported);
    assert_eq!(doc.add_evidence(&id, "c3", "c", Stance::Refutes).unwrap().status, Status::Supported);
    assert_eq!(doc.add_evidence(&id, "c4", "d", Stance::Refutes).unwrap().status, Status::Supported);
    assert_eq!(doc.add_evidence(&id, "c5", "e", Stance::Refutes).unwrap().status, Status::Refuted);
    let (mut doc2, id2) = doc_with_one();
    assert_eq!(doc2.add_evidence(&id2, "c1", "", Stance::Neutral).unwrap().status, Status::Investigating);
    doc2.add_evidence(&id2, "c1", "", Stance::Supports).unwrap();
    doc2.add_evidence(&id2, "c2", "", Stance::Refutes).unwrap();
    assert_eq!(doc2.add_evidence(&id2, "c3", "", Stance::Refutes).unwrap().status, Status::Refuted);
    assert!(matches!(doc.add_evidence("hyp_nope", "c", "", Stance::Neutral), Err(Error::UnknownHypothesis(_))));
}

#[test]
fn summary_groups_by_type() {
    let mut doc = HypothesisDoc::default();
    let mut a = cand("B issue");
    a.vuln_type = "reentrancy".into();
    doc.propose(&a, Provenance::default(), "t", "s").unwrap();
    doc.propose(&cand("A issue"), Provenance::default(), "t", "s").unwrap();
    let s = doc.summarize_for_context();
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines[0], "[access_control]");
    assert!(lines[1].starts_with("- A issue (hyp_"));
    assert!(lines[1].ends_with("status=proposed q=0.50"));
    assert_eq!(lines[2], "[reentrancy]");
    assert_eq!(HypothesisDoc::default().summarize_for_context(), "(no hypotheses)");
}

#[test]
fn threads_share_one_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = HypothesisStore::new(dir.path().join("hypotheses.json"), FileStore::default());
    std::thread::scope(|s| {
        for t in 0..4 {
            let store = &store;
            s.spawn(move || {
                for i in 0..25 {
                    store
                        .propose(&cand(&format!("issue {t} {i}")), Provenance::default(), "t", &format!("s{t}"))
                        .unwrap();
                }
            });
        }
    });
    assert_eq!(store.load().unwrap().hypotheses.len(), 100);
}
