use graphaudit_client::{Client, ClientError};
use graphaudit_core::inbox::Inbox;
use graphaudit_core::project::Project;
use graphaudit_core::session::{SessionState, SessionStatus};

async fn start(project: Project) -> Client {
    let listener = tokio::net::TcpListener::bind(graphaudit_server::localhost(0)).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(graphaudit_server::serve(project, listener));
    Client::new(format!("http://{addr}"))
}

#[tokio::test]
async fn round_trips_against_a_live_service() {
    let tmp = tempfile::tempdir().unwrap();
    let project = Project::new(tmp.path());
    let client = start(project.clone()).await;

    assert!(client.hypotheses().await.unwrap().hypotheses.is_empty());
    assert!(client.graphs().await.unwrap().graphs.is_empty());
    match client.graph("Missing").await {
        Err(ClientError::Status { status: 404, .. }) => {}
        other => panic!("{other:?}"),
    }

    project.record_visit("G", &["n".into()], &[]).unwrap();
    assert_eq!(client.coverage().await.unwrap().node_count("G", "n"), 1);
    assert_eq!(
        client.get_raw("/coverage").await.unwrap(),
        std::fs::read(project.coverage_path()).unwrap()
    );

    SessionStatus::store(&project, "run one")
        .update(|s| s.state = SessionState::Planning)
        .unwrap();
    let status = client.session_status(Some("run one")).await;
    // spaces are not valid in session ids
    assert!(matches!(status, Err(ClientError::Status { status: 400, .. })));
    SessionStatus::store(&project, "r1").update(|s| s.step = 4).unwrap();
    let status = client.session_status(Some("r1")).await.unwrap();
    assert_eq!((status.session_id.as_str(), status.step), ("r1", 4));
    assert!(matches!(client.plans(Some("r1")).await, Err(ClientError::Status { status: 404, .. })));

    let created = client.add_note("pause and look at fees").await.unwrap();
    assert!(!created.note.consumed);
    let inbox = Inbox::new(project.inbox_dir(), project.files());
    assert_eq!(inbox.pending().unwrap()[0].0, created.id);
    assert!(matches!(client.add_note("  ").await, Err(ClientError::EmptyNote)));
    assert_eq!(inbox.list().unwrap().len(), 1);
}

#[tokio::test]
async fn unreachable_service_is_an_http_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = Client::new(format!("http://{addr}"));
    assert!(matches!(client.coverage().await, Err(ClientError::Http { .. })));
}

#[tokio::test]
async fn posted_note_preempts_next_investigation() {
    use graphaudit_core::agent::{Agent, Budgets, Outcome};
    use graphaudit_core::planning::{ExitCriteria, Impact, Investigation};
    use graphaudit_core::provider::{MockProvider, ModelProfile, Role};

    let tmp = tempfile::tempdir().unwrap();
    let project = Project::new(tmp.path());
    let client = start(project.clone()).await;
    client.add_note("stop and check the oracle").await.unwrap();

    let inv = Investigation {
        goal: "review fees".into(),
        category: "math".into(),
        focus_areas: vec![],
        priority: 3,
        expected_impact: Impact::Low,
        reasoning: String::new(),
        why_now: String::new(),
        exit_criteria: ExitCriteria::default(),
    };
    let report = tokio::task::spawn_blocking(move || {
        let mock = MockProvider::default();
        let agent = Agent::new(&project, &mock, ModelProfile::mock(Role::Scout), "s1");
        agent.run_investigation(&inv, Budgets::default(), &[]).unwrap()
    })
    .await
    .unwrap();
    assert_eq!(report.outcome, Outcome::Preempted);
    assert_eq!(report.consumed_notes, vec!["stop and check the oracle".to_string()]);
    let status = client.session_status(Some("s1")).await.unwrap();
    assert_eq!(status.last_outcome, Some(Outcome::Preempted));
}
