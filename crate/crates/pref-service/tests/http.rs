//! Black-box tests over HTTP against a server on an ephemeral port.

use std::path::PathBuf;
use std::sync::Arc;

use batkit::model::{ModelConfig, Params, Stage};
use batkit::rlhf::{load_preferences, train_reward_model, PreferenceRecord, Source};
use batkit::train::TrainConfig;
use chrono::{Duration, TimeZone, Utc};
use pref_service::{ManualClock, Stats};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Server {
    base: String,
    clock: Arc<ManualClock>,
    http: reqwest::Client,
    log: PathBuf,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<()>>,
    _dir: Option<tempfile::TempDir>,
}

impl Server {
    async fn start() -> Server {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("events.jsonl");
        let mut s = Server::on(log).await;
        s._dir = Some(dir);
        s
    }

    async fn on(log: PathBuf) -> Server {
        let clock = Arc::new(ManualClock::new(
            Utc.with_ymd_and_hms(2024, 6, 1, 9, 0, 0).unwrap(),
        ));
        let state = pref_service::state(&log, clock.clone()).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(async move {
            pref_service::serve(listener, state, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Server {
            base,
            clock,
            http: reqwest::Client::new(),
            log,
            stop: Some(tx),
            handle: Some(handle),
            _dir: None,
        }
    }

    async fn shutdown(mut self) -> Option<tempfile::TempDir> {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.take().unwrap().await.unwrap();
        self._dir.take()
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn post(&self, path: &str, body: Value) -> reqwest::Response {
        self.http.post(self.url(path)).json(&body).send().await.unwrap()
    }

    async fn get(&self, path: &str) -> reqwest::Response {
        self.http.get(self.url(path)).send().await.unwrap()
    }

    async fn create(&self, prompt: &str, a: &str, b: &str) -> u64 {
        let r = self
            .post(
                "/tasks",
                json!({"prompt": prompt, "response_a": a, "response_b": b}),
            )
            .await;
        assert_eq!(r.status(), StatusCode::OK);
        r.json::<Value>().await.unwrap()["task_id"].as_u64().unwrap()
    }

    async fn next(&self, annotator: &str) -> Option<Value> {
        let r = self.get(&format!("/tasks/next?annotator={annotator}")).await;
        match r.status() {
            StatusCode::NO_CONTENT => None,
            StatusCode::OK => Some(r.json().await.unwrap()),
            s => panic!("unexpected status {s}"),
        }
    }

    async fn judge(&self, id: u64, helpfulness: &str, annotator: &str) -> reqwest::Response {
        self.post(
            &format!("/tasks/{id}/judgment"),
            json!({"helpfulness": helpfulness, "annotator_id": annotator}),
        )
        .await
    }

    async fn export(&self, query: &str) -> Vec<PreferenceRecord> {
        let r = self.get(&format!("/export{query}")).await;
        assert_eq!(r.status(), StatusCode::OK);
        r.text()
            .await
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    async fn stats(&self) -> Stats {
        self.get("/stats").await.json().await.unwrap()
    }
}

#[tokio::test]
async fn create_next_judge_export() {
    let s = Server::start().await;
    assert_eq!(s.create("What is 2+2?", "4", "five").await, 1);
    assert_eq!(s.create("Say hi", "hi", "hello there").await, 2);
    assert_eq!(s.create("Name a color", "red", "blue").await, 3);

    let mut labels = Vec::new();
    for (choice, accept) in [
        ("a_better", json!({"accept_a": true, "accept_b": false})),
        ("both_good", json!({})),
        ("both_bad", json!({"accept_a": false})),
    ] {
        let task = s.next("ann-1").await.unwrap();
        assert_eq!(task["status"], "open");
        let id = task["task_id"].as_u64().unwrap();
        let mut body = json!({"helpfulness": choice, "annotator_id": "ann-1"});
        body.as_object_mut()
            .unwrap()
            .extend(accept.as_object().unwrap().clone());
        let r = s.post(&format!("/tasks/{id}/judgment"), body).await;
        assert_eq!(r.status(), StatusCode::OK);
        let rec: PreferenceRecord = r.json().await.unwrap();
        assert_eq!(rec.source, Source::Human);
        labels.push((rec.d, rec.quality_flag, rec.accept_a, rec.accept_b));
    }
    assert_eq!(
        labels,
        vec![
            (-1, None, Some(true), Some(false)),
            (0, None, None, None),
            (0, Some("low".to_string()), Some(false), None),
        ]
    );
    assert!(s.next("ann-1").await.is_none());

    let all = s.export("").await;
    assert_eq!(all.len(), 3);
    assert_eq!(all[0].prompt, "What is 2+2?");
    assert_eq!(all[0].response_a, "4");
    assert_eq!(all[0].annotator_id.as_deref(), Some("ann-1"));

    let task: Value = s.get("/tasks/1").await.json().await.unwrap();
    assert_eq!(task["status"], "done");
    assert_eq!(task["judgment"]["helpfulness"], "a_better");

    let st = s.stats().await;
    assert_eq!((st.open, st.done), (0, 3));
    assert_eq!(st.by_annotator["ann-1"], 3);
    s.shutdown().await;
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let s = Server::start().await;
    let r = s
        .post(
            "/tasks",
            json!({"prompt": "", "response_a": "x", "response_b": "y"}),
        )
        .await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = s.post("/tasks", json!({"prompt": "p"})).await;
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(s.get("/tasks/next").await.status(), StatusCode::BAD_REQUEST);
    assert!(s.next("anyone").await.is_none());

    let id = s.create("p", "a", "b").await;
    assert_eq!(s.judge(id, "a_better", "x").await.status(), StatusCode::OK);
    let again = s.judge(id, "b_better", "y").await;
    assert_eq!(again.status(), StatusCode::CONFLICT);
    assert!(again.json::<Value>().await.unwrap()["error"].is_string());
    assert_eq!(
        s.judge(99, "a_better", "x").await.status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(s.get("/tasks/99").await.status(), StatusCode::NOT_FOUND);
    let id2 = s.create("p", "a", "b").await;
    assert_eq!(
        s.judge(id2, "a_is_great", "x").await.status(),
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        s.get("/export?since=yesterday").await.status(),
        StatusCode::BAD_REQUEST
    );
    // The judged record was not altered by the rejected second submission.
    assert_eq!(s.export("").await[0].d, -1);
    s.shutdown().await;
}

#[tokio::test]
async fn leases_hand_out_each_task_once() {
    let s = Arc::new(Server::start().await);
    s.create("p", "a", "b").await;
    let calls = (0..8).map(|i| {
        let s = s.clone();
        tokio::spawn(async move { s.next(&format!("ann-{i}")).await })
    });
    let mut got = Vec::new();
    for c in calls {
        got.extend(c.await.unwrap());
    }
    assert_eq!(got.len(), 1);

    s.clock.advance(Duration::minutes(9));
    assert!(s.next("late").await.is_none());
    s.clock.advance(Duration::minutes(1));
    assert_eq!(s.next("late").await.unwrap()["task_id"], 1);
    assert_eq!(s.stats().await.leased, 1);
    let s = Arc::into_inner(s).unwrap();
    s.shutdown().await;
}

#[tokio::test]
async fn retried_submission_with_a_token_is_idempotent() {
    let s = Server::start().await;
    let id = s.create("p", "a", "b").await;
    let body = json!({"helpfulness": "b_better", "annotator_id": "x", "client_token": "k1"});
    let first = s.post(&format!("/tasks/{id}/judgment"), body.clone()).await;
    assert_eq!(first.status(), StatusCode::OK);
    let first: PreferenceRecord = first.json().await.unwrap();
    let second = s.post(&format!("/tasks/{id}/judgment"), body).await;
    assert_eq!(second.status(), StatusCode::OK);
    assert_eq!(second.json::<PreferenceRecord>().await.unwrap(), first);
    assert_eq!(first.d, 1);
    assert_eq!(s.export("").await.len(), 1);
    s.shutdown().await;
}

fn ai_record(i: usize) -> Value {
    json!({
        "id": format!("ai-{i}"),
        "prompt": "p",
        "response_a": "short",
        "response_b": "much longer",
        "d": 1,
        "accept_a": null,
        "accept_b": null,
        "source": "ai",
        "annotator_id": "length",
        "created_at": "2024-06-01T10:00:00Z"
    })
}

#[tokio::test]
async fn export_filters_partition_the_records() {
    let s = Server::start().await;
    assert!(s.export("").await.is_empty());
    for (i, who) in ["x", "y", "x"].iter().enumerate() {
        let id = s.create(&format!("prompt {i}"), "a", "b").await;
        assert_eq!(s.judge(id, "a_better", who).await.status(), StatusCode::OK);
        s.clock.advance(Duration::hours(1));
    }
    for i in 0..2 {
        assert_eq!(
            s.post("/preferences", ai_record(i)).await.status(),
            StatusCode::OK
        );
    }
    assert_eq!(
        s.post("/preferences", ai_record(0)).await.status(),
        StatusCode::BAD_REQUEST
    );
    let mut bad = ai_record(5);
    bad["d"] = json!(2);
    assert_eq!(
        s.post("/preferences", bad).await.status(),
        StatusCode::BAD_REQUEST
    );

    assert_eq!(s.export("?source=human").await.len(), 3);
    assert_eq!(s.export("?source=ai").await.len(), 2);
    assert_eq!(s.export("?annotator=x").await.len(), 2);
    assert_eq!(s.export("?annotator=y").await.len(), 1);
    assert_eq!(s.export("?annotator=length").await.len(), 2);
    let before = s.export("?until=2024-06-01T10:00:00Z").await;
    let after = s.export("?since=2024-06-01T10:00:00Z").await;
    assert_eq!(before.len() + after.len(), 5);
    assert_eq!(before.len(), 1);
    let ids: Vec<String> = s.export("").await.into_iter().map(|r| r.id).collect();
    assert_eq!(ids, ["task-1", "task-2", "task-3", "ai-0", "ai-1"]);
    let st = s.stats().await;
    assert_eq!((st.done, st.records), (3, 5));
    s.shutdown().await;
}

#[tokio::test]
async fn restart_keeps_every_acknowledged_judgment() {
    let s = Server::start().await;
    for i in 0..4 {
        let id = s.create(&format!("p{i}"), "a", "b").await;
        if i % 2 == 0 {
            assert_eq!(s.judge(id, "b_better", "x").await.status(), StatusCode::OK);
        }
    }
    let before = s.export("").await;
    let log = s.log.clone();
    let dir = s.shutdown().await;

    let s = Server::on(log).await;
    assert_eq!(s.export("").await, before);
    let st = s.stats().await;
    assert_eq!((st.open, st.done), (2, 2));
    assert_eq!(s.create("new", "a", "b").await, 5);
    assert_eq!(s.next("z").await.unwrap()["task_id"], 2);
    s.shutdown().await;
    drop(dir);
}

#[tokio::test]
async fn export_trains_a_reward_model() {
    let s = Server::start().await;
    for i in 0..6 {
        let id = s.create(&format!("q{i}"), "yes", "no no no").await;
        let h = ["a_better", "b_better", "both_good"][i % 3];
        assert_eq!(s.judge(id, h, "x").await.status(), StatusCode::OK);
    }
    let body = s.get("/export").await.text().await.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prefs.jsonl");
    std::fs::write(&path, &body).unwrap();
    let loaded = load_preferences(&path).unwrap();
    assert_eq!(loaded, s.export("").await);
    // Field-for-field: re-serializing reproduces the exported bytes.
    let again: String = loaded
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    assert_eq!(again, body);

    let init = Params::init(ModelConfig::new(8, 2, 16, 1, 24), 0).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        batch_size: 2,
        ..Default::default()
    };
    let (rm, report) = train_reward_model(&init, &loaded, &cfg).unwrap();
    assert_eq!(rm.stage, Stage::Reward);
    assert_eq!(report.ties, 2);
    assert_eq!(report.losses.len(), 3);
    s.shutdown().await;
}
