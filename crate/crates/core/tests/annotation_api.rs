//! The annotation HTTP API served on a real socket.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hatescope::agreement::{pair_item_id, replay, ItemKind, LabelStore, QueueItem, Service, ServiceConfig};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Api {
    base: String,
    http: Client,
    svc: Arc<Service>,
    _rt: tokio::runtime::Runtime,
}

impl Api {
    fn start(log: &Path, items: Vec<QueueItem>, config: ServiceConfig) -> Api {
        let svc = Service::new(LabelStore::open(log).unwrap(), items, config);
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        rt.spawn(hatescope::agreement::serve(listener, svc.clone()));
        Api { base, http: Client::new(), svc, _rt: rt }
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> StatusCode {
        self.http.post(format!("{}{path}", self.base)).json(&body).send().unwrap().status()
    }

    fn label(&self, item: &str, annotator: &str, label: &str) -> StatusCode {
        self.post("/api/labels", json!({ "item_id": item, "annotator_id": annotator, "label": label }))
    }
}

fn phrase_items(n: usize) -> Vec<QueueItem> {
    (0..n)
        .map(|i| QueueItem {
            item_id: format!("ph{i:02}"),
            kind: ItemKind::Phrase,
            text: format!("phrase number {i}"),
            phrase_id: Some(format!("ph{i:02}")),
            image_id: None,
            image_path: None,
            cosine: None,
            multi_target: false,
        })
        .collect()
}

fn pair_items(image: &Path) -> Vec<QueueItem> {
    (0..10)
        .map(|i| QueueItem {
            item_id: pair_item_id("pha", &format!("img{i}")),
            kind: ItemKind::ImagePair,
            text: "gas the kike".into(),
            phrase_id: Some("pha".into()),
            image_id: Some(format!("img{i}")),
            image_path: Some(image.to_path_buf()),
            cosine: Some(0.05 * i as f64),
            multi_target: false,
        })
        .collect()
}

fn log_path(dir: &tempfile::TempDir) -> PathBuf {
    dir.path().join("labels.ndjson")
}

#[test]
fn nine_of_ten_agreements() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(&log_path(&dir), phrase_items(10), ServiceConfig::default());
    let (status, body) = api.get("/api/agreement");
    assert_eq!(status, StatusCode::OK);
    assert!(body["status"].is_string(), "{body}");

    for i in 0..10 {
        let id = format!("ph{i:02}");
        assert_eq!(api.label(&id, "ann1", "antisemitic"), StatusCode::CREATED);
        let second = if i == 3 { "irrelevant" } else { "antisemitic" };
        assert_eq!(api.label(&id, "ann2", second), StatusCode::CREATED);
        let (_, body) = api.get("/api/agreement?kind=phrase");
        assert_eq!(body["report"]["n_items"], json!(i + 1));
    }
    let (_, body) = api.get("/api/agreement?kind=phrase");
    assert_eq!(body["annotators"], json!(["ann1", "ann2"]));
    assert_eq!(body["report"]["percent_agreement"], json!(0.9));
}

#[test]
fn queue_walks_to_done() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(&log_path(&dir), phrase_items(3), ServiceConfig::default());
    assert_eq!(api.get("/api/queue/next").0, StatusCode::BAD_REQUEST);
    for expected in ["ph00", "ph01", "ph02"] {
        let (status, body) = api.get("/api/queue/next?annotator=ann1");
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["done"], json!(false));
        assert_eq!(body["item"]["item_id"], json!(expected));
        assert_eq!(api.label(expected, "ann1", "islamophobic"), StatusCode::CREATED);
    }
    let (_, body) = api.get("/api/queue/next?annotator=ann1");
    assert_eq!(body, json!({ "done": true, "remaining": 0 }));
    let (_, body) = api.get("/api/queue/next?annotator=ann2");
    assert_eq!(body["remaining"], json!(3));
}

#[test]
fn relabels_and_bad_input_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::start(&log_path(&dir), phrase_items(2), ServiceConfig::default());
    assert_eq!(api.label("ph00", "ann1", "antisemitic"), StatusCode::CREATED);
    assert_eq!(api.label("ph00", "ann1", "irrelevant"), StatusCode::CONFLICT);
    assert_eq!(api.label("nope", "ann1", "irrelevant"), StatusCode::BAD_REQUEST);
    assert_eq!(api.label("ph01", "ann1", "unlabeled"), StatusCode::BAD_REQUEST);
    assert!(api.label("ph01", "ann1", "spam").is_client_error());
    assert_eq!(api.get("/api/item/nope").0, StatusCode::NOT_FOUND);
}

#[test]
fn concurrent_duplicates_get_one_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let api = Arc::new(Api::start(&log_path(&dir), phrase_items(1), ServiceConfig::default()));
    let handles: Vec<_> = ["antisemitic", "irrelevant", "islamophobic", "antisemitic"]
        .into_iter()
        .map(|label| {
            let api = api.clone();
            std::thread::spawn(move || api.label("ph00", "ann1", label))
        })
        .collect();
    let statuses: Vec<StatusCode> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CREATED).count(), 1, "{statuses:?}");
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::CONFLICT).count(), 3, "{statuses:?}");
}

#[test]
fn items_carry_image_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.png");
    std::fs::write(&image, b"\x89PNG fake bytes").unwrap();
    let api = Api::start(&log_path(&dir), pair_items(&image), ServiceConfig::default());
    let (status, body) = api.get("/api/item/pha::img3");
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["text"], json!("gas the kike"));
    assert_eq!(body["image_base64"], json!("iVBORyBmYWtlIGJ5dGVz"));
    let (status, body) = api.get("/api/item/ph00");
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("ph00"));
}

#[test]
fn sweep_refreshes_every_nth_submission() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("img.png");
    std::fs::write(&image, b"x").unwrap();
    let config = ServiceConfig { sweep_every: 4, ..ServiceConfig::default() };
    let api = Api::start(&log_path(&dir), pair_items(&image), config);
    let (_, before) = api.get("/api/sweep");
    assert_eq!(before["labeled_pairs"], json!(0));
    for i in 0..10 {
        let label = if i >= 6 { "antisemitic" } else { "irrelevant" };
        let id = format!("pha::img{i}");
        assert_eq!(api.label(&id, "ann1", label), StatusCode::CREATED);
        assert_eq!(api.label(&id, "ann2", label), StatusCode::CREATED);
    }
    let (_, snap) = api.get("/api/sweep");
    assert_eq!(snap["computed_at_submission"], json!(20));
    assert_eq!(snap["labeled_pairs"], json!(10));
    assert_eq!(snap["selected_threshold"], json!(0.3));
    assert_eq!(snap, serde_json::to_value(api.svc.sweep()).unwrap());
}

#[test]
fn resolutions_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let log = log_path(&dir);
    let api = Api::start(&log, phrase_items(4), ServiceConfig::default());
    for (i, (a, b)) in [("antisemitic", "antisemitic"), ("antisemitic", "irrelevant"), ("islamophobic", "islamophobic"), ("irrelevant", "antisemitic")]
        .into_iter()
        .enumerate()
    {
        let id = format!("ph{i:02}");
        assert_eq!(api.label(&id, "ann1", a), StatusCode::CREATED);
        assert_eq!(api.label(&id, "ann2", b), StatusCode::CREATED);
    }
    assert_eq!(api.post("/api/resolutions", json!({ "item_id": "ph01", "label": "irrelevant" })), StatusCode::CREATED);
    assert_eq!(api.post("/api/resolutions", json!({ "item_id": "ph03", "label": "antisemitic" })), StatusCode::CREATED);
    let finals = api.svc.final_labels(ItemKind::Phrase);
    assert_eq!(finals.len(), 4);
    assert_eq!(finals["ph01"].to_string(), "irrelevant");
    assert_eq!(finals["ph03"].to_string(), "antisemitic");
    let live = api.get("/api/agreement").1;
    drop(api);

    let replayed = replay(std::io::BufReader::new(std::fs::File::open(&log).unwrap())).unwrap();
    assert_eq!(replayed, LabelStore::open(&log).unwrap().state().clone());
    let again = Api::start(&log, phrase_items(4), ServiceConfig::default());
    assert_eq!(again.get("/api/agreement").1, live);
    assert_eq!(again.svc.final_labels(ItemKind::Phrase), finals);
    assert_eq!(again.label("ph00", "ann1", "irrelevant"), StatusCode::CONFLICT);
}
