use std::io::{Read, Write};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use memrl_cli::service::{router, serve};
use memrl_core::store::replay;
use memrl_core::{mc_update, EmbeddingConfig, EngineConfig, MemoryEngine};
use serde_json::{json, Value};
use tower::ServiceExt;

const DIM: usize = 16;

fn engine_at(journal: Option<std::path::PathBuf>) -> Arc<MemoryEngine> {
    Arc::new(
        MemoryEngine::open(EngineConfig {
            embedding: EmbeddingConfig::Deterministic { dim: DIM, seed: 1 },
            journal_path: journal,
            ..EngineConfig::default()
        })
        .unwrap(),
    )
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_owned())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(&body.to_string())).await
}

#[tokio::test]
async fn empty_bank_retrieves_nothing() {
    let app = router(engine_at(None));
    let (status, v) = post(&app, "/retrieve", json!({"intent_text": "feed the cat"})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"selected": []}));
    let (status, v) = call(&app, "GET", "/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["bank_size"], 0);
    assert_eq!(v["update_counts"]["total"], 0);
}

#[tokio::test]
async fn insert_retrieve_feedback_round_trip() {
    let engine = engine_at(None);
    let app = router(engine.clone());
    let (status, v) = post(
        &app,
        "/memories",
        json!({"intent_text": "feed the cat", "experience": "open the tin first", "outcome_label": "success", "q_init": 0.2}),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_u64().unwrap();

    let (status, v) = post(&app, "/retrieve", json!({"intent_text": "feed the cat", "overrides": {"lambda": 0.3}})).await;
    assert_eq!(status, StatusCode::OK);
    let sel = &v["selected"][0];
    assert_eq!(sel["id"], id);
    assert_eq!(sel["experience"], "open the tin first");
    assert!((sel["similarity"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    for key in ["sim_z", "q_z", "score"] {
        assert!(sel[key].is_number(), "{key}");
    }

    let (status, v) = post(&app, "/feedback", json!({"ids": [id], "reward": 1.0})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["updates"][0], json!({"id": id, "old_q": 0.2, "new_q": mc_update(0.2, 1.0, 0.1).unwrap()}));

    let (status, v) = call(&app, "GET", &format!("/memories/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["utility"].as_f64().unwrap(), mc_update(0.2, 1.0, 0.1).unwrap());
    assert_eq!(v["update_count"], 1);

    // a precomputed embedding is accepted in place of text
    let emb = engine.get(id).unwrap().intent_embedding.values().to_vec();
    let (status, v) = post(&app, "/retrieve", json!({"embedding": emb})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["selected"][0]["id"], id);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = router(engine_at(None));
    post(&app, "/memories", json!({"intent_text": "a", "experience": "b"})).await;

    let cases = [
        ("POST", "/retrieve", Some("{not json"), StatusCode::BAD_REQUEST),
        ("POST", "/retrieve", Some(r#"{"intent_txt": "a"}"#), StatusCode::BAD_REQUEST),
        ("POST", "/retrieve", Some(r#"{}"#), StatusCode::BAD_REQUEST),
        ("POST", "/retrieve", Some(r#"{"intent_text": "a", "embedding": [1.0]}"#), StatusCode::BAD_REQUEST),
        ("POST", "/retrieve", Some(r#"{"intent_text": "a", "overrides": {"lambda": 3}}"#), StatusCode::BAD_REQUEST),
        ("POST", "/retrieve", Some(r#"{"embedding": [1.0, 0.0]}"#), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/memories", Some(r#"{"embedding": [1.0, 0.0], "experience": "x"}"#), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/feedback", Some(r#"{"ids": [1], "reward": 1.5}"#), StatusCode::BAD_REQUEST),
        ("POST", "/feedback", Some(r#"{"ids": [1, 9], "reward": 1.0}"#), StatusCode::NOT_FOUND),
        ("GET", "/memories/9", None, StatusCode::NOT_FOUND),
        ("GET", "/memories/abc", None, StatusCode::BAD_REQUEST),
    ];
    for (method, uri, body, expected) in cases {
        let (status, v) = call(&app, method, uri, body).await;
        assert_eq!(status, expected, "{method} {uri} {body:?}: {v}");
        assert!(v["error"].is_string());
    }
    // none of the rejected feedback touched memory 1
    let (_, v) = call(&app, "GET", "/memories/1", None).await;
    assert_eq!(v["update_count"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_never_see_torn_utilities() {
    let app = router(engine_at(None));
    post(&app, "/memories", json!({"intent_text": "stack the chairs", "experience": "x"})).await;
    let rounds = 200;
    let mut allowed = vec![0.0f64];
    for _ in 0..rounds {
        allowed.push(mc_update(*allowed.last().unwrap(), 1.0, 0.1).unwrap());
    }

    let writer = {
        let app = app.clone();
        tokio::spawn(async move {
            for _ in 0..rounds {
                let (status, _) = post(&app, "/feedback", json!({"ids": [1], "reward": 1.0})).await;
                assert_eq!(status, StatusCode::OK);
            }
        })
    };
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move {
                let mut seen = Vec::new();
                for _ in 0..rounds {
                    let (status, v) = call(&app, "GET", "/memories/1", None).await;
                    assert_eq!(status, StatusCode::OK);
                    seen.push((v["utility"].as_f64().unwrap(), v["update_count"].as_u64().unwrap()));
                    let (status, v) = post(&app, "/retrieve", json!({"intent_text": "stack the chairs"})).await;
                    assert_eq!(status, StatusCode::OK);
                    assert_eq!(v["selected"][0]["id"], 1);
                }
                seen
            })
        })
        .collect();
    writer.await.unwrap();
    for r in readers {
        let seen = r.await.unwrap();
        for (q, n) in &seen {
            // utility and update count come from the same committed state
            assert_eq!(q.to_bits(), allowed[*n as usize].to_bits(), "q {q} after {n} updates");
        }
        assert!(seen.windows(2).all(|w| w[0].1 <= w[1].1));
    }
    let (_, v) = call(&app, "GET", "/memories/1", None).await;
    assert_eq!(v["update_count"], rounds);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_flushes_and_journal_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("bank.jsonl");
    let engine = engine_at(Some(journal.clone()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(engine.clone(), listener, async {
        let _ = rx.await;
    }));

    let response = tokio::task::spawn_blocking(move || {
        let body = r#"{"intent_text": "water the garden", "experience": "evening is best", "q_init": 0.4}"#;
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        write!(
            stream,
            "POST /memories HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(response.starts_with("HTTP/1.1 201"), "{response}");

    let app = router(engine.clone());
    post(&app, "/feedback", json!({"ids": [1], "reward": -0.5})).await;
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();

    let replayed = replay(&journal, None, DIM).unwrap();
    assert!(replayed.stopped_at.is_none());
    engine.with_store(|s| assert_eq!(&replayed.bank, s.bank()));
    assert_eq!(replayed.bank.get(1).unwrap().utility, mc_update(0.4, -0.5, 0.1).unwrap());
}
