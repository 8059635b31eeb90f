mod common;

use std::net::SocketAddr;
use std::time::Duration;

use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use toxscope_server::api::handle_classify;
use toxscope_server::ranker::RankedWord;
use toxscope_server::{AppState, ClassifyRequest, RankSource, Ranker, RankerConfig, RankerMode};

const TOKEN_VAR: &str = "TOXSCOPE_TEST_RANKER_TOKEN";

async fn spawn_mock(app: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

fn remote(endpoint: String, token_env: &str, timeout_ms: u64) -> Ranker {
    std::env::set_var(TOKEN_VAR, "sekret");
    Ranker::new(RankerConfig {
        mode: RankerMode::Remote,
        endpoint: Some(endpoint),
        token_env: Some(token_env.to_string()),
        timeout_ms,
        ..RankerConfig::default()
    })
    .unwrap()
}

fn fallback() -> Vec<RankedWord> {
    vec![RankedWord {
        token: "fallback".into(),
        score: 1.0,
        position: Some(0),
    }]
}

async fn plain_reply(headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some("Bearer sekret") {
        return (StatusCode::UNAUTHORIZED, String::new());
    }
    assert!(body["prompt"]
        .as_str()
        .unwrap()
        .contains("they are worthless to them"));
    (StatusCode::OK, "worthless, them".into())
}

#[tokio::test]
async fn plain_text_reply_is_parsed() {
    let addr = spawn_mock(Router::new().route("/rank", post(plain_reply))).await;
    let ranker = remote(format!("http://{addr}/rank"), TOKEN_VAR, 2000);
    let (words, source) = ranker.rank("they are worthless to them", fallback()).await;
    assert_eq!(source, RankSource::Remote);
    let got: Vec<(&str, f64, Option<usize>)> = words
        .iter()
        .map(|w| (w.token.as_str(), w.score, w.position))
        .collect();
    assert_eq!(got, [("worthless", 1.0, Some(2)), ("them", 0.5, Some(4))]);
}

#[tokio::test]
async fn json_reply_is_parsed() {
    let app = Router::new().route(
        "/rank",
        post(|| async { Json(json!({"text": "1. Worthless\n2. they\n3. zebra"})) }),
    );
    let addr = spawn_mock(app).await;
    let ranker = remote(format!("http://{addr}/rank"), TOKEN_VAR, 2000);
    let (words, source) = ranker.rank("they are worthless to them", fallback()).await;
    assert_eq!(source, RankSource::Remote);
    let tokens: Vec<&str> = words.iter().map(|w| w.token.as_str()).collect();
    assert_eq!(tokens, ["worthless", "they", "zebra"]);
    assert_eq!(words[2].position, None);
}

#[tokio::test]
async fn failures_fall_back_to_attribution_ranking() {
    let slow = Router::new().route(
        "/rank",
        post(|| async {
            tokio::time::sleep(Duration::from_millis(1500)).await;
            "worthless"
        }),
    );
    let slow_addr = spawn_mock(slow).await;
    let error_addr = spawn_mock(Router::new().route(
        "/rank",
        post(|| async { StatusCode::INTERNAL_SERVER_ERROR }),
    ))
    .await;
    let empty_addr = spawn_mock(Router::new().route("/rank", post(|| async { " , " }))).await;
    let auth_addr = spawn_mock(Router::new().route("/rank", post(plain_reply))).await;

    // Grab a free port and release it so nothing is listening there.
    let closed = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();

    let cases = [
        remote(format!("http://{closed}/rank"), TOKEN_VAR, 2000),
        remote(format!("http://{slow_addr}/rank"), TOKEN_VAR, 100),
        remote(format!("http://{error_addr}/rank"), TOKEN_VAR, 2000),
        remote(format!("http://{empty_addr}/rank"), TOKEN_VAR, 2000),
        remote(
            format!("http://{auth_addr}/rank"),
            "TOXSCOPE_TEST_UNSET_VARIABLE",
            2000,
        ),
    ];
    for ranker in cases {
        let started = std::time::Instant::now();
        let (words, source) = ranker.rank("they are worthless to them", fallback()).await;
        assert_eq!(source, RankSource::Fallback);
        assert_eq!(words, fallback());
        assert!(started.elapsed() < Duration::from_millis(1200));
    }
}

#[tokio::test]
async fn classify_reports_remote_source() {
    let addr = spawn_mock(Router::new().route("/rank", post(|| async { "vile, tourists" }))).await;
    let state = AppState::new(
        common::registry(),
        remote(format!("http://{addr}/rank"), TOKEN_VAR, 2000),
    );
    let request = ClassifyRequest {
        text: "the vile tourists went to the park".into(),
        model_id: "small".into(),
        steps: Some(8),
    };
    let response = handle_classify(&state, request).await.unwrap();
    assert_eq!(response.ranker_source, RankSource::Remote);
    assert_eq!(response.ranked_tokens[0].token, "vile");
    assert_eq!(response.ranked_tokens[1].position, Some(2));
    assert_eq!(response.tokens.len(), 7);
}

#[test]
fn remote_mode_requires_endpoint_and_token_variable() {
    let config = RankerConfig {
        mode: RankerMode::Remote,
        ..RankerConfig::default()
    };
    assert!(Ranker::new(config.clone()).is_err());
    let with_endpoint = RankerConfig {
        endpoint: Some("http://127.0.0.1:1/".into()),
        ..config
    };
    assert!(Ranker::new(with_endpoint.clone()).is_err());
    assert!(Ranker::new(RankerConfig {
        timeout_ms: 0,
        token_env: Some(TOKEN_VAR.into()),
        ..with_endpoint
    })
    .is_err());
}
