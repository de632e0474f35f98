//! Integration tests for the HTTP backend against a local chat-completions
//! stub: wire shape, auth header, retry/backoff classification.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::Json;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};

use kairanban::{Backend, BackendError, CompletionRequest, HttpBackend, Message, RetryPolicy};

/// Starts the stub on an ephemeral port and returns its base URL.
async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}")
}

fn ok_body(text: &str) -> Json<Value> {
    Json(json!({"choices": [{"message": {"content": text}}]}))
}

fn fast_policy() -> RetryPolicy {
    RetryPolicy {
        max_retries: 2,
        base_delay: Duration::from_millis(2),
        jitter: 0.0,
    }
}

fn request() -> CompletionRequest {
    CompletionRequest::new(
        "demo-model",
        vec![Message::system("stay brief"), Message::user("hello?")],
    )
}

#[tokio::test]
async fn retries_a_rate_limited_request_then_succeeds() {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |_: Json<Value>| {
            let hits = seen.clone();
            async move {
                if hits.fetch_add(1, Ordering::SeqCst) == 0 {
                    (
                        StatusCode::TOO_MANY_REQUESTS,
                        Json(json!({"error": "slow down"})),
                    )
                } else {
                    (StatusCode::OK, ok_body("recovered"))
                }
            }
        }),
    );
    let base = serve(app).await;
    let backend = HttpBackend::new(&base, None).with_policy(fast_policy());

    let response = backend.complete(&request()).await.unwrap();
    assert_eq!(response.text, "recovered");
    assert_eq!(response.attempt_count, 2);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn does_not_retry_auth_failures() {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |_: Json<Value>| {
            let hits = seen.clone();
            async move {
                hits.fetch_add(1, Ordering::SeqCst);
                (StatusCode::UNAUTHORIZED, Json(json!({"error": "bad key"})))
            }
        }),
    );
    let base = serve(app).await;
    let backend = HttpBackend::new(&base, Some("wrong".into())).with_policy(fast_policy());

    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Auth { status: 401 }));
    assert_eq!(hits.load(Ordering::SeqCst), 1, "auth errors are terminal");
}

#[tokio::test]
async fn gives_up_after_max_retries_on_server_errors() {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |_: Json<Value>| {
            let hits = seen.clone();
            async move {
                hits.fetch_add(1, Ordering::SeqCst);
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    Json(json!({"error": "boom"})),
                )
            }
        }),
    );
    let base = serve(app).await;
    let backend = HttpBackend::new(&base, None).with_policy(fast_policy());

    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 500, .. }));
    assert_eq!(
        hits.load(Ordering::SeqCst),
        3,
        "one attempt plus max_retries"
    );
}

#[tokio::test]
async fn malformed_success_bodies_are_terminal() {
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = hits.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |_: Json<Value>| {
            let hits = seen.clone();
            async move {
                hits.fetch_add(1, Ordering::SeqCst);
                (StatusCode::OK, Json(json!({"unexpected": true})))
            }
        }),
    );
    let base = serve(app).await;
    let backend = HttpBackend::new(&base, None).with_policy(fast_policy());

    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

/// Request body plus the Authorization header it arrived with.
type CapturedRequest = Arc<Mutex<Option<(Value, Option<String>)>>>;

#[tokio::test]
async fn sends_the_chat_completions_wire_shape_and_bearer_key() {
    let captured: CapturedRequest = Arc::new(Mutex::new(None));
    let sink = captured.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |headers: HeaderMap, Json(body): Json<Value>| {
            let sink = sink.clone();
            async move {
                let auth = headers
                    .get("authorization")
                    .and_then(|v| v.to_str().ok())
                    .map(str::to_string);
                *sink.lock().unwrap() = Some((body, auth));
                (StatusCode::OK, ok_body("noted"))
            }
        }),
    );
    let base = serve(app).await;
    // Trailing slash must not produce a double-slash endpoint.
    let backend =
        HttpBackend::new(&format!("{base}/"), Some("secret-key".into())).with_policy(fast_policy());

    let mut req = request();
    req.temperature = 0.25;
    req.max_tokens = 77;
    backend.complete(&req).await.unwrap();

    let (body, auth) = captured.lock().unwrap().take().unwrap();
    assert_eq!(auth.as_deref(), Some("Bearer secret-key"));
    assert_eq!(body["model"], "demo-model");
    assert_eq!(body["temperature"], 0.25);
    assert_eq!(body["max_tokens"], 77);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "stay brief");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "hello?");
}

#[tokio::test]
async fn omits_the_authorization_header_without_a_key() {
    let captured: Arc<Mutex<Option<bool>>> = Arc::new(Mutex::new(None));
    let sink = captured.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |headers: HeaderMap, _: Json<Value>| {
            let sink = sink.clone();
            async move {
                *sink.lock().unwrap() = Some(headers.contains_key("authorization"));
                (StatusCode::OK, ok_body("anonymous"))
            }
        }),
    );
    let base = serve(app).await;
    let backend = HttpBackend::new(&base, None).with_policy(fast_policy());

    backend.complete(&request()).await.unwrap();
    assert_eq!(captured.lock().unwrap().take(), Some(false));
}

#[tokio::test]
async fn connection_failures_surface_as_transport_errors() {
    // Nothing listens on this port (bound but not serving would still accept;
    // use an address from the reserved test range instead).
    let backend = HttpBackend::new("http://127.0.0.1:9", None).with_policy(RetryPolicy {
        max_retries: 0,
        base_delay: Duration::from_millis(1),
        jitter: 0.0,
    });
    let err = backend.complete(&request()).await.unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)));
}
