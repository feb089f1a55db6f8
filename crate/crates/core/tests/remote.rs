mod common;

use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use common::{service, MockServer, SeenRequest};
use insta_core::embed::{Embedder, EmbeddingBackend, EmbeddingCache, RemoteBackend, RemoteConfig};
use insta_core::Error;

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        initial_backoff: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
        ..RemoteConfig::new(url)
    }
}

#[test]
fn batches_respect_batch_size_and_preserve_order() {
    let server = MockServer::start(service("mini", 6));
    let backend = RemoteBackend::connect(RemoteConfig {
        batch_size: 2,
        ..config(&server.url)
    })
    .unwrap();
    assert_eq!(backend.dim(), 6);
    assert_eq!(backend.model_id(), "mini");

    let texts = ["a", "b", "c", "d", "e"];
    let out = backend.embed_batch(&texts).unwrap();
    let reqs = server.embed_requests();
    assert_eq!(reqs.len(), 3);
    let sizes: Vec<usize> = reqs
        .iter()
        .map(|r| {
            let v: serde_json::Value = serde_json::from_str(&r.body).unwrap();
            assert_eq!(v["model"], "mini");
            v["texts"].as_array().unwrap().len()
        })
        .collect();
    assert_eq!(sizes, vec![2, 2, 1]);
    for (t, row) in texts.iter().zip(&out) {
        let want: Vec<f32> = common::fake_vector(t, 6).iter().map(|x| *x as f32).collect();
        assert_eq!(row, &want);
    }
}

#[test]
fn wrong_dimension_is_rejected() {
    let server = MockServer::start(Box::new(|req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, r#"{"status":"ok","model":"m","dim":384}"#.into()),
        _ => {
            let row = vec![0.1; 383];
            (200, serde_json::json!({"model":"m","dim":383,"embeddings":[row]}).to_string())
        }
    }));
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    assert!(matches!(
        backend.embed_batch(&["x"]),
        Err(Error::DimensionMismatch {
            expected: 384,
            actual: 383
        })
    ));
}

#[test]
fn short_row_is_rejected() {
    let server = MockServer::start(Box::new(|req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, r#"{"status":"ok","model":"m","dim":3}"#.into()),
        _ => (200, r#"{"model":"m","dim":3,"embeddings":[[0.1,0.2]]}"#.into()),
    }));
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    assert!(matches!(backend.embed_batch(&["x"]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn overflowing_number_is_a_protocol_error() {
    let server = MockServer::start(Box::new(|req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, r#"{"status":"ok","model":"m","dim":2}"#.into()),
        _ => (200, r#"{"model":"m","dim":2,"embeddings":[[1e999,0.5]]}"#.into()),
    }));
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    assert!(matches!(backend.embed_batch(&["x"]), Err(Error::Protocol(_))));
}

#[test]
fn model_mismatch_and_bad_status() {
    let server = MockServer::start(service("served", 4));
    let err = RemoteBackend::connect(RemoteConfig {
        model_id: Some("wanted".into()),
        ..config(&server.url)
    });
    assert!(matches!(err, Err(Error::Protocol(_))));

    let server = MockServer::start(Box::new(|req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, r#"{"status":"ok","model":"m","dim":2}"#.into()),
        _ => (400, r#"{"error":"bad"}"#.into()),
    }));
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    assert!(matches!(backend.embed_batch(&["x"]), Err(Error::Protocol(_))));
    // Client errors are not retried.
    assert_eq!(server.embed_requests().len(), 1);
}

#[test]
fn server_errors_are_retried_then_reported() {
    let server = MockServer::start(Box::new(|req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, r#"{"status":"ok","model":"m","dim":2}"#.into()),
        _ => (503, "{}".into()),
    }));
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    assert!(matches!(backend.embed_batch(&["x"]), Err(Error::BackendUnavailable(_))));
    assert_eq!(server.embed_requests().len(), 3);
}

#[test]
fn transient_failure_recovers() {
    let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let c = Arc::clone(&calls);
    let ok = service("m", 2);
    let server = MockServer::start(Box::new(move |req: &SeenRequest| {
        if req.path == "/v1/embed" && c.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
            return (500, "{}".into());
        }
        ok(req)
    }));
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    assert_eq!(backend.embed_batch(&["x", "y"]).unwrap().len(), 2);
}

fn closed_port_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}

#[test]
fn unreachable_service_is_unavailable() {
    let err = RemoteBackend::connect(config(&closed_port_url()));
    assert!(matches!(err, Err(Error::BackendUnavailable(_))));
}

#[test]
fn outage_leaves_cache_untouched() {
    let server = MockServer::start(service("m", 4));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("embeddings.bin");
    let backend = RemoteBackend::connect(config(&server.url)).unwrap();
    let cache = Arc::new(EmbeddingCache::open(&path).unwrap());
    let embedder = Embedder::new(Arc::new(backend)).with_cache(Arc::clone(&cache));
    embedder.embed_texts(&["warm"]).unwrap();
    let before = std::fs::read(&path).unwrap();
    assert_eq!(cache.len(), 1);

    // Same cache, a service that now fails every embed call.
    let failing = MockServer::start(Box::new(|req: &SeenRequest| match req.path.as_str() {
        "/healthz" => (200, r#"{"status":"ok","model":"m","dim":4}"#.into()),
        _ => (503, "{}".into()),
    }));
    let backend = RemoteBackend::connect(config(&failing.url)).unwrap();
    let embedder = Embedder::new(Arc::new(backend)).with_cache(Arc::clone(&cache));
    assert!(matches!(
        embedder.embed_texts(&["warm", "cold"]),
        Err(Error::BackendUnavailable(_))
    ));
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(cache.len(), 1);
    // Cached text is still served without the service.
    assert_eq!(embedder.embed_texts(&["warm"]).unwrap().len(), 1);
}

#[test]
fn vectors_are_normalized_by_the_embedder() {
    let server = MockServer::start(service("m", 5));
    let embedder = Embedder::new(Arc::new(RemoteBackend::connect(config(&server.url)).unwrap()));
    for v in embedder.embed_texts(&["p", "q"]).unwrap() {
        assert!((v.norm() - 1.0).abs() < 1e-6);
    }
}
