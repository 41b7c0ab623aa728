use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use signmotion_core::text::{EmbeddingSource, ExternalEncoder};
use signmotion_core::Error;

/// Minimal HTTP/1.1 server answering every request with `body`.
fn serve(body: String) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut request = vec![0u8; length];
            reader.read_exact(&mut request).unwrap();
            let json: serde_json::Value = serde_json::from_slice(&request).unwrap();
            assert!(json["text"].is_string());
            counter.fetch_add(1, Ordering::SeqCst);
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/embed"), hits)
}

fn fixed_vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.37).sin()).collect()
}

#[test]
fn returns_service_vector_and_caches_it() {
    let v = fixed_vector(768);
    let (url, hits) = serve(serde_json::json!({ "embedding": v }).to_string());
    let cache = tempfile::tempdir().unwrap();
    let enc = ExternalEncoder::new(url, Some(cache.path().to_path_buf()), 768);
    let first = enc.encode("hello there").unwrap();
    assert_eq!(first.vector, v);
    assert_eq!(first.source, EmbeddingSource::External);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    let second = enc.encode("hello there").unwrap();
    assert_eq!(second.vector, v);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 1);
}

#[test]
fn cache_hit_needs_no_service() {
    let v = fixed_vector(768);
    let (url, _) = serve(serde_json::json!({ "embedding": v }).to_string());
    let cache = tempfile::tempdir().unwrap();
    ExternalEncoder::new(url, Some(cache.path().to_path_buf()), 768).encode("cached words").unwrap();
    let offline = ExternalEncoder::new("http://127.0.0.1:9/embed", Some(cache.path().to_path_buf()), 768);
    assert_eq!(offline.encode("cached words").unwrap().vector, v);
    assert!(matches!(offline.encode("never seen"), Err(Error::EmbeddingUnavailable(_))));
}

#[test]
fn wrong_dimension_is_a_protocol_error() {
    let (url, _) = serve(serde_json::json!({ "embedding": fixed_vector(512) }).to_string());
    let enc = ExternalEncoder::new(url, None, 768);
    assert!(matches!(enc.encode("short vector"), Err(Error::Protocol(_))));
}
