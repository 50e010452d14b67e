//! Canned single-shot HTTP server for exercising network clients in tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

/// Serves a fixed sequence of responses on a loopback port, one connection
/// per response, capturing each request body. The listener closes once the
/// responses run out, so further requests see a connection error.
pub(crate) struct CannedServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<String>>>,
    addr: std::net::SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl CannedServer {
    /// `responses` are (status, JSON body) pairs served in order.
    pub(crate) fn spawn(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let base_url = format!("http://{addr}");
        let requests = Arc::new(Mutex::new(Vec::new()));
        let captured = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream);
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let trimmed = line.trim_end();
                    if trimmed.is_empty() {
                        break;
                    }
                    if let Some(value) = trimmed
                        .to_ascii_lowercase()
                        .strip_prefix("content-length:")
                        .map(str::trim)
                        .and_then(|v| v.parse().ok())
                    {
                        content_length = value;
                    }
                }
                let mut request_body = vec![0u8; content_length];
                if content_length > 0 {
                    reader.read_exact(&mut request_body).expect("request body");
                }
                captured
                    .lock()
                    .unwrap()
                    .push(String::from_utf8_lossy(&request_body).into_owned());
                let reason = match status {
                    200 => "OK",
                    401 => "Unauthorized",
                    429 => "Too Many Requests",
                    500 => "Internal Server Error",
                    _ => "Status",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let mut stream = reader.into_inner();
                // The peer may already be gone (drained at drop time).
                let _ = stream.write_all(response.as_bytes());
                let _ = stream.flush();
            }
        });
        Self {
            base_url,
            requests,
            addr,
            handle: Some(handle),
        }
    }

    /// Request bodies captured so far, parsed as JSON.
    pub(crate) fn request_jsons(&self) -> Vec<serde_json::Value> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .map(|body| serde_json::from_str(body).expect("request body is JSON"))
            .collect()
    }
}

impl Drop for CannedServer {
    fn drop(&mut self) {
        // Unused canned responses leave the serving thread parked in
        // accept(); poke it with empty connections until it exits.
        if let Some(handle) = self.handle.take() {
            for _ in 0..100 {
                if handle.is_finished() {
                    break;
                }
                let _ = std::net::TcpStream::connect(self.addr);
                std::thread::sleep(std::time::Duration::from_millis(2));
            }
            let _ = handle.join();
        }
    }
}
