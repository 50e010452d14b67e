//! Shared JSON-over-HTTP plumbing for the provider clients.

use serde_json::Value;

/// Transport-level outcome, mapped into each provider's error type.
#[derive(Debug)]
pub(crate) enum HttpCallError {
    Transport(String),
    Auth(String),
    Api { status: u16, body: String },
    Malformed(String),
}

pub(crate) fn build_agent(timeout_secs: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(std::time::Duration::from_secs(timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into()
}

/// POST a JSON body with bounded exponential-backoff retries on transport
/// errors, 429, and 5xx. Authentication failures and other 4xx statuses
/// fail immediately.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    max_retries: usize,
    backoff_base_ms: u64,
) -> Result<Value, HttpCallError> {
    let mut last_failure = String::new();
    for attempt in 0..=max_retries {
        if attempt > 0 {
            let backoff = backoff_base_ms << (attempt - 1);
            std::thread::sleep(std::time::Duration::from_millis(backoff));
        }
        let mut request = agent.post(url);
        if let Some(key) = api_key {
            request = request.header("authorization", &format!("Bearer {key}"));
        }
        match request.send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| HttpCallError::Transport(e.to_string()))?;
                match status {
                    200..=299 => {
                        return serde_json::from_str(&text).map_err(|e| {
                            HttpCallError::Malformed(format!("response JSON: {e}"))
                        });
                    }
                    401 | 403 => return Err(HttpCallError::Auth(text)),
                    429 | 500..=599 => {
                        last_failure = format!("status {status}: {text}");
                    }
                    other => {
                        return Err(HttpCallError::Api {
                            status: other,
                            body: text,
                        })
                    }
                }
            }
            Err(e) => {
                last_failure = e.to_string();
            }
        }
    }
    Err(HttpCallError::Transport(format!(
        "gave up after {} attempts: {last_failure}",
        max_retries + 1
    )))
}
